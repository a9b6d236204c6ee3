//! Softmax groups sum to one and bounded offsets stay within δ, for every
//! attention block and for traces taken from the assembled model.

#[path = "support/invariants.rs"]
mod support;

use proptest::prelude::*;
use support::{cross_trace, inter_trace, max_abs, model_traces, normalization_error, self_trace};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn inter_camera_weights_and_offsets(seed in any::<u64>(), gain in 0.1f64..400.0, input_scale in 0.01f64..100.0) {
        let tr = inter_trace(seed, gain, input_scale);
        prop_assert!(normalization_error(&tr.weights) <= 1e-6);
        prop_assert!(max_abs(&tr.offsets) <= 0.25, "offset {}", max_abs(&tr.offsets));
    }

    #[test]
    fn self_attention_weights(seed in any::<u64>(), gain in 0.1f64..100.0) {
        let tr = self_trace(seed, gain);
        prop_assert_eq!(tr.weights.shape(), &[16, 2, 4]);
        prop_assert!(normalization_error(&tr.weights) <= 1e-6);
    }

    #[test]
    fn cross_attention_weights(seed in any::<u64>(), gain in 0.1f64..100.0) {
        let tr = cross_trace(seed, gain);
        prop_assert_eq!(tr.weights.shape(), &[16, 4, 2, 6]);
        prop_assert_eq!(tr.offsets.shape(), &[16, 8, 2, 3, 2]);
        prop_assert!(normalization_error(&tr.weights) <= 1e-6);
    }
}

#[test]
fn saturated_offsets_reach_but_never_exceed_delta() {
    let tr = inter_trace(7, 1e4, 50.0);
    assert_eq!(max_abs(&tr.offsets), 0.25);
}

#[test]
fn every_trace_of_the_assembled_model_is_normalized() {
    let traces = model_traces(3);
    assert_eq!(traces.iter().filter(|t| t.0.starts_with("inter")).count(), 3);
    for (what, tr, bound) in &traces {
        assert!(normalization_error(&tr.weights) <= 1e-6, "{what}");
        if let Some(d) = bound {
            assert!(max_abs(&tr.offsets) <= *d, "{what}: offset {}", max_abs(&tr.offsets));
        }
    }
}
