//! Dense `f64` arrays with tape-based reverse-mode differentiation, covering
//! the operations a deformable-attention BEV network needs, plus an AdamW
//! parameter store with a binary checkpoint format.
//!
//! ```
//! use bevr_tensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(&Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
//! let sq = tape.mul(&x, &x).unwrap();
//! let loss = tape.sum(&sq).unwrap();
//! let grads = tape.backward(&loss).unwrap();
//! assert_eq!(grads.get(&x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod checkpoint;
mod error;
pub mod gradcheck;
mod ops;
mod params;
mod tape;
mod tensor;

pub use checkpoint::CHECKPOINT_MAGIC;
pub use error::{Result, TensorError};
pub use ops::{BnStats, Conv2dSpec, NormMode};
pub use params::{is_buffer, AdamW, ParamStore, Precision, BUFFER_MARKER};
pub use tape::{Gradients, OpKind, Tape};
pub use tensor::Tensor;
