use std::cell::RefCell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_tape_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    pub(crate) tape: u64,
    pub(crate) index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Conv2d,
    BatchNorm,
    LayerNorm,
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    LogSigmoid,
    Softmax,
    Reshape,
    Concat,
    Slice,
    Sum,
    SumAxis,
    Mean,
    BilinearSample,
    DeformSample,
    UpsampleBilinear,
    GatherRows,
    ScatterRows,
}

impl OpKind {
    pub const ALL: [OpKind; 27] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Conv2d,
        OpKind::BatchNorm,
        OpKind::LayerNorm,
        OpKind::Relu,
        OpKind::Tanh,
        OpKind::Sigmoid,
        OpKind::Exp,
        OpKind::LogSigmoid,
        OpKind::Softmax,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Sum,
        OpKind::SumAxis,
        OpKind::Mean,
        OpKind::BilinearSample,
        OpKind::DeformSample,
        OpKind::UpsampleBilinear,
        OpKind::GatherRows,
        OpKind::ScatterRows,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Conv2d => "conv2d",
            OpKind::BatchNorm => "batchnorm",
            OpKind::LayerNorm => "layernorm",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Exp => "exp",
            OpKind::LogSigmoid => "log_sigmoid",
            OpKind::Softmax => "softmax",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Sum => "sum",
            OpKind::SumAxis => "sum_axis",
            OpKind::Mean => "mean",
            OpKind::BilinearSample => "bilinear_sample",
            OpKind::DeformSample => "deform_sample",
            OpKind::UpsampleBilinear => "upsample_bilinear",
            OpKind::GatherRows => "gather_rows",
            OpKind::ScatterRows => "scatter_rows",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Vector-Jacobian product of one recorded operation.
///
/// `needs[i]` tells whether input `i` is tracked; implementations may return
/// `None` for inputs that are not needed.
pub(crate) trait Backward {
    fn backward(&self, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    kind: OpKind,
    inputs: Vec<Option<usize>>,
    backward: Option<Box<dyn Backward>>,
}

struct Inner {
    id: u64,
    nodes: Vec<Node>,
    fault: Option<(OpKind, f64)>,
}

/// Records operations for reverse-mode differentiation.
///
/// A tape lives for one forward/backward pass. [`Tape::backward`] drains it;
/// tensors recorded before that point are then foreign to the tape.
pub struct Tape {
    inner: RefCell<Inner>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner {
                id: fresh_tape_id(),
                nodes: Vec::new(),
                fault: None,
            }),
            recording: true,
        }
    }

    /// A tape that evaluates operations without recording anything.
    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scale every gradient flowing out of operations of `kind` by `factor`.
    /// Exists so gradient checks can be shown to catch a wrong formula.
    #[doc(hidden)]
    pub fn inject_fault(&self, kind: OpKind, factor: f64) {
        self.inner.borrow_mut().fault = Some((kind, factor));
    }

    /// Register `value` as a differentiable input.
    pub fn leaf(&self, value: &Tensor) -> Tensor {
        if !self.recording {
            return value.detach();
        }
        let mut inner = self.inner.borrow_mut();
        let index = inner.nodes.len();
        inner.nodes.push(Node {
            kind: OpKind::Leaf,
            inputs: Vec::new(),
            backward: None,
        });
        Tensor::from_parts(
            value.shape().to_vec(),
            value.shared(),
            Some(NodeId {
                tape: inner.id,
                index,
            }),
        )
    }

    fn check_owner(&self, t: &Tensor) -> Result<Option<usize>> {
        match t.node {
            None => Ok(None),
            Some(id) if id.tape == self.inner.borrow().id => Ok(Some(id.index)),
            Some(_) => Err(TensorError::ForeignTape),
        }
    }

    /// Wrap a freshly computed output, recording a node when any input is
    /// tracked. `make_backward` runs only if a node is recorded.
    pub(crate) fn record<F>(
        &self,
        kind: OpKind,
        inputs: &[&Tensor],
        shape: Vec<usize>,
        data: Vec<f64>,
        make_backward: F,
    ) -> Result<Tensor>
    where
        F: FnOnce() -> Box<dyn Backward>,
    {
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(TensorError::NumericFault { op: kind, index });
        }
        let mut slots = Vec::with_capacity(inputs.len());
        for t in inputs {
            slots.push(self.check_owner(t)?);
        }
        let node = if self.recording && slots.iter().any(Option::is_some) {
            let mut inner = self.inner.borrow_mut();
            let index = inner.nodes.len();
            inner.nodes.push(Node {
                kind,
                inputs: slots,
                backward: Some(make_backward()),
            });
            Some(NodeId {
                tape: inner.id,
                index,
            })
        } else {
            None
        };
        Ok(Tensor::from_parts(shape, data.into(), node))
    }

    /// Reverse sweep from a scalar `loss`. Drains the tape.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.len() != 1 {
            return Err(TensorError::NotScalar(loss.shape().to_vec()));
        }
        let root = match self.check_owner(loss)? {
            Some(i) => i,
            None => return Err(TensorError::Detached),
        };
        let (mut nodes, tape_id, fault) = {
            let mut inner = self.inner.borrow_mut();
            let nodes = std::mem::take(&mut inner.nodes);
            let id = inner.id;
            inner.id = fresh_tape_id();
            (nodes, id, inner.fault)
        };
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root] = Some(vec![1.0]);
        for i in (0..=root).rev() {
            let node = &mut nodes[i];
            let Some(bw) = node.backward.take() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let mut input_grads = bw.backward(&g, &needs);
            drop(bw);
            if let Some((kind, factor)) = fault {
                if kind == node.kind {
                    for gi in input_grads.iter_mut().flatten() {
                        gi.iter_mut().for_each(|x| *x *= factor);
                    }
                }
            }
            for (slot, gi) in node.inputs.iter().zip(input_grads) {
                if let (Some(j), Some(gi)) = (slot, gi) {
                    match &mut grads[*j] {
                        Some(acc) => {
                            debug_assert_eq!(acc.len(), gi.len());
                            acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b);
                        }
                        empty => *empty = Some(gi),
                    }
                }
            }
        }
        // keep only leaf gradients
        for (node, g) in nodes.iter().zip(grads.iter_mut()) {
            if node.kind != OpKind::Leaf {
                *g = None;
            }
        }
        Ok(Gradients {
            tape: tape_id,
            grads,
        })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `leaf`, shaped like it.
    ///
    /// Leaves the loss does not depend on get an all-zero gradient; untracked
    /// tensors and tensors from other tapes get `None`.
    pub fn get(&self, leaf: &Tensor) -> Option<Tensor> {
        let id = leaf.node?;
        if id.tape != self.tape {
            return None;
        }
        match self.grads.get(id.index)? {
            Some(g) => Some(Tensor::new(leaf.shape(), g.clone()).expect("gradient shape")),
            None => Some(Tensor::zeros(leaf.shape())),
        }
    }
}
