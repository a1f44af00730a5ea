//! Dense-tensor kernels with tape-based reverse-mode differentiation.
//!
//! The op set is deliberately small: exactly what the attention fusion
//! blocks, the detection head, and the training losses need. Values are
//! held in f64; on-disk formats quantize to f32.

mod check;
mod ckpt;
mod ops;

pub use check::{
    check_op_gradient, finite_diff_check, op_gradient_suite, sample_coords, FdReport,
};
pub use ckpt::{load_checkpoint, save_checkpoint, CheckpointEntry};

use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("depthwise kernel size {size} is even; kernels must be odd")]
    EvenKernel { size: usize },
    #[error("backward requires a scalar loss, got {len} elements")]
    NonScalarLoss { len: usize },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

/// A value on (or off) the tape. Tensors holding `node = None` are
/// constants: gradients do not flow into or through them.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<Vec<f64>>,
    pub(crate) node: Option<usize>,
}

impl Tensor {
    /// A constant tensor, never tracked.
    pub fn constant(data: Vec<f64>, shape: &[usize]) -> Result<Self, TensorError> {
        check_shape_len("constant", &data, shape)?;
        check_finite("constant", &data)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![v]),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Whether gradients flow through this tensor.
    pub fn tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

fn check_shape_len(op: &'static str, data: &[f64], shape: &[usize]) -> Result<(), TensorError> {
    let want: usize = shape.iter().product();
    if data.len() != want {
        return Err(TensorError::Shape {
            op,
            detail: format!("data length {} vs shape {:?}", data.len(), shape),
        });
    }
    Ok(())
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<(), TensorError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// An input saved for backward: its data, shape, and tape position (if any).
#[derive(Debug)]
pub(crate) struct Saved {
    node: Option<usize>,
    data: Arc<Vec<f64>>,
    shape: Vec<usize>,
}

impl Saved {
    fn of(t: &Tensor) -> Self {
        Saved {
            node: t.node,
            data: t.data.clone(),
            shape: t.shape.clone(),
        }
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    DwConv2d { x: Saved, k: Saved, dilation: usize },
    Conv1x1 { x: Saved, w: Saved, b: Saved },
    GlobalAvgPool { x: Saved },
    FullyConnected { x: Saved, w: Saved, b: Saved },
    Sigmoid { x_node: Option<usize>, y: Arc<Vec<f64>> },
    Tanh { x_node: Option<usize>, y: Arc<Vec<f64>> },
    Exp { x_node: Option<usize>, y: Arc<Vec<f64>> },
    Ln { x: Saved },
    Clamp { x: Saved, lo: f64, hi: f64 },
    ConcatChannels { xs: Vec<Saved> },
    Slice { x: Saved, from: usize },
    BroadcastMul { x: Saved, v: Saved },
    MulSpatialGate { x: Saved, g: Saved },
    Hadamard { a: Saved, b: Saved },
    Add { a: Saved, b: Saved },
    Sub { a: Saved, b: Saved },
    Scale { x: Saved, c: f64 },
    Sum { x: Saved },
    Abs { x: Saved },
    SoftmaxChannels { x_node: Option<usize>, y: Arc<Vec<f64>>, hw: usize },
    SoftmaxVec { x_node: Option<usize>, y: Arc<Vec<f64>> },
    ChannelConv1d { x: Saved, k: Saved },
    GatherCell { x: Saved, row: usize, col: usize },
}

pub(crate) struct Node {
    pub(crate) op: Op,
}

/// Records one forward pass; single-owner, rebuilt every training step.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    named: std::collections::BTreeMap<String, Tensor>,
    grad_disabled: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// A tape that never tracks anything: pure evaluation, no activations
    /// saved, no gradients possible.
    pub fn inference() -> Self {
        Tape {
            grad_disabled: true,
            ..Tape::default()
        }
    }

    /// Binds a named parameter, reusing the existing leaf when the name was
    /// bound before on this tape - repeated use shares one gradient slot.
    /// Rebinding a name with different values or shape is an error.
    pub fn bind_named(
        &mut self,
        name: &str,
        data: &[f64],
        shape: &[usize],
        requires_grad: bool,
    ) -> Result<Tensor, TensorError> {
        if let Some(t) = self.named.get(name) {
            if t.shape() != shape || t.data() != data {
                return Err(TensorError::Usage(format!(
                    "parameter {name} rebound with different contents on one tape"
                )));
            }
            return Ok(t.clone());
        }
        let t = self.leaf(data.to_vec(), shape, requires_grad)?;
        self.named.insert(name.to_string(), t.clone());
        Ok(t)
    }

    /// The leaf a named parameter was bound to, if any.
    pub fn named(&self, name: &str) -> Option<&Tensor> {
        self.named.get(name)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Registers a parameter. Frozen parameters (`requires_grad = false`)
    /// never touch the tape, so no gradient storage can exist for them.
    pub fn leaf(
        &mut self,
        data: Vec<f64>,
        shape: &[usize],
        requires_grad: bool,
    ) -> Result<Tensor, TensorError> {
        check_shape_len("leaf", &data, shape)?;
        check_finite("leaf", &data)?;
        let node = if requires_grad && !self.grad_disabled {
            self.nodes.push(Node { op: Op::Leaf });
            Some(self.nodes.len() - 1)
        } else {
            None
        };
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node,
        })
    }

    pub(crate) fn emit(
        &mut self,
        op_name: &'static str,
        op: Op,
        tracked: bool,
        data: Vec<f64>,
        shape: Vec<usize>,
    ) -> Result<Tensor, TensorError> {
        check_finite(op_name, &data)?;
        let node = if tracked {
            self.nodes.push(Node { op });
            Some(self.nodes.len() - 1)
        } else {
            None
        };
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node,
        })
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every tracked
    /// leaf reachable from it.
    pub fn backward(&self, loss: &Tensor) -> Result<GradStore, TensorError> {
        if loss.len() != 1 {
            return Err(TensorError::NonScalarLoss { len: loss.len() });
        }
        let mut store = GradStore::default();
        let Some(loss_node) = loss.node else {
            return Ok(store); // constant loss: nothing reachable
        };
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss_node + 1];
        grads[loss_node] = Some(vec![1.0]);

        for id in (0..=loss_node).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            match &self.nodes[id].op {
                Op::Leaf => {
                    store.insert(id, gout);
                }
                other => ops::backward_op(other, &gout, &mut grads),
            }
        }
        Ok(store)
    }
}

/// Gradients keyed by leaf tape position.
#[derive(Default, Debug)]
pub struct GradStore {
    grads: std::collections::BTreeMap<usize, Vec<f64>>,
}

impl GradStore {
    fn insert(&mut self, node: usize, grad: Vec<f64>) {
        match self.grads.entry(node) {
            std::collections::btree_map::Entry::Occupied(mut e) => {
                for (a, b) in e.get_mut().iter_mut().zip(&grad) {
                    *a += b;
                }
            }
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(grad);
            }
        }
    }

    /// Gradient for a leaf tensor, if one was recorded.
    pub fn get(&self, leaf: &Tensor) -> Option<&[f64]> {
        leaf.node.and_then(|n| self.grads.get(&n)).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

pub(crate) fn accumulate(
    grads: &mut [Option<Vec<f64>>],
    node: Option<usize>,
    len: usize,
    write: impl FnOnce(&mut [f64]),
) {
    let Some(id) = node else { return };
    let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
    write(slot);
}
