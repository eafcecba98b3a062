//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation in forward execution order; calling
//! [`Tape::backward`] walks the record once in reverse and accumulates
//! gradients into each tensor on the path to the loss. The op set is the
//! minimum needed for a toy transformer and the contrastive loss. All
//! arithmetic is 64-bit so analytic gradients can be held to tight
//! finite-difference tolerances.

mod attention;
mod fd;
mod ops;
mod params;

pub use attention::{self_attention, SelfAttention};
pub use fd::{fd_check_with_fault, finite_difference_check, FdReport};
pub use params::{Adam, Binding, ParamId, ParamSet, Parameter};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },
    #[error("backward() already ran on this graph; build a fresh tape instead of reusing it")]
    BackwardAlreadyRun,
    #[error("backward() needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

/// Dense row-major tensor. `grad` is populated by [`Tape::backward`] for
/// every tensor with `requires_grad` on the path to the loss.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not cover {} elements",
            shape,
            data.len()
        );
        Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value], false)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows/cols view: a 1-D tensor counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on {}-d tensor", self.shape.len()),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on {}-d tensor", self.shape.len()),
        }
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node {
    pub tensor: Tensor,
    pub op: ops::Op,
    pub needs_grad: bool,
}

/// Append-only operation record. Recording order equals forward execution
/// order; backward traverses the record exactly once, in reverse.
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf tensor. Gradients are collected for it when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad;
        self.push(tensor, ops::Op::Leaf, needs)
    }

    /// Records a constant leaf (no gradient).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        self.leaf(Tensor::new(shape, data, false))
    }

    pub fn scalar_const(&mut self, value: f64) -> Var {
        self.constant(vec![1], vec![value])
    }

    pub(crate) fn push(&mut self, tensor: Tensor, op: ops::Op, needs_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            tensor,
            op,
            needs_grad,
        });
        Var(id)
    }

    pub fn tensor(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].tensor.data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].tensor.shape
    }

    /// Scalar value of a one-element tensor.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = self.tensor(v);
        assert_eq!(t.len(), 1, "scalar_value on shape {:?}", t.shape);
        t.data[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    pub(crate) fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Reverse pass from a scalar loss. Errors if the loss is not scalar,
    /// is non-finite, or if backward already ran on this tape: gradients
    /// never accumulate silently across calls.
    pub fn backward(&mut self, loss: Var) -> Result<(), AdError> {
        if self.backward_done {
            return Err(AdError::BackwardAlreadyRun);
        }
        let loss_tensor = &self.nodes[loss.0].tensor;
        if loss_tensor.len() != 1 {
            return Err(AdError::NonScalarLoss(loss_tensor.shape.clone()));
        }
        if !loss_tensor.data[0].is_finite() {
            return Err(AdError::Numeric {
                op: "backward",
                detail: format!("loss is {}", loss_tensor.data[0]),
            });
        }
        self.backward_done = true;
        for node in self.nodes.iter_mut() {
            if node.needs_grad {
                node.tensor.grad = Some(vec![0.0; node.tensor.data.len()]);
            }
        }
        if let Some(g) = self.nodes[loss.0].tensor.grad.as_mut() {
            g[0] = 1.0;
        } else {
            // Loss does not depend on any differentiable leaf; nothing to do.
            return Ok(());
        }
        for id in (0..self.nodes.len()).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            ops::backward_step(self, id)?;
        }
        Ok(())
    }
}
