//! Dense f64 tensors and the reverse-mode differentiation engine.
//!
//! A [`Tensor`] is a plain value: shape + row-major data. Differentiable
//! computation happens on a [`Graph`](graph::Graph), a tape that records
//! every op as it executes and replays the chain rule backwards on demand.
//! All arithmetic is 64-bit; any op that produces a non-finite value fails
//! loudly instead of propagating NaNs.

pub mod adam;
pub mod graph;
pub(crate) mod kernels;
#[cfg(test)]
#[path = "tests.rs"]
mod op_tests;

pub use adam::AdamState;
pub use graph::{Graph, GraphMode, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} does not match data length {len}")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    #[error("{op}: expected {expected} input channels, got {got}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: kernel {kernel:?} larger than padded input {input:?}")]
    KernelTooLarge {
        op: &'static str,
        kernel: Vec<usize>,
        input: Vec<usize>,
    },
    #[error("{op}: 'same' padding requires odd kernel sizes, got {kernel:?}")]
    EvenKernelSamePadding {
        op: &'static str,
        kernel: Vec<usize>,
    },
    #[error("{op}: expected rank-{expected} input, got shape {got:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("{op}: shapes {a:?} and {b:?} are incompatible")]
    ShapeMismatch {
        op: &'static str,
        a: Vec<usize>,
        b: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of bounds for shape {shape:?}")]
    AxisOutOfBounds {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: scale {scale} is not positive")]
    NonPositiveScale { op: &'static str, scale: f64 },
    #[error("{op}: output dimension would be zero for input {input:?}")]
    DegenerateOutput { op: &'static str, input: Vec<usize> },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    LossNotScalar { shape: Vec<usize> },
    #[error("no labeled voxel under the mask; loss is undefined")]
    EmptyMask,
    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: u8, classes: usize },
    #[error("gradient for '{name}' contains a non-finite value; step aborted")]
    NonFiniteGradient { name: String },
    #[error("parameter '{name}' has no matching optimizer state")]
    UnknownParameter { name: String },
    #[error("{op}: operation requires a training-mode graph")]
    InferenceGraph { op: &'static str },
    #[error("stride must be >= 1")]
    ZeroStride,
    #[error("concat requires at least one input")]
    EmptyConcat,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Zero-padding behaviour of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output keeps the input spatial size at stride 1; zero-fill borders.
    Same,
    /// No padding; the kernel must fit inside the input.
    Valid,
}

/// Dense N-dimensional array of f64 in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor from raw data, checking the element count and that
    /// every value is finite.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                len: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "from_vec" });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Stores a gradient buffer; the shape invariant is enforced.
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape: self.shape.clone(),
                len: grad.len(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }
}

/// Total element count of a shape (empty shape = scalar, 1 element).
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}
