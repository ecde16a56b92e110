//! Dense f64 tensors with tape-based reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable value: shape plus row-major data. Tensors
//! created through [`Tape::var`] are tracked leaves; operations applied to
//! tracked tensors record a backward rule on the tape, and
//! [`Tensor::backward`] replays those rules in reverse creation order to
//! accumulate gradients into the leaves. Creation order is a valid
//! topological order because every operation's inputs already exist when
//! the operation runs, so no explicit sort is needed.
//!
//! Gradients for intermediate values live in a transient buffer owned by the
//! backward pass; only leaf gradients persist (readable via
//! [`Tensor::grad`]). Repeated backward calls accumulate into leaf
//! gradients; dropping the tape and re-binding parameters to a fresh one is
//! the idiomatic "zero grad" between minibatches.

mod check;
mod conv;
mod ops;
mod tape;

pub use check::{gradient_check, CheckReport};
pub use conv::{batch_norm2d_eval, batch_norm2d_train, conv2d, global_avg_pool, max_pool2d};
pub use ops::{
    add, add_scalar, div, div_scalar, exp, gather1d, gather2d, l2_normalize_rows, log,
    masked_row_logsumexp, matmul, matmul_nt, mean_all, mean_axis, mul, mul_scalar, neg, relu, sub,
    sub_scalar, sum_all, sum_axis, NORM_FLOOR,
};
pub use tape::Tape;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

/// Error type for tensor construction and operations.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Two operands have incompatible shapes for the named operation.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// The provided data length does not match the product of the shape.
    DataLength { expected: usize, got: usize },
    /// The operation requires a different rank or extent than the input has.
    RankMismatch {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    /// Axis index out of range for the tensor's rank.
    InvalidAxis { axis: usize, rank: usize },
    /// An element index (gather, pooling window, ...) is out of bounds.
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    /// A value outside the mathematical domain of the operation (log of a
    /// non-positive number, division by zero, ...).
    DomainError { op: &'static str, value: f64 },
    /// A row passed to `l2_normalize_rows` has norm below the safe floor.
    DegenerateRow { row: usize, norm: f64 },
    /// Backward was requested on a tensor that is not a scalar.
    NonScalarBackward { numel: usize },
    /// Backward was requested on a tensor with no recorded history.
    NotOnTape,
    /// Operands were created on different tapes.
    TapeMismatch { op: &'static str },
    /// An operation's contract was violated (documented preconditions).
    ContractViolation {
        op: &'static str,
        message: String,
    },
    /// A non-finite value appeared where finite values are required.
    NonFinite { context: &'static str },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch between {left:?} and {right:?}")
            }
            TensorError::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
            TensorError::RankMismatch { op, expected, got } => {
                write!(f, "{op}: expected {expected}, got shape {got:?}")
            }
            TensorError::InvalidAxis { axis, rank } => {
                write!(f, "axis {axis} out of range for rank {rank}")
            }
            TensorError::IndexOutOfBounds { op, index, bound } => {
                write!(f, "{op}: index {index} out of bounds (limit {bound})")
            }
            TensorError::DomainError { op, value } => {
                write!(f, "{op}: value {value} outside operation domain")
            }
            TensorError::DegenerateRow { row, norm } => {
                write!(f, "row {row} has near-zero norm {norm:e}; cannot normalize")
            }
            TensorError::NonScalarBackward { numel } => {
                write!(f, "backward requires a scalar loss, got {numel} elements")
            }
            TensorError::NotOnTape => write!(f, "tensor has no recorded history to differentiate"),
            TensorError::TapeMismatch { op } => {
                write!(f, "{op}: operands belong to different tapes")
            }
            TensorError::ContractViolation { op, message } => {
                write!(f, "{op}: {message}")
            }
            TensorError::NonFinite { context } => {
                write!(f, "non-finite value encountered in {context}")
            }
        }
    }
}

impl std::error::Error for TensorError {}

pub type TensorResult<T> = Result<T, TensorError>;

/// Tracking information tying a tensor to a position on a tape.
#[derive(Clone)]
pub(crate) struct Track {
    pub(crate) tape: Tape,
    pub(crate) id: usize,
}

pub(crate) struct TensorInner {
    shape: Vec<usize>,
    /// Row-major data. Shared behind `Rc` so backward closures can capture
    /// values without holding a reference back to the tape (which would
    /// create a reference cycle).
    data: Rc<Vec<f64>>,
    requires_grad: bool,
    /// Persistent gradient, populated for leaves by the backward pass.
    grad: RefCell<Option<Vec<f64>>>,
    track: Option<Track>,
}

/// A dense, immutable, row-major f64 tensor. Cloning is cheap (shared data).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("tracked", &self.inner.track.is_some())
            .finish()
    }
}

impl Tensor {
    /// Creates an untracked constant tensor.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> TensorResult<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor::raw(shape, data, false, None))
    }

    /// Creates an untracked tensor filled with `value`.
    pub fn filled(shape: Vec<usize>, value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::raw(shape, vec![value; n], false, None)
    }

    /// Creates an untracked tensor of zeros.
    pub fn zeros(shape: Vec<usize>) -> Tensor {
        Tensor::filled(shape, 0.0)
    }

    /// Creates an untracked scalar (shape `[1]`).
    pub fn scalar(value: f64) -> Tensor {
        Tensor::raw(vec![1], vec![value], false, None)
    }

    /// Builds a rank-2 tensor from rows, which must all have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> TensorResult<Tensor> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    left: vec![c],
                    right: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub(crate) fn raw(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        track: Option<Track>,
    ) -> Tensor {
        Tensor {
            inner: Rc::new(TensorInner {
                shape,
                data: Rc::new(data),
                requires_grad,
                grad: RefCell::new(None),
                track,
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    /// Shared handle to the underlying storage, used by backward closures.
    pub(crate) fn data_rc(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.inner.data)
    }

    /// The value of a scalar tensor.
    pub fn item(&self) -> TensorResult<f64> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarBackward { numel: self.numel() });
        }
        Ok(self.inner.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_tracked(&self) -> bool {
        self.inner.track.is_some()
    }

    pub(crate) fn track(&self) -> Option<&Track> {
        self.inner.track.as_ref()
    }

    pub(crate) fn track_id(&self) -> Option<usize> {
        self.inner.track.as_ref().map(|t| t.id)
    }

    /// Accumulated gradient of this leaf, if backward has reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    /// Clears the persistent gradient of this leaf.
    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn downgrade(&self) -> std::rc::Weak<TensorInner> {
        Rc::downgrade(&self.inner)
    }

    /// Runs reverse-mode differentiation from this scalar, accumulating
    /// gradients into every tracked leaf that contributed to it.
    pub fn backward(&self) -> TensorResult<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarBackward { numel: self.numel() });
        }
        let track = self.inner.track.as_ref().ok_or(TensorError::NotOnTape)?;
        track.tape.run_backward(track.id)
    }
}

pub(crate) use tape::GradStore;

impl TensorInner {
    pub(crate) fn accumulate_grad_inner(&self, incoming: &[f64]) {
        let mut slot = self.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => {
                for (e, i) in existing.iter_mut().zip(incoming) {
                    *e += i;
                }
            }
            None => *slot = Some(incoming.to_vec()),
        }
    }
}

pub(crate) type InnerWeak = std::rc::Weak<TensorInner>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_data_length() {
        let err = Tensor::new(vec![2, 3], vec![1.0; 5]).unwrap_err();
        assert_eq!(err, TensorError::DataLength { expected: 6, got: 5 });
    }

    #[test]
    fn scalar_item_round_trips() {
        let t = Tensor::scalar(2.5);
        assert_eq!(t.item().unwrap(), 2.5);
        assert_eq!(t.shape(), &[1]);
    }

    #[test]
    fn item_on_non_scalar_is_an_error() {
        let t = Tensor::zeros(vec![2, 2]);
        assert!(matches!(
            t.item(),
            Err(TensorError::NonScalarBackward { numel: 4 })
        ));
    }

    #[test]
    fn from_rows_requires_rectangular_input() {
        let err = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0]]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn constants_are_untracked_and_gradless() {
        let t = Tensor::filled(vec![3], 1.5);
        assert!(!t.is_tracked());
        assert!(!t.requires_grad());
        assert!(t.grad().is_none());
    }

    #[test]
    fn backward_on_constant_reports_missing_history() {
        let t = Tensor::scalar(1.0);
        assert_eq!(t.backward().unwrap_err(), TensorError::NotOnTape);
    }
}
