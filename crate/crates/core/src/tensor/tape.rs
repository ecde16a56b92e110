//! The computation tape: a flat record of operations in creation order.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::{InnerWeak, Tensor, TensorError, TensorResult, Track};

/// Backward rule for one recorded operation: receives the gradient of the
/// loss with respect to the operation's output and scatters contributions
/// into the gradients of its inputs.
///
/// Closures capture input *data* (shared `Rc<Vec<f64>>` handles) and input
/// ids, never whole tensors, so the tape does not own anything that points
/// back at it.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &mut GradStore)>;

struct Node {
    out: usize,
    backward: BackwardFn,
}

struct TapeInner {
    nodes: RefCell<Vec<Node>>,
    next_id: Cell<usize>,
    /// Leaves registered through `var`, held weakly: if the caller dropped a
    /// leaf, nobody can read its gradient, so skipping it is sound.
    leaves: RefCell<Vec<(usize, InnerWeak)>>,
}

/// A gradient tape. Cloning produces another handle to the same tape.
///
/// One tape corresponds to one forward pass (or a few); training code
/// creates a fresh tape per minibatch, which doubles as the gradient reset.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            inner: Rc::new(TapeInner {
                nodes: RefCell::new(Vec::new()),
                next_id: Cell::new(0),
                leaves: RefCell::new(Vec::new()),
            }),
        }
    }

    /// Creates a tracked leaf variable on this tape.
    pub fn var(&self, shape: Vec<usize>, data: Vec<f64>) -> TensorResult<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                expected,
                got: data.len(),
            });
        }
        let id = self.fresh_id();
        let t = Tensor::raw(
            shape,
            data,
            true,
            Some(Track {
                tape: self.clone(),
                id,
            }),
        );
        self.inner.leaves.borrow_mut().push((id, t.downgrade()));
        Ok(t)
    }

    /// Creates a tracked leaf with the same shape and data as `source`.
    pub fn var_like(&self, source: &Tensor) -> Tensor {
        self.var(source.shape().to_vec(), source.data().to_vec())
            .expect("shape and data of an existing tensor are consistent")
    }

    /// Number of operations recorded so far.
    pub fn node_count(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub(crate) fn same_as(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn fresh_id(&self) -> usize {
        let id = self.inner.next_id.get();
        self.inner.next_id.set(id + 1);
        id
    }

    pub(crate) fn record(&self, out: usize, backward: BackwardFn) {
        self.inner.nodes.borrow_mut().push(Node { out, backward });
    }

    /// Replays the tape in reverse creation order starting from `seed_id`.
    ///
    /// Creation order is a topological order of the dataflow graph, so by
    /// the time a node's rule runs, the gradient of its output is complete.
    pub(crate) fn run_backward(&self, seed_id: usize) -> TensorResult<()> {
        let mut store = GradStore::new(self.inner.next_id.get());
        store.accumulate_owned(seed_id, vec![1.0]);
        {
            let nodes = self.inner.nodes.borrow();
            for node in nodes.iter().rev() {
                if let Some(dout) = store.take(node.out) {
                    (node.backward)(&dout, &mut store);
                }
            }
        }
        for (id, weak) in self.inner.leaves.borrow().iter() {
            if let Some(grad) = store.take(*id) {
                if let Some(inner) = weak.upgrade() {
                    inner.accumulate_grad_inner(&grad);
                }
            }
        }
        Ok(())
    }
}

/// Transient per-backward-pass gradient buffers, indexed by tensor id.
pub(crate) struct GradStore {
    bufs: Vec<Option<Vec<f64>>>,
}

impl GradStore {
    fn new(capacity: usize) -> GradStore {
        GradStore {
            bufs: vec![None; capacity],
        }
    }

    /// Adds `grad` into the buffer for `id`, allocating it on first touch.
    pub(crate) fn accumulate(&mut self, id: usize, grad: &[f64]) {
        match &mut self.bufs[id] {
            Some(existing) => {
                debug_assert_eq!(existing.len(), grad.len());
                for (e, g) in existing.iter_mut().zip(grad) {
                    *e += g;
                }
            }
            slot @ None => *slot = Some(grad.to_vec()),
        }
    }

    /// Like `accumulate` but consumes the buffer, avoiding a copy when the
    /// slot is empty (the common case).
    pub(crate) fn accumulate_owned(&mut self, id: usize, grad: Vec<f64>) {
        match &mut self.bufs[id] {
            Some(existing) => {
                debug_assert_eq!(existing.len(), grad.len());
                for (e, g) in existing.iter_mut().zip(&grad) {
                    *e += g;
                }
            }
            slot @ None => *slot = Some(grad),
        }
    }

    fn take(&mut self, id: usize) -> Option<Vec<f64>> {
        self.bufs[id].take()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn var_validates_data_length() {
        let tape = Tape::new();
        assert!(matches!(
            tape.var(vec![3], vec![1.0, 2.0]),
            Err(TensorError::DataLength { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn backward_on_scalar_leaf_gives_unit_gradient() {
        let tape = Tape::new();
        let x = tape.var(vec![1], vec![4.0]).unwrap();
        x.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let x = tape.var(vec![1], vec![4.0]).unwrap();
        x.backward().unwrap();
        x.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn fresh_tape_starts_empty() {
        let tape = Tape::new();
        assert_eq!(tape.node_count(), 0);
    }
}
