use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::ops::{self, Op};
use crate::params::{ParamId, ParamStore};

static GENERATION: AtomicU64 = AtomicU64::new(1);

pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<f64>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

pub(crate) struct TapeInner {
    pub(crate) nodes: Vec<Node>,
    /// Accumulated gradients, one slot per node. Only nodes that require
    /// grad ever get a buffer.
    pub(crate) grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, usize>,
}

/// Records operations in creation order. Every node's parents have smaller
/// ids than the node itself, so the recording order is a topological order.
pub struct Tape {
    generation: u64,
    pub(crate) inner: RefCell<TapeInner>,
}

impl Tape {
    pub fn new() -> Rc<Tape> {
        Rc::new(Tape {
            generation: GENERATION.fetch_add(1, Ordering::Relaxed),
            inner: RefCell::new(TapeInner {
                nodes: Vec::new(),
                grads: Vec::new(),
                params: HashMap::new(),
            }),
        })
    }

    /// Unique per tape within the process.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable input.
    pub fn leaf(self: &Rc<Self>, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape, values.len())?;
        Ok(self.push(Node {
            shape: shape.to_vec(),
            value: values,
            op: Op::Leaf,
            requires_grad: true,
        }))
    }

    /// A value that never receives gradient.
    pub fn constant(self: &Rc<Self>, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape, values.len())?;
        Ok(self.push(Node {
            shape: shape.to_vec(),
            value: values,
            op: Op::Leaf,
            requires_grad: false,
        }))
    }

    pub fn scalar(self: &Rc<Self>, value: f64) -> Tensor {
        self.push(Node {
            shape: Vec::new(),
            value: vec![value],
            op: Op::Leaf,
            requires_grad: false,
        })
    }

    pub fn zeros(self: &Rc<Self>, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        self.push(Node {
            shape: shape.to_vec(),
            value: vec![0.0; n],
            op: Op::Leaf,
            requires_grad: false,
        })
    }

    /// Binds a stored parameter as a leaf. Repeated calls for the same id
    /// return the same node, so gradients from every use meet in one place.
    pub fn param(self: &Rc<Self>, store: &ParamStore, id: ParamId) -> Tensor {
        if let Some(&node) = self.inner.borrow().params.get(&id) {
            return Tensor {
                tape: Rc::clone(self),
                id: node,
            };
        }
        let p = store.get(id);
        let t = self.push(Node {
            shape: p.shape.clone(),
            value: p.value.clone(),
            op: Op::Leaf,
            requires_grad: true,
        });
        self.inner.borrow_mut().params.insert(id, t.id);
        t
    }

    /// Adds `scale` times each bound parameter's tape gradient into the
    /// store's gradient buffers.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore, scale: f64) {
        let inner = self.inner.borrow();
        let mut bound: Vec<(&ParamId, &usize)> = inner.params.iter().collect();
        bound.sort_by_key(|(_, node)| **node);
        for (&pid, &node) in bound {
            if let Some(g) = &inner.grads[node] {
                let dst = &mut store.get_mut(pid).grad;
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += scale * s;
                }
            }
        }
    }

    pub(crate) fn push(self: &Rc<Self>, node: Node) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        inner.grads.push(None);
        Tensor {
            tape: Rc::clone(self),
            id: inner.nodes.len() - 1,
        }
    }
}

pub(crate) fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) || shape.iter().product::<usize>() != len {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            len,
        });
    }
    Ok(())
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone)]
pub struct Tensor {
    pub(crate) tape: Rc<Tape>,
    pub(crate) id: usize,
}

impl Tensor {
    pub fn tape(&self) -> &Rc<Tape> {
        &self.tape
    }

    /// Position of this tensor's node on its tape.
    pub fn node_id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].value.len()
    }

    pub fn values(&self) -> Vec<f64> {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn with_values<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.id].value)
    }

    /// First (for scalars, only) value.
    pub fn item(&self) -> f64 {
        self.tape.inner.borrow().nodes[self.id].value[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.inner.borrow().grads[self.id].clone()
    }

    /// Gradient, or zeros if nothing reached this tensor.
    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.grad().unwrap_or_else(|| vec![0.0; self.numel()])
    }

    /// Reverse sweep from this scalar. Gradients add onto whatever previous
    /// sweeps left behind.
    pub fn backward(&self) -> Result<()> {
        let mut guard = self.tape.inner.borrow_mut();
        let TapeInner { nodes, grads, .. } = &mut *guard;
        let root = &nodes[self.id];
        if root.value.len() != 1 {
            return Err(TensorError::NotScalar(root.shape.clone()));
        }
        if !root.requires_grad {
            // Constant loss: record the seed and stop.
            add_into(&mut grads[self.id], &[1.0]);
            return Ok(());
        }

        let mut pending: Vec<Option<Vec<f64>>> = vec![None; self.id + 1];
        pending[self.id] = Some(vec![1.0]);
        for i in (0..=self.id).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            ops::backward(&node.op, &g, &node.value, nodes, &mut pending);
            add_into(&mut grads[i], &g);
        }
        Ok(())
    }

    pub(crate) fn same_tape(&self, other: &Tensor) -> Result<()> {
        if Rc::ptr_eq(&self.tape, &other.tape) {
            Ok(())
        } else {
            Err(TensorError::TapeMismatch)
        }
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        let shown = &node.value[..node.value.len().min(8)];
        write!(
            f,
            "Tensor(#{} shape={:?} values={:?}{})",
            self.id,
            node.shape,
            shown,
            if node.value.len() > 8 { " .." } else { "" }
        )
    }
}
