//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records primitive operations as they run (define-by-run); the
//! tape is rebuilt every training step. [`backward`](Tensor::backward) replays
//! the records in reverse, accumulating gradients additively across fan-out.
//! Shape errors are programming errors and panic with a diagnostic naming the
//! op and both shapes; contract errors (non-scalar loss, consumed tape) return
//! [`Error`](crate::Error).

mod adam;
mod conv;
mod gradcheck;
mod ops;
mod param;

pub use adam::{adam_step_group, adam_update, AdamOutcome, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use gradcheck::{grad_check, grad_check_shaped};
pub use param::{Param, ParamGroup};

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::{Error, Result};

pub type NodeId = usize;

/// Backward-rule payloads. Inputs are node ids recorded at forward time.
#[derive(Debug)]
enum Record {
    Leaf { param: Option<Param> },
    Matmul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Exp { x: NodeId },
    Log { x: NodeId },
    Tanh { x: NodeId },
    Softplus { x: NodeId },
    LeakyRelu { x: NodeId },
    Square { x: NodeId },
    Negate { x: NodeId },
    Sum { x: NodeId },
    Mean { x: NodeId },
    SumAxis { x: NodeId, axis: usize },
    MeanAxis { x: NodeId, axis: usize },
    Broadcast { x: NodeId, from: Vec<usize> },
    Reshape { x: NodeId },
    Slice { x: NodeId, axis: usize, start: usize },
    Concat { inputs: Vec<NodeId>, axis: usize },
    ClipGrad { x: NodeId, bound: f64 },
    Conv2dS2 { x: NodeId, kernel: NodeId, dims: conv::ConvDims },
    ConvT2dS2 { x: NodeId, kernel: NodeId, dims: conv::ConvDims },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    record: Record,
}

struct TapeInner {
    nodes: Vec<Node>,
    /// Dedup map so a parameter bound twice fans out from a single leaf.
    bound: HashMap<usize, (NodeId, bool)>,
    consumed: bool,
}

/// Recording tape. Cheap to clone (shared handle); single-threaded by design —
/// distinct tapes on distinct threads are independent.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                bound: HashMap::new(),
                consumed: false,
            })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, record: Record) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { shape, data, grad: None, requires_grad, record });
        Tensor { tape: self.clone(), id }
    }

    /// Constant leaf (no gradient).
    pub fn leaf(&self, data: Vec<f64>, shape: &[usize]) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "leaf: shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        self.check_finite("leaf", &data);
        self.push(shape.to_vec(), data, false, Record::Leaf { param: None })
    }

    /// Leaf that participates in gradients (test harness entry point).
    pub fn leaf_grad(&self, data: Vec<f64>, shape: &[usize]) -> Tensor {
        let t = self.leaf(data, shape);
        self.inner.borrow_mut().nodes[t.id].requires_grad = true;
        t
    }

    pub fn scalar(&self, value: f64) -> Tensor {
        self.leaf(vec![value], &[])
    }

    /// Bind a persistent parameter as a gradient leaf. Binding the same
    /// parameter again returns the existing leaf so fan-out accumulates.
    pub fn param(&self, p: &Param) -> Tensor {
        self.bind(p, true)
    }

    /// Bind a parameter as a constant (stop-gradient view of frozen nets).
    pub fn param_frozen(&self, p: &Param) -> Tensor {
        self.bind(p, false)
    }

    fn bind(&self, p: &Param, trainable: bool) -> Tensor {
        let key = p.key();
        if let Some(&(id, was_trainable)) = self.inner.borrow().bound.get(&key) {
            assert_eq!(
                was_trainable,
                trainable,
                "param {:?} bound both trainable and frozen on one tape",
                p.name()
            );
            return Tensor { tape: self.clone(), id };
        }
        let t = self.push(
            p.shape(),
            p.value(),
            trainable,
            Record::Leaf { param: trainable.then(|| p.clone()) },
        );
        self.inner.borrow_mut().bound.insert(key, (t.id, trainable));
        t
    }

    /// Gradients of every bound trainable parameter, in binding order.
    /// Parameters the loss never reached are skipped.
    pub fn param_grads(&self) -> Vec<(Param, Vec<f64>)> {
        let inner = self.inner.borrow();
        let mut out = Vec::new();
        for node in &inner.nodes {
            if let Record::Leaf { param: Some(p) } = &node.record {
                if let Some(g) = &node.grad {
                    out.push((p.clone(), g.clone()));
                }
            }
        }
        out
    }

    fn check_finite(&self, op: &str, data: &[f64]) {
        if cfg!(debug_assertions) && data.iter().any(|v| !v.is_finite()) {
            panic!("{op}: non-finite input detected");
        }
    }

    fn shape_of(&self, id: NodeId) -> Vec<usize> {
        self.inner.borrow().nodes[id].shape.clone()
    }

    fn data_of(&self, id: NodeId) -> Vec<f64> {
        self.inner.borrow().nodes[id].data.clone()
    }

    fn requires_grad_of(&self, id: NodeId) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Run reverse accumulation from a scalar loss. Fails on a non-scalar
    /// loss or if this tape's backward already ran.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        assert!(self.same_tape(&loss.tape), "backward: loss from a different tape");
        {
            let mut inner = self.inner.borrow_mut();
            if inner.consumed {
                return Err(Error::Autograd("backward called twice on a consumed tape".into()));
            }
            let node = &inner.nodes[loss.id];
            if node.data.len() != 1 {
                return Err(Error::Autograd(format!(
                    "backward needs a scalar loss, got shape {:?}",
                    node.shape
                )));
            }
            inner.consumed = true;
            inner.nodes[loss.id].grad = Some(vec![1.0]);
        }

        for id in (0..=loss.id).rev() {
            self.backward_node(id);
        }
        Ok(())
    }

    fn backward_node(&self, id: NodeId) {
        let mut inner = self.inner.borrow_mut();
        if !inner.nodes[id].requires_grad || inner.nodes[id].grad.is_none() {
            return;
        }
        let d_out = inner.nodes[id].grad.clone().unwrap();
        let inner = &mut *inner;
        // Split borrows: the record is read from a raw copy of the id, inputs
        // are mutated through accumulate().
        macro_rules! acc {
            ($input:expr, $grad:expr) => {
                accumulate(&mut inner.nodes, $input, $grad)
            };
        }
        // Clone out the small per-op metadata to release the node borrow.
        let record = std::mem::replace(&mut inner.nodes[id].record, Record::Leaf { param: None });
        match &record {
            Record::Leaf { .. } => {}
            Record::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if inner.nodes[*a].requires_grad {
                    let mut da = vec![0.0; m * k];
                    // dA = dC * B^T
                    ops::dgemm_nt(m, n, k, &d_out, &inner.nodes[*b].data, &mut da);
                    acc!(*a, &da);
                }
                if inner.nodes[*b].requires_grad {
                    let mut db = vec![0.0; k * n];
                    // dB = A^T * dC
                    ops::dgemm_tn(k, m, n, &inner.nodes[*a].data, &d_out, &mut db);
                    acc!(*b, &db);
                }
            }
            Record::Add { a, b } => {
                if inner.nodes[*a].requires_grad {
                    acc!(*a, &d_out);
                }
                if inner.nodes[*b].requires_grad {
                    acc!(*b, &d_out);
                }
            }
            Record::Sub { a, b } => {
                if inner.nodes[*a].requires_grad {
                    acc!(*a, &d_out);
                }
                if inner.nodes[*b].requires_grad {
                    let neg: Vec<f64> = d_out.iter().map(|v| -v).collect();
                    acc!(*b, &neg);
                }
            }
            Record::Mul { a, b } => {
                if inner.nodes[*a].requires_grad {
                    let g: Vec<f64> =
                        d_out.iter().zip(&inner.nodes[*b].data).map(|(d, v)| d * v).collect();
                    acc!(*a, &g);
                }
                if inner.nodes[*b].requires_grad {
                    let g: Vec<f64> =
                        d_out.iter().zip(&inner.nodes[*a].data).map(|(d, v)| d * v).collect();
                    acc!(*b, &g);
                }
            }
            Record::Div { a, b } => {
                if inner.nodes[*a].requires_grad {
                    let g: Vec<f64> =
                        d_out.iter().zip(&inner.nodes[*b].data).map(|(d, v)| d / v).collect();
                    acc!(*a, &g);
                }
                if inner.nodes[*b].requires_grad {
                    let av = &inner.nodes[*a].data;
                    let bv = &inner.nodes[*b].data;
                    let g: Vec<f64> = d_out
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(d, (a, b))| -d * a / (b * b))
                        .collect();
                    acc!(*b, &g);
                }
            }
            Record::Exp { x } => {
                let y = &inner.nodes[id].data;
                let g: Vec<f64> = d_out.iter().zip(y).map(|(d, y)| d * y).collect();
                acc!(*x, &g);
            }
            Record::Log { x } => {
                let xv = &inner.nodes[*x].data;
                let g: Vec<f64> = d_out.iter().zip(xv).map(|(d, x)| d / x).collect();
                acc!(*x, &g);
            }
            Record::Tanh { x } => {
                let y = &inner.nodes[id].data;
                let g: Vec<f64> = d_out.iter().zip(y).map(|(d, y)| d * (1.0 - y * y)).collect();
                acc!(*x, &g);
            }
            Record::Softplus { x } => {
                let xv = &inner.nodes[*x].data;
                let g: Vec<f64> =
                    d_out.iter().zip(xv).map(|(d, x)| d * ops::sigmoid(*x)).collect();
                acc!(*x, &g);
            }
            Record::LeakyRelu { x } => {
                let xv = &inner.nodes[*x].data;
                let g: Vec<f64> = d_out
                    .iter()
                    .zip(xv)
                    .map(|(d, x)| if *x > 0.0 { *d } else { d * ops::LEAKY_SLOPE })
                    .collect();
                acc!(*x, &g);
            }
            Record::Square { x } => {
                let xv = &inner.nodes[*x].data;
                let g: Vec<f64> = d_out.iter().zip(xv).map(|(d, x)| 2.0 * d * x).collect();
                acc!(*x, &g);
            }
            Record::Negate { x } => {
                let g: Vec<f64> = d_out.iter().map(|d| -d).collect();
                acc!(*x, &g);
            }
            Record::Sum { x } => {
                let n = inner.nodes[*x].data.len();
                acc!(*x, &vec![d_out[0]; n]);
            }
            Record::Mean { x } => {
                let n = inner.nodes[*x].data.len();
                acc!(*x, &vec![d_out[0] / n as f64; n]);
            }
            Record::SumAxis { x, axis } => {
                let g = ops::spread_axis(&inner.nodes[*x].shape, *axis, &d_out, 1.0);
                acc!(*x, &g);
            }
            Record::MeanAxis { x, axis } => {
                let extent = inner.nodes[*x].shape[*axis] as f64;
                let g = ops::spread_axis(&inner.nodes[*x].shape, *axis, &d_out, 1.0 / extent);
                acc!(*x, &g);
            }
            Record::Broadcast { x, from } => {
                let to = &inner.nodes[id].shape;
                let g = ops::reduce_broadcast(from, to, &d_out);
                acc!(*x, &g);
            }
            Record::Reshape { x } => {
                acc!(*x, &d_out);
            }
            Record::Slice { x, axis, start } => {
                let g = ops::scatter_slice(
                    &inner.nodes[*x].shape,
                    *axis,
                    *start,
                    &inner.nodes[id].shape,
                    &d_out,
                );
                acc!(*x, &g);
            }
            Record::Concat { inputs, axis } => {
                let shapes: Vec<Vec<usize>> =
                    inputs.iter().map(|i| inner.nodes[*i].shape.clone()).collect();
                let parts = ops::split_concat(&shapes, *axis, &d_out);
                for (i, part) in inputs.iter().zip(parts) {
                    if inner.nodes[*i].requires_grad {
                        acc!(*i, &part);
                    }
                }
            }
            Record::ClipGrad { x, bound } => {
                let g: Vec<f64> = d_out.iter().map(|d| d.clamp(-bound, *bound)).collect();
                acc!(*x, &g);
            }
            Record::Conv2dS2 { x, kernel, dims } => {
                let (dx, dk) = conv::conv2d_backward(
                    dims,
                    &inner.nodes[*x].data,
                    &inner.nodes[*kernel].data,
                    &d_out,
                );
                if inner.nodes[*x].requires_grad {
                    acc!(*x, &dx);
                }
                if inner.nodes[*kernel].requires_grad {
                    acc!(*kernel, &dk);
                }
            }
            Record::ConvT2dS2 { x, kernel, dims } => {
                let (dx, dk) = conv::conv_transpose2d_backward(
                    dims,
                    &inner.nodes[*x].data,
                    &inner.nodes[*kernel].data,
                    &d_out,
                );
                if inner.nodes[*x].requires_grad {
                    acc!(*x, &dx);
                }
                if inner.nodes[*kernel].requires_grad {
                    acc!(*kernel, &dk);
                }
            }
        }
        inner.nodes[id].record = record;
    }
}

fn accumulate(nodes: &mut [Node], id: NodeId, grad: &[f64]) {
    let node = &mut nodes[id];
    debug_assert_eq!(node.data.len(), grad.len(), "gradient length mismatch");
    match &mut node.grad {
        Some(g) => {
            for (gi, d) in g.iter_mut().zip(grad) {
                *gi += d;
            }
        }
        None => node.grad = Some(grad.to_vec()),
    }
}

/// Handle to a value recorded on a tape.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: NodeId,
}

impl Tensor {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].data.len()
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.data_of(self.id)
    }

    /// The single element of a scalar tensor.
    pub fn scalar(&self) -> f64 {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        assert_eq!(node.data.len(), 1, "scalar() on shape {:?}", node.shape);
        node.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    /// Gradient accumulated by backward, if any reached this node.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.inner.borrow().nodes[self.id].grad.clone()
    }

    /// Copy of this value as a fresh constant leaf: gradients stop here.
    pub fn detach(&self) -> Tensor {
        let shape = self.shape();
        self.tape.leaf(self.value(), &shape)
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(self)
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(id {}, shape {:?})", self.id, self.shape())
    }
}

#[cfg(test)]
mod tests;
