use std::cell::{Ref, RefCell};
use std::rc::Rc;

/// A named, persistent parameter buffer.
///
/// Parameters outlive the per-step tapes: each training step binds them onto a
/// fresh tape as gradient leaves, and the optimizer writes updates back here.
/// Adam moments live alongside the data so checkpointing sees one object.
#[derive(Clone)]
pub struct Param(Rc<RefCell<ParamInner>>);

pub struct ParamInner {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub adam_t: u64,
    /// Bumped on every mutation; read by the trainer's update-order instrumentation.
    pub version: u64,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "param data length must match shape product");
        Param(Rc::new(RefCell::new(ParamInner {
            name: name.into(),
            shape,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            adam_t: 0,
            version: 0,
            data,
        })))
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param::new(name, shape, vec![0.0; n])
    }

    pub fn name(&self) -> String {
        self.0.borrow().name.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().data.len()
    }

    pub fn value(&self) -> Vec<f64> {
        self.0.borrow().data.clone()
    }

    pub fn borrow(&self) -> Ref<'_, ParamInner> {
        self.0.borrow()
    }

    pub fn version(&self) -> u64 {
        self.0.borrow().version
    }

    pub fn set_data(&self, data: &[f64]) {
        let mut inner = self.0.borrow_mut();
        assert_eq!(inner.data.len(), data.len(), "set_data length mismatch");
        inner.data.copy_from_slice(data);
        inner.version += 1;
    }

    pub fn set_adam_state(&self, m: &[f64], v: &[f64], t: u64) {
        let mut inner = self.0.borrow_mut();
        assert_eq!(inner.adam_m.len(), m.len(), "adam state length mismatch");
        inner.adam_m.copy_from_slice(m);
        inner.adam_v.copy_from_slice(v);
        inner.adam_t = t;
        inner.version += 1;
    }

    /// theta_bar <- nu * theta + (1 - nu) * theta_bar, elementwise.
    pub fn ema_from(&self, source: &Param, nu: f64) {
        let src = source.0.borrow();
        let mut dst = self.0.borrow_mut();
        assert_eq!(src.data.len(), dst.data.len(), "ema shape mismatch");
        for (d, s) in dst.data.iter_mut().zip(src.data.iter()) {
            *d = nu * s + (1.0 - nu) * *d;
        }
        dst.version += 1;
    }

    pub fn copy_from(&self, source: &Param) {
        let src = source.0.borrow().data.clone();
        self.set_data(&src);
    }

    /// In-place update used by the optimizer. Bumps the version once.
    pub(crate) fn with_inner_mut<R>(&self, f: impl FnOnce(&mut ParamInner) -> R) -> R {
        let mut inner = self.0.borrow_mut();
        let r = f(&mut inner);
        inner.version += 1;
        r
    }

    pub(crate) fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.0.borrow();
        write!(f, "Param({:?}, shape {:?})", inner.name, inner.shape)
    }
}

/// A flat collection of parameters updated together (one optimizer group).
#[derive(Clone, Default)]
pub struct ParamGroup {
    params: Vec<Param>,
}

impl ParamGroup {
    pub fn new() -> Self {
        ParamGroup { params: Vec::new() }
    }

    pub fn push(&mut self, p: Param) {
        self.params.push(p);
    }

    pub fn extend(&mut self, other: &ParamGroup) {
        self.params.extend(other.params.iter().cloned());
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Highest version across the group; the trainer's instrumentation
    /// compares these before/after update phases.
    pub fn version(&self) -> u64 {
        self.params.iter().map(|p| p.version()).max().unwrap_or(0)
    }

    pub fn find(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.borrow().name == name)
    }
}
