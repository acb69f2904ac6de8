//! Dense f32 arrays forming a dynamic reverse-mode differentiation graph.
//!
//! Every operation that consumes an array tracking gradients records an op
//! node; `backward` on a scalar loss replays the graph in reverse. Data is
//! immutable after creation except for gradient accumulation and optimizer
//! updates on leaves.

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use super::ops::OpKind;
use super::rng::Rng;
use crate::error::{Error, Result};

pub(crate) struct Op {
    pub kind: OpKind,
    pub inputs: Vec<Array>,
}

pub(crate) struct Inner {
    pub shape: Vec<usize>,
    pub data: RefCell<Vec<f32>>,
    pub grad: RefCell<Option<Vec<f32>>>,
    pub requires_grad: Cell<bool>,
    pub op: Option<Op>,
    pub backward_done: Cell<bool>,
}

/// Shared handle to a graph node. Clones are shallow.
#[derive(Clone)]
pub struct Array(pub(crate) Rc<Inner>);

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
    static CHECKED: Cell<bool> = const { Cell::new(false) };
}

/// Run `f` without recording any graph nodes (inference / frozen passes).
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = NO_GRAD.with(|c| c.replace(true));
    let out = f();
    NO_GRAD.with(|c| c.set(prev));
    out
}

pub(crate) fn no_grad_active() -> bool {
    NO_GRAD.with(|c| c.get())
}

/// Checked mode scans every op output for NaN/Inf. Off by default.
pub fn set_checked(on: bool) {
    CHECKED.with(|c| c.set(on));
}

pub fn checked() -> bool {
    CHECKED.with(|c| c.get())
}

impl Array {
    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Result<Array> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::leaf(data, shape.to_vec()))
    }

    pub fn zeros(shape: &[usize]) -> Array {
        Self::leaf(vec![0.0; shape.iter().product()], shape.to_vec())
    }

    pub fn full(shape: &[usize], v: f32) -> Array {
        Self::leaf(vec![v; shape.iter().product()], shape.to_vec())
    }

    pub fn scalar(v: f32) -> Array {
        Self::leaf(vec![v], vec![1])
    }

    /// Standard-normal entries.
    pub fn randn(shape: &[usize], rng: &mut Rng) -> Array {
        let n: usize = shape.iter().product();
        Self::leaf((0..n).map(|_| rng.normal()).collect(), shape.to_vec())
    }

    pub(crate) fn leaf(data: Vec<f32>, shape: Vec<usize>) -> Array {
        Array(Rc::new(Inner {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(false),
            op: None,
            backward_done: Cell::new(false),
        }))
    }

    /// Builder: mark a leaf as trainable.
    pub fn requires_grad(self, on: bool) -> Array {
        self.0.requires_grad.set(on);
        self
    }

    /// Toggle trainability of a leaf (freeze/unfreeze).
    pub fn set_requires_grad(&self, on: bool) {
        debug_assert!(self.0.op.is_none(), "only leaves can change trainability");
        self.0.requires_grad.set(on);
    }

    pub fn requires_grad_flag(&self) -> bool {
        self.0.requires_grad.get()
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<f32>> {
        self.0.data.borrow()
    }

    pub fn values(&self) -> Vec<f32> {
        self.0.data.borrow().clone()
    }

    /// Scalar value; panics if not a single element.
    pub fn item(&self) -> f32 {
        let d = self.0.data.borrow();
        assert_eq!(d.len(), 1, "item() on non-scalar of shape {:?}", self.0.shape);
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrite the contents of a leaf in place (optimizer / checkpoint load).
    pub(crate) fn set_data(&self, new: &[f32]) {
        debug_assert!(self.0.op.is_none(), "only leaves may be overwritten");
        let mut d = self.0.data.borrow_mut();
        assert_eq!(d.len(), new.len());
        d.copy_from_slice(new);
    }

    pub(crate) fn accumulate_grad(&self, inc: &[f32]) {
        let mut g = self.0.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(inc) {
                    *a += b;
                }
            }
            None => *g = Some(inc.to_vec()),
        }
    }

    /// Move-in variant for freshly built gradient buffers.
    pub(crate) fn accumulate_grad_owned(&self, inc: Vec<f32>) {
        let mut g = self.0.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(&inc) {
                    *a += b;
                }
            }
            None => *g = Some(inc),
        }
    }

    /// Whether ops consuming this array must record a graph node.
    pub(crate) fn tracks_grad(&self) -> bool {
        self.0.requires_grad.get() || self.0.op.is_some()
    }

    pub(crate) fn node_id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Bit-exact equality of contents (shape and data).
    pub fn bits_eq(&self, other: &Array) -> bool {
        self.0.shape == other.0.shape
            && self
                .data()
                .iter()
                .zip(other.data().iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    pub(crate) fn result(
        data: Vec<f32>,
        shape: Vec<usize>,
        kind: OpKind,
        inputs: Vec<Array>,
        opname: &'static str,
    ) -> Result<Array> {
        if checked() && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: opname });
        }
        let record = !no_grad_active() && inputs.iter().any(Array::tracks_grad);
        Ok(Array(Rc::new(Inner {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(false),
            op: record.then_some(Op { kind, inputs }),
            backward_done: Cell::new(false),
        })))
    }
}

impl std::fmt::Debug for Array {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let d = self.data();
        let head: Vec<f32> = d.iter().take(8).copied().collect();
        write!(f, "Array{:?} {:?}{}", self.0.shape, head, if d.len() > 8 { "…" } else { "" })
    }
}
