//! Dense fp64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable n-dimensional array (row-major `f64`) with an
//! optional gradient buffer. Operations are recorded on a [`Tape`] whenever
//! any input participates in the gradient graph; [`Tape::backward`] replays
//! the recorded adjoints in reverse order and populates `grad` on every
//! `requires_grad` leaf reachable from the loss.
//!
//! Every forward op validates shapes and rejects non-finite outputs instead
//! of silently propagating NaN. There is no broadcasting beyond
//! scalar-tensor; mismatched shapes are an error.

mod ops;
mod serial;

pub use serial::{
    read_blob, read_tensor, write_blob, write_tensor, TensorBlob, TENSOR_FORMAT_VERSION,
    TENSOR_MAGIC,
};

use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

pub type TensorId = u64;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    ShapeDataMismatch { len: usize, shape: Vec<usize> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward: tape is empty")]
    EmptyTape,
    #[error("tensor io: {0}")]
    Io(#[from] std::io::Error),
    #[error("tensor decode: {0}")]
    Decode(String),
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid { op, msg: msg.into() }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> TensorId {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

struct Inner {
    id: TensorId,
    shape: Vec<usize>,
    data: Rc<[f64]>,
    /// Leaf marker: backward writes a gradient here.
    requires_grad: bool,
    /// Participates in the gradient graph (leaves and their descendants).
    tracked: bool,
    grad: RefCell<Option<Vec<f64>>>,
}

/// Immutable dense fp64 array, cheap to clone (shared storage).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl Tensor {
    fn from_parts(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, tracked: bool) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: data.into(),
                requires_grad,
                tracked,
                grad: RefCell::new(None),
            }),
        }
    }

    /// Constant tensor (not part of any gradient graph).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeDataMismatch { len: data.len(), shape: shape.to_vec() });
        }
        check_finite("new", &data)?;
        Ok(Self::from_parts(data, shape.to_vec(), false, false))
    }

    /// Trainable leaf: backward deposits `grad` here.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape: t.inner.shape.clone(),
                data: t.inner.data.clone(),
                requires_grad: true,
                tracked: true,
                grad: RefCell::new(None),
            }),
        })
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![v], &[1]).expect("finite scalar")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::from_parts(vec![0.0; numel], shape.to_vec(), false, false)
    }

    pub fn full(shape: &[usize], v: f64) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Self::new(vec![v; numel], shape)
    }

    /// Output of a recorded op: tracked iff any input was tracked.
    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, tracked: bool) -> Self {
        Self::from_parts(data, shape, false, tracked)
    }

    /// A view of the same storage cut off from the gradient graph.
    pub fn detach(&self) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape: self.inner.shape.clone(),
                data: self.inner.data.clone(),
                requires_grad: false,
                tracked: false,
                grad: RefCell::new(None),
            }),
        }
    }

    pub fn id(&self) -> TensorId {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    /// Scalar value; panics if the tensor is not 1-element.
    pub fn value(&self) -> f64 {
        assert!(self.is_scalar(), "value() on non-scalar tensor");
        self.inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn tracked(&self) -> bool {
        self.inner.tracked
    }

    pub fn grad(&self) -> Option<Ref<'_, [f64]>> {
        let r = self.inner.grad.borrow();
        if r.is_some() {
            Some(Ref::map(r, |g| g.as_deref().unwrap()))
        } else {
            None
        }
    }

    pub fn grad_vec(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn set_grad(&self, g: Vec<f64>) {
        debug_assert_eq!(g.len(), self.numel());
        *self.inner.grad.borrow_mut() = Some(g);
    }
}

/// One recorded operation with the handles its adjoint needs.
pub(crate) enum Op {
    Add { a: Tensor, b: Tensor, out: Tensor },
    Sub { a: Tensor, b: Tensor, out: Tensor },
    Mul { a: Tensor, b: Tensor, out: Tensor },
    Scale { a: Tensor, k: f64, out: Tensor },
    Offset { a: Tensor, out: Tensor },
    Matmul { a: Tensor, b: Tensor, out: Tensor },
    Conv2d { x: Tensor, w: Tensor, b: Option<Tensor>, stride: usize, padding: usize, out: Tensor },
    FracConv2d { x: Tensor, w: Tensor, b: Option<Tensor>, padding: usize, out: Tensor },
    Relu { x: Tensor, out: Tensor },
    LeakyRelu { x: Tensor, slope: f64, out: Tensor },
    Tanh { x: Tensor, out: Tensor },
    Sigmoid { x: Tensor, out: Tensor },
    InstanceNorm { x: Tensor, inv_std: Vec<f64>, out: Tensor },
    MeanAll { x: Tensor, out: Tensor },
    Abs { x: Tensor, out: Tensor },
    Log { x: Tensor, out: Tensor },
    Reshape { x: Tensor, out: Tensor },
}

impl Op {
    fn output(&self) -> &Tensor {
        match self {
            Op::Add { out, .. }
            | Op::Sub { out, .. }
            | Op::Mul { out, .. }
            | Op::Scale { out, .. }
            | Op::Offset { out, .. }
            | Op::Matmul { out, .. }
            | Op::Conv2d { out, .. }
            | Op::FracConv2d { out, .. }
            | Op::Relu { out, .. }
            | Op::LeakyRelu { out, .. }
            | Op::Tanh { out, .. }
            | Op::Sigmoid { out, .. }
            | Op::InstanceNorm { out, .. }
            | Op::MeanAll { out, .. }
            | Op::Abs { out, .. }
            | Op::Log { out, .. }
            | Op::Reshape { out, .. } => out,
        }
    }
}

/// Ordered record of executed operations, sufficient to replay adjoints.
///
/// A tape is confined to one thread of execution. Parallel work, if any,
/// happens across independent tapes, never within one.
#[derive(Default)]
pub struct Tape {
    entries: RefCell<Vec<Op>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.entries.borrow_mut().clear();
    }

    pub(crate) fn record(&self, op: Op) {
        self.entries.borrow_mut().push(op);
    }

    /// Replay adjoints in reverse, writing `grad = d loss / d leaf` into
    /// every `requires_grad` leaf reachable from `loss`. Clears the tape.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if !loss.is_scalar() {
            return Err(TensorError::NonScalarLoss { shape: loss.shape().to_vec() });
        }
        if self.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        let entries = self.entries.take();

        let mut grads: HashMap<TensorId, Vec<f64>> = HashMap::new();
        grads.insert(loss.id(), vec![1.0]);

        let mut leaves: Vec<Tensor> = Vec::new();
        let mut seen_leaves: HashSet<TensorId> = HashSet::new();

        let accumulate = |grads: &mut HashMap<TensorId, Vec<f64>>,
                              leaves: &mut Vec<Tensor>,
                              seen: &mut HashSet<TensorId>,
                              t: &Tensor,
                              delta: &[f64]| {
            if !t.tracked() {
                return;
            }
            if t.requires_grad() && seen.insert(t.id()) {
                leaves.push(t.clone());
            }
            let slot = grads.entry(t.id()).or_insert_with(|| vec![0.0; t.numel()]);
            for (s, d) in slot.iter_mut().zip(delta.iter()) {
                *s += d;
            }
        };

        for op in entries.iter().rev() {
            let out = op.output();
            let Some(g) = grads.remove(&out.id()) else { continue };
            ops::backward_op(op, &g, &mut |t: &Tensor, delta: &[f64]| {
                accumulate(&mut grads, &mut leaves, &mut seen_leaves, t, delta);
            });
        }

        for leaf in &leaves {
            if let Some(g) = grads.remove(&leaf.id()) {
                leaf.set_grad(g);
            }
        }
        Ok(())
    }
}
