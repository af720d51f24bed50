//! Reverse-mode autodiff on dense row-major tensors.
//!
//! The design is a classic Wengert tape: a forward pass may run with or
//! without an active [`Recording`]. With one, every primitive appends a node
//! (operation kind, input node ids, output buffer) to a thread-local tape;
//! [`Recording::backward`] replays the nodes in reverse, accumulating
//! vector-Jacobian products, and frees the tape. Without one, primitives are
//! plain eager math and nothing is retained — that asymmetry is what the
//! training loop's memory instrumentation measures.
//!
//! Tensors are immutable after construction and cheap to clone (the buffer is
//! shared). `f32` is the training element type; `f64` exists for gradient
//! checking and oracles.

mod grad_check;
mod ops;
mod tape;

pub use grad_check::{grad_check, grad_check_sampled, GradCheckReport};
pub use ops::concat;
pub(crate) use ops::gather_map;
pub use tape::{Gradients, Recording, TapeStats};

#[doc(hidden)]
pub use tape::Tape;
pub(crate) use tape::TapeRef;

use std::cell::RefCell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::SplitRng;

/// Element precision of a tensor.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DType {
    F32,
    F64,
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => write!(f, "f32"),
            DType::F64 => write!(f, "f64"),
        }
    }
}

thread_local! {
    static TAPE_F32: RefCell<Option<Tape<f32>>> = const { RefCell::new(None) };
    static TAPE_F64: RefCell<Option<Tape<f64>>> = const { RefCell::new(None) };
}

/// Scalar element type a tensor can hold. Implemented for `f32` and `f64`.
///
/// Each element type owns one thread-local tape slot, so recordings in the
/// two precisions never interfere.
pub trait Elem:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;
    const BYTES: usize;

    fn from64(v: f64) -> Self;
    fn to64(self) -> f64;

    #[doc(hidden)]
    fn with_tape<R>(f: impl FnOnce(&mut Option<Tape<Self>>) -> R) -> R;
}

impl Elem for f32 {
    const DTYPE: DType = DType::F32;
    const BYTES: usize = 4;

    fn from64(v: f64) -> Self {
        v as f32
    }

    fn to64(self) -> f64 {
        self as f64
    }

    fn with_tape<R>(f: impl FnOnce(&mut Option<Tape<f32>>) -> R) -> R {
        TAPE_F32.with(|slot| f(&mut slot.borrow_mut()))
    }
}

impl Elem for f64 {
    const DTYPE: DType = DType::F64;
    const BYTES: usize = 8;

    fn from64(v: f64) -> Self {
        v
    }

    fn to64(self) -> f64 {
        self
    }

    fn with_tape<R>(f: impl FnOnce(&mut Option<Tape<f64>>) -> R) -> R {
        TAPE_F64.with(|slot| f(&mut slot.borrow_mut()))
    }
}

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

fn fresh_uid() -> u64 {
    NEXT_UID.fetch_add(1, Ordering::Relaxed)
}

/// Dense row-major tensor. Scalars have an empty shape.
#[derive(Clone, Debug)]
pub struct Tensor<E: Elem> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
    requires_grad: bool,
    uid: u64,
    node: Option<TapeRef>,
}

impl<E: Elem> Tensor<E> {
    pub(crate) fn new_internal(shape: Vec<usize>, data: Arc<Vec<E>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
            uid: fresh_uid(),
            node: None,
        }
    }

    /// Build a tensor from explicit contents; `data.len()` must equal the
    /// product of `shape`.
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements but {} were provided",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor::new_internal(shape.to_vec(), Arc::new(data)))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::new_internal(shape.to_vec(), Arc::new(vec![E::zero(); numel]))
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let numel = shape.iter().product();
        Tensor::new_internal(shape.to_vec(), Arc::new(vec![E::from64(v); numel]))
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new_internal(Vec::new(), Arc::new(vec![E::from64(v)]))
    }

    /// Trainable leaf: like [`Tensor::from_vec`] but participating in
    /// gradient computation.
    pub fn param(shape: &[usize], data: Vec<E>) -> Result<Self> {
        Ok(Tensor::from_vec(shape, data)?.requiring_grad())
    }

    /// Normal(0, std²) initialised tensor; draw order is row-major.
    pub fn randn(shape: &[usize], std: f64, rng: &mut SplitRng) -> Self {
        let numel = shape.iter().product();
        let data: Vec<E> = (0..numel)
            .map(|_| E::from64(rng.normal() * std))
            .collect();
        Tensor::new_internal(shape.to_vec(), Arc::new(data))
    }

    /// Mark this tensor as a gradient leaf.
    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        E::DTYPE
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Extract the value of a scalar tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "item() requires a scalar tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Value-equal tensor with no tape ancestry and no gradient requirement.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            requires_grad: false,
            uid: fresh_uid(),
            node: None,
        }
    }

    /// Same shape and gradient requirement, new contents.
    pub fn with_data(&self, data: Vec<E>) -> Result<Self> {
        if data.len() != self.numel() {
            return Err(Error::Dimension(format!(
                "replacement data has {} elements, shape {:?} needs {}",
                data.len(),
                self.shape,
                self.numel()
            )));
        }
        let mut t = Tensor::new_internal(self.shape.clone(), Arc::new(data));
        t.requires_grad = self.requires_grad;
        Ok(t)
    }

    /// Convert between element precisions.
    pub fn cast<F: Elem>(&self) -> Tensor<F> {
        let data: Vec<F> = self.data.iter().map(|&v| F::from64(v.to64())).collect();
        let mut t = Tensor::new_internal(self.shape.clone(), Arc::new(data));
        t.requires_grad = self.requires_grad;
        t
    }

    /// Largest elementwise absolute difference, in f64.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "max_abs_diff: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a.to64() - b.to64()).abs())
            .fold(0.0, f64::max))
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub(crate) fn node_ref(&self) -> Option<TapeRef> {
        self.node
    }

    pub(crate) fn set_node(&mut self, r: TapeRef) {
        self.node = Some(r);
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<E>> {
        Arc::clone(&self.data)
    }
}

/// Edge-inclusive symmetric reflection of an out-of-range index into
/// `0..n` (..., 2, 1, 0 | 0, 1, ..., n-1 | n-1, n-2, ...).
pub(crate) fn reflect_index(mut i: i64, n: i64) -> usize {
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}
