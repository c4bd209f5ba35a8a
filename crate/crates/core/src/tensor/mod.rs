//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Values are stored as `f64`. Under [`Precision::F32`] (the default) every
//! op output, gradient and parameter update is rounded to the nearest `f32`,
//! so training numerics and checkpoint payloads are 32-bit. Switching the
//! thread to [`Precision::F64`] gives full double precision for gradient
//! checking.
//!
//! A tensor produced by an op on at least one gradient-requiring input
//! records a node holding its inputs and a backward closure. The recorded
//! graph stays alive as long as the output tensor does, so `backward` may be
//! called repeatedly; gradients are added into the leaves' buffers each time.

mod autograd;
pub mod flops;
pub mod gradcheck;
pub(crate) mod kernels;
mod ops;

use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock, RwLockReadGuard, RwLockWriteGuard};

pub use autograd::Tape;

use crate::error::{Error, Result};

/// Numeric mode of the current thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

thread_local! {
    static PRECISION: Cell<Precision> = const { Cell::new(Precision::F32) };
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

pub fn precision() -> Precision {
    PRECISION.with(|p| p.get())
}

impl Precision {
    /// Switches the current thread to `self` until the guard is dropped.
    pub fn scoped(self) -> PrecisionGuard {
        let prev = PRECISION.with(|p| p.replace(self));
        PrecisionGuard { prev }
    }
}

pub struct PrecisionGuard {
    prev: Precision,
}

impl Drop for PrecisionGuard {
    fn drop(&mut self) {
        PRECISION.with(|p| p.set(self.prev));
    }
}

/// Runs `f` without recording any tape nodes.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = NO_GRAD.with(|g| g.replace(true));
    let out = f();
    NO_GRAD.with(|g| g.set(prev));
    out
}

fn grad_enabled() -> bool {
    !NO_GRAD.with(|g| g.get())
}

/// Rounds `values` to the current precision in place.
pub(crate) fn round_to_precision(values: &mut [f64]) {
    if precision() == Precision::F32 {
        for v in values {
            *v = *v as f32 as f64;
        }
    }
}

pub(crate) fn round_scalar(v: f64) -> f64 {
    match precision() {
        Precision::F32 => v as f32 as f64,
        Precision::F64 => v,
    }
}

/// Computes gradients for each input given the output gradient.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

pub(crate) struct Node {
    pub(crate) op: &'static str,
    pub(crate) inputs: Vec<Tensor>,
    pub(crate) backward: BackwardFn,
}

struct Inner {
    id: usize,
    shape: Vec<usize>,
    data: RwLock<Vec<f64>>,
    grad: Mutex<Option<Vec<f64>>>,
    requires_grad: AtomicBool,
    node: Option<Node>,
}

#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::dim("tensor", format!("invalid shape {shape:?}")));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::dim(
            "tensor",
            format!("shape {shape:?} needs {n} values, got {len}"),
        ));
    }
    Ok(())
}

impl Tensor {
    fn build(shape: Vec<usize>, mut data: Vec<f64>, requires_grad: bool, node: Option<Node>) -> Self {
        round_to_precision(&mut data);
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RwLock::new(data),
            grad: Mutex::new(None),
            requires_grad: AtomicBool::new(requires_grad),
            node,
        }))
    }

    /// Creates a leaf tensor that does not require gradients.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    pub fn from_f32(shape: &[usize], data: &[f32]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| v as f64).collect())
    }

    /// Creates a leaf tensor that accumulates gradients.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zeros: invalid shape")
    }

    pub fn scalar(v: f64) -> Self {
        Self::build(vec![1], vec![v], false, None)
    }

    /// Records the output of an op. A node is attached only when some input
    /// requires gradients and recording is enabled.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let tracked = grad_enabled() && inputs.iter().any(Tensor::requires_grad);
        let node = tracked.then(|| Node {
            op,
            inputs,
            backward,
        });
        Self::build(shape, data, tracked, node)
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(op, format!("expected rank-2 tensor, got shape {s:?}"))),
        }
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<f64>> {
        self.0.data.read().expect("tensor data lock poisoned")
    }

    /// Mutable access to a leaf's values (optimizer updates, perturbation).
    pub fn data_mut(&self) -> RwLockWriteGuard<'_, Vec<f64>> {
        self.0.data.write().expect("tensor data lock poisoned")
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().clone()
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data().iter().map(|&v| v as f32).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.load(Ordering::Relaxed)
    }

    /// Marks a leaf as trainable or frozen. Ignored for op outputs.
    pub fn set_requires_grad(&self, on: bool) {
        if self.0.node.is_none() {
            self.0.requires_grad.store(on, Ordering::Relaxed);
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    pub(crate) fn node(&self) -> Option<&Node> {
        self.0.node.as_ref()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.grad_lock().clone()
    }

    pub(crate) fn grad_lock(&self) -> MutexGuard<'_, Option<Vec<f64>>> {
        self.0.grad.lock().expect("tensor grad lock poisoned")
    }

    /// Resets the gradient buffer to zeros (allocating it if absent).
    pub fn zero_grad(&self) {
        *self.grad_lock() = Some(vec![0.0; self.numel()]);
    }

    /// Drops the gradient buffer entirely.
    pub fn clear_grad(&self) {
        *self.grad_lock() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut guard = self.grad_lock();
        let buf = guard.get_or_insert_with(|| vec![0.0; g.len()]);
        for (b, v) in buf.iter_mut().zip(g) {
            *b = round_scalar(*b + v);
        }
    }

    /// A new leaf with a copy of this tensor's values.
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.shape().to_vec(), self.to_vec(), false, None)
    }

    /// Overwrites a leaf's values; shapes must match.
    pub fn assign(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::dim(
                "assign",
                format!("{} values for shape {:?}", values.len(), self.shape()),
            ));
        }
        let mut d = self.data_mut();
        d.copy_from_slice(values);
        round_to_precision(&mut d);
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[0], vec![]).is_err());
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn f32_mode_rounds_values() {
        let t = Tensor::new(&[1], vec![0.1]).unwrap();
        assert_eq!(t.item(), 0.1f32 as f64);
        let _g = Precision::F64.scoped();
        let t = Tensor::new(&[1], vec![0.1]).unwrap();
        assert_eq!(t.item(), 0.1);
    }

    #[test]
    fn precision_guard_restores() {
        {
            let _g = Precision::F64.scoped();
            assert_eq!(precision(), Precision::F64);
        }
        assert_eq!(precision(), Precision::F32);
    }

    #[test]
    fn no_grad_skips_recording() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = no_grad(|| x.sum().unwrap());
        assert!(!y.requires_grad());
        assert!(y.is_leaf());
    }
}
