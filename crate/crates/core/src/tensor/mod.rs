//! Dense row-major tensors and the reverse-mode autodiff tape.
//!
//! Activations use the `(N, C, H, W)` layout throughout. A [`Tape`] records every
//! operation applied to tape variables ([`Var`]) and replays them in reverse on
//! [`Tape::backward`]. Model parameters live in a [`ParamStore`] and are bound
//! into a tape per forward pass.

mod gemm;
mod gradcheck;
pub mod ops;
mod real;
mod store;
mod tape;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, shape_err, Result};

pub use gemm::gemm;
pub use gradcheck::{grad_check, CheckReport, GradCheckOptions};
pub use real::Real;
pub use store::{ParamEntry, ParamId, ParamKind, ParamStore};
pub use tape::{Backward, GradSink, Tape, Var};

/// Initial content for [`Tensor::new`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fill {
    Constant(f64),
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, std: f64 },
}

/// A rank-N array with an optional gradient slot.
///
/// Values are shared copy-on-write, so binding a tensor into a [`Tape`] does not copy it.
#[derive(Clone, Debug)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(shape_err!("tensor shape must have at least one dimension"));
    }
    if let Some(d) = shape.iter().position(|&d| d == 0) {
        return Err(shape_err!("dimension {d} of shape {shape:?} is zero"));
    }
    Ok(())
}

/// Equal shapes and values; gradient slots are ignored.
impl<T: Real> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl<T: Real> Tensor<T> {
    /// Creates a tensor filled deterministically from `fill` and `seed`.
    pub fn new(shape: &[usize], fill: Fill, seed: u64) -> Result<Self> {
        validate_shape(shape)?;
        let n = numel(shape);
        let data: Vec<T> = match fill {
            Fill::Constant(c) => vec![T::from_f64(c); n],
            Fill::Uniform { lo, hi } => {
                if !(lo <= hi) {
                    return Err(invalid!("uniform fill needs lo <= hi, got ({lo}, {hi})"));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n).map(|_| T::from_f64(lo + (hi - lo) * rng.random::<f64>())).collect()
            }
            Fill::Normal { mean, std } => {
                let dist = Normal::new(mean, std)
                    .map_err(|e| invalid!("normal fill ({mean}, {std}): {e}"))?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
            }
        };
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        validate_shape(shape)?;
        if numel(shape) != data.len() {
            return Err(shape_err!(
                "shape {shape:?} holds {} values but {} were given",
                numel(shape),
                data.len()
            ));
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_vec(shape, vec![T::zero(); numel(shape)]).expect("zeros: invalid shape")
    }

    pub fn scalar(v: T) -> Self {
        Self::from_parts(vec![1], vec![v])
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data: Arc::new(data), requires_grad: false, grad: None }
    }

    pub(crate) fn from_shared(shape: Vec<usize>, data: Arc<Vec<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data, requires_grad: false, grad: None }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn shared(&self) -> &Arc<Vec<T>> {
        &self.data
    }

    /// Mutable view of the values; copies first if a tape still shares them.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        if numel(shape) != self.numel() {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        Ok(Self::from_shared(shape.to_vec(), self.data.clone()))
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.numel() {
            return Err(shape_err!("gradient length {} for tensor of {} values", g.len(), self.numel()));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| U::from_f64(v.as_f64())).collect()),
            requires_grad: self.requires_grad,
            grad: self.grad.as_ref().map(|g| g.iter().map(|v| U::from_f64(v.as_f64())).collect()),
        }
    }

    /// Debug check that every value is finite.
    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(crate::error::Error::Numerical(format!(
                "non-finite value {} at flat index {i}",
                self.data[i]
            ))),
        }
    }
}
