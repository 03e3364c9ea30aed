//! Small layer engine with hand-written backward passes.
//!
//! Tensors are `[batch, length, channels]` (or `[batch, features]` for dense
//! layers), row-major. Layers are generic over the scalar so training can run
//! in f32 and gradient checks in f64.

mod adam;
mod batchnorm;
pub mod checkpoint;
mod conv;
mod dense;
pub mod gradcheck;
mod loss;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use rand::Rng;
use thiserror::Error;

pub use adam::{Adam, AdamConfig};
pub use batchnorm::{BatchNorm, BN_EPSILON, BN_MOMENTUM};
pub use checkpoint::{Checkpoint, CheckpointError, CheckpointHeader, ParamEntry, CHECKPOINT_MAGIC};
pub use conv::{conv_out_len, Conv1d};
pub use dense::Dense;
pub use gradcheck::{grad_check, grad_check_softmax_xent, layer_suite, GradCheckResult, SuiteRow};
pub use loss::{softmax, softmax_backward, softmax_xent};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch of {0} is too small for batch statistics")]
    BatchTooSmall(usize),
    #[error("target {index} out of range for {classes} classes")]
    IndexOutOfRange { index: usize, classes: usize },
    #[error("non-finite values after {0}")]
    NonFinite(String),
    #[error("backward called before forward in {0}")]
    NoCache(&'static str),
}

pub trait Scalar:
    num_traits::Float + Sum + AddAssign + SubAssign + MulAssign + Default + Debug + Send + Sync + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, NnError> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(NnError::ShapeMismatch(format!("rank {} not supported", shape.len())));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(NnError::ShapeMismatch(format!("shape {shape:?} needs {} values, got {}", shape.iter().product::<usize>(), data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); n] }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize), NnError> {
        match self.shape[..] {
            [b, l, c] => Ok((b, l, c)),
            _ => Err(NnError::ShapeMismatch(format!("expected [batch, length, channels], got {:?}", self.shape))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize), NnError> {
        match self.shape[..] {
            [b, f] => Ok((b, f)),
            _ => Err(NnError::ShapeMismatch(format!("expected [batch, features], got {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, NnError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(NnError::ShapeMismatch(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::of(v.as_f64())).collect() }
    }
}

/// Returns `NonFinite` in debug builds when `t` holds NaN or infinity.
pub(crate) fn check_finite<T: Scalar>(t: &Tensor<T>, at: &str) -> Result<(), NnError> {
    if cfg!(debug_assertions) && !t.is_finite() {
        return Err(NnError::NonFinite(at.to_string()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    /// Running statistics are stored as non-trainable params.
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: &str, shape: Vec<usize>, value: Vec<T>, trainable: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        Param { name: name.to_string(), shape, value, grad, trainable }
    }

    pub fn filled(name: &str, shape: Vec<usize>, v: T, trainable: bool) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![v; n], trainable)
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn rename(&mut self, prefix: &str) {
        self.name = format!("{prefix}.{}", self.name);
    }
}

/// Uniform in ±sqrt(6 / (fan_in + fan_out)).
pub fn glorot<T: Scalar, R: Rng>(fan_in: usize, fan_out: usize, n: usize, rng: &mut R) -> Vec<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| T::of(rng.random_range(-limit..limit))).collect()
}

pub trait Layer<T: Scalar> {
    /// Caches what `backward` needs.
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>, NnError>;
    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>, NnError>;
    fn params(&self) -> Vec<&Param<T>> {
        Vec::new()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        Vec::new()
    }
    /// Inputs at which the layer is not differentiable for a given probe step.
    fn kinks(&self, _x: &Tensor<T>, _step: f64) -> Option<Vec<bool>> {
        None
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Vec<bool>,
}

impl Relu {
    pub fn new() -> Self {
        Relu::default()
    }
}

impl<T: Scalar> Layer<T> for Relu {
    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>, NnError> {
        self.mask = x.data.iter().map(|&v| v > T::zero()).collect();
        let data = x.data.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        Ok(Tensor { shape: x.shape.clone(), data })
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        if dy.data.len() != self.mask.len() {
            return Err(NnError::ShapeMismatch("relu gradient size".into()));
        }
        let data = dy.data.iter().zip(&self.mask).map(|(&g, &m)| if m { g } else { T::zero() }).collect();
        Ok(Tensor { shape: dy.shape.clone(), data })
    }

    fn kinks(&self, x: &Tensor<T>, step: f64) -> Option<Vec<bool>> {
        Some(x.data.iter().map(|v| v.as_f64().abs() <= step).collect())
    }
}

/// Layers applied in order.
pub struct Sequential<T: Scalar> {
    pub layers: Vec<Box<dyn Layer<T> + Send>>,
}

impl<T: Scalar> Layer<T> for Sequential<T> {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>, NnError> {
        let mut h = x.clone();
        for l in self.layers.iter_mut() {
            h = l.forward(&h, train)?;
        }
        Ok(h)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let mut g = dy.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values_and_mask() {
        let mut r = Relu::new();
        let x = Tensor::new(vec![1, 3], vec![-1.0f64, 0.0, 2.0]).unwrap();
        assert_eq!(r.forward(&x, true).unwrap().data, vec![0.0, 0.0, 2.0]);
        let g = r.backward(&Tensor::new(vec![1, 3], vec![5.0, 5.0, 5.0]).unwrap()).unwrap();
        assert_eq!(g.data, vec![0.0, 0.0, 5.0]);
        let neg = Tensor::new(vec![1, 2], vec![-3.0f64, -0.5]).unwrap();
        assert!(r.forward(&neg, false).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tensor_shape_checked() {
        assert!(Tensor::new(vec![2, 2], vec![0.0f32; 3]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1], vec![0.0f32]).is_err());
        let t = Tensor::new(vec![2, 3, 4], vec![0.0f32; 24]).unwrap();
        assert_eq!(t.dims3().unwrap(), (2, 3, 4));
        assert_eq!(t.reshape(vec![2, 12]).unwrap().dims2().unwrap(), (2, 12));
    }
}
