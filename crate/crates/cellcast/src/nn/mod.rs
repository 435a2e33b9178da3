//! Minimal neural-network core: flat 64-bit arrays, layers with explicit
//! reverse-mode gradients, Adam, and a finite-difference gradient checker.
//!
//! There is no general autodiff graph. Each layer caches what its own
//! backward pass needs and accumulates gradients into per-parameter buffers.

mod adam;
mod conv;
mod dense;
mod gradcheck;
mod lstm;
mod persist;

pub use adam::{clip_global_norm, AdamState};
pub use conv::CausalConv1d;
pub use dense::{Dense, Tanh};
pub use gradcheck::{grad_check, mse, mse_grad};
pub use lstm::Lstm;
pub use persist::{load_params, load_params_into, save_params};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Dense row-major array of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct NdArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl NdArray {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        NdArray {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(NdArray {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Named parameter with its gradient buffer (same shape, zero-initialized).
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: NdArray,
    pub grad: NdArray,
}

impl Param {
    pub fn new(name: impl Into<String>, value: NdArray) -> Self {
        let grad = NdArray::zeros(value.shape());
        Param {
            name: name.into(),
            value,
            grad,
        }
    }
}

/// Contract shared by layers and assembled models: a forward pass that
/// caches its input, a backward pass that accumulates parameter gradients
/// and returns the gradient with respect to the input.
pub trait Differentiable {
    fn forward(&mut self, input: &NdArray) -> Result<NdArray>;

    /// Requires a prior `forward`; gradients accumulate into `Param::grad`.
    fn backward(&mut self, grad_out: &NdArray) -> Result<NdArray>;

    fn params(&self) -> Vec<&Param>;

    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(0.0);
        }
    }
}

/// Uniform init in +-sqrt(6 / (fan_in + fan_out)).
pub(crate) fn xavier_uniform(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> NdArray {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut out = NdArray::zeros(shape);
    for v in out.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
    out
}

/// Elementwise sum of two equally shaped arrays. The gradient of the sum
/// passes through unchanged to both addends.
pub fn add(a: &NdArray, b: &NdArray) -> Result<NdArray> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "add: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| x + y)
        .collect();
    NdArray::from_vec(a.shape(), data)
}

pub(crate) fn backward_without_forward(layer: &str) -> Error {
    Error::Validation(format!("{layer}: backward called before forward"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(NdArray::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(NdArray::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn add_requires_equal_shapes() {
        let a = NdArray::zeros(&[2, 2]);
        let b = NdArray::zeros(&[4]);
        assert!(add(&a, &b).is_err());
    }

    #[test]
    fn add_identity() {
        let a = NdArray::from_vec(&[3], vec![1.0, -2.0, 3.5]).unwrap();
        let z = NdArray::zeros(&[3]);
        assert_eq!(add(&a, &z).unwrap(), a);
    }

    #[test]
    fn xavier_is_deterministic_and_bounded() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = xavier_uniform(&mut r1, &[4, 4], 4, 4);
        let b = xavier_uniform(&mut r2, &[4, 4], 4, 4);
        assert_eq!(a, b);
        let bound = (6.0 / 8.0f64).sqrt();
        assert!(a.data().iter().all(|v| v.abs() < bound));
    }
}
