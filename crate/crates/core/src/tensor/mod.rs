//! Dense float64 tensors, parameters, and the reverse-mode tape.

mod gemm;
mod kernels;
mod optim;
mod param;
mod tape;

pub use gemm::gemm;
pub use optim::Sgd;
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{softmax_rows, Gradients, Tape, Var};

use crate::error::{Error, Result};
use crate::rng::RngState;

/// Row-major n-dimensional array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Accumulated gradient, same length as `data` when present.
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} does not hold {} values", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    /// I.i.d. normal entries drawn from `rng`.
    pub fn gaussian(shape: &[usize], mean: f64, std: f64, rng: &mut RngState) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(format!("gaussian_init: empty shape {shape:?}")));
        }
        if !(std > 0.0) || !std.is_finite() || !mean.is_finite() {
            return Err(Error::invalid(format!(
                "gaussian_init: need finite mean and std > 0, got mean={mean} std={std}"
            )));
        }
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| mean + std * rng.normal()).collect();
        Tensor::new(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Elements per channel slice for an `[N, C, ...]` tensor.
    pub(crate) fn spatial(&self) -> usize {
        self.shape[2..].iter().product()
    }
}

/// Identity matrix of size `n`.
pub fn eye(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        t.data[i * n + i] = 1.0;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_rejects_bad_arguments() {
        let mut rng = RngState::new(0);
        assert!(Tensor::gaussian(&[2, 2], 0.0, 0.0, &mut rng).is_err());
        assert!(Tensor::gaussian(&[], 0.0, 1.0, &mut rng).is_err());
        assert!(Tensor::gaussian(&[3, 0], 0.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn gaussian_is_reproducible_and_seed_sensitive() {
        let a = Tensor::gaussian(&[2, 2], 0.0, 1.0, &mut RngState::new(11)).unwrap();
        let b = Tensor::gaussian(&[2, 2], 0.0, 1.0, &mut RngState::new(11)).unwrap();
        let c = Tensor::gaussian(&[2, 2], 0.0, 1.0, &mut RngState::new(12)).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn gaussian_moments_match_at_large_sample() {
        let t = Tensor::gaussian(&[100_000], 0.0, 1.0, &mut RngState::new(3)).unwrap();
        let n = t.numel() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }
}
