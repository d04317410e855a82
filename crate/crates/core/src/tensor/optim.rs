use std::collections::HashMap;

use super::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Stochastic gradient descent with heavy-ball momentum:
/// `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: HashMap<ParamId, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!(
                "sgd: need lr > 0 and momentum in [0, 1), got lr={lr} momentum={momentum}"
            )));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: HashMap::new(),
        })
    }

    /// Update the listed parameters and clear their gradients.
    ///
    /// Frozen parameters are skipped untouched. A trainable parameter in the
    /// list without a gradient is an error and nothing is updated.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
        for &id in ids {
            let p = store.get(id);
            if p.trainable && p.tensor.grad.is_none() {
                return Err(Error::MissingGrad(p.name.clone()));
            }
        }
        for &id in ids {
            let p = store.get_mut(id);
            if !p.trainable {
                p.tensor.zero_grad();
                continue;
            }
            let grad = p.tensor.grad.take().expect("checked above");
            let v = self
                .velocity
                .entry(id)
                .or_insert_with(|| vec![0.0; grad.len()]);
            for ((w, vi), g) in p.tensor.data_mut().iter_mut().zip(v.iter_mut()).zip(&grad) {
                *vi = self.momentum * *vi + g;
                *w -= self.lr * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(value: f64, trainable: bool) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(value), trainable).unwrap();
        (s, id)
    }

    #[test]
    fn plain_step() {
        let (mut s, id) = store_with(1.0, true);
        s.get_mut(id).tensor.grad = Some(vec![2.0]);
        Sgd::new(0.1, 0.0).unwrap().step(&mut s, &[id]).unwrap();
        assert!((s.get(id).tensor.data()[0] - 0.8).abs() < 1e-15);
        assert!(s.get(id).tensor.grad.is_none());
    }

    #[test]
    fn frozen_parameter_is_untouched() {
        let (mut s, id) = store_with(1.0, false);
        s.get_mut(id).tensor.grad = Some(vec![123.0]);
        let mut opt = Sgd::new(0.5, 0.9).unwrap();
        for _ in 0..10 {
            opt.step(&mut s, &[id]).unwrap();
        }
        assert_eq!(s.get(id).tensor.data()[0].to_bits(), 1.0f64.to_bits());
    }

    #[test]
    fn momentum_two_steps_match_hand_recursion() {
        // v1 = g, p1 = p0 - lr g; v2 = mu g + g, p2 = p1 - lr (1 + mu) g
        let (p0, g, lr, mu) = (1.0, 0.5, 0.1, 0.9);
        let (mut s, id) = store_with(p0, true);
        let mut opt = Sgd::new(lr, mu).unwrap();
        for _ in 0..2 {
            s.get_mut(id).tensor.grad = Some(vec![g]);
            opt.step(&mut s, &[id]).unwrap();
        }
        let want = p0 - lr * g - lr * (1.0 + mu) * g;
        assert!((s.get(id).tensor.data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let (mut s, id) = store_with(1.0, true);
        let err = Sgd::new(0.1, 0.0).unwrap().step(&mut s, &[id]);
        assert!(matches!(err, Err(Error::MissingGrad(_))));
    }
}
