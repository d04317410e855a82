#![allow(dead_code)]

use fbn_core::tensor::{Tape, Tensor, Var};
use fbn_core::RngState;

/// Central-difference gradient check of `build` with respect to every input.
///
/// `build` receives a fresh tape plus one leaf per input and returns a scalar
/// loss. Returns the largest relative error `‖analytic − numeric‖ / ‖numeric‖`
/// over the inputs (an absolute error when the numeric norm vanishes).
pub fn grad_check<F>(inputs: &[Tensor], h: f64, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let run = |vals: &[Tensor]| -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), true).unwrap()).collect();
        let loss = build(&mut tape, &vars);
        (tape, vars, loss)
    };
    let (tape, vars, loss) = run(inputs);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut numeric = vec![0.0; input.numel()];
        for j in 0..input.numel() {
            let mut shifted = inputs.to_vec();
            shifted[i].data_mut()[j] += h;
            let (t, _, l) = run(&shifted);
            let plus = t.value(l).data()[0];
            shifted[i].data_mut()[j] -= 2.0 * h;
            let (t, _, l) = run(&shifted);
            let minus = t.value(l).data()[0];
            numeric[j] = (plus - minus) / (2.0 * h);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if norm > 1e-12 {
        diff / norm
    } else {
        diff
    }
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::gaussian(shape, 0.0, 1.0, &mut RngState::new(seed)).unwrap()
}

/// Squared distance to a fixed pseudo-random target, so every element of
/// `x` receives a distinct upstream gradient.
pub fn probe(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let n = tape.value(x).numel();
    let target = randn(&[n], seed ^ 0x5eed).into_data();
    tape.mse(x, &target).unwrap()
}
