//! Neural tangent kernels of fully-connected networks trained BN-only.
//!
//! Network: for `l = 1..L−1`, `h = x W + b` (frozen), batch-normalize `h`
//! over the whole input set, apply the trainable BN affine, then `φ`. Layer
//! `L` is a frozen scalar readout. The empirical kernel is the Gram matrix
//! of output gradients with respect to all BN parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{ParamId, ParamStore, Sgd, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Relu,
    Erf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnWeightForm {
    /// Per-unit scale (standard BatchNorm).
    Diagonal,
    /// A dense `n_l × n_l` matrix applied to the normalized activations.
    FullMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FcnBnConfig {
    /// Number of fully-connected layers `L`; layers `1..L−1` carry BN.
    pub depth: usize,
    /// `n_0..n_L`; `n_L` must be 1.
    pub widths: Vec<usize>,
    pub nonlinearity: Nonlinearity,
    pub bn_weight_form: BnWeightForm,
    pub sigma_w: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for FcnBnConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            widths: vec![8, 128, 128, 1],
            nonlinearity: Nonlinearity::Relu,
            bn_weight_form: BnWeightForm::Diagonal,
            sigma_w: 2f64.sqrt(),
            eps: 1e-5,
            seed: 0,
        }
    }
}

impl FcnBnConfig {
    /// Hidden widths set to `width`, keeping depth and input size.
    pub fn with_width(&self, width: usize) -> Self {
        let mut c = self.clone();
        for w in &mut c.widths[1..self.depth] {
            *w = width;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 || self.widths.len() != self.depth + 1 {
            return Err(Error::invalid("fcn-bn needs depth >= 2 and depth + 1 widths"));
        }
        if self.widths.contains(&0) || self.widths[self.depth] != 1 {
            return Err(Error::invalid("widths must be positive with a scalar output"));
        }
        if !(self.sigma_w > 0.0) || !(self.eps > 0.0) {
            return Err(Error::invalid("sigma_w and eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FcLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct BnAffine {
    /// `[n]` (diagonal) or `[n, n]` (full matrix).
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Debug)]
pub struct FcnBn {
    pub config: FcnBnConfig,
    pub store: ParamStore,
    pub fc: Vec<FcLayer>,
    pub bn: Vec<BnAffine>,
}

impl FcnBn {
    /// FC weights and biases `N(0, σ_w²/n_{l−1})`, frozen. BN scale and shift
    /// `N(0, 1)`; a full-matrix scale uses `N(0, 1/n_l)` entries.
    pub fn build(config: &FcnBnConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut fc = Vec::new();
        let mut bn = Vec::new();
        let seed = config.seed;
        let gauss = |store: &mut ParamStore, name: String, shape: &[usize], std: f64, trainable: bool| {
            let mut rng = RngState::derive(seed, &name);
            let t = Tensor::gaussian(shape, 0.0, std, &mut rng)?;
            store.add(name, t, trainable)
        };
        for l in 1..=config.depth {
            let (nin, nout) = (config.widths[l - 1], config.widths[l]);
            let std = config.sigma_w / (nin as f64).sqrt();
            fc.push(FcLayer {
                weight: gauss(&mut store, format!("fc{l}.weight"), &[nin, nout], std, false)?,
                bias: gauss(&mut store, format!("fc{l}.bias"), &[nout], std, false)?,
            });
            if l < config.depth {
                let gamma = match config.bn_weight_form {
                    BnWeightForm::Diagonal => gauss(&mut store, format!("bn{l}.gamma"), &[nout], 1.0, true)?,
                    BnWeightForm::FullMatrix => {
                        gauss(&mut store, format!("bn{l}.gamma"), &[nout, nout], 1.0 / (nout as f64).sqrt(), true)?
                    }
                };
                let beta = gauss(&mut store, format!("bn{l}.beta"), &[nout], 1.0, true)?;
                bn.push(BnAffine { gamma, beta });
            }
        }
        Ok(Self {
            config: config.clone(),
            store,
            fc,
            bn,
        })
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.store.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.tensor.numel()).sum()
    }

    /// Outputs `[n, 1]` for inputs `[n, n_0]`, with BN statistics over the
    /// whole input set.
    pub fn forward(&self, tape: &mut Tape, inputs: &Tensor) -> Result<Var> {
        let s = inputs.shape();
        if s.len() != 2 || s[1] != self.config.widths[0] {
            return Err(Error::shape("fcn_bn", format!("expected [n, {}], got {s:?}", self.config.widths[0])));
        }
        let mut x = tape.constant(inputs.clone())?;
        for (l, layer) in self.fc.iter().enumerate() {
            let w = tape.param(&self.store, layer.weight)?;
            let b = tape.param(&self.store, layer.bias)?;
            let h = tape.linear(x, w, b)?;
            let Some(affine) = self.bn.get(l) else {
                return Ok(h);
            };
            let (hat, _, _) = tape.batch_normalize(h, self.config.eps)?;
            let g = tape.param(&self.store, affine.gamma)?;
            let beta = tape.param(&self.store, affine.beta)?;
            let z = match self.config.bn_weight_form {
                BnWeightForm::Diagonal => tape.channel_affine(hat, g, beta)?,
                BnWeightForm::FullMatrix => {
                    let m = tape.matmul(hat, g)?;
                    tape.add_bias(m, beta)?
                }
            };
            x = match self.config.nonlinearity {
                Nonlinearity::Relu => tape.relu(z)?,
                Nonlinearity::Erf => tape.erf(z)?,
            };
        }
        unreachable!("depth >= 2 ends in the readout layer")
    }

    pub fn outputs(&self, inputs: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, inputs)?;
        Ok(tape.value(f).data().to_vec())
    }

    /// Jacobian rows `∂f(x_i)/∂θ_BN`, parameters concatenated in store order.
    pub fn jacobian(&self, inputs: &Tensor) -> Result<Vec<Vec<f64>>> {
        let ids = self.trainable_ids();
        if ids.is_empty() {
            return Err(Error::invalid("network has no trainable parameters"));
        }
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, inputs)?;
        let n = inputs.shape()[0];
        let vars: Vec<(ParamId, Var)> = tape_bindings(&tape, &ids);
        (0..n)
            .map(|i| {
                let mut seed = vec![0.0; n];
                seed[i] = 1.0;
                let g = tape.backward_seeded(f, seed)?;
                let mut row = Vec::with_capacity(self.num_trainable());
                for &(id, v) in &vars {
                    match g.get(v) {
                        Some(d) => row.extend_from_slice(d),
                        None => row.extend(std::iter::repeat_n(0.0, self.store.get(id).tensor.numel())),
                    }
                }
                Ok(row)
            })
            .collect()
    }
}

/// Tape variables of the given parameters (first binding of each).
fn tape_bindings(tape: &Tape, ids: &[ParamId]) -> Vec<(ParamId, Var)> {
    ids.iter().map(|&id| (id, tape.binding(id).expect("parameter bound in forward"))).collect()
}

/// Symmetric kernel matrix over an input set, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl KernelMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn gram(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                data[i * n + j] = v;
                data[j * n + i] = v;
            }
        }
        Self { n, data }
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `‖self − reference‖_F / ‖reference‖_F`.
    pub fn rel_err(&self, reference: &KernelMatrix) -> f64 {
        let diff: f64 = self.data.iter().zip(&reference.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        diff / reference.frobenius()
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for j in 0..i {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// Eigenvalues by cyclic Jacobi rotations, ascending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let n = self.n;
        let mut a = self.data.clone();
        for _sweep in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * n + j].powi(2)).sum();
            let scale: f64 = a.iter().map(|v| v * v).sum::<f64>();
            if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = a[p * n + q];
                    if apq == 0.0 {
                        continue;
                    }
                    let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k * n + p], a[k * n + q]);
                        a[k * n + p] = c * akp - s * akq;
                        a[k * n + q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                        a[p * n + k] = c * apk - s * aqk;
                        a[q * n + k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
        ev.sort_by(f64::total_cmp);
        ev
    }
}

/// `Θ_ij = ⟨∂f(x_i)/∂θ_BN, ∂f(x_j)/∂θ_BN⟩` via one backward pass per input.
pub fn empirical_ntk(net: &FcnBn, inputs: &Tensor) -> Result<KernelMatrix> {
    if inputs.shape().first().copied().unwrap_or(0) < 2 {
        return Err(Error::invalid("empirical_ntk needs at least 2 inputs"));
    }
    Ok(KernelMatrix::gram(&net.jacobian(inputs)?))
}

/// Which kernel multiplies `Θ^{l−1}` in the recursion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recursion {
    /// `Θ^l = σ_w² Σ^l Θ^{l−1} + Σ^l`.
    Printed,
    /// `Θ^l = σ_w² Σ̇^l Θ^{l−1} + Σ^l`.
    Derivative,
}

/// `E[φ(u)φ(v)]` for a standard bivariate normal with correlation `rho`.
pub fn sigma_phi(phi: Nonlinearity, rho: f64) -> f64 {
    let rho = rho.clamp(-1.0, 1.0);
    match phi {
        Nonlinearity::Relu => ((1.0 - rho * rho).sqrt() + (std::f64::consts::PI - rho.acos()) * rho) / (2.0 * std::f64::consts::PI),
        Nonlinearity::Erf => 2.0 / std::f64::consts::PI * (2.0 * rho / 3.0).asin(),
    }
}

/// `E[φ'(u)φ'(v)]` for the same pair.
pub fn sigma_dot_phi(phi: Nonlinearity, rho: f64) -> f64 {
    let rho = rho.clamp(-1.0, 1.0);
    match phi {
        Nonlinearity::Relu => (std::f64::consts::PI - rho.acos()) / (2.0 * std::f64::consts::PI),
        Nonlinearity::Erf => 4.0 / (std::f64::consts::PI * (9.0 - 4.0 * rho * rho).sqrt()),
    }
}

fn correlation(k: &[f64], n: usize) -> Vec<f64> {
    let mut rho = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            rho[i * n + j] = k[i * n + j] / (k[i * n + i] * k[j * n + j]).sqrt();
        }
    }
    rho
}

/// Scale every input row to unit Euclidean norm.
pub fn normalize_rows(inputs: &Tensor) -> Result<Tensor> {
    let d = inputs.shape()[1];
    let mut out = inputs.clone();
    for row in out.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::invalid("cannot normalize a zero input"));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

/// Kernel recursion with `levels` BN layers. The BN-normalized
/// pre-activations of a pair of inputs are read as a standard bivariate
/// normal whose correlation comes from the previous layer's covariance:
/// `σ_w²/n_0·(x·x' + 1)` at the first layer, `Σ^{l−1}` afterwards.
pub fn limit_kernel_levels(
    levels: usize,
    sigma_w: f64,
    phi: Nonlinearity,
    inputs: &Tensor,
    recursion: Recursion,
) -> Result<KernelMatrix> {
    if levels == 0 {
        return Err(Error::invalid("limit kernel needs at least one level"));
    }
    let (n, d) = (inputs.shape()[0], inputs.shape()[1]);
    let x = inputs.data();
    let s2 = sigma_w * sigma_w;
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = (0..d).map(|c| x[i * d + c] * x[j * d + c]).sum();
            k[i * n + j] = s2 / d as f64 * (dot + 1.0);
        }
    }
    let mut theta = vec![0.0; n * n];
    for level in 1..=levels {
        let rho = correlation(&k, n);
        let sigma: Vec<f64> = rho.iter().map(|&r| sigma_phi(phi, r)).collect();
        if level == 1 {
            theta.clone_from(&sigma);
        } else {
            for i in 0..n * n {
                let mult = match recursion {
                    Recursion::Printed => sigma[i],
                    Recursion::Derivative => sigma_dot_phi(phi, rho[i]),
                };
                theta[i] = s2 * mult * theta[i] + sigma[i];
            }
        }
        k = sigma;
    }
    Ok(KernelMatrix { n, data: theta })
}

/// Limit kernel for a network config: one recursion level per BN layer.
pub fn limit_kernel(config: &FcnBnConfig, inputs: &Tensor, recursion: Recursion) -> Result<KernelMatrix> {
    config.validate()?;
    if inputs.shape().len() != 2 || inputs.shape()[1] != config.widths[0] {
        return Err(Error::shape("limit_kernel", format!("inputs must be [n, {}]", config.widths[0])));
    }
    limit_kernel_levels(config.depth - 1, config.sigma_w, config.nonlinearity, inputs, recursion)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub width: usize,
    pub seed: u64,
    pub steps: usize,
    pub drift: f64,
    pub init_limit_relerr: f64,
    /// Same comparison against the derivative-kernel recursion.
    pub init_limit_relerr_derivative: f64,
    pub final_loss: f64,
}

pub const DRIFT_CSV_HEADER: [&str; 5] = ["width", "seed", "steps", "drift", "init_limit_relerr"];

/// Random unit-norm inputs and standard-normal targets.
pub fn ntk_dataset(n: usize, dim: usize, seed: u64) -> Result<(Tensor, Vec<f64>)> {
    let mut rng = RngState::derive(seed, "ntk.inputs");
    let x = normalize_rows(&Tensor::gaussian(&[n, dim], 0.0, 1.0, &mut rng)?)?;
    let y = (0..n).map(|_| rng.normal()).collect();
    Ok((x, y))
}

/// Full-batch gradient descent on `(1/2n)Σ(f − y)²` over BN parameters only,
/// then the relative Frobenius change of the empirical kernel.
pub fn drift_measure(config: &FcnBnConfig, inputs: &Tensor, targets: &[f64], steps: usize, lr: f64) -> Result<DriftReport> {
    let mut net = FcnBn::build(config)?;
    let theta0 = empirical_ntk(&net, inputs)?;
    let limit = limit_kernel(config, inputs, Recursion::Printed)?;
    let limit_dot = limit_kernel(config, inputs, Recursion::Derivative)?;
    let mut sgd = Sgd::new(lr, 0.0)?;
    let ids = net.trainable_ids();
    for step in 0..steps {
        let mut tape = Tape::new();
        let f = net.forward(&mut tape, inputs)?;
        let l = tape.mse(f, targets)?;
        let loss = tape.value(l).data()[0];
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("ntk drift loss {loss} at step {step}")));
        }
        let grads = tape.backward(l).map_err(|e| Error::Diverged(format!("step {step}: {e}")))?;
        grads.accumulate(&tape, &mut net.store);
        sgd.step(&mut net.store, &ids)?;
    }
    let mut tape = Tape::new();
    let f = net.forward(&mut tape, inputs)?;
    let l = tape.mse(f, targets)?;
    let loss = tape.value(l).data()[0];
    let drift = if steps == 0 { 0.0 } else { empirical_ntk(&net, inputs)?.rel_err(&theta0) };
    Ok(DriftReport {
        width: config.widths[1],
        seed: config.seed,
        steps,
        drift,
        init_limit_relerr: theta0.rel_err(&limit),
        init_limit_relerr_derivative: theta0.rel_err(&limit_dot),
        final_loss: loss,
    })
}

pub fn write_drift_csv(path: &std::path::Path, reports: &[DriftReport]) -> Result<()> {
    let mut w = crate::io::csv_writer(path)?;
    w.write_record(DRIFT_CSV_HEADER)?;
    for r in reports {
        w.write_record([
            r.width.to_string(),
            r.seed.to_string(),
            r.steps.to_string(),
            r.drift.to_string(),
            r.init_limit_relerr.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
