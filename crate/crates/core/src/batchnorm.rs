//! BatchNorm with train, eval, and stochastic (Monte-Carlo) normalization.
//!
//! γ and β live in a [`ParamStore`] so the tape can route their gradients;
//! running statistics and the log of observed batch statistics live on the
//! layer. Normalization always divides by `sqrt(var + eps)` with the biased
//! (1/m) batch variance, and the same biased variance feeds the running
//! estimate and the statistics log.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Gradients, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    Train,
    Eval,
    Stochastic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnConfig {
    pub eps: f64,
    /// Weight of the new batch statistic in the running average.
    pub momentum: f64,
    /// Ring-buffer capacity of the batch-statistics log.
    pub log_capacity: usize,
}

impl Default for BnConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            momentum: 0.1,
            log_capacity: 64,
        }
    }
}

impl BnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !(self.momentum > 0.0 && self.momentum <= 1.0) || self.log_capacity == 0 {
            return Err(Error::invalid(format!("bad batch-norm config {self:?}")));
        }
        Ok(())
    }
}

/// Per-channel mean and biased variance of one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
    pub mode: BnMode,
    log: VecDeque<BatchStats>,
    log_capacity: usize,
    updates: u64,
}

impl BatchNormLayer {
    /// Register γ (ones) and β (zeros) for `channels` channels.
    pub fn new(name: impl Into<String>, channels: usize, config: &BnConfig, store: &mut ParamStore) -> Result<Self> {
        Self::with_init(name, Tensor::full(&[channels], 1.0), Tensor::zeros(&[channels]), config, store)
    }

    pub fn with_init(
        name: impl Into<String>,
        gamma: Tensor,
        beta: Tensor,
        config: &BnConfig,
        store: &mut ParamStore,
    ) -> Result<Self> {
        config.validate()?;
        let name = name.into();
        let channels = gamma.numel();
        if channels == 0 || beta.numel() != channels {
            return Err(Error::invalid(format!("{name}: γ and β must share a non-zero length")));
        }
        let gamma = store.add(format!("{name}.gamma"), gamma, true)?;
        let beta = store.add(format!("{name}.beta"), beta, true)?;
        Ok(Self {
            name,
            gamma,
            beta,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: config.eps,
            momentum: config.momentum,
            mode: BnMode::Train,
            log: VecDeque::new(),
            log_capacity: config.log_capacity,
            updates: 0,
        })
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Number of recorded training batches.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn stats_log(&self) -> impl ExactSizeIterator<Item = &BatchStats> {
        self.log.iter()
    }

    pub fn log_capacity(&self) -> usize {
        self.log_capacity
    }

    pub fn last_stats(&self) -> Option<&BatchStats> {
        self.log.back()
    }

    /// Fold one batch into the running estimates and the statistics log.
    pub fn record(&mut self, stats: BatchStats) {
        let m = self.momentum;
        for c in 0..self.channels() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * stats.mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * stats.var[c];
        }
        if self.log.len() == self.log_capacity {
            self.log.pop_front();
        }
        self.log.push_back(stats);
        self.updates += 1;
    }

    /// Restore serialized state (checkpoint loading).
    pub(crate) fn restore(&mut self, running_mean: Vec<f64>, running_var: Vec<f64>, updates: u64, log: Vec<BatchStats>) {
        self.running_mean = running_mean;
        self.running_var = running_var;
        self.updates = updates;
        self.log = log.into_iter().collect();
        while self.log.len() > self.log_capacity {
            self.log.pop_front();
        }
    }

    fn affine(&self, tape: &mut Tape, store: &ParamStore, normalized: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma)?;
        let b = tape.param(store, self.beta)?;
        tape.channel_affine(normalized, g, b)
    }

    /// Normalize with this batch's statistics without touching the layer.
    pub fn forward_batch(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(BnTrace, BatchStats)> {
        self.check_channels(tape, x)?;
        let (normalized, mean, var) = tape.batch_normalize(x, self.eps)?;
        let output = self.affine(tape, store, normalized)?;
        Ok((BnTrace { input: x, normalized, output }, BatchStats { mean, var }))
    }

    /// Train-mode forward: batch statistics, then update running stats and log.
    pub fn forward_train(&mut self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (trace, stats) = self.forward_batch(tape, store, x)?;
        self.record(stats);
        Ok(trace.output)
    }

    /// Normalize with the given statistics.
    pub fn forward_with(&self, tape: &mut Tape, store: &ParamStore, x: Var, stats: &BatchStats) -> Result<Var> {
        self.check_channels(tape, x)?;
        let normalized = tape.fixed_normalize(x, &stats.mean, &stats.var, self.eps)?;
        self.affine(tape, store, normalized)
    }

    pub fn forward_eval(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        if self.updates == 0 {
            return Err(Error::NoStatistics(self.name.clone()));
        }
        self.check_channels(tape, x)?;
        let normalized = tape.fixed_normalize(x, &self.running_mean, &self.running_var, self.eps)?;
        self.affine(tape, store, normalized)
    }

    /// Normalize with one logged batch-statistics pair drawn uniformly.
    pub fn forward_stochastic(&self, tape: &mut Tape, store: &ParamStore, x: Var, rng: &mut RngState) -> Result<Var> {
        let stats = self.sample_stats(rng)?;
        self.forward_with(tape, store, x, stats)
    }

    pub fn sample_stats(&self, rng: &mut RngState) -> Result<&BatchStats> {
        if self.log.is_empty() {
            return Err(Error::NoStatistics(self.name.clone()));
        }
        Ok(&self.log[rng.below(self.log.len())])
    }

    /// Dispatch on `self.mode`.
    pub fn forward(&mut self, tape: &mut Tape, store: &ParamStore, x: Var, rng: &mut RngState) -> Result<Var> {
        match self.mode {
            BnMode::Train => self.forward_train(tape, store, x),
            BnMode::Eval => self.forward_eval(tape, store, x),
            BnMode::Stochastic => self.forward_stochastic(tape, store, x, rng),
        }
    }

    /// `|γ_c| / sqrt(σ²_c + eps)` using the most recent logged batch.
    pub fn lipschitz_scale(&self, store: &ParamStore) -> Result<Vec<f64>> {
        let stats = self.last_stats().ok_or_else(|| Error::NoStatistics(self.name.clone()))?;
        Ok(self.lipschitz_scale_with(store, &stats.var))
    }

    /// Same, with an explicitly supplied calibration variance.
    pub fn lipschitz_scale_with(&self, store: &ParamStore, var: &[f64]) -> Vec<f64> {
        store
            .get(self.gamma)
            .tensor
            .data()
            .iter()
            .zip(var)
            .map(|(g, v)| g.abs() / (v + self.eps).sqrt())
            .collect()
    }

    fn check_channels(&self, tape: &Tape, x: Var) -> Result<()> {
        let s = tape.value(x).shape();
        if s.len() < 2 || s[1] != self.channels() {
            return Err(Error::shape(
                "batch_norm",
                format!("{} expects {} channels, got input {s:?}", self.name, self.channels()),
            ));
        }
        Ok(())
    }
}

/// Tape nodes around one BatchNorm application.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnTrace {
    /// Pre-normalization activations `y`.
    pub input: Var,
    /// Normalized activations `ŷ`.
    pub normalized: Var,
    /// `γ ŷ + β`.
    pub output: Var,
}

/// Both sides of the BatchNorm gradient-norm bound for one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eq6Report {
    /// `Σ_c ‖∂L/∂y_c‖²` for the BN network.
    pub lhs: f64,
    /// Right-hand side with the `1/√m` coefficient on `⟨g, ŷ⟩²`.
    pub rhs: f64,
    /// Right-hand side with the `1/m` coefficient.
    pub rhs_inv_m: f64,
    pub holds: bool,
    pub holds_inv_m: bool,
    /// Samples per channel.
    pub m: usize,
}

/// Per-channel right-hand sides `(γ²/σ²)(‖g‖² − ⟨1,g⟩²/m − c·⟨g,ŷ⟩²)`
/// for `c = 1/√m` and `c = 1/m`. `sigma2` is the normalizer `var + eps`.
pub fn eq6_rhs(gamma: f64, sigma2: f64, g: &[f64], yhat: &[f64]) -> (f64, f64) {
    let m = g.len() as f64;
    let gg: f64 = g.iter().map(|v| v * v).sum();
    let g1: f64 = g.iter().sum();
    let gy: f64 = g.iter().zip(yhat).map(|(a, b)| a * b).sum();
    let scale = gamma * gamma / sigma2;
    let base = gg - g1 * g1 / m;
    (scale * (base - gy * gy / m.sqrt()), scale * (base - gy * gy / m))
}

/// Relative slack used when comparing the two sides, to absorb rounding in
/// cases where they coincide analytically (e.g. all-zero gradients).
const EQ6_REL_TOL: f64 = 1e-12;

/// Evaluate the bound on `layer` for the loss whose gradients are `grads`.
///
/// `g` is the loss gradient with respect to the layer output `z = γŷ + β`,
/// i.e. the gradient the downstream (BN-free) sub-network sees for its input
/// activations; the left side is the gradient with respect to the
/// pre-normalization activations `y` of the BN network.
pub fn eq6_bound_check(
    tape: &Tape,
    grads: &Gradients,
    trace: &BnTrace,
    layer: &BatchNormLayer,
    store: &ParamStore,
    stats: &BatchStats,
) -> Result<Eq6Report> {
    if stats.var.len() != layer.channels() {
        return Err(Error::NoStatistics(layer.name.clone()));
    }
    let shape = tape.value(trace.input).shape().to_vec();
    let (n, c) = (shape[0], shape[1]);
    let sp: usize = shape[2..].iter().product();
    let m = n * sp;
    if n < 2 {
        return Err(Error::invalid("eq6_bound_check: batch size must be at least 2"));
    }
    let numel = n * c * sp;
    let zeros = vec![0.0; numel];
    let dy = grads.get(trace.input).unwrap_or(&zeros);
    let dz = grads.get(trace.output).unwrap_or(&zeros);
    let yhat = tape.value(trace.normalized).data();
    let gamma = store.get(layer.gamma).tensor.data();

    let gather = |buf: &[f64], ch: usize| -> Vec<f64> {
        (0..n)
            .flat_map(|s| {
                let base = (s * c + ch) * sp;
                buf[base..base + sp].to_vec()
            })
            .collect()
    };

    let (mut lhs, mut rhs, mut rhs_inv_m) = (0.0, 0.0, 0.0);
    let (mut holds, mut holds_inv_m) = (true, true);
    for ch in 0..c {
        let l: f64 = gather(dy, ch).iter().map(|v| v * v).sum();
        let (r, r_m) = eq6_rhs(gamma[ch], stats.var[ch] + layer.eps, &gather(dz, ch), &gather(yhat, ch));
        let tol = EQ6_REL_TOL * l.abs().max(r.abs()).max(f64::MIN_POSITIVE);
        holds &= l <= r + tol;
        holds_inv_m &= l <= r_m + tol;
        lhs += l;
        rhs += r;
        rhs_inv_m += r_m;
    }
    Ok(Eq6Report {
        lhs,
        rhs,
        rhs_inv_m,
        holds,
        holds_inv_m,
        m,
    })
}
