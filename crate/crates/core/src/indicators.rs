//! Per-architecture scores on a BN-only trained supernet and the
//! average-rank composite.
//!
//! γ and trainability average over the *live* searchable edges of a path
//! (every chosen operation except `zero`); stem, reduction, and head
//! BatchNorms are excluded. A live edge without a BatchNorm (biased
//! placement) contributes zero, so under fair placement the averages are
//! plain means over the path's BatchNorms.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batchnorm::BatchStats;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::space::{ArchEncoding, BnPolicy, Supernet};
use crate::stats::midranks;
use crate::tensor::{softmax_rows, Tape, Tensor};
use crate::train::{evaluate_indices, Dataset, Split};

/// Coefficient on the sample second-moment sum in the predictive covariance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpreadPrefactor {
    /// `1/T` (Monte-Carlo average).
    InvT,
    /// `1/τ`.
    InvTau,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndicatorConfig {
    /// Stochastic passes per batch.
    pub passes: usize,
    pub tau: f64,
    pub spread_prefactor: SpreadPrefactor,
    pub uncertainty_lower_is_better: bool,
    /// Training batches used to re-estimate each subnet's BatchNorm
    /// statistics before measuring expressivity; 0 uses the supernet's
    /// running statistics.
    pub recalibration_batches: usize,
    /// Samples (from the start of the training split) in the trainability
    /// calibration batch.
    pub calibration_size: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for IndicatorConfig {
    fn default() -> Self {
        Self {
            passes: 8,
            tau: 100.0,
            spread_prefactor: SpreadPrefactor::InvT,
            uncertainty_lower_is_better: true,
            recalibration_batches: 4,
            calibration_size: 64,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl IndicatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.passes == 0 || !(self.tau > 0.0) || self.calibration_size < 2 || self.batch_size < 2 {
            return Err(Error::invalid("indicator config needs passes >= 1, tau > 0, batch sizes >= 2"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndicatorScores {
    pub arch: ArchEncoding,
    pub gamma: f64,
    pub expressivity: f64,
    pub trainability: f64,
    pub uncertainty: f64,
}

/// Mean `|γ|` over the live edges' BatchNorm channels; 0 when no edge is live.
pub fn gamma_score(net: &Supernet, arch: ArchEncoding) -> Result<f64> {
    let (mut sum, mut slots) = (0.0, 0usize);
    for e in net.path(arch).into_iter().filter(|e| e.live()) {
        slots += e.channels;
        if let Some(b) = e.bn {
            sum += net.store.get(net.bns[b].gamma).tensor.data().iter().map(|g| g.abs()).sum::<f64>();
        }
    }
    Ok(if slots == 0 { 0.0 } else { sum / slots as f64 })
}

/// Batch-statistics forward of `arch` on `images` without touching the
/// supernet; returns the observed statistics per BatchNorm index.
pub fn observe_stats(net: &Supernet, arch: ArchEncoding, images: &Tensor) -> Result<BTreeMap<usize, BatchStats>> {
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, arch, images, &mut BnPolicy::Batch)?;
    Ok(out.observed.into_iter().collect())
}

/// Mean over live edges of the channel-mean `|γ|/sqrt(σ² + eps)`, with σ²
/// from one train-mode pass over the calibration batch.
pub fn trainability_score(net: &Supernet, arch: ArchEncoding, calibration: &Tensor) -> Result<f64> {
    let stats = observe_stats(net, arch, calibration)?;
    let (mut sum, mut edges) = (0.0, 0usize);
    for e in net.path(arch).into_iter().filter(|e| e.live()) {
        edges += 1;
        if let Some(b) = e.bn {
            let layer = &net.bns[b];
            let var = &stats.get(&b).ok_or_else(|| Error::NoStatistics(layer.name.clone()))?.var;
            let scale = layer.lipschitz_scale_with(&net.store, var);
            sum += scale.iter().sum::<f64>() / scale.len() as f64;
        }
    }
    Ok(if edges == 0 { 0.0 } else { sum / edges as f64 })
}

/// Subnet-specific BatchNorm statistics: the average of the batch statistics
/// over the first `batches` training batches.
pub fn recalibrate(net: &Supernet, arch: ArchEncoding, data: &Dataset, batches: usize, batch_size: usize) -> Result<BTreeMap<usize, BatchStats>> {
    let train = data.split(Split::Train);
    let mut acc: BTreeMap<usize, BatchStats> = BTreeMap::new();
    let mut count = 0usize;
    for chunk in train.chunks(batch_size).filter(|c| c.len() >= 2).take(batches) {
        let (x, _) = data.batch(chunk)?;
        for (idx, s) in observe_stats(net, arch, &x)? {
            match acc.get_mut(&idx) {
                Some(a) => {
                    a.mean.iter_mut().zip(&s.mean).for_each(|(p, q)| *p += q);
                    a.var.iter_mut().zip(&s.var).for_each(|(p, q)| *p += q);
                }
                None => {
                    acc.insert(idx, s);
                }
            }
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("no training batch available for recalibration"));
    }
    for s in acc.values_mut() {
        s.mean.iter_mut().chain(s.var.iter_mut()).for_each(|v| *v /= count as f64);
    }
    Ok(acc)
}

/// Eval-mode validation accuracy of the weight-sharing subnet.
pub fn expressivity_score(net: &Supernet, arch: ArchEncoding, data: &Dataset, cfg: &IndicatorConfig) -> Result<f64> {
    let val = data.split(Split::Val);
    if cfg.recalibration_batches == 0 {
        return evaluate_indices(net, arch, data, val, &mut BnPolicy::Running);
    }
    let stats = recalibrate(net, arch, data, cfg.recalibration_batches, cfg.batch_size)?;
    evaluate_indices(net, arch, data, val, &mut BnPolicy::Fixed(&stats))
}

/// Softmax outputs of `passes` stochastic-BatchNorm forwards on one batch;
/// each entry is row-major `[B, K]`.
pub fn stochastic_passes(
    net: &Supernet,
    arch: ArchEncoding,
    images: &Tensor,
    passes: usize,
    rng: &mut RngState,
) -> Result<Vec<Vec<f64>>> {
    let k = net.config.num_classes;
    (0..passes)
        .map(|_| {
            let mut tape = Tape::new();
            let out = net.forward(&mut tape, arch, images, &mut BnPolicy::Sampled(rng))?;
            Ok(softmax_rows(k, tape.value(out.logits).data()))
        })
        .collect()
}

/// Mean diagonal of `τ⁻¹I + c·Σᵢ fᵢᵀfᵢ − E[f]ᵀE[f]` averaged over the
/// samples of one batch, with `c` = `1/T` or `1/τ`. Uses Welford updates
/// per entry.
pub fn uncertainty_from_passes(passes: &[Vec<f64>], k: usize, tau: f64, prefactor: SpreadPrefactor) -> Result<f64> {
    let t = passes.len();
    if t == 0 || k == 0 || passes[0].is_empty() || passes[0].len() % k != 0 || passes.iter().any(|p| p.len() != passes[0].len()) {
        return Err(Error::invalid("uncertainty needs T >= 1 equally shaped [B, K] passes"));
    }
    let entries = passes[0].len();
    let mut mean = vec![0.0; entries];
    let mut m2 = vec![0.0; entries];
    for (i, pass) in passes.iter().enumerate() {
        for ((m, s), &f) in mean.iter_mut().zip(m2.iter_mut()).zip(pass) {
            let delta = f - *m;
            *m += delta / (i + 1) as f64;
            *s += delta * (f - *m);
        }
    }
    let spread: f64 = match prefactor {
        // (1/T)Σf² − mean² = M2/T
        SpreadPrefactor::InvT => m2.iter().sum::<f64>() / t as f64,
        // (1/τ)Σf² − mean², with Σf² = M2 + T·mean²
        SpreadPrefactor::InvTau => mean
            .iter()
            .zip(&m2)
            .map(|(m, s)| (s + t as f64 * m * m) / tau - m * m)
            .sum::<f64>(),
    };
    let b = entries / k;
    Ok(1.0 / tau + spread / (b * k) as f64)
}

/// Uncertainty over the validation split: per batch, `passes` stochastic
/// forwards, then the mean of the per-batch scores.
pub fn uncertainty_score(net: &Supernet, arch: ArchEncoding, data: &Dataset, cfg: &IndicatorConfig) -> Result<f64> {
    cfg.validate()?;
    let mut rng = RngState::derive(cfg.seed, &format!("uncertainty.{arch}"));
    let val = data.split(Split::Val);
    if val.is_empty() {
        return Err(Error::invalid("cannot score uncertainty on an empty validation split"));
    }
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in val.chunks(cfg.batch_size) {
        let (x, _) = data.batch(chunk)?;
        let passes = stochastic_passes(net, arch, &x, cfg.passes, &mut rng)?;
        total += uncertainty_from_passes(&passes, data.num_classes, cfg.tau, cfg.spread_prefactor)?;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// The trainability calibration batch: the first `calibration_size` training
/// samples.
pub fn calibration_batch(data: &Dataset, cfg: &IndicatorConfig) -> Result<Tensor> {
    let train = data.split(Split::Train);
    let n = cfg.calibration_size.min(train.len());
    if n < 2 {
        return Err(Error::invalid("calibration batch needs at least 2 training samples"));
    }
    Ok(data.batch(&train[..n])?.0)
}

pub fn score_arch(net: &Supernet, arch: ArchEncoding, data: &Dataset, cfg: &IndicatorConfig) -> Result<IndicatorScores> {
    cfg.validate()?;
    let calib = calibration_batch(data, cfg)?;
    let s = IndicatorScores {
        arch,
        gamma: gamma_score(net, arch)?,
        expressivity: expressivity_score(net, arch, data, cfg)?,
        trainability: trainability_score(net, arch, &calib)?,
        uncertainty: uncertainty_score(net, arch, data, cfg)?,
    };
    let all = [s.gamma, s.expressivity, s.trainability, s.uncertainty];
    if all.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("indicator scores for {arch}")));
    }
    Ok(s)
}

/// Score many architectures in parallel; output order follows `archs`.
pub fn score_all(net: &Supernet, archs: &[ArchEncoding], data: &Dataset, cfg: &IndicatorConfig) -> Result<Vec<IndicatorScores>> {
    archs.par_iter().map(|&a| score_arch(net, a, data, cfg)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub arch: ArchEncoding,
    pub gamma: f64,
    pub expressivity: f64,
    pub trainability: f64,
    pub uncertainty: f64,
    pub rank_e: f64,
    pub rank_t: f64,
    pub rank_u: f64,
    /// Mean of the three indicator ranks.
    pub mean_rank: f64,
    pub cpi_rank: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    /// Rows in input order.
    pub rows: Vec<RankRow>,
}

pub const RANK_CSV_HEADER: [&str; 9] =
    ["arch", "gamma", "expressivity", "trainability", "uncertainty", "rank_e", "rank_t", "rank_u", "cpi_rank"];

impl RankTable {
    /// Row indices from best to worst composite rank; ties by encoding.
    pub fn order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.rows.len()).collect();
        idx.sort_by(|&a, &b| {
            let (ra, rb) = (&self.rows[a], &self.rows[b]);
            ra.cpi_rank.total_cmp(&rb.cpi_rank).then(ra.arch.cmp(&rb.arch))
        });
        idx
    }

    /// The `k` best architectures by composite rank.
    pub fn top(&self, k: usize) -> Vec<ArchEncoding> {
        self.order().into_iter().take(k).map(|i| self.rows[i].arch).collect()
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = crate::io::csv_writer(path)?;
        w.write_record(RANK_CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.arch.to_string(),
                r.gamma.to_string(),
                r.expressivity.to_string(),
                r.trainability.to_string(),
                r.uncertainty.to_string(),
                r.rank_e.to_string(),
                r.rank_t.to_string(),
                r.rank_u.to_string(),
                r.cpi_rank.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Midrank each indicator (expressivity and trainability higher-better,
/// uncertainty per `uncertainty_lower_is_better`), average the three rank
/// columns, and midrank the averages.
pub fn cpi_rank(scores: &[IndicatorScores], uncertainty_lower_is_better: bool) -> Result<RankTable> {
    if scores.len() < 2 {
        return Err(Error::invalid("ranking needs at least 2 architectures"));
    }
    let col = |f: fn(&IndicatorScores) -> f64| scores.iter().map(f).collect::<Vec<_>>();
    let rank_e = midranks(&col(|s| s.expressivity), true)?;
    let rank_t = midranks(&col(|s| s.trainability), true)?;
    let rank_u = midranks(&col(|s| s.uncertainty), !uncertainty_lower_is_better)?;
    midranks(&col(|s| s.gamma), true)?;
    let mean: Vec<f64> = (0..scores.len()).map(|i| (rank_e[i] + rank_t[i] + rank_u[i]) / 3.0).collect();
    let cpi = midranks(&mean, false)?;
    Ok(RankTable {
        rows: scores
            .iter()
            .enumerate()
            .map(|(i, s)| RankRow {
                arch: s.arch,
                gamma: s.gamma,
                expressivity: s.expressivity,
                trainability: s.trainability,
                uncertainty: s.uncertainty,
                rank_e: rank_e[i],
                rank_t: rank_t[i],
                rank_u: rank_u[i],
                mean_rank: mean[i],
                cpi_rank: cpi[i],
            })
            .collect(),
    })
}
