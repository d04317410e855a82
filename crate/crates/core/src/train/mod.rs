//! BN-only and full training of supernets and stand-alone networks.

mod dataset;

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use dataset::{Dataset, DatasetSpec, Split, Splits, DATA_FILE, SPLIT_FILE};

use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::rng::RngState;
use crate::space::{ArchEncoding, BnPolicy, SpaceConfig, Supernet, TrainMode, NUM_EDGES, NUM_OPS};
use crate::tensor::{Sgd, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathSampling {
    /// One architecture drawn uniformly per step.
    Uniform,
    /// Every block of five steps visits each operation once per edge, in an
    /// independently shuffled order per edge.
    RoundRobin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub sampling: PathSampling,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::BnOnly,
            epochs: 5,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            sampling: PathSampling::Uniform,
            schedule: LrSchedule::Constant,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2"));
        }
        Sgd::new(self.lr, self.momentum)?;
        Ok(())
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => 0.5 * self.lr * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Accuracy on the training batches as they were seen.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_digest: String,
    pub seed: u64,
    pub arch: Option<ArchEncoding>,
    pub epochs: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub params_checksum: String,
    pub checkpoint: Option<PathBuf>,
    /// Excluded from the content hash.
    pub wall_clock_secs: f64,
    pub content_hash: String,
}

impl RunRecord {
    /// SHA-256 of the record's JSON with wall-clock time and the hash itself
    /// blanked.
    pub fn compute_hash(&self) -> String {
        let mut r = self.clone();
        r.wall_clock_secs = 0.0;
        r.content_hash = String::new();
        sha256_hex(&serde_json::to_vec(&r).expect("record serializes"))
    }

    pub fn seal(&mut self) {
        self.content_hash = self.compute_hash();
    }

    pub fn mean_step_seconds(&self) -> f64 {
        self.wall_clock_secs / self.step_losses.len().max(1) as f64
    }
}

fn run_digest(space: &SpaceConfig, train: &TrainConfig) -> String {
    sha256_hex(&serde_json::to_vec(&(space, train)).expect("configs serialize"))
}

struct RoundRobin {
    perms: Vec<[u8; NUM_OPS]>,
    pos: usize,
}

impl RoundRobin {
    fn next(&mut self, rng: &mut RngState) -> ArchEncoding {
        if self.pos % NUM_OPS == 0 {
            self.perms = (0..NUM_EDGES)
                .map(|_| {
                    let mut p = [0, 1, 2, 3, 4];
                    rng.shuffle(&mut p);
                    p
                })
                .collect();
        }
        let k = self.pos % NUM_OPS;
        self.pos += 1;
        let digits: Vec<u8> = self.perms.iter().map(|p| p[k]).collect();
        ArchEncoding::from_digits(&digits).expect("valid digits")
    }
}

/// Top-1 accuracy with ties broken toward the lowest class index.
pub fn accuracy_from_logits(logits: &[f64], num_classes: usize, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() || logits.len() != labels.len() * num_classes {
        return Err(Error::invalid("accuracy needs one logit row per label"));
    }
    let correct = logits
        .chunks(num_classes)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_BATCH: usize = 256;

/// Accuracy of `arch` on `indices` under `policy`, evaluated in chunks.
pub fn evaluate_indices(
    net: &Supernet,
    arch: ArchEncoding,
    data: &Dataset,
    indices: &[usize],
    policy: &mut BnPolicy,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty split"));
    }
    let mut correct = 0.0;
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, y) = data.batch(chunk)?;
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, arch, &x, policy)?;
        correct += accuracy_from_logits(tape.value(out.logits).data(), data.num_classes, &y)? * chunk.len() as f64;
    }
    Ok(correct / indices.len() as f64)
}

/// Eval-mode (running statistics) accuracy of `arch` on a split.
pub fn evaluate_accuracy(net: &Supernet, arch: ArchEncoding, data: &Dataset, split: Split) -> Result<f64> {
    evaluate_indices(net, arch, data, data.split(split), &mut BnPolicy::Running)
}

fn train_loop(
    net: &mut Supernet,
    data: &Dataset,
    cfg: &TrainConfig,
    mut pick: impl FnMut(&mut RngState) -> ArchEncoding,
    mut on_epoch: impl FnMut(usize, &Supernet) -> Result<()>,
) -> Result<RunRecord> {
    cfg.validate()?;
    if data.num_classes != net.config.num_classes {
        return Err(Error::invalid("dataset and network disagree on the number of classes"));
    }
    net.set_train_mode(cfg.mode);
    let started = Instant::now();
    let mut rng = RngState::derive(cfg.seed, "train");
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum)?;
    let per_epoch = data.splits.train.len() / cfg.batch_size
        + usize::from(data.splits.train.len() % cfg.batch_size >= 2);
    let total = per_epoch * cfg.epochs;
    let mut step = 0;
    let mut epochs = Vec::new();
    let mut step_losses = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order = data.splits.train.clone();
        rng.shuffle(&mut order);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let arch = pick(&mut rng);
            let (x, y) = data.batch(chunk)?;
            let mut tape = Tape::new();
            let out = net.forward(&mut tape, arch, &x, &mut BnPolicy::Batch).map_err(|e| diverged(epoch, step, e))?;
            let loss = tape.softmax_cross_entropy(out.logits, &y).map_err(|e| diverged(epoch, step, e))?;
            let l = tape.value(loss).data()[0];
            if !l.is_finite() {
                return Err(Error::Diverged(format!("loss {l} at epoch {epoch}, step {step}")));
            }
            let grads = tape.backward(loss).map_err(|e| diverged(epoch, step, e))?;
            let touched = grads.accumulate(&tape, &mut net.store);
            sgd.lr = cfg.lr_at(step, total);
            sgd.step(&mut net.store, &touched)?;
            net.commit(out.observed);
            correct += accuracy_from_logits(tape.value(out.logits).data(), data.num_classes, &y)? * chunk.len() as f64;
            loss_sum += l * chunk.len() as f64;
            seen += chunk.len();
            step_losses.push(l);
            step += 1;
        }
        if seen == 0 {
            return Err(Error::invalid("training split yields no batch of at least 2 samples"));
        }
        epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / seen as f64,
            accuracy: correct / seen as f64,
        });
        on_epoch(epoch, net)?;
    }
    Ok(RunRecord {
        config_digest: run_digest(&net.config, cfg),
        seed: cfg.seed,
        arch: None,
        epochs,
        step_losses,
        val_accuracy: None,
        test_accuracy: None,
        params_checksum: net.store.checksum(|_| true),
        checkpoint: None,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        content_hash: String::new(),
    })
}

fn diverged(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::Diverged(format!("non-finite {what} at epoch {epoch}, step {step}")),
        other => other,
    }
}

/// Single-path supernet training: each step samples one architecture
/// (uniformly, or round-robin per edge), runs it, and updates the trainable
/// parameters it touched.
pub fn train_supernet(net: &mut Supernet, data: &Dataset, cfg: &TrainConfig) -> Result<RunRecord> {
    train_supernet_observed(net, data, cfg, |_, _| Ok(()))
}

/// [`train_supernet`] with a hook called after every epoch (0-based).
pub fn train_supernet_observed(
    net: &mut Supernet,
    data: &Dataset,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(usize, &Supernet) -> Result<()>,
) -> Result<RunRecord> {
    if net.restricted_to().is_some() {
        return Err(Error::invalid("train_supernet needs a supernet, not a stand-alone network"));
    }
    let mut rr = RoundRobin { perms: Vec::new(), pos: 0 };
    let sampling = cfg.sampling;
    let mut rec = train_loop(net, data, cfg, |rng| match sampling {
        PathSampling::Uniform => ArchEncoding::uniform(rng),
        PathSampling::RoundRobin => rr.next(rng),
    }, on_epoch)?;
    rec.seal();
    Ok(rec)
}

/// Build an isolated network for `arch`, train it, and report validation
/// and test accuracy in eval mode.
pub fn train_standalone(
    arch: ArchEncoding,
    space: &SpaceConfig,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Supernet, RunRecord)> {
    let mut net = Supernet::standalone(space, arch)?;
    let mut rec = train_loop(&mut net, data, cfg, |_| arch, |_, _| Ok(()))?;
    rec.arch = Some(arch);
    rec.val_accuracy = Some(evaluate_accuracy(&net, arch, data, Split::Val)?);
    rec.test_accuracy = Some(evaluate_accuracy(&net, arch, data, Split::Test)?);
    rec.seal();
    Ok((net, rec))
}
