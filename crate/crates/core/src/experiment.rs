//! Experiment drivers: each kind runs a pipeline under one output directory,
//! writes CSVs, and seals a JSON summary with a content hash.
//!
//! Every stage result is cached on disk under a digest of the inputs that
//! produced it, so an interrupted run picks up where it stopped and a
//! repeated run reuses finished stages. Ground truth is appended one
//! architecture at a time.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result, ResultExt};
use crate::indicators::{cpi_rank, gamma_score, expressivity_score, score_all, score_arch, IndicatorConfig, IndicatorScores, RankTable};
use crate::io::{read_json, sha256_hex, write_json};
use crate::ntk::{drift_measure, ntk_dataset, write_drift_csv, DriftReport, FcnBnConfig};
use crate::rng::{derive_seed, RngState};
use crate::search::{evolutionary_search, random_search, EvoConfig, Fitness};
use crate::space::{census_ops, enumerate_space, load_checkpoint, save_checkpoint, ArchEncoding, OpKind, SpaceConfig, Supernet, TrainMode, NUM_EDGES, SPACE_SIZE};
use crate::stats::{correlation, Correlation, CorrelationReport};
use crate::train::{train_standalone, train_supernet, train_supernet_observed, Dataset, DatasetSpec, LrSchedule, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    UnfairnessCensus,
    GammaFailure,
    CpiCorrelation,
    NtkSweep,
    FullSearch,
    ExpressivityStability,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::UnfairnessCensus => "unfairness_census",
            ExperimentKind::GammaFailure => "gamma_failure",
            ExperimentKind::CpiCorrelation => "cpi_correlation",
            ExperimentKind::NtkSweep => "ntk_sweep",
            ExperimentKind::FullSearch => "full_search",
            ExperimentKind::ExpressivityStability => "expressivity_stability",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundTruthConfig {
    /// Distinct architectures sampled uniformly; `>= 15625` enumerates the space.
    pub size: usize,
    pub train: TrainConfig,
}

impl Default for GroundTruthConfig {
    fn default() -> Self {
        Self {
            size: 100,
            train: TrainConfig {
                mode: TrainMode::Full,
                epochs: 20,
                lr: 0.05,
                schedule: LrSchedule::Cosine,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NtkSweepConfig {
    /// Hidden widths are overridden by `widths`.
    pub base: FcnBnConfig,
    pub widths: Vec<usize>,
    pub seeds: usize,
    pub steps: usize,
    pub lr: f64,
    pub num_inputs: usize,
}

impl Default for NtkSweepConfig {
    fn default() -> Self {
        Self {
            base: FcnBnConfig::default(),
            widths: vec![32, 128, 512],
            seeds: 5,
            steps: 200,
            lr: 0.5,
            num_inputs: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StabilityConfig {
    /// Supernet epoch of the first snapshot (1-based).
    pub epoch: usize,
    pub gap: usize,
    pub archs: usize,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            epoch: 10,
            gap: 10,
            archs: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub out_dir: PathBuf,
    /// Stage seeds are derived from this one; nested `seed` fields are
    /// overwritten.
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub space: SpaceConfig,
    /// BN-only supernet training.
    pub supernet: TrainConfig,
    pub ground_truth: GroundTruthConfig,
    pub indicators: IndicatorConfig,
    pub top_k: usize,
    pub search: EvoConfig,
    pub ntk: NtkSweepConfig,
    pub stability: StabilityConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::CpiCorrelation,
            out_dir: PathBuf::from("runs"),
            seed: 0,
            dataset: DatasetSpec::default(),
            space: SpaceConfig::default(),
            supernet: TrainConfig {
                epochs: 10,
                lr: 0.5,
                ..TrainConfig::default()
            },
            ground_truth: GroundTruthConfig::default(),
            indicators: IndicatorConfig::default(),
            top_k: 10,
            search: EvoConfig::default(),
            ntk: NtkSweepConfig::default(),
            stability: StabilityConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Named stage seeds derived from the top-level seed.
    pub fn stage_seeds(&self) -> BTreeMap<String, u64> {
        ["dataset", "space", "supernet", "ground_truth", "indicators", "search", "ntk", "stability"]
            .into_iter()
            .map(|s| (s.to_string(), derive_seed(self.seed, s)))
            .collect()
    }

    /// Copy with every nested seed replaced by its stage seed.
    pub fn resolved(&self) -> Self {
        let s = self.stage_seeds();
        let mut c = self.clone();
        c.dataset.seed = s["dataset"];
        c.space.seed = s["space"];
        c.supernet.seed = s["supernet"];
        c.indicators.seed = s["indicators"];
        c.search.seed = s["search"];
        c.ntk.base.seed = s["ntk"];
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.space.validate()?;
        self.supernet.validate()?;
        self.ground_truth.train.validate()?;
        self.indicators.validate()?;
        self.search.validate()?;
        if self.dataset.num_classes != self.space.num_classes || self.dataset.channels != self.space.in_channels {
            return Err(Error::invalid("dataset and space disagree on classes or channels"));
        }
        if self.dataset.height != self.space.image_size || self.dataset.width != self.space.image_size {
            return Err(Error::invalid("dataset images must match space.image_size"));
        }
        if self.top_k == 0 || self.ground_truth.size < 2 || self.top_k > self.ground_truth.size {
            return Err(Error::invalid("need 2 <= ground_truth.size and 1 <= top_k <= ground_truth.size"));
        }
        if self.ntk.widths.is_empty() || self.ntk.seeds == 0 {
            return Err(Error::invalid("ntk sweep needs widths and seeds"));
        }
        if self.stability.epoch == 0 || self.stability.gap == 0 || self.stability.archs < 2 {
            return Err(Error::invalid("stability needs epoch, gap >= 1 and at least 2 archs"));
        }
        Ok(())
    }

    /// SHA-256 of the resolved config without the output directory.
    pub fn digest(&self) -> String {
        let mut c = self.resolved();
        c.out_dir = PathBuf::new();
        digest_of(&c)
    }
}

fn digest_of<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("config serializes"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub kind: ExperimentKind,
    pub config_digest: String,
    pub seeds: BTreeMap<String, u64>,
    pub headline: BTreeMap<String, Value>,
    /// Output file name → SHA-256 of its bytes.
    pub files: BTreeMap<String, String>,
    /// Excluded from the content hash.
    pub wall_clock_secs: f64,
    pub content_hash: String,
}

impl ExperimentSummary {
    pub fn compute_hash(&self) -> String {
        let mut c = self.clone();
        c.wall_clock_secs = 0.0;
        c.content_hash = String::new();
        digest_of(&c)
    }
}

pub const SUMMARY_FILE: &str = "summary.json";
pub const GROUND_TRUTH_CSV_HEADER: [&str; 5] = ["arch", "val_accuracy", "test_accuracy", "seed", "content_hash"];

/// Worker count from `FBN_WORKERS`, else rayon's default.
pub fn workers() -> usize {
    std::env::var("FBN_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

/// Run the configured experiment inside a pool capped by [`workers`].
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentSummary> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers())
        .build()
        .map_err(|e| Error::invalid(format!("worker pool: {e}")))?;
    let kind = config.kind;
    pool.install(|| Runner::new(config).run()).context(|| format!("experiment {}", kind.name()))
}

struct Runner {
    cfg: ExperimentConfig,
    out: PathBuf,
    files: BTreeSet<String>,
    headline: BTreeMap<String, Value>,
}

impl Runner {
    fn new(config: &ExperimentConfig) -> Self {
        Self {
            cfg: config.resolved(),
            out: config.out_dir.clone(),
            files: BTreeSet::new(),
            headline: BTreeMap::new(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn emit(&mut self, name: &str) {
        self.files.insert(name.to_string());
    }

    fn put(&mut self, key: &str, value: impl Serialize) {
        self.headline.insert(key.to_string(), serde_json::to_value(value).expect("headline serializes"));
    }

    fn run(mut self) -> Result<ExperimentSummary> {
        let started = Instant::now();
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        match self.cfg.kind {
            ExperimentKind::UnfairnessCensus => self.unfairness_census()?,
            ExperimentKind::GammaFailure => self.gamma_failure()?,
            ExperimentKind::CpiCorrelation => self.cpi_correlation()?,
            ExperimentKind::NtkSweep => self.ntk_sweep()?,
            ExperimentKind::FullSearch => self.full_search()?,
            ExperimentKind::ExpressivityStability => self.expressivity_stability()?,
        }
        let mut files = BTreeMap::new();
        for name in &self.files {
            let bytes = crate::io::read_bytes(&self.path(name))?;
            files.insert(name.clone(), sha256_hex(&bytes));
        }
        let mut summary = ExperimentSummary {
            kind: self.cfg.kind,
            config_digest: self.cfg.digest(),
            seeds: self.cfg.stage_seeds(),
            headline: self.headline,
            files,
            wall_clock_secs: started.elapsed().as_secs_f64(),
            content_hash: String::new(),
        };
        summary.content_hash = summary.compute_hash();
        write_json(&self.out.join(SUMMARY_FILE), &summary)?;
        Ok(summary)
    }

    fn dataset(&mut self) -> Result<Dataset> {
        let dir = self.path("dataset");
        let stamp = dir.join("spec.json");
        let data = match read_json::<DatasetSpec>(&stamp) {
            Ok(spec) if spec == self.cfg.dataset => Dataset::read(&dir)?,
            _ => {
                let data = Dataset::generate(&self.cfg.dataset)?;
                data.write(&dir)?;
                write_json(&stamp, &self.cfg.dataset)?;
                data
            }
        };
        self.emit("dataset/dataset.fbnd");
        self.emit("dataset/splits.json");
        Ok(data)
    }

    /// A BN-only trained supernet, fair or biased, cached as a checkpoint.
    fn supernet(&mut self, data: &Dataset, fair: bool) -> Result<Supernet> {
        let space = SpaceConfig {
            fair_bn: fair,
            ..self.cfg.space.clone()
        };
        let train = TrainConfig {
            mode: TrainMode::BnOnly,
            ..self.cfg.supernet.clone()
        };
        let name = if fair { "fair_supernet" } else { "biased_supernet" };
        let ckpt = self.path(&format!("{name}.fbns"));
        let stamp = self.path(&format!("{name}.stamp.json"));
        let key = digest_of(&(&self.cfg.dataset, &space, &train));
        let fresh = || -> Result<()> {
            let mut net = Supernet::build(&space)?;
            train_supernet(&mut net, data, &train)?;
            save_checkpoint(&net, &ckpt)
        };
        cached(&stamp, &key, fresh)?;
        let net = match load_checkpoint(&ckpt) {
            Ok(net) => net,
            Err(_) => {
                std::fs::remove_file(&stamp).map_err(|e| Error::io(&stamp, e))?;
                cached(&stamp, &key, fresh)?;
                load_checkpoint(&ckpt)?
            }
        };
        self.emit(&format!("{name}.fbns"));
        Ok(net)
    }

    fn sample_archs(&self, n: usize, label: &str) -> Vec<ArchEncoding> {
        if n >= SPACE_SIZE {
            return enumerate_space().collect();
        }
        let mut rng = RngState::derive(self.cfg.seed, label);
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let a = ArchEncoding::uniform(&mut rng);
            if seen.insert(a) {
                out.push(a);
            }
        }
        out
    }

    /// Stand-alone test accuracy of the ground-truth sample, in sample order.
    fn ground_truth(&mut self, data: &Dataset) -> Result<(Vec<ArchEncoding>, Vec<f64>)> {
        let archs = self.sample_archs(self.cfg.ground_truth.size, "ground_truth.archs");
        let train = self.cfg.ground_truth.train.clone();
        let key = digest_of(&(&self.cfg.dataset, &self.cfg.space, &train, self.cfg.seed));
        let csv_path = self.path("ground_truth.csv");
        let stamp = self.path("ground_truth.stamp.json");
        let mut rows = match read_json::<String>(&stamp) {
            Ok(k) if k == key => read_ground_truth(&csv_path).unwrap_or_default(),
            _ => BTreeMap::new(),
        };
        write_json(&stamp, &key)?;
        rewrite_ground_truth(&csv_path, &archs, &rows)?;
        let todo: Vec<ArchEncoding> = archs.iter().copied().filter(|a| !rows.contains_key(a)).collect();
        let space = self.cfg.space.clone();
        let seed = self.cfg.seed;
        for chunk in todo.chunks(workers().max(1)) {
            let done = chunk
                .par_iter()
                .map(|&arch| {
                    let cfg = TrainConfig {
                        seed: derive_seed(seed, &format!("standalone.{arch}")),
                        ..train.clone()
                    };
                    let (_, rec) = train_standalone(arch, &space, data, &cfg)?;
                    Ok(GroundTruthRow {
                        arch,
                        val_accuracy: rec.val_accuracy.unwrap_or(f64::NAN),
                        test_accuracy: rec.test_accuracy.unwrap_or(f64::NAN),
                        seed: cfg.seed,
                        content_hash: rec.content_hash,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            for row in done {
                rows.insert(row.arch, row);
            }
            rewrite_ground_truth(&csv_path, &archs, &rows)?;
        }
        self.emit("ground_truth.csv");
        let acc = archs.iter().map(|a| rows[a].test_accuracy).collect();
        Ok((archs, acc))
    }

    fn scores(&mut self, net: &Supernet, archs: &[ArchEncoding], data: &Dataset, name: &str) -> Result<Vec<IndicatorScores>> {
        let key = digest_of(&(net.store.checksum(|_| true), archs, &self.cfg.indicators, &self.cfg.dataset));
        cached(&self.path(&format!("{name}.json")), &key, || score_all(net, archs, data, &self.cfg.indicators))
    }

    fn fair_table(&mut self) -> Result<(Vec<ArchEncoding>, Vec<f64>, RankTable)> {
        let data = self.dataset()?;
        let (archs, acc) = self.ground_truth(&data)?;
        let net = self.supernet(&data, true)?;
        let scores = self.scores(&net, &archs, &data, "scores_fair")?;
        let table = cpi_rank(&scores, self.cfg.indicators.uncertainty_lower_is_better)?;
        table.write_csv(&self.path("scores_fair.csv"))?;
        self.emit("scores_fair.csv");
        Ok((archs, acc, table))
    }

    fn biased_gamma(&mut self, archs: &[ArchEncoding]) -> Result<Vec<f64>> {
        let data = self.dataset()?;
        let net = self.supernet(&data, false)?;
        let gamma = archs.iter().map(|&a| gamma_score(&net, a)).collect::<Result<Vec<_>>>()?;
        let mut w = crate::io::csv_writer(&self.path("gamma_biased.csv"))?;
        w.write_record(["arch", "gamma"])?;
        for (a, g) in archs.iter().zip(&gamma) {
            w.write_record([a.to_string(), g.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(self.path("gamma_biased.csv"), e))?;
        self.emit("gamma_biased.csv");
        Ok(gamma)
    }

    fn unfairness_census(&mut self) -> Result<()> {
        let (archs, acc, table) = self.fair_table()?;
        let gamma = self.biased_gamma(&archs)?;
        let k = self.cfg.top_k;
        let fair_top: Vec<ArchEncoding> = table.top(k);
        let biased_top: Vec<ArchEncoding> = top_by(&archs, &gamma, k);
        let fair_census = census_ops(&fair_top);
        let biased_census = census_ops(&biased_top);
        let mut w = crate::io::csv_writer(&self.path("census.csv"))?;
        w.write_record(["supernet", "ranking", "op", "count"])?;
        for (sn, rk, census) in [("biased", "gamma", biased_census), ("fair", "cpi", fair_census)] {
            for op in OpKind::ALL {
                w.write_record([sn.to_string(), rk.to_string(), op.name().to_string(), census[op.digit() as usize].to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(self.path("census.csv"), e))?;
        self.emit("census.csv");
        let acc_of: BTreeMap<ArchEncoding, f64> = archs.iter().copied().zip(acc.iter().copied()).collect();
        let mean_acc = |top: &[ArchEncoding]| top.iter().map(|a| acc_of[a]).sum::<f64>() / top.len() as f64;
        self.put("top_k", k);
        self.put("biased_gamma_conv_fraction", conv_fraction(&biased_top));
        self.put("fair_cpi_conv_fraction", conv_fraction(&fair_top));
        self.put("fair_cpi_nonconv_edges", fair_top.iter().map(|a| NUM_EDGES - conv_edges(*a)).sum::<usize>());
        self.put("biased_gamma_top_mean_test_accuracy", mean_acc(&biased_top));
        self.put("fair_cpi_top_mean_test_accuracy", mean_acc(&fair_top));
        self.put("biased_gamma_top", biased_top.iter().map(|a| a.to_string()).collect::<Vec<_>>());
        self.put("fair_cpi_top", fair_top.iter().map(|a| a.to_string()).collect::<Vec<_>>());
        Ok(())
    }

    fn fair_correlations(&mut self, acc: &[f64], table: &RankTable) -> Result<CorrelationReport> {
        let col = |f: fn(&crate::indicators::RankRow) -> f64| table.rows.iter().map(f).collect::<Vec<f64>>();
        let report = correlation_report(
            acc,
            &col(|r| r.gamma),
            &col(|r| r.expressivity),
            &col(|r| r.trainability),
            &col(|r| r.uncertainty),
            &col(|r| r.cpi_rank),
        )?;
        write_json(&self.path("correlation.json"), &report)?;
        self.emit("correlation.json");
        for c in &report.indicators {
            self.put(&format!("tau_{}", c.name), c.kendall_tau);
            self.put(&format!("rho_{}", c.name), c.spearman_rho);
        }
        self.put("n", report.n);
        Ok(report)
    }

    fn gamma_failure(&mut self) -> Result<()> {
        let (archs, acc, table) = self.fair_table()?;
        self.fair_correlations(&acc, &table)?;
        let gamma = self.biased_gamma(&archs)?;
        let biased = correlation("gamma_biased", &gamma, &acc)?;
        self.put("tau_gamma_biased", biased.kendall_tau);
        self.put("rho_gamma_biased", biased.spearman_rho);
        Ok(())
    }

    fn cpi_correlation(&mut self) -> Result<()> {
        let (archs, acc, table) = self.fair_table()?;
        self.fair_correlations(&acc, &table)?;
        let k = self.cfg.top_k;
        let mean = |ix: &[ArchEncoding]| {
            let by: BTreeMap<_, _> = archs.iter().copied().zip(acc.iter().copied()).collect();
            ix.iter().map(|a| by[a]).sum::<f64>() / ix.len() as f64
        };
        let gamma: Vec<f64> = table.rows.iter().map(|r| r.gamma).collect();
        self.put("top_k_mean_test_accuracy_cpi", mean(&table.top(k)));
        self.put("top_k_mean_test_accuracy_gamma", mean(&top_by(&archs, &gamma, k)));
        self.put("mean_test_accuracy", acc.iter().sum::<f64>() / acc.len() as f64);
        Ok(())
    }

    fn ntk_sweep(&mut self) -> Result<()> {
        let n = &self.cfg.ntk;
        let (x, y) = ntk_dataset(n.num_inputs, n.base.widths[0], derive_seed(self.cfg.seed, "ntk.data"))?;
        let jobs: Vec<(usize, u64)> =
            n.widths.iter().flat_map(|&w| (0..n.seeds as u64).map(move |s| (w, s))).collect();
        let key = digest_of(&(n, self.cfg.seed));
        let base_seed = self.cfg.ntk.base.seed;
        let reports: Vec<DriftReport> = cached(&self.path("ntk.json"), &key, || {
            jobs.par_iter()
                .map(|&(w, s)| {
                    let mut c = n.base.with_width(w);
                    c.seed = derive_seed(base_seed, &format!("net.{s}"));
                    let mut r = drift_measure(&c, &x, &y, n.steps, n.lr)?;
                    r.seed = s;
                    Ok(r)
                })
                .collect()
        })?;
        write_drift_csv(&self.path("drift.csv"), &reports)?;
        self.emit("drift.csv");
        let widths = self.cfg.ntk.widths.clone();
        let med = |f: fn(&DriftReport) -> f64| -> Vec<f64> {
            widths
                .iter()
                .map(|&w| median(reports.iter().filter(|r| r.width == w).map(f).collect()))
                .collect()
        };
        let drift = med(|r| r.drift);
        let relerr = med(|r| r.init_limit_relerr);
        let relerr_dot = med(|r| r.init_limit_relerr_derivative);
        self.put("widths", &widths);
        self.put("median_drift", &drift);
        self.put("median_init_limit_relerr", &relerr);
        self.put("median_init_limit_relerr_derivative", &relerr_dot);
        self.put("drift_strictly_decreasing", drift.windows(2).all(|w| w[1] < w[0]));
        self.put("relerr_decreasing", relerr.windows(2).all(|w| w[1] < w[0]));
        self.put("relerr_at_max_width", relerr.last().copied().unwrap_or(f64::NAN));
        Ok(())
    }

    fn full_search(&mut self) -> Result<()> {
        let data = self.dataset()?;
        let net = self.supernet(&data, true)?;
        let icfg = self.cfg.indicators.clone();
        let evo = self.cfg.search.clone();
        let space = self.cfg.space.clone();
        let key = digest_of(&(net.store.checksum(|_| true), &icfg, &evo, &self.cfg.dataset));
        let (net_ref, data_ref) = (&net, &data);
        let fitness = Fitness::composite(move |a| score_arch(net_ref, a, data_ref, &icfg), self.cfg.indicators.uncertainty_lower_is_better);
        let result = cached(&self.path("search.json"), &key, || evolutionary_search(&space, &evo, &fitness))?;
        result.write_history_csv(&self.path("history.csv"))?;
        self.emit("history.csv");
        let budget = result.ranked.len();
        let random = cached(&self.path("random_search.json"), &key, || {
            random_search(&space, budget, &evo.constraints(), &fitness, derive_seed(self.cfg.seed, "search.random"))
        })?;
        let train = self.cfg.ground_truth.train.clone();
        let seed = self.cfg.seed;
        let finals = [("evolution", result.best()), ("random", random[0].arch)];
        let trained: Vec<(String, ArchEncoding, f64)> = cached(&self.path("search_standalone.json"), &key, || {
            finals
                .par_iter()
                .map(|&(name, arch)| {
                    let cfg = TrainConfig {
                        seed: derive_seed(seed, &format!("standalone.{arch}")),
                        ..train.clone()
                    };
                    let (_, rec) = train_standalone(arch, &space, data_ref, &cfg)?;
                    Ok((name.to_string(), arch, rec.test_accuracy.unwrap_or(f64::NAN)))
                })
                .collect()
        })?;
        self.put("evaluations", budget);
        for (name, arch, acc) in trained {
            self.put(&format!("{name}_best_arch"), arch.to_string());
            self.put(&format!("{name}_best_test_accuracy"), acc);
        }
        Ok(())
    }

    fn expressivity_stability(&mut self) -> Result<()> {
        let data = self.dataset()?;
        let st = self.cfg.stability.clone();
        let archs = self.sample_archs(st.archs, "stability.archs");
        let train = TrainConfig {
            mode: TrainMode::BnOnly,
            epochs: st.epoch + st.gap,
            ..self.cfg.supernet.clone()
        };
        let space = SpaceConfig {
            fair_bn: true,
            ..self.cfg.space.clone()
        };
        let icfg = self.cfg.indicators.clone();
        let key = digest_of(&(&self.cfg.dataset, &space, &train, &icfg, &archs));
        let snapshots: Vec<Vec<f64>> = cached(&self.path("stability.json"), &key, || {
            let mut net = Supernet::build(&space)?;
            let mut snaps = Vec::new();
            train_supernet_observed(&mut net, &data, &train, |epoch, net| {
                if epoch + 1 == st.epoch || epoch + 1 == st.epoch + st.gap {
                    snaps.push(archs.par_iter().map(|&a| expressivity_score(net, a, &data, &icfg)).collect::<Result<Vec<_>>>()?);
                }
                Ok(())
            })?;
            Ok(snaps)
        })?;
        let mut w = crate::io::csv_writer(&self.path("stability.csv"))?;
        w.write_record(["arch", "expressivity_early", "expressivity_late"])?;
        for (i, a) in archs.iter().enumerate() {
            w.write_record([a.to_string(), snapshots[0][i].to_string(), snapshots[1][i].to_string()])?;
        }
        w.flush().map_err(|e| Error::io(self.path("stability.csv"), e))?;
        self.emit("stability.csv");
        let c = correlation("expressivity", &snapshots[0], &snapshots[1])?;
        self.put("epoch_early", st.epoch);
        self.put("epoch_late", st.epoch + st.gap);
        self.put("n", archs.len());
        self.put("kendall_tau", c.kendall_tau);
        self.put("spearman_rho", c.spearman_rho);
        Ok(())
    }
}

/// Load `path` if it was written under `key`, else compute and store it.
fn cached<T: Serialize + DeserializeOwned>(path: &Path, key: &str, compute: impl FnOnce() -> Result<T>) -> Result<T> {
    #[derive(Serialize, Deserialize)]
    struct Entry<T> {
        key: String,
        value: T,
    }
    if let Ok(e) = read_json::<Entry<T>>(path) {
        if e.key == key {
            return Ok(e.value);
        }
    }
    let value = compute()?;
    let entry = Entry {
        key: key.to_string(),
        value,
    };
    write_json(path, &entry)?;
    Ok(entry.value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRow {
    pub arch: ArchEncoding,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub seed: u64,
    pub content_hash: String,
}

pub fn read_ground_truth(path: &Path) -> Result<BTreeMap<ArchEncoding, GroundTruthRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = BTreeMap::new();
    for row in r.deserialize() {
        let row: GroundTruthRow = row?;
        out.insert(row.arch, row);
    }
    Ok(out)
}

/// Completed rows in sample order.
fn rewrite_ground_truth(path: &Path, order: &[ArchEncoding], rows: &BTreeMap<ArchEncoding, GroundTruthRow>) -> Result<()> {
    let mut w = crate::io::csv_writer(path)?;
    w.write_record(GROUND_TRUTH_CSV_HEADER)?;
    for a in order {
        if let Some(r) = rows.get(a) {
            w.write_record([
                r.arch.to_string(),
                r.val_accuracy.to_string(),
                r.test_accuracy.to_string(),
                r.seed.to_string(),
                r.content_hash.clone(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn top_by(archs: &[ArchEncoding], score: &[f64], k: usize) -> Vec<ArchEncoding> {
    let mut idx: Vec<usize> = (0..archs.len()).collect();
    idx.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(archs[a].cmp(&archs[b])));
    idx.into_iter().take(k).map(|i| archs[i]).collect()
}

fn conv_edges(a: ArchEncoding) -> usize {
    (0..NUM_EDGES).filter(|&e| a.op(e).is_conv()).count()
}

/// Share of convolution edges among all edges of `archs`.
pub fn conv_fraction(archs: &[ArchEncoding]) -> f64 {
    archs.iter().map(|&a| conv_edges(a)).sum::<usize>() as f64 / (NUM_EDGES * archs.len()) as f64
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Correlations of each indicator with accuracy. The composite enters as
/// `−cpi_rank` and uncertainty as `−uncertainty`, so positive means the
/// indicator agrees with accuracy; the headline numbers are the composite's.
pub fn correlation_report(
    accuracy: &[f64],
    gamma: &[f64],
    expressivity: &[f64],
    trainability: &[f64],
    uncertainty: &[f64],
    cpi_rank: &[f64],
) -> Result<CorrelationReport> {
    let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<f64>>();
    let indicators: Vec<Correlation> = vec![
        correlation("cpi", &neg(cpi_rank), accuracy)?,
        correlation("gamma", gamma, accuracy)?,
        correlation("expressivity", expressivity, accuracy)?,
        correlation("trainability", trainability, accuracy)?,
        correlation("uncertainty", &neg(uncertainty), accuracy)?,
    ];
    Ok(CorrelationReport {
        n: accuracy.len(),
        kendall_tau: indicators[0].kendall_tau,
        spearman_rho: indicators[0].spearman_rho,
        indicators,
    })
}

/// Join a rank table CSV with a ground-truth CSV on `arch` and correlate.
pub fn correlate_files(scores: &Path, truth: &Path) -> Result<CorrelationReport> {
    let mut r = csv::Reader::from_path(scores)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format { path: scores.to_path_buf(), detail: format!("missing column `{name}`") })
    };
    let (ia, ig, ie, it, iu, ic) = (col("arch")?, col("gamma")?, col("expressivity")?, col("trainability")?, col("uncertainty")?, col("cpi_rank")?);
    let truth = read_ground_truth(truth)?;
    let mut cols: [Vec<f64>; 6] = Default::default();
    for rec in r.records() {
        let rec = rec?;
        let arch: ArchEncoding = rec[ia].parse()?;
        let Some(t) = truth.get(&arch) else { continue };
        let num = |i: usize| -> Result<f64> {
            rec[i].parse::<f64>().map_err(|e| Error::Format { path: scores.to_path_buf(), detail: format!("{arch}: {e}") })
        };
        for (slot, i) in cols.iter_mut().zip([ig, ie, it, iu, ic]) {
            slot.push(num(i)?);
        }
        cols[5].push(t.test_accuracy);
    }
    if cols[5].len() < 2 {
        return Err(Error::invalid("fewer than 2 architectures appear in both files"));
    }
    correlation_report(&cols[5], &cols[0], &cols[1], &cols[2], &cols[3], &cols[4])
}
