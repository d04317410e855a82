//! `fbn`: command-line driver for datasets, supernets, scoring, search, the
//! NTK sweep and the experiment pipelines.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;

use fbn_core::experiment::{correlate_files, run_experiment, ExperimentConfig, NtkSweepConfig};
use fbn_core::indicators::{cpi_rank, score_all, IndicatorConfig};
use fbn_core::io::{read_json, write_json};
use fbn_core::ntk::{drift_measure, ntk_dataset, write_drift_csv};
use fbn_core::rng::derive_seed;
use fbn_core::search::{evolutionary_search, EvoConfig, Fitness};
use fbn_core::space::{load_checkpoint, save_checkpoint, ArchEncoding, SpaceConfig, Supernet, TrainMode};
use fbn_core::train::{train_standalone, train_supernet, Dataset, DatasetSpec, TrainConfig};
use fbn_core::{Error, RngState};

#[derive(Parser)]
#[command(name = "fbn", version, about = "Train-BN-only architecture search at desk scale")]
struct Cli {
    /// JSON config for the subcommand; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path (file or directory, depending on the subcommand).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into a directory.
    GenData,
    /// BN-only supernet training; writes a checkpoint.
    TrainSupernet,
    /// Train one architecture in isolation and report its accuracy.
    Standalone,
    /// Score architectures on a trained supernet and write the rank table.
    Score,
    /// Evolutionary search on a trained supernet.
    Search,
    /// Width sweep of BN-only NTK drift.
    Ntk,
    /// Correlate a rank table with ground-truth accuracy.
    Correlate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Run an experiment pipeline.
    Experiment,
}

#[derive(Deserialize)]
#[serde(default)]
struct SupernetJob {
    dataset: PathBuf,
    space: SpaceConfig,
    train: TrainConfig,
}

impl Default for SupernetJob {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            space: SpaceConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Deserialize)]
#[serde(default)]
struct StandaloneJob {
    dataset: PathBuf,
    space: SpaceConfig,
    train: TrainConfig,
    arch: Option<ArchEncoding>,
}

impl Default for StandaloneJob {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            space: SpaceConfig::default(),
            train: TrainConfig {
                mode: TrainMode::Full,
                ..TrainConfig::default()
            },
            arch: None,
        }
    }
}

#[derive(Deserialize)]
#[serde(default)]
struct ScoreJob {
    dataset: PathBuf,
    checkpoint: PathBuf,
    indicators: IndicatorConfig,
    /// Explicit architectures; when empty, `sample` are drawn uniformly.
    archs: Vec<ArchEncoding>,
    sample: usize,
    seed: u64,
    search: EvoConfig,
}

impl Default for ScoreJob {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            checkpoint: PathBuf::from("supernet.fbns"),
            indicators: IndicatorConfig::default(),
            archs: Vec::new(),
            sample: 100,
            seed: 0,
            search: EvoConfig::default(),
        }
    }
}

fn load_config<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T, Error> {
    match path {
        Some(p) => read_json(p),
        None => Ok(T::default()),
    }
}

fn out_or(out: &Option<PathBuf>, default: &str) -> PathBuf {
    out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn print(value: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&value).expect("json value"));
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData => {
            let mut spec: DatasetSpec = load_config(&cli.config)?;
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            let out = out_or(&cli.out, "data");
            let data = Dataset::generate(&spec)?;
            data.write(&out)?;
            write_json(&out.join("spec.json"), &spec)?;
            print(json!({ "out": out, "samples": data.len(), "train": data.splits.train.len(),
                "val": data.splits.val.len(), "test": data.splits.test.len() }));
        }
        Command::TrainSupernet => {
            let mut job: SupernetJob = load_config(&cli.config)?;
            if let Some(s) = cli.seed {
                job.train.seed = s;
                job.space.seed = derive_seed(s, "space");
            }
            let data = Dataset::read(&job.dataset)?;
            let mut net = Supernet::build(&job.space)?;
            let mut rec = train_supernet(&mut net, &data, &job.train)?;
            let out = out_or(&cli.out, "supernet.fbns");
            save_checkpoint(&net, &out)?;
            rec.checkpoint = Some(out.clone());
            write_json(&run_record_path(&out), &rec)?;
            print(json!({ "checkpoint": out, "content_hash": rec.content_hash,
                "final_epoch": rec.epochs.last(), "wall_clock_secs": rec.wall_clock_secs }));
        }
        Command::Standalone => {
            let mut job: StandaloneJob = load_config(&cli.config)?;
            if let Some(s) = cli.seed {
                job.train.seed = s;
            }
            let data = Dataset::read(&job.dataset)?;
            let arch = match job.arch {
                Some(a) => a,
                None => ArchEncoding::uniform(&mut RngState::derive(job.train.seed, "standalone.arch")),
            };
            let (_, rec) = train_standalone(arch, &job.space, &data, &job.train)?;
            if let Some(out) = &cli.out {
                write_json(out, &rec)?;
            }
            print(json!({ "arch": arch, "val_accuracy": rec.val_accuracy,
                "test_accuracy": rec.test_accuracy, "content_hash": rec.content_hash }));
        }
        Command::Score => {
            let mut job: ScoreJob = load_config(&cli.config)?;
            if let Some(s) = cli.seed {
                job.seed = s;
                job.indicators.seed = s;
            }
            let data = Dataset::read(&job.dataset)?;
            let net = load_checkpoint(&job.checkpoint)?;
            let archs = if job.archs.is_empty() {
                let mut rng = RngState::derive(job.seed, "score.archs");
                (0..job.sample).map(|_| ArchEncoding::uniform(&mut rng)).collect()
            } else {
                job.archs.clone()
            };
            let scores = score_all(&net, &archs, &data, &job.indicators)?;
            let table = cpi_rank(&scores, job.indicators.uncertainty_lower_is_better)?;
            let out = out_or(&cli.out, "scores.csv");
            table.write_csv(&out)?;
            let top: Vec<String> = table.top(5).iter().map(|a| a.to_string()).collect();
            print(json!({ "out": out, "n": table.rows.len(), "top": top }));
        }
        Command::Search => {
            let mut job: ScoreJob = load_config(&cli.config)?;
            if let Some(s) = cli.seed {
                job.search.seed = s;
            }
            let data = Dataset::read(&job.dataset)?;
            let net = load_checkpoint(&job.checkpoint)?;
            let space = net.config.clone();
            let icfg = job.indicators.clone();
            let fitness = Fitness::composite(
                |a| fbn_core::indicators::score_arch(&net, a, &data, &icfg),
                icfg.uncertainty_lower_is_better,
            );
            let result = evolutionary_search(&space, &job.search, &fitness)?;
            let out = out_or(&cli.out, "search");
            result.write_history_csv(&out.join("history.csv"))?;
            write_json(&out.join("search.json"), &result)?;
            print(json!({ "out": out, "best": result.best(), "evaluated": result.ranked.len() }));
        }
        Command::Ntk => {
            let mut sweep: NtkSweepConfig = load_config(&cli.config)?;
            if let Some(s) = cli.seed {
                sweep.base.seed = s;
            }
            let (x, y) = ntk_dataset(sweep.num_inputs, sweep.base.widths[0], sweep.base.seed)?;
            let mut reports = Vec::new();
            for &w in &sweep.widths {
                for s in 0..sweep.seeds as u64 {
                    let mut c = sweep.base.with_width(w);
                    c.seed = derive_seed(sweep.base.seed, &format!("net.{s}"));
                    let mut r = drift_measure(&c, &x, &y, sweep.steps, sweep.lr)?;
                    r.seed = s;
                    reports.push(r);
                }
            }
            let out = out_or(&cli.out, "drift.csv");
            write_drift_csv(&out, &reports)?;
            print(json!({ "out": out, "rows": reports.len() }));
        }
        Command::Correlate { scores, truth } => {
            let report = correlate_files(&scores, &truth)?;
            print(serde_json::to_value(&report).expect("report serializes"));
        }
        Command::Experiment => {
            let mut cfg: ExperimentConfig = load_config(&cli.config)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(out) = &cli.out {
                cfg.out_dir = out.clone();
            }
            let summary = run_experiment(&cfg)?;
            print(serde_json::to_value(&summary).expect("summary serializes"));
        }
    }
    Ok(())
}

fn run_record_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
