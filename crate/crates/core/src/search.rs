//! Random and evolutionary search over indicator ranks.
//!
//! Fitness is a rank comparator: candidates are ranked against each other and
//! rank 1 is best. A scalar fitness (γ, negative FLOPs, a lookup table) is
//! midranked descending; a composite fitness goes through [`cpi_rank`].

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::indicators::{cpi_rank, IndicatorScores};
use crate::rng::RngState;
use crate::space::{count_flops, count_params, ArchEncoding, SpaceConfig, NUM_OPS};
use crate::stats::midranks;

/// Attempts per requested architecture before a constraint is declared
/// infeasible.
pub const MAX_RETRIES: usize = 1000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Constraints {
    /// Multiply-accumulates, see [`count_flops`].
    pub flops_limit: Option<u64>,
    /// All parameters, frozen and trainable.
    pub params_limit: Option<u64>,
}

impl Constraints {
    pub fn admits(&self, arch: ArchEncoding, space: &SpaceConfig) -> bool {
        self.flops_limit.is_none_or(|l| count_flops(arch, space) <= l)
            && self.params_limit.is_none_or(|l| count_params(arch, space, false) <= l)
    }

    pub fn is_unconstrained(&self) -> bool {
        self.flops_limit.is_none() && self.params_limit.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvoConfig {
    pub population_size: usize,
    pub generations: usize,
    /// Per-digit resampling probability. `0` freezes the population after
    /// the first generation and is meant for tests.
    pub mutation_prob: f64,
    pub parent_count: usize,
    pub flops_limit: Option<u64>,
    pub params_limit: Option<u64>,
    pub seed: u64,
}

impl Default for EvoConfig {
    fn default() -> Self {
        Self {
            population_size: 64,
            generations: 20,
            mutation_prob: 1.0 / 6.0,
            parent_count: 16,
            flops_limit: None,
            params_limit: None,
            seed: 0,
        }
    }
}

impl EvoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.parent_count == 0 || self.population_size < self.parent_count {
            return Err(Error::invalid("need population_size >= parent_count >= 1"));
        }
        if !(0.0..=1.0).contains(&self.mutation_prob) {
            return Err(Error::invalid("mutation_prob must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn constraints(&self) -> Constraints {
        Constraints {
            flops_limit: self.flops_limit,
            params_limit: self.params_limit,
        }
    }
}

type ScalarFn<'a> = Box<dyn Fn(ArchEncoding) -> Result<f64> + Sync + 'a>;
type CompositeFn<'a> = Box<dyn Fn(ArchEncoding) -> Result<IndicatorScores> + Sync + 'a>;

pub enum Fitness<'a> {
    /// Higher score is better.
    Scalar(ScalarFn<'a>),
    Composite {
        score: CompositeFn<'a>,
        uncertainty_lower_is_better: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Score {
    Scalar(f64),
    Composite(IndicatorScores),
}

impl<'a> Fitness<'a> {
    pub fn scalar(f: impl Fn(ArchEncoding) -> Result<f64> + Sync + 'a) -> Self {
        Fitness::Scalar(Box::new(f))
    }

    pub fn composite(f: impl Fn(ArchEncoding) -> Result<IndicatorScores> + Sync + 'a, uncertainty_lower_is_better: bool) -> Self {
        Fitness::Composite {
            score: Box::new(f),
            uncertainty_lower_is_better,
        }
    }

    pub fn evaluate(&self, arch: ArchEncoding) -> Result<Score> {
        match self {
            Fitness::Scalar(f) => f(arch).map(Score::Scalar),
            Fitness::Composite { score, .. } => score(arch).map(Score::Composite),
        }
    }

    /// Ranks of `archs` against each other (1 = best), in input order.
    pub fn rank(&self, archs: &[ArchEncoding], cache: &ScoreCache) -> Result<Vec<f64>> {
        if archs.len() == 1 {
            return Ok(vec![1.0]);
        }
        match self {
            Fitness::Scalar(_) => {
                let v = archs.iter().map(|a| cache.scalar(*a)).collect::<Result<Vec<_>>>()?;
                midranks(&v, true)
            }
            Fitness::Composite { uncertainty_lower_is_better, .. } => {
                let v = archs.iter().map(|a| cache.composite(*a)).collect::<Result<Vec<_>>>()?;
                Ok(cpi_rank(&v, *uncertainty_lower_is_better)?.rows.into_iter().map(|r| r.cpi_rank).collect())
            }
        }
    }
}

/// Every architecture is scored at most once per search.
#[derive(Clone, Debug, Default)]
pub struct ScoreCache {
    scores: BTreeMap<ArchEncoding, Score>,
}

impl ScoreCache {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn archs(&self) -> Vec<ArchEncoding> {
        self.scores.keys().copied().collect()
    }

    pub fn get(&self, arch: ArchEncoding) -> Option<&Score> {
        self.scores.get(&arch)
    }

    fn scalar(&self, arch: ArchEncoding) -> Result<f64> {
        match self.scores.get(&arch) {
            Some(Score::Scalar(v)) => Ok(*v),
            _ => Err(Error::invalid(format!("no scalar score for {arch}"))),
        }
    }

    fn composite(&self, arch: ArchEncoding) -> Result<IndicatorScores> {
        match self.scores.get(&arch) {
            Some(Score::Composite(s)) => Ok(s.clone()),
            _ => Err(Error::invalid(format!("no indicator scores for {arch}"))),
        }
    }

    /// Score the archs not seen yet, in parallel.
    pub fn fill(&mut self, archs: &[ArchEncoding], fitness: &Fitness) -> Result<()> {
        let mut todo: Vec<ArchEncoding> = archs.iter().copied().filter(|a| !self.scores.contains_key(a)).collect();
        todo.sort();
        todo.dedup();
        let scored = todo.par_iter().map(|&a| fitness.evaluate(a)).collect::<Result<Vec<_>>>()?;
        self.scores.extend(todo.into_iter().zip(scored));
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedArch {
    pub arch: ArchEncoding,
    pub rank: f64,
}

/// Sort by rank, ties by encoding.
fn ranked(archs: &[ArchEncoding], ranks: &[f64]) -> Vec<RankedArch> {
    let mut out: Vec<RankedArch> = archs.iter().zip(ranks).map(|(&arch, &rank)| RankedArch { arch, rank }).collect();
    out.sort_by(|a, b| a.rank.total_cmp(&b.rank).then(a.arch.cmp(&b.arch)));
    out
}

fn sample_admissible(rng: &mut RngState, space: &SpaceConfig, constraints: &Constraints) -> Result<ArchEncoding> {
    for _ in 0..MAX_RETRIES {
        let a = ArchEncoding::uniform(rng);
        if constraints.admits(a, space) {
            return Ok(a);
        }
    }
    Err(Error::invalid(format!("no architecture satisfying {constraints:?} in {MAX_RETRIES} draws")))
}

/// Sample `n` architectures uniformly under the constraints, score them, and
/// return them best first.
pub fn random_search(
    space: &SpaceConfig,
    n: usize,
    constraints: &Constraints,
    fitness: &Fitness,
    seed: u64,
) -> Result<Vec<RankedArch>> {
    if n == 0 {
        return Err(Error::invalid("random_search needs n >= 1"));
    }
    let mut rng = RngState::derive(seed, "search.random");
    let archs = (0..n).map(|_| sample_admissible(&mut rng, space, constraints)).collect::<Result<Vec<_>>>()?;
    let mut cache = ScoreCache::default();
    cache.fill(&archs, fitness)?;
    let ranks = fitness.rank(&archs, &cache)?;
    Ok(ranked(&archs, &ranks))
}

pub fn mutate(arch: ArchEncoding, prob: f64, rng: &mut RngState) -> ArchEncoding {
    let mut d = arch.digits();
    for digit in d.iter_mut() {
        if prob > 0.0 && rng.uniform() < prob {
            *digit = rng.below(NUM_OPS) as u8;
        }
    }
    ArchEncoding::from_digits(&d).expect("digits below NUM_OPS")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub best_arch: ArchEncoding,
    /// Ranks are against every architecture evaluated during the search.
    pub best_rank: f64,
    pub median_rank: f64,
}

pub const HISTORY_CSV_HEADER: [&str; 4] = ["generation", "best_arch", "best_rank", "median_rank"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    /// Every evaluated architecture, best first.
    pub ranked: Vec<RankedArch>,
    pub history: Vec<GenerationRecord>,
    /// Population after each generation (generation 0 = initial).
    pub populations: Vec<Vec<ArchEncoding>>,
}

impl SearchResult {
    pub fn best(&self) -> ArchEncoding {
        self.ranked[0].arch
    }

    pub fn write_history_csv(&self, path: &Path) -> Result<()> {
        let mut w = crate::io::csv_writer(path)?;
        w.write_record(HISTORY_CSV_HEADER)?;
        for r in &self.history {
            w.write_record([r.generation.to_string(), r.best_arch.to_string(), r.best_rank.to_string(), r.median_rank.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Keep the top `parent_count` distinct members of each population (ranked
/// against each other) and refill with mutated copies of uniformly chosen parents.
/// The history is ranked once at the end, against the full archive, so every
/// generation is judged by the same comparator.
pub fn evolutionary_search(space: &SpaceConfig, config: &EvoConfig, fitness: &Fitness) -> Result<SearchResult> {
    config.validate()?;
    let constraints = config.constraints();
    let mut rng = RngState::derive(config.seed, "search.evolution");
    let mut population = (0..config.population_size)
        .map(|_| sample_admissible(&mut rng, space, &constraints))
        .collect::<Result<Vec<_>>>()?;
    let mut cache = ScoreCache::default();
    cache.fill(&population, fitness)?;
    let mut populations = vec![population.clone()];
    for _ in 0..config.generations {
        let mut distinct = population.clone();
        distinct.sort();
        distinct.dedup();
        let ranks = fitness.rank(&distinct, &cache)?;
        let parents: Vec<ArchEncoding> =
            ranked(&distinct, &ranks).into_iter().take(config.parent_count).map(|r| r.arch).collect();
        let mut next = parents.clone();
        while next.len() < config.population_size {
            let child = (0..MAX_RETRIES)
                .map(|_| mutate(parents[rng.below(parents.len())], config.mutation_prob, &mut rng))
                .find(|c| constraints.admits(*c, space))
                .ok_or_else(|| Error::invalid(format!("no admissible child under {constraints:?}")))?;
            next.push(child);
        }
        cache.fill(&next, fitness)?;
        population = next;
        populations.push(population.clone());
    }
    let archive = cache.archs();
    let archive_ranks = fitness.rank(&archive, &cache)?;
    let rank_of: BTreeMap<ArchEncoding, f64> = archive.iter().copied().zip(archive_ranks.iter().copied()).collect();
    let history = populations
        .iter()
        .enumerate()
        .map(|(generation, pop)| {
            let ranks: Vec<f64> = pop.iter().map(|a| rank_of[a]).collect();
            let best = ranked(pop, &ranks)[0].clone();
            GenerationRecord {
                generation,
                best_arch: best.arch,
                best_rank: best.rank,
                median_rank: median(ranks),
            }
        })
        .collect();
    Ok(SearchResult {
        ranked: ranked(&archive, &archive_ranks),
        history,
        populations,
    })
}
