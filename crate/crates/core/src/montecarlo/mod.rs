//! Replication ensembles and the statistical tests run on them.
//!
//! Replication `r` uses the stream `rng::stream(master_seed, r)`. Replications
//! are folded sequentially inside fixed blocks of [`BLOCK`] consecutive
//! indices, and block results are merged pairwise along a fixed binary tree.
//! The result is bit-identical for any number of worker threads.

mod checks;
mod report;
mod stats;

pub use checks::*;
pub use report::*;
pub use stats::{JointMoments, Moments};

use serde::Serialize;
use thiserror::Error;

use crate::fclt::{FcltError, GObserver, ProcessSample, TimeGrid};
use crate::martingale::{scaled_projection, Normalizer};
use crate::rng;
use crate::spectral::{Eigenpair, Regime, ReplacementMatrix, Spectrum};
use crate::urn::{DrawRecord, Observer, ObserverError, Urn, UrnError, UrnState};

/// Replications folded sequentially before any merge.
pub const BLOCK: u64 = 64;
pub const MIN_REPLICATIONS_FOR_TESTS: u64 = 1000;

#[derive(Debug, Error)]
pub enum MonteCarloError {
    #[error("invalid ensemble config: {0}")]
    InvalidConfig(String),
    #[error("replication {index}: {source}")]
    Urn {
        index: u64,
        #[source]
        source: UrnError,
    },
    #[error("replication {index}: {source}")]
    Fclt {
        index: u64,
        #[source]
        source: FcltError,
    },
    #[error("InsufficientReplications: {count} < {need}")]
    InsufficientReplications { count: u64, need: u64 },
    #[error("DegenerateVariance: {0} has zero sample variance")]
    DegenerateVariance(String),
    #[error("probe indices must span at least two decades")]
    ProbeSpan,
    #[error("thread pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    pub replications: u64,
    pub master_seed: u64,
    pub grid: TimeGrid,
    pub initial_color: usize,
    /// Trial indices at which the squared regime-scaled projections are recorded.
    pub probes: Vec<u64>,
    /// Worker threads; `None` uses the available parallelism.
    pub workers: Option<usize>,
    /// Keep every replication's grid values of G.
    pub record_samples: bool,
}

impl EnsembleConfig {
    pub fn new(replications: u64, master_seed: u64, grid: TimeGrid) -> Self {
        Self {
            replications,
            master_seed,
            grid,
            initial_color: 0,
            probes: Vec::new(),
            workers: None,
            record_samples: false,
        }
    }

    pub fn validate(&self, k: usize) -> Result<(), MonteCarloError> {
        let bad = |m: String| Err(MonteCarloError::InvalidConfig(m));
        if self.replications < 2 {
            return bad(format!("replications must be >= 2, got {}", self.replications));
        }
        if self.grid.n0() < 10 {
            return bad(format!("n0 must be >= 10, got {}", self.grid.n0()));
        }
        if self.initial_color >= k {
            return bad(format!("initial color {} out of range for {k} colors", self.initial_color));
        }
        if self.probes.iter().any(|&p| p < 2) {
            return bad("probe indices must be >= 2".into());
        }
        if self.probes.windows(2).any(|w| w[1] <= w[0]) {
            return bad("probe indices must be strictly increasing".into());
        }
        if self.workers == Some(0) {
            return bad("workers must be >= 1".into());
        }
        Ok(())
    }

    /// Trials each replication runs.
    pub fn steps(&self) -> u64 {
        self.grid.end().max(self.probes.last().copied().unwrap_or(0))
    }
}

/// Fold of every replication's outputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleStats {
    pub n_pairs: usize,
    pub times: Vec<f64>,
    pub regimes: Vec<Regime>,
    pub probe_indices: Vec<u64>,
    /// Joint moments of the stacked G values, index `pair * T + time`.
    pub g: JointMoments,
    /// Squared scaled projections, index `pair * Q + probe`.
    pub probes: Vec<Moments>,
    /// `max_c |w_c / (n+1) - π_c|` at the final trial.
    pub distance_to_pi: Moments,
    pub n_final: u64,
    /// Replication-major G values, present when samples were recorded.
    #[serde(skip)]
    pub samples: Vec<f64>,
}

impl EnsembleStats {
    pub fn new(pairs: &[Eigenpair], times: &[f64], probe_indices: &[u64], n_final: u64) -> Self {
        let p = pairs.len();
        Self {
            n_pairs: p,
            times: times.to_vec(),
            regimes: pairs.iter().map(|q| q.regime).collect(),
            probe_indices: probe_indices.to_vec(),
            g: JointMoments::new(p * times.len()),
            probes: vec![Moments::default(); p * probe_indices.len()],
            distance_to_pi: Moments::default(),
            n_final,
            samples: Vec::new(),
        }
    }

    pub fn count(&self) -> u64 {
        self.g.count()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    /// Index of `(pair, time)` in the stacked feature vector.
    pub fn feature(&self, pair: usize, time: usize) -> usize {
        pair * self.times.len() + time
    }

    pub fn probe(&self, pair: usize, probe: usize) -> &Moments {
        &self.probes[pair * self.probe_indices.len() + probe]
    }

    /// Adds one replication. `probe_values` is pair-major.
    pub fn push(&mut self, g: &[f64], probe_values: &[f64], distance: f64, keep_sample: bool) {
        self.g.push(g);
        for (m, &v) in self.probes.iter_mut().zip(probe_values) {
            m.push(v);
        }
        self.distance_to_pi.push(distance);
        if keep_sample {
            self.samples.extend_from_slice(g);
        }
    }

    pub fn merge(&mut self, other: &EnsembleStats) {
        self.g.merge(&other.g);
        for (a, b) in self.probes.iter_mut().zip(&other.probes) {
            a.merge(b);
        }
        self.distance_to_pi.merge(&other.distance_to_pi);
        self.samples.extend_from_slice(&other.samples);
    }

    /// Recorded G samples, one slice per replication.
    pub fn sample_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.samples.chunks(self.g.dim().max(1))
    }
}

/// Records squared scaled projections at the configured trial indices.
struct ProbeObserver<'a> {
    pairs: &'a [Eigenpair],
    probes: &'a [u64],
    norms: &'a [Vec<f64>],
    next: usize,
    values: Vec<f64>,
}

impl Observer for ProbeObserver<'_> {
    #[inline]
    fn on_step(&mut self, _rec: &DrawRecord<'_>, state: &UrnState) -> Result<(), ObserverError> {
        if self.probes.get(self.next) != Some(&state.n) {
            return Ok(());
        }
        let q = self.probes.len();
        for (i, p) in self.pairs.iter().enumerate() {
            let v = scaled_projection(p.regime, p.project(&state.w), state.n, self.norms[i][self.next])
                .expect("probe indices are >= 2");
            self.values[i * q + self.next] = v * v;
        }
        self.next += 1;
        Ok(())
    }
}

fn distance_to_pi(state: &UrnState, pi: &[f64]) -> f64 {
    let total = (state.n + 1) as f64;
    state.w.iter().zip(pi).map(|(w, p)| (w / total - p).abs()).fold(0.0, f64::max)
}

struct Prepared<'a> {
    cfg: &'a EnsembleConfig,
    r: &'a ReplacementMatrix,
    spectrum: &'a Spectrum,
    probe_norms: Vec<Vec<f64>>,
    steps: u64,
}

impl Prepared<'_> {
    fn replication(&self, index: u64) -> Result<(ProcessSample, Vec<f64>, f64), MonteCarloError> {
        let pairs = &self.spectrum.pairs;
        let start = UrnState::new(self.cfg.initial_color, self.r.k()).map_err(|source| MonteCarloError::Urn { index, source })?;
        let mut urn = Urn::new(start, pairs);
        let mut g = GObserver::new(&self.cfg.grid, pairs);
        let mut probes = ProbeObserver {
            pairs,
            probes: &self.cfg.probes,
            norms: &self.probe_norms,
            next: 0,
            values: vec![0.0; pairs.len() * self.cfg.probes.len()],
        };
        let mut stream = rng::stream(self.cfg.master_seed, index);
        urn.evolve(self.r, self.steps, &mut stream, &mut [&mut g, &mut probes])
            .map_err(|source| MonteCarloError::Urn { index, source })?;
        let sample = g.finish().map_err(|source| MonteCarloError::Fclt { index, source })?;
        Ok((sample, probes.values, distance_to_pi(urn.state(), &self.spectrum.pi)))
    }

    fn block(&self, b: u64) -> Result<EnsembleStats, MonteCarloError> {
        let mut stats = EnsembleStats::new(&self.spectrum.pairs, self.cfg.grid.times(), &self.cfg.probes, self.steps);
        let end = ((b + 1) * BLOCK).min(self.cfg.replications);
        for index in b * BLOCK..end {
            let (sample, probes, dist) = self.replication(index)?;
            stats.push(sample.as_slice(), &probes, dist, self.cfg.record_samples);
        }
        Ok(stats)
    }
}

/// Merges neighbours level by level; the tree shape depends only on the
/// number of blocks.
fn tree_reduce(mut level: Vec<EnsembleStats>) -> Option<EnsembleStats> {
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len().div_ceil(2));
        let mut it = level.into_iter();
        while let Some(mut left) = it.next() {
            if let Some(right) = it.next() {
                left.merge(&right);
            }
            next.push(left);
        }
        level = next;
    }
    level.pop()
}

/// Runs every replication and folds the results.
pub fn run_ensemble(cfg: &EnsembleConfig, r: &ReplacementMatrix, spectrum: &Spectrum) -> Result<EnsembleStats, MonteCarloError> {
    use rayon::prelude::*;

    cfg.validate(r.k())?;
    let prepared = Prepared {
        cfg,
        r,
        spectrum,
        probe_norms: spectrum
            .pairs
            .iter()
            .map(|p| cfg.probes.iter().map(|&n| Normalizer::at(p.lambda, n).value()).collect())
            .collect(),
        steps: cfg.steps(),
    };
    let blocks = cfg.replications.div_ceil(BLOCK);
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cfg.workers {
        pool = pool.num_threads(w);
    }
    let pool = pool.build().map_err(|e| MonteCarloError::Pool(e.to_string()))?;
    let results: Vec<Result<EnsembleStats, MonteCarloError>> =
        pool.install(|| (0..blocks).into_par_iter().map(|b| prepared.block(b)).collect());
    let level = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(tree_reduce(level).expect("replications >= 2"))
}
