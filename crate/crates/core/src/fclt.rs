//! Tail-sum process of the martingale increments.
//!
//! For each tracked pair i and time t ≥ 0,
//!
//! ```text
//! G_i(t) = Σ_{m ∈ [n0, ⌊n0 e^t⌋)} m^{λ_i - 1/2} (Z_{i,m+1} - Z_{i,m})
//! ```
//!
//! The range is half-open, so `G(0) = 0` exactly and the increments over
//! adjacent grid cells share no term. The limit is a Gaussian process with
//! independent increments and covariance `t λ_i λ_j ⟨ξ_i ξ_j, π⟩`. A variant
//! target multiplies each factor λ by Γ(1+λ), which is the growth constant of
//! the product normalizer (`Π ≈ m^λ / Γ(1+λ)`); see [`CovarianceTarget`].

use thiserror::Error;

use crate::martingale::{increment, ln_gamma, Normalizer};
use crate::spectral::{Eigenpair, Spectrum};
use crate::urn::{DrawRecord, Observer, ObserverError, UrnState};

pub const MAX_T: f64 = 3.0;
pub const DEFAULT_TIMES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FcltError {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("ShortTrajectory: need increments for m in [{need_from}, {need_to}), have [{have_from}, {have_to})")]
    ShortTrajectory {
        need_from: u64,
        need_to: u64,
        have_from: u64,
        have_to: u64,
    },
    #[error("pair index {0} out of range")]
    NoSuchPair(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    n0: u64,
    times: Vec<f64>,
    cuts: Vec<u64>,
}

impl TimeGrid {
    pub fn new(n0: u64, times: Vec<f64>) -> Result<Self, FcltError> {
        if n0 < 2 {
            return Err(FcltError::InvalidGrid(format!("n0 must be >= 2, got {n0}")));
        }
        if times.first() != Some(&0.0) {
            return Err(FcltError::InvalidGrid("times must start at 0".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(FcltError::InvalidGrid("times must be strictly increasing".into()));
        }
        let last = *times.last().expect("nonempty");
        if last > MAX_T || !last.is_finite() {
            return Err(FcltError::InvalidGrid(format!("largest time {last} exceeds {MAX_T}")));
        }
        let cuts = times.iter().map(|&t| cut_index(n0, t)).collect();
        Ok(Self { n0, times, cuts })
    }

    pub fn with_default_times(n0: u64) -> Result<Self, FcltError> {
        Self::new(n0, DEFAULT_TIMES.to_vec())
    }

    pub fn n0(&self) -> u64 {
        self.n0
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn cuts(&self) -> &[u64] {
        &self.cuts
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn cut(&self, t: f64) -> u64 {
        cut_index(self.n0, t)
    }

    /// Exclusive end of the summation range at the last grid time; the
    /// trajectory must reach trial `end()`.
    pub fn end(&self) -> u64 {
        *self.cuts.last().expect("nonempty grid")
    }

    /// `Σ_{m ∈ [n0, cut(t))} 1/m` for every grid time. Each value must lie
    /// within `2/n0` of `t`.
    pub fn harmonic_budget(&self) -> Vec<f64> {
        self.cuts
            .iter()
            .map(|&c| (self.n0..c).map(|m| 1.0 / m as f64).sum())
            .collect()
    }
}

fn cut_index(n0: u64, t: f64) -> u64 {
    (n0 as f64 * t.exp()).floor() as u64
}

/// One replication's `G_i(t)` on the grid, indexed `[pair][time]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessSample {
    n_pairs: usize,
    n_times: usize,
    g: Vec<f64>,
}

impl ProcessSample {
    pub fn get(&self, pair: usize, time: usize) -> f64 {
        self.g[pair * self.n_times + time]
    }

    pub fn n_pairs(&self) -> usize {
        self.n_pairs
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    /// Values stacked pair-major: index `pair * n_times + time`.
    pub fn as_slice(&self) -> &[f64] {
        &self.g
    }
}

/// Bound constant C in `|m^{λ-1/2} ΔZ_m| ≤ C / √m`.
///
/// `|ξ_c - W'ξ/(m+1)| ≤ 2 max|ξ|`, and `m^λ / Π_{m+1} ≤ Γ(1+λ) ≤ 1` for
/// λ ∈ [0, 1). For negative λ the ratio can exceed one by at most
/// `Γ(1+λ) 3^{-λ}`.
pub fn term_bound_constant(lambda: f64, max_abs_xi: f64) -> f64 {
    let growth = if lambda >= 0.0 {
        1.0
    } else {
        (ln_gamma(1.0 + lambda) - lambda * 3f64.ln()).exp().max(1.0)
    };
    2.0 * lambda.abs() * max_abs_xi * growth
}

/// Streaming fold of increments into grid values of G and of the drift sum
/// `Σ (W_m'ξ)² / m³`.
#[derive(Debug, Clone)]
pub struct GFold {
    n0: u64,
    cuts: Vec<u64>,
    exponents: Vec<f64>,
    bounds: Vec<f64>,
    sums: Vec<f64>,
    drift: Vec<f64>,
    g: Vec<f64>,
    drift_at: Vec<f64>,
    next_cell: usize,
    first_m: Option<u64>,
    next_m: u64,
    gap: bool,
    worst_term_ratio: f64,
}

impl GFold {
    pub fn new(grid: &TimeGrid, lambdas: &[f64], max_abs_xi: &[f64]) -> Self {
        let p = lambdas.len();
        let t = grid.len();
        Self {
            n0: grid.n0,
            cuts: grid.cuts.clone(),
            exponents: lambdas.iter().map(|l| l - 0.5).collect(),
            bounds: lambdas
                .iter()
                .zip(max_abs_xi)
                .map(|(&l, &x)| term_bound_constant(l, x))
                .collect(),
            sums: vec![0.0; p],
            drift: vec![0.0; p],
            g: vec![0.0; p * t],
            drift_at: vec![0.0; p * t],
            // grid time 0 has an empty range: its snapshot stays at zero
            next_cell: 1,
            first_m: None,
            next_m: 0,
            gap: false,
            worst_term_ratio: 0.0,
        }
    }

    fn snapshot_through(&mut self, m: u64) {
        let t = self.cuts.len();
        while self.next_cell < t && self.cuts[self.next_cell] <= m {
            for i in 0..self.sums.len() {
                self.g[i * t + self.next_cell] = self.sums[i];
                self.drift_at[i * t + self.next_cell] = self.drift[i];
            }
            self.next_cell += 1;
        }
    }

    /// Records that trial `m` was seen without supplying its terms; only
    /// valid outside `[n0, end)`.
    #[inline]
    pub fn mark(&mut self, m: u64) {
        match self.first_m {
            None => self.first_m = Some(m),
            Some(_) if m != self.next_m => self.gap = true,
            _ => {}
        }
        self.next_m = m + 1;
    }

    /// Whether m lies inside the summation range `[n0, end)`.
    #[inline]
    pub fn in_range(&self, m: u64) -> bool {
        m >= self.n0 && self.wants(m)
    }

    /// Whether terms at `m` and beyond still matter.
    #[inline]
    pub fn wants(&self, m: u64) -> bool {
        m < *self.cuts.last().expect("nonempty")
    }

    /// Feeds `ΔZ_{i,m}` and `W_m'ξ_i` for every pair. Calls must be made
    /// for consecutive `m`.
    #[inline]
    pub fn push(&mut self, m: u64, dz: &[f64], projections: &[f64]) {
        self.mark(m);
        if m < self.n0 || !self.wants(m) {
            return;
        }
        self.snapshot_through(m);
        let mf = m as f64;
        let lnm = mf.ln();
        let inv_m3 = 1.0 / (mf * mf * mf);
        let sqrt_m = mf.sqrt();
        for i in 0..self.sums.len() {
            let term = (self.exponents[i] * lnm).exp() * dz[i];
            let ratio = term.abs() * sqrt_m / self.bounds[i];
            if ratio > self.worst_term_ratio {
                self.worst_term_ratio = ratio;
            }
            debug_assert!(
                !(ratio > 1.0 + 1e-12),
                "term bound violated at m = {m}: ratio {ratio}"
            );
            self.sums[i] += term;
            self.drift[i] += projections[i] * projections[i] * inv_m3;
        }
    }

    /// Largest observed `|term|·√m / C`; at most 1.
    pub fn worst_term_ratio(&self) -> f64 {
        self.worst_term_ratio
    }

    fn check_coverage(&self) -> Result<(), FcltError> {
        let need_to = *self.cuts.last().expect("nonempty");
        let have_from = self.first_m.unwrap_or(0);
        let have_to = if self.first_m.is_some() { self.next_m } else { 0 };
        let short = need_to > self.n0 && (self.first_m.is_none() || have_from > self.n0 || have_to < need_to);
        if short || self.gap {
            return Err(FcltError::ShortTrajectory {
                need_from: self.n0,
                need_to,
                have_from,
                have_to,
            });
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<(ProcessSample, Vec<Vec<f64>>), FcltError> {
        self.check_coverage()?;
        self.snapshot_through(self.next_m.max(self.n0));
        let t = self.cuts.len();
        let p = self.sums.len();
        let drift = (0..p).map(|i| self.drift_at[i * t..(i + 1) * t].to_vec()).collect();
        Ok((
            ProcessSample {
                n_pairs: p,
                n_times: t,
                g: self.g,
            },
            drift,
        ))
    }
}

/// Observer that computes exact increments on the fly and folds them.
#[derive(Debug, Clone)]
pub struct GObserver {
    lambdas: Vec<f64>,
    xis: Vec<Vec<f64>>,
    norms: Vec<Normalizer>,
    dz: Vec<f64>,
    fold: GFold,
}

impl GObserver {
    pub fn new(grid: &TimeGrid, pairs: &[Eigenpair]) -> Self {
        let lambdas: Vec<f64> = pairs.iter().map(|p| p.lambda).collect();
        let max_xi: Vec<f64> = pairs.iter().map(Eigenpair::max_abs_xi).collect();
        Self {
            fold: GFold::new(grid, &lambdas, &max_xi),
            norms: lambdas.iter().map(|&l| Normalizer::new(l)).collect(),
            dz: vec![0.0; pairs.len()],
            xis: pairs.iter().map(|p| p.xi.clone()).collect(),
            lambdas,
        }
    }

    /// Product normalizers at the current trial index.
    pub fn normalizers(&self) -> &[Normalizer] {
        &self.norms
    }

    pub fn finish(self) -> Result<ProcessSample, FcltError> {
        self.fold.finish().map(|(g, _)| g)
    }

    pub fn finish_with_drift(self) -> Result<(ProcessSample, Vec<Vec<f64>>), FcltError> {
        self.fold.finish()
    }
}

impl Observer for GObserver {
    #[inline]
    fn on_step(&mut self, rec: &DrawRecord<'_>, _state: &UrnState) -> Result<(), ObserverError> {
        for norm in &mut self.norms {
            norm.advance();
        }
        if self.fold.in_range(rec.n) {
            for i in 0..self.dz.len() {
                self.dz[i] = increment(
                    self.lambdas[i],
                    self.xis[i][rec.color],
                    rec.prev_projections[i],
                    rec.n,
                    self.norms[i].value(),
                );
            }
            self.fold.push(rec.n, &self.dz, rec.prev_projections);
        } else {
            self.fold.mark(rec.n);
        }
        Ok(())
    }
}

/// One recorded trial: pre-draw projections and exact increments.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub n: u64,
    pub color: usize,
    pub projections: Vec<f64>,
    pub increments: Vec<f64>,
}

/// A fully recorded (small) trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub lambdas: Vec<f64>,
    pub max_abs_xi: Vec<f64>,
    pub steps: Vec<StepRecord>,
}

/// Observer that stores every step; for diagnostics at small n only.
#[derive(Debug, Clone)]
pub struct TrajectoryRecorder {
    xis: Vec<Vec<f64>>,
    norms: Vec<Normalizer>,
    trajectory: Trajectory,
}

impl TrajectoryRecorder {
    /// `start` is the state the urn is in when recording begins.
    pub fn new(pairs: &[Eigenpair], start: &UrnState) -> Self {
        Self {
            xis: pairs.iter().map(|p| p.xi.clone()).collect(),
            norms: pairs.iter().map(|p| Normalizer::at(p.lambda, start.n)).collect(),
            trajectory: Trajectory {
                lambdas: pairs.iter().map(|p| p.lambda).collect(),
                max_abs_xi: pairs.iter().map(Eigenpair::max_abs_xi).collect(),
                steps: Vec::new(),
            },
        }
    }

    pub fn into_trajectory(self) -> Trajectory {
        self.trajectory
    }
}

impl Observer for TrajectoryRecorder {
    fn on_step(&mut self, rec: &DrawRecord<'_>, _state: &UrnState) -> Result<(), ObserverError> {
        let mut increments = Vec::with_capacity(self.norms.len());
        for (i, norm) in self.norms.iter_mut().enumerate() {
            norm.advance();
            increments.push(increment(
                norm.lambda(),
                self.xis[i][rec.color],
                rec.prev_projections[i],
                rec.n,
                norm.value(),
            ));
        }
        self.trajectory.steps.push(StepRecord {
            n: rec.n,
            color: rec.color,
            projections: rec.prev_projections.to_vec(),
            increments,
        });
        Ok(())
    }
}

fn fold_trajectory(traj: &Trajectory, grid: &TimeGrid) -> Result<(ProcessSample, Vec<Vec<f64>>), FcltError> {
    let mut fold = GFold::new(grid, &traj.lambdas, &traj.max_abs_xi);
    for s in &traj.steps {
        fold.push(s.n, &s.increments, &s.projections);
    }
    fold.finish()
}

/// G values on the grid from a recorded trajectory.
pub fn accumulate_g(traj: &Trajectory, grid: &TimeGrid) -> Result<ProcessSample, FcltError> {
    fold_trajectory(traj, grid).map(|(g, _)| g)
}

/// `Σ_{m ∈ [n0, cut(t))} (W_m'ξ)² / m³` per grid time, the squared
/// drift part of `m^{λ-1/2} ΔZ_m` up to the factor λ². In every regime this
/// sum should vanish as n0 grows.
pub fn drift_term_diagnostic(traj: &Trajectory, pair: usize, grid: &TimeGrid) -> Result<Vec<f64>, FcltError> {
    if pair >= traj.lambdas.len() {
        return Err(FcltError::NoSuchPair(pair));
    }
    fold_trajectory(traj, grid).map(|(_, mut d)| d.swap_remove(pair))
}

/// `κ_ij` such that `Cov(G_i(s), G_j(t)) = min(s, t) κ_ij` in the limit.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceTarget {
    pub kappa: Vec<Vec<f64>>,
}

impl CovarianceTarget {
    /// `κ_ij = λ_i λ_j ⟨ξ_i ξ_j, π⟩`.
    pub fn from_spectrum(spectrum: &Spectrum) -> Self {
        Self::with_gains(spectrum, |p| p.lambda)
    }

    /// `κ_ij = λ_i Γ(1+λ_i) λ_j Γ(1+λ_j) ⟨ξ_i ξ_j, π⟩`: the covariance of G
    /// when Z is normalized by the exact product, whose growth is
    /// `m^λ / Γ(1+λ)` rather than `m^λ`.
    pub fn gamma_adjusted(spectrum: &Spectrum) -> Self {
        Self::with_gains(spectrum, |p| p.lambda * ln_gamma(1.0 + p.lambda).exp())
    }

    fn with_gains(spectrum: &Spectrum, gain: impl Fn(&Eigenpair) -> f64) -> Self {
        let pairs = &spectrum.pairs;
        let kappa = pairs
            .iter()
            .map(|a| {
                pairs
                    .iter()
                    .map(|b| gain(a) * gain(b) * weighted_inner(&a.xi, &b.xi, &spectrum.pi))
                    .collect()
            })
            .collect();
        Self { kappa }
    }

    pub fn c(&self, i: usize, j: usize, t: f64) -> f64 {
        t * self.kappa[i][j]
    }

    /// Unequal-time target `min(s, t) κ_ij`.
    pub fn cov(&self, i: usize, j: usize, s: f64, t: f64) -> f64 {
        s.min(t) * self.kappa[i][j]
    }

    /// Target for stacked grid values, index `(i T + s, j T + t)`.
    pub fn stacked(&self, times: &[f64]) -> Vec<f64> {
        let (p, t) = (self.kappa.len(), times.len());
        let d = p * t;
        let mut out = vec![0.0; d * d];
        for i in 0..p {
            for j in 0..p {
                for (a, &s) in times.iter().enumerate() {
                    for (b, &u) in times.iter().enumerate() {
                        out[(i * t + a) * d + j * t + b] = self.cov(i, j, s, u);
                    }
                }
            }
        }
        out
    }
}

fn weighted_inner(a: &[f64], b: &[f64], pi: &[f64]) -> f64 {
    a.iter().zip(b).zip(pi).map(|((x, y), p)| x * y * p).sum()
}

/// `c_ij(t) = t λ_i λ_j Σ_k ξ_ik ξ_jk π_k`.
pub fn theoretical_covariance(spectrum: &Spectrum, i: usize, j: usize, t: f64) -> f64 {
    let (a, b) = (&spectrum.pairs[i], &spectrum.pairs[j]);
    t * a.lambda * b.lambda * weighted_inner(&a.xi, &b.xi, &spectrum.pi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::spectral::{h_spectral_rows, ReplacementMatrix, Regime, DEFAULT_CRIT_TOL};
    use crate::urn::Urn;

    fn h() -> (ReplacementMatrix, Spectrum) {
        let r = ReplacementMatrix::new(&h_spectral_rows()).unwrap();
        let s = Spectrum::compute(&r, None, DEFAULT_CRIT_TOL).unwrap();
        (r, s)
    }

    fn record(r: &ReplacementMatrix, s: &Spectrum, steps: u64, seed: u64) -> Trajectory {
        let start = UrnState::new(0, r.k()).unwrap();
        let mut rec = TrajectoryRecorder::new(&s.pairs, &start);
        let mut urn = Urn::new(start, &s.pairs);
        let mut g = rng::stream(seed, 0);
        urn.evolve(r, steps, &mut g, &mut [&mut rec]).unwrap();
        rec.into_trajectory()
    }

    #[test]
    fn grid_validation() {
        let g = TimeGrid::with_default_times(2000).unwrap();
        assert_eq!(g.cuts(), &[2000, 2568, 3297, 4234, 5436]);
        assert_eq!(g.end(), 5436);
        assert!(TimeGrid::new(1, vec![0.0, 1.0]).is_err());
        assert!(TimeGrid::new(10, vec![0.1, 1.0]).is_err());
        assert!(TimeGrid::new(10, vec![0.0, 1.0, 1.0]).is_err());
        assert!(TimeGrid::new(10, vec![0.0, 3.5]).is_err());
    }

    #[test]
    fn harmonic_budget_brackets_t() {
        for n0 in [10u64, 100, 2000] {
            let g = TimeGrid::new(n0, vec![0.0, 0.1, 0.5, 1.0, 2.0, 3.0]).unwrap();
            for (h, &t) in g.harmonic_budget().iter().zip(g.times()) {
                assert!((h - t).abs() <= 2.0 / n0 as f64, "n0={n0} t={t} h={h}");
            }
        }
    }

    #[test]
    fn single_increment_example() {
        let grid = TimeGrid::new(100, vec![0.0, 0.5, 1.0]).unwrap();
        let traj = Trajectory {
            lambdas: vec![0.75],
            max_abs_xi: vec![1.0],
            steps: (0..grid.end())
                .map(|n| StepRecord {
                    n,
                    color: 0,
                    projections: vec![0.0],
                    increments: vec![if n == 100 { 1e-3 } else { 0.0 }],
                })
                .collect(),
        };
        let g = accumulate_g(&traj, &grid).unwrap();
        assert_eq!(g.get(0, 0), 0.0);
        let expect = 100f64.powf(0.25) * 1e-3;
        assert!((g.get(0, 1) - expect).abs() < 1e-15);
        assert!((g.get(0, 2) - 3.1623e-3).abs() < 1e-7);
    }

    #[test]
    fn principal_pair_gives_zero_process() {
        let (r, _) = h();
        let principal = Eigenpair {
            lambda: 1.0,
            xi: vec![1.0; 4],
            regime: Regime::Super,
            residual: 0.0,
        };
        let grid = TimeGrid::with_default_times(50).unwrap();
        let mut obs = GObserver::new(&grid, std::slice::from_ref(&principal));
        let mut urn = Urn::new(UrnState::new(0, 4).unwrap(), &[principal]);
        let mut g = rng::stream(5, 5);
        urn.evolve(&r, grid.end(), &mut g, &mut [&mut obs]).unwrap();
        let s = obs.finish().unwrap();
        assert!(s.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn streaming_and_recorded_paths_agree() {
        let (r, s) = h();
        let grid = TimeGrid::with_default_times(200).unwrap();
        let traj = record(&r, &s, grid.end(), 17);
        let from_traj = accumulate_g(&traj, &grid).unwrap();

        let mut obs = GObserver::new(&grid, &s.pairs);
        let mut urn = Urn::new(UrnState::new(0, 4).unwrap(), &s.pairs);
        let mut g = rng::stream(17, 0);
        urn.evolve(&r, grid.end(), &mut g, &mut [&mut obs]).unwrap();
        assert_eq!(obs.finish().unwrap(), from_traj);
        for i in 0..3 {
            assert_eq!(from_traj.get(i, 0), 0.0);
        }
    }

    #[test]
    fn short_trajectory_rejected() {
        let (r, s) = h();
        let grid = TimeGrid::with_default_times(200).unwrap();
        let traj = record(&r, &s, grid.end() - 1, 1);
        assert!(matches!(accumulate_g(&traj, &grid), Err(FcltError::ShortTrajectory { .. })));

        let mut late = record(&r, &s, grid.end(), 1);
        late.steps.retain(|st| st.n > 250);
        assert!(matches!(accumulate_g(&late, &grid), Err(FcltError::ShortTrajectory { .. })));

        let mut gappy = record(&r, &s, grid.end(), 1);
        gappy.steps.remove(300);
        assert!(matches!(accumulate_g(&gappy, &grid), Err(FcltError::ShortTrajectory { .. })));
    }

    #[test]
    fn increments_tile_exactly() {
        // G(t2) - G(t1) recomputed from the sub-range alone
        let (r, s) = h();
        let grid = TimeGrid::with_default_times(300).unwrap();
        let traj = record(&r, &s, grid.end(), 3);
        let g = accumulate_g(&traj, &grid).unwrap();
        let cuts = grid.cuts();
        for i in 0..3 {
            for k in 1..grid.len() {
                let direct: f64 = traj
                    .steps
                    .iter()
                    .filter(|st| st.n >= cuts[k - 1] && st.n < cuts[k])
                    .map(|st| (st.n as f64).powf(traj.lambdas[i] - 0.5) * st.increments[i])
                    .sum();
                let diff = g.get(i, k) - g.get(i, k - 1);
                assert!((diff - direct).abs() < 1e-12, "pair {i} cell {k}: {diff} vs {direct}");
            }
        }
    }

    #[test]
    fn term_bound_holds_along_a_run() {
        let (r, s) = h();
        let grid = TimeGrid::with_default_times(20).unwrap();
        let traj = record(&r, &s, grid.end(), 8);
        let mut fold = GFold::new(&grid, &traj.lambdas, &traj.max_abs_xi);
        for st in &traj.steps {
            fold.push(st.n, &st.increments, &st.projections);
        }
        assert!(fold.worst_term_ratio() <= 1.0);
        assert!(fold.worst_term_ratio() > 0.0);
        assert!(term_bound_constant(-0.5, 1.0) > 1.0);
    }

    #[test]
    fn theoretical_covariance_examples() {
        let (_, s) = h();
        for i in 0..3 {
            for j in 0..3 {
                let c = theoretical_covariance(&s, i, j, 1.0);
                if i == j {
                    let l = s.pairs[i].lambda;
                    assert!((c - l * l).abs() < 1e-12);
                } else {
                    assert!(c.abs() < 1e-12);
                }
            }
        }
        assert!((theoretical_covariance(&s, 2, 2, 0.4) - 0.5625 * 0.4).abs() < 1e-12);

        let r2 = ReplacementMatrix::new(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let s2 = Spectrum::compute(&r2, Some(&[(0.7, vec![1.0, -2.0])]), DEFAULT_CRIT_TOL).unwrap();
        assert!((theoretical_covariance(&s2, 0, 0, 1.0) - 0.98).abs() < 1e-12);
        let target = CovarianceTarget::from_spectrum(&s2);
        assert!((target.c(0, 0, 2.0) - 1.96).abs() < 1e-12);
        assert!((target.cov(0, 0, 0.5, 2.0) - 0.49).abs() < 1e-12);
    }

    #[test]
    fn gamma_adjusted_target() {
        let (_, s) = h();
        let t = CovarianceTarget::gamma_adjusted(&s);
        let g = ln_gamma(1.75).exp();
        assert!((t.kappa[2][2] - 0.5625 * g * g).abs() < 1e-12);
        assert!(t.kappa[0][1].abs() < 1e-12);
    }

    #[test]
    fn drift_diagnostic_shrinks_with_n0() {
        let (r, s) = h();
        let long = record(&r, &s, (4000.0 * 1f64.exp()) as u64 + 1, 21);
        for pair in 0..3 {
            let early = drift_term_diagnostic(&long, pair, &TimeGrid::with_default_times(1000).unwrap()).unwrap();
            let late = drift_term_diagnostic(&long, pair, &TimeGrid::with_default_times(4000).unwrap()).unwrap();
            let last = early.len() - 1;
            assert!(late[last] < early[last], "pair {pair}: {} !< {}", late[last], early[last]);
            assert_eq!(early[0], 0.0);
            // termwise bound: (W'ξ)²/m³ ≤ max_m (W'ξ/√m)² · 1/m²
            let grid = TimeGrid::with_default_times(1000).unwrap();
            let in_range = long.steps.iter().filter(|st| st.n >= 1000 && st.n < grid.end());
            let peak = in_range
                .clone()
                .map(|st| st.projections[pair].powi(2) / st.n as f64)
                .fold(0.0, f64::max);
            let tail: f64 = in_range.map(|st| 1.0 / (st.n as f64).powi(2)).sum();
            assert!(early[last] <= peak * tail * (1.0 + 1e-12));
        }
    }

    #[test]
    fn drift_diagnostic_zero_projection() {
        let grid = TimeGrid::new(10, vec![0.0, 1.0]).unwrap();
        let traj = Trajectory {
            lambdas: vec![0.25],
            max_abs_xi: vec![1.0],
            steps: (0..grid.end())
                .map(|n| StepRecord {
                    n,
                    color: 0,
                    projections: vec![0.0],
                    increments: vec![0.0],
                })
                .collect(),
        };
        assert_eq!(drift_term_diagnostic(&traj, 0, &grid).unwrap(), vec![0.0, 0.0]);
        assert_eq!(drift_term_diagnostic(&traj, 3, &grid), Err(FcltError::NoSuchPair(3)));
    }
}
