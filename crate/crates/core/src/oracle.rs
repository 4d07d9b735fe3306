//! Sampling-free checks at small horizons.
//!
//! Every color sequence of length `horizon` is enumerated together with its
//! probability `Π_j w_{c_j}(j) / (j + 1)`, so expectations of any functional of
//! the urn state are computed exactly (up to floating round-off). Colors with
//! zero mass are pruned.

use serde::Serialize;
use thiserror::Error;

use crate::martingale::Normalizer;
use crate::spectral::{Eigenpair, Regime, ReplacementMatrix, Spectrum};
use crate::urn::{UrnError, UrnState};

pub const MAX_HORIZON: usize = 12;
pub const MAX_LEAVES: f64 = 2e7;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("HorizonTooLarge: horizon {horizon} with {k} colors exceeds the enumeration cap")]
    HorizonTooLarge { horizon: usize, k: usize },
    #[error(transparent)]
    Urn(#[from] UrnError),
    #[error("InvalidConstants: Kersting constants must be positive (c = {c}, d = {d})")]
    InvalidConstants { c: f64, d: f64 },
    #[error("steps must be at least 1")]
    NoSteps,
    #[error("pair index {0} out of range")]
    NoSuchPair(usize),
}

fn check_horizon(k: usize, horizon: usize) -> Result<(), OracleError> {
    if horizon > MAX_HORIZON || (k as f64).powi(horizon as i32) > MAX_LEAVES {
        return Err(OracleError::HorizonTooLarge { horizon, k });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathNode {
    pub depth: usize,
    pub prob: f64,
    pub state: UrnState,
}

/// Depth-first preorder walk over every node of the enumeration tree.
pub struct Nodes<'a> {
    r: &'a ReplacementMatrix,
    horizon: usize,
    stack: Vec<PathNode>,
}

impl Iterator for Nodes<'_> {
    type Item = PathNode;

    fn next(&mut self) -> Option<PathNode> {
        let node = self.stack.pop()?;
        if node.depth < self.horizon {
            let denom = (node.state.n + 1) as f64;
            // push in reverse so colors come out ascending
            for c in (0..self.r.k()).rev() {
                let wc = node.state.w[c];
                if wc == 0.0 {
                    continue;
                }
                let mut state = node.state.clone();
                state.add_row(self.r, c);
                self.stack.push(PathNode {
                    depth: node.depth + 1,
                    prob: node.prob * (wc / denom),
                    state,
                });
            }
        }
        Some(node)
    }
}

pub fn nodes(r: &ReplacementMatrix, initial_color: usize, horizon: usize) -> Result<Nodes<'_>, OracleError> {
    check_horizon(r.k(), horizon)?;
    let state = UrnState::new(initial_color, r.k())?;
    Ok(Nodes {
        r,
        horizon,
        stack: vec![PathNode {
            depth: 0,
            prob: 1.0,
            state,
        }],
    })
}

/// Leaves at depth `horizon`, each reachable color sequence exactly once.
pub fn enumerate(
    r: &ReplacementMatrix,
    initial_color: usize,
    horizon: usize,
) -> Result<impl Iterator<Item = PathNode> + '_, OracleError> {
    Ok(nodes(r, initial_color, horizon)?.filter(move |n| n.depth == horizon))
}

/// `E[f(W_horizon)]` over the exact path distribution.
pub fn exact_expectation<F>(r: &ReplacementMatrix, initial_color: usize, horizon: usize, f: F) -> Result<f64, OracleError>
where
    F: Fn(&UrnState) -> f64,
{
    Ok(enumerate(r, initial_color, horizon)?.map(|n| n.prob * f(&n.state)).sum())
}

/// `E[f_j(W_n)]` for every depth `n = 0..=horizon` in one walk; `out[n][j]`.
pub fn exact_expectations_by_depth<F>(
    r: &ReplacementMatrix,
    initial_color: usize,
    horizon: usize,
    width: usize,
    f: F,
) -> Result<Vec<Vec<f64>>, OracleError>
where
    F: Fn(&UrnState, &mut [f64]),
{
    let mut out = vec![vec![0.0; width]; horizon + 1];
    let mut buf = vec![0.0; width];
    for node in nodes(r, initial_color, horizon)? {
        f(&node.state, &mut buf);
        for (acc, v) in out[node.depth].iter_mut().zip(&buf) {
            *acc += node.prob * v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Check {
    pub name: String,
    pub worst_violation: f64,
    pub pass: bool,
}

/// Which normalizer the children of a node are divided by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormalizerMode {
    #[default]
    Exact,
    /// Children reuse the parent's product (off by one factor): a negative
    /// control that must fail.
    OffByOne,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleReport {
    /// Worst `|Σ_c P(c) Z(child_c) - Z(node)|` per pair.
    pub worst_per_pair: Vec<f64>,
    /// Worst `|Σ_c P(c) ΔZ_c|` per pair, using the increment formula.
    pub worst_increment_mean: Vec<f64>,
    pub internal_nodes: usize,
    pub tol: f64,
}

impl MartingaleReport {
    pub fn worst(&self) -> f64 {
        self.worst_per_pair
            .iter()
            .chain(&self.worst_increment_mean)
            .fold(0.0, |a, &b| a.max(b))
    }

    pub fn pass(&self) -> bool {
        self.worst() <= self.tol
    }
}

/// Checks the one-step martingale identity at every internal node.
pub fn verify_martingale(
    r: &ReplacementMatrix,
    pairs: &[Eigenpair],
    initial_color: usize,
    horizon: usize,
    tol: f64,
    mode: NormalizerMode,
) -> Result<MartingaleReport, OracleError> {
    let norms: Vec<Vec<f64>> = pairs
        .iter()
        .map(|p| {
            let mut n = Normalizer::new(p.lambda);
            let mut v = vec![n.value()];
            for _ in 0..=horizon {
                n.advance();
                v.push(n.value());
            }
            v
        })
        .collect();
    let mut worst = vec![0.0_f64; pairs.len()];
    let mut worst_inc = vec![0.0_f64; pairs.len()];
    let mut internal = 0;
    for node in nodes(r, initial_color, horizon)? {
        if node.depth == horizon {
            continue;
        }
        internal += 1;
        let n = node.state.n as usize;
        let denom = (n + 1) as f64;
        for (i, p) in pairs.iter().enumerate() {
            let proj = p.project(&node.state.w);
            let z_here = proj / norms[i][n];
            let child_norm = match mode {
                NormalizerMode::Exact => norms[i][n + 1],
                NormalizerMode::OffByOne => norms[i][n],
            };
            let mut mean_child = 0.0;
            let mut mean_inc = 0.0;
            for c in 0..r.k() {
                let prob = node.state.w[c] / denom;
                if prob == 0.0 {
                    continue;
                }
                let mut child = node.state.clone();
                child.add_row(r, c);
                mean_child += prob * p.project(&child.w) / child_norm;
                mean_inc += prob * crate::martingale::increment(p.lambda, p.xi[c], proj, node.state.n, child_norm);
            }
            let scale = z_here.abs().max(1.0);
            worst[i] = worst[i].max((mean_child - z_here).abs() / scale);
            worst_inc[i] = worst_inc[i].max(mean_inc.abs() / scale);
        }
    }
    Ok(MartingaleReport {
        worst_per_pair: worst,
        worst_increment_mean: worst_inc,
        internal_nodes: internal,
        tol,
    })
}

/// Recursion `β_{n+1} = β_n (1 - c α_n) + d α_n`, iterated with equality.
pub struct KerstingInstance {
    pub alpha: Box<dyn Fn(u64) -> f64>,
    pub beta0: f64,
    pub c: f64,
    pub d: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum KerstingVerdict {
    Pass,
    Fail,
    /// α_n does not tend to 0, or Σα_n looks summable on the evaluated prefix.
    HypothesisViolated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KerstingReport {
    /// `betas[0] = β_1 = beta0`, `betas[n-1] = β_n`.
    pub betas: Vec<f64>,
    pub bound: f64,
    pub tail_max: f64,
    pub slack: f64,
    pub alpha_vanishes: bool,
    pub alpha_diverges: bool,
    pub verdict: KerstingVerdict,
}

impl KerstingReport {
    pub fn beta_at(&self, n: u64) -> f64 {
        self.betas[(n - 1) as usize]
    }
}

/// Iterates the recursion for `steps` steps starting from `β_1 = beta0`.
///
/// The hypotheses are checked heuristically on the prefix: α must shrink by
/// a factor 10 between the head and the tail, and the partial sum must still
/// grow by at least 1% of its value over the second half of the prefix.
pub fn kersting_iterate(inst: &KerstingInstance, steps: u64) -> Result<KerstingReport, OracleError> {
    if !(inst.c > 0.0 && inst.d > 0.0) {
        return Err(OracleError::InvalidConstants { c: inst.c, d: inst.d });
    }
    if steps == 0 {
        return Err(OracleError::NoSteps);
    }
    let mut betas = Vec::with_capacity(steps as usize + 1);
    let mut alphas = Vec::with_capacity(steps as usize);
    let mut beta = inst.beta0;
    betas.push(beta);
    for n in 1..=steps {
        let a = (inst.alpha)(n);
        alphas.push(a);
        // same recursion written so β = d/c is reproduced exactly
        beta += a * (inst.d - inst.c * beta);
        betas.push(beta);
    }
    let bound = inst.d / inst.c;
    let tail_len = (betas.len() / 10).max(1);
    let tail_max = betas[betas.len() - tail_len..].iter().fold(f64::NEG_INFINITY, |m, &b| m.max(b));
    let alpha_tail_len = (alphas.len() / 10).max(1);
    let tail_alpha = alphas[alphas.len() - alpha_tail_len..].iter().fold(0.0_f64, |m, &a| m.max(a));
    let head_alpha = alphas[..alpha_tail_len].iter().fold(0.0_f64, |m, &a| m.max(a));
    let slack = 10.0 * bound * tail_alpha;

    let alpha_vanishes = tail_alpha <= 0.1 * head_alpha;
    let total: f64 = alphas.iter().sum();
    let second_half: f64 = alphas[alphas.len() / 2..].iter().sum();
    let alpha_diverges = second_half >= 0.01 * total && total > 0.0;

    let verdict = if !(alpha_vanishes && alpha_diverges) {
        KerstingVerdict::HypothesisViolated
    } else if tail_max <= bound + slack {
        KerstingVerdict::Pass
    } else {
        KerstingVerdict::Fail
    };
    Ok(KerstingReport {
        betas,
        bound,
        tail_max,
        slack,
        alpha_vanishes,
        alpha_diverges,
        verdict,
    })
}

/// `κ_n = (n+1) ln(n+1) - n ln n - ln(n+1) = n ln(1 + 1/n)`, increasing to 1.
pub fn critical_rate_limit(n: u64) -> f64 {
    let nf = n as f64;
    nf * (1.0 / nf).ln_1p()
}

/// The unsimplified expression; loses digits for large n.
pub fn critical_rate_literal(n: u64) -> f64 {
    let nf = n as f64;
    (nf + 1.0) * (nf + 1.0).ln() - nf * nf.ln() - (nf + 1.0).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateScan {
    pub n_max: u64,
    /// Largest `κ_n - κ_{n+1}` seen, zero if strictly increasing.
    pub worst_decrease: f64,
    pub strictly_increasing: bool,
    /// `1 - κ_{n_max}`.
    pub gap_at_max: f64,
}

/// Scans `κ_n` for `n = 1..=n_max` with the given evaluator.
pub fn critical_rate_scan(n_max: u64, kappa: fn(u64) -> f64) -> RateScan {
    let mut prev = kappa(1);
    let mut worst = 0.0_f64;
    let mut strict = true;
    for n in 2..=n_max {
        let k = kappa(n);
        if !(k > prev) {
            strict = false;
            worst = worst.max(prev - k);
        }
        prev = k;
    }
    RateScan {
        n_max,
        worst_decrease: worst,
        strictly_increasing: strict,
        gap_at_max: 1.0 - prev,
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RecursionRow {
    pub n: u64,
    pub lhs: f64,
    pub rhs: f64,
    pub violation: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RecursionReport {
    pub regime: Regime,
    /// Exact one-step identity for the scaled second moment.
    pub identity: Vec<RecursionRow>,
    /// For Super pairs: `E Z²_{n+1} ≥ E Z²_n` (violation = shortfall).
    pub monotone: Vec<RecursionRow>,
    /// For Super pairs: `E Z²_{n+1} ≤ E Z²_n + λ² ⟨E W_n/(n+1), ξ²⟩ / Π²_{n+1}`.
    pub upper: Vec<RecursionRow>,
    pub worst_violation: f64,
    pub tol: f64,
}

impl RecursionReport {
    pub fn pass(&self) -> bool {
        self.worst_violation <= self.tol
    }
}

/// Second-moment recursions verified against exact enumeration values.
///
/// * Sub: `E X²_{n+1} = E X²_n (1 - 1/(n+1))(1 + 2λ/(n+1)) + λ²/(n+1) ⟨E W_n/(n+1), ξ²⟩`
/// * Critical: `E Y²_{n+1} = E Y²_n · n ln n / ((n+1) ln(n+1)) · (1 + 2λ/(n+1))
///   + λ² / ((n+1) ln(n+1)) ⟨E W_n/(n+1), ξ²⟩`
/// * Super: `E Z²_{n+1} = E Z²_n + λ²/Π²_{n+1} (⟨E W_n/(n+1), ξ²⟩ - E (W_n'ξ/(n+1))²)`
///   plus the two inequalities it implies.
pub fn second_moment_recursion_check(
    r: &ReplacementMatrix,
    pair: &Eigenpair,
    initial_color: usize,
    horizon: usize,
) -> Result<RecursionReport, OracleError> {
    let lam = pair.lambda;
    let xi2: Vec<f64> = pair.xi.iter().map(|v| v * v).collect();
    let mut norm = Normalizer::new(lam);
    let mut pis = vec![norm.value()];
    for _ in 0..=horizon {
        norm.advance();
        pis.push(norm.value());
    }
    // [E (W'ξ)², E ⟨W/(n+1), ξ²⟩, E (W'ξ/(n+1))²]
    let m = exact_expectations_by_depth(r, initial_color, horizon, 3, |s, out| {
        let proj = pair.project(&s.w);
        let denom = (s.n + 1) as f64;
        out[0] = proj * proj;
        out[1] = s.w.iter().zip(&xi2).map(|(w, x)| w * x).sum::<f64>() / denom;
        out[2] = (proj / denom).powi(2);
    })?;
    let mut identity = Vec::new();
    let mut monotone = Vec::new();
    let mut upper = Vec::new();
    let rel = |lhs: f64, rhs: f64| (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0);
    for n in 0..horizon {
        let nf = n as f64;
        let n1 = nf + 1.0;
        let (sq, sq_next, xi_w) = (m[n][0], m[n + 1][0], m[n][1]);
        match pair.regime {
            Regime::Sub if n >= 1 => {
                let lhs = sq_next / n1;
                let rhs = (sq / nf) * (1.0 - 1.0 / n1) * (1.0 + 2.0 * lam / n1) + lam * lam / n1 * xi_w;
                identity.push(RecursionRow { n: n as u64, lhs, rhs, violation: rel(lhs, rhs) });
            }
            Regime::Critical if n >= 2 => {
                let lhs = sq_next / (n1 * n1.ln());
                let rhs = (sq / (nf * nf.ln())) * (nf * nf.ln()) / (n1 * n1.ln()) * (1.0 + 2.0 * lam / n1)
                    + lam * lam / (n1 * n1.ln()) * xi_w;
                identity.push(RecursionRow { n: n as u64, lhs, rhs, violation: rel(lhs, rhs) });
            }
            Regime::Super => {
                let z2 = sq / pis[n].powi(2);
                let z2_next = sq_next / pis[n + 1].powi(2);
                let gain = lam * lam / pis[n + 1].powi(2);
                let rhs = z2 + gain * (xi_w - m[n][2]);
                identity.push(RecursionRow { n: n as u64, lhs: z2_next, rhs, violation: rel(z2_next, rhs) });
                monotone.push(RecursionRow {
                    n: n as u64,
                    lhs: z2_next,
                    rhs: z2,
                    violation: (z2 - z2_next).max(0.0),
                });
                let ub = z2 + gain * xi_w;
                upper.push(RecursionRow {
                    n: n as u64,
                    lhs: z2_next,
                    rhs: ub,
                    violation: (z2_next - ub).max(0.0),
                });
            }
            _ => {}
        }
    }
    let worst_violation = identity
        .iter()
        .chain(&monotone)
        .chain(&upper)
        .fold(0.0_f64, |a, row| a.max(row.violation));
    Ok(RecursionReport {
        regime: pair.regime,
        identity,
        monotone,
        upper,
        worst_violation,
        tol: 1e-12,
    })
}

/// Exact `E[Z_n]` for every pair and every `n ≤ horizon`; `out[n][i]`.
pub fn exact_z_means(
    r: &ReplacementMatrix,
    spectrum: &Spectrum,
    initial_color: usize,
    horizon: usize,
) -> Result<Vec<Vec<f64>>, OracleError> {
    let pis: Vec<Vec<f64>> = spectrum
        .pairs
        .iter()
        .map(|p| (0..=horizon as u64).map(|n| Normalizer::at(p.lambda, n).value()).collect())
        .collect();
    exact_expectations_by_depth(r, initial_color, horizon, spectrum.pairs.len(), |s, out| {
        for (i, p) in spectrum.pairs.iter().enumerate() {
            out[i] = p.project(&s.w) / pis[i][s.n as usize];
        }
    })
}

/// Exact first and second moments of the projections, propagated in closed
/// form: `E W_{n+1} = E W_n (I + R/(n+1))` and
/// `E[p_i p_j]_{n+1} = E[p_i p_j] (1 + (λ_i+λ_j)/(n+1)) + λ_i λ_j ⟨E W_n, ξ_i ξ_j⟩/(n+1)`
/// with `p_i = W'ξ_i`. Costs `O(k² + P² k)` per step for any `n`.
#[derive(Debug, Clone)]
pub struct MomentFlow<'a> {
    r: &'a ReplacementMatrix,
    pairs: &'a [Eigenpair],
    n: u64,
    ew: Vec<f64>,
    cross: Vec<f64>,
    norms: Vec<f64>,
    scratch: Vec<f64>,
}

impl<'a> MomentFlow<'a> {
    pub fn new(r: &'a ReplacementMatrix, pairs: &'a [Eigenpair], initial_color: usize) -> Result<Self, OracleError> {
        let start = UrnState::new(initial_color, r.k())?;
        let p = pairs.len();
        let mut cross = vec![0.0; p * p];
        for i in 0..p {
            for j in 0..p {
                cross[i * p + j] = pairs[i].xi[initial_color] * pairs[j].xi[initial_color];
            }
        }
        Ok(Self {
            r,
            pairs,
            n: 0,
            ew: start.w,
            cross,
            norms: vec![1.0; p],
            scratch: vec![0.0; p * p],
        })
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn mean_w(&self) -> &[f64] {
        &self.ew
    }

    /// `E[W_n'ξ_i W_n'ξ_j]`.
    pub fn cross(&self, i: usize, j: usize) -> f64 {
        self.cross[i * self.pairs.len() + j]
    }

    /// Product normalizer `Π_n` of pair `i`.
    pub fn normalizer(&self, i: usize) -> f64 {
        self.norms[i]
    }

    fn weighted_mean(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (&self.pairs[i].xi, &self.pairs[j].xi);
        (0..self.ew.len()).map(|c| self.ew[c] * a[c] * b[c]).sum()
    }

    /// Advances one trial and returns `E[ΔZ_i ΔZ_j]` for the trial just
    /// taken, row-major `P × P`.
    pub fn step(&mut self) -> &[f64] {
        let p = self.pairs.len();
        let denom = (self.n + 1) as f64;
        let next_norms: Vec<f64> = self
            .pairs
            .iter()
            .zip(&self.norms)
            .map(|(pair, v)| v * (1.0 + pair.lambda / denom))
            .collect();
        let mut next_cross = vec![0.0; p * p];
        for i in 0..p {
            for j in 0..p {
                let (li, lj) = (self.pairs[i].lambda, self.pairs[j].lambda);
                let xw = self.weighted_mean(i, j) / denom;
                let pp = self.cross[i * p + j];
                self.scratch[i * p + j] = li * lj / (next_norms[i] * next_norms[j]) * (xw - pp / (denom * denom));
                next_cross[i * p + j] = pp * (1.0 + (li + lj) / denom) + li * lj * xw;
            }
        }
        let k = self.ew.len();
        let mut next_w = self.ew.clone();
        for (c, &wc) in self.ew.iter().enumerate() {
            let share = wc / denom;
            if share == 0.0 {
                continue;
            }
            let row = self.r.row(c);
            for d in 0..k {
                next_w[d] += share * row[d];
            }
        }
        self.ew = next_w;
        self.cross = next_cross;
        self.norms = next_norms;
        self.n += 1;
        &self.scratch
    }

    /// Runs forward to trial index `n`.
    pub fn advance_to(&mut self, n: u64) {
        while self.n < n {
            self.step();
        }
    }
}

/// Exact `E[S²_n]` of the regime-scaled projection (X, Y or Z) for every pair
/// and probe index; `out[pair][probe]`. Probes must be increasing and ≥ 2.
pub fn exact_probe_moments(
    r: &ReplacementMatrix,
    pairs: &[Eigenpair],
    initial_color: usize,
    probes: &[u64],
) -> Result<Vec<Vec<f64>>, OracleError> {
    let mut flow = MomentFlow::new(r, pairs, initial_color)?;
    let mut out = vec![Vec::with_capacity(probes.len()); pairs.len()];
    for &n in probes {
        flow.advance_to(n);
        for (i, p) in pairs.iter().enumerate() {
            let nf = n as f64;
            let scale = match p.regime {
                Regime::Sub => nf,
                Regime::Critical => nf * nf.ln(),
                Regime::Super => flow.normalizer(i).powi(2),
            };
            out[i].push(flow.cross(i, i) / scale);
        }
    }
    Ok(out)
}

/// Exact finite-`n0` covariance of the stacked grid values of G,
/// `Cov(G_i(s), G_j(t))` at index `(i T + s, j T + t)`.
///
/// G is a sum of martingale increments, so its mean is zero and the
/// covariance is `Σ_{m < min cut} m^{λ_i-1/2} m^{λ_j-1/2} E[ΔZ_i ΔZ_j]`.
pub fn exact_g_covariance(
    r: &ReplacementMatrix,
    pairs: &[Eigenpair],
    initial_color: usize,
    grid: &crate::fclt::TimeGrid,
) -> Result<Vec<f64>, OracleError> {
    let p = pairs.len();
    let t = grid.len();
    let cuts = grid.cuts();
    let mut flow = MomentFlow::new(r, pairs, initial_color)?;
    flow.advance_to(grid.n0());
    // running[i][j] = Σ over m < current of the weighted increment moments
    let mut running = vec![0.0; p * p];
    let mut at_cut = vec![vec![0.0; p * p]; t];
    let mut next = 0;
    let mut m = grid.n0();
    loop {
        while next < t && cuts[next] <= m {
            at_cut[next].copy_from_slice(&running);
            next += 1;
        }
        if next == t {
            break;
        }
        let mf = m as f64;
        let weights: Vec<f64> = pairs.iter().map(|q| mf.powf(q.lambda - 0.5)).collect();
        let inc = flow.step();
        for i in 0..p {
            for j in 0..p {
                running[i * p + j] += weights[i] * weights[j] * inc[i * p + j];
            }
        }
        m += 1;
    }
    let d = p * t;
    let mut out = vec![0.0; d * d];
    for i in 0..p {
        for s in 0..t {
            for j in 0..p {
                for u in 0..t {
                    out[(i * t + s) * d + j * t + u] = at_cut[s.min(u)][i * p + j];
                }
            }
        }
    }
    Ok(out)
}
