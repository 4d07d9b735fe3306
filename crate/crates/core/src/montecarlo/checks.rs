//! Statistical tests. All are pure functions of [`EnsembleStats`].

use serde::Serialize;

use super::stats::Moments;
use super::{EnsembleStats, MonteCarloError, MIN_REPLICATIONS_FOR_TESTS};
use crate::spectral::Regime;

pub const DEFAULT_Z_THRESHOLD: f64 = 4.0;
/// 0.999 quantile of χ² with two degrees of freedom.
pub const DEFAULT_JB_THRESHOLD: f64 = 13.8;
pub const DEFAULT_PLATEAU_FACTOR: f64 = 1.1;
pub const DEFAULT_PI_DISTANCE: f64 = 0.02;
/// Below this final trial index the convergence probe is informational.
pub const PI_PROBE_MIN_N: u64 = 5000;

fn require_count(count: u64) -> Result<(), MonteCarloError> {
    if count < MIN_REPLICATIONS_FOR_TESTS {
        return Err(MonteCarloError::InsufficientReplications {
            count,
            need: MIN_REPLICATIONS_FOR_TESTS,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Claim {
    pub name: String,
    pub kind: String,
    pub estimate: f64,
    pub theory: f64,
    pub stderr: f64,
    pub zscore: Option<f64>,
    pub pass: bool,
    /// Reported but not part of the overall verdict.
    pub informational: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovarianceEntry {
    pub i: usize,
    pub j: usize,
    pub s: f64,
    pub t: f64,
    pub empirical: f64,
    pub theory: f64,
    pub stderr: f64,
    pub z: f64,
    pub pass: bool,
}

impl CovarianceEntry {
    pub fn name(&self) -> String {
        format!("cov[G{}({}),G{}({})]", self.i, self.s, self.j, self.t)
    }

    pub fn claim(&self, kind: &str, informational: bool) -> Claim {
        Claim {
            name: self.name(),
            kind: kind.to_string(),
            estimate: self.empirical,
            theory: self.theory,
            stderr: self.stderr,
            zscore: Some(self.z),
            pass: self.pass,
            informational,
        }
    }
}

/// Compares `Cov(G_i(s), G_j(t))` with a stacked target matrix.
///
/// Entries cover `i ≤ j`, with `s ≤ t` on the diagonal and every `(s, t)`
/// off it. Where the standard error is zero (a time-0 coordinate) the entry
/// passes only if estimate and theory agree exactly.
pub fn covariance_test(stats: &EnsembleStats, target: &[f64], z_threshold: f64) -> Result<Vec<CovarianceEntry>, MonteCarloError> {
    require_count(stats.count())?;
    let (p, t) = (stats.n_pairs, stats.n_times());
    let d = p * t;
    assert_eq!(target.len(), d * d, "target dimension");
    let mut out = Vec::new();
    for i in 0..p {
        for j in i..p {
            for a in 0..t {
                for b in 0..t {
                    if i == j && b < a {
                        continue;
                    }
                    let (fa, fb) = (stats.feature(i, a), stats.feature(j, b));
                    let empirical = stats.g.covariance(fa, fb);
                    let theory = target[fa * d + fb];
                    let stderr = stats.g.covariance_stderr(fa, fb);
                    let z = if stderr > 0.0 {
                        (empirical - theory) / stderr
                    } else if empirical == theory {
                        0.0
                    } else {
                        f64::INFINITY.copysign(empirical - theory)
                    };
                    out.push(CovarianceEntry {
                        i,
                        j,
                        s: stats.times[a],
                        t: stats.times[b],
                        empirical,
                        theory,
                        stderr,
                        z,
                        pass: z.abs() <= z_threshold,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Sample correlation of adjacent grid increments of each pair, tested by
/// `|corr| √N ≤ z_threshold`.
pub fn independent_increments_test(stats: &EnsembleStats, z_threshold: f64) -> Result<Vec<Claim>, MonteCarloError> {
    require_count(stats.count())?;
    let t = stats.n_times();
    if t < 3 {
        return Err(MonteCarloError::InvalidConfig("increment test needs at least 3 grid times".into()));
    }
    let root_n = (stats.count() as f64).sqrt();
    let mut out = Vec::new();
    for i in 0..stats.n_pairs {
        let c = |x: usize, y: usize| stats.g.covariance(stats.feature(i, x), stats.feature(i, y));
        for k in 1..t - 1 {
            let cov = c(k + 1, k) - c(k + 1, k - 1) - c(k, k) + c(k, k - 1);
            let va = c(k, k) - 2.0 * c(k, k - 1) + c(k - 1, k - 1);
            let vb = c(k + 1, k + 1) - 2.0 * c(k + 1, k) + c(k, k);
            let corr = cov / (va * vb).sqrt();
            let z = corr * root_n;
            out.push(Claim {
                name: format!(
                    "corr[G{i}({})-G{i}({}),G{i}({})-G{i}({})]",
                    stats.times[k + 1],
                    stats.times[k],
                    stats.times[k],
                    stats.times[k - 1]
                ),
                kind: "independent_increments".into(),
                estimate: corr,
                theory: 0.0,
                stderr: 1.0 / root_n,
                zscore: Some(z),
                pass: z.abs() <= z_threshold,
                informational: false,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormalityEntry {
    pub pair: usize,
    pub t: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub jb_statistic: f64,
    pub pass: bool,
}

/// `JB = N (g1²/6 + g2²/24)`.
pub fn jarque_bera(m: &Moments) -> f64 {
    let n = m.count as f64;
    n * (m.skewness().powi(2) / 6.0 + m.excess_kurtosis().powi(2) / 24.0)
}

fn normality_entry(m: &Moments, pair: usize, t: f64, jb_threshold: f64) -> Result<NormalityEntry, MonteCarloError> {
    require_count(m.count)?;
    if !(m.m2 > 0.0) {
        return Err(MonteCarloError::DegenerateVariance(format!("G{pair}({t})")));
    }
    let jb = jarque_bera(m);
    Ok(NormalityEntry {
        pair,
        t,
        skewness: m.skewness(),
        excess_kurtosis: m.excess_kurtosis(),
        jb_statistic: jb,
        pass: jb <= jb_threshold,
    })
}

/// Jarque–Bera test of one raw sample.
pub fn normality_test(samples: &[f64], pair: usize, t: f64, jb_threshold: f64) -> Result<NormalityEntry, MonteCarloError> {
    let mut m = Moments::default();
    for &x in samples {
        m.push(x);
    }
    normality_entry(&m, pair, t, jb_threshold)
}

/// Jarque–Bera test of every `(pair, t > 0)` marginal from the folded moments.
pub fn normality_from_stats(stats: &EnsembleStats, jb_threshold: f64) -> Result<Vec<NormalityEntry>, MonteCarloError> {
    let mut out = Vec::new();
    for i in 0..stats.n_pairs {
        for (a, &t) in stats.times.iter().enumerate() {
            if t > 0.0 {
                out.push(normality_entry(stats.g.marginal(stats.feature(i, a)), i, t, jb_threshold)?);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentEntry {
    pub statistic: String,
    pub n: u64,
    pub value: f64,
    pub stderr: f64,
}

/// Name of the squared scaled projection for a pair: `X2`, `Y2` or `Z2`.
pub fn statistic_name(regime: Regime, pair: usize) -> String {
    let letter = match regime {
        Regime::Sub => 'X',
        Regime::Critical => 'Y',
        Regime::Super => 'Z',
    };
    format!("{letter}2[{pair}]")
}

/// Plateau rule on `(n, value)` points sorted by n: the maximum over the last
/// decade `(n_max/10, n_max]` must not exceed `factor` times the maximum over
/// the earlier points. Returns `(last_max, earlier_max, pass)`.
pub fn plateau(points: &[(u64, f64)], factor: f64) -> (f64, f64, bool) {
    let n_max = points.last().map(|p| p.0).unwrap_or(0);
    let fold = |keep: &dyn Fn(u64) -> bool| {
        points
            .iter()
            .filter(|p| keep(p.0))
            .fold(f64::NEG_INFINITY, |m, p| m.max(p.1))
    };
    let last = fold(&|n| n * 10 > n_max);
    let earlier = fold(&|n| n * 10 <= n_max);
    (last, earlier, last <= factor * earlier)
}

/// Per-probe moment estimates and one plateau claim per pair.
pub fn moment_boundedness_probe(stats: &EnsembleStats, factor: f64) -> Result<(Vec<MomentEntry>, Vec<Claim>), MonteCarloError> {
    require_count(stats.count())?;
    let probes = &stats.probe_indices;
    match (probes.first(), probes.last()) {
        (Some(&lo), Some(&hi)) if hi >= 100 * lo => {}
        _ => return Err(MonteCarloError::ProbeSpan),
    }
    let mut entries = Vec::new();
    let mut claims = Vec::new();
    for i in 0..stats.n_pairs {
        let name = statistic_name(stats.regimes[i], i);
        let mut points = Vec::new();
        for (q, &n) in probes.iter().enumerate() {
            let m = stats.probe(i, q);
            entries.push(MomentEntry {
                statistic: name.clone(),
                n,
                value: m.mean,
                stderr: m.stderr_of_mean(),
            });
            points.push((n, m.mean));
        }
        let (last, earlier, pass) = plateau(&points, factor);
        claims.push(Claim {
            name: format!("plateau[{name}]"),
            kind: "moment_boundedness".into(),
            estimate: last,
            theory: earlier,
            stderr: 0.0,
            zscore: None,
            pass,
            informational: false,
        });
    }
    Ok((entries, claims))
}

/// Mean max-norm distance between the final composition and π.
pub fn convergence_to_pi_probe(stats: &EnsembleStats, threshold: f64) -> Claim {
    let m = &stats.distance_to_pi;
    Claim {
        name: format!("distance_to_pi[n={}]", stats.n_final),
        kind: "convergence_to_pi".into(),
        estimate: m.mean,
        theory: 0.0,
        stderr: m.stderr_of_mean(),
        zscore: None,
        pass: m.mean < threshold,
        informational: stats.n_final < PI_PROBE_MIN_N,
    }
}
