//! Test report assembly and the file formats written by the CLI.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use super::checks::*;
use super::{EnsembleConfig, EnsembleStats, MonteCarloError};
use crate::fclt::CovarianceTarget;
use crate::oracle;
use crate::spectral::{ReplacementMatrix, Spectrum};

/// Which covariance target decides the verdict. The other two are reported
/// as informational entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceGate {
    /// `min(s,t) λ_i λ_j ⟨ξ_i ξ_j, π⟩`.
    #[default]
    Limit,
    /// Each λ multiplied by Γ(1+λ).
    GammaAdjusted,
    /// Exact finite-n0 covariance from the moment flow.
    Exact,
}

impl CovarianceGate {
    pub const ALL: [CovarianceGate; 3] = [CovarianceGate::Limit, CovarianceGate::GammaAdjusted, CovarianceGate::Exact];

    pub fn label(self) -> &'static str {
        match self {
            CovarianceGate::Limit => "covariance",
            CovarianceGate::GammaAdjusted => "covariance_gamma_adjusted",
            CovarianceGate::Exact => "covariance_exact",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub z: f64,
    pub jb: f64,
    pub plateau: f64,
    pub pi_distance: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            z: DEFAULT_Z_THRESHOLD,
            jb: DEFAULT_JB_THRESHOLD,
            plateau: DEFAULT_PLATEAU_FACTOR,
            pi_distance: DEFAULT_PI_DISTANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportMeta {
    pub replications: u64,
    pub master_seed: u64,
    pub n0: u64,
    pub times: Vec<f64>,
    pub initial_color: usize,
    pub steps: u64,
    pub probes: Vec<u64>,
    pub lambdas: Vec<f64>,
    pub thresholds: Thresholds,
    pub gate: CovarianceGate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestReport {
    pub meta: ReportMeta,
    pub claims: Vec<Claim>,
    pub normality: Vec<NormalityEntry>,
    /// Entries against the gating target, as written to covariance.csv.
    #[serde(skip)]
    pub covariance: Vec<CovarianceEntry>,
    #[serde(skip)]
    pub moments: Vec<MomentEntry>,
    pub pass: bool,
}

impl TestReport {
    pub fn failures(&self) -> impl Iterator<Item = &Claim> {
        self.claims.iter().filter(|c| !c.informational && !c.pass)
    }

    pub fn claims_of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a Claim> + 'a {
        self.claims.iter().filter(move |c| c.kind == kind)
    }

    /// Pretty JSON with keys sorted and floats in shortest round-trip form.
    pub fn to_json(&self) -> String {
        to_sorted_json(self)
    }
}

/// Serializes through `serde_json::Value`, whose maps are ordered by key.
pub fn to_sorted_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("report types serialize");
    let mut s = serde_json::to_string_pretty(&v).expect("value serializes");
    s.push('\n');
    s
}

/// Stacked covariance target for a gate.
pub fn target_matrix(
    gate: CovarianceGate,
    cfg: &EnsembleConfig,
    r: &ReplacementMatrix,
    spectrum: &Spectrum,
) -> Result<Vec<f64>, MonteCarloError> {
    let times = cfg.grid.times();
    Ok(match gate {
        CovarianceGate::Limit => CovarianceTarget::from_spectrum(spectrum).stacked(times),
        CovarianceGate::GammaAdjusted => CovarianceTarget::gamma_adjusted(spectrum).stacked(times),
        CovarianceGate::Exact => oracle::exact_g_covariance(r, &spectrum.pairs, cfg.initial_color, &cfg.grid)
            .map_err(|e| MonteCarloError::InvalidConfig(e.to_string()))?,
    })
}

/// Runs every test on the folded statistics.
pub fn evaluate(
    stats: &EnsembleStats,
    cfg: &EnsembleConfig,
    r: &ReplacementMatrix,
    spectrum: &Spectrum,
    thresholds: &Thresholds,
    gate: CovarianceGate,
) -> Result<TestReport, MonteCarloError> {
    let mut claims = Vec::new();
    let mut covariance = Vec::new();
    for g in CovarianceGate::ALL {
        let target = target_matrix(g, cfg, r, spectrum)?;
        let entries = covariance_test(stats, &target, thresholds.z)?;
        claims.extend(entries.iter().map(|e| e.claim(g.label(), g != gate)));
        if g == gate {
            covariance = entries;
        }
    }
    if stats.n_times() >= 3 {
        claims.extend(independent_increments_test(stats, thresholds.z)?);
    }
    let normality = normality_from_stats(stats, thresholds.jb)?;
    let mut moments = Vec::new();
    if !stats.probe_indices.is_empty() {
        let (entries, plateau) = moment_boundedness_probe(stats, thresholds.plateau)?;
        moments = entries;
        claims.extend(plateau);
    }
    claims.push(convergence_to_pi_probe(stats, thresholds.pi_distance));
    let pass = claims.iter().all(|c| c.informational || c.pass) && normality.iter().all(|e| e.pass);
    Ok(TestReport {
        meta: ReportMeta {
            replications: cfg.replications,
            master_seed: cfg.master_seed,
            n0: cfg.grid.n0(),
            times: cfg.grid.times().to_vec(),
            initial_color: cfg.initial_color,
            steps: cfg.steps(),
            probes: cfg.probes.clone(),
            lambdas: spectrum.pairs.iter().map(|p| p.lambda).collect(),
            thresholds: *thresholds,
            gate,
        },
        claims,
        normality,
        covariance,
        moments,
        pass,
    })
}

pub const COVARIANCE_CSV_HEADER: &str = "i,j,s,t,empirical,theory,stderr,z";
pub const MOMENTS_CSV_HEADER: &str = "statistic,n,value,stderr";
pub const SAMPLES_CSV_HEADER: &str = "replication,pair,t,g";

pub fn write_covariance_csv<W: Write>(mut out: W, entries: &[CovarianceEntry]) -> io::Result<()> {
    writeln!(out, "{COVARIANCE_CSV_HEADER}")?;
    for e in entries {
        writeln!(out, "{},{},{},{},{},{},{},{}", e.i, e.j, e.s, e.t, e.empirical, e.theory, e.stderr, e.z)?;
    }
    Ok(())
}

pub fn write_moments_csv<W: Write>(mut out: W, entries: &[MomentEntry]) -> io::Result<()> {
    writeln!(out, "{MOMENTS_CSV_HEADER}")?;
    for e in entries {
        writeln!(out, "{},{},{},{}", e.statistic, e.n, e.value, e.stderr)?;
    }
    Ok(())
}

/// One row per replication, pair and grid time. Requires recorded samples.
pub fn write_samples_csv<W: Write>(mut out: W, stats: &EnsembleStats) -> io::Result<()> {
    writeln!(out, "{SAMPLES_CSV_HEADER}")?;
    let t = stats.n_times();
    for (rep, row) in stats.sample_rows().enumerate() {
        for p in 0..stats.n_pairs {
            for (a, time) in stats.times.iter().enumerate() {
                writeln!(out, "{rep},{p},{time},{}", row[p * t + a])?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fclt::TimeGrid;
    use crate::montecarlo::run_ensemble;
    use crate::spectral::{h_spectral_pairs, h_spectral_rows, DEFAULT_CRIT_TOL};

    #[test]
    fn evaluate_small_ensemble() {
        let r = ReplacementMatrix::new(&h_spectral_rows()).unwrap();
        let s = Spectrum::compute(&r, Some(&h_spectral_pairs()), DEFAULT_CRIT_TOL).unwrap();
        let mut cfg = EnsembleConfig::new(1000, 9, TimeGrid::new(10, vec![0.0, 0.5, 1.0]).unwrap());
        cfg.probes = vec![2, 20, 200];
        cfg.record_samples = true;
        let st = run_ensemble(&cfg, &r, &s).unwrap();
        let rep = evaluate(&st, &cfg, &r, &s, &Thresholds::default(), CovarianceGate::Exact).unwrap();
        assert_eq!(rep.covariance.len(), 3 * 6 + 3 * 9);
        assert_eq!(rep.claims_of_kind("covariance_exact").count(), 45);
        assert!(rep.claims_of_kind("covariance").all(|c| c.informational));
        assert!(rep.claims_of_kind("covariance_exact").all(|c| c.pass), "{:?}",
            rep.claims_of_kind("covariance_exact").filter(|c| !c.pass).collect::<Vec<_>>());
        assert_eq!(rep.moments.len(), 9);
        assert_eq!(rep.normality.len(), 6);

        let json = rep.to_json();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["meta"]["gate"], "exact");
        assert!(json.find("\"claims\"").unwrap() < json.find("\"meta\"").unwrap());

        let mut buf = Vec::new();
        write_covariance_csv(&mut buf, &rep.covariance).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some(COVARIANCE_CSV_HEADER));
        assert_eq!(text.lines().count(), 1 + rep.covariance.len());
        let mut buf = Vec::new();
        write_samples_csv(&mut buf, &st).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 1000 * 9);
        let mut buf = Vec::new();
        write_moments_csv(&mut buf, &rep.moments).unwrap();
        assert!(String::from_utf8(buf).unwrap().lines().nth(1).unwrap().starts_with("X2[0],2,"));
    }

    #[test]
    fn float_format_round_trips() {
        let json = to_sorted_json(&serde_json::json!({"b": 0.1, "a": 1e-300, "c": 2.0 / 3.0}));
        assert_eq!(json, "{\n  \"a\": 1e-300,\n  \"b\": 0.1,\n  \"c\": 0.6666666666666666\n}\n");
    }
}
