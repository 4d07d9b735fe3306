use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use urnlab::martingale::{normalizer_consistency, scaled_projection, Normalizer};
use urnlab::montecarlo::{
    evaluate, run_ensemble, to_sorted_json, write_covariance_csv, write_moments_csv, write_samples_csv, EnsembleConfig,
    MonteCarloError,
};
use urnlab::oracle::{
    self, critical_rate_limit, critical_rate_scan, kersting_iterate, verify_martingale, Check, KerstingInstance,
    KerstingVerdict, NormalizerMode, OracleError,
};
use urnlab::rng;
use urnlab::spectral::{Eigenpair, Regime, Spectrum};
use urnlab::urn::{DrawRecord, Observer, ObserverError, TrajectoryCsv, Urn, UrnState};

use crate::config::RunConfig;
use crate::{Common, Failure, EXIT_CONFIG, EXIT_FAIL, EXIT_IO, EXIT_OK};

pub const NORMALIZER_N_MAX: u64 = 1_000_000;
pub const NORMALIZER_TOL: f64 = 1e-10;
pub const NORMALIZER_LAMBDAS: [f64; 5] = [-0.5, 0.25, 0.5, 0.75, 0.99];
pub const ORACLE_TOL: f64 = 1e-12;

fn load(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    if let Some(n) = common.replications {
        cfg.replications = n;
    }
    if let Some(dir) = &common.out_dir {
        cfg.out_dir = Some(dir.clone());
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| Failure::io(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::io(format!("{}: {e}", path.display()))
}

#[derive(Serialize)]
struct SpectrumOut<'a> {
    k: usize,
    pi: &'a [f64],
    pairs: &'a [Eigenpair],
    lambdas: Vec<f64>,
    stationarity_residual: f64,
}

pub fn spectrum(common: &Common) -> Result<u8, Failure> {
    let cfg = load(common)?;
    let r = cfg.replacement_matrix()?;
    let s = cfg.spectrum(&r)?;
    let text = to_sorted_json(&SpectrumOut {
        k: r.k(),
        pi: &s.pi,
        pairs: &s.pairs,
        lambdas: s.pairs.iter().map(|p| p.lambda).collect(),
        stationarity_residual: s.stationarity_residual(&r),
    });
    if cfg.out_dir.is_some() {
        write_file(&out_dir(&cfg)?.join("spectrum.json"), &text)?;
    }
    print!("{text}");
    Ok(EXIT_OK)
}

fn oracle_failure(e: OracleError) -> Failure {
    match e {
        OracleError::HorizonTooLarge { .. } => Failure::config(e.to_string()),
        _ => Failure::new(EXIT_FAIL, e.to_string()),
    }
}

fn check(name: impl Into<String>, worst_violation: f64, pass: bool) -> Check {
    Check {
        name: name.into(),
        worst_violation,
        pass,
    }
}

fn kersting(alpha: fn(u64) -> f64, beta0: f64) -> KerstingInstance {
    KerstingInstance {
        alpha: Box::new(alpha),
        beta0,
        c: 1.0,
        d: 1.0,
    }
}

/// Every oracle check for a config.
pub fn verify_checks(cfg: &RunConfig, horizon: usize, mode: NormalizerMode) -> Result<Vec<Check>, Failure> {
    let r = cfg.replacement_matrix()?;
    let s = cfg.spectrum(&r)?;
    let mut checks = Vec::new();

    let mart = verify_martingale(&r, &s.pairs, cfg.initial_color, horizon, ORACLE_TOL, mode).map_err(oracle_failure)?;
    checks.push(check(format!("martingale_exactness[h={horizon}]"), mart.worst(), mart.pass()));

    let total: f64 = oracle::enumerate(&r, cfg.initial_color, horizon)
        .map_err(oracle_failure)?
        .map(|n| n.prob)
        .sum();
    let gap = (total - 1.0).abs();
    checks.push(check("leaf_probability_sum", gap, gap <= ORACLE_TOL));

    let mut lambdas: Vec<f64> = NORMALIZER_LAMBDAS.to_vec();
    lambdas.extend(s.pairs.iter().map(|p| p.lambda).filter(|l| !NORMALIZER_LAMBDAS.contains(l)));
    for lam in lambdas {
        let worst = normalizer_consistency(lam, NORMALIZER_N_MAX);
        checks.push(check(format!("normalizer_consistency[lambda={lam}]"), worst, worst < NORMALIZER_TOL));
    }

    let fixed = kersting_iterate(&kersting(|n| 1.0 / n as f64, 1.0), 10_000).map_err(oracle_failure)?;
    let worst = fixed.betas.iter().fold(0.0_f64, |m, b| m.max((b - 1.0).abs()));
    checks.push(check("kersting_fixed_point", worst, worst == 0.0 && fixed.verdict == KerstingVerdict::Pass));
    for (name, alpha) in [
        ("kersting_harmonic", (|n| 1.0 / n as f64) as fn(u64) -> f64),
        ("kersting_shifted_harmonic", |n| 1.0 / (n as f64 + 1.0)),
    ] {
        let rep = kersting_iterate(&kersting(alpha, 5.0), 10_000).map_err(oracle_failure)?;
        let gap = (rep.beta_at(10_000) - 1.0).abs();
        checks.push(check(name, gap, gap <= 0.01 && rep.verdict == KerstingVerdict::Pass));
    }
    let summable = kersting_iterate(&kersting(|n| 1.0 / (n as f64).powi(2), 5.0), 10_000).map_err(oracle_failure)?;
    checks.push(check(
        "kersting_summable_flags_hypothesis",
        0.0,
        summable.verdict == KerstingVerdict::HypothesisViolated,
    ));

    let scan = critical_rate_scan(NORMALIZER_N_MAX, critical_rate_limit);
    checks.push(check(
        "critical_rate_limit",
        scan.gap_at_max.abs().max(scan.worst_decrease),
        scan.strictly_increasing && scan.gap_at_max.abs() <= 1e-6,
    ));

    for (i, p) in s.pairs.iter().enumerate() {
        let rep = oracle::second_moment_recursion_check(&r, p, cfg.initial_color, horizon).map_err(oracle_failure)?;
        checks.push(check(format!("second_moment_recursion[{i}]"), rep.worst_violation, rep.pass()));
    }
    Ok(checks)
}

pub fn verify(common: &Common, horizon: Option<usize>, corrupt: bool) -> Result<u8, Failure> {
    let cfg = load(common)?;
    let horizon = horizon.unwrap_or(cfg.horizon);
    let mode = if corrupt { NormalizerMode::OffByOne } else { NormalizerMode::Exact };
    let checks = verify_checks(&cfg, horizon, mode)?;
    let pass = checks.iter().all(|c| c.pass);
    let text = to_sorted_json(&json!({ "checks": checks, "horizon": horizon, "pass": pass }));
    if cfg.out_dir.is_some() {
        write_file(&out_dir(&cfg)?.join("verify.json"), &text)?;
    }
    print!("{text}");
    for c in checks.iter().filter(|c| !c.pass) {
        eprintln!("FAIL {} (worst violation {:e})", c.name, c.worst_violation);
    }
    Ok(if pass { EXIT_OK } else { EXIT_FAIL })
}

fn mc_failure(e: MonteCarloError) -> Failure {
    let code = match e {
        MonteCarloError::InvalidConfig(_) | MonteCarloError::InsufficientReplications { .. } | MonteCarloError::ProbeSpan => {
            EXIT_CONFIG
        }
        MonteCarloError::DegenerateVariance(_) => EXIT_FAIL,
        _ => EXIT_IO,
    };
    Failure::new(code, e.to_string())
}

pub fn fclt(common: &Common, dump_samples: bool) -> Result<u8, Failure> {
    let cfg = load(common)?;
    let r = cfg.replacement_matrix()?;
    let s = cfg.spectrum(&r)?;
    let mut ens: EnsembleConfig = cfg.ensemble(common.workers)?;
    ens.record_samples = dump_samples;
    ens.validate(r.k()).map_err(mc_failure)?;
    if ens.replications < urnlab::montecarlo::MIN_REPLICATIONS_FOR_TESTS {
        return Err(mc_failure(MonteCarloError::InsufficientReplications {
            count: ens.replications,
            need: urnlab::montecarlo::MIN_REPLICATIONS_FOR_TESTS,
        }));
    }
    let dir = out_dir(&cfg)?;
    let stats = run_ensemble(&ens, &r, &s).map_err(mc_failure)?;
    let report = evaluate(&stats, &ens, &r, &s, &cfg.thresholds, cfg.covariance_gate).map_err(mc_failure)?;

    write_file(&dir.join("report.json"), &report.to_json())?;
    write_file(&dir.join("config.json"), &cfg.to_json())?;
    let path = dir.join("covariance.csv");
    let mut out = create(&path)?;
    write_covariance_csv(&mut out, &report.covariance)
        .and_then(|_| out.flush())
        .map_err(io_err(&path))?;
    let path = dir.join("moments.csv");
    let mut out = create(&path)?;
    write_moments_csv(&mut out, &report.moments)
        .and_then(|_| out.flush())
        .map_err(io_err(&path))?;
    if dump_samples {
        let path = dir.join("g_samples.csv");
        let mut out = create(&path)?;
        write_samples_csv(&mut out, &stats)
            .and_then(|_| out.flush())
            .map_err(io_err(&path))?;
    }

    let failed: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
    let failed_normality: Vec<String> = report
        .normality
        .iter()
        .filter(|e| !e.pass)
        .map(|e| format!("G{}({})", e.pair, e.t))
        .collect();
    for name in &failed {
        eprintln!("FAIL {name}");
    }
    for name in &failed_normality {
        eprintln!("FAIL normality {name}");
    }
    print!(
        "{}",
        to_sorted_json(&json!({
            "pass": report.pass,
            "failed_claims": failed,
            "failed_normality": failed_normality,
            "out_dir": dir.display().to_string(),
        }))
    );
    Ok(if report.pass { EXIT_OK } else { EXIT_FAIL })
}

/// Rows of `n, Z_i..., X_i / Y_i...` every `stride` trials.
struct Diagnostics<W: Write> {
    out: W,
    pairs: Vec<Eigenpair>,
    norms: Vec<Normalizer>,
    stride: u64,
}

impl<W: Write> Diagnostics<W> {
    fn new(mut out: W, pairs: &[Eigenpair], stride: u64) -> std::io::Result<Self> {
        let mut header = vec!["n".to_string()];
        header.extend((0..pairs.len()).map(|i| format!("Z_{i}")));
        for (i, p) in pairs.iter().enumerate() {
            match p.regime {
                Regime::Sub => header.push(format!("X_{i}")),
                Regime::Critical => header.push(format!("Y_{i}")),
                Regime::Super => {}
            }
        }
        writeln!(out, "{}", header.join(","))?;
        Ok(Self {
            out,
            norms: pairs.iter().map(|p| Normalizer::new(p.lambda)).collect(),
            pairs: pairs.to_vec(),
            stride,
        })
    }
}

impl<W: Write> Observer for Diagnostics<W> {
    fn on_step(&mut self, _rec: &DrawRecord<'_>, state: &UrnState) -> Result<(), ObserverError> {
        for n in &mut self.norms {
            n.advance();
        }
        if !state.n.is_multiple_of(self.stride) {
            return Ok(());
        }
        let proj: Vec<f64> = self.pairs.iter().map(|p| p.project(&state.w)).collect();
        let mut row = vec![state.n.to_string()];
        row.extend(proj.iter().zip(&self.norms).map(|(v, n)| (v / n.value()).to_string()));
        for (p, v) in self.pairs.iter().zip(&proj) {
            if p.regime == Regime::Super {
                continue;
            }
            row.push(scaled_projection(p.regime, *v, state.n, 1.0).map(|x| x.to_string()).unwrap_or_default());
        }
        writeln!(self.out, "{}", row.join(","))?;
        Ok(())
    }
}

fn distance(state: &UrnState, s: &Spectrum) -> f64 {
    let total = (state.n + 1) as f64;
    state.w.iter().zip(&s.pi).map(|(w, p)| (w / total - p).abs()).fold(0.0, f64::max)
}

pub fn simulate(common: &Common, steps: Option<u64>, replication: u64, diagnostics: bool, stride: u64) -> Result<u8, Failure> {
    let cfg = load(common)?;
    if stride == 0 {
        return Err(Failure::config("stride must be >= 1"));
    }
    let r = cfg.replacement_matrix()?;
    let s = cfg.spectrum(&r)?;
    let steps = steps.unwrap_or(cfg.steps);
    let start = UrnState::new(cfg.initial_color, r.k()).map_err(|e| Failure::config(e.to_string()))?;
    let dir = out_dir(&cfg)?;
    let traj_path = dir.join("trajectory.csv");
    let mut traj = TrajectoryCsv::new(create(&traj_path)?, &start).map_err(io_err(&traj_path))?;
    let diag_path = dir.join("diagnostics.csv");
    let mut diag = if diagnostics {
        Some(Diagnostics::new(create(&diag_path)?, &s.pairs, stride).map_err(io_err(&diag_path))?)
    } else {
        None
    };
    let mut urn = Urn::new(start, &s.pairs);
    let mut stream = rng::stream(cfg.master_seed, replication);
    let result = match diag.as_mut() {
        Some(d) => urn.evolve(&r, steps, &mut stream, &mut [&mut traj, d]),
        None => urn.evolve(&r, steps, &mut stream, &mut [&mut traj]),
    };
    result.map_err(|e| Failure::io(e.to_string()))?;
    traj.into_inner().flush().map_err(io_err(&traj_path))?;
    if let Some(d) = diag {
        let mut out = d.out;
        out.flush().map_err(io_err(&diag_path))?;
    }
    let state = urn.state();
    print!(
        "{}",
        to_sorted_json(&json!({
            "steps": steps,
            "replication": replication,
            "final_w": state.w,
            "distance_to_pi": distance(state, &s),
            "trajectory": traj_path.display().to_string(),
            "diagnostics": diagnostics.then(|| diag_path.display().to_string()),
        }))
    );
    Ok(EXIT_OK)
}
