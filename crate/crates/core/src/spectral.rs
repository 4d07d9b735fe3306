//! Replacement matrices and their spectral data.
//!
//! A [`ReplacementMatrix`] is a validated, irreducible row-stochastic matrix.
//! From it we derive a [`Spectrum`]: the stationary row vector π and the
//! nonprincipal real eigenpairs (λ, ξ), each tagged with its fluctuation
//! [`Regime`].
//!
//! Eigenpairs may be supplied by the caller (they are then only verified) or
//! computed: Hessenberg reduction followed by Francis double-shift QR for the
//! eigenvalues, and a null-space solve of `R - λI` for each eigenvector.
//! Computed eigenvectors are scaled so that the largest entry in magnitude is
//! ±1 and the first nonzero entry is positive. Supplied eigenvectors keep the
//! caller's scale, since every covariance downstream scales with ξ.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Dense, SchurBlock};

pub const DEFAULT_ROW_TOL: f64 = 1e-12;
pub const DEFAULT_CRIT_TOL: f64 = 1e-12;
pub const RESIDUAL_TOL: f64 = 1e-8;
pub const ORTHOGONALITY_TOL: f64 = 1e-10;
pub const STATIONARY_TOL: f64 = 1e-10;

/// Eigenvalues closer than this are treated as one repeated eigenvalue.
const CLUSTER_TOL: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpectralError {
    #[error("matrix must be square with at least 2 colors (got {rows} rows)")]
    Shape { rows: usize },
    #[error("NegativeEntry({0}, {1}): replacement matrix entries must be nonnegative")]
    NegativeEntry(usize, usize),
    #[error("NonFinite({0}, {1}): replacement matrix entries must be finite")]
    NonFinite(usize, usize),
    #[error("RowSumViolation({0}, {1}): row sums must equal 1")]
    RowSumViolation(usize, f64),
    #[error("Reducible: colors {closed:?} cannot reach colors {rest:?}")]
    Reducible { closed: Vec<usize>, rest: Vec<usize> },
    #[error("SingularSystem: stationary equations are numerically singular")]
    SingularSystem,
    #[error("ComplexSpectrum: nonprincipal eigenvalue pair {re} ± {im}i is not real")]
    ComplexSpectrum { re: f64, im: f64 },
    #[error("ResidualTooLarge: eigenpair with lambda = {lambda} has residual {residual}")]
    ResidualTooLarge { lambda: f64, residual: f64 },
    #[error("OutOfRange: eigenvalue {0} is outside (-1, 1)")]
    OutOfRange(f64),
    #[error("Defective: eigenvalue {lambda} has multiplicity {multiplicity} but only {found} eigenvectors")]
    Defective {
        lambda: f64,
        multiplicity: usize,
        found: usize,
    },
    #[error("ZeroEigenvector: supplied eigenvector for lambda = {0} is zero")]
    ZeroEigenvector(f64),
    #[error("DimensionMismatch: eigenvector has length {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("NotOrthogonal: <pi, xi> = {inner} for lambda = {lambda}")]
    NotOrthogonal { lambda: f64, inner: f64 },
    #[error("eigenvalue iteration did not converge")]
    NoConvergence,
}

/// A validated k×k row-stochastic, irreducible replacement matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplacementMatrix {
    k: usize,
    entries: Vec<f64>,
    tol_row: f64,
}

impl ReplacementMatrix {
    pub fn new(rows: &[Vec<f64>]) -> Result<Self, SpectralError> {
        Self::with_tolerance(rows, DEFAULT_ROW_TOL)
    }

    /// Validates `rows` against nonnegativity, row sums within `tol_row`, and
    /// strong connectivity of the positivity pattern.
    pub fn with_tolerance(rows: &[Vec<f64>], tol_row: f64) -> Result<Self, SpectralError> {
        let k = rows.len();
        if k < 2 || rows.iter().any(|r| r.len() != k) {
            return Err(SpectralError::Shape { rows: k });
        }
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(SpectralError::NonFinite(i, j));
                }
                if v < 0.0 {
                    return Err(SpectralError::NegativeEntry(i, j));
                }
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > tol_row {
                return Err(SpectralError::RowSumViolation(i, sum));
            }
        }
        let entries: Vec<f64> = rows.iter().flatten().copied().collect();
        check_irreducible(k, &entries)?;
        Ok(Self { k, entries, tol_row })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn tol_row(&self) -> f64 {
        self.tol_row
    }

    #[inline]
    pub fn row(&self, c: usize) -> &[f64] {
        &self.entries[c * self.k..(c + 1) * self.k]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.k + j]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.k).map(|c| self.row(c).to_vec()).collect()
    }

    /// `R v` for a column vector `v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.k)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn dense(&self) -> Dense {
        Dense::from_row_major(self.k, &self.entries)
    }
}

fn reach(k: usize, entries: &[f64], forward: bool) -> Vec<bool> {
    let mut seen = vec![false; k];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(u) = stack.pop() {
        for v in 0..k {
            let w = if forward { entries[u * k + v] } else { entries[v * k + u] };
            if w > 0.0 && !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    seen
}

fn check_irreducible(k: usize, entries: &[f64]) -> Result<(), SpectralError> {
    for forward in [true, false] {
        let seen = reach(k, entries, forward);
        if seen.iter().any(|s| !s) {
            let (a, b): (Vec<usize>, Vec<usize>) = (0..k).partition(|&i| seen[i]);
            // Forward search: the reachable set is closed. Backward search: the
            // complement of "colors that reach 0" is closed.
            let (closed, rest) = if forward { (a, b) } else { (b, a) };
            return Err(SpectralError::Reducible { closed, rest });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    Sub,
    Critical,
    Super,
}

/// Regime of a nonprincipal eigenvalue relative to 1/2.
pub fn classify(lambda: f64, crit_tol: f64) -> Result<Regime, SpectralError> {
    if !(lambda > -1.0 && lambda < 1.0) {
        return Err(SpectralError::OutOfRange(lambda));
    }
    Ok(if (lambda - 0.5).abs() <= crit_tol {
        Regime::Critical
    } else if lambda < 0.5 {
        Regime::Sub
    } else {
        Regime::Super
    })
}

/// A nonprincipal right eigenpair `R ξ = λ ξ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Eigenpair {
    pub lambda: f64,
    pub xi: Vec<f64>,
    pub regime: Regime,
    pub residual: f64,
}

impl Eigenpair {
    pub fn max_abs_xi(&self) -> f64 {
        self.xi.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// `W' ξ` for a mass vector `w`.
    #[inline]
    pub fn project(&self, w: &[f64]) -> f64 {
        self.xi.iter().zip(w).map(|(a, b)| a * b).sum()
    }
}

/// Solves `(Rᵀ - I) πᵀ = 0` with the last equation replaced by `Σ π = 1`.
pub fn stationary_distribution(r: &ReplacementMatrix) -> Result<Vec<f64>, SpectralError> {
    let k = r.k();
    let mut a = r.dense().transpose();
    for i in 0..k {
        *a.at_mut(i, i) -= 1.0;
    }
    for j in 0..k {
        *a.at_mut(k - 1, j) = 1.0;
    }
    let mut b = vec![0.0; k];
    b[k - 1] = 1.0;
    let mut pi = linalg::solve(a, b).ok_or(SpectralError::SingularSystem)?;
    // Irreducibility makes π strictly positive; clip round-off below zero.
    for p in pi.iter_mut() {
        if *p < 0.0 {
            if *p < -STATIONARY_TOL {
                return Err(SpectralError::SingularSystem);
            }
            *p = 0.0;
        }
    }
    let s: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= s);
    Ok(pi)
}

/// Max-norm residual `|R ξ - λ ξ|_∞`.
pub fn residual(r: &ReplacementMatrix, lambda: f64, xi: &[f64]) -> f64 {
    r.apply(xi)
        .iter()
        .zip(xi)
        .map(|(rx, x)| (rx - lambda * x).abs())
        .fold(0.0, f64::max)
}

fn normalize(mut xi: Vec<f64>) -> Vec<f64> {
    let m = xi.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let first = xi.iter().copied().find(|v| v.abs() > 1e-14 * m).unwrap_or(1.0);
    let scale = if first < 0.0 { -m } else { m };
    xi.iter_mut().for_each(|v| *v /= scale);
    xi
}

/// Rayleigh quotient of a computed eigenvector, kept only if it does not
/// increase the residual.
fn polish(r: &ReplacementMatrix, lambda: f64, xi: &[f64]) -> (f64, f64) {
    let rx = r.apply(xi);
    let num: f64 = rx.iter().zip(xi).map(|(a, b)| a * b).sum();
    let den: f64 = xi.iter().map(|v| v * v).sum();
    let q = num / den;
    let (r0, r1) = (residual(r, lambda, xi), residual(r, q, xi));
    if r1 <= r0 {
        (q, r1)
    } else {
        (lambda, r0)
    }
}

fn real_eigenvalues(r: &ReplacementMatrix) -> Result<Vec<f64>, SpectralError> {
    let mut h = r.dense();
    linalg::hessenberg(&mut h);
    let blocks = linalg::schur_eigenvalues(&mut h, 1e-9).map_err(|_| SpectralError::NoConvergence)?;
    let mut out = Vec::with_capacity(blocks.len());
    for b in blocks {
        match b {
            SchurBlock::Real(v) => out.push(v),
            SchurBlock::Complex { re, im } => {
                return Err(SpectralError::ComplexSpectrum { re, im: im.abs() })
            }
        }
    }
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Nonprincipal eigenpairs of `r`, sorted ascending by λ.
///
/// With `supplied`, each candidate is verified (residual, orthogonality to π,
/// regime range) and returned at the caller's scale. Without it, the full real
/// spectrum is computed and the principal eigenvalue 1 is dropped.
pub fn eigenpairs(
    r: &ReplacementMatrix,
    pi: &[f64],
    supplied: Option<&[(f64, Vec<f64>)]>,
    crit_tol: f64,
) -> Result<Vec<Eigenpair>, SpectralError> {
    let k = r.k();
    let mut pairs = Vec::new();
    match supplied {
        Some(list) => {
            for (lambda, xi) in list {
                if xi.len() != k {
                    return Err(SpectralError::DimensionMismatch {
                        expected: k,
                        got: xi.len(),
                    });
                }
                if xi.iter().all(|v| *v == 0.0) {
                    return Err(SpectralError::ZeroEigenvector(*lambda));
                }
                let regime = classify(*lambda, crit_tol)?;
                let res = residual(r, *lambda, xi);
                if !(res < RESIDUAL_TOL) {
                    return Err(SpectralError::ResidualTooLarge {
                        lambda: *lambda,
                        residual: res,
                    });
                }
                pairs.push(Eigenpair {
                    lambda: *lambda,
                    xi: xi.clone(),
                    regime,
                    residual: res,
                });
            }
        }
        None => {
            let mut values = real_eigenvalues(r)?;
            let principal = values
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - 1.0).abs().total_cmp(&(b.1 - 1.0).abs()))
                .map(|(i, _)| i)
                .expect("k >= 2");
            values.remove(principal);
            let mut i = 0;
            while i < values.len() {
                let mut j = i + 1;
                while j < values.len() && values[j] - values[i] <= CLUSTER_TOL {
                    j += 1;
                }
                let multiplicity = j - i;
                let lambda = values[i..j].iter().sum::<f64>() / multiplicity as f64;
                let regime = classify(lambda, crit_tol)?;
                let mut shifted = r.dense();
                for d in 0..k {
                    *shifted.at_mut(d, d) -= lambda;
                }
                let basis = linalg::null_space(&shifted, 1e-9);
                if basis.len() < multiplicity {
                    return Err(SpectralError::Defective {
                        lambda,
                        multiplicity,
                        found: basis.len(),
                    });
                }
                for xi in basis.into_iter().take(multiplicity) {
                    let xi = normalize(xi);
                    let (lambda, res) = if multiplicity == 1 {
                        polish(r, lambda, &xi)
                    } else {
                        (lambda, residual(r, lambda, &xi))
                    };
                    if !(res < RESIDUAL_TOL) {
                        return Err(SpectralError::ResidualTooLarge { lambda, residual: res });
                    }
                    pairs.push(Eigenpair {
                        lambda,
                        xi,
                        regime,
                        residual: res,
                    });
                }
                i = j;
            }
        }
    }
    for p in &pairs {
        let inner: f64 = pi.iter().zip(&p.xi).map(|(a, b)| a * b).sum();
        if inner.abs() > ORTHOGONALITY_TOL * p.max_abs_xi().max(1.0) {
            return Err(SpectralError::NotOrthogonal {
                lambda: p.lambda,
                inner,
            });
        }
    }
    pairs.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    Ok(pairs)
}

/// Stationary distribution plus tracked nonprincipal eigenpairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub pi: Vec<f64>,
    pub pairs: Vec<Eigenpair>,
}

impl Spectrum {
    pub fn compute(
        r: &ReplacementMatrix,
        supplied: Option<&[(f64, Vec<f64>)]>,
        crit_tol: f64,
    ) -> Result<Self, SpectralError> {
        let pi = stationary_distribution(r)?;
        let pairs = eigenpairs(r, &pi, supplied, crit_tol)?;
        Ok(Self { pi, pairs })
    }

    /// `max |π R - π|`.
    pub fn stationarity_residual(&self, r: &ReplacementMatrix) -> f64 {
        (0..r.k())
            .map(|j| {
                let pr: f64 = (0..r.k()).map(|i| self.pi[i] * r.get(i, j)).sum();
                (pr - self.pi[j]).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// The canonical 4-color test matrix `R = (1/4) Σ λ_k h_k h_kᵀ` built from the
/// Sylvester–Hadamard columns `h_k` with spectrum (1, 0.25, 0.5, 0.75).
pub fn h_spectral_rows() -> Vec<Vec<f64>> {
    vec![
        vec![0.625, 0.125, 0.0, 0.25],
        vec![0.125, 0.625, 0.25, 0.0],
        vec![0.0, 0.25, 0.625, 0.125],
        vec![0.25, 0.0, 0.125, 0.625],
    ]
}

/// Exact nonprincipal eigenpairs of [`h_spectral_rows`]: the Hadamard columns.
pub fn h_spectral_pairs() -> Vec<(f64, Vec<f64>)> {
    vec![
        (0.25, vec![1.0, -1.0, 1.0, -1.0]),
        (0.5, vec![1.0, 1.0, -1.0, -1.0]),
        (0.75, vec![1.0, -1.0, -1.0, 1.0]),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_color() -> ReplacementMatrix {
        ReplacementMatrix::new(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap()
    }

    fn hadamard() -> [[f64; 4]; 4] {
        [
            [1.0, 1.0, 1.0, 1.0],
            [1.0, -1.0, 1.0, -1.0],
            [1.0, 1.0, -1.0, -1.0],
            [1.0, -1.0, -1.0, 1.0],
        ]
    }

    #[test]
    fn h_spectral_matches_synthesis() {
        let h = hadamard();
        let lam = [1.0, 0.25, 0.5, 0.75];
        let rows = h_spectral_rows();
        for i in 0..4 {
            for j in 0..4 {
                let v: f64 = (0..4).map(|c| lam[c] * h[c][i] * h[c][j]).sum::<f64>() / 4.0;
                assert_eq!(v, rows[i][j]);
            }
        }
        assert!(ReplacementMatrix::new(&rows).is_ok());
    }

    #[test]
    fn validation_errors() {
        assert!(two_color().k() == 2);
        match ReplacementMatrix::new(&[vec![0.5, 0.4], vec![0.2, 0.8]]) {
            Err(SpectralError::RowSumViolation(0, s)) => assert!((s - 0.9).abs() < 1e-15),
            other => panic!("{other:?}"),
        }
        assert_eq!(
            ReplacementMatrix::new(&[vec![1.2, -0.2], vec![0.2, 0.8]]),
            Err(SpectralError::NegativeEntry(0, 1))
        );
        assert_eq!(
            ReplacementMatrix::new(&[vec![1.0]]),
            Err(SpectralError::Shape { rows: 1 })
        );
        match ReplacementMatrix::new(&[vec![1.0, 0.0], vec![0.5, 0.5]]) {
            Err(SpectralError::Reducible { closed, rest }) => {
                assert_eq!(closed, vec![0]);
                assert_eq!(rest, vec![1]);
            }
            other => panic!("{other:?}"),
        }
        // identity pattern: reducible
        assert!(matches!(
            ReplacementMatrix::new(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]),
            Err(SpectralError::Reducible { .. })
        ));
    }

    #[test]
    fn stationary_examples() {
        let pi = stationary_distribution(&two_color()).unwrap();
        assert!((pi[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((pi[1] - 1.0 / 3.0).abs() < 1e-15);
        let h = ReplacementMatrix::new(&h_spectral_rows()).unwrap();
        let pi = stationary_distribution(&h).unwrap();
        for p in pi {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn classify_regimes() {
        assert_eq!(classify(0.25, DEFAULT_CRIT_TOL), Ok(Regime::Sub));
        assert_eq!(classify(0.5, DEFAULT_CRIT_TOL), Ok(Regime::Critical));
        assert_eq!(classify(0.75, DEFAULT_CRIT_TOL), Ok(Regime::Super));
        assert_eq!(classify(0.5 + 1e-13, DEFAULT_CRIT_TOL), Ok(Regime::Critical));
        assert_eq!(classify(0.5 + 1e-6, 1e-5), Ok(Regime::Critical));
        assert_eq!(classify(1.0, DEFAULT_CRIT_TOL), Err(SpectralError::OutOfRange(1.0)));
        assert_eq!(classify(-1.0, DEFAULT_CRIT_TOL), Err(SpectralError::OutOfRange(-1.0)));
    }

    #[test]
    fn h_spectral_eigenpairs() {
        let r = ReplacementMatrix::new(&h_spectral_rows()).unwrap();
        let s = Spectrum::compute(&r, None, DEFAULT_CRIT_TOL).unwrap();
        let h = hadamard();
        let expect = [(0.25, h[1]), (0.5, h[2]), (0.75, h[3])];
        assert_eq!(s.pairs.len(), 3);
        for (p, (lam, xi)) in s.pairs.iter().zip(expect) {
            assert!((p.lambda - lam).abs() < 1e-13, "{} vs {}", p.lambda, lam);
            for (a, b) in p.xi.iter().zip(xi) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!(p.residual < 1e-13);
        }
        assert_eq!(s.pairs[0].regime, Regime::Sub);
        assert_eq!(s.pairs[1].regime, Regime::Critical);
        assert_eq!(s.pairs[2].regime, Regime::Super);
        assert!(s.stationarity_residual(&r) < 1e-15);
    }

    #[test]
    fn h_spectral_round_trip_reconstruction() {
        let r = ReplacementMatrix::new(&h_spectral_rows()).unwrap();
        let s = Spectrum::compute(&r, None, DEFAULT_CRIT_TOL).unwrap();
        // Hadamard columns are orthogonal with squared norm 4; π = 1/4 gives the
        // principal term (1/4)·1·1ᵀ.
        for i in 0..4 {
            for j in 0..4 {
                let mut v = s.pi[j];
                for p in &s.pairs {
                    v += p.lambda * p.xi[i] * p.xi[j] / 4.0;
                }
                assert!((v - r.get(i, j)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn two_color_eigenpair() {
        let r = two_color();
        let s = Spectrum::compute(&r, None, DEFAULT_CRIT_TOL).unwrap();
        assert_eq!(s.pairs.len(), 1);
        let p = &s.pairs[0];
        assert!((p.lambda - 0.7).abs() < 1e-14);
        assert!((p.xi[0] - 0.5).abs() < 1e-14);
        assert!((p.xi[1] + 1.0).abs() < 1e-14);
        assert_eq!(p.regime, Regime::Super);
    }

    #[test]
    fn supplied_pairs_keep_scale() {
        let r = two_color();
        let supplied = vec![(0.7, vec![1.0, -2.0])];
        let s = Spectrum::compute(&r, Some(&supplied), DEFAULT_CRIT_TOL).unwrap();
        assert_eq!(s.pairs[0].xi, vec![1.0, -2.0]);
        assert!(s.pairs[0].residual < 1e-15);

        let bad = vec![(0.6, vec![1.0, -2.0])];
        assert!(matches!(
            Spectrum::compute(&r, Some(&bad), DEFAULT_CRIT_TOL),
            Err(SpectralError::ResidualTooLarge { .. })
        ));
        let zero = vec![(0.7, vec![0.0, 0.0])];
        assert!(matches!(
            Spectrum::compute(&r, Some(&zero), DEFAULT_CRIT_TOL),
            Err(SpectralError::ZeroEigenvector(_))
        ));
    }

    #[test]
    fn complex_spectrum_rejected() {
        // 3-color circulant: eigenvalues 1 and -0.35 ± 0.606i
        let r = ReplacementMatrix::new(&[
            vec![0.1, 0.8, 0.1],
            vec![0.1, 0.1, 0.8],
            vec![0.8, 0.1, 0.1],
        ])
        .unwrap();
        assert!(matches!(
            Spectrum::compute(&r, None, DEFAULT_CRIT_TOL),
            Err(SpectralError::ComplexSpectrum { .. })
        ));
    }

    #[test]
    fn periodic_matrix_out_of_range() {
        let r = ReplacementMatrix::new(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(
            Spectrum::compute(&r, None, DEFAULT_CRIT_TOL),
            Err(SpectralError::OutOfRange(_))
        ));
    }

    #[test]
    fn repeated_eigenvalue_gets_full_basis() {
        // (1-a) I + a·(1/3) J has eigenvalue 1-a with multiplicity 2
        let a = 0.6;
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..3).map(|j| a / 3.0 + if i == j { 1.0 - a } else { 0.0 }).collect())
            .collect();
        let r = ReplacementMatrix::new(&rows).unwrap();
        let s = Spectrum::compute(&r, None, DEFAULT_CRIT_TOL).unwrap();
        assert_eq!(s.pairs.len(), 2);
        for p in &s.pairs {
            assert!((p.lambda - 0.4).abs() < 1e-9);
            assert!(p.residual < RESIDUAL_TOL);
        }
    }
}
