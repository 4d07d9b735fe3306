//! Normalized projections of the urn.
//!
//! For a nonprincipal pair (λ, ξ) the sequence
//!
//! ```text
//! Z_n = W_n'ξ / Π_{j=0}^{n-1} (1 + λ/(j+1))
//! ```
//!
//! is a martingale. Its increments are computed in exact form,
//!
//! ```text
//! Z_{n+1} - Z_n = λ (ξ_c - W_n'ξ/(n+1)) / Π_{j=0}^{n} (1 + λ/(j+1)),
//! ```
//!
//! where `c` is the color drawn at trial `n+1`. The regime-specific scalings
//! `X_n = W_n'ξ/√n` (λ < 1/2) and `Y_n = W_n'ξ/√(n ln n)` (λ = 1/2) are provided for
//! second-moment tracking.

use thiserror::Error;

use crate::spectral::{Eigenpair, Regime, Spectrum};
use crate::urn::UrnState;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MartingaleError {
    #[error("StaleNormalizer: normalizer is at index {normalizer}, state is at {state}")]
    StaleNormalizer { normalizer: u64, state: u64 },
    #[error("StaleNormalizer: normalizer lambda {normalizer} does not match pair lambda {pair}")]
    LambdaMismatch { normalizer: f64, pair: f64 },
    #[error("TooEarly: statistic for the {regime:?} regime is undefined at n = {n}")]
    TooEarly { regime: Regime, n: u64 },
}

/// Running product `Π_{j=0}^{n-1} (1 + λ/(j+1))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    lambda: f64,
    n: u64,
    value: f64,
}

impl Normalizer {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            n: 0,
            value: 1.0,
        }
    }

    /// Multiplies in the factor for `j = n`, then increments `n`.
    #[inline]
    pub fn advance(&mut self) {
        self.value *= 1.0 + self.lambda / (self.n + 1) as f64;
        self.n += 1;
    }

    pub fn advanced(mut self) -> Self {
        self.advance();
        self
    }

    pub fn at(lambda: f64, n: u64) -> Self {
        let mut s = Self::new(lambda);
        for _ in 0..n {
            s.advance();
        }
        s
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn value(&self) -> f64 {
        self.value
    }
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection: Γ(x)Γ(1-x) = π / sin(πx)
        let s = (std::f64::consts::PI * x).sin();
        return std::f64::consts::PI.ln() - s.abs().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Stirling correction `ln Γ(z) - [(z - 1/2) ln z - z + ln √(2π)]` for z ≥ 30.
fn stirling_tail(z: f64) -> f64 {
    let z2 = z * z;
    (1.0 / 12.0 - (1.0 / 360.0 - (1.0 / 1260.0 - 1.0 / (1680.0 * z2)) / z2) / z2) / z
}

/// `ln Γ(x + a) - ln Γ(x)` for `x ≥ 1`, `|a| < 1`, without forming either
/// log-Gamma value (they cancel badly for large `x`).
pub fn ln_gamma_ratio(x: f64, a: f64) -> f64 {
    const SHIFT_TO: f64 = 30.0;
    let mut x = x;
    let mut correction = 0.0;
    while x < SHIFT_TO {
        correction -= (a / x).ln_1p();
        x += 1.0;
    }
    let main = (x - 0.5) * (a / x).ln_1p() + a * (x + a).ln() - a;
    main + stirling_tail(x + a) - stirling_tail(x) + correction
}

/// `Γ(n+1+λ) / (Γ(1+λ) Γ(n+1))`, the closed form of the normalizer product.
pub fn normalizer_closed_form(lambda: f64, n: u64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    (ln_gamma_ratio(n as f64 + 1.0, lambda) - ln_gamma(1.0 + lambda)).exp()
}

fn check(pair: &Eigenpair, norm: &Normalizer, n: u64) -> Result<(), MartingaleError> {
    if norm.lambda != pair.lambda {
        return Err(MartingaleError::LambdaMismatch {
            normalizer: norm.lambda,
            pair: pair.lambda,
        });
    }
    if norm.n != n {
        return Err(MartingaleError::StaleNormalizer {
            normalizer: norm.n,
            state: n,
        });
    }
    Ok(())
}

/// Worst relative gap between the incremental product and the closed form
/// over `n = 1..=n_max`.
pub fn normalizer_consistency(lambda: f64, n_max: u64) -> f64 {
    let mut norm = Normalizer::new(lambda);
    let mut worst = 0.0_f64;
    for n in 1..=n_max {
        norm.advance();
        let exact = normalizer_closed_form(lambda, n);
        worst = worst.max(((norm.value - exact) / exact).abs());
    }
    worst
}

/// `Z_n = W_n'ξ / Π`.
pub fn z_value(state: &UrnState, pair: &Eigenpair, norm: &Normalizer) -> Result<f64, MartingaleError> {
    check(pair, norm, state.n)?;
    Ok(pair.project(&state.w) / norm.value)
}

/// Exact increment from already known pieces: `projection = W_n'ξ`, `xi_c` the
/// drawn color's coordinate, `norm_after` the product through `j = n`.
#[inline]
pub fn increment(lambda: f64, xi_c: f64, projection: f64, n: u64, norm_after: f64) -> f64 {
    lambda * (xi_c - projection / (n + 1) as f64) / norm_after
}

/// `Z_{n+1} - Z_n` for the draw `drawn_color` out of `state_before`.
pub fn z_increment(
    state_before: &UrnState,
    drawn_color: usize,
    pair: &Eigenpair,
    norm_after: &Normalizer,
) -> Result<f64, MartingaleError> {
    check(pair, norm_after, state_before.n + 1)?;
    Ok(increment(
        pair.lambda,
        pair.xi[drawn_color],
        pair.project(&state_before.w),
        state_before.n,
        norm_after.value,
    ))
}

/// Regime-appropriate scaling of a projection: `X_n`, `Y_n`, or `Z_n`.
/// Returns `None` where the scaling is undefined (`n = 0` for Sub, `n ≤ 1`
/// for Critical).
#[inline]
pub fn scaled_projection(regime: Regime, projection: f64, n: u64, norm: f64) -> Option<f64> {
    match regime {
        Regime::Sub if n >= 1 => Some(projection / (n as f64).sqrt()),
        Regime::Critical if n >= 2 => {
            let nf = n as f64;
            Some(projection / (nf * nf.ln()).sqrt())
        }
        Regime::Super => Some(projection / norm),
        _ => None,
    }
}

/// One normalized statistic per tracked pair, chosen by the pair's regime.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedTriple {
    pub n: u64,
    pub values: Vec<(Regime, f64)>,
}

impl NormalizedTriple {
    pub fn x(&self) -> Option<f64> {
        self.first(Regime::Sub)
    }

    pub fn y(&self) -> Option<f64> {
        self.first(Regime::Critical)
    }

    pub fn z_super(&self) -> Option<f64> {
        self.first(Regime::Super)
    }

    fn first(&self, regime: Regime) -> Option<f64> {
        self.values.iter().find(|(r, _)| *r == regime).map(|(_, v)| *v)
    }
}

pub fn normalized_triple(state: &UrnState, spectrum: &Spectrum) -> Result<NormalizedTriple, MartingaleError> {
    let values = spectrum
        .pairs
        .iter()
        .map(|p| {
            let norm = match p.regime {
                Regime::Super => Normalizer::at(p.lambda, state.n).value(),
                _ => 1.0,
            };
            scaled_projection(p.regime, p.project(&state.w), state.n, norm)
                .map(|v| (p.regime, v))
                .ok_or(MartingaleError::TooEarly {
                    regime: p.regime,
                    n: state.n,
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(NormalizedTriple { n: state.n, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{h_spectral_pairs, h_spectral_rows, ReplacementMatrix, DEFAULT_CRIT_TOL};
    use proptest::prelude::*;

    fn h_spectrum() -> (ReplacementMatrix, Spectrum) {
        let r = ReplacementMatrix::new(&h_spectral_rows()).unwrap();
        let s = Spectrum::compute(&r, Some(&h_spectral_pairs()), DEFAULT_CRIT_TOL).unwrap();
        (r, s)
    }

    #[test]
    fn normalizer_examples() {
        assert_eq!(Normalizer::new(0.3).value(), 1.0);
        assert_eq!(Normalizer::at(0.75, 2).value(), 1.75 * 1.375);
        assert_eq!(Normalizer::at(0.75, 2).value(), 2.40625);
        let v = Normalizer::at(0.5, 4).value();
        assert!((v - 2.4609375).abs() < 1e-15);
    }

    #[test]
    fn closed_form_examples() {
        assert_eq!(normalizer_closed_form(0.4, 0), 1.0);
        assert!((normalizer_closed_form(0.75, 2) - 2.40625).abs() < 1e-13);
        for n in [1u64, 5, 100, 12345, 1_000_000] {
            let v = normalizer_closed_form(1.0, n);
            assert!((v / (n + 1) as f64 - 1.0).abs() < 1e-12, "{n}: {v}");
        }
    }

    #[test]
    fn ln_gamma_known_values() {
        let sqrt_pi = std::f64::consts::PI.sqrt();
        assert!((ln_gamma(0.5) - sqrt_pi.ln()).abs() < 1e-14);
        assert!((ln_gamma(1.5) - (sqrt_pi / 2.0).ln()).abs() < 1e-14);
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!(ln_gamma(2.0).abs() < 1e-14);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-13);
        assert!((ln_gamma(1.25) - 0.906_402_477_055_477f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn ln_gamma_ratio_against_direct_log_gamma() {
        for &x in &[1.0, 2.5, 10.0, 29.5, 31.0, 200.0] {
            for &a in &[-0.5, 0.25, 0.5, 0.99] {
                let direct = ln_gamma(x + a) - ln_gamma(x);
                assert!((ln_gamma_ratio(x, a) - direct).abs() < 1e-12, "x={x} a={a}");
            }
        }
    }

    #[test]
    fn z_value_examples() {
        let (r, s) = h_spectrum();
        let principal = Eigenpair {
            lambda: 1.0,
            xi: vec![1.0; 4],
            regime: Regime::Super,
            residual: 0.0,
        };
        let mut st = UrnState::new(2, 4).unwrap();
        let mut norm = Normalizer::new(1.0);
        for _ in 0..20 {
            assert!((z_value(&st, &principal, &norm).unwrap() - 1.0).abs() < 1e-14);
            st.add_row(&r, 1);
            norm.advance();
        }
        let st0 = UrnState::new(2, 4).unwrap();
        for p in &s.pairs {
            assert_eq!(z_value(&st0, p, &Normalizer::new(p.lambda)).unwrap(), p.xi[2]);
        }
        assert!(matches!(
            z_value(&st, &s.pairs[0], &Normalizer::at(s.pairs[0].lambda, 3)),
            Err(MartingaleError::StaleNormalizer { .. })
        ));
    }

    #[test]
    fn z_increment_examples() {
        let (_, s) = h_spectrum();
        let pair = &s.pairs[2];
        assert_eq!(pair.lambda, 0.75);
        let st0 = UrnState::new(0, 4).unwrap();
        let inc0 = z_increment(&st0, 0, pair, &Normalizer::at(0.75, 1)).unwrap();
        assert_eq!(inc0, 0.0);
        let st1 = UrnState {
            n: 1,
            w: vec![1.625, 0.125, 0.0, 0.25],
        };
        let inc1 = z_increment(&st1, 3, pair, &Normalizer::at(0.75, 2)).unwrap();
        assert!((inc1 - 0.75 * 0.125 / 2.40625).abs() < 1e-16);
        assert!((inc1 - 0.038961).abs() < 1e-6);
        assert!(matches!(
            z_increment(&st1, 3, pair, &Normalizer::at(0.75, 1)),
            Err(MartingaleError::StaleNormalizer { .. })
        ));
    }

    #[test]
    fn principal_increment_is_zero() {
        let p = Eigenpair {
            lambda: 1.0,
            xi: vec![1.0; 4],
            regime: Regime::Super,
            residual: 0.0,
        };
        let st = UrnState {
            n: 1,
            w: vec![1.625, 0.125, 0.0, 0.25],
        };
        for c in 0..4 {
            assert_eq!(z_increment(&st, c, &p, &Normalizer::at(1.0, 2)).unwrap(), 0.0);
        }
    }

    #[test]
    fn normalized_triple_examples() {
        let (_, s) = h_spectrum();
        // W'ξ₁ = 2 and W'ξ₂ = 1 at w = (3, 0, 0.5, 1.5)
        let st = UrnState {
            n: 4,
            w: vec![3.0, 0.0, 0.5, 1.5],
        };
        let t = normalized_triple(&st, &s).unwrap();
        assert_eq!(t.x(), Some(1.0));
        let expect_y = 1.0 / (4.0 * 4f64.ln()).sqrt();
        assert!((t.y().unwrap() - expect_y).abs() < 1e-15);
        let z = z_value(&st, &s.pairs[2], &Normalizer::at(0.75, 4)).unwrap();
        assert_eq!(t.z_super(), Some(z));

        let st8 = UrnState {
            n: 8,
            w: vec![4.0, 3.0, 1.0, 1.0],
        };
        let t8 = normalized_triple(&st8, &s).unwrap();
        assert!((t8.y().unwrap() - 5.0 / (8.0 * 8f64.ln()).sqrt()).abs() < 1e-15);

        let st1 = UrnState {
            n: 1,
            w: vec![1.625, 0.125, 0.0, 0.25],
        };
        assert_eq!(
            normalized_triple(&st1, &s),
            Err(MartingaleError::TooEarly {
                regime: Regime::Critical,
                n: 1
            })
        );
    }

    #[test]
    fn normalizer_consistency_short_range() {
        for lam in [-0.5, 0.25, 0.5, 0.75, 0.99] {
            assert!(normalizer_consistency(lam, 20_000) < 1e-12);
        }
    }

    #[test]
    fn normalizer_positive_for_negative_lambda() {
        let n = Normalizer::at(-0.99, 1000);
        assert!(n.value() > 0.0);
    }

    proptest! {
        #[test]
        fn conditional_mean_of_increment_is_zero(
            w in proptest::collection::vec(0.0f64..5.0, 4),
            pair_idx in 0usize..3,
        ) {
            let (_, s) = h_spectrum();
            let total: f64 = w.iter().sum();
            prop_assume!(total > 0.5);
            // rescale to a valid state with Σw = n + 1
            let n = 9u64;
            let w: Vec<f64> = w.iter().map(|v| v * 10.0 / total).collect();
            let st = UrnState { n, w };
            let p = &s.pairs[pair_idx];
            let after = Normalizer::at(p.lambda, n + 1);
            let mean: f64 = (0..4)
                .map(|c| st.probability(c) * z_increment(&st, c, p, &after).unwrap())
                .sum();
            prop_assert!(mean.abs() < 1e-14, "{}", mean);
        }

        #[test]
        fn telescoping_and_scale_equivariance(
            colors in proptest::collection::vec(0usize..4, 1..60),
            pair_idx in 0usize..3,
        ) {
            let (r, s) = h_spectrum();
            let p = &s.pairs[pair_idx];
            let doubled = Eigenpair { xi: p.xi.iter().map(|v| 2.0 * v).collect(), ..p.clone() };
            let mut st = UrnState::new(0, 4).unwrap();
            let mut norm = Normalizer::new(p.lambda);
            for &c in &colors {
                if st.w[c] == 0.0 { continue; }
                let before = z_value(&st, p, &norm).unwrap();
                let next_norm = norm.advanced();
                let inc = z_increment(&st, c, p, &next_norm).unwrap();
                let inc2 = z_increment(&st, c, &doubled, &next_norm).unwrap();
                prop_assert_eq!(inc2, 2.0 * inc);
                prop_assert_eq!(z_value(&st, &doubled, &norm).unwrap(), 2.0 * before);
                st.add_row(&r, c);
                norm = next_norm;
                let after = z_value(&st, p, &norm).unwrap();
                let scale = before.abs().max(after.abs()).max(1.0);
                prop_assert!(((after - before) - inc).abs() <= 16.0 * f64::EPSILON * scale);
            }
        }
    }
}
