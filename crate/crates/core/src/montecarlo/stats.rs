//! Mergeable sufficient statistics.
//!
//! Centered moments are updated with the pairwise formulas of Chan et al. and
//! Pébay, so a fold over any partition of the data followed by merges agrees
//! with the sequential fold up to round-off.

use serde::Serialize;

/// Count, mean and centered power sums `M_p = Σ (x - x̄)^p` for p = 2, 3, 4.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
    pub m3: f64,
    pub m4: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.merge(&Moments {
            count: 1,
            mean: x,
            ..Moments::default()
        });
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let d = other.mean - self.mean;
        let d_n = d / n;
        let m2 = self.m2 + other.m2 + d * d_n * na * nb;
        let m3 = self.m3 + other.m3 + d * d_n * d_n * na * nb * (na - nb) + 3.0 * d_n * (na * other.m2 - nb * self.m2);
        let m4 = self.m4
            + other.m4
            + d * d_n * d_n * d_n * na * nb * (na * na - na * nb + nb * nb)
            + 6.0 * d_n * d_n * (na * na * other.m2 + nb * nb * self.m2)
            + 4.0 * d_n * (na * other.m3 - nb * self.m3);
        self.mean += d_n * nb;
        self.m2 = m2;
        self.m3 = m3;
        self.m4 = m4;
        self.count += other.count;
    }

    /// Sample variance with the N−1 divisor.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            return f64::NAN;
        }
        self.m2 / (self.count - 1) as f64
    }

    pub fn stderr_of_mean(&self) -> f64 {
        (self.variance() / self.count as f64).sqrt()
    }

    /// Sample skewness `g1 = m3 / m2^{3/2}` with biased central moments.
    pub fn skewness(&self) -> f64 {
        let n = self.count as f64;
        (self.m3 / n) / (self.m2 / n).powf(1.5)
    }

    /// Sample excess kurtosis `g2 = m4 / m2² - 3`.
    pub fn excess_kurtosis(&self) -> f64 {
        let n = self.count as f64;
        (self.m4 / n) / (self.m2 / n).powi(2) - 3.0
    }
}

/// Joint statistics of a fixed-length feature vector: means, the full
/// co-moment matrix, per-coordinate higher moments, and raw sums `Σ a²b`,
/// `Σ a²b²` for the fourth-moment standard error of the sample covariance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointMoments {
    dim: usize,
    count: u64,
    mean: Vec<f64>,
    comoment: Vec<f64>,
    marginal: Vec<Moments>,
    s21: Vec<f64>,
    s22: Vec<f64>,
}

impl JointMoments {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            count: 0,
            mean: vec![0.0; dim],
            comoment: vec![0.0; dim * dim],
            marginal: vec![Moments::default(); dim],
            s21: vec![0.0; dim * dim],
            s22: vec![0.0; dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self, a: usize) -> f64 {
        self.mean[a]
    }

    pub fn marginal(&self, a: usize) -> &Moments {
        &self.marginal[a]
    }

    pub fn push(&mut self, x: &[f64]) {
        assert_eq!(x.len(), self.dim, "feature length");
        let d = self.dim;
        let n = (self.count + 1) as f64;
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(v, m)| v - m).collect();
        // Welford co-moment update: C += (x - mean_old)(x - mean_new)ᵀ
        for a in 0..d {
            self.mean[a] += delta[a] / n;
        }
        for a in 0..d {
            let after = x[a] - self.mean[a];
            for b in 0..d {
                self.comoment[a * d + b] += delta[b] * after;
            }
        }
        for a in 0..d {
            self.marginal[a].push(x[a]);
            let a2 = x[a] * x[a];
            for b in 0..d {
                self.s21[a * d + b] += a2 * x[b];
                self.s22[a * d + b] += a2 * x[b] * x[b];
            }
        }
        self.count += 1;
    }

    pub fn merge(&mut self, other: &JointMoments) {
        assert_eq!(self.dim, other.dim, "feature length");
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let d = self.dim;
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        for a in 0..d {
            for b in 0..d {
                self.comoment[a * d + b] += other.comoment[a * d + b] + delta[a] * delta[b] * na * nb / n;
            }
        }
        for a in 0..d {
            self.mean[a] += delta[a] * nb / n;
            self.marginal[a].merge(&other.marginal[a]);
        }
        for (x, y) in self.s21.iter_mut().zip(&other.s21) {
            *x += y;
        }
        for (x, y) in self.s22.iter_mut().zip(&other.s22) {
            *x += y;
        }
        self.count += other.count;
    }

    /// Sample covariance with the N−1 divisor.
    pub fn covariance(&self, a: usize, b: usize) -> f64 {
        self.comoment[a * self.dim + b] / (self.count - 1) as f64
    }

    /// `Σ (x_a - x̄_a)² (x_b - x̄_b)² / N`, expanded from raw and centered sums.
    pub fn fourth_cross(&self, a: usize, b: usize) -> f64 {
        let d = self.dim;
        let n = self.count as f64;
        let (ma, mb) = (self.mean[a], self.mean[b]);
        let s20 = self.comoment[a * d + a] + n * ma * ma;
        let s02 = self.comoment[b * d + b] + n * mb * mb;
        let s11 = self.comoment[a * d + b] + n * ma * mb;
        let s10 = n * ma;
        let s01 = n * mb;
        let s21 = self.s21[a * d + b];
        let s12 = self.s21[b * d + a];
        let s22 = self.s22[a * d + b];
        let total = s22 - 2.0 * mb * s21 + mb * mb * s20 - 2.0 * ma * s12 + 4.0 * ma * mb * s11 - 2.0 * ma * mb * mb * s10
            + ma * ma * s02
            - 2.0 * ma * ma * mb * s01
            + n * ma * ma * mb * mb;
        (total / n).max(0.0)
    }

    /// Asymptotic standard error of the sample covariance,
    /// `sqrt((μ22 - σ_ab²) / N)`.
    pub fn covariance_stderr(&self, a: usize, b: usize) -> f64 {
        let n = self.count as f64;
        let sab = self.comoment[a * self.dim + b] / n;
        ((self.fourth_cross(a, b) - sab * sab).max(0.0) / n).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300) || (a - b).abs() < 1e-12
    }

    #[test]
    fn moments_small_example() {
        let mut m = Moments::default();
        for x in [1.0, 2.0, 3.0, 4.0] {
            m.push(x);
        }
        assert_eq!(m.count, 4);
        assert!((m.mean - 2.5).abs() < 1e-15);
        assert!((m.m2 - 5.0).abs() < 1e-12);
        assert!(m.m3.abs() < 1e-12);
        assert!((m.m4 - 10.25).abs() < 1e-12);
        assert!((m.variance() - 5.0 / 3.0).abs() < 1e-12);
        assert!((m.excess_kurtosis() - (10.25 / 4.0 / 1.5625 - 3.0)).abs() < 1e-12);
    }

    #[test]
    fn coin_flip_kurtosis() {
        let mut m = Moments::default();
        for i in 0..1000 {
            m.push(if i % 2 == 0 { 1.0 } else { -1.0 });
        }
        assert!((m.excess_kurtosis() + 2.0).abs() < 1e-12);
        assert!(m.skewness().abs() < 1e-12);
    }

    #[test]
    fn fourth_cross_matches_direct() {
        let data: Vec<[f64; 2]> = (0..50).map(|i| {
            let x = (i as f64 * 0.37).sin() + 0.3;
            [x, x * x - 0.2 + (i as f64).cos()]
        }).collect();
        let mut j = JointMoments::new(2);
        for row in &data {
            j.push(row);
        }
        let n = data.len() as f64;
        let ma = data.iter().map(|r| r[0]).sum::<f64>() / n;
        let mb = data.iter().map(|r| r[1]).sum::<f64>() / n;
        let direct: f64 = data.iter().map(|r| (r[0] - ma).powi(2) * (r[1] - mb).powi(2)).sum::<f64>() / n;
        assert!((j.fourth_cross(0, 1) - direct).abs() < 1e-12);
        let cov: f64 = data.iter().map(|r| (r[0] - ma) * (r[1] - mb)).sum::<f64>() / (n - 1.0);
        assert!((j.covariance(0, 1) - cov).abs() < 1e-12);
        assert_eq!(j.covariance(0, 1), j.covariance(1, 0));
    }

    proptest! {
        #[test]
        fn partition_merge_matches_sequential(
            rows in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 3), 4..120),
            cuts in proptest::collection::vec(0usize..120, 0..6),
        ) {
            let mut seq = JointMoments::new(3);
            for r in &rows {
                seq.push(r);
            }
            let mut bounds: Vec<usize> = cuts.into_iter().map(|c| c % rows.len()).collect();
            bounds.push(0);
            bounds.push(rows.len());
            bounds.sort_unstable();
            bounds.dedup();
            let mut merged = JointMoments::new(3);
            for w in bounds.windows(2) {
                let mut part = JointMoments::new(3);
                for r in &rows[w[0]..w[1]] {
                    part.push(r);
                }
                merged.merge(&part);
            }
            prop_assert_eq!(merged.count(), seq.count());
            for a in 0..3 {
                prop_assert!(close(merged.mean(a), seq.mean(a), 1e-9));
                let (x, y) = (merged.marginal(a), seq.marginal(a));
                prop_assert!(close(x.m2, y.m2, 1e-9));
                prop_assert!((x.m3 - y.m3).abs() <= 1e-9 * y.m2.powf(1.5).max(1.0));
                prop_assert!(close(x.m4, y.m4, 1e-9));
                for b in 0..3 {
                    prop_assert!((merged.covariance(a, b) - seq.covariance(a, b)).abs()
                        <= 1e-9 * (seq.covariance(a, a) * seq.covariance(b, b)).sqrt().max(1e-12));
                    prop_assert!(close(merged.fourth_cross(a, b), seq.fourth_cross(a, b), 1e-9));
                }
            }
        }

        #[test]
        fn merge_commutes(
            xs in proptest::collection::vec(-5.0f64..5.0, 1..40),
            ys in proptest::collection::vec(-5.0f64..5.0, 1..40),
        ) {
            let fold = |v: &[f64]| {
                let mut m = Moments::default();
                for &x in v {
                    m.push(x);
                }
                m
            };
            let (a, b) = (fold(&xs), fold(&ys));
            let mut ab = a;
            ab.merge(&b);
            let mut ba = b;
            ba.merge(&a);
            prop_assert_eq!(ab.count, ba.count);
            prop_assert!(close(ab.mean, ba.mean, 1e-9));
            prop_assert!(close(ab.m2, ba.m2, 1e-9));
            prop_assert!((ab.m3 - ba.m3).abs() <= 1e-9 * ab.m2.powf(1.5).max(1.0));
            prop_assert!(close(ab.m4, ba.m4, 1e-9));
        }
    }
}
