//! Small dense linear algebra for the k×k replacement matrices.
//!
//! Everything here works on row-major `Vec<f64>` storage; k is tiny (at most a
//! few dozen), so no attempt is made at blocking or cache tuning.

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Dense {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Dense {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn from_row_major(n: usize, data: &[f64]) -> Self {
        debug_assert_eq!(data.len(), n * n);
        Self {
            n,
            data: data.to_vec(),
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.n + j]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                *t.at_mut(j, i) = self.at(i, j);
            }
        }
        t
    }
}

/// Gaussian elimination with partial pivoting. Returns `None` when a pivot
/// column is numerically zero.
pub(crate) fn solve(mut a: Dense, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = a.n;
    let scale = a.data.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
    for col in 0..n {
        let (piv, piv_abs) = (col..n)
            .map(|r| (r, a.at(r, col).abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if piv_abs <= 1e-14 * scale {
            return None;
        }
        if piv != col {
            for j in 0..n {
                a.data.swap(col * n + j, piv * n + j);
            }
            b.swap(col, piv);
        }
        let d = a.at(col, col);
        for r in col + 1..n {
            let f = a.at(r, col) / d;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                let v = a.at(col, j);
                *a.at_mut(r, j) -= f * v;
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut s = b[r];
        for j in r + 1..n {
            s -= a.at(r, j) * x[j];
        }
        x[r] = s / a.at(r, r);
    }
    Some(x)
}

/// Basis of the right null space of `a`, found by reduction to row echelon
/// form with complete pivot search inside each column. Entries below `tol`
/// (relative to the largest entry of `a`) are treated as zero.
pub(crate) fn null_space(a: &Dense, tol: f64) -> Vec<Vec<f64>> {
    let n = a.n;
    let mut m = a.clone();
    let scale = m.data.iter().fold(0.0_f64, |s, v| s.max(v.abs())).max(f64::MIN_POSITIVE);
    let thresh = tol * scale;
    let mut pivot_cols = Vec::new();
    let mut row = 0;
    for col in 0..n {
        if row == n {
            break;
        }
        let (piv, piv_abs) = (row..n)
            .map(|r| (r, m.at(r, col).abs()))
            .fold((row, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if piv_abs <= thresh {
            for r in row..n {
                *m.at_mut(r, col) = 0.0;
            }
            continue;
        }
        for j in 0..n {
            m.data.swap(row * n + j, piv * n + j);
        }
        let d = m.at(row, col);
        for j in 0..n {
            *m.at_mut(row, j) /= d;
        }
        for r in 0..n {
            if r == row {
                continue;
            }
            let f = m.at(r, col);
            if f != 0.0 {
                for j in 0..n {
                    let v = m.at(row, j);
                    *m.at_mut(r, j) -= f * v;
                }
            }
        }
        pivot_cols.push(col);
        row += 1;
    }
    let free: Vec<usize> = (0..n).filter(|c| !pivot_cols.contains(c)).collect();
    free.iter()
        .map(|&f| {
            let mut v = vec![0.0; n];
            v[f] = 1.0;
            for (r, &pc) in pivot_cols.iter().enumerate() {
                v[pc] = -m.at(r, f);
            }
            v
        })
        .collect()
}

/// Householder reduction to upper Hessenberg form, in place.
pub(crate) fn hessenberg(a: &mut Dense) {
    let n = a.n;
    if n < 3 {
        return;
    }
    let mut v = vec![0.0; n];
    for k in 0..n - 2 {
        let alpha_sq: f64 = (k + 1..n).map(|i| a.at(i, k).powi(2)).sum();
        let alpha = alpha_sq.sqrt();
        if alpha == 0.0 {
            continue;
        }
        let sign = if a.at(k + 1, k) >= 0.0 { 1.0 } else { -1.0 };
        for i in 0..n {
            v[i] = if i > k { a.at(i, k) } else { 0.0 };
        }
        v[k + 1] += sign * alpha;
        let vnorm_sq: f64 = v[k + 1..].iter().map(|x| x * x).sum();
        if vnorm_sq == 0.0 {
            continue;
        }
        // A <- H A H with H = I - 2 v vᵀ / (vᵀ v)
        for j in 0..n {
            let dot: f64 = (k + 1..n).map(|i| v[i] * a.at(i, j)).sum();
            let f = 2.0 * dot / vnorm_sq;
            for i in k + 1..n {
                *a.at_mut(i, j) -= f * v[i];
            }
        }
        for i in 0..n {
            let dot: f64 = (k + 1..n).map(|j| a.at(i, j) * v[j]).sum();
            let f = 2.0 * dot / vnorm_sq;
            for j in k + 1..n {
                *a.at_mut(i, j) -= f * v[j];
            }
        }
        for i in k + 2..n {
            *a.at_mut(i, k) = 0.0;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum SchurBlock {
    Real(f64),
    Complex { re: f64, im: f64 },
}

#[derive(Debug, PartialEq, Eq)]
pub(crate) struct NoConvergence;

/// Eigenvalues of an upper Hessenberg matrix by Francis double-shift QR.
/// The matrix is overwritten by its (quasi-triangular) real Schur factor.
/// A 2×2 diagonal block whose eigenvalues have imaginary part above
/// `imag_tol` is reported as `Complex`.
pub(crate) fn schur_eigenvalues(a: &mut Dense, imag_tol: f64) -> Result<Vec<SchurBlock>, NoConvergence> {
    let n = a.n;
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return Ok(out);
    }
    let anorm: f64 = (0..n)
        .flat_map(|i| (i.saturating_sub(1)..n).map(move |j| (i, j)))
        .map(|(i, j)| a.at(i, j).abs())
        .sum();
    let mut nn = n as isize - 1;
    let mut shift_acc = 0.0;
    while nn >= 0 {
        let mut its = 0;
        loop {
            let nu = nn as usize;
            let mut l = nu;
            while l >= 1 {
                let mut s = a.at(l - 1, l - 1).abs() + a.at(l, l).abs();
                if s == 0.0 {
                    s = anorm;
                }
                if a.at(l, l - 1).abs() <= f64::EPSILON * s {
                    *a.at_mut(l, l - 1) = 0.0;
                    break;
                }
                l -= 1;
            }
            let mut x = a.at(nu, nu);
            if l == nu {
                out.push(SchurBlock::Real(x + shift_acc));
                nn -= 1;
                break;
            }
            let mut y = a.at(nu - 1, nu - 1);
            let mut w = a.at(nu, nu - 1) * a.at(nu - 1, nu);
            if l == nu - 1 {
                let p = 0.5 * (y - x);
                let q = p * p + w;
                let z = q.abs().sqrt();
                x += shift_acc;
                if q >= 0.0 || z <= imag_tol {
                    let z = if q >= 0.0 { p + z.copysign(p) } else { p };
                    if q < 0.0 {
                        // numerically double real root
                        out.push(SchurBlock::Real(x + p));
                        out.push(SchurBlock::Real(x + p));
                    } else {
                        let hi = x + z;
                        let lo = if z != 0.0 { x - w / z } else { hi };
                        out.push(SchurBlock::Real(hi));
                        out.push(SchurBlock::Real(lo));
                    }
                } else {
                    out.push(SchurBlock::Complex { re: x + p, im: z });
                    out.push(SchurBlock::Complex { re: x + p, im: -z });
                }
                nn -= 2;
                break;
            }
            if its >= 60 * n {
                return Err(NoConvergence);
            }
            if its == 10 || its == 20 {
                shift_acc += x;
                for i in 0..=nu {
                    *a.at_mut(i, i) -= x;
                }
                let s = a.at(nu, nu - 1).abs() + a.at(nu - 1, nu - 2).abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            its += 1;

            let (mut p, mut q, mut r);
            let mut m = nu - 2;
            loop {
                let z = a.at(m, m);
                let rr = x - z;
                let ss = y - z;
                p = (rr * ss - w) / a.at(m + 1, m) + a.at(m, m + 1);
                q = a.at(m + 1, m + 1) - z - rr - ss;
                r = a.at(m + 2, m + 1);
                let s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                let u = a.at(m, m - 1).abs() * (q.abs() + r.abs());
                let v = p.abs() * (a.at(m - 1, m - 1).abs() + z.abs() + a.at(m + 1, m + 1).abs());
                if u <= f64::EPSILON * v {
                    break;
                }
                m -= 1;
            }
            for i in m + 2..=nu {
                *a.at_mut(i, i - 2) = 0.0;
                if i != m + 2 {
                    *a.at_mut(i, i - 3) = 0.0;
                }
            }
            let mut k = m;
            while k < nu {
                if k != m {
                    p = a.at(k, k - 1);
                    q = a.at(k + 1, k - 1);
                    r = if k != nu - 1 { a.at(k + 2, k - 1) } else { 0.0 };
                    x = p.abs() + q.abs() + r.abs();
                    if x != 0.0 {
                        p /= x;
                        q /= x;
                        r /= x;
                    }
                }
                let s = (p * p + q * q + r * r).sqrt().copysign(p);
                if s != 0.0 {
                    if k == m {
                        if l != m {
                            *a.at_mut(k, k - 1) = -a.at(k, k - 1);
                        }
                    } else {
                        *a.at_mut(k, k - 1) = -s * x;
                    }
                    p += s;
                    x = p / s;
                    y = q / s;
                    let z = r / s;
                    q /= p;
                    r /= p;
                    for j in k..=nu {
                        let mut pp = a.at(k, j) + q * a.at(k + 1, j);
                        if k != nu - 1 {
                            pp += r * a.at(k + 2, j);
                            *a.at_mut(k + 2, j) -= pp * z;
                        }
                        *a.at_mut(k + 1, j) -= pp * y;
                        *a.at_mut(k, j) -= pp * x;
                    }
                    let mmin = if nu < k + 3 { nu } else { k + 3 };
                    for i in l..=mmin {
                        let mut pp = x * a.at(i, k) + y * a.at(i, k + 1);
                        if k != nu - 1 {
                            pp += z * a.at(i, k + 2);
                            *a.at_mut(i, k + 2) -= pp * r;
                        }
                        *a.at_mut(i, k + 1) -= pp * q;
                        *a.at_mut(i, k) -= pp;
                    }
                }
                k += 1;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_small_system() {
        let a = Dense::from_row_major(2, &[2.0, 1.0, 1.0, 3.0]);
        let x = solve(a, vec![3.0, 5.0]).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-15);
        assert!((x[1] - 1.4).abs() < 1e-15);
    }

    #[test]
    fn solve_reports_singular() {
        let a = Dense::from_row_major(2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(solve(a, vec![1.0, 2.0]).is_none());
    }

    #[test]
    fn null_space_rank_deficient() {
        // rank 1: every row is a multiple of (1, 2, 3)
        let a = Dense::from_row_major(3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0, -1.0, -2.0, -3.0]);
        let basis = null_space(&a, 1e-12);
        assert_eq!(basis.len(), 2);
        for v in &basis {
            for i in 0..3 {
                let r: f64 = (0..3).map(|j| a.at(i, j) * v[j]).sum();
                assert!(r.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hessenberg_preserves_trace_and_zeroes_below_subdiagonal() {
        let data = [4.0, 1.0, 2.0, 3.0, 1.0, 5.0, 1.0, 2.0, 2.0, 1.0, 6.0, 1.0, 3.0, 2.0, 1.0, 7.0];
        let mut h = Dense::from_row_major(4, &data);
        hessenberg(&mut h);
        let tr: f64 = (0..4).map(|i| h.at(i, i)).sum();
        assert!((tr - 22.0).abs() < 1e-12);
        for i in 2..4 {
            for j in 0..i - 1 {
                assert_eq!(h.at(i, j), 0.0);
            }
        }
    }

    #[test]
    fn schur_detects_rotation_block() {
        let mut a = Dense::from_row_major(2, &[0.0, -1.0, 1.0, 0.0]);
        let ev = schur_eigenvalues(&mut a, 1e-9).unwrap();
        assert!(matches!(ev[0], SchurBlock::Complex { .. }));
    }

    #[test]
    fn schur_triangular_input() {
        let mut a = Dense::from_row_major(3, &[1.0, 2.0, 3.0, 0.0, 4.0, 5.0, 0.0, 0.0, 6.0]);
        let mut ev: Vec<f64> = schur_eigenvalues(&mut a, 1e-9)
            .unwrap()
            .into_iter()
            .map(|b| match b {
                SchurBlock::Real(v) => v,
                SchurBlock::Complex { .. } => panic!("complex"),
            })
            .collect();
        ev.sort_by(f64::total_cmp);
        assert_eq!(ev, vec![1.0, 4.0, 6.0]);
    }
}
