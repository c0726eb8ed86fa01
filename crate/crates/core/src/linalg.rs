//! Singular value decomposition, Householder QR and orthogonal sampling.
//!
//! The SVD is a one-sided (Hestenes) Jacobi iteration on the full matrix,
//! truncated afterwards. It is accurate to working precision on the
//! desk-scale matrices this crate handles (a few hundred per side at most).

use crate::error::{param, Error, Result};
use crate::matrix::{matmul, matmul_nt, Matrix};
use crate::rng::Rng;

/// Truncated singular triplets `m ≈ u · diag(s) · vᵀ`.
///
/// `u` is `p×k`, `v` is `q×k`, both with orthonormal columns; `s` is
/// nonincreasing and nonnegative. Each column of `u` has its largest-magnitude
/// entry nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `u · diag(s) · vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let us = Matrix::from_fn(self.u.rows(), self.s.len(), |i, j| {
            self.u.get(i, j) * self.s[j]
        });
        matmul_nt(&us, &self.v).expect("svd factors are shape-consistent")
    }

    /// Keeps the leading `k` triplets.
    pub fn truncate(mut self, k: usize) -> SvdResult {
        let k = k.min(self.s.len());
        self.u = self.u.leading_columns(k);
        self.v = self.v.leading_columns(k);
        self.s.truncate(k);
        self
    }
}

const MAX_SWEEPS: usize = 80;

/// Top-`k` singular triplets of `m`.
pub fn svd(m: &Matrix, k: usize) -> Result<SvdResult> {
    let (rows, cols) = m.shape();
    let full = rows.min(cols);
    if k < 1 || k > full {
        return param(format!("svd rank {k} outside 1..={full} for {rows}x{cols}"));
    }
    if !m.is_finite() {
        return Err(Error::Numeric("svd input has non-finite entries".into()));
    }
    let mut res = if rows >= cols {
        jacobi_tall(m)
    } else {
        let t = jacobi_tall(&m.transpose());
        SvdResult {
            u: t.v,
            s: t.s,
            v: t.u,
        }
    };
    fix_signs(&mut res);
    Ok(res.truncate(k))
}

/// All `min(rows, cols)` singular values, descending.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    let k = m.rows().min(m.cols());
    Ok(svd(m, k)?.s)
}

/// SVD of a tall (`rows ≥ cols`) matrix via one-sided Jacobi rotations.
fn jacobi_tall(a: &Matrix) -> SvdResult {
    let (m, n) = a.shape();
    debug_assert!(m >= n);
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let tol = f64::EPSILON * m as f64;

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let (wp, wq) = (&w[p], &w[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for i in 0..m {
                        alpha += wp[i] * wp[i];
                        beta += wq[i] * wq[i];
                        gamma += wp[i] * wq[i];
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = w
        .iter()
        .map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let s_max = norms[order[0]];
    let floor = s_max * f64::EPSILON * (m.max(n) as f64);
    let mut u_cols: Vec<Option<Vec<f64>>> = order
        .iter()
        .map(|&j| {
            let sigma = norms[j];
            if sigma > floor && sigma > 0.0 {
                Some(w[j].iter().map(|x| x / sigma).collect())
            } else {
                None
            }
        })
        .collect();
    complete_orthonormal(&mut u_cols, m);

    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let u = Matrix::from_fn(m, n, |i, c| u_cols[c].as_ref().unwrap()[i]);
    let v = Matrix::from_fn(n, n, |i, c| v[order[c]][i]);
    SvdResult { u, s, v }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills `None` slots with unit vectors orthogonal to every other column.
fn complete_orthonormal(cols: &mut [Option<Vec<f64>>], dim: usize) {
    for slot in 0..cols.len() {
        if cols[slot].is_some() {
            continue;
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        for e in 0..dim {
            let mut x = vec![0.0; dim];
            x[e] = 1.0;
            // two passes of Gram-Schmidt
            for _ in 0..2 {
                for c in cols.iter().flatten() {
                    let d: f64 = c.iter().zip(&x).map(|(a, b)| a * b).sum();
                    for (xi, ci) in x.iter_mut().zip(c) {
                        *xi -= d * ci;
                    }
                }
            }
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if best.as_ref().is_none_or(|(b, _)| norm > *b) {
                best = Some((norm, x));
            }
        }
        let (norm, mut x) = best.expect("dimension is positive");
        for xi in &mut x {
            *xi /= norm;
        }
        cols[slot] = Some(x);
    }
}

fn fix_signs(res: &mut SvdResult) {
    for j in 0..res.s.len() {
        let mut best = 0;
        let mut best_abs = -1.0;
        for i in 0..res.u.rows() {
            let a = res.u.get(i, j).abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if res.u.get(best, j) < 0.0 {
            for i in 0..res.u.rows() {
                res.u.set(i, j, -res.u.get(i, j));
            }
            for i in 0..res.v.rows() {
                res.v.set(i, j, -res.v.get(i, j));
            }
        }
    }
}

/// Thin Householder QR: `a = q · r` with `q` of shape `m×k` (orthonormal
/// columns), `r` of shape `k×n` upper-trapezoidal, `k = min(m, n)`, and a
/// nonnegative diagonal on `r`.
pub fn qr(a: &Matrix) -> (Matrix, Matrix) {
    let (m, n) = a.shape();
    let k = m.min(n);
    let mut r = a.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(k);

    for j in 0..k {
        let mut x: Vec<f64> = (j..m).map(|i| r.get(i, j)).collect();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        x[0] -= alpha;
        let vnorm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        for xi in &mut x {
            *xi /= vnorm;
        }
        for c in j..n {
            let d: f64 = (j..m).map(|i| x[i - j] * r.get(i, c)).sum();
            for i in j..m {
                r.set(i, c, r.get(i, c) - 2.0 * x[i - j] * d);
            }
        }
        reflectors.push(x);
    }

    // Q = H_0 H_1 ... H_{k-1} applied to the first k columns of I.
    let mut q = Matrix::from_fn(m, k, |i, j| if i == j { 1.0 } else { 0.0 });
    for j in (0..k).rev() {
        let x = &reflectors[j];
        if x.is_empty() {
            continue;
        }
        for c in 0..k {
            let d: f64 = (j..m).map(|i| x[i - j] * q.get(i, c)).sum();
            for i in j..m {
                q.set(i, c, q.get(i, c) - 2.0 * x[i - j] * d);
            }
        }
    }

    let mut r_thin = Matrix::from_fn(k, n, |i, c| if c >= i { r.get(i, c) } else { 0.0 });
    for i in 0..k {
        if r_thin.get(i, i) < 0.0 {
            for c in 0..n {
                r_thin.set(i, c, -r_thin.get(i, c));
            }
            for row in 0..m {
                q.set(row, i, -q.get(row, i));
            }
        }
    }
    (q, r_thin)
}

/// Top-`k` SVD of `u · v` without forming the `p×q` product.
///
/// Orthonormalizes `u` and `vᵀ`, then decomposes the small core
/// `R_u · R_vᵀ`.
pub fn thin_svd_of_product(u: &Matrix, v: &Matrix, k: usize) -> Result<SvdResult> {
    if u.cols() != v.rows() {
        return Err(Error::Shape {
            op: "thin_svd_of_product",
            lhs: u.shape(),
            rhs: v.shape(),
        });
    }
    let (p, w) = u.shape();
    let q = v.cols();
    let full = w.min(p).min(q);
    if k < 1 || k > full {
        return param(format!(
            "thin svd rank {k} outside 1..={full} for ({p}x{w})·({w}x{q})"
        ));
    }
    if !u.is_finite() || !v.is_finite() {
        return Err(Error::Numeric("thin svd input has non-finite entries".into()));
    }
    let (q1, r1) = qr(u);
    let (q2, r2) = qr(&v.transpose());
    let core = matmul_nt(&r1, &r2)?;
    let kc = core.rows().min(core.cols());
    let inner = svd(&core, kc)?;
    let mut res = SvdResult {
        u: matmul(&q1, &inner.u)?,
        s: inner.s,
        v: matmul(&q2, &inner.v)?,
    };
    fix_signs(&mut res);
    Ok(res.truncate(k))
}

/// Haar-distributed `n×n` orthogonal matrix from the QR of a Gaussian matrix.
pub fn random_orthogonal(n: usize, rng: &mut Rng) -> Matrix {
    let g = Matrix::from_fn(n, n, |_, _| rng.gaussian());
    qr(&g).0
}

/// Numerical rank: count of singular values above `rel_tol · s₁`.
pub fn numerical_rank(m: &Matrix, rel_tol: f64) -> Result<usize> {
    let s = singular_values(m)?;
    let top = s.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return Ok(0);
    }
    Ok(s.iter().filter(|&&x| x > rel_tol * top).count())
}
