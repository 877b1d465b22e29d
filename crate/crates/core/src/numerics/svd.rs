use super::Matrix;
use crate::{Error, Result};

const MAX_SWEEPS: usize = 80;

/// Thin singular value decomposition `m = U · diag(singular) · Vt`.
///
/// For an `r x c` input with `k = min(r, c)`: `u` is `r x k`, `vt` is `k x c`,
/// and `singular` has `k` non-negative entries in descending order.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Matrix,
    pub singular: Vec<f64>,
    pub vt: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let k = self.singular.len();
        let us = Matrix::from_fn(self.u.rows(), k, |r, c| self.u.get(r, c) * self.singular[c]);
        us.matmul(&self.vt).expect("svd factors are conformant")
    }
}

/// One-sided (Hestenes) Jacobi SVD.
pub fn svd(m: &Matrix) -> Result<Svd> {
    if m.is_empty() {
        return Err(Error::InvalidArgument("svd of an empty matrix".into()));
    }
    if !m.is_finite() {
        return Err(Error::InvalidArgument("svd of a non-finite matrix".into()));
    }
    if m.rows() >= m.cols() {
        jacobi_tall(m)
    } else {
        let t = jacobi_tall(&m.transpose())?;
        Ok(Svd {
            u: t.vt.transpose(),
            singular: t.singular,
            vt: t.u.transpose(),
        })
    }
}

/// Singular values only, descending.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    Ok(svd(m)?.singular)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn jacobi_tall(m: &Matrix) -> Result<Svd> {
    let (rows, cols) = m.shape();
    // Column-major working copies.
    let mut u: Vec<Vec<f64>> = (0..cols).map(|c| m.col_vec(c)).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|c| {
            let mut e = vec![0.0; cols];
            e[c] = 1.0;
            e
        })
        .collect();
    let tol = rows.max(1) as f64 * f64::EPSILON;

    let mut converged = cols < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..cols - 1 {
            for q in p + 1..cols {
                let alpha = dot(&u[p], &u[p]);
                let beta = dot(&u[q], &u[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(&u[p], &u[q]);
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut u, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::NonConvergence("one-sided Jacobi SVD"));
    }

    let norms: Vec<f64> = u.iter().map(|col| dot(col, col).sqrt()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));

    let mut u_cols: Vec<Option<Vec<f64>>> = Vec::with_capacity(cols);
    for &j in &order {
        let n = norms[j];
        if n > 0.0 {
            let col: Vec<f64> = u[j].iter().map(|x| x / n).collect();
            if col.iter().all(|x| x.is_finite()) {
                u_cols.push(Some(col));
                continue;
            }
        }
        u_cols.push(None);
    }
    complete_orthonormal(&mut u_cols, rows);

    let singular: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let u_mat = Matrix::from_fn(rows, cols, |r, c| u_cols[c].as_ref().expect("completed")[r]);
    let vt = Matrix::from_fn(cols, cols, |r, c| v[order[r]][c]);
    Ok(Svd {
        u: u_mat,
        singular,
        vt,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills missing columns (zero singular values) with unit vectors orthogonal
/// to every other column.
fn complete_orthonormal(cols: &mut [Option<Vec<f64>>], dim: usize) {
    let mut candidate = 0;
    for j in 0..cols.len() {
        if cols[j].is_some() {
            continue;
        }
        while candidate < dim {
            let mut e = vec![0.0; dim];
            e[candidate] = 1.0;
            candidate += 1;
            // Two Gram-Schmidt passes.
            for _ in 0..2 {
                for other in cols.iter().flatten() {
                    let d = dot(&e, other);
                    for (x, o) in e.iter_mut().zip(other) {
                        *x -= d * o;
                    }
                }
            }
            let n = dot(&e, &e).sqrt();
            if n > 0.5 {
                e.iter_mut().for_each(|x| *x /= n);
                cols[j] = Some(e);
                break;
            }
        }
    }
}

/// Householder QR of a tall matrix (`rows >= cols`), returning the thin `Q`
/// (`rows x cols`) with the signs fixed so that `R` has a non-negative diagonal.
pub fn thin_q(m: &Matrix) -> Result<Matrix> {
    let (rows, cols) = m.shape();
    if rows < cols {
        return Err(Error::shape("thin_q", format!("{rows}x{cols} is wide")));
    }
    let mut a: Vec<Vec<f64>> = (0..cols).map(|c| m.col_vec(c)).collect();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut diag_sign = vec![1.0; cols];
    for k in 0..cols {
        let x = &a[k][k..];
        let norm = dot(x, x).sqrt();
        let mut v = x.to_vec();
        if norm == 0.0 {
            reflectors.push(vec![0.0; rows - k]);
            continue;
        }
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vn = dot(&v, &v).sqrt();
        v.iter_mut().for_each(|e| *e /= vn);
        for col in a.iter_mut().skip(k) {
            let d = dot(&v, &col[k..]);
            for (e, vi) in col[k..].iter_mut().zip(&v) {
                *e -= 2.0 * d * vi;
            }
        }
        // R[k][k] = alpha after reflection.
        diag_sign[k] = if alpha < 0.0 { -1.0 } else { 1.0 };
        reflectors.push(v);
    }
    // Q = H_0 H_1 ... H_{cols-1} applied to the first `cols` unit vectors.
    let mut q = Matrix::zeros(rows, cols);
    for j in 0..cols {
        let mut e = vec![0.0; rows];
        e[j] = 1.0;
        for k in (0..cols).rev() {
            let v = &reflectors[k];
            let d = dot(v, &e[k..]);
            for (x, vi) in e[k..].iter_mut().zip(v) {
                *x -= 2.0 * d * vi;
            }
        }
        for r in 0..rows {
            q.set(r, j, e[r] * diag_sign[j]);
        }
    }
    Ok(q)
}
