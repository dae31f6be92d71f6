use super::Matrix;
use crate::error::{invalid, Result};

const ROTATION_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 60;

/// Thin SVD `A = U · diag(S) · Vt` with `r = min(m, n)`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub vt: Matrix,
}

/// f64 thin SVD, row-major buffers: `u` is `m×r`, `vt` is `r×n`.
pub(crate) struct SvdF64 {
    pub r: usize,
    pub u: Vec<f64>,
    pub s: Vec<f64>,
    pub vt: Vec<f64>,
}

pub fn svd(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = (a.rows(), a.cols());
    if m == 0 || n == 0 {
        return Err(invalid(format!("svd of a {m}x{n} matrix")));
    }
    let res = svd_f64(&a.to_f64(), m, n);
    Ok(SvdResult {
        u: Matrix::from_f64(m, res.r, &res.u),
        s: res.s,
        vt: Matrix::from_f64(res.r, n, &res.vt),
    })
}

/// Keep the leading `z` components: `Q = U[:, :z]`, `R = diag(S[:z]) · Vt[:z, :]`.
pub fn truncated_factorize(res: &SvdResult, z: usize) -> Result<(Matrix, Matrix)> {
    let r = res.s.len();
    if z == 0 || z > r {
        return Err(invalid(format!("rank {z} outside 1..={r}")));
    }
    let (m, n) = (res.u.rows(), res.vt.cols());
    let q = Matrix::from_fn(m, z, |i, j| res.u.get(i, j));
    let rmat = Matrix::from_fn(z, n, |i, j| (res.s[i] * res.vt.get(i, j) as f64) as f32);
    Ok((q, rmat))
}

pub(crate) fn svd_f64(a: &[f64], m: usize, n: usize) -> SvdF64 {
    if m >= n {
        jacobi_tall(a, m, n)
    } else {
        let at = super::kernels::transpose(a, m, n);
        let t = jacobi_tall(&at, n, m);
        // Aᵀ = U' S V'ᵀ  =>  A = V' S U'ᵀ
        let r = t.r;
        let u = super::kernels::transpose(&t.vt, r, m);
        let vt = super::kernels::transpose(&t.u, n, r);
        let mut out = SvdF64 { r, u, s: t.s, vt };
        fix_signs(&mut out, m, n);
        out
    }
}

/// One-sided Jacobi on the columns of a tall `m×n` matrix (`m >= n`).
fn jacobi_tall(a: &[f64], m: usize, n: usize) -> SvdF64 {
    // Column-major working copy so each rotation touches contiguous memory.
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| a[i * n + j]).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= ROTATION_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let smax = norms[order[0]];
    let tiny = smax * 1e-13;
    let r = n;
    let mut u = vec![0.0; m * r];
    let mut s = vec![0.0; r];
    let mut vt = vec![0.0; r * n];
    let mut deficient = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        s[k] = norms[j];
        if norms[j] > tiny && norms[j] > 0.0 {
            for i in 0..m {
                u[i * r + k] = cols[j][i] / norms[j];
            }
        } else {
            deficient.push(k);
        }
        for i in 0..n {
            vt[k * n + i] = v[j][i];
        }
    }
    complete_basis(&mut u, m, r, &deficient);
    let mut out = SvdF64 { r, u, s, vt };
    fix_signs(&mut out, m, n);
    out
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fill the listed columns of `u (m×r)` with unit vectors orthogonal to every
/// other column, drawn from the standard basis by Gram-Schmidt.
fn complete_basis(u: &mut [f64], m: usize, r: usize, missing: &[usize]) {
    let mut filled: Vec<usize> = (0..r).filter(|k| !missing.contains(k)).collect();
    for &k in missing {
        let mut best: Option<Vec<f64>> = None;
        let mut best_norm = 0.0;
        for e in 0..m {
            let mut cand = vec![0.0; m];
            cand[e] = 1.0;
            for _ in 0..2 {
                for &f in &filled {
                    let dot: f64 = (0..m).map(|i| u[i * r + f] * cand[i]).sum();
                    for (i, c) in cand.iter_mut().enumerate() {
                        *c -= dot * u[i * r + f];
                    }
                }
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > best_norm + 1e-12 {
                best_norm = norm;
                best = Some(cand);
            }
            if best_norm > 0.7 {
                break;
            }
        }
        let cand = best.expect("orthogonal complement exists while r <= m");
        for i in 0..m {
            u[i * r + k] = cand[i] / best_norm;
        }
        filled.push(k);
    }
}

/// Make the first non-negligible entry of each `U` column positive.
fn fix_signs(res: &mut SvdF64, m: usize, n: usize) {
    let r = res.r;
    for k in 0..r {
        let first = (0..m).map(|i| res.u[i * r + k]).find(|x| x.abs() > 1e-12);
        if matches!(first, Some(x) if x < 0.0) {
            for i in 0..m {
                res.u[i * r + k] = -res.u[i * r + k];
            }
            for j in 0..n {
                res.vt[k * n + j] = -res.vt[k * n + j];
            }
        }
    }
}
