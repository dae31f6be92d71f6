use super::{kernels, svd_f64, Matrix};
use crate::error::{invalid, Result};

/// Eigenvalues of `AᵀA` below this fraction of the largest are treated as
/// zero, which yields the minimum-norm solution for rank-deficient `A`.
const GRAM_RCOND: f64 = 1e-12;

/// Cholesky is used only when every pivot stays above this fraction of the
/// largest diagonal entry of `AᵀA`.
const CHOL_RCOND: f64 = 1e-10;

/// Minimum-norm least-squares solution of `A X ≈ B`.
pub fn lstsq(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(invalid(format!(
            "lstsq row counts differ: A has {}, B has {}",
            a.rows(),
            b.rows()
        )));
    }
    if a.rows() == 0 || a.cols() == 0 {
        return Err(invalid("lstsq on an empty system"));
    }
    let (m, p, q) = (a.rows(), a.cols(), b.cols());
    let gram = kernels::gemm_tn_f64(a.data(), a.data(), m, p, p);
    let atb = kernels::gemm_tn_f64(a.data(), b.data(), m, p, q);
    Ok(Matrix::from_f64(p, q, &lstsq_gram(&gram, &atb, p, q)))
}

/// Solve from the normal-equation pieces `G = AᵀA (p×p)` and `AᵀB (p×q)`:
/// Cholesky when `G` is well conditioned, otherwise the pseudo-inverse.
pub(crate) fn lstsq_gram(gram: &[f64], atb: &[f64], p: usize, q: usize) -> Vec<f64> {
    // Zero columns of A get zero coefficients in the minimum-norm solution.
    let active: Vec<usize> = (0..p).filter(|&i| gram[i * p + i] > 0.0).collect();
    let r = active.len();
    if r == 0 {
        return vec![0.0; p * q];
    }
    let g: Vec<f64> = active
        .iter()
        .flat_map(|&i| active.iter().map(move |&j| gram[i * p + j]))
        .collect();
    let b: Vec<f64> = active
        .iter()
        .flat_map(|&i| atb[i * q..(i + 1) * q].iter().copied())
        .collect();
    let x = match cholesky(&g, r) {
        Some(l) => cholesky_solve(&l, &b, r, q),
        None => pinv_solve(&g, &b, r, q),
    };
    let mut out = vec![0.0; p * q];
    for (k, &i) in active.iter().enumerate() {
        out[i * q..(i + 1) * q].copy_from_slice(&x[k * q..(k + 1) * q]);
    }
    out
}

/// Lower Cholesky factor of `G`, or `None` when a pivot falls below
/// `CHOL_RCOND` times the largest diagonal entry.
fn cholesky(g: &[f64], p: usize) -> Option<Vec<f64>> {
    let dmax = (0..p).map(|i| g[i * p + i]).fold(0.0f64, f64::max);
    if dmax <= 0.0 || !dmax.is_finite() {
        return None;
    }
    let floor = dmax * CHOL_RCOND;
    let mut l = vec![0.0; p * p];
    for j in 0..p {
        let d = g[j * p + j] - l[j * p..j * p + j].iter().map(|v| v * v).sum::<f64>();
        if d <= floor {
            return None;
        }
        let djj = d.sqrt();
        l[j * p + j] = djj;
        for i in j + 1..p {
            let (upper, lower) = l.split_at_mut(i * p);
            let lj = &upper[j * p..j * p + j];
            let dot: f64 = lower[..j].iter().zip(lj).map(|(a, b)| a * b).sum();
            lower[j] = (g[i * p + j] - dot) / djj;
        }
    }
    Some(l)
}

/// Solve `L Lᵀ X = B` for `B (p×q)`.
fn cholesky_solve(l: &[f64], b: &[f64], p: usize, q: usize) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..p {
        for k in 0..i {
            let lik = l[i * p + k];
            if lik != 0.0 {
                for j in 0..q {
                    y[i * q + j] -= lik * y[k * q + j];
                }
            }
        }
        let d = l[i * p + i];
        y[i * q..(i + 1) * q].iter_mut().for_each(|v| *v /= d);
    }
    for i in (0..p).rev() {
        for k in i + 1..p {
            let lki = l[k * p + i];
            if lki != 0.0 {
                for j in 0..q {
                    y[i * q + j] -= lki * y[k * q + j];
                }
            }
        }
        let d = l[i * p + i];
        y[i * q..(i + 1) * q].iter_mut().for_each(|v| *v /= d);
    }
    y
}

fn pinv_solve(gram: &[f64], atb: &[f64], p: usize, q: usize) -> Vec<f64> {
    // G is symmetric PSD, so its SVD is its eigendecomposition: G = V Λ Vᵀ.
    let eig = svd_f64(gram, p, p);
    let lmax = eig.s.first().copied().unwrap_or(0.0);
    let cutoff = lmax * GRAM_RCOND;
    // Vᵀ(AᵀB), scaled by 1/λ, then mapped back by V.
    let mut proj = vec![0.0; p * q];
    for k in 0..p {
        if eig.s[k] <= cutoff || eig.s[k] == 0.0 {
            continue;
        }
        let inv = 1.0 / eig.s[k];
        for j in 0..q {
            let mut acc = 0.0;
            for i in 0..p {
                acc += eig.vt[k * p + i] * atb[i * q + j];
            }
            proj[k * q + j] = acc * inv;
        }
    }
    let mut x = vec![0.0; p * q];
    for i in 0..p {
        for k in 0..p {
            let vik = eig.vt[k * p + i];
            if vik == 0.0 {
                continue;
            }
            for j in 0..q {
                x[i * q + j] += vik * proj[k * q + j];
            }
        }
    }
    x
}
