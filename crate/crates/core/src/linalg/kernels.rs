//! Slice-level dense kernels shared by the f32 network path and the f64
//! reconstruction path. Every product accumulates in f64 and reduces in a
//! fixed order, so results do not depend on the worker count.

use rayon::prelude::*;

/// Scalar storage type for the dense kernels.
pub trait Elem: Copy + Default + Send + Sync + PartialOrd + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Elem for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Elem for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}

const PAR_THRESHOLD: usize = 1 << 16;
const ROW_CHUNK: usize = 64;

fn gemm_rows<T: Elem>(a: &[T], b: &[T], k: usize, n: usize, out: &mut [T], acc: &mut [f64]) {
    let rows = out.len() / n.max(1);
    for r in 0..rows {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[r * k..(r + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let av = av.to_f64();
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += av * bv.to_f64();
            }
        }
        for (o, &s) in out[r * n..(r + 1) * n].iter_mut().zip(acc.iter()) {
            *o = T::from_f64(s);
        }
    }
}

/// `a (m×k) · b (k×n)`, row-major.
pub fn gemm<T: Elem>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::default(); m * n];
    if n == 0 || m == 0 {
        return out;
    }
    if m * k * n < PAR_THRESHOLD {
        let mut acc = vec![0.0; n];
        gemm_rows(a, b, k, n, &mut out, &mut acc);
    } else {
        out.par_chunks_mut(ROW_CHUNK * n)
            .enumerate()
            .for_each(|(ci, chunk)| {
                let mut acc = vec![0.0; n];
                let start = ci * ROW_CHUNK;
                let rows = chunk.len() / n;
                gemm_rows(&a[start * k..(start + rows) * k], b, k, n, chunk, &mut acc);
            });
    }
    out
}

/// Row-major transpose of an `m×n` buffer.
pub fn transpose<T: Elem>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::default(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// `aᵀ · b` for `a (m×k)`, `b (m×n)`, accumulated in f64 over fixed row
/// blocks and summed in block order.
pub fn gemm_tn_f64<T: Elem>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<f64> {
    const BLOCK: usize = 1024;
    let partial = |start: usize, end: usize| {
        let mut acc = vec![0.0f64; k * n];
        for r in start..end {
            let arow = &a[r * k..(r + 1) * k];
            let brow = &b[r * n..(r + 1) * n];
            for (i, &av) in arow.iter().enumerate() {
                let av = av.to_f64();
                if av == 0.0 {
                    continue;
                }
                let dst = &mut acc[i * n..(i + 1) * n];
                for (d, &bv) in dst.iter_mut().zip(brow) {
                    *d += av * bv.to_f64();
                }
            }
        }
        acc
    };
    let blocks = m.div_ceil(BLOCK);
    let parts: Vec<Vec<f64>> = if m * k * n < PAR_THRESHOLD {
        (0..blocks)
            .map(|bi| partial(bi * BLOCK, ((bi + 1) * BLOCK).min(m)))
            .collect()
    } else {
        (0..blocks)
            .into_par_iter()
            .map(|bi| partial(bi * BLOCK, ((bi + 1) * BLOCK).min(m)))
            .collect()
    };
    let mut out = vec![0.0f64; k * n];
    for p in parts {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

/// `aᵀ · b` stored back in the element type.
pub fn gemm_tn<T: Elem>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    gemm_tn_f64(a, b, m, k, n)
        .into_iter()
        .map(T::from_f64)
        .collect()
}

/// `a (m×k) · bᵀ` where `b` is `n×k`.
pub fn gemm_nt<T: Elem>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let bt = transpose(b, n, k);
    gemm(a, &bt, m, k, n)
}

/// Column sums of an `m×n` buffer, in f64.
pub fn col_sums<T: Elem>(a: &[T], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for r in 0..m {
        for (o, &v) in out.iter_mut().zip(&a[r * n..(r + 1) * n]) {
            *o += v.to_f64();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_small_matches_hand_product() {
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [5.0f32, 6.0, 7.0, 8.0];
        assert_eq!(gemm(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(gemm_tn(&a, &b, 2, 2, 2), vec![26.0, 30.0, 38.0, 44.0]);
        assert_eq!(gemm_nt(&a, &b, 2, 2, 2), vec![17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn parallel_and_serial_paths_agree_bitwise() {
        let m = 300;
        let k = 40;
        let n = 17;
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 37 % 101) as f32 - 50.0) / 7.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 53 % 89) as f32 - 44.0) / 5.0).collect();
        let big = gemm(&a, &b, m, k, n);
        let mut serial = vec![0.0f32; m * n];
        let mut acc = vec![0.0; n];
        gemm_rows(&a, &b, k, n, &mut serial, &mut acc);
        assert_eq!(big, serial);
    }
}
