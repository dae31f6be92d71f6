use crate::error::{invalid, Result};
use crate::linalg::kernels::Elem;
use crate::linalg::Matrix;

/// Dense 4-D array in `n, c, h, w` row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<f32>,
}

impl Tensor4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(invalid(format!(
                "tensor data length {} does not match {n}x{c}x{h}x{w}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("tensor contains non-finite values"));
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[((b * self.c + c) * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: f32) {
        let (cc, hh, ww) = (self.c, self.h, self.w);
        self.data[((b * cc + c) * hh + y) * ww + x] = v;
    }

    /// Samples `idx` in the given order.
    pub fn select(&self, idx: &[usize]) -> Tensor4 {
        let per = self.c * self.h * self.w;
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        Tensor4 {
            n: idx.len(),
            c: self.c,
            h: self.h,
            w: self.w,
            data,
        }
    }

    /// Contiguous sample range.
    pub fn slice(&self, start: usize, end: usize) -> Tensor4 {
        let per = self.c * self.h * self.w;
        Tensor4 {
            n: end - start,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data[start * per..end * per].to_vec(),
        }
    }

    /// One row per sample, flattened in `c, h, w` order.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_parts_unchecked(self.n, self.c * self.h * self.w, self.data.clone())
    }

    pub(crate) fn to_nhwc<T: Elem>(&self) -> FeatureMap<T> {
        let mut out = FeatureMap::zeros(self.n, self.h, self.w, self.c);
        for b in 0..self.n {
            for c in 0..self.c {
                for y in 0..self.h {
                    for x in 0..self.w {
                        let v = self.data[((b * self.c + c) * self.h + y) * self.w + x];
                        out.data[((b * self.h + y) * self.w + x) * self.c + c] = T::from_f64(v as f64);
                    }
                }
            }
        }
        out
    }
}

/// Channels-last activation buffer: rows are positions `(n, y, x)`, columns
/// are channels. This is the layout convolutions consume and produce.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct FeatureMap<T> {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<T>,
}

impl<T: Elem> FeatureMap<T> {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Self {
            n,
            h,
            w,
            c,
            data: vec![T::default(); n * h * w * c],
        }
    }

    pub fn positions(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn to_tensor(&self) -> Tensor4 {
        let mut out = Tensor4::zeros(self.n, self.c, self.h, self.w);
        for b in 0..self.n {
            for y in 0..self.h {
                for x in 0..self.w {
                    let base = ((b * self.h + y) * self.w + x) * self.c;
                    for c in 0..self.c {
                        out.data[((b * self.c + c) * self.h + y) * self.w + x] =
                            self.data[base + c].to_f64() as f32;
                    }
                }
            }
        }
        out
    }

    /// Keep only the listed channels, in order.
    pub fn select_channels(&self, keep: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.positions() * keep.len());
        for p in 0..self.positions() {
            let row = &self.data[p * self.c..(p + 1) * self.c];
            data.extend(keep.iter().map(|&k| row[k]));
        }
        Self {
            n: self.n,
            h: self.h,
            w: self.w,
            c: keep.len(),
            data,
        }
    }

    pub fn select_samples(&self, idx: &[usize]) -> Self {
        let per = self.h * self.w * self.c;
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        Self {
            n: idx.len(),
            h: self.h,
            w: self.w,
            c: self.c,
            data,
        }
    }

    pub fn concat(parts: Vec<Self>) -> Option<Self> {
        let first = parts.first()?;
        let (h, w, c) = (first.h, first.w, first.c);
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            debug_assert!(p.h == h && p.w == w && p.c == c);
            n += p.n;
            data.extend(p.data);
        }
        Some(Self { n, h, w, c, data })
    }

    pub fn cast<U: Elem>(&self) -> FeatureMap<U> {
        FeatureMap {
            n: self.n,
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}
