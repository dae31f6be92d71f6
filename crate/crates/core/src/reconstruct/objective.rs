use crate::error::{invalid, Result};
use crate::linalg::kernels;
use crate::linalg::lstsq_gram;
use crate::net::ops::{col2im_nhwc, conv_out_dim, im2col_nhwc, maxpool_backward, maxpool_nhwc};
use crate::net::{FeatureMap, Tensor4};
use crate::pruner::Mask;

/// Relative ridge strength of [`ReconProblem::refit_embedding`].
const REFIT_RIDGE: f64 = 1e-2;

/// Parameter-free operation between the pruned layer's activation and the
/// next embedding factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Glue {
    MaxPool { k: usize, stride: usize },
    Relu,
}

/// Variables of one reconstruction unit: the transformation factor `R'`
/// (`z_in × n`) of the pruned layer and the embedding factor `Q'`
/// (`k·k·n × z_out`) of the next layer, with biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconParams {
    pub r: Vec<f64>,
    pub r_bias: Vec<f64>,
    pub q: Vec<f64>,
    pub q_bias: Vec<f64>,
}

impl ReconParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            r: vec![0.0; self.r.len()],
            r_bias: vec![0.0; self.r_bias.len()],
            q: vec![0.0; self.q.len()],
            q_bias: vec![0.0; self.q_bias.len()],
        }
    }

    pub fn parts(&self) -> [&[f64]; 4] {
        [&self.r, &self.r_bias, &self.q, &self.q_bias]
    }

    pub fn parts_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.r, &mut self.r_bias, &mut self.q, &mut self.q_bias]
    }

    pub fn max_abs(&self) -> f64 {
        self.parts().iter().flat_map(|p| p.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Shape of a reconstruction unit.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitSpec {
    /// Width of the pruned layer.
    pub n: usize,
    /// ReLU after the transformation factor.
    pub relu: bool,
    pub glue: Vec<Glue>,
    /// Geometry of the next embedding factor.
    pub k: usize,
    pub pad: usize,
    pub stride: usize,
}

/// `min ‖T − Q'ᵀ(m ⊙ γ(R'ᵀE'))‖²` averaged over output positions, where `E'`
/// is the pruned network's embedding entering the layer and `T` the original
/// network's embedding leaving it.
#[derive(Debug, Clone)]
pub struct ReconProblem {
    input: FeatureMap<f64>,
    target: FeatureMap<f64>,
    pub spec: UnitSpec,
    pub mask: Mask,
    pub z_in: usize,
    pub z_out: usize,
}

enum GlueCache {
    Pool { arg: Vec<u32>, h: usize, w: usize },
    Relu { out: Vec<f64> },
}

struct Pass {
    sum: f64,
    positions: usize,
    e: FeatureMap<f64>,
    pre: Vec<f64>,
    glue: Vec<GlueCache>,
    /// Map entering the embedding factor.
    x: (usize, usize, usize, usize),
    cols: Vec<f64>,
    diff: Vec<f64>,
}

impl ReconProblem {
    /// `input` is `samples × z_in × h × w`; `target` must match the unit's
    /// output shape.
    pub fn new(input: &Tensor4, target: &Tensor4, spec: UnitSpec, mask: Mask) -> Result<Self> {
        Self::from_maps(input.to_nhwc(), target.to_nhwc(), spec, mask)
    }

    pub(crate) fn from_maps(input: FeatureMap<f64>, target: FeatureMap<f64>, spec: UnitSpec, mask: Mask) -> Result<Self> {
        if input.n != target.n {
            return Err(invalid(format!(
                "input has {} samples, target has {}",
                input.n, target.n
            )));
        }
        if mask.len() != spec.n {
            return Err(invalid(format!("mask length {} != layer width {}", mask.len(), spec.n)));
        }
        let (mut h, mut w) = (input.h, input.w);
        for g in &spec.glue {
            if let Glue::MaxPool { k, stride } = *g {
                match (conv_out_dim(h, k, 0, stride), conv_out_dim(w, k, 0, stride)) {
                    (Some(a), Some(b)) => (h, w) = (a, b),
                    _ => return Err(invalid("pool window larger than its input")),
                }
            }
        }
        let ho = conv_out_dim(h, spec.k, spec.pad, spec.stride);
        let wo = conv_out_dim(w, spec.k, spec.pad, spec.stride);
        if ho != Some(target.h) || wo != Some(target.w) {
            return Err(invalid(format!(
                "unit output {:?}x{:?} does not match target {}x{}",
                ho, wo, target.h, target.w
            )));
        }
        Ok(Self {
            z_in: input.c,
            z_out: target.c,
            input,
            target,
            spec,
            mask,
        })
    }

    pub fn samples(&self) -> usize {
        self.input.n
    }

    fn check(&self, p: &ReconParams, batch: &[usize]) -> Result<()> {
        let (n, kk) = (self.spec.n, self.spec.k * self.spec.k);
        if p.r.len() != self.z_in * n
            || p.r_bias.len() != n
            || p.q.len() != kk * n * self.z_out
            || p.q_bias.len() != self.z_out
        {
            return Err(invalid("parameter shapes do not match the reconstruction unit"));
        }
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        if let Some(&bad) = batch.iter().find(|&&i| i >= self.samples()) {
            return Err(invalid(format!("sample {bad} out of range")));
        }
        Ok(())
    }

    fn forward(&self, p: &ReconParams, batch: &[usize]) -> Result<Pass> {
        let n = self.spec.n;
        let e = self.input.select_samples(batch);
        let rows = e.positions();
        let mut pre = kernels::gemm(&e.data, &p.r, rows, self.z_in, n);
        for row in pre.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(&p.r_bias) {
                *v += b;
            }
        }
        let mut h = pre.clone();
        for row in h.chunks_mut(n) {
            for (j, v) in row.iter_mut().enumerate() {
                if !self.mask.is_kept(j) || (self.spec.relu && *v <= 0.0) {
                    *v = 0.0;
                }
            }
        }
        let mut x = FeatureMap {
            n: e.n,
            h: e.h,
            w: e.w,
            c: n,
            data: h,
        };
        let mut glue = Vec::with_capacity(self.spec.glue.len());
        for g in &self.spec.glue {
            match *g {
                Glue::MaxPool { k, stride } => {
                    let (y, arg) = maxpool_nhwc(&x, k, stride)?;
                    glue.push(GlueCache::Pool { arg, h: x.h, w: x.w });
                    x = y;
                }
                Glue::Relu => {
                    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
                    glue.push(GlueCache::Relu { out: x.data.clone() });
                }
            }
        }
        let (k, pad, stride) = (self.spec.k, self.spec.pad, self.spec.stride);
        let (cols, ho, wo) = im2col_nhwc(&x, k, pad, stride)?;
        let rows2 = x.n * ho * wo;
        let mut out = kernels::gemm(&cols, &p.q, rows2, k * k * n, self.z_out);
        let target = self.target.select_samples(batch);
        let mut sum = 0.0;
        for (r, row) in out.chunks_mut(self.z_out).enumerate() {
            let t = &target.data[r * self.z_out..(r + 1) * self.z_out];
            for ((v, b), tv) in row.iter_mut().zip(&p.q_bias).zip(t) {
                *v = *v + b - tv;
                sum += *v * *v;
            }
        }
        Ok(Pass {
            sum,
            positions: rows2,
            e,
            pre,
            glue,
            x: (x.n, x.h, x.w, x.c),
            cols,
            diff: out,
        })
    }

    /// Ridge-regularized least-squares fit of the embedding factor and its
    /// bias with the transformation factor held at `p.r`. The ridge is
    /// relative to the mean diagonal of the Gram matrix; the bias is not
    /// penalized.
    pub fn refit_embedding(&self, p: &ReconParams) -> Result<ReconParams> {
        let all: Vec<usize> = (0..self.samples()).collect();
        self.check(p, &all)?;
        let kkn = self.spec.k * self.spec.k * self.spec.n;
        let (cols, zo) = (kkn + 1, self.z_out);
        let mut gram = vec![0.0; cols * cols];
        let mut atb = vec![0.0; cols * zo];
        for chunk in all.chunks(128) {
            let pass = self.forward(p, chunk)?;
            let rows = pass.positions;
            let mut a = Vec::with_capacity(rows * cols);
            for row in pass.cols.chunks(kkn) {
                a.extend_from_slice(row);
                a.push(1.0);
            }
            let t = self.target.select_samples(chunk);
            for (acc, v) in gram.iter_mut().zip(kernels::gemm_tn_f64(&a, &a, rows, cols, cols)) {
                *acc += v;
            }
            for (acc, v) in atb.iter_mut().zip(kernels::gemm_tn_f64(&a, &t.data, rows, cols, zo)) {
                *acc += v;
            }
        }
        let diag = (0..kkn).map(|i| gram[i * cols + i]).sum::<f64>() / kkn as f64;
        let ridge = REFIT_RIDGE * diag;
        for i in 0..kkn {
            if gram[i * cols + i] > 0.0 {
                gram[i * cols + i] += ridge;
            }
        }
        let x = lstsq_gram(&gram, &atb, cols, zo);
        let mut out = p.clone();
        out.q = x[..kkn * zo].to_vec();
        out.q_bias = x[kkn * zo..].to_vec();
        Ok(out)
    }

    /// Sum of squared errors and output position count over `batch`,
    /// evaluated in chunks.
    fn sum_over(&self, p: &ReconParams, batch: &[usize]) -> Result<(f64, usize)> {
        let mut sum = 0.0;
        let mut positions = 0;
        for chunk in batch.chunks(128) {
            let pass = self.forward(p, chunk)?;
            sum += pass.sum;
            positions += pass.positions;
        }
        Ok((sum, positions))
    }
}

/// Mean over output positions of the squared embedding error.
pub fn recon_loss(p: &ReconProblem, params: &ReconParams, batch: &[usize]) -> Result<f64> {
    p.check(params, batch)?;
    let (sum, positions) = p.sum_over(params, batch)?;
    Ok(sum / positions as f64)
}

/// Loss over every sample of the problem.
pub fn full_loss(p: &ReconProblem, params: &ReconParams) -> Result<f64> {
    let all: Vec<usize> = (0..p.samples()).collect();
    recon_loss(p, params, &all)
}

/// Loss and its analytic gradient with respect to every parameter.
pub fn recon_grad(p: &ReconProblem, params: &ReconParams, batch: &[usize]) -> Result<(f64, ReconParams)> {
    p.check(params, batch)?;
    let pass = p.forward(params, batch)?;
    let spec = &p.spec;
    let (n, z_out) = (spec.n, p.z_out);
    let width = spec.k * spec.k * n;
    let scale = 2.0 / pass.positions as f64;
    let dout: Vec<f64> = pass.diff.iter().map(|d| d * scale).collect();
    let rows2 = pass.positions;
    let dq = kernels::gemm_tn_f64(&pass.cols, &dout, rows2, width, z_out);
    let dqb = kernels::col_sums(&dout, rows2, z_out);
    let dcols = kernels::gemm_nt(&dout, &params.q, rows2, z_out, width);
    let (xn, xh, xw, xc) = pass.x;
    let mut dx = col2im_nhwc(&dcols, xn, xh, xw, xc, spec.k, spec.pad, spec.stride);
    for cache in pass.glue.iter().rev() {
        match cache {
            GlueCache::Pool { arg, h, w } => dx = maxpool_backward(&dx, arg, *h, *w),
            GlueCache::Relu { out } => {
                for (g, &o) in dx.data.iter_mut().zip(out) {
                    if o <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
        }
    }
    let mut da = dx.data;
    for (row, pre) in da.chunks_mut(n).zip(pass.pre.chunks(n)) {
        for (j, (g, &a)) in row.iter_mut().zip(pre).enumerate() {
            if !p.mask.is_kept(j) || (spec.relu && a <= 0.0) {
                *g = 0.0;
            }
        }
    }
    let rows = pass.e.positions();
    let dr = kernels::gemm_tn_f64(&pass.e.data, &da, rows, p.z_in, n);
    let drb = kernels::col_sums(&da, rows, n);
    Ok((
        pass.sum / pass.positions as f64,
        ReconParams {
            r: dr,
            r_bias: drb,
            q: dq,
            q_bias: dqb,
        },
    ))
}

/// Cross-entropy objective of the final transformation factor: logits are
/// `E·R + b` (optionally rectified) on `samples × z` embeddings.
#[derive(Debug, Clone)]
pub struct ClassifierProblem {
    inputs: Vec<f64>,
    labels: Vec<u32>,
    pub z: usize,
    pub classes: usize,
    pub relu: bool,
}

impl ClassifierProblem {
    pub fn new(inputs: &[f64], z: usize, classes: usize, labels: &[u32], relu: bool) -> Result<Self> {
        if z == 0 || inputs.len() != labels.len() * z {
            return Err(invalid("embedding matrix does not match label count"));
        }
        if labels.is_empty() {
            return Err(invalid("no samples"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(invalid(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            inputs: inputs.to_vec(),
            labels: labels.to_vec(),
            z,
            classes,
            relu,
        })
    }

    pub fn samples(&self) -> usize {
        self.labels.len()
    }

    fn logits(&self, p: &ReconParams, batch: &[usize]) -> Vec<f64> {
        let e: Vec<f64> = batch
            .iter()
            .flat_map(|&i| self.inputs[i * self.z..(i + 1) * self.z].iter().copied())
            .collect();
        let mut out = kernels::gemm(&e, &p.r, batch.len(), self.z, self.classes);
        for row in out.chunks_mut(self.classes) {
            for (v, b) in row.iter_mut().zip(&p.r_bias) {
                *v += b;
                if self.relu && *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        out
    }

    /// Mean cross-entropy, and its gradient when `grad` is set.
    pub(crate) fn eval(&self, p: &ReconParams, batch: &[usize], grad: bool) -> Result<(f64, Option<ReconParams>)> {
        if p.r.len() != self.z * self.classes || p.r_bias.len() != self.classes {
            return Err(invalid("classifier parameters do not match the problem"));
        }
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        let c = self.classes;
        let logits = self.logits(p, batch);
        let mut loss = 0.0;
        let mut dl = vec![0.0; logits.len()];
        let inv = 1.0 / batch.len() as f64;
        for (s, &i) in batch.iter().enumerate() {
            let row = &logits[s * c..(s + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let label = self.labels[i] as usize;
            loss += sum.ln() + max - row[label];
            for (j, e) in exps.iter().enumerate() {
                let t = if j == label { 1.0 } else { 0.0 };
                let mut g = (e / sum - t) * inv;
                if self.relu && row[j] <= 0.0 {
                    g = 0.0;
                }
                dl[s * c + j] = g;
            }
        }
        loss *= inv;
        if !grad {
            return Ok((loss, None));
        }
        let e: Vec<f64> = batch
            .iter()
            .flat_map(|&i| self.inputs[i * self.z..(i + 1) * self.z].iter().copied())
            .collect();
        let dr = kernels::gemm_tn_f64(&e, &dl, batch.len(), self.z, c);
        let drb = kernels::col_sums(&dl, batch.len(), c);
        Ok((
            loss,
            Some(ReconParams {
                r: dr,
                r_bias: drb,
                q: Vec::new(),
                q_bias: Vec::new(),
            }),
        ))
    }

    /// Top-1 accuracy of the classifier on every sample.
    pub fn accuracy(&self, p: &ReconParams) -> f64 {
        let all: Vec<usize> = (0..self.samples()).collect();
        let logits = self.logits(p, &all);
        let c = self.classes;
        let correct = logits
            .chunks(c)
            .zip(&self.labels)
            .filter(|(row, &l)| argmax(row) == l as usize)
            .count();
        correct as f64 / self.samples() as f64
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
