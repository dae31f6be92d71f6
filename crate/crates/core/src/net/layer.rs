use crate::error::{invalid, Result};
use crate::linalg::Matrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv2D,
    /// Fully connected; stored as a valid convolution whose kernel covers the
    /// whole input map, so its weight rows are ordered `(y, x, c)`.
    Dense,
    /// k×k factor `Q` of a decomposed layer.
    EmbedConv,
    /// 1×1 factor `R` of a decomposed layer.
    PointwiseConv,
    MaxPool,
    ReLU,
    BatchNorm,
    Softmax,
}

impl LayerKind {
    pub fn is_linear(self) -> bool {
        matches!(
            self,
            LayerKind::Conv2D | LayerKind::Dense | LayerKind::EmbedConv | LayerKind::PointwiseConv
        )
    }
}

/// Any layer that is a matrix product over extracted patches.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub kind: LayerKind,
    pub k: usize,
    pub pad: usize,
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
    /// `(k·k·c_in) × c_out`, row-major.
    pub weight: Vec<f32>,
    pub bias: Option<Vec<f32>>,
    pub relu: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: LayerKind,
        k: usize,
        pad: usize,
        stride: usize,
        c_in: usize,
        c_out: usize,
        weight: Vec<f32>,
        bias: Option<Vec<f32>>,
        relu: bool,
    ) -> Result<Self> {
        if !kind.is_linear() {
            return Err(invalid(format!("{kind:?} is not a linear layer kind")));
        }
        if k == 0 || stride == 0 || c_in == 0 || c_out == 0 {
            return Err(invalid("zero-sized convolution"));
        }
        if weight.len() != k * k * c_in * c_out {
            return Err(invalid(format!(
                "weight length {} != {k}*{k}*{c_in}*{c_out}",
                weight.len()
            )));
        }
        if bias.as_ref().is_some_and(|b| b.len() != c_out) {
            return Err(invalid("bias length differs from output channels"));
        }
        let all_finite = weight.iter().chain(bias.iter().flatten()).all(|v| v.is_finite());
        if !all_finite {
            return Err(invalid("non-finite weights"));
        }
        Ok(Self {
            kind,
            k,
            pad,
            stride,
            c_in,
            c_out,
            weight,
            bias,
            relu,
        })
    }

    /// Stride-1 "same" convolution.
    pub fn same(k: usize, c_in: usize, c_out: usize, weight: Vec<f32>, bias: Option<Vec<f32>>, relu: bool) -> Result<Self> {
        Self::new(LayerKind::Conv2D, k, k / 2, 1, c_in, c_out, weight, bias, relu)
    }

    /// Fully connected layer over a `spatial × spatial × c_in` input.
    pub fn dense(spatial: usize, c_in: usize, c_out: usize, weight: Vec<f32>, bias: Option<Vec<f32>>, relu: bool) -> Result<Self> {
        Self::new(LayerKind::Dense, spatial, 0, 1, c_in, c_out, weight, bias, relu)
    }

    pub fn patch_len(&self) -> usize {
        self.k * self.k * self.c_in
    }

    pub fn weight_matrix(&self) -> Matrix {
        Matrix::from_parts_unchecked(self.patch_len(), self.c_out, self.weight.clone())
    }

    pub fn bias_or_zero(&self) -> Vec<f32> {
        self.bias.clone().unwrap_or_else(|| vec![0.0; self.c_out])
    }

    /// Keep only the listed output channels.
    pub fn select_outputs(&self, keep: &[usize]) -> Conv {
        let w = self.weight_matrix().select_cols(keep);
        Conv {
            c_out: keep.len(),
            weight: w.into_data(),
            bias: self.bias.as_ref().map(|b| keep.iter().map(|&i| b[i]).collect()),
            ..self.clone()
        }
    }

    /// Keep only the listed input channels (every kernel tap).
    pub fn select_inputs(&self, keep: &[usize]) -> Conv {
        let rows: Vec<usize> = (0..self.k * self.k)
            .flat_map(|tap| keep.iter().map(move |&c| tap * self.c_in + c))
            .collect();
        let w = self.weight_matrix().select_rows(&rows);
        Conv {
            c_in: keep.len(),
            weight: w.into_data(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

impl BatchNorm {
    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel `(scale, shift)` so that `bn(x) = scale·x + shift`.
    pub fn affine(&self) -> Vec<(f64, f64)> {
        (0..self.channels())
            .map(|c| {
                let s = self.gamma[c] as f64 / (self.var[c] as f64 + self.eps as f64).sqrt();
                (s, self.beta[c] as f64 - s * self.mean[c] as f64)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerOp {
    Conv(Conv),
    MaxPool { k: usize, stride: usize },
    Relu,
    BatchNorm(BatchNorm),
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub op: LayerOp,
}

impl Layer {
    pub fn new(name: impl Into<String>, op: LayerOp) -> Self {
        Self {
            name: name.into(),
            op,
        }
    }

    pub fn conv(name: impl Into<String>, conv: Conv) -> Self {
        Self::new(name, LayerOp::Conv(conv))
    }

    pub fn kind(&self) -> LayerKind {
        match &self.op {
            LayerOp::Conv(c) => c.kind,
            LayerOp::MaxPool { .. } => LayerKind::MaxPool,
            LayerOp::Relu => LayerKind::ReLU,
            LayerOp::BatchNorm(_) => LayerKind::BatchNorm,
            LayerOp::Softmax => LayerKind::Softmax,
        }
    }

    pub fn as_conv(&self) -> Option<&Conv> {
        match &self.op {
            LayerOp::Conv(c) => Some(c),
            _ => None,
        }
    }

    pub fn as_conv_mut(&mut self) -> Option<&mut Conv> {
        match &mut self.op {
            LayerOp::Conv(c) => Some(c),
            _ => None,
        }
    }
}
