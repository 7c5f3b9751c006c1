use crate::diff::Tensor;

/// Layer kinds; `code` values double as node-feature entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Input,
    Conv2d,
    Linear,
    BatchNorm,
    Pool,
    Add,
    Flatten,
    Output,
}

impl LayerKind {
    pub fn code(self) -> u8 {
        match self {
            LayerKind::Input => 0,
            LayerKind::Conv2d => 1,
            LayerKind::Linear => 2,
            LayerKind::BatchNorm => 3,
            LayerKind::Pool => 4,
            LayerKind::Add => 5,
            LayerKind::Flatten => 6,
            LayerKind::Output => 7,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Conv2d => "conv2d",
            LayerKind::Linear => "linear",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Pool => "pool",
            LayerKind::Add => "add",
            LayerKind::Flatten => "flatten",
            LayerKind::Output => "output",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "input" => LayerKind::Input,
            "conv2d" => LayerKind::Conv2d,
            "linear" => LayerKind::Linear,
            "batchnorm" => LayerKind::BatchNorm,
            "pool" => LayerKind::Pool,
            "add" => LayerKind::Add,
            "flatten" => LayerKind::Flatten,
            "output" => LayerKind::Output,
            _ => return None,
        })
    }

    /// Layers whose output lives on a `[B,C,H,W]` grid.
    pub fn is_spatial(self) -> bool {
        matches!(
            self,
            LayerKind::Input
                | LayerKind::Conv2d
                | LayerKind::BatchNorm
                | LayerKind::Pool
                | LayerKind::Add
        )
    }

    /// Layers that produce their own output channels (union-find atoms).
    pub fn produces_channels(self) -> bool {
        matches!(self, LayerKind::Input | LayerKind::Conv2d | LayerKind::Linear)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EdgeKind {
    Regular,
    Skip,
    Residual,
}

impl EdgeKind {
    pub fn name(self) -> &'static str {
        match self {
            EdgeKind::Regular => "regular",
            EdgeKind::Skip => "skip",
            EdgeKind::Residual => "residual",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "regular" => EdgeKind::Regular,
            "skip" => EdgeKind::Skip,
            "residual" => EdgeKind::Residual,
            _ => return None,
        })
    }

    pub fn one_hot(self) -> [f32; 3] {
        match self {
            EdgeKind::Regular => [1.0, 0.0, 0.0],
            EdgeKind::Skip => [0.0, 1.0, 0.0],
            EdgeKind::Residual => [0.0, 0.0, 1.0],
        }
    }
}

/// Pointwise nonlinearity applied after a layer's main transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Nonlinearity {
    #[default]
    None,
    Relu,
}

/// One layer of a [`super::NetworkSpec`].
///
/// Semantics per kind:
/// - `Conv2d`: `weights [out,in,kh,kw]`, optional `bias [out]`.
/// - `Linear`: `weights [out,in]`, `in_channels` counts input features.
/// - `BatchNorm`: `weights`/`bias` hold gamma/beta, plus running mean/var;
///   applied as a per-channel affine using the stored statistics.
/// - `Pool`: max pooling with `kernel`/`stride`, no padding.
/// - `Add`: elementwise sum of its two providers.
/// - `Flatten`: `[B,C,H,W] -> [B, C*H*W]` in channel-major order.
#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub id: usize,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub activation: Nonlinearity,
    pub prunable: bool,
    pub weights: Option<Tensor<f32>>,
    pub bias: Option<Tensor<f32>>,
    pub bn_mean: Option<Tensor<f32>>,
    pub bn_var: Option<Tensor<f32>>,
}

impl LayerSpec {
    pub fn new(id: usize, kind: LayerKind, in_channels: usize, out_channels: usize) -> Self {
        Self {
            id,
            kind,
            in_channels,
            out_channels,
            kernel: (0, 0),
            stride: (1, 1),
            padding: (0, 0),
            activation: Nonlinearity::None,
            prunable: false,
            weights: None,
            bias: None,
            bn_mean: None,
            bn_var: None,
        }
    }

    pub fn with_kernel(mut self, kh: usize, kw: usize) -> Self {
        self.kernel = (kh, kw);
        self
    }

    pub fn with_stride(mut self, sh: usize, sw: usize) -> Self {
        self.stride = (sh, sw);
        self
    }

    pub fn with_padding(mut self, ph: usize, pw: usize) -> Self {
        self.padding = (ph, pw);
        self
    }

    pub fn with_activation(mut self, a: Nonlinearity) -> Self {
        self.activation = a;
        self
    }

    pub fn prunable(mut self, p: bool) -> Self {
        self.prunable = p;
        self
    }
}
