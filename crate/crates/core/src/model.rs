//! The full video transformer: linear patch embedding, a stack of encoders
//! (attention, temporal shift, MLP, each with a residual) and a per-frame
//! classifier averaged over time.
//!
//! Forward and backward passes are written out by hand. The backward entry
//! points recompute the forward activations they need.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{
    attention_backward, attention_forward_tracked, AttentionMode, HeadWeights, MultiHeadWeights,
};
use crate::complexity::{MacSink, OpKind};
use crate::error::{shape_err, Error, Result};
use crate::pairing::{level_for_layer, PyramidCycle};
use crate::shift::{apply_shift, shift_backward, ShiftMode, ShiftSpec};
use crate::tensor::{
    gelu_derivative, gelu_scalar, matmul, matmul_tracked, row_stats, seeded_normal,
    transpose_last2, Seed, Tensor,
};

/// Epsilon used by every layer norm in the model.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Standard deviation of weight initialization in [`ModelParams::init`].
pub const INIT_STD: f64 = 0.02;

/// Attention layout selected for every encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum AttentionKind {
    /// Per-frame attention.
    #[cfg_attr(feature = "serde", serde(rename = "2d"))]
    Spatial2D,
    /// Joint attention over the whole clip.
    #[cfg_attr(feature = "serde", serde(rename = "3d"))]
    Joint3D,
    /// Paired-frame attention with the pyramid cycle.
    #[cfg_attr(feature = "serde", serde(rename = "leap"))]
    Leap,
}

impl AttentionKind {
    /// Short name used in reports and on the command line.
    pub fn label(self) -> &'static str {
        match self {
            AttentionKind::Spatial2D => "2d",
            AttentionKind::Joint3D => "3d",
            AttentionKind::Leap => "leap",
        }
    }
}

/// Temporal shift applied after attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ShiftKind {
    /// No shift.
    None,
    /// Whole-channel shift.
    Plain,
    /// Per-head shift.
    Periodic,
}

#[cfg(feature = "serde")]
mod defaults {
    pub fn mlp_ratio() -> usize {
        4
    }
    pub fn yes() -> bool {
        true
    }
    pub fn fraction() -> [u32; 2] {
        [1, 8]
    }
    pub fn attention() -> super::AttentionKind {
        super::AttentionKind::Leap
    }
    pub fn shift() -> super::ShiftKind {
        super::ShiftKind::Periodic
    }
}

/// Model hyper-parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ModelConfig {
    /// Clip length `T` (even).
    pub frames: usize,
    /// Frame height `H`.
    pub height: usize,
    /// Frame width `W`.
    pub width: usize,
    /// Patch side `P`; divides `H` and `W`.
    pub patch: usize,
    /// Model width `D`.
    pub model_dim: usize,
    /// Head count `m`; divides `D`.
    pub heads: usize,
    /// Encoder count `L`.
    pub depth: usize,
    /// MLP hidden width as a multiple of `D`.
    #[cfg_attr(feature = "serde", serde(default = "defaults::mlp_ratio"))]
    pub mlp_ratio: usize,
    /// Attention layout.
    #[cfg_attr(feature = "serde", serde(default = "defaults::attention"))]
    pub attention: AttentionKind,
    /// Temporal shift after attention.
    #[cfg_attr(feature = "serde", serde(default = "defaults::shift"))]
    pub shift: ShiftKind,
    /// Shift fraction as `[numerator, denominator]`.
    #[cfg_attr(feature = "serde", serde(default = "defaults::fraction"))]
    pub shift_fraction: [u32; 2],
    /// Pyramid levels cycled across depth (leap attention only).
    #[cfg_attr(feature = "serde", serde(default))]
    pub pyramid_cycle: PyramidCycle,
    /// Layer norm before attention and MLP.
    #[cfg_attr(feature = "serde", serde(default = "defaults::yes"))]
    pub pre_norm: bool,
    /// `D × D` projection (with bias) after the shift.
    #[cfg_attr(feature = "serde", serde(default))]
    pub output_projection: bool,
    /// Learned `N × D` table added to every frame's embedding.
    #[cfg_attr(feature = "serde", serde(default = "defaults::yes"))]
    pub positional_embedding: bool,
    /// Number of output classes.
    pub num_classes: usize,
}

impl ModelConfig {
    /// The small configuration used throughout the test suites:
    /// `T=4, H=W=8, P=4, D=8, m=2, L=2`, three classes, pyramid cycle `[1, 2]`.
    /// The shift fraction is 1/4 because 1/8 of a 4-channel head rounds to
    /// nothing.
    pub fn tiny() -> Self {
        Self {
            frames: 4,
            height: 8,
            width: 8,
            patch: 4,
            model_dim: 8,
            heads: 2,
            depth: 2,
            mlp_ratio: 4,
            attention: AttentionKind::Leap,
            shift: ShiftKind::Periodic,
            shift_fraction: [1, 4],
            pyramid_cycle: PyramidCycle { levels: vec![1, 2] },
            pre_norm: true,
            output_projection: false,
            positional_embedding: true,
            num_classes: 3,
        }
    }

    /// Checks every structural constraint.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
            ("patch", self.patch),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.frames % 2 != 0 {
            return Err(Error::Config(format!(
                "frames must be even, got {}",
                self.frames
            )));
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::Config(format!(
                "patch {} must divide {}x{}",
                self.patch, self.height, self.width
            )));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide model_dim {}",
                self.heads, self.model_dim
            )));
        }
        if self.attention == AttentionKind::Leap {
            self.pyramid_cycle.validate(self.frames)?;
        }
        if let Some(spec) = self.shift_spec() {
            spec.validate()?;
        }
        Ok(())
    }

    /// Tokens per frame `N = H·W/P²`.
    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// Values per patch `d = 3·P²`.
    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    /// Head width `z = D/m`.
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// MLP hidden width.
    pub fn hidden_dim(&self) -> usize {
        self.mlp_ratio * self.model_dim
    }

    /// Attention mode of encoder `layer`.
    pub fn mode_for_layer(&self, layer: usize) -> AttentionMode {
        match self.attention {
            AttentionKind::Spatial2D => AttentionMode::Spatial2D,
            AttentionKind::Joint3D => AttentionMode::Joint3D,
            AttentionKind::Leap => AttentionMode::Leap(level_for_layer(layer, &self.pyramid_cycle)),
        }
    }

    /// Shift applied after attention, if any.
    pub fn shift_spec(&self) -> Option<ShiftSpec> {
        let mode = match self.shift {
            ShiftKind::None => return None,
            ShiftKind::Plain => ShiftMode::Plain,
            ShiftKind::Periodic => ShiftMode::Periodic,
        };
        Some(
            ShiftSpec::new(mode, self.heads, self.head_dim())
                .with_fraction(self.shift_fraction[0], self.shift_fraction[1]),
        )
    }

    /// Expected input shape `[T, H, W, 3]`.
    pub fn video_shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, 3]
    }
}

/// Dense layer with weight `[in, out]` and bias `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// Weight matrix.
    pub weight: Tensor,
    /// Bias row.
    pub bias: Tensor,
}

impl Linear {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[inputs, outputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    fn forward(&self, x: &Tensor, kind: OpKind, sink: &mut dyn MacSink) -> Result<Tensor> {
        matmul_tracked(x, &self.weight, kind, sink)?.add_row(&self.bias)
    }

    /// Returns `(grad_x, grad_layer)`.
    fn backward(&self, x: &Tensor, upstream: &Tensor) -> Result<(Tensor, Linear)> {
        let (inputs, outputs) = (self.weight.shape()[0], self.weight.shape()[1]);
        let rows = x.numel() / inputs;
        let x_flat = x.reshape(&[rows, inputs])?;
        let up_flat = upstream.reshape(&[rows, outputs])?;
        let weight = matmul(&transpose_last2(&x_flat)?, &up_flat)?;
        let bias = column_sums(&up_flat)?;
        let grad_x = matmul(upstream, &transpose_last2(&self.weight)?)?;
        Ok((grad_x, Linear { weight, bias }))
    }
}

/// Layer norm scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    /// Scale.
    pub gamma: Tensor,
    /// Shift.
    pub beta: Tensor,
}

impl Norm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        crate::tensor::layer_norm(x, &self.gamma, &self.beta, LAYER_NORM_EPS)
    }

    fn backward(&self, x: &Tensor, upstream: &Tensor) -> Result<(Tensor, Norm)> {
        let (dx, gamma, beta) = layer_norm_backward(x, &self.gamma, LAYER_NORM_EPS, upstream)?;
        Ok((dx, Norm { gamma, beta }))
    }
}

/// Backward pass of [`crate::tensor::layer_norm`]; returns
/// `(grad_x, grad_gamma, grad_beta)`.
pub fn layer_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    eps: f64,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let width = gamma.numel();
    if x.shape() != upstream.shape() || *x.shape().last().unwrap() != width {
        return Err(shape_err(
            "layer_norm_backward",
            x.shape(),
            upstream.shape(),
        ));
    }
    let mut dx = Vec::with_capacity(x.numel());
    let mut d_gamma = vec![0.0; width];
    let mut d_beta = vec![0.0; width];
    let mut xhat = vec![0.0; width];
    let mut dxhat = vec![0.0; width];
    for (row, up) in x.data().chunks(width).zip(upstream.data().chunks(width)) {
        let (mean, inv_std) = row_stats(row, eps);
        for c in 0..width {
            xhat[c] = (row[c] - mean) * inv_std;
            dxhat[c] = up[c] * gamma.data()[c];
            d_gamma[c] += up[c] * xhat[c];
            d_beta[c] += up[c];
        }
        let n = width as f64;
        let mean_d = dxhat.iter().sum::<f64>() / n;
        let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
        dx.extend((0..width).map(|c| inv_std * (dxhat[c] - mean_d - xhat[c] * mean_dx)));
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(vec![width], d_gamma)?,
        Tensor::new(vec![width], d_beta)?,
    ))
}

fn column_sums(x: &Tensor) -> Result<Tensor> {
    let width = *x.shape().last().unwrap();
    let mut sums = vec![0.0; width];
    for row in x.data().chunks(width) {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    Tensor::new(vec![width], sums)
}

/// Parameters of one encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// Norm before attention (`pre_norm` only).
    pub norm1: Option<Norm>,
    /// Per-head projections.
    pub attn: MultiHeadWeights,
    /// Projection after the shift (`output_projection` only).
    pub out_proj: Option<Linear>,
    /// Norm before the MLP (`pre_norm` only).
    pub norm2: Option<Norm>,
    /// First MLP layer, `D → ratio·D`.
    pub fc1: Linear,
    /// Second MLP layer, `ratio·D → D`.
    pub fc2: Linear,
}

impl LayerParams {
    /// Visits every tensor as `prefix + name`, in archive order.
    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        let mut emit = |name: &str, t: &Tensor| f(&format!("{prefix}{name}"), t);
        if let Some(n) = &self.norm1 {
            emit("norm1.gamma", &n.gamma);
            emit("norm1.beta", &n.beta);
        }
        for (i, h) in self.attn.heads().iter().enumerate() {
            emit(&format!("attn.head{i}.w_q"), &h.w_q);
            emit(&format!("attn.head{i}.w_k"), &h.w_k);
            emit(&format!("attn.head{i}.w_v"), &h.w_v);
        }
        if let Some(o) = &self.out_proj {
            emit("attn.proj.weight", &o.weight);
            emit("attn.proj.bias", &o.bias);
        }
        if let Some(n) = &self.norm2 {
            emit("norm2.gamma", &n.gamma);
            emit("norm2.beta", &n.beta);
        }
        emit("mlp.fc1.weight", &self.fc1.weight);
        emit("mlp.fc1.bias", &self.fc1.bias);
        emit("mlp.fc2.weight", &self.fc2.weight);
        emit("mlp.fc2.bias", &self.fc2.bias);
    }

    /// Mutable counterpart of [`LayerParams::visit`].
    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let mut emit = |name: &str, t: &mut Tensor| f(&format!("{prefix}{name}"), t);
        if let Some(n) = &mut self.norm1 {
            emit("norm1.gamma", &mut n.gamma);
            emit("norm1.beta", &mut n.beta);
        }
        for (i, h) in self.attn.heads_mut().iter_mut().enumerate() {
            emit(&format!("attn.head{i}.w_q"), &mut h.w_q);
            emit(&format!("attn.head{i}.w_k"), &mut h.w_k);
            emit(&format!("attn.head{i}.w_v"), &mut h.w_v);
        }
        if let Some(o) = &mut self.out_proj {
            emit("attn.proj.weight", &mut o.weight);
            emit("attn.proj.bias", &mut o.bias);
        }
        if let Some(n) = &mut self.norm2 {
            emit("norm2.gamma", &mut n.gamma);
            emit("norm2.beta", &mut n.beta);
        }
        emit("mlp.fc1.weight", &mut self.fc1.weight);
        emit("mlp.fc1.bias", &mut self.fc1.bias);
        emit("mlp.fc2.weight", &mut self.fc2.weight);
        emit("mlp.fc2.bias", &mut self.fc2.bias);
    }
}

/// Every learnable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Patch projection, `d → D`.
    pub embed: Linear,
    /// Spatial positional table `[N, D]`.
    pub pos_embed: Option<Tensor>,
    /// Encoders in depth order.
    pub layers: Vec<LayerParams>,
    /// Classifier, `D → classes`.
    pub head: Linear,
}

impl ModelParams {
    /// Parameters with every tensor zero (norm scales included).
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let z = config.head_dim();
        let norm = || {
            config.pre_norm.then(|| Norm {
                gamma: Tensor::zeros(&[d]),
                beta: Tensor::zeros(&[d]),
            })
        };
        let layers = (0..config.depth)
            .map(|_| {
                Ok(LayerParams {
                    norm1: norm(),
                    attn: MultiHeadWeights::new(
                        (0..config.heads).map(|_| HeadWeights::zeros(z)).collect(),
                    )?,
                    out_proj: config.output_projection.then(|| Linear::zeros(d, d)),
                    norm2: norm(),
                    fc1: Linear::zeros(d, config.hidden_dim()),
                    fc2: Linear::zeros(config.hidden_dim(), d),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embed: Linear::zeros(config.patch_dim(), d),
            pos_embed: config
                .positional_embedding
                .then(|| Tensor::zeros(&[config.tokens(), d])),
            layers,
            head: Linear::zeros(d, config.num_classes),
        })
    }

    /// Conventional initialization: weights and positional table normal with
    /// std [`INIT_STD`], biases zero, norms identity.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut index = 0u64;
        params.visit_mut(&mut |name, t| {
            index += 1;
            if name.ends_with(".gamma") {
                *t = Tensor::full(t.shape(), 1.0);
            } else if !(name.ends_with(".bias") || name.ends_with(".beta")) {
                *t = seeded_normal(t.shape(), Seed(mix(seed, index)), INIT_STD)
                    .expect("positive extents");
            }
        });
        Ok(params)
    }

    /// Every tensor drawn from a normal with the given std, norm scales
    /// centred on one. Used by gradient and equivalence tests so that biases
    /// and norms are exercised.
    pub fn random(config: &ModelConfig, seed: u64, std: f64) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut index = 0u64;
        let mut failure = None;
        params.visit_mut(&mut |name, t| {
            index += 1;
            match seeded_normal(t.shape(), Seed(mix(seed, index)), std) {
                Ok(r) if name.ends_with(".gamma") => *t = r.map(|v| 1.0 + v),
                Ok(r) => *t = r,
                Err(e) => failure = Some(e),
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(params),
        }
    }

    /// Visits every tensor with its archive name, in a fixed order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("embed.weight", &self.embed.weight);
        f("embed.bias", &self.embed.bias);
        if let Some(pos) = &self.pos_embed {
            f("pos_embed", pos);
        }
        for (l, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("layers.{l}."), f);
        }
        f("head.weight", &self.head.weight);
        f("head.bias", &self.head.bias);
    }

    /// Mutable counterpart of [`ModelParams::visit`], same order and names.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("embed.weight", &mut self.embed.weight);
        f("embed.bias", &mut self.embed.bias);
        if let Some(pos) = &mut self.pos_embed {
            f("pos_embed", pos);
        }
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("layers.{l}."), f);
        }
        f("head.weight", &mut self.head.weight);
        f("head.bias", &mut self.head.bias);
    }

    /// `(name, tensor)` pairs in visiting order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    /// Rebuilds parameters for `config` from named tensors. Every expected
    /// name must be present with the expected shape, and no others.
    pub fn from_named(config: &ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut by_name: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, t) in tensors {
            if by_name.insert(name.clone(), t).is_some() {
                return Err(Error::Config(format!("duplicate tensor {name}")));
            }
        }
        let mut failure = None;
        params.visit_mut(&mut |name, slot| {
            if failure.is_some() {
                return;
            }
            match by_name.remove(name) {
                Some(t) if t.shape() == slot.shape() => *slot = t,
                Some(t) => failure = Some(shape_err("from_named", t.shape(), slot.shape())),
                None => failure = Some(Error::Config(format!("missing tensor {name}"))),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Config(format!("unexpected tensor {extra}")));
        }
        Ok(params)
    }

    /// Number of scalar parameters.
    pub fn count(&self) -> u64 {
        let mut total = 0u64;
        self.visit(&mut |_, t| total += t.numel() as u64);
        total
    }
}

fn mix(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Total parameter count implied by `config`.
pub fn count_params(config: &ModelConfig) -> Result<u64> {
    Ok(ModelParams::zeros(config)?.count())
}

/// Standard-normal clip of the configured shape.
pub fn random_video(config: &ModelConfig, seed: u64) -> Result<Tensor> {
    seeded_normal(&config.video_shape(), Seed(seed), 1.0)
}

/// Per-frame and clip-level class scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    /// `[T, classes]`.
    pub per_frame: Tensor,
    /// `[classes]`, the temporal mean of `per_frame`.
    pub clip: Tensor,
}

/// Cuts `[T, H, W, 3]` into `[T, N, 3·P²]` non-overlapping patches. Patches
/// are numbered row-major over the patch grid; each flattens as
/// `(row, column, channel)`.
pub fn patchify(video: &Tensor, config: &ModelConfig) -> Result<Tensor> {
    if video.shape() != config.video_shape() {
        return Err(shape_err("patchify", video.shape(), &config.video_shape()));
    }
    let (t, h, w, p) = (config.frames, config.height, config.width, config.patch);
    let (rows, cols) = (h / p, w / p);
    let mut data = Vec::with_capacity(video.numel());
    let src = video.data();
    for f in 0..t {
        for pr in 0..rows {
            for pc in 0..cols {
                for y in 0..p {
                    let start = ((f * h + pr * p + y) * w + pc * p) * 3;
                    data.extend_from_slice(&src[start..start + p * 3]);
                }
            }
        }
    }
    Tensor::new(vec![t, rows * cols, config.patch_dim()], data)
}

fn embed_tracked(
    video: &Tensor,
    params: &ModelParams,
    config: &ModelConfig,
    sink: &mut dyn MacSink,
) -> Result<(Tensor, Tensor)> {
    let patches = patchify(video, config)?;
    let mut x = params.embed.forward(&patches, OpKind::Embedding, sink)?;
    if let Some(pos) = &params.pos_embed {
        let per_frame = pos.numel();
        for frame in x.data_mut().chunks_mut(per_frame) {
            for (v, p) in frame.iter_mut().zip(pos.data()) {
                *v += p;
            }
        }
    }
    Ok((patches, x))
}

/// Linear patch embedding `[T, H, W, 3] → [T, N, D]`, plus the positional
/// table when enabled.
pub fn patch_embed(video: &Tensor, params: &ModelParams, config: &ModelConfig) -> Result<Tensor> {
    Ok(embed_tracked(video, params, config, &mut ())?.1)
}

/// Two-layer MLP with exact GELU between the layers.
pub fn mlp_forward(x: &Tensor, fc1: &Linear, fc2: &Linear) -> Result<Tensor> {
    mlp_tracked(x, fc1, fc2, &mut ())
}

fn mlp_tracked(x: &Tensor, fc1: &Linear, fc2: &Linear, sink: &mut dyn MacSink) -> Result<Tensor> {
    let hidden = fc1.forward(x, OpKind::Mlp, sink)?.map(gelu_scalar);
    fc2.forward(&hidden, OpKind::Mlp, sink)
}

/// Gradients of the MLP: `(grad_x, grad_fc1, grad_fc2)`.
pub fn mlp_backward(
    x: &Tensor,
    fc1: &Linear,
    fc2: &Linear,
    upstream: &Tensor,
) -> Result<(Tensor, Linear, Linear)> {
    let pre = fc1.forward(x, OpKind::Untracked, &mut ())?;
    let hidden = pre.map(gelu_scalar);
    let (d_hidden, g2) = fc2.backward(&hidden, upstream)?;
    let d_pre = d_hidden.zip_with(&pre, |g, u| g * gelu_derivative(u))?;
    let (dx, g1) = fc1.backward(x, &d_pre)?;
    Ok((dx, g1, g2))
}

/// Activations of one encoder kept for the backward pass.
struct EncoderTape {
    normed: Tensor,
    shifted: Tensor,
    mid: Tensor,
    normed2: Tensor,
    out: Tensor,
}

fn encoder_tape(
    x: &Tensor,
    layer: &LayerParams,
    layer_index: usize,
    config: &ModelConfig,
    sink: &mut dyn MacSink,
) -> Result<EncoderTape> {
    let normed = match &layer.norm1 {
        Some(n) => n.forward(x)?,
        None => x.clone(),
    };
    let attended = attention_forward_tracked(
        &normed,
        &layer.attn,
        config.mode_for_layer(layer_index),
        sink,
    )?;
    let shifted = match config.shift_spec() {
        Some(spec) => apply_shift(&attended, &spec)?,
        None => attended.clone(),
    };
    let branch = match &layer.out_proj {
        Some(o) => o.forward(&shifted, OpKind::OutputProjection, sink)?,
        None => shifted.clone(),
    };
    let mid = branch.add(x)?;
    let normed2 = match &layer.norm2 {
        Some(n) => n.forward(&mid)?,
        None => mid.clone(),
    };
    let out = mlp_tracked(&normed2, &layer.fc1, &layer.fc2, sink)?.add(&mid)?;
    Ok(EncoderTape {
        normed,
        shifted,
        mid,
        normed2,
        out,
    })
}

/// One encoder: `x + Shift(Attn(Norm(x)))`, then `+ MLP(Norm(·))`.
pub fn encoder_forward(
    x: &Tensor,
    layer: &LayerParams,
    layer_index: usize,
    config: &ModelConfig,
) -> Result<Tensor> {
    Ok(encoder_tape(x, layer, layer_index, config, &mut ())?.out)
}

/// Backward pass of [`encoder_forward`]: `(grad_x, grad_layer)`.
pub fn encoder_backward(
    x: &Tensor,
    layer: &LayerParams,
    layer_index: usize,
    config: &ModelConfig,
    upstream: &Tensor,
) -> Result<(Tensor, LayerParams)> {
    let tape = encoder_tape(x, layer, layer_index, config, &mut ())?;

    let (d_normed2, fc1, fc2) = mlp_backward(&tape.normed2, &layer.fc1, &layer.fc2, upstream)?;
    let (d_mid_norm, norm2) = match &layer.norm2 {
        Some(n) => {
            let (d, g) = n.backward(&tape.mid, &d_normed2)?;
            (d, Some(g))
        }
        None => (d_normed2, None),
    };
    let d_mid = upstream.add(&d_mid_norm)?;

    let (d_shifted, out_proj) = match &layer.out_proj {
        Some(o) => {
            let (d, g) = o.backward(&tape.shifted, &d_mid)?;
            (d, Some(g))
        }
        None => (d_mid.clone(), None),
    };
    let d_attended = match config.shift_spec() {
        Some(spec) => shift_backward(&d_shifted, &spec)?,
        None => d_shifted,
    };
    let attn = attention_backward(
        &tape.normed,
        &layer.attn,
        config.mode_for_layer(layer_index),
        &d_attended,
    )?;
    let (d_x_norm, norm1) = match &layer.norm1 {
        Some(n) => {
            let (d, g) = n.backward(x, &attn.x)?;
            (d, Some(g))
        }
        None => (attn.x, None),
    };
    let grad_x = d_mid.add(&d_x_norm)?;
    Ok((
        grad_x,
        LayerParams {
            norm1,
            attn: attn.weights,
            out_proj,
            norm2,
            fc1,
            fc2,
        },
    ))
}

fn spatial_mean(x: &Tensor) -> Result<Tensor> {
    let (t, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut pooled = vec![0.0; t * d];
    for (f, frame) in x.data().chunks(n * d).enumerate() {
        for token in frame.chunks(d) {
            for (p, v) in pooled[f * d..(f + 1) * d].iter_mut().zip(token) {
                *p += v;
            }
        }
    }
    for p in &mut pooled {
        *p /= n as f64;
    }
    Tensor::new(vec![t, d], pooled)
}

fn predict_tracked(x: &Tensor, head: &Linear, sink: &mut dyn MacSink) -> Result<(Tensor, Logits)> {
    if x.rank() != 3 || x.shape()[2] != head.weight.shape()[0] {
        return Err(shape_err("predict", x.shape(), head.weight.shape()));
    }
    let pooled = spatial_mean(x)?;
    let per_frame = head.forward(&pooled, OpKind::Classifier, sink)?;
    let frames = x.shape()[0] as f64;
    let clip = column_sums(&per_frame)?.scale(1.0 / frames);
    Ok((pooled, Logits { per_frame, clip }))
}

/// Spatial mean over tokens, per-frame classifier, temporal mean.
pub fn predict(x: &Tensor, head: &Linear) -> Result<Logits> {
    Ok(predict_tracked(x, head, &mut ())?.1)
}

/// Shapes observed at each stage of a forward pass.
pub type ShapeTrace = Vec<(String, Vec<usize>)>;

/// Full forward pass.
pub fn model_forward(video: &Tensor, params: &ModelParams, config: &ModelConfig) -> Result<Logits> {
    model_forward_tracked(video, params, config, &mut (), None)
}

/// [`model_forward`] reporting MACs to `sink` and, optionally, recording the
/// shape of every stage.
pub fn model_forward_tracked(
    video: &Tensor,
    params: &ModelParams,
    config: &ModelConfig,
    sink: &mut dyn MacSink,
    mut trace: Option<&mut ShapeTrace>,
) -> Result<Logits> {
    config.validate()?;
    check_params(params, config)?;
    let mut note = |stage: String, shape: &[usize]| {
        if let Some(t) = trace.as_deref_mut() {
            t.push((stage, shape.to_vec()));
        }
    };
    note("video".into(), video.shape());
    let (patches, mut x) = embed_tracked(video, params, config, sink)?;
    note("patches".into(), patches.shape());
    note("embedding".into(), x.shape());
    for (l, layer) in params.layers.iter().enumerate() {
        x = encoder_tape(&x, layer, l, config, sink)?.out;
        note(format!("encoder.{l}"), x.shape());
    }
    let (pooled, logits) = predict_tracked(&x, &params.head, sink)?;
    note("pooled".into(), pooled.shape());
    note("per_frame".into(), logits.per_frame.shape());
    note("clip".into(), logits.clip.shape());
    Ok(logits)
}

fn check_params(params: &ModelParams, config: &ModelConfig) -> Result<()> {
    let expected = ModelParams::zeros(config)?;
    let mut shapes = Vec::new();
    expected.visit(&mut |name, t| shapes.push((name.to_string(), t.shape().to_vec())));
    let mut actual = Vec::new();
    params.visit(&mut |name, t| actual.push((name.to_string(), t.shape().to_vec())));
    if shapes != actual {
        return Err(Error::Config(
            "parameters do not match the model config".into(),
        ));
    }
    Ok(())
}

/// Gradient of `Σ_k clip_upstream[k] · clip[k]` with respect to every
/// parameter, via a full backward pass.
pub fn model_backward(
    video: &Tensor,
    params: &ModelParams,
    config: &ModelConfig,
    clip_upstream: &Tensor,
) -> Result<ModelParams> {
    config.validate()?;
    check_params(params, config)?;
    if clip_upstream.numel() != config.num_classes {
        return Err(shape_err(
            "model_backward",
            clip_upstream.shape(),
            &[config.num_classes],
        ));
    }
    let (patches, x0) = embed_tracked(video, params, config, &mut ())?;
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut x = x0;
    for (l, layer) in params.layers.iter().enumerate() {
        let next = encoder_forward(&x, layer, l, config)?;
        inputs.push(x);
        x = next;
    }

    let (t, n, d) = (config.frames, config.tokens(), config.model_dim);
    let pooled = spatial_mean(&x)?;
    let d_per_frame = Tensor::from_fn(&[t, config.num_classes], |i| {
        clip_upstream.data()[i % config.num_classes] / t as f64
    });
    let (d_pooled, head) = params.head.backward(&pooled, &d_per_frame)?;
    let mut dx = Tensor::from_fn(&[t, n, d], |i| {
        let frame = i / (n * d);
        d_pooled.data()[frame * d + i % d] / n as f64
    });

    let mut layer_grads = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate().rev() {
        let (d_in, g) = encoder_backward(&inputs[l], layer, l, config, &dx)?;
        layer_grads.push(g);
        dx = d_in;
    }
    layer_grads.reverse();

    let (_, embed) = params.embed.backward(&patches, &dx)?;
    let pos_embed = match &params.pos_embed {
        Some(_) => {
            let mut acc = vec![0.0; n * d];
            for frame in dx.data().chunks(n * d) {
                for (a, v) in acc.iter_mut().zip(frame) {
                    *a += v;
                }
            }
            Some(Tensor::new(vec![n, d], acc)?)
        }
        None => None,
    };
    Ok(ModelParams {
        embed,
        pos_embed,
        layers: layer_grads,
        head,
    })
}
