//! Multi-head scaled dot-product attention in per-frame, joint and paired
//! layouts, with the matching backward pass.
//!
//! Every head projects its own `z` channels with `z × z` matrices (no bias),
//! attends inside each token group, and writes back into the same channels.
//! Heads are concatenated in order with no output projection.

use alloc::format;
use alloc::vec::Vec;

use crate::complexity::{MacSink, OpKind};
use crate::error::{shape_err, Error, Result};
use crate::pairing::{apply_plan, plan_for_level, restore_plan, PairingPlan};
use crate::tensor::{matmul, matmul_tracked, softmax_last, transpose_last2, Seed, Tensor};

/// Query, key and value projections for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    /// Query projection, `z × z`.
    pub w_q: Tensor,
    /// Key projection, `z × z`.
    pub w_k: Tensor,
    /// Value projection, `z × z`.
    pub w_v: Tensor,
}

impl HeadWeights {
    /// Builds a head, checking all three matrices are `z × z`.
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor) -> Result<Self> {
        let z = w_q.shape().first().copied().unwrap_or(0);
        for w in [&w_q, &w_k, &w_v] {
            if w.shape() != [z, z] {
                return Err(shape_err("head weights", w.shape(), &[z, z]));
            }
        }
        Ok(Self { w_q, w_k, w_v })
    }

    /// Identity projections.
    pub fn identity(z: usize) -> Self {
        Self {
            w_q: Tensor::eye(z),
            w_k: Tensor::eye(z),
            w_v: Tensor::eye(z),
        }
    }

    /// All-zero projections.
    pub fn zeros(z: usize) -> Self {
        Self {
            w_q: Tensor::zeros(&[z, z]),
            w_k: Tensor::zeros(&[z, z]),
            w_v: Tensor::zeros(&[z, z]),
        }
    }

    /// Head dimension `z`.
    pub fn dim(&self) -> usize {
        self.w_q.shape()[0]
    }
}

/// Per-head weights for `m` heads of width `z` (`D = m·z`).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadWeights {
    heads: Vec<HeadWeights>,
    head_dim: usize,
}

impl MultiHeadWeights {
    /// Builds from a non-empty list of equally sized heads.
    pub fn new(heads: Vec<HeadWeights>) -> Result<Self> {
        let head_dim = heads
            .first()
            .ok_or_else(|| Error::Config("at least one head is required".into()))?
            .dim();
        if heads.iter().any(|h| h.dim() != head_dim) {
            return Err(Error::Config("heads must share one head dimension".into()));
        }
        Ok(Self { heads, head_dim })
    }

    /// Normal-initialized heads.
    pub fn random(heads: usize, head_dim: usize, seed: Seed, std: f64) -> Result<Self> {
        let shape = [head_dim, head_dim];
        let list = (0..heads as u64)
            .map(|h| {
                let base = seed.0.wrapping_mul(0x9E37_79B9).wrapping_add(h * 3);
                Ok(HeadWeights {
                    w_q: crate::tensor::seeded_normal(&shape, Seed(base), std)?,
                    w_k: crate::tensor::seeded_normal(&shape, Seed(base + 1), std)?,
                    w_v: crate::tensor::seeded_normal(&shape, Seed(base + 2), std)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(list)
    }

    /// Head list.
    pub fn heads(&self) -> &[HeadWeights] {
        &self.heads
    }

    /// Mutable head list. Replacing a head with a different width breaks the
    /// weights; use [`MultiHeadWeights::new`] for structural changes.
    pub fn heads_mut(&mut self) -> &mut [HeadWeights] {
        &mut self.heads
    }

    /// Number of heads `m`.
    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// Head width `z`.
    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Model width `D = m·z`.
    pub fn model_dim(&self) -> usize {
        self.head_dim * self.heads.len()
    }

    /// Same structure, every weight zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            heads: self
                .heads
                .iter()
                .map(|_| HeadWeights::zeros(self.head_dim))
                .collect(),
            head_dim: self.head_dim,
        }
    }
}

/// Token grouping used by attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    /// Each frame attends within itself (`g = T`).
    Spatial2D,
    /// All frames attend jointly (`g = 1`).
    Joint3D,
    /// Frames attend in pairs at the given pyramid level (`g = T/2`).
    Leap(u32),
}

impl AttentionMode {
    /// Number of token groups `g` for a clip of `frames` frames.
    pub fn groups(self, frames: usize) -> usize {
        match self {
            AttentionMode::Spatial2D => frames,
            AttentionMode::Joint3D => 1,
            AttentionMode::Leap(_) => frames / 2,
        }
    }
}

/// `Q, K, V = M·[W_q, W_k, W_v]` for one head's `[.., z]` slice.
pub fn qkv_project(m_i: &Tensor, w: &HeadWeights) -> Result<(Tensor, Tensor, Tensor)> {
    qkv_project_tracked(m_i, w, &mut ())
}

fn qkv_project_tracked(
    m_i: &Tensor,
    w: &HeadWeights,
    sink: &mut dyn MacSink,
) -> Result<(Tensor, Tensor, Tensor)> {
    Ok((
        matmul_tracked(m_i, &w.w_q, OpKind::Projection, sink)?,
        matmul_tracked(m_i, &w.w_k, OpKind::Projection, sink)?,
        matmul_tracked(m_i, &w.w_v, OpKind::Projection, sink)?,
    ))
}

/// `softmax(Q·Kᵀ/√z)·V` inside each of the `G` groups of `[G, n, z]` inputs.
pub fn group_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    Ok(group_attention_tracked(q, k, v, &mut ())?.0)
}

fn group_attention_tracked(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    sink: &mut dyn MacSink,
) -> Result<(Tensor, Tensor)> {
    if q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(shape_err("group_attention", q.shape(), k.shape()));
    }
    let z = q.shape()[2] as f64;
    let scores = matmul_tracked(q, &transpose_last2(k)?, OpKind::AttentionScores, sink)?;
    let probs = softmax_last(&scores.scale(1.0 / libm::sqrt(z)));
    let out = matmul_tracked(&probs, v, OpKind::AttentionValues, sink)?;
    Ok((out, probs))
}

/// Resolved grouping for one forward pass.
#[derive(Debug, Clone)]
enum Layout {
    Spatial,
    Joint,
    Paired(PairingPlan),
}

impl Layout {
    fn resolve(mode: AttentionMode, frames: usize) -> Result<Self> {
        Ok(match mode {
            AttentionMode::Spatial2D => Layout::Spatial,
            AttentionMode::Joint3D => Layout::Joint,
            AttentionMode::Leap(level) => Layout::Paired(plan_for_level(frames, level)?),
        })
    }

    /// `[T, N, z]` to `[G, n, z]`.
    fn group(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        match self {
            Layout::Spatial => Ok(x.clone()),
            Layout::Joint => x.reshape(&[1, s[0] * s[1], s[2]]),
            Layout::Paired(plan) => apply_plan(x, plan),
        }
    }

    /// `[G, n, z]` back to `[T, N, z]`.
    fn ungroup(&self, y: &Tensor, frames: usize) -> Result<Tensor> {
        let s = y.shape();
        match self {
            Layout::Spatial => Ok(y.clone()),
            Layout::Joint => y.reshape(&[frames, s[1] / frames, s[2]]),
            Layout::Paired(plan) => restore_plan(y, plan),
        }
    }
}

fn check_input(x: &Tensor, w: &MultiHeadWeights) -> Result<()> {
    if x.rank() != 3 || x.shape()[2] != w.model_dim() {
        return Err(shape_err("attention", x.shape(), &[w.model_dim()]));
    }
    Ok(())
}

/// Multi-head attention over a `[T, N, D]` clip.
pub fn attention_forward(x: &Tensor, w: &MultiHeadWeights, mode: AttentionMode) -> Result<Tensor> {
    attention_forward_tracked(x, w, mode, &mut ())
}

/// [`attention_forward`] reporting its multiply-adds to `sink`.
pub fn attention_forward_tracked(
    x: &Tensor,
    w: &MultiHeadWeights,
    mode: AttentionMode,
    sink: &mut dyn MacSink,
) -> Result<Tensor> {
    check_input(x, w)?;
    let frames = x.shape()[0];
    let layout = Layout::resolve(mode, frames)?;
    let z = w.head_dim();
    let mut out = Tensor::zeros(x.shape()).cast(x.dtype());
    for (i, head) in w.heads().iter().enumerate() {
        let m_i = x.slice_last(i * z, z)?;
        let (q, k, v) = qkv_project_tracked(&m_i, head, sink)?;
        let (mixed, _) = group_attention_tracked(
            &layout.group(&q)?,
            &layout.group(&k)?,
            &layout.group(&v)?,
            sink,
        )?;
        out.assign_last(i * z, &layout.ungroup(&mixed, frames)?)?;
    }
    Ok(out)
}

/// Gradients of a scalar loss with respect to the attention input and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    /// Gradient with respect to the `[T, N, D]` input.
    pub x: Tensor,
    /// Gradient with respect to every head's projections.
    pub weights: MultiHeadWeights,
}

/// Backward pass of [`attention_forward`] given the loss gradient `upstream`
/// with respect to its output.
pub fn attention_backward(
    x: &Tensor,
    w: &MultiHeadWeights,
    mode: AttentionMode,
    upstream: &Tensor,
) -> Result<AttentionGrads> {
    check_input(x, w)?;
    if upstream.shape() != x.shape() {
        return Err(shape_err("attention_backward", x.shape(), upstream.shape()));
    }
    let frames = x.shape()[0];
    let tokens = frames * x.shape()[1];
    let layout = Layout::resolve(mode, frames)?;
    let z = w.head_dim();
    let scale = 1.0 / libm::sqrt(z as f64);

    let mut grad_x = Tensor::zeros(x.shape());
    let mut grad_heads = Vec::with_capacity(w.num_heads());
    for (i, head) in w.heads().iter().enumerate() {
        let m_i = x.slice_last(i * z, z)?;
        let (q, k, v) = qkv_project(&m_i, head)?;
        let (qg, kg, vg) = (layout.group(&q)?, layout.group(&k)?, layout.group(&v)?);
        let (_, probs) = group_attention_tracked(&qg, &kg, &vg, &mut ())?;

        // Ungrouping is a permutation, so its adjoint is the grouping.
        let d_out = layout.group(&upstream.slice_last(i * z, z)?)?;
        let d_probs = matmul(&d_out, &transpose_last2(&vg)?)?;
        let d_vg = matmul(&transpose_last2(&probs)?, &d_out)?;
        let d_scores = softmax_backward(&probs, &d_probs)?.scale(scale);
        let d_qg = matmul(&d_scores, &kg)?;
        let d_kg = matmul(&transpose_last2(&d_scores)?, &qg)?;

        let d_q = layout.ungroup(&d_qg, frames)?;
        let d_k = layout.ungroup(&d_kg, frames)?;
        let d_v = layout.ungroup(&d_vg, frames)?;

        let m_flat = m_i.reshape(&[tokens, z])?;
        let m_t = transpose_last2(&m_flat)?;
        let flat = |g: &Tensor| g.reshape(&[tokens, z]);
        grad_heads.push(HeadWeights {
            w_q: matmul(&m_t, &flat(&d_q)?)?,
            w_k: matmul(&m_t, &flat(&d_k)?)?,
            w_v: matmul(&m_t, &flat(&d_v)?)?,
        });

        let d_m = matmul(&d_q, &transpose_last2(&head.w_q)?)?
            .add(&matmul(&d_k, &transpose_last2(&head.w_k)?)?)?
            .add(&matmul(&d_v, &transpose_last2(&head.w_v)?)?)?;
        grad_x.assign_last(i * z, &d_m)?;
    }
    Ok(AttentionGrads {
        x: grad_x,
        weights: MultiHeadWeights::new(grad_heads)?,
    })
}

/// Adjoint of a row softmax: `P ⊙ (dP − rowsum(dP ⊙ P))`.
pub(crate) fn softmax_backward(probs: &Tensor, d_probs: &Tensor) -> Result<Tensor> {
    if probs.shape() != d_probs.shape() {
        return Err(shape_err(
            "softmax_backward",
            probs.shape(),
            d_probs.shape(),
        ));
    }
    let width = *probs.shape().last().unwrap();
    let mut out = Vec::with_capacity(probs.numel());
    for (p, dp) in probs.data().chunks(width).zip(d_probs.data().chunks(width)) {
        let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
        out.extend(p.iter().zip(dp).map(|(pi, dpi)| pi * (dpi - dot)));
    }
    Tensor::new(probs.shape().to_vec(), out)
}

/// Checks a mode is usable for a clip of `frames` frames.
pub fn validate_mode(mode: AttentionMode, frames: usize) -> Result<()> {
    match mode {
        AttentionMode::Leap(level) => plan_for_level(frames, level).map(|_| ()),
        _ if frames == 0 => Err(Error::Config(format!("bad clip length {frames}"))),
        _ => Ok(()),
    }
}
