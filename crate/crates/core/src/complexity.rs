//! Multiply-accumulate accounting.
//!
//! Splitting `T` frames of `N` tokens into `g` equal groups and attending
//! inside each group costs `g·(T/g·N)²` score entries, i.e. `T²N²/g`. With
//! `g = T` (per frame), `T/2` (leap pairs) and `1` (joint) this gives `TN²`,
//! `2TN²` and `T²N²`. Each score entry costs `z` MACs for `Q·Kᵀ` and another
//! `z` for the value mix, per head.
//!
//! Counts are in MACs; FLOPs are reported as `2·MACs`. Softmax, GELU,
//! normalization, shifts and additions are not counted.

use alloc::string::String;

use crate::attention::AttentionMode;
use crate::error::{Error, Result};
use crate::model::{AttentionKind, ModelConfig};

/// Call site category for a counted matrix product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    /// Patch embedding projection.
    Embedding,
    /// Per-head `Q`, `K`, `V` projections.
    Projection,
    /// `Q·Kᵀ` score products.
    AttentionScores,
    /// Attention-weighted value mix.
    AttentionValues,
    /// Optional projection after head concatenation.
    OutputProjection,
    /// Both MLP layers.
    Mlp,
    /// Per-frame classifier.
    Classifier,
    /// Products outside the forward pass (backward, tests); never tallied.
    Untracked,
}

/// Receives multiply-add counts from [`crate::tensor::matmul_tracked`].
pub trait MacSink {
    /// Records `macs` multiply-adds of the given kind.
    fn record(&mut self, kind: OpKind, macs: u64);
}

impl MacSink for () {
    fn record(&mut self, _kind: OpKind, _macs: u64) {}
}

/// MAC tallies by operation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CostReport {
    /// Free-form label, usually the attention mode.
    pub mode: String,
    /// Patch embedding.
    pub embedding: u64,
    /// `Q`, `K`, `V` projections.
    pub projections: u64,
    /// Attention score products.
    pub attention_scores: u64,
    /// Attention value products.
    pub attention_values: u64,
    /// Output projection (zero when disabled).
    pub output_projection: u64,
    /// MLP layers.
    pub mlp: u64,
    /// Classifier.
    pub classifier: u64,
}

impl MacSink for CostReport {
    fn record(&mut self, kind: OpKind, macs: u64) {
        let slot = match kind {
            OpKind::Embedding => &mut self.embedding,
            OpKind::Projection => &mut self.projections,
            OpKind::AttentionScores => &mut self.attention_scores,
            OpKind::AttentionValues => &mut self.attention_values,
            OpKind::OutputProjection => &mut self.output_projection,
            OpKind::Mlp => &mut self.mlp,
            OpKind::Classifier => &mut self.classifier,
            OpKind::Untracked => return,
        };
        *slot += macs;
    }
}

impl CostReport {
    /// Empty report with a label.
    pub fn labeled(mode: impl Into<String>) -> Self {
        Self {
            mode: mode.into(),
            ..Self::default()
        }
    }

    /// Score plus value MACs.
    pub fn attention_macs(&self) -> u64 {
        self.attention_scores + self.attention_values
    }

    /// Sum of all tallies.
    pub fn total_macs(&self) -> u64 {
        self.embedding
            + self.projections
            + self.attention_macs()
            + self.output_projection
            + self.mlp
            + self.classifier
    }

    /// `2 · total_macs`.
    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs()
    }

    /// True when every tally matches, ignoring the label.
    pub fn same_counts(&self, other: &CostReport) -> bool {
        Self {
            mode: String::new(),
            ..self.clone()
        } == Self {
            mode: String::new(),
            ..other.clone()
        }
    }
}

fn groups_checked(frames: usize, mode: AttentionMode) -> Result<usize> {
    crate::attention::validate_mode(mode, frames)?;
    Ok(mode.groups(frames))
}

/// Score plus value MACs of multi-head attention: `2·m·z·T²N²/g`.
pub fn analytic_attention_macs(
    frames: usize,
    tokens: usize,
    head_dim: usize,
    heads: usize,
    mode: AttentionMode,
) -> Result<u64> {
    let groups = groups_checked(frames, mode)?;
    let group_tokens = (frames / groups * tokens) as u64;
    Ok(2 * (heads * head_dim) as u64 * groups as u64 * group_tokens * group_tokens)
}

/// `Q`, `K`, `V` projection MACs: `3·m·z²·T·N`.
pub fn analytic_projection_macs(
    frames: usize,
    tokens: usize,
    head_dim: usize,
    heads: usize,
) -> u64 {
    3 * (heads * head_dim * head_dim * frames * tokens) as u64
}

/// Closed-form MACs of one forward pass of the whole model.
pub fn analytic_model_macs(config: &ModelConfig) -> Result<CostReport> {
    config.validate()?;
    let t = config.frames as u64;
    let n = config.tokens() as u64;
    let d_model = config.model_dim as u64;
    let hidden = config.hidden_dim() as u64;
    let mut report = CostReport::labeled(config.attention.label());
    report.embedding = t * n * config.patch_dim() as u64 * d_model;
    for layer in 0..config.depth {
        let mode = config.mode_for_layer(layer);
        let groups = groups_checked(config.frames, mode)? as u64;
        let group_tokens = t / groups * n;
        let per_part = d_model * groups * group_tokens * group_tokens;
        report.attention_scores += per_part;
        report.attention_values += per_part;
        report.projections += analytic_projection_macs(
            config.frames,
            config.tokens(),
            config.head_dim(),
            config.heads,
        );
        if config.output_projection {
            report.output_projection += t * n * d_model * d_model;
        }
        report.mlp += 2 * t * n * d_model * hidden;
    }
    report.classifier = t * d_model * config.num_classes as u64;
    Ok(report)
}

/// Instrumented count: runs one forward pass on seeded parameters and input
/// and tallies every matrix product.
pub fn empirical_macs(config: &ModelConfig, seed: u64) -> Result<CostReport> {
    use crate::model::{model_forward_tracked, random_video, ModelParams};
    config.validate()?;
    let params = ModelParams::init(config, seed)?;
    let video = random_video(config, seed.wrapping_add(1))?;
    let mut report = CostReport::labeled(config.attention.label());
    model_forward_tracked(&video, &params, config, &mut report, None)?;
    Ok(report)
}

/// Relative whole-model overhead `(variant − base) / base`.
///
/// Fails when the reports differ anywhere except the attention tallies.
pub fn overhead_report(base: &CostReport, variant: &CostReport) -> Result<f64> {
    let fixed = |r: &CostReport| {
        [
            r.embedding,
            r.projections,
            r.output_projection,
            r.mlp,
            r.classifier,
        ]
    };
    if fixed(base) != fixed(variant) {
        return Err(Error::Comparison(alloc::format!(
            "non-attention tallies differ ({:?} vs {:?})",
            fixed(base),
            fixed(variant)
        )));
    }
    let b = base.total_macs() as f64;
    Ok((variant.total_macs() as f64 - b) / b)
}

/// Relative overhead of the attention score and value tallies alone.
pub fn attention_overhead(base: &CostReport, variant: &CostReport) -> f64 {
    let b = base.attention_macs() as f64;
    (variant.attention_macs() as f64 - b) / b
}

/// Convenience: analytic reports for the same config in two attention kinds.
pub fn analytic_pair(
    config: &ModelConfig,
    base: AttentionKind,
    variant: AttentionKind,
) -> Result<(CostReport, CostReport)> {
    let with = |kind| {
        let mut c = config.clone();
        c.attention = kind;
        analytic_model_macs(&c)
    };
    Ok((with(base)?, with(variant)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spatial_hand_count() {
        let macs = analytic_attention_macs(8, 4, 1, 1, AttentionMode::Spatial2D).unwrap();
        assert_eq!(macs, 256);
    }

    #[test]
    fn mode_ratios() {
        for (t, n, z, m) in [(8, 4, 1, 1), (4, 9, 3, 2), (16, 2, 5, 4)] {
            let base = analytic_attention_macs(t, n, z, m, AttentionMode::Spatial2D).unwrap();
            let leap = analytic_attention_macs(t, n, z, m, AttentionMode::Leap(1)).unwrap();
            let joint = analytic_attention_macs(t, n, z, m, AttentionMode::Joint3D).unwrap();
            assert_eq!(leap, 2 * base);
            assert_eq!(joint, t as u64 * base);
        }
        assert!(analytic_attention_macs(4, 2, 2, 2, AttentionMode::Leap(3)).is_err());
    }

    #[test]
    fn overhead_basics() {
        let mut a = CostReport::labeled("2d");
        a.mlp = 100;
        a.attention_scores = 10;
        a.attention_values = 10;
        assert_eq!(overhead_report(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.attention_scores = 20;
        b.attention_values = 20;
        assert_eq!(attention_overhead(&a, &b), 1.0);
        assert!((overhead_report(&a, &b).unwrap() - 20.0 / 120.0).abs() < 1e-15);
        b.mlp = 101;
        assert!(matches!(overhead_report(&a, &b), Err(Error::Comparison(_))));
    }

    #[test]
    fn sink_ignores_untracked() {
        let mut r = CostReport::default();
        r.record(OpKind::Untracked, 99);
        r.record(OpKind::Classifier, 3);
        assert_eq!(r.total_macs(), 3);
        assert_eq!(r.total_flops(), 6);
    }
}
