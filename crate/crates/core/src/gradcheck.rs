//! Central finite-difference oracle and a harness comparing it with the
//! analytic backward passes.
//!
//! Relative error is `|a − n| / max(|a|, |n|, 1e-8)`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::attention::{attention_backward, attention_forward, MultiHeadWeights};
use crate::error::{Error, Result};
use crate::model::{
    encoder_backward, encoder_forward, mlp_backward, mlp_forward, model_backward, model_forward,
    random_video, LayerParams, ModelConfig, ModelParams,
};
use crate::shift::{apply_shift, shift_backward};
use crate::tensor::{seeded_normal, DType, Seed, Tensor};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Floor of the relative-error denominator.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// Standard deviation of random weights used by the harness.
const WEIGHT_STD: f64 = 0.5;
const MODEL_WEIGHT_STD: f64 = 0.22;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::NonFinite { coordinate: i });
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Central differences of `Σ_j w_j·F(x)_j` taken output-wise before the
/// contraction, divided by the realized spread `(x_i + h) − (x_i − h)`.
///
/// Differencing each output before summing keeps exact copies exact, so a
/// coordinate that is only copied yields its weight with no rounding.
pub fn finite_diff_contracted(
    f: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    weights: &Tensor,
    h: f64,
) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        let upper = probe.data()[i];
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        let lower = probe.data()[i];
        probe.data_mut()[i] = orig;
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::NonFinite { coordinate: i });
        }
        let spread = upper - lower;
        let mut acc = 0.0;
        for ((p, m), w) in plus.data().iter().zip(minus.data()).zip(weights.data()) {
            let d = p - m;
            if d != 0.0 {
                acc += w * (d / spread);
            }
        }
        grad.data_mut()[i] = acc;
    }
    Ok(grad)
}

/// What to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GradTarget {
    /// Multi-head attention of the first encoder's mode.
    Attention,
    /// The configured temporal shift.
    Shift,
    /// The MLP block.
    Mlp,
    /// One full encoder (layer 0).
    Encoder,
    /// Every parameter of the model, loss = sum of clip logits.
    Model,
}

impl GradTarget {
    /// All targets in report order.
    pub const ALL: [GradTarget; 5] = [
        GradTarget::Attention,
        GradTarget::Shift,
        GradTarget::Mlp,
        GradTarget::Encoder,
        GradTarget::Model,
    ];

    /// Short name.
    pub fn label(self) -> &'static str {
        match self {
            GradTarget::Attention => "attention",
            GradTarget::Shift => "shift",
            GradTarget::Mlp => "mlp",
            GradTarget::Encoder => "encoder",
            GradTarget::Model => "model",
        }
    }
}

/// Finite-difference settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error (strict).
    pub tolerance: f64,
    /// Arithmetic precision; only `F64` is accepted.
    pub precision: DType,
}

impl GradCheckOptions {
    /// 64-bit, `h = 1e-5`, the given tolerance.
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            step: DEFAULT_STEP,
            tolerance,
            precision: DType::F64,
        }
    }
}

/// Worst relative error over one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    /// Tensor name (`x` for the input).
    pub name: String,
    /// Largest relative error over its coordinates.
    pub max_rel_error: f64,
    /// Number of coordinates compared.
    pub coordinates: usize,
}

/// Outcome of one harness run.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    /// Target label.
    pub target: String,
    /// One entry per compared tensor.
    pub entries: Vec<GradEntry>,
    /// Step used.
    pub step: f64,
    /// Precision used.
    pub precision: DType,
    /// Threshold applied.
    pub tolerance: f64,
    /// True iff every entry is strictly below the tolerance.
    pub pass: bool,
}

impl GradReport {
    /// Largest error over all entries.
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// Compares analytic and numeric gradients elementwise.
pub fn compare(name: &str, analytic: &Tensor, numeric: &Tensor) -> Result<GradEntry> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::Shape {
            op: "compare",
            lhs: analytic.shape().to_vec(),
            rhs: numeric.shape().to_vec(),
        });
    }
    let max_rel_error = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max);
    Ok(GradEntry {
        name: name.to_string(),
        max_rel_error,
        coordinates: analytic.numel(),
    })
}

/// Runs the harness with `h = 1e-5` in 64-bit arithmetic.
pub fn check_gradients(
    target: GradTarget,
    config: &ModelConfig,
    seed: u64,
    tolerance: f64,
) -> Result<GradReport> {
    check_gradients_with(
        target,
        config,
        seed,
        GradCheckOptions::with_tolerance(tolerance),
    )
}

/// Runs the harness with explicit options.
pub fn check_gradients_with(
    target: GradTarget,
    config: &ModelConfig,
    seed: u64,
    options: GradCheckOptions,
) -> Result<GradReport> {
    if options.precision != DType::F64 {
        return Err(Error::Config(
            "gradient checks require 64-bit precision".into(),
        ));
    }
    if options.step.is_nan() || options.step <= 0.0 {
        return Err(Error::Config(format!(
            "step must be positive, got {}",
            options.step
        )));
    }
    config.validate()?;
    let entries = match target {
        GradTarget::Attention => attention_entries(config, seed, options.step)?,
        GradTarget::Shift => shift_entries(config, seed, options.step)?,
        GradTarget::Mlp => mlp_entries(config, seed, options.step)?,
        GradTarget::Encoder => encoder_entries(config, seed, options.step)?,
        GradTarget::Model => model_entries(config, seed, options.step)?,
    };
    let pass = entries.iter().all(|e| e.max_rel_error < options.tolerance);
    Ok(GradReport {
        target: target.label().to_string(),
        entries,
        step: options.step,
        precision: options.precision,
        tolerance: options.tolerance,
        pass,
    })
}

fn clip_shape(config: &ModelConfig) -> [usize; 3] {
    [config.frames, config.tokens(), config.model_dim]
}

fn random(shape: &[usize], seed: u64, salt: u64, std: f64) -> Result<Tensor> {
    seeded_normal(
        shape,
        Seed(seed.wrapping_mul(1_000_003).wrapping_add(salt)),
        std,
    )
}

fn attention_entries(config: &ModelConfig, seed: u64, h: f64) -> Result<Vec<GradEntry>> {
    let shape = clip_shape(config);
    let mode = config.mode_for_layer(0);
    let x = random(&shape, seed, 1, 1.0)?;
    let cot = random(&shape, seed, 2, 1.0)?;
    let w = MultiHeadWeights::random(config.heads, config.head_dim(), Seed(seed), WEIGHT_STD)?;
    let analytic = attention_backward(&x, &w, mode, &cot)?;

    let mut entries = Vec::new();
    let numeric = finite_diff_contracted(&mut |p| attention_forward(p, &w, mode), &x, &cot, h)?;
    entries.push(compare("x", &analytic.x, &numeric)?);
    for (i, grads) in analytic.weights.heads().iter().enumerate() {
        let parts = [
            ("w_q", &grads.w_q),
            ("w_k", &grads.w_k),
            ("w_v", &grads.w_v),
        ];
        for (slot, (label, grad)) in parts.into_iter().enumerate() {
            let current = match slot {
                0 => &w.heads()[i].w_q,
                1 => &w.heads()[i].w_k,
                _ => &w.heads()[i].w_v,
            };
            let numeric = finite_diff_contracted(
                &mut |p| {
                    let mut probe = w.clone();
                    let head = &mut probe.heads_mut()[i];
                    match slot {
                        0 => head.w_q = p.clone(),
                        1 => head.w_k = p.clone(),
                        _ => head.w_v = p.clone(),
                    }
                    attention_forward(&x, &probe, mode)
                },
                current,
                &cot,
                h,
            )?;
            entries.push(compare(&format!("head{i}.{label}"), grad, &numeric)?);
        }
    }
    Ok(entries)
}

fn shift_entries(config: &ModelConfig, seed: u64, h: f64) -> Result<Vec<GradEntry>> {
    let spec = config
        .shift_spec()
        .ok_or_else(|| Error::Config("shift target needs shift = plain or periodic".into()))?;
    let shape = clip_shape(config);
    let x = random(&shape, seed, 3, 1.0)?;
    let ones = Tensor::full(&shape, 1.0);
    let analytic = shift_backward(&ones, &spec)?;
    let numeric = finite_diff_contracted(&mut |p| apply_shift(p, &spec), &x, &ones, h)?;

    let (width, shifted) = spec.block();
    let keep = |c: usize| c % width >= 2 * shifted;
    let pick = |t: &Tensor, unchanged: bool| {
        let dim = config.model_dim;
        let data: Vec<f64> = t
            .data()
            .iter()
            .enumerate()
            .filter(|(i, _)| keep(i % dim) == unchanged)
            .map(|(_, &v)| v)
            .collect();
        (!data.is_empty())
            .then(|| Tensor::new(alloc::vec![data.len()], data))
            .transpose()
    };
    let mut entries = alloc::vec![compare("x", &analytic, &numeric)?];
    for (label, unchanged) in [("x.unchanged", true), ("x.shifted", false)] {
        if let (Some(a), Some(n)) = (pick(&analytic, unchanged)?, pick(&numeric, unchanged)?) {
            entries.push(compare(label, &a, &n)?);
        }
    }
    Ok(entries)
}

fn mlp_entries(config: &ModelConfig, seed: u64, h: f64) -> Result<Vec<GradEntry>> {
    let shape = clip_shape(config);
    let layer = random_layer(config, seed)?;
    let x = random(&shape, seed, 4, 1.0)?;
    let cot = random(&shape, seed, 5, 1.0)?;
    let (dx, g1, g2) = mlp_backward(&x, &layer.fc1, &layer.fc2, &cot)?;

    let mut entries = Vec::new();
    let numeric =
        finite_diff_contracted(&mut |p| mlp_forward(p, &layer.fc1, &layer.fc2), &x, &cot, h)?;
    entries.push(compare("x", &dx, &numeric)?);
    let grads = [
        ("fc1.weight", &g1.weight),
        ("fc1.bias", &g1.bias),
        ("fc2.weight", &g2.weight),
        ("fc2.bias", &g2.bias),
    ];
    for (slot, (label, grad)) in grads.into_iter().enumerate() {
        let current = match slot {
            0 => &layer.fc1.weight,
            1 => &layer.fc1.bias,
            2 => &layer.fc2.weight,
            _ => &layer.fc2.bias,
        };
        let numeric = finite_diff_contracted(
            &mut |p| {
                let (mut fc1, mut fc2) = (layer.fc1.clone(), layer.fc2.clone());
                match slot {
                    0 => fc1.weight = p.clone(),
                    1 => fc1.bias = p.clone(),
                    2 => fc2.weight = p.clone(),
                    _ => fc2.bias = p.clone(),
                }
                mlp_forward(&x, &fc1, &fc2)
            },
            current,
            &cot,
            h,
        )?;
        entries.push(compare(label, grad, &numeric)?);
    }
    Ok(entries)
}

fn random_layer(config: &ModelConfig, seed: u64) -> Result<LayerParams> {
    let one_layer = ModelConfig {
        depth: 1,
        ..config.clone()
    };
    Ok(ModelParams::random(&one_layer, seed, WEIGHT_STD)?
        .layers
        .remove(0))
}

fn layer_tensors(layer: &LayerParams) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    layer.visit("", &mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

fn replace_in_layer(layer: &LayerParams, name: &str, value: &Tensor) -> LayerParams {
    let mut probe = layer.clone();
    probe.visit_mut("", &mut |n, t| {
        if n == name {
            *t = value.clone();
        }
    });
    probe
}

fn encoder_entries(config: &ModelConfig, seed: u64, h: f64) -> Result<Vec<GradEntry>> {
    let shape = clip_shape(config);
    let layer = random_layer(config, seed)?;
    let x = random(&shape, seed, 6, 1.0)?;
    let cot = random(&shape, seed, 7, 1.0)?;
    let (dx, grads) = encoder_backward(&x, &layer, 0, config, &cot)?;

    let mut entries = Vec::new();
    let numeric =
        finite_diff_contracted(&mut |p| encoder_forward(p, &layer, 0, config), &x, &cot, h)?;
    entries.push(compare("x", &dx, &numeric)?);
    let current = layer_tensors(&layer);
    for ((name, value), (_, grad)) in current.iter().zip(layer_tensors(&grads)) {
        let numeric = finite_diff_contracted(
            &mut |p| encoder_forward(&x, &replace_in_layer(&layer, name, p), 0, config),
            value,
            &cot,
            h,
        )?;
        entries.push(compare(name, &grad, &numeric)?);
    }
    Ok(entries)
}

fn model_entries(config: &ModelConfig, seed: u64, h: f64) -> Result<Vec<GradEntry>> {
    let params = ModelParams::random(config, seed, MODEL_WEIGHT_STD)?;
    let video = random_video(config, seed.wrapping_add(17))?;
    let ones = Tensor::full(&[config.num_classes], 1.0);
    let grads = model_backward(&video, &params, config, &ones)?;

    let mut entries = Vec::new();
    for ((name, value), (_, grad)) in params
        .named_tensors()
        .into_iter()
        .zip(grads.named_tensors())
    {
        let numeric = finite_diff_contracted(
            &mut |p| {
                let mut probe = params.clone();
                probe.visit_mut(&mut |n, t| {
                    if n == name {
                        *t = p.clone();
                    }
                });
                Ok(model_forward(&video, &probe, config)?.clip)
            },
            &value,
            &ones,
            h,
        )?;
        entries.push(compare(&name, &grad, &numeric)?);
    }
    Ok(entries)
}
