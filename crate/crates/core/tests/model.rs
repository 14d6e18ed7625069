use std::time::{Duration, Instant};

use laps_core::attention::attention_forward;
use laps_core::model::{
    encoder_forward, mlp_forward, model_forward, model_forward_tracked, patch_embed, predict,
    random_video, AttentionKind, ModelConfig, ModelParams, ShapeTrace, ShiftKind, LAYER_NORM_EPS,
};
use laps_core::shift::apply_shift;
use laps_core::tensor::layer_norm;
use laps_core::Tensor;

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn seeded_runs_are_bit_identical() {
    let config = ModelConfig::tiny();
    let run = || {
        let params = ModelParams::init(&config, 11).unwrap();
        let video = random_video(&config, 12).unwrap();
        model_forward(&video, &params, &config).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(bits(&a.per_frame), bits(&b.per_frame));
    assert_eq!(bits(&a.clip), bits(&b.clip));
}

#[test]
fn attention_mode_changes_logits() {
    let leap = ModelConfig::tiny();
    let params = ModelParams::random(&leap, 2, 0.5).unwrap();
    let video = random_video(&leap, 3).unwrap();
    let base = model_forward(&video, &params, &leap).unwrap().clip;
    for attention in [AttentionKind::Spatial2D, AttentionKind::Joint3D] {
        let other = ModelConfig {
            attention,
            ..leap.clone()
        };
        let logits = model_forward(&video, &params, &other).unwrap().clip;
        assert!(base.max_abs_diff(&logits).unwrap() > 1e-9, "{attention:?}");
    }
}

#[test]
fn single_layer_matches_manual_composition() {
    for pre_norm in [true, false] {
        for shift in [ShiftKind::None, ShiftKind::Plain, ShiftKind::Periodic] {
            let config = ModelConfig {
                depth: 1,
                pre_norm,
                shift,
                ..ModelConfig::tiny()
            };
            let params = ModelParams::random(&config, 5, 0.3).unwrap();
            let video = random_video(&config, 6).unwrap();
            let layer = &params.layers[0];

            let x = patch_embed(&video, &params, &config).unwrap();
            let norm = |n: &Option<laps_core::model::Norm>, v: &Tensor| match n {
                Some(n) => layer_norm(v, &n.gamma, &n.beta, LAYER_NORM_EPS).unwrap(),
                None => v.clone(),
            };
            let mut branch = attention_forward(
                &norm(&layer.norm1, &x),
                &layer.attn,
                config.mode_for_layer(0),
            )
            .unwrap();
            if let Some(spec) = config.shift_spec() {
                branch = apply_shift(&branch, &spec).unwrap();
            }
            let mid = branch.add(&x).unwrap();
            let out = mlp_forward(&norm(&layer.norm2, &mid), &layer.fc1, &layer.fc2)
                .unwrap()
                .add(&mid)
                .unwrap();
            assert_eq!(
                bits(&out),
                bits(&encoder_forward(&x, layer, 0, &config).unwrap())
            );

            let manual = predict(&out, &params.head).unwrap();
            let full = model_forward(&video, &params, &config).unwrap();
            assert_eq!(bits(&manual.clip), bits(&full.clip));
            assert_eq!(bits(&manual.per_frame), bits(&full.per_frame));
        }
    }
}

#[test]
fn logits_finite_for_many_seeds() {
    let config = ModelConfig::tiny();
    for seed in 0..100 {
        let params = ModelParams::init(&config, seed).unwrap();
        let video = random_video(&config, seed + 1).unwrap();
        let logits = model_forward(&video, &params, &config).unwrap();
        assert!(
            logits.clip.is_finite() && logits.per_frame.is_finite(),
            "seed {seed}"
        );
    }
}

#[test]
fn zero_branches_leave_embedding_unchanged() {
    let config = ModelConfig {
        pre_norm: false,
        ..ModelConfig::tiny()
    };
    let random = ModelParams::random(&config, 8, 1.0).unwrap();
    let mut params = ModelParams::zeros(&config).unwrap();
    params.embed = random.embed.clone();
    params.pos_embed = random.pos_embed.clone();
    let video = random_video(&config, 9).unwrap();
    let x = patch_embed(&video, &params, &config).unwrap();
    let mut y = x.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        y = encoder_forward(&y, layer, l, &config).unwrap();
    }
    assert_eq!(bits(&x), bits(&y));
}

#[test]
fn shape_trace_of_tiny_model() {
    let config = ModelConfig::tiny();
    let params = ModelParams::init(&config, 0).unwrap();
    let video = random_video(&config, 0).unwrap();
    let mut trace = ShapeTrace::new();
    model_forward_tracked(&video, &params, &config, &mut (), Some(&mut trace)).unwrap();
    let expected: Vec<(&str, Vec<usize>)> = vec![
        ("video", vec![4, 8, 8, 3]),
        ("patches", vec![4, 4, 48]),
        ("embedding", vec![4, 4, 8]),
        ("encoder.0", vec![4, 4, 8]),
        ("encoder.1", vec![4, 4, 8]),
        ("pooled", vec![4, 8]),
        ("per_frame", vec![4, 3]),
        ("clip", vec![3]),
    ];
    let got: Vec<(&str, Vec<usize>)> = trace.iter().map(|(s, v)| (s.as_str(), v.clone())).collect();
    assert_eq!(got, expected);
}

#[test]
fn tiny_forward_is_fast() {
    let config = ModelConfig::tiny();
    let params = ModelParams::init(&config, 0).unwrap();
    let video = random_video(&config, 1).unwrap();
    let start = Instant::now();
    model_forward(&video, &params, &config).unwrap();
    assert!(start.elapsed() < Duration::from_secs(1));
}
