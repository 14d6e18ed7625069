use laps_core::attention::{
    attention_backward, attention_forward, AttentionMode, MultiHeadWeights,
};
use laps_core::gradcheck::{
    check_gradients, check_gradients_with, compare, finite_diff_grad, GradCheckOptions, GradTarget,
};
use laps_core::model::{AttentionKind, ModelConfig, ShiftKind};
use laps_core::tensor::seeded_normal;
use laps_core::{DType, Error, PyramidCycle, Seed, Tensor};

const SEEDS: std::ops::Range<u64> = 0..20;

/// `T=4, N=3, z=2, m=2`.
fn small_attention(attention: AttentionKind, levels: Vec<u32>, frames: usize) -> ModelConfig {
    ModelConfig {
        frames,
        height: 4,
        width: 12,
        patch: 4,
        model_dim: 4,
        heads: 2,
        depth: 1,
        attention,
        shift_fraction: [1, 2],
        pyramid_cycle: PyramidCycle { levels },
        ..ModelConfig::tiny()
    }
}

fn attention_modes() -> Vec<(String, ModelConfig)> {
    let mut out = vec![
        (
            "2d".into(),
            small_attention(AttentionKind::Spatial2D, vec![1], 4),
        ),
        (
            "3d".into(),
            small_attention(AttentionKind::Joint3D, vec![1], 4),
        ),
    ];
    for level in 1..=2 {
        out.push((
            format!("leap T=4 R={level}"),
            small_attention(AttentionKind::Leap, vec![level], 4),
        ));
    }
    for level in 1..=3 {
        out.push((
            format!("leap T=8 R={level}"),
            small_attention(AttentionKind::Leap, vec![level], 8),
        ));
    }
    out
}

fn assert_passes(target: GradTarget, config: &ModelConfig, tol: f64, label: &str) {
    for seed in SEEDS {
        let report = check_gradients(target, config, seed, tol).unwrap();
        assert!(report.pass, "{label} seed {seed}: {:?}", report.entries);
    }
}

#[test]
fn attention_all_modes() {
    for (label, config) in attention_modes() {
        assert_passes(GradTarget::Attention, &config, 1e-5, &label);
    }
}

#[test]
fn attention_sum_loss_matches_scalar_oracle() {
    let x = seeded_normal(&[4, 3, 4], Seed(3), 1.0).unwrap();
    let w = MultiHeadWeights::random(2, 2, Seed(4), 0.5).unwrap();
    for mode in [
        AttentionMode::Spatial2D,
        AttentionMode::Joint3D,
        AttentionMode::Leap(1),
        AttentionMode::Leap(2),
    ] {
        let ones = Tensor::full(x.shape(), 1.0);
        let analytic = attention_backward(&x, &w, mode, &ones).unwrap();
        let numeric =
            finite_diff_grad(&mut |p| Ok(attention_forward(p, &w, mode)?.sum()), &x, 1e-5).unwrap();
        assert!(
            compare("x", &analytic.x, &numeric).unwrap().max_rel_error < 1e-5,
            "{mode:?}"
        );
    }
}

#[test]
fn shifts() {
    for mode in [ShiftKind::Plain, ShiftKind::Periodic] {
        // T=4, N=3, m=2, z=8
        let config = ModelConfig {
            model_dim: 16,
            shift: mode,
            shift_fraction: [1, 8],
            ..small_attention(AttentionKind::Leap, vec![1], 4)
        };
        assert_passes(GradTarget::Shift, &config, 1e-5, &format!("{mode:?}"));
    }
}

#[test]
fn mlp() {
    for pre_norm in [true, false] {
        let config = ModelConfig {
            pre_norm,
            ..ModelConfig::tiny()
        };
        assert_passes(GradTarget::Mlp, &config, 1e-5, "mlp");
    }
}

#[test]
fn encoder_every_layout() {
    for attention in [
        AttentionKind::Spatial2D,
        AttentionKind::Joint3D,
        AttentionKind::Leap,
    ] {
        for pre_norm in [true, false] {
            for output_projection in [false, true] {
                let config = ModelConfig {
                    attention,
                    pre_norm,
                    output_projection,
                    ..ModelConfig::tiny()
                };
                assert_passes(
                    GradTarget::Encoder,
                    &config,
                    1e-4,
                    &format!("{attention:?} pre_norm={pre_norm} proj={output_projection}"),
                );
            }
        }
    }
}

#[test]
fn full_tiny_model() {
    for attention in [
        AttentionKind::Spatial2D,
        AttentionKind::Joint3D,
        AttentionKind::Leap,
    ] {
        for pre_norm in [true, false] {
            let config = ModelConfig {
                attention,
                pre_norm,
                ..ModelConfig::tiny()
            };
            assert_passes(
                GradTarget::Model,
                &config,
                1e-4,
                &format!("{attention:?} pre_norm={pre_norm}"),
            );
        }
    }
}

#[test]
fn shrinking_step_does_not_blow_up_error() {
    let tiny = ModelConfig::tiny();
    let mut cases: Vec<(GradTarget, ModelConfig)> = attention_modes()
        .into_iter()
        .map(|(_, c)| (GradTarget::Attention, c))
        .collect();
    cases.push((GradTarget::Shift, tiny.clone()));
    cases.push((GradTarget::Mlp, tiny.clone()));
    cases.push((GradTarget::Encoder, tiny));
    for (target, config) in cases {
        for seed in 0..5 {
            let fine = check_gradients(target, &config, seed, 1.0)
                .unwrap()
                .max_rel_error();
            let coarse_opts = GradCheckOptions {
                step: 1e-4,
                ..GradCheckOptions::with_tolerance(1.0)
            };
            let coarse = check_gradients_with(target, &config, seed, coarse_opts)
                .unwrap()
                .max_rel_error();
            assert!(
                fine <= 10.0 * coarse,
                "{target:?} seed {seed}: {fine:e} vs {coarse:e}"
            );
        }
    }
}

#[test]
fn shift_unchanged_channels_exact() {
    let report = check_gradients(GradTarget::Shift, &ModelConfig::tiny(), 3, 1e-5).unwrap();
    let unchanged = report
        .entries
        .iter()
        .find(|e| e.name == "x.unchanged")
        .unwrap();
    assert_eq!(unchanged.max_rel_error, 0.0);
    assert!(unchanged.coordinates > 0);
}

#[test]
fn zero_tolerance_fails() {
    let report = check_gradients(GradTarget::Attention, &ModelConfig::tiny(), 0, 0.0).unwrap();
    assert!(!report.pass);
}

#[test]
fn rejects_single_precision_and_bad_steps() {
    let config = ModelConfig::tiny();
    let f32_opts = GradCheckOptions {
        precision: DType::F32,
        ..GradCheckOptions::with_tolerance(1e-4)
    };
    assert!(matches!(
        check_gradients_with(GradTarget::Mlp, &config, 0, f32_opts),
        Err(Error::Config(_))
    ));
    let zero_step = GradCheckOptions {
        step: 0.0,
        ..GradCheckOptions::with_tolerance(1e-4)
    };
    assert!(check_gradients_with(GradTarget::Mlp, &config, 0, zero_step).is_err());
}
