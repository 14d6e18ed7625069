//! Command implementations.

use std::fs;
use std::io::Write;
use std::path::Path;

use laps_core::complexity::{
    analytic_model_macs, attention_overhead, empirical_macs, overhead_report,
};
use laps_core::gradcheck::{check_gradients_with, GradCheckOptions, GradTarget};
use laps_core::model::{
    model_forward_tracked, random_video, AttentionKind, ModelConfig, ModelParams, ShapeTrace,
};
use laps_core::pairing::plan_for_level;
use laps_core::tensor::seeded_normal;
use laps_core::{CostReport, Seed};
use serde_json::{json, Map, Value};

use crate::args::{
    Cli, Command, ConfigArgs, FlopsArgs, ForwardArgs, GenFixtureArgs, GradcheckArgs,
    InitParamsArgs, PairsArgs,
};
use crate::fixture::{self, FixtureError};
use crate::report;

/// Exit status for a finished command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    CheckFailed,
}

impl Outcome {
    pub fn code(self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::CheckFailed => 1,
        }
    }
}

/// Errors that end a command before it produces a result (exit code 2).
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Core(#[from] laps_core::Error),
    #[error("{0}")]
    Fixture(#[from] FixtureError),
    #[error("{path}: {message}")]
    Config { path: String, message: String },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        2
    }
}

type CliResult<T> = Result<T, CliError>;

pub fn run(cli: Cli) -> CliResult<Outcome> {
    match cli.command {
        Command::Pairs(a) => pairs(&a),
        Command::Forward(a) => forward(&a),
        Command::Flops(a) => flops(&a),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::GenFixture(a) => gen_fixture(&a),
        Command::InitParams(a) => init_params(&a),
    }
}

pub fn load_config(path: &Path) -> CliResult<ModelConfig> {
    let config_err = |message: String| CliError::Config {
        path: path.display().to_string(),
        message,
    };
    let text = fs::read_to_string(path).map_err(|e| config_err(e.to_string()))?;
    let config: ModelConfig = serde_json::from_str(&text).map_err(|e| config_err(e.to_string()))?;
    config.validate().map_err(|e| config_err(e.to_string()))?;
    Ok(config)
}

fn resolve_config(args: &ConfigArgs) -> CliResult<ModelConfig> {
    let mut config = load_config(&args.config)?;
    if let Some(mode) = args.mode {
        config.attention = mode.into();
    }
    if let Some(shift) = args.shift {
        config.shift = shift.into();
    }
    config.validate()?;
    Ok(config)
}

fn emit(out: Option<&Path>, doc: &Value) -> CliResult<()> {
    let text = report::render(doc);
    match out {
        Some(path) => {
            fs::write(path, text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
        }
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Usage(format!("stdout: {e}"))),
    }
}

fn warnings(config: &ModelConfig) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(spec) = config.shift_spec() {
        if spec.is_noop() {
            let (width, _) = spec.block();
            out.push(format!(
                "shift fraction {}/{} of a {width}-channel block rounds to zero channels; the shift is a no-op",
                config.shift_fraction[0], config.shift_fraction[1]
            ));
        }
    }
    out
}

fn pairs(args: &PairsArgs) -> CliResult<Outcome> {
    if args.frames % 2 != 0 || args.frames == 0 {
        return Err(CliError::Usage(format!(
            "--frames must be a positive even number, got {}",
            args.frames
        )));
    }
    let plan = plan_for_level(args.frames, args.pyramid)?;
    let doc = json!({
        "frames": args.frames,
        "level": args.pyramid,
        "step": plan.step(),
        "list_a": plan.list_a(),
        "list_b": plan.list_b(),
        "pairs": report::pairs(plan.pairs()),
    });
    emit(args.out.as_deref(), &doc)?;
    Ok(Outcome::Success)
}

fn forward(args: &ForwardArgs) -> CliResult<Outcome> {
    let config = resolve_config(&args.model)?;
    let params = match &args.params {
        Some(path) => ModelParams::from_named(&config, fixture::read_archive(path)?)?,
        None => ModelParams::init(&config, args.seed)?,
    };
    let video = match &args.input {
        Some(path) => fixture::read_tensor(path)?,
        None => random_video(&config, args.seed.wrapping_add(1))?,
    };
    let mut cost = CostReport::labeled(config.attention.label());
    let mut trace = ShapeTrace::new();
    let logits = model_forward_tracked(&video, &params, &config, &mut cost, Some(&mut trace))?;
    let doc = json!({
        "config": report::config(&config),
        "pairing": report::pairing(&config)?,
        "shapes": report::shapes(&trace),
        "cost": report::cost(&cost),
        "logits": report::digest(&logits.clip),
        "warnings": warnings(&config),
    });
    emit(args.out.as_deref(), &doc)?;
    Ok(Outcome::Success)
}

fn flops(args: &FlopsArgs) -> CliResult<Outcome> {
    let config = resolve_config(&args.model)?;
    let with_kind = |kind| ModelConfig {
        attention: kind,
        ..config.clone()
    };
    let analytic = analytic_model_macs(&config)?;
    let baseline = analytic_model_macs(&with_kind(AttentionKind::Spatial2D))?;

    let mut cost = Map::new();
    cost.insert("analytic".into(), report::cost(&analytic));
    if !args.analytic_only {
        let empirical = empirical_macs(&config, args.seed)?;
        cost.insert("empirical".into(), report::cost(&empirical));
        cost.insert(
            "analytic_equals_empirical".into(),
            (empirical == analytic).into(),
        );
    }
    cost.insert("baseline_2d".into(), report::cost(&baseline));

    let mut ratios = Map::new();
    for kind in [
        AttentionKind::Spatial2D,
        AttentionKind::Joint3D,
        AttentionKind::Leap,
    ] {
        let r = analytic_model_macs(&with_kind(kind))?;
        ratios.insert(
            kind.label().into(),
            json!({
                "attention_ratio_vs_2d": report::float(r.attention_macs() as f64 / baseline.attention_macs() as f64),
                "attention_overhead_vs_2d": report::float(attention_overhead(&baseline, &r)),
                "model_overhead_vs_2d": report::float(overhead_report(&baseline, &r)?),
            }),
        );
    }
    let doc = json!({
        "config": report::config(&config),
        "cost": Value::Object(cost),
        "ratios": Value::Object(ratios),
        "warnings": warnings(&config),
        "footnote": report::OVERHEAD_FOOTNOTE,
    });
    emit(args.out.as_deref(), &doc)?;
    Ok(Outcome::Success)
}

fn default_tolerance(target: GradTarget) -> f64 {
    match target {
        GradTarget::Attention | GradTarget::Shift | GradTarget::Mlp => 1e-5,
        GradTarget::Encoder | GradTarget::Model => 1e-4,
    }
}

fn gradcheck(args: &GradcheckArgs) -> CliResult<Outcome> {
    if let Some(tol) = args.tol {
        if tol.is_nan() || tol < 0.0 {
            return Err(CliError::Usage(format!(
                "--tol must be non-negative, got {tol}"
            )));
        }
    }
    let config = resolve_config(&args.model)?;
    let mut results = Vec::new();
    let mut pass = true;
    for target in args.target.targets() {
        let options = GradCheckOptions {
            step: args.step,
            ..GradCheckOptions::with_tolerance(
                args.tol.unwrap_or_else(|| default_tolerance(target)),
            )
        };
        let r = check_gradients_with(target, &config, args.seed, options)?;
        pass &= r.pass;
        results.push(report::grad(&r));
    }
    let doc = json!({
        "config": report::config(&config),
        "seed": args.seed,
        "grad": results,
        "pass": pass,
        "warnings": warnings(&config),
    });
    emit(args.out.as_deref(), &doc)?;
    Ok(if pass {
        Outcome::Success
    } else {
        Outcome::CheckFailed
    })
}

fn gen_fixture(args: &GenFixtureArgs) -> CliResult<Outcome> {
    if args.shape.is_empty() || args.shape.contains(&0) {
        return Err(CliError::Usage(format!(
            "--shape extents must be positive, got {:?}",
            args.shape
        )));
    }
    let t = seeded_normal(&args.shape, Seed(args.seed), 1.0)?;
    fixture::write_tensor(&args.out, &t, args.dtype.into())?;
    Ok(Outcome::Success)
}

fn init_params(args: &InitParamsArgs) -> CliResult<Outcome> {
    let config = resolve_config(&args.model)?;
    let params = ModelParams::init(&config, args.seed)?;
    fixture::write_archive(&args.out, &params.named_tensors(), args.dtype.into())?;
    Ok(Outcome::Success)
}
