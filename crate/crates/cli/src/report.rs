//! JSON report assembly.
//!
//! Object keys keep insertion order and every float is written with 17
//! significant digits (`d.dddddddddddddddde±x`), so a report is a stable byte
//! sequence for a given run.

use std::str::FromStr;

use laps_core::gradcheck::GradReport;
use laps_core::model::ModelConfig;
use laps_core::pairing::plan_for_level;
use laps_core::{AttentionMode, CostReport, DType, Tensor};
use serde_json::{json, Map, Number, Value};

pub const OVERHEAD_FOOTNOTE: &str = "Absolute whole-model overheads quoted for the Visformer backbone \
(+2.6% for leap attention, +18.9% for joint attention) are not reproducible here because that \
backbone's internals are unpublished; only the exact 2x attention ratio and the shrinking trend are checked.";

/// Float as a JSON number with 17 significant digits; non-finite becomes null.
pub fn float(v: f64) -> Value {
    if !v.is_finite() {
        return Value::Null;
    }
    Value::Number(Number::from_str(&format!("{v:.16e}")).expect("formatted float is valid JSON"))
}

pub fn floats(values: &[f64]) -> Value {
    Value::Array(values.iter().map(|&v| float(v)).collect())
}

pub fn config(config: &ModelConfig) -> Value {
    serde_json::to_value(config).expect("config serializes")
}

pub fn cost(report: &CostReport) -> Value {
    let mut v = serde_json::to_value(report).expect("cost report serializes");
    let map = v.as_object_mut().unwrap();
    map.insert("attention_macs".into(), report.attention_macs().into());
    map.insert("total_macs".into(), report.total_macs().into());
    map.insert("total_flops".into(), report.total_flops().into());
    v
}

/// One entry per encoder: its attention layout and, for leap layers, the plan.
pub fn pairing(config: &ModelConfig) -> laps_core::Result<Value> {
    let mut layers = Vec::with_capacity(config.depth);
    for layer in 0..config.depth {
        let mut entry = Map::new();
        entry.insert("layer".into(), layer.into());
        match config.mode_for_layer(layer) {
            AttentionMode::Spatial2D => {
                entry.insert("mode".into(), "2d".into());
            }
            AttentionMode::Joint3D => {
                entry.insert("mode".into(), "3d".into());
            }
            AttentionMode::Leap(level) => {
                let plan = plan_for_level(config.frames, level)?;
                entry.insert("mode".into(), "leap".into());
                entry.insert("level".into(), level.into());
                entry.insert("step".into(), plan.step().into());
                entry.insert("pairs".into(), pairs(plan.pairs()));
            }
        }
        layers.push(Value::Object(entry));
    }
    Ok(Value::Array(layers))
}

pub fn pairs(pairs: impl Iterator<Item = (usize, usize)>) -> Value {
    Value::Array(pairs.map(|(a, b)| json!([a, b])).collect())
}

pub fn shapes(trace: &[(String, Vec<usize>)]) -> Value {
    let mut map = Map::new();
    for (stage, shape) in trace {
        map.insert(stage.clone(), json!(shape));
    }
    Value::Object(map)
}

/// Sum and leading values of a logit tensor.
pub fn digest(t: &Tensor) -> Value {
    let head: Vec<f64> = t.data().iter().take(8).copied().collect();
    json!({ "sum": float(t.sum()), "first": floats(&head) })
}

pub fn grad(report: &GradReport) -> Value {
    let entries: Vec<Value> = report
        .entries
        .iter()
        .map(|e| {
            json!({
                "name": e.name,
                "max_rel_error": float(e.max_rel_error),
                "coordinates": e.coordinates,
            })
        })
        .collect();
    json!({
        "target": report.target,
        "pass": report.pass,
        "max_rel_error": float(report.max_rel_error()),
        "tolerance": float(report.tolerance),
        "step": float(report.step),
        "precision": match report.precision {
            DType::F32 => "f32",
            DType::F64 => "f64",
        },
        "entries": entries,
    })
}

/// Pretty-printed document with a trailing newline.
pub fn render(doc: &Value) -> String {
    let mut s = serde_json::to_string_pretty(doc).expect("report serializes");
    s.push('\n');
    s
}
