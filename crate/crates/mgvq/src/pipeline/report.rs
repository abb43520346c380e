//! JSON rendering of reports and plans.
//!
//! Keys are emitted sorted and every float is printed with 17 significant
//! digits (round-trip exact for f64), so identical runs produce identical
//! bytes. The `timings` section is the one intentionally non-reproducible
//! part of a report.

use serde_json::{Map, Number, Value};

use crate::plan::{BlockPlan, CutStrategy};

use super::{Metrics, QuantConfig, QuantReport, RNG_NAME};

/// A float as a JSON number with 17 significant digits.
pub fn json_f64(x: f64) -> Value {
    debug_assert!(x.is_finite(), "reports never contain non-finite values");
    Value::Number(Number::from_string_unchecked(format!("{x:.16e}")))
}

pub fn json_f64_slice(xs: &[f64]) -> Value {
    Value::Array(xs.iter().map(|&x| json_f64(x)).collect())
}

fn json_usize_slice(xs: &[usize]) -> Value {
    Value::Array(xs.iter().map(|&x| Value::from(x)).collect())
}

fn metrics_json(m: &Metrics) -> Value {
    let mut map = Map::new();
    map.insert("output_mse".into(), json_f64(m.output_mse));
    map.insert("proxy_loss".into(), json_f64(m.proxy_loss));
    map.insert("weight_mse".into(), json_f64(m.weight_mse));
    Value::Object(map)
}

fn cut_strategy_json(s: &CutStrategy) -> Value {
    match s {
        CutStrategy::Balanced => Value::String("balanced".into()),
        CutStrategy::Fixed(f) => {
            let mut map = Map::new();
            map.insert("fixed".into(), json_f64(*f));
            Value::Object(map)
        }
    }
}

fn config_json(c: &QuantConfig) -> Value {
    let mut map = Map::new();
    map.insert("beta".into(), json_f64(c.beta));
    map.insert("bit_budget".into(), json_f64(c.bit_budget));
    map.insert("cut_strategy".into(), cut_strategy_json(&c.cut_strategy));
    map.insert("damping_scale".into(), json_f64(c.damping_scale));
    map.insert("eps_norm".into(), json_f64(c.eps_norm));
    map.insert("gaec_max_iters".into(), Value::from(c.gaec_max_iters));
    map.insert("k_max".into(), Value::from(c.k_max));
    map.insert("kmeans_init".into(), Value::String(c.kmeans_init.clone()));
    map.insert("kmeans_iters".into(), Value::from(c.kmeans_iters));
    map.insert("seed".into(), Value::from(c.seed));
    map.insert("target_avg_bits".into(), json_f64(c.target_avg_bits));
    map.insert("vector_len".into(), Value::from(c.vector_len));
    Value::Object(map)
}

/// Plan serialization; `codebook_offsets` gives each block's starting row in
/// the stacked codebook array (last entry is the total row count).
pub fn plan_json(plan: &BlockPlan, codebook_offsets: Option<&[usize]>) -> Value {
    let mut map = Map::new();
    map.insert("achieved_bits".into(), json_f64_slice(&plan.achieved_bits));
    map.insert("bit_budget".into(), json_f64(plan.bit_budget));
    map.insert("bits_continuous".into(), json_f64_slice(&plan.b_cont));
    map.insert("block_sensitivities".into(), json_f64_slice(&plan.s));
    if let Some(offsets) = codebook_offsets {
        map.insert("codebook_offsets".into(), json_usize_slice(offsets));
    }
    map.insert("codebook_sizes".into(), json_usize_slice(&plan.codebook_sizes));
    map.insert("cut_in".into(), Value::from(plan.cut_in));
    map.insert("cut_out".into(), Value::from(plan.cut_out));
    map.insert("perm_in".into(), json_usize_slice(plan.perm_in.order()));
    map.insert("perm_out".into(), json_usize_slice(plan.perm_out.order()));
    map.insert("vector_len".into(), Value::from(plan.vector_len));
    map.insert(
        "weighted_avg_bits".into(),
        json_f64(plan.weighted_achieved_bits()),
    );
    Value::Object(map)
}

pub fn report_json(report: &QuantReport, layer: &str) -> Value {
    let mut gaec = Map::new();
    gaec.insert("best_iteration".into(), Value::from(report.gaec.best_iteration));
    gaec.insert(
        "degenerate_curvature".into(),
        Value::Bool(report.gaec.degenerate_curvature),
    );
    gaec.insert("iterations".into(), Value::from(report.gaec.iterations));
    gaec.insert("loss_trace".into(), json_f64_slice(&report.gaec.loss_trace));

    let mut baselines = Map::new();
    for (name, m) in &report.baselines {
        baselines.insert((*name).into(), metrics_json(m));
    }

    let mut layer_map = Map::new();
    layer_map.insert("baselines".into(), Value::Object(baselines));
    layer_map.insert("gaec".into(), Value::Object(gaec));
    layer_map.insert("metrics".into(), metrics_json(&report.metrics));
    layer_map.insert("plan".into(), plan_json(&report.plan, None));
    layer_map.insert("rtn_bits".into(), Value::from(report.rtn_bits));
    layer_map.insert("uniform_vq_k".into(), Value::from(report.uniform_vq_k));

    let mut layers = Map::new();
    layers.insert(layer.into(), Value::Object(layer_map));

    let mut timings = Map::new();
    for (name, secs) in &report.timings {
        timings.insert((*name).into(), json_f64(*secs));
    }

    let mut root = Map::new();
    root.insert("config".into(), config_json(&report.config));
    root.insert("layers".into(), Value::Object(layers));
    root.insert("rng".into(), Value::String(RNG_NAME.into()));
    root.insert("seed".into(), Value::from(report.config.seed));
    root.insert("timings".into(), Value::Object(timings));
    Value::Object(root)
}

/// Renders a value with a trailing newline for clean diffs.
pub fn render(value: &Value) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("valid json tree");
    text.push('\n');
    text
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_have_17_significant_digits() {
        let v = json_f64(std::f64::consts::PI);
        assert_eq!(v.to_string(), "3.1415926535897931e0");
        let v = json_f64(-0.0001220703125);
        assert_eq!(v.to_string(), "-1.2207031250000000e-4");
    }

    #[test]
    fn formatted_floats_round_trip() {
        for &x in &[1.0 / 3.0, 1e-300, -2.5e200, 0.1 + 0.2, 4.9e-324_f64] {
            let text = format!("{x:.16e}");
            let back: f64 = text.parse().unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{text}");
        }
    }

    #[test]
    fn rendered_keys_are_sorted() {
        let mut map = Map::new();
        map.insert("zebra".into(), Value::from(1));
        map.insert("alpha".into(), Value::from(2));
        let text = render(&Value::Object(map));
        assert!(text.find("alpha").unwrap() < text.find("zebra").unwrap());
    }
}
