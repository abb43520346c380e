//! Seed-sweep ablation protocol on the two-population synthetic family.
//!
//! Each seed generates a fresh instance, runs the full pipeline plus every
//! ablation arm on it, and records held-out metrics. The summary compares
//! median output error across arms and counts per-seed wins.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde_json::{Map, Value};

use super::report::{json_f64, render};
use super::synth::{generate_synthetic, SynthSpec};
use super::{run_full, Metrics, PipelineError, QuantConfig};

/// The fixed ablation protocol: a 64x64 two-population layer at an average
/// of 2 bits per element.
#[derive(Debug, Clone)]
pub struct AblationProtocol {
    pub rows: usize,
    pub cols: usize,
    pub samples: usize,
    pub heterogeneity: f64,
    pub noise_std: f64,
    pub activation_corr: f64,
    pub config: QuantConfig,
}

impl Default for AblationProtocol {
    fn default() -> Self {
        Self {
            rows: 64,
            cols: 64,
            samples: 40,
            heterogeneity: 8.0,
            noise_std: 0.1,
            activation_corr: super::synth::ACTIVATION_CORR,
            config: QuantConfig::default(),
        }
    }
}

/// Held-out metrics of every arm for one seed; "full" is the complete
/// pipeline, the rest are the ablation baselines.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub arms: BTreeMap<&'static str, Metrics>,
}

#[derive(Debug, Clone)]
pub struct AblationSummary {
    pub outcomes: Vec<SeedOutcome>,
    pub median_output_mse: BTreeMap<&'static str, f64>,
    pub full_beats_uniform: usize,
    pub full_beats_ssmq: usize,
    pub ssmq_beats_uniform: usize,
    pub ordering_holds: bool,
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Runs `seed_count` seeds of the protocol, in parallel, deterministically.
pub fn run_ablation(
    protocol: &AblationProtocol,
    seed_count: usize,
) -> Result<AblationSummary, PipelineError> {
    let results: Vec<Result<SeedOutcome, PipelineError>> = (0..seed_count as u64)
        .into_par_iter()
        .map(|seed| run_seed(protocol, seed))
        .collect();
    let mut outcomes = Vec::with_capacity(seed_count);
    for r in results {
        outcomes.push(r?);
    }

    let arm_names: Vec<&'static str> = outcomes
        .first()
        .map(|o| o.arms.keys().copied().collect())
        .unwrap_or_default();
    let mut median_output_mse = BTreeMap::new();
    for name in &arm_names {
        let values: Vec<f64> = outcomes.iter().map(|o| o.arms[name].output_mse).collect();
        median_output_mse.insert(*name, median(values));
    }

    let count_wins = |a: &str, b: &str| {
        outcomes
            .iter()
            .filter(|o| o.arms[a].output_mse < o.arms[b].output_mse)
            .count()
    };
    let full_beats_uniform = count_wins("full", "uniform_vq");
    let full_beats_ssmq = count_wins("full", "ssmq_only");
    let ssmq_beats_uniform = count_wins("ssmq_only", "uniform_vq");
    let ordering_holds = !outcomes.is_empty()
        && median_output_mse["full"] < median_output_mse["ssmq_only"]
        && median_output_mse["ssmq_only"] < median_output_mse["uniform_vq"];

    Ok(AblationSummary {
        outcomes,
        median_output_mse,
        full_beats_uniform,
        full_beats_ssmq,
        ssmq_beats_uniform,
        ordering_holds,
    })
}

fn run_seed(protocol: &AblationProtocol, seed: u64) -> Result<SeedOutcome, PipelineError> {
    let mut spec = SynthSpec::new(
        protocol.rows,
        protocol.cols,
        protocol.samples,
        protocol.heterogeneity,
        seed,
    );
    spec.noise_std = protocol.noise_std;
    spec.activation_corr = protocol.activation_corr;
    let inst = generate_synthetic(&spec);
    let batch = inst.calibration_batch();
    let config = QuantConfig {
        seed,
        ..protocol.config.clone()
    };
    let out = run_full(&inst.w, &batch, &config)?;
    let mut arms = BTreeMap::new();
    arms.insert("full", out.report.metrics);
    for (name, metrics) in &out.report.baselines {
        arms.insert(*name, *metrics);
    }
    Ok(SeedOutcome { seed, arms })
}

/// Bench report as diffable JSON (per-seed rows plus the summary).
pub fn summary_json(protocol: &AblationProtocol, summary: &AblationSummary) -> Value {
    let mut proto = Map::new();
    proto.insert("rows".into(), Value::from(protocol.rows));
    proto.insert("cols".into(), Value::from(protocol.cols));
    proto.insert("samples".into(), Value::from(protocol.samples));
    proto.insert("heterogeneity".into(), json_f64(protocol.heterogeneity));
    proto.insert("noise_std".into(), json_f64(protocol.noise_std));
    proto.insert(
        "target_avg_bits".into(),
        json_f64(protocol.config.target_avg_bits),
    );

    let mut medians = Map::new();
    for (name, v) in &summary.median_output_mse {
        medians.insert((*name).into(), json_f64(*v));
    }

    let mut seeds = Vec::new();
    for o in &summary.outcomes {
        let mut row = Map::new();
        row.insert("seed".into(), Value::from(o.seed));
        for (name, m) in &o.arms {
            row.insert(format!("{name}_output_mse"), json_f64(m.output_mse));
        }
        seeds.push(Value::Object(row));
    }

    let mut root = Map::new();
    root.insert("full_beats_ssmq_only".into(), Value::from(summary.full_beats_ssmq));
    root.insert(
        "full_beats_uniform_vq".into(),
        Value::from(summary.full_beats_uniform),
    );
    root.insert("median_output_mse".into(), Value::Object(medians));
    root.insert("ordering_holds".into(), Value::Bool(summary.ordering_holds));
    root.insert("protocol".into(), Value::Object(proto));
    root.insert("seeds".into(), Value::Array(seeds));
    root.insert(
        "ssmq_only_beats_uniform_vq".into(),
        Value::from(summary.ssmq_beats_uniform),
    );
    Value::Object(root)
}

/// Convenience wrapper used by the CLI.
pub fn render_summary(protocol: &AblationProtocol, summary: &AblationSummary) -> String {
    render(&summary_json(protocol, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn small_sweep_is_deterministic() {
        let protocol = AblationProtocol {
            rows: 16,
            cols: 16,
            samples: 10,
            config: QuantConfig {
                kmeans_iters: 10,
                ..QuantConfig::default()
            },
            ..AblationProtocol::default()
        };
        let a = run_ablation(&protocol, 3).unwrap();
        let b = run_ablation(&protocol, 3).unwrap();
        for (x, y) in a.outcomes.iter().zip(&b.outcomes) {
            assert_eq!(x.arms, y.arms);
        }
    }
}
