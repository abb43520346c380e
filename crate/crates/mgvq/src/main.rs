use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mgvq::pipeline::bench::{run_ablation, render_summary, AblationProtocol};
use mgvq::pipeline::npy::write_npy;
use mgvq::pipeline::report::{plan_json, render, report_json};
use mgvq::pipeline::synth::{generate_synthetic, SynthSpec};
use mgvq::pipeline::{
    load_gradients, load_matrix, run_arm, run_full, Arm, PipelineError, QuantConfig,
};
use mgvq::sensitivity::CalibrationBatch;

#[derive(Parser)]
#[command(name = "mgvq", version, about = "Mixed-precision vector quantization of weight matrices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize a weight matrix using calibration activations and gradients.
    Quantize {
        /// Weight matrix, 2-d npy.
        #[arg(long)]
        weights: PathBuf,
        /// Activation samples, 2-d npy (samples x input-channels).
        #[arg(long)]
        activations: PathBuf,
        /// Per-sample weight gradients, 3-d npy (samples x rows x cols).
        #[arg(long)]
        gradients: PathBuf,
        /// JSON config; every field optional, unknown keys rejected.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run a single ablation arm instead of the full pipeline.
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic calibration instance.
    Synth {
        #[arg(long)]
        m: usize,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        samples: usize,
        #[arg(long, default_value_t = 8.0)]
        heterogeneity: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a benchmark suite.
    Bench {
        /// Suite name; only "ablation" is defined.
        #[arg(long, default_value = "ablation")]
        suite: String,
        #[arg(long, default_value_t = 100)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Rtn,
    Uvq,
    SsmqOnly,
    GaecOnly,
}

impl Baseline {
    fn arm(self) -> Arm {
        match self {
            Baseline::Rtn => Arm::Rtn,
            Baseline::Uvq => Arm::UniformVq,
            Baseline::SsmqOnly => Arm::SsmqOnly,
            Baseline::GaecOnly => Arm::GaecOnly,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Quantize {
            weights,
            activations,
            gradients,
            config,
            baseline,
            out,
        } => quantize(&weights, &activations, &gradients, config.as_deref(), baseline, &out),
        Command::Synth {
            m,
            n,
            samples,
            heterogeneity,
            seed,
            out,
        } => synth(m, n, samples, heterogeneity, seed, &out),
        Command::Bench { suite, seeds, out } => bench(&suite, seeds, &out),
    }
}

fn ensure_dir(dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(PipelineError::WriteFailed)
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    std::fs::write(path, text).map_err(PipelineError::WriteFailed)
}

fn layer_name(weights: &Path) -> String {
    weights
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "layer".to_string())
}

fn quantize(
    weights: &Path,
    activations: &Path,
    gradients: &Path,
    config: Option<&Path>,
    baseline: Option<Baseline>,
    out: &Path,
) -> Result<(), PipelineError> {
    let w = load_matrix(weights)?;
    let acts = load_matrix(activations)?;
    let grads = load_gradients(gradients)?;
    let batch = CalibrationBatch::new(acts, grads)?;
    let config = match config {
        Some(path) => QuantConfig::from_json_file(path)?,
        None => QuantConfig::default(),
    };
    ensure_dir(out)?;

    if let Some(baseline) = baseline {
        let arm = baseline.arm();
        let (w_hat, metrics) = run_arm(&w, &batch, &config, arm)?;
        write_npy(&out.join("w_hat.npy"), &[w_hat.rows(), w_hat.cols()], w_hat.data())?;
        let mut root = serde_json::Map::new();
        root.insert("arm".into(), serde_json::Value::String(arm.name().into()));
        let mut m = serde_json::Map::new();
        m.insert("output_mse".into(), mgvq::pipeline::report::json_f64(metrics.output_mse));
        m.insert("proxy_loss".into(), mgvq::pipeline::report::json_f64(metrics.proxy_loss));
        m.insert("weight_mse".into(), mgvq::pipeline::report::json_f64(metrics.weight_mse));
        root.insert("metrics".into(), serde_json::Value::Object(m));
        root.insert("seed".into(), serde_json::Value::from(config.seed));
        write_text(&out.join("report.json"), &render(&serde_json::Value::Object(root)))?;
        return Ok(());
    }

    let outcome = run_full(&w, &batch, &config)?;
    write_npy(
        &out.join("w_hat.npy"),
        &[outcome.w_hat.rows(), outcome.w_hat.cols()],
        outcome.w_hat.data(),
    )?;

    // Codebooks stack along rows; the plan records each block's offset.
    let v = config.vector_len;
    let mut offsets = Vec::with_capacity(5);
    let mut stacked = Vec::new();
    let mut total = 0usize;
    for cb in &outcome.codebooks {
        offsets.push(total);
        stacked.extend_from_slice(cb.codewords().data());
        total += cb.len();
    }
    offsets.push(total);
    write_npy(&out.join("codebooks.npy"), &[total, v], &stacked)?;

    write_text(
        &out.join("plan.json"),
        &render(&plan_json(&outcome.report.plan, Some(&offsets))),
    )?;
    write_text(
        &out.join("report.json"),
        &render(&report_json(&outcome.report, &layer_name(weights))),
    )?;
    Ok(())
}

fn synth(
    m: usize,
    n: usize,
    samples: usize,
    heterogeneity: f64,
    seed: u64,
    out: &Path,
) -> Result<(), PipelineError> {
    if m < 2 || n < 2 || samples < 2 {
        return Err(PipelineError::Config(
            "synth requires m >= 2, n >= 2, samples >= 2".into(),
        ));
    }
    if !(heterogeneity >= 1.0) {
        return Err(PipelineError::Config("heterogeneity must be >= 1".into()));
    }
    let inst = generate_synthetic(&SynthSpec::new(m, n, samples, heterogeneity, seed));
    ensure_dir(out)?;
    write_npy(&out.join("weights.npy"), &[m, n], inst.w.data())?;
    write_npy(&out.join("activations.npy"), &[samples, n], inst.activations.data())?;
    let mut grads = Vec::with_capacity(samples * m * n);
    for g in &inst.gradients {
        grads.extend_from_slice(g.data());
    }
    write_npy(&out.join("gradients.npy"), &[samples, m, n], &grads)?;
    write_npy(&out.join("targets.npy"), &[samples, m], inst.targets.data())?;
    Ok(())
}

fn bench(suite: &str, seeds: usize, out: &Path) -> Result<(), PipelineError> {
    if suite != "ablation" {
        return Err(PipelineError::Config(format!(
            "unknown suite {suite:?} (expected \"ablation\")"
        )));
    }
    if seeds == 0 {
        return Err(PipelineError::Config("seeds must be positive".into()));
    }
    let protocol = AblationProtocol::default();
    let summary = run_ablation(&protocol, seeds)?;
    ensure_dir(out)?;
    write_text(&out.join("bench_report.json"), &render_summary(&protocol, &summary))?;
    println!(
        "ablation over {} seeds: median output mse full={:.4e} ssmq_only={:.4e} uniform_vq={:.4e}; full beats uniform on {}/{} seeds",
        seeds,
        summary.median_output_mse["full"],
        summary.median_output_mse["ssmq_only"],
        summary.median_output_mse["uniform_vq"],
        summary.full_beats_uniform,
        seeds,
    );
    Ok(())
}
