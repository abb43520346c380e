//! End-to-end driver: file ingestion, configuration, the full quantization
//! pipeline (sensitivity -> reorder/partition/allocate -> codebooks ->
//! compensation -> inverse permutation), scalar and vector baselines,
//! held-out metrics, and report assembly.

pub mod bench;
pub mod npy;
pub mod report;
pub mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::gaec::{gaec_run, BlockQuantizer, GaecError};
use crate::linalg::{
    apply_permutation, dampen, ldl_decompose, proxy_loss, LdlFactors, LinalgError, Matrix,
};
use crate::plan::{build_plan, pow2_floor, uniform_plan, BlockPlan, CutStrategy, PlanError};
use crate::sensitivity::{
    compute_profile, estimate_hessian_factors, CalibrationBatch, HessianFactors, SensitivityError,
};
use crate::vq::{kmeans_fit, reshape_blocks, vq_assign, vq_reconstruct, Codebook, VqError};

/// RNG family used for every seeded stream; recorded in the report so runs
/// can be reproduced bit for bit.
pub const RNG_NAME: &str = "chacha8";

#[derive(Debug)]
pub enum PipelineError {
    Io(std::io::Error),
    WriteFailed(std::io::Error),
    BadMagic,
    BadHeader(String),
    UnsupportedDtype(String),
    NonCOrder,
    BadShape { expected: String, got: Vec<usize> },
    Config(String),
    Linalg(LinalgError),
    Vq(VqError),
    Sensitivity(SensitivityError),
    Plan(PlanError),
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineError::Io(e) => write!(f, "io error: {e}"),
            PipelineError::WriteFailed(e) => write!(f, "failed to write output: {e}"),
            PipelineError::BadMagic => write!(f, "not an npy file (bad magic)"),
            PipelineError::BadHeader(msg) => write!(f, "bad npy header: {msg}"),
            PipelineError::UnsupportedDtype(d) => {
                write!(f, "unsupported dtype {d:?} (expected '<f4' or '<f8')")
            }
            PipelineError::NonCOrder => write!(f, "fortran-order arrays are not supported"),
            PipelineError::BadShape { expected, got } => {
                write!(f, "bad array shape: expected {expected}, got {got:?}")
            }
            PipelineError::Config(msg) => write!(f, "invalid config: {msg}"),
            PipelineError::Linalg(e) => write!(f, "{e}"),
            PipelineError::Vq(e) => write!(f, "{e}"),
            PipelineError::Sensitivity(e) => write!(f, "{e}"),
            PipelineError::Plan(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for PipelineError {}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Io(e)
    }
}

impl From<LinalgError> for PipelineError {
    fn from(e: LinalgError) -> Self {
        PipelineError::Linalg(e)
    }
}

impl From<VqError> for PipelineError {
    fn from(e: VqError) -> Self {
        PipelineError::Vq(e)
    }
}

impl From<SensitivityError> for PipelineError {
    fn from(e: SensitivityError) -> Self {
        PipelineError::Sensitivity(e)
    }
}

impl From<PlanError> for PipelineError {
    fn from(e: PlanError) -> Self {
        PipelineError::Plan(e)
    }
}

impl From<GaecError> for PipelineError {
    fn from(e: GaecError) -> Self {
        match e {
            GaecError::Linalg(e) => PipelineError::Linalg(e),
            GaecError::Vq(e) => PipelineError::Vq(e),
        }
    }
}

impl PipelineError {
    /// Validation errors come from user inputs (files, config, shapes) and
    /// map to exit code 2; everything else is internal (exit code 1).
    pub fn is_validation(&self) -> bool {
        !matches!(self, PipelineError::WriteFailed(_))
    }
}

// ── Configuration ───────────────────────────────────────────────────────

/// All pipeline knobs. Every field has a default; JSON configs may set any
/// subset but unknown keys are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantConfig {
    pub vector_len: usize,
    pub kmeans_iters: usize,
    pub kmeans_init: String,
    pub target_avg_bits: f64,
    pub bit_budget: f64,
    pub beta: f64,
    pub gaec_max_iters: usize,
    pub damping_scale: f64,
    pub eps_norm: f64,
    pub k_max: usize,
    pub cut_strategy: CutStrategy,
    pub seed: u64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            vector_len: 4,
            kmeans_iters: 100,
            kmeans_init: "kmeans++".to_string(),
            target_avg_bits: 2.0,
            bit_budget: 8.0,
            beta: 0.1,
            gaec_max_iters: 10,
            damping_scale: 1e-2,
            eps_norm: 1e-6,
            k_max: 4096,
            cut_strategy: CutStrategy::Balanced,
            seed: 0,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    vector_len: Option<usize>,
    kmeans_iters: Option<usize>,
    kmeans_init: Option<String>,
    target_avg_bits: Option<f64>,
    bit_budget: Option<f64>,
    beta: Option<f64>,
    gaec_max_iters: Option<usize>,
    damping_scale: Option<f64>,
    eps_norm: Option<f64>,
    k_max: Option<usize>,
    cut_strategy: Option<serde_json::Value>,
    seed: Option<u64>,
}

// Parsed by hand: either the string "balanced" or an object {"fixed": f}.
// (An untagged enum would be the natural shape, but serde_json's
// arbitrary-precision numbers do not survive untagged buffering.)
fn parse_cut_strategy(value: &serde_json::Value) -> Result<CutStrategy, PipelineError> {
    let bad = || {
        PipelineError::Config(format!(
            "invalid cut_strategy {value} (expected \"balanced\" or {{\"fixed\": f}})"
        ))
    };
    match value {
        serde_json::Value::String(name) if name == "balanced" => Ok(CutStrategy::Balanced),
        serde_json::Value::Object(map) => {
            if map.len() != 1 {
                return Err(bad());
            }
            let f = map.get("fixed").and_then(|v| v.as_f64()).ok_or_else(bad)?;
            Ok(CutStrategy::Fixed(f))
        }
        _ => Err(bad()),
    }
}

impl QuantConfig {
    pub fn from_json_str(text: &str) -> Result<Self, PipelineError> {
        let raw: RawConfig =
            serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        let defaults = QuantConfig::default();

        let target_given = raw.target_avg_bits;
        let budget_given = raw.bit_budget;
        let (target_avg_bits, bit_budget) = match (target_given, budget_given) {
            (Some(t), Some(b)) => {
                if (b - 4.0 * t).abs() > 1e-9 {
                    return Err(PipelineError::Config(format!(
                        "bit_budget {b} is inconsistent with target_avg_bits {t} (expected {})",
                        4.0 * t
                    )));
                }
                (t, b)
            }
            (Some(t), None) => (t, 4.0 * t),
            (None, Some(b)) => (b / 4.0, b),
            (None, None) => (defaults.target_avg_bits, defaults.bit_budget),
        };

        let cut_strategy = match &raw.cut_strategy {
            None => defaults.cut_strategy,
            Some(value) => parse_cut_strategy(value)?,
        };

        let config = QuantConfig {
            vector_len: raw.vector_len.unwrap_or(defaults.vector_len),
            kmeans_iters: raw.kmeans_iters.unwrap_or(defaults.kmeans_iters),
            kmeans_init: raw.kmeans_init.unwrap_or(defaults.kmeans_init),
            target_avg_bits,
            bit_budget,
            beta: raw.beta.unwrap_or(defaults.beta),
            gaec_max_iters: raw.gaec_max_iters.unwrap_or(defaults.gaec_max_iters),
            damping_scale: raw.damping_scale.unwrap_or(defaults.damping_scale),
            eps_norm: raw.eps_norm.unwrap_or(defaults.eps_norm),
            k_max: raw.k_max.unwrap_or(defaults.k_max),
            cut_strategy,
            seed: raw.seed.unwrap_or(defaults.seed),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn from_json_file(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |msg: String| Err(PipelineError::Config(msg));
        if self.vector_len < 1 {
            return fail("vector_len must be at least 1".into());
        }
        if self.kmeans_init != "kmeans++" {
            return fail(format!(
                "kmeans_init {:?} is not supported (only \"kmeans++\")",
                self.kmeans_init
            ));
        }
        if !(self.target_avg_bits > 0.0) || self.target_avg_bits > 16.0 {
            return fail(format!("target_avg_bits {} out of (0, 16]", self.target_avg_bits));
        }
        if (self.bit_budget - 4.0 * self.target_avg_bits).abs() > 1e-9 {
            return fail(format!(
                "bit_budget {} inconsistent with target_avg_bits {}",
                self.bit_budget, self.target_avg_bits
            ));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return fail(format!("beta {} out of [0, 1]", self.beta));
        }
        if self.gaec_max_iters < 1 {
            return fail("gaec_max_iters must be at least 1".into());
        }
        if !(self.damping_scale >= 0.0) {
            return fail(format!("damping_scale {} must be nonnegative", self.damping_scale));
        }
        if !(self.eps_norm > 0.0 && self.eps_norm < 1.0) {
            return fail(format!("eps_norm {} out of (0, 1)", self.eps_norm));
        }
        if self.k_max < 2 || !self.k_max.is_power_of_two() {
            return fail(format!("k_max {} must be a power of two >= 2", self.k_max));
        }
        if let CutStrategy::Fixed(f) = self.cut_strategy {
            if !(f > 0.0 && f < 1.0) {
                return fail(format!("fixed cut fraction {f} out of (0, 1)"));
            }
        }
        Ok(())
    }
}

// ── File ingestion ──────────────────────────────────────────────────────

/// Loads a 2-D float array; float32 is widened to float64.
pub fn load_matrix(path: &Path) -> Result<Matrix, PipelineError> {
    let arr = npy::read_npy(path)?;
    if arr.shape.len() != 2 {
        return Err(PipelineError::BadShape {
            expected: "2-d array".into(),
            got: arr.shape,
        });
    }
    Ok(Matrix::new(arr.shape[0], arr.shape[1], arr.data)?)
}

/// Loads a stack of gradient samples from a 3-D `(S, m, n)` array.
pub fn load_gradients(path: &Path) -> Result<Vec<Matrix>, PipelineError> {
    let arr = npy::read_npy(path)?;
    if arr.shape.len() != 3 {
        return Err(PipelineError::BadShape {
            expected: "3-d array (samples, rows, cols)".into(),
            got: arr.shape,
        });
    }
    let (s, m, n) = (arr.shape[0], arr.shape[1], arr.shape[2]);
    let mut out = Vec::with_capacity(s);
    for i in 0..s {
        let slice = arr.data[i * m * n..(i + 1) * m * n].to_vec();
        out.push(Matrix::new(m, n, slice)?);
    }
    Ok(out)
}

// ── Calibration split ───────────────────────────────────────────────────

/// Calibration/held-out split: 80% of the samples (by index, after a seeded
/// shuffle) estimate sensitivities and curvature, the rest evaluate output
/// error. Activations and gradients are split by the same indices.
#[derive(Debug, Clone)]
pub struct SplitBatch {
    pub calibration: CalibrationBatch,
    pub holdout_activations: Matrix,
}

pub fn split_batch(batch: &CalibrationBatch, seed: u64) -> Result<SplitBatch, PipelineError> {
    let acts = batch.activations();
    let grads = batch.gradient_samples();
    if acts.rows() != grads.len() {
        return Err(PipelineError::BadShape {
            expected: format!("{} activation rows to pair with gradients", grads.len()),
            got: vec![acts.rows(), acts.cols()],
        });
    }
    let s = acts.rows();
    let mut idx: Vec<usize> = (0..s).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..s).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let n_calib = if s == 1 {
        1
    } else {
        (((s as f64) * 0.8).round() as usize).clamp(1, s - 1)
    };

    let take = |indices: &[usize]| -> (Matrix, Vec<Matrix>) {
        let mut a = Vec::with_capacity(indices.len() * acts.cols());
        let mut g = Vec::with_capacity(indices.len());
        for &i in indices {
            a.extend_from_slice(acts.row(i));
            g.push(grads[i].clone());
        }
        (Matrix::from_raw(indices.len(), acts.cols(), a), g)
    };
    let (calib_acts, calib_grads) = take(&idx[..n_calib]);
    let holdout_idx = if s == 1 { &idx[..1] } else { &idx[n_calib..] };
    let (holdout_acts, _) = take(holdout_idx);

    Ok(SplitBatch {
        calibration: CalibrationBatch::new(calib_acts, calib_grads)?,
        holdout_activations: holdout_acts,
    })
}

// ── Metrics and baselines ───────────────────────────────────────────────

/// Held-out quality metrics for one quantized matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// `||W - W_hat||_F^2 / (m n)`.
    pub weight_mse: f64,
    /// `trace(E^T H_O E H_I)` against the estimated (undamped) factors.
    pub proxy_loss: f64,
    /// `mean_s ||(W - W_hat) x_s||^2 / m` over the held-out activations.
    pub output_mse: f64,
}

pub fn evaluate(
    w: &Matrix,
    w_hat: &Matrix,
    holdout_activations: &Matrix,
    factors: &HessianFactors,
) -> Result<Metrics, PipelineError> {
    let e = w.sub(w_hat)?;
    let mn = (w.rows() * w.cols()) as f64;
    let weight_mse = e.frob_norm().powi(2) / mn;
    let proxy = proxy_loss(&e, factors.h_o(), factors.h_i())?;
    if holdout_activations.cols() != w.cols() || holdout_activations.rows() == 0 {
        return Err(PipelineError::BadShape {
            expected: format!("nonempty activations with {} columns", w.cols()),
            got: vec![holdout_activations.rows(), holdout_activations.cols()],
        });
    }
    let mut acc = 0.0;
    for r in 0..holdout_activations.rows() {
        let ex = e.matvec(holdout_activations.row(r))?;
        acc += ex.iter().map(|v| v * v).sum::<f64>();
    }
    let output_mse = acc / holdout_activations.rows() as f64 / w.rows() as f64;
    Ok(Metrics {
        weight_mse,
        proxy_loss: proxy,
        output_mse,
    })
}

/// Per-output-row asymmetric min-max uniform quantization with
/// round-half-away-from-zero. Constant rows reconstruct exactly.
pub fn run_baseline_rtn(w: &Matrix, bits: u32) -> Matrix {
    assert!((1..=8).contains(&bits), "rtn bits must be in [1, 8]");
    let levels = ((1u32 << bits) - 1) as f64;
    let mut out = Matrix::zeros(w.rows(), w.cols());
    for i in 0..w.rows() {
        let row = w.row(i);
        let lo = row.iter().fold(f64::INFINITY, |m, &v| m.min(v));
        let hi = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let scale = (hi - lo) / levels;
        for (j, &v) in row.iter().enumerate() {
            let q = if scale == 0.0 {
                lo
            } else {
                lo + ((v - lo) / scale).round().clamp(0.0, levels) * scale
            };
            out.set(i, j, q);
        }
    }
    out
}

/// Vanilla vector quantization: one codebook of `2^round(bits * v)` codewords
/// over every block of `w`, no reordering, no compensation.
pub fn run_baseline_uniform_vq(
    w: &Matrix,
    bits: f64,
    v: usize,
    iters: usize,
    seed: u64,
) -> Result<Matrix, VqError> {
    let k = 1usize << ((bits * v as f64).round().max(1.0) as u32);
    let blocks = reshape_blocks(w, v);
    let codebook = kmeans_fit(&blocks, k, iters, seed)?;
    let assignment = vq_assign(&blocks, &codebook)?;
    vq_reconstruct(&assignment, &codebook, w.rows(), w.cols())
}

// ── Pipeline arms ───────────────────────────────────────────────────────

/// Which variant of the pipeline to run; the non-Full arms are the ablation
/// baselines reported alongside every run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    /// Sensitivity-driven plan plus error compensation.
    Full,
    /// Plan only; stops at the plain projection (compensation off).
    SsmqOnly,
    /// Compensation only; identity permutations, midpoint cuts, equal bits.
    GaecOnly,
    /// One shared codebook over the whole matrix.
    UniformVq,
    /// Per-row uniform scalar quantization.
    Rtn,
}

impl Arm {
    pub fn name(&self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::SsmqOnly => "ssmq_only",
            Arm::GaecOnly => "gaec_only",
            Arm::UniformVq => "uniform_vq",
            Arm::Rtn => "rtn",
        }
    }
}

/// Compensation summary recorded in the report.
#[derive(Debug, Clone, PartialEq)]
pub struct GaecSummary {
    pub loss_trace: Vec<f64>,
    pub iterations: usize,
    pub best_iteration: usize,
    /// True when the estimated curvature was degenerate (e.g. all-zero
    /// gradients) and identity curvature was substituted.
    pub degenerate_curvature: bool,
}

/// Everything produced for one quantized layer.
#[derive(Debug, Clone)]
pub struct QuantReport {
    pub plan: BlockPlan,
    pub gaec: GaecSummary,
    pub metrics: Metrics,
    pub baselines: BTreeMap<&'static str, Metrics>,
    pub config: QuantConfig,
    pub rtn_bits: u32,
    pub uniform_vq_k: usize,
    pub timings: BTreeMap<&'static str, f64>,
}

/// Full pipeline output, including the trained codebooks for serialization.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub w_hat: Matrix,
    pub report: QuantReport,
    pub codebooks: [Codebook; 4],
}

fn derived_seeds(seed: u64) -> (u64, u64) {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let split = master.gen::<u64>();
    let kmeans = master.gen::<u64>();
    (split, kmeans)
}

/// Conjugated, damped curvature factors for the compensation step, falling
/// back to identity curvature when the calibration gradients are degenerate.
struct Curvature {
    ldl_o: LdlFactors,
    ldl_i: LdlFactors,
    h_o_damped: Matrix,
    h_i_damped: Matrix,
    degenerate: bool,
}

fn prepare_curvature(
    factors: &HessianFactors,
    perm_out: &crate::linalg::Permutation,
    perm_in: &crate::linalg::Permutation,
    damping_scale: f64,
) -> Result<Curvature, PipelineError> {
    let h_o = apply_permutation(factors.h_o(), perm_out, perm_out)?;
    let h_i = apply_permutation(factors.h_i(), perm_in, perm_in)?;
    match (ldl_decompose(&h_o, damping_scale), ldl_decompose(&h_i, damping_scale)) {
        (Ok(ldl_o), Ok(ldl_i)) => Ok(Curvature {
            h_o_damped: dampen(&h_o, damping_scale),
            h_i_damped: dampen(&h_i, damping_scale),
            ldl_o,
            ldl_i,
            degenerate: false,
        }),
        // Degenerate calibration (all-zero or vanishing gradients): fall back
        // to identity curvature and flag it in the report.
        (Err(LinalgError::SingularAfterDamping { .. }), _)
        | (_, Err(LinalgError::SingularAfterDamping { .. })) => Ok(Curvature {
            ldl_o: LdlFactors::identity(h_o.rows()),
            ldl_i: LdlFactors::identity(h_i.rows()),
            h_o_damped: Matrix::identity(h_o.rows()),
            h_i_damped: Matrix::identity(h_i.rows()),
            degenerate: true,
        }),
        (Err(e), _) | (_, Err(e)) => Err(e.into()),
    }
}

struct ArmRun {
    w_hat: Matrix,
    plan: Option<BlockPlan>,
    gaec: Option<GaecSummary>,
    codebooks: Option<[Codebook; 4]>,
    uniform_vq_k: Option<usize>,
}

#[allow(clippy::too_many_arguments)]
fn run_arm_inner(
    w: &Matrix,
    split: &SplitBatch,
    factors: &HessianFactors,
    config: &QuantConfig,
    kmeans_seed: u64,
    arm: Arm,
) -> Result<ArmRun, PipelineError> {
    match arm {
        Arm::Rtn => {
            let bits = (config.target_avg_bits.round() as i64).clamp(1, 8) as u32;
            Ok(ArmRun {
                w_hat: run_baseline_rtn(w, bits),
                plan: None,
                gaec: None,
                codebooks: None,
                uniform_vq_k: None,
            })
        }
        Arm::UniformVq => {
            // Cap the codebook at the block count so small layers still run;
            // the standalone baseline keeps the strict error.
            let blocks = reshape_blocks(w, config.vector_len);
            let want = 1usize
                << (((config.target_avg_bits * config.vector_len as f64).round()).max(1.0) as u32);
            let k = want.min(pow2_floor(blocks.len()));
            let codebook = kmeans_fit(&blocks, k, config.kmeans_iters, kmeans_seed)?;
            let assignment = vq_assign(&blocks, &codebook)?;
            let w_hat = vq_reconstruct(&assignment, &codebook, w.rows(), w.cols())?;
            Ok(ArmRun {
                w_hat,
                plan: None,
                gaec: None,
                codebooks: None,
                uniform_vq_k: Some(k),
            })
        }
        Arm::Full | Arm::SsmqOnly | Arm::GaecOnly => {
            let plan = if arm == Arm::GaecOnly {
                uniform_plan(
                    w.rows(),
                    w.cols(),
                    config.bit_budget,
                    config.vector_len,
                    config.k_max,
                )
            } else {
                let profile = compute_profile(
                    factors,
                    split.calibration.activations(),
                    w,
                    config.eps_norm,
                )?;
                build_plan(
                    &profile,
                    config.bit_budget,
                    config.vector_len,
                    config.k_max,
                    config.cut_strategy,
                )?
            };
            let w_re = apply_permutation(w, &plan.perm_out, &plan.perm_in)?;
            let quantizer =
                BlockQuantizer::train(&w_re, plan.clone(), config.kmeans_iters, kmeans_seed)?;

            let (w_hat_re, gaec) = if arm == Arm::SsmqOnly {
                let (q, _) = quantizer.quantize(&w_re)?;
                (q, None)
            } else {
                let curv = prepare_curvature(factors, &plan.perm_out, &plan.perm_in, config.damping_scale)?;
                let out = gaec_run(
                    &w_re,
                    &quantizer,
                    &curv.ldl_o,
                    &curv.ldl_i,
                    &curv.h_o_damped,
                    &curv.h_i_damped,
                    config.beta,
                    config.gaec_max_iters,
                )?;
                let summary = GaecSummary {
                    loss_trace: out.loss_trace,
                    iterations: out.iterations,
                    best_iteration: out.best_iteration,
                    degenerate_curvature: curv.degenerate,
                };
                (out.w_hat, Some(summary))
            };
            let w_hat = apply_permutation(&w_hat_re, &plan.perm_out.invert(), &plan.perm_in.invert())?;
            let codebooks = quantizer.codebooks().clone();
            Ok(ArmRun {
                w_hat,
                plan: Some(plan),
                gaec,
                codebooks: Some(codebooks),
                uniform_vq_k: None,
            })
        }
    }
}

fn validate_inputs(w: &Matrix, batch: &CalibrationBatch) -> Result<(), PipelineError> {
    if w.rows() < 2 || w.cols() < 2 {
        return Err(PipelineError::BadShape {
            expected: "weights of at least 2x2".into(),
            got: vec![w.rows(), w.cols()],
        });
    }
    let g = &batch.gradient_samples()[0];
    if g.rows() != w.rows() || g.cols() != w.cols() {
        return Err(PipelineError::BadShape {
            expected: format!("gradients shaped {}x{}", w.rows(), w.cols()),
            got: vec![g.rows(), g.cols()],
        });
    }
    Ok(())
}

/// Runs a single pipeline arm and evaluates it on the held-out split.
pub fn run_arm(
    w: &Matrix,
    batch: &CalibrationBatch,
    config: &QuantConfig,
    arm: Arm,
) -> Result<(Matrix, Metrics), PipelineError> {
    config.validate()?;
    validate_inputs(w, batch)?;
    let (split_seed, kmeans_seed) = derived_seeds(config.seed);
    let split = split_batch(batch, split_seed)?;
    let factors = estimate_hessian_factors(&split.calibration)?;
    let run = run_arm_inner(w, &split, &factors, config, kmeans_seed, arm)?;
    let metrics = evaluate(w, &run.w_hat, &split.holdout_activations, &factors)?;
    Ok((run.w_hat, metrics))
}

/// Runs the full pipeline and every ablation arm, returning the quantized
/// weights, the trained codebooks, and the complete report.
pub fn run_full(
    w: &Matrix,
    batch: &CalibrationBatch,
    config: &QuantConfig,
) -> Result<PipelineOutcome, PipelineError> {
    config.validate()?;
    validate_inputs(w, batch)?;
    let t_total = Instant::now();
    let mut timings = BTreeMap::new();

    let (split_seed, kmeans_seed) = derived_seeds(config.seed);
    let split = split_batch(batch, split_seed)?;

    let t = Instant::now();
    let factors = estimate_hessian_factors(&split.calibration)?;
    timings.insert("estimate_seconds", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let full = run_arm_inner(w, &split, &factors, config, kmeans_seed, Arm::Full)?;
    timings.insert("full_seconds", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let mut baselines = BTreeMap::new();
    let mut uniform_vq_k = 0;
    for arm in [Arm::SsmqOnly, Arm::GaecOnly, Arm::UniformVq, Arm::Rtn] {
        let run = run_arm_inner(w, &split, &factors, config, kmeans_seed, arm)?;
        if let Some(k) = run.uniform_vq_k {
            uniform_vq_k = k;
        }
        let metrics = evaluate(w, &run.w_hat, &split.holdout_activations, &factors)?;
        baselines.insert(arm.name(), metrics);
    }
    timings.insert("baselines_seconds", t.elapsed().as_secs_f64());

    let metrics = evaluate(w, &full.w_hat, &split.holdout_activations, &factors)?;
    timings.insert("total_seconds", t_total.elapsed().as_secs_f64());

    let report = QuantReport {
        plan: full.plan.clone().expect("full arm builds a plan"),
        gaec: full.gaec.clone().expect("full arm runs compensation"),
        metrics,
        baselines,
        config: config.clone(),
        rtn_bits: (config.target_avg_bits.round() as i64).clamp(1, 8) as u32,
        uniform_vq_k,
        timings,
    };
    Ok(PipelineOutcome {
        w_hat: full.w_hat,
        report,
        codebooks: full.codebooks.expect("full arm trains codebooks"),
    })
}

/// The spec surface: quantized weights in the original channel order plus the
/// report. See [`run_full`] for the variant that also returns codebooks.
pub fn run_mgvq(
    w: &Matrix,
    batch: &CalibrationBatch,
    config: &QuantConfig,
) -> Result<(Matrix, QuantReport), PipelineError> {
    run_full(w, batch, config).map(|out| (out.w_hat, out.report))
}
