//! Channel sensitivity assessment: Kronecker Hessian factors estimated from
//! per-sample weight gradients, activation-driven output energy per channel,
//! and the min-max-normalized log fusion of the two.

use std::fmt;

use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub enum SensitivityError {
    /// No gradient samples supplied.
    EmptyBatch,
    /// Sample or vector dimensions do not agree.
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    /// Fused vectors differ in length.
    LengthMismatch { expected: usize, got: usize },
}

impl fmt::Display for SensitivityError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SensitivityError::EmptyBatch => write!(f, "calibration batch has no gradient samples"),
            SensitivityError::DimensionMismatch { expected, got } => write!(
                f,
                "dimension mismatch: expected {}x{}, got {}x{}",
                expected.0, expected.1, got.0, got.1
            ),
            SensitivityError::LengthMismatch { expected, got } => {
                write!(f, "length mismatch: expected {expected}, got {got}")
            }
        }
    }
}

impl std::error::Error for SensitivityError {}

/// Calibration data: activation samples (one per row) and per-sample weight
/// gradient matrices.
#[derive(Debug, Clone)]
pub struct CalibrationBatch {
    activations: Matrix,
    gradient_samples: Vec<Matrix>,
}

impl CalibrationBatch {
    pub fn new(activations: Matrix, gradient_samples: Vec<Matrix>) -> Result<Self, SensitivityError> {
        if gradient_samples.is_empty() || activations.rows() == 0 {
            return Err(SensitivityError::EmptyBatch);
        }
        let m = gradient_samples[0].rows();
        let n = gradient_samples[0].cols();
        for g in &gradient_samples {
            if g.rows() != m || g.cols() != n {
                return Err(SensitivityError::DimensionMismatch {
                    expected: (m, n),
                    got: (g.rows(), g.cols()),
                });
            }
        }
        if activations.cols() != n {
            return Err(SensitivityError::DimensionMismatch {
                expected: (activations.rows(), n),
                got: (activations.rows(), activations.cols()),
            });
        }
        Ok(Self {
            activations,
            gradient_samples,
        })
    }

    pub fn activations(&self) -> &Matrix {
        &self.activations
    }

    pub fn gradient_samples(&self) -> &[Matrix] {
        &self.gradient_samples
    }

    pub fn sample_count(&self) -> usize {
        self.gradient_samples.len()
    }
}

/// The Kronecker pair approximating the weight-space curvature: `H_O` over
/// output channels, `H_I` over input channels.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianFactors {
    h_o: Matrix,
    h_i: Matrix,
    sample_count: usize,
}

impl HessianFactors {
    pub fn h_o(&self) -> &Matrix {
        &self.h_o
    }

    pub fn h_i(&self) -> &Matrix {
        &self.h_i
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    /// Identity curvature of the given dimensions; used as the fallback when
    /// calibration gradients are degenerate (all zero).
    pub fn identity(m: usize, n: usize) -> Self {
        Self {
            h_o: Matrix::identity(m),
            h_i: Matrix::identity(n),
            sample_count: 0,
        }
    }
}

/// Per-channel sensitivity scores: global (curvature diagonal), local
/// (activation output energy), and their log fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityProfile {
    pub i_g_in: Vec<f64>,
    pub i_g_out: Vec<f64>,
    pub i_l_in: Vec<f64>,
    pub i_l_out: Vec<f64>,
    pub i_in: Vec<f64>,
    pub i_out: Vec<f64>,
}

/// Averages gradient outer products over samples:
/// `H_I = mean(g^T g)`, `H_O = mean(g g^T)`. Symmetric PSD by construction.
pub fn estimate_hessian_factors(batch: &CalibrationBatch) -> Result<HessianFactors, SensitivityError> {
    let samples = batch.gradient_samples();
    if samples.is_empty() {
        return Err(SensitivityError::EmptyBatch);
    }
    let m = samples[0].rows();
    let n = samples[0].cols();
    let mut h_i = Matrix::zeros(n, n);
    let mut h_o = Matrix::zeros(m, m);
    // Accumulate in sample order for a deterministic reduction.
    for g in samples {
        let gt = g.transpose();
        let gtg = gt.matmul(g).expect("conformable by construction");
        let ggt = g.matmul(&gt).expect("conformable by construction");
        h_i = h_i.add(&gtg).expect("same dims");
        h_o = h_o.add(&ggt).expect("same dims");
    }
    let inv = 1.0 / samples.len() as f64;
    Ok(HessianFactors {
        h_o: h_o.scale(inv),
        h_i: h_i.scale(inv),
        sample_count: samples.len(),
    })
}

/// Reads the curvature diagonals: `(I_g_in, I_g_out)` with
/// `I_g_in[i] = H_I[i, i]` and `I_g_out[j] = H_O[j, j]`.
pub fn global_sensitivity(factors: &HessianFactors) -> (Vec<f64>, Vec<f64>) {
    let n = factors.h_i.rows();
    let m = factors.h_o.rows();
    let i_g_in = (0..n).map(|i| factors.h_i.get(i, i)).collect();
    let i_g_out = (0..m).map(|j| factors.h_o.get(j, j)).collect();
    (i_g_in, i_g_out)
}

/// Output energy per channel: `I_l_in[i] = mean(x_i^2) * ||W[:, i]||^2` and
/// `I_l_out[j] = mean((W[j, :] . x)^2)` over activation samples.
pub fn local_sensitivity(
    activations: &Matrix,
    w: &Matrix,
) -> Result<(Vec<f64>, Vec<f64>), SensitivityError> {
    if activations.cols() != w.cols() {
        return Err(SensitivityError::DimensionMismatch {
            expected: (activations.rows(), w.cols()),
            got: (activations.rows(), activations.cols()),
        });
    }
    let s = activations.rows();
    let n = w.cols();
    let m = w.rows();
    if s == 0 {
        return Err(SensitivityError::EmptyBatch);
    }
    let inv_s = 1.0 / s as f64;

    let mut mean_sq = vec![0.0; n];
    for r in 0..s {
        let row = activations.row(r);
        for (acc, &x) in mean_sq.iter_mut().zip(row) {
            *acc += x * x;
        }
    }
    for v in &mut mean_sq {
        *v *= inv_s;
    }
    let mut col_norm_sq = vec![0.0; n];
    for i in 0..m {
        let row = w.row(i);
        for (acc, &x) in col_norm_sq.iter_mut().zip(row) {
            *acc += x * x;
        }
    }
    let i_l_in: Vec<f64> = mean_sq
        .iter()
        .zip(&col_norm_sq)
        .map(|(&e, &c)| e * c)
        .collect();

    let mut i_l_out = vec![0.0; m];
    for r in 0..s {
        let x = activations.row(r);
        for j in 0..m {
            let mut dot = 0.0;
            for (a, b) in w.row(j).iter().zip(x) {
                dot += a * b;
            }
            i_l_out[j] += dot * dot;
        }
    }
    for v in &mut i_l_out {
        *v *= inv_s;
    }
    Ok((i_l_in, i_l_out))
}

/// Min-max normalizes a vector into `[eps, 1]`; constant vectors map to all
/// ones so the subsequent log stays finite.
pub fn min_max_normalize(values: &[f64], eps: f64) -> Vec<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if values.is_empty() || hi == lo {
        return vec![1.0; values.len()];
    }
    let scale = (1.0 - eps) / (hi - lo);
    values.iter().map(|&v| eps + (v - lo) * scale).collect()
}

/// Fuses global and local scores: `log(norm(I_g) * norm(I_l))` elementwise.
pub fn combine_sensitivity(i_g: &[f64], i_l: &[f64], eps: f64) -> Result<Vec<f64>, SensitivityError> {
    if i_g.len() != i_l.len() {
        return Err(SensitivityError::LengthMismatch {
            expected: i_g.len(),
            got: i_l.len(),
        });
    }
    let ng = min_max_normalize(i_g, eps);
    let nl = min_max_normalize(i_l, eps);
    Ok(ng.iter().zip(&nl).map(|(&a, &b)| (a * b).ln()).collect())
}

/// Assembles the full per-channel profile for a weight matrix.
pub fn compute_profile(
    factors: &HessianFactors,
    activations: &Matrix,
    w: &Matrix,
    eps: f64,
) -> Result<SensitivityProfile, SensitivityError> {
    let (i_g_in, i_g_out) = global_sensitivity(factors);
    let (i_l_in, i_l_out) = local_sensitivity(activations, w)?;
    let i_in = combine_sensitivity(&i_g_in, &i_l_in, eps)?;
    let i_out = combine_sensitivity(&i_g_out, &i_l_out, eps)?;
    Ok(SensitivityProfile {
        i_g_in,
        i_g_out,
        i_l_in,
        i_l_out,
        i_in,
        i_out,
    })
}
