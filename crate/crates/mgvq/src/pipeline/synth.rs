//! Synthetic calibration instances: a two-population weight matrix, channel-
//! scaled correlated Gaussian activations, noisy linear targets, and the
//! analytic weight gradients of the per-sample squared-error loss.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::Matrix;
use crate::sensitivity::CalibrationBatch;

/// Default lag-one correlation of the activation channels. Nonzero
/// correlation gives the input-side curvature real off-diagonal structure.
pub const ACTIVATION_CORR: f64 = 0.6;

/// Parameters of the generator. `heterogeneity` is the scale ratio between
/// the two weight-row populations (and the two activation-channel
/// populations); larger values give more lopsided layers.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub rows: usize,
    pub cols: usize,
    pub samples: usize,
    pub heterogeneity: f64,
    pub noise_std: f64,
    pub activation_corr: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(rows: usize, cols: usize, samples: usize, heterogeneity: f64, seed: u64) -> Self {
        Self {
            rows,
            cols,
            samples,
            heterogeneity,
            noise_std: 0.1,
            activation_corr: ACTIVATION_CORR,
            seed,
        }
    }
}

/// A generated instance: weights, activation samples (one per row), targets
/// `y_s = W x_s + noise`, and the analytic gradients `(W x_s - y_s) x_s^T`.
#[derive(Debug, Clone)]
pub struct SyntheticInstance {
    pub w: Matrix,
    pub activations: Matrix,
    pub targets: Matrix,
    pub gradients: Vec<Matrix>,
}

impl SyntheticInstance {
    pub fn calibration_batch(&self) -> CalibrationBatch {
        CalibrationBatch::new(self.activations.clone(), self.gradients.clone())
            .expect("generated instance is well formed")
    }
}

/// Two shuffled populations of per-index scales: half at 1, half at
/// `1 / heterogeneity`.
fn two_population_scales(rng: &mut ChaCha8Rng, len: usize, heterogeneity: f64) -> Vec<f64> {
    let small = 1.0 / heterogeneity.max(1.0);
    let mut scales: Vec<f64> = (0..len)
        .map(|i| if i < len / 2 { 1.0 } else { small })
        .collect();
    scales.shuffle(rng);
    scales
}

/// Per-sample loss `l_s(W) = 0.5 * ||W x_s - y_s||^2`; used by the
/// finite-difference check of the analytic gradients.
pub fn sample_loss(w: &Matrix, x: &[f64], y: &[f64]) -> f64 {
    let wx = w.matvec(x).expect("conformable");
    wx.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() * 0.5
}

pub fn generate_synthetic(spec: &SynthSpec) -> SyntheticInstance {
    assert!(spec.rows >= 2 && spec.cols >= 2, "dimensions must be at least 2");
    assert!(spec.samples >= 2, "need at least two samples");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let m = spec.rows;
    let n = spec.cols;
    let s = spec.samples;

    let row_scales = two_population_scales(&mut rng, m, spec.heterogeneity);
    let mut w = Matrix::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            let z: f64 = rng.sample(StandardNormal);
            w.set(i, j, z * row_scales[i]);
        }
    }

    let col_scales = two_population_scales(&mut rng, n, spec.heterogeneity);
    let rho = spec.activation_corr;
    let corr_tail = (1.0 - rho * rho).sqrt();
    let mut activations = Matrix::zeros(s, n);
    for r in 0..s {
        let mut prev = 0.0;
        for j in 0..n {
            let z: f64 = rng.sample(StandardNormal);
            let u = if j == 0 { z } else { rho * prev + corr_tail * z };
            prev = u;
            activations.set(r, j, u * col_scales[j]);
        }
    }

    let mut targets = Matrix::zeros(s, m);
    let mut gradients = Vec::with_capacity(s);
    for r in 0..s {
        let x = activations.row(r).to_vec();
        let wx = w.matvec(&x).expect("conformable");
        for (i, &v) in wx.iter().enumerate() {
            let noise: f64 = rng.sample(StandardNormal);
            targets.set(r, i, v + noise * spec.noise_std);
        }
        // Analytic gradient of 0.5 * ||W x - y||^2: (W x - y) x^T.
        let mut g = Matrix::zeros(m, n);
        for i in 0..m {
            let resid = wx[i] - targets.get(r, i);
            for (j, &xv) in x.iter().enumerate() {
                g.set(i, j, resid * xv);
            }
        }
        gradients.push(g);
    }

    SyntheticInstance {
        w,
        activations,
        targets,
        gradients,
    }
}
