//! Vector-quantization core: reshaping weights into length-`v` blocks with
//! zero padding, k-means++ codebook training, nearest-codeword assignment, and
//! reconstruction.
//!
//! Training is sequential and fully determined by the seed (ChaCha8 stream),
//! so identical inputs give bitwise-identical codebooks.

use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::linalg::Matrix;

/// Error type for vector-quantization operations.
#[derive(Debug, Clone, PartialEq)]
pub enum VqError {
    /// More codewords requested than there are vectors; the caller must
    /// reduce `k` — there is no silent clamp.
    InvalidK { k: usize, blocks: usize },
    /// Vector lengths or counts do not conform.
    DimensionMismatch { expected: usize, got: usize },
}

impl fmt::Display for VqError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VqError::InvalidK { k, blocks } => {
                write!(f, "cannot fit {k} codewords to {blocks} vectors")
            }
            VqError::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
        }
    }
}

impl std::error::Error for VqError {}

/// A weight matrix reshaped into `M` sub-vectors of length `v`.
///
/// The row-major flattening of the source is chopped into length-`v` rows;
/// the last row is padded with `pad_count` zeros when `v` does not divide
/// the element count. Padding zeros are real entries of the last block and
/// participate in distances; they are dropped only at reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockView {
    blocks: Matrix,
    original_rows: usize,
    original_cols: usize,
    pad_count: usize,
}

impl BlockView {
    pub fn blocks(&self) -> &Matrix {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.rows() == 0
    }

    pub fn vector_len(&self) -> usize {
        self.blocks.cols()
    }

    pub fn original_rows(&self) -> usize {
        self.original_rows
    }

    pub fn original_cols(&self) -> usize {
        self.original_cols
    }

    pub fn pad_count(&self) -> usize {
        self.pad_count
    }

    pub fn block(&self, i: usize) -> &[f64] {
        self.blocks.row(i)
    }
}

/// A set of `K` prototype vectors of length `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    codewords: Matrix,
}

impl Codebook {
    pub fn new(codewords: Matrix) -> Self {
        Self { codewords }
    }

    pub fn len(&self) -> usize {
        self.codewords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.codewords.rows() == 0
    }

    pub fn vector_len(&self) -> usize {
        self.codewords.cols()
    }

    pub fn codeword(&self, j: usize) -> &[f64] {
        self.codewords.row(j)
    }

    pub fn codewords(&self) -> &Matrix {
        &self.codewords
    }

    /// Bits needed to store one index; equals `log2(K)` when `K` is a power
    /// of two, which is the only case the pipeline produces.
    pub fn index_bits(&self) -> u32 {
        let k = self.len().max(1);
        usize::BITS - (k - 1).leading_zeros().min(usize::BITS)
    }
}

/// Per-block codeword indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    indices: Vec<usize>,
}

impl Assignment {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Chops the row-major flattening of `w` into length-`v` blocks, zero-padding
/// the tail. Always succeeds; `unreshape` of the result recovers `w` exactly.
pub fn reshape_blocks(w: &Matrix, v: usize) -> BlockView {
    assert!(v >= 1, "vector length must be at least 1");
    let total = w.rows() * w.cols();
    let m = total.div_ceil(v);
    let pad_count = m * v - total;
    let mut data = Vec::with_capacity(m * v);
    data.extend_from_slice(w.data());
    data.resize(m * v, 0.0);
    BlockView {
        blocks: Matrix::from_raw(m, v, data),
        original_rows: w.rows(),
        original_cols: w.cols(),
        pad_count,
    }
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// k-means++ initialization with the standard D^2 sampling.
fn init_plus_plus(blocks: &BlockView, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let m = blocks.len();
    let v = blocks.vector_len();
    let mut centers = Matrix::zeros(k, v);
    let first = rng.gen_range(0..m);
    centers.data_mut()[0..v].copy_from_slice(blocks.block(first));

    let mut d2 = vec![f64::INFINITY; m];
    for c in 1..k {
        let prev: Vec<f64> = centers.row(c - 1).to_vec();
        let mut total = 0.0;
        for i in 0..m {
            let d = dist_sq(blocks.block(i), &prev);
            if d < d2[i] {
                d2[i] = d;
            }
            total += d2[i];
        }
        let pick = if total > 0.0 {
            // Cumulative scan keeps sampling deterministic.
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = m - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // Every point already coincides with a center; any choice is exact.
            rng.gen_range(0..m)
        };
        centers.data_mut()[c * v..(c + 1) * v].copy_from_slice(blocks.block(pick));
    }
    centers
}

/// Trains a codebook of `k` codewords with k-means++ initialization followed
/// by `iters` Lloyd iterations. Returns the codebook together with the total
/// distortion recorded after each assignment pass.
///
/// Empty clusters are re-seeded at the point with the largest current
/// quantization error (ties to the lowest point index).
pub fn kmeans_fit_traced(
    blocks: &BlockView,
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<(Codebook, Vec<f64>), VqError> {
    let m = blocks.len();
    if k < 1 || k > m {
        return Err(VqError::InvalidK { k, blocks: m });
    }
    let v = blocks.vector_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = init_plus_plus(blocks, k, &mut rng);

    let mut trace = Vec::with_capacity(iters);
    let mut assign = vec![0usize; m];
    let mut errors = vec![0.0f64; m];
    for _ in 0..iters {
        // Assignment pass.
        let mut distortion = 0.0;
        for i in 0..m {
            let b = blocks.block(i);
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for j in 0..k {
                let d = dist_sq(b, centers.row(j));
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            assign[i] = best;
            errors[i] = best_d;
            distortion += best_d;
        }
        trace.push(distortion);

        // Centroid update: exact means accumulated in point order.
        let mut sums = vec![0.0f64; k * v];
        let mut counts = vec![0usize; k];
        for i in 0..m {
            let b = blocks.block(i);
            let dst = &mut sums[assign[i] * v..(assign[i] + 1) * v];
            for (s, &x) in dst.iter_mut().zip(b) {
                *s += x;
            }
            counts[assign[i]] += 1;
        }
        let mut used = vec![false; m];
        for j in 0..k {
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                let row = &mut centers.data_mut()[j * v..(j + 1) * v];
                for (c, &s) in row.iter_mut().zip(&sums[j * v..(j + 1) * v]) {
                    *c = s * inv;
                }
            } else {
                // Re-seed at the worst-served point not already taken.
                let mut worst = 0usize;
                let mut worst_e = -1.0;
                for i in 0..m {
                    if !used[i] && errors[i] > worst_e {
                        worst_e = errors[i];
                        worst = i;
                    }
                }
                used[worst] = true;
                let row = &mut centers.data_mut()[j * v..(j + 1) * v];
                row.copy_from_slice(blocks.block(worst));
            }
        }
    }
    Ok((Codebook::new(centers), trace))
}

/// Trains a codebook; see [`kmeans_fit_traced`] for the traced variant.
pub fn kmeans_fit(blocks: &BlockView, k: usize, iters: usize, seed: u64) -> Result<Codebook, VqError> {
    kmeans_fit_traced(blocks, k, iters, seed).map(|(c, _)| c)
}

/// Assigns each block its nearest codeword under squared Euclidean distance.
/// Exact ties go to the lowest codeword index.
pub fn vq_assign(blocks: &BlockView, codebook: &Codebook) -> Result<Assignment, VqError> {
    if codebook.vector_len() != blocks.vector_len() {
        return Err(VqError::DimensionMismatch {
            expected: blocks.vector_len(),
            got: codebook.vector_len(),
        });
    }
    let k = codebook.len();
    let mut indices = Vec::with_capacity(blocks.len());
    for i in 0..blocks.len() {
        let b = blocks.block(i);
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for j in 0..k {
            let d = dist_sq(b, codebook.codeword(j));
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        indices.push(best);
    }
    Ok(Assignment { indices })
}

/// Replaces each block with its codeword, drops the padding, and reshapes
/// row-major to `m x n`.
pub fn vq_reconstruct(
    assignment: &Assignment,
    codebook: &Codebook,
    m: usize,
    n: usize,
) -> Result<Matrix, VqError> {
    let v = codebook.vector_len();
    let total = m * n;
    if assignment.len() * v < total {
        return Err(VqError::DimensionMismatch {
            expected: total.div_ceil(v.max(1)),
            got: assignment.len(),
        });
    }
    let mut data = Vec::with_capacity(assignment.len() * v);
    for &j in assignment.indices() {
        if j >= codebook.len() {
            return Err(VqError::DimensionMismatch {
                expected: codebook.len(),
                got: j,
            });
        }
        data.extend_from_slice(codebook.codeword(j));
    }
    data.truncate(total);
    Ok(Matrix::from_raw(m, n, data))
}

/// Total squared distance between blocks and their assigned codewords.
pub fn total_distortion(blocks: &BlockView, codebook: &Codebook, assignment: &Assignment) -> f64 {
    let mut acc = 0.0;
    for (i, &j) in assignment.indices().iter().enumerate() {
        acc += dist_sq(blocks.block(i), codebook.codeword(j));
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blocks_of(rows: &[&[f64]]) -> BlockView {
        let m = Matrix::from_rows(rows);
        reshape_blocks(&m, rows[0].len())
    }

    #[test]
    fn reshape_pads_tail_with_zeros() {
        let w = Matrix::from_rows(&[&[1.0, 2.0, 3.0, 4.0, 5.0]]);
        let bv = reshape_blocks(&w, 4);
        assert_eq!(bv.len(), 2);
        assert_eq!(bv.pad_count(), 3);
        assert_eq!(bv.block(1), &[5.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn reshape_exact_fit() {
        let w = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let bv = reshape_blocks(&w, 4);
        assert_eq!(bv.len(), 1);
        assert_eq!(bv.pad_count(), 0);
        assert_eq!(bv.block(0), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn reshape_scalar_blocks() {
        let w = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let bv = reshape_blocks(&w, 1);
        assert_eq!(bv.len(), 4);
        let flat: Vec<f64> = (0..4).map(|i| bv.block(i)[0]).collect();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn kmeans_separates_distinct_points() {
        let bv = blocks_of(&[&[0.0, 0.0], &[10.0, 10.0]]);
        let (cb, trace) = kmeans_fit_traced(&bv, 2, 10, 1).unwrap();
        let a = vq_assign(&bv, &cb).unwrap();
        assert_eq!(total_distortion(&bv, &cb, &a), 0.0);
        assert_eq!(*trace.last().unwrap(), 0.0);
    }

    #[test]
    fn kmeans_single_centroid_is_mean() {
        let bv = blocks_of(&[&[0.0, 0.0], &[2.0, 0.0]]);
        let (cb, trace) = kmeans_fit_traced(&bv, 1, 5, 3).unwrap();
        assert_eq!(cb.codeword(0), &[1.0, 0.0]);
        assert_eq!(*trace.last().unwrap(), 2.0);
    }

    #[test]
    fn kmeans_rejects_k_above_m() {
        let bv = blocks_of(&[&[0.0], &[1.0]]);
        assert_eq!(
            kmeans_fit(&bv, 3, 5, 0).unwrap_err(),
            VqError::InvalidK { k: 3, blocks: 2 }
        );
    }

    #[test]
    fn assign_tie_breaks_to_lowest_index() {
        let bv = blocks_of(&[&[0.5, 0.5]]);
        let cb = Codebook::new(Matrix::from_rows(&[&[0.0, 0.0], &[1.0, 1.0]]));
        let a = vq_assign(&bv, &cb).unwrap();
        assert_eq!(a.indices(), &[0]);
    }

    #[test]
    fn assign_matches_given_codewords() {
        let bv = blocks_of(&[&[0.0, 0.0], &[1.0, 1.0]]);
        let cb = Codebook::new(Matrix::from_rows(&[&[0.0, 0.0], &[1.0, 1.0]]));
        assert_eq!(vq_assign(&bv, &cb).unwrap().indices(), &[0, 1]);
    }

    #[test]
    fn reconstruct_reshapes_row_major() {
        let cb = Codebook::new(Matrix::from_rows(&[&[1.0, 2.0, 3.0, 4.0]]));
        let a = Assignment { indices: vec![0] };
        let w = vq_reconstruct(&a, &cb, 2, 2).unwrap();
        assert_eq!(w, Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
    }

    #[test]
    fn reconstruct_drops_padding() {
        let cb = Codebook::new(Matrix::from_rows(&[&[5.0, 6.0, 7.0, 0.0]]));
        let a = Assignment { indices: vec![0] };
        let w = vq_reconstruct(&a, &cb, 1, 3).unwrap();
        assert_eq!(w, Matrix::from_rows(&[&[5.0, 6.0, 7.0]]));
    }

    #[test]
    fn index_bits_of_power_of_two_codebooks() {
        for bits in 0..8u32 {
            let k = 1usize << bits;
            let cb = Codebook::new(Matrix::zeros(k, 4));
            assert_eq!(cb.index_bits(), bits);
        }
    }
}
