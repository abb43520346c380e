//! Structured mixed-precision planning: sort channels by fused sensitivity,
//! cut the matrix into 2x2 blocks, aggregate block sensitivities, and split
//! the bit budget with the closed-form square-root allocation.

use std::fmt;

use crate::linalg::Permutation;
use crate::sensitivity::SensitivityProfile;

#[derive(Debug, Clone, PartialEq)]
pub enum PlanError {
    /// A cut point fell outside the open interval (0, dim).
    CutOutOfRange { cut: usize, dim: usize },
    /// Reserved: cannot occur once the epsilon floor is applied.
    AllZeroSensitivity,
}

impl fmt::Display for PlanError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanError::CutOutOfRange { cut, dim } => {
                write!(f, "cut {cut} out of range for dimension {dim}")
            }
            PlanError::AllZeroSensitivity => write!(f, "all block sensitivities are zero"),
        }
    }
}

impl std::error::Error for PlanError {}

/// Floor added under each block sensitivity before the square root.
pub const SENSITIVITY_FLOOR: f64 = 1e-12;

/// How the 2x2 cut points are selected; the closed-form allocation assumes
/// the cuts are given.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CutStrategy {
    /// Smallest index where the cumulative (shifted-nonnegative) sensitivity
    /// reaches half the total, clamped into `[1, dim-1]`.
    Balanced,
    /// `round(fraction * dim)` clamped into `[1, dim-1]`.
    Fixed(f64),
}

/// Block order is fixed as (top-left, top-right, bottom-left, bottom-right)
/// for serialization stability.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPlan {
    pub perm_in: Permutation,
    pub perm_out: Permutation,
    pub cut_in: usize,
    pub cut_out: usize,
    pub s: [f64; 4],
    pub b_cont: [f64; 4],
    pub bit_budget: f64,
    pub codebook_sizes: [usize; 4],
    pub achieved_bits: [f64; 4],
    pub vector_len: usize,
}

impl BlockPlan {
    pub fn rows(&self) -> usize {
        self.perm_out.len()
    }

    pub fn cols(&self) -> usize {
        self.perm_in.len()
    }

    /// (row range, col range) of block `t` in the reordered matrix.
    pub fn block_extent(&self, t: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (m, n) = (self.rows(), self.cols());
        match t {
            0 => (0..self.cut_out, 0..self.cut_in),
            1 => (0..self.cut_out, self.cut_in..n),
            2 => (self.cut_out..m, 0..self.cut_in),
            3 => (self.cut_out..m, self.cut_in..n),
            _ => panic!("block index out of range"),
        }
    }

    pub fn block_elements(&self, t: usize) -> usize {
        let (r, c) = self.block_extent(t);
        r.len() * c.len()
    }

    /// Element-count-weighted average of the achieved per-element bitwidths;
    /// the budget itself weights blocks equally, so this is the true rate.
    pub fn weighted_achieved_bits(&self) -> f64 {
        let total = (self.rows() * self.cols()) as f64;
        (0..4)
            .map(|t| self.block_elements(t) as f64 * self.achieved_bits[t])
            .sum::<f64>()
            / total
    }
}

/// Sorts channels by fused sensitivity, descending; ties keep the lower
/// original index first.
pub fn reorder_channels(profile: &SensitivityProfile) -> (Permutation, Permutation) {
    (sort_desc(&profile.i_in), sort_desc(&profile.i_out))
}

fn sort_desc(values: &[f64]) -> Permutation {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    Permutation::new(idx).expect("index sort is a bijection")
}

/// Shifts a sensitivity vector so every entry is strictly positive whenever
/// any entry is nonpositive; already-positive vectors pass through unchanged.
fn shift_nonnegative(values: &[f64]) -> Vec<f64> {
    let min = values.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    if values.is_empty() || min > 0.0 {
        return values.to_vec();
    }
    values.iter().map(|&v| v - min + 1e-6).collect()
}

/// Aggregated block sensitivities `S_t = sum over the block of
/// I_out[i] * I_in[j]`, computed via the product-sum identity
/// `(sum of block rows) * (sum of block cols)`.
pub fn elementwise_block_sensitivities(
    i_out_sorted: &[f64],
    i_in_sorted: &[f64],
    cut_out: usize,
    cut_in: usize,
) -> Result<[f64; 4], PlanError> {
    let m = i_out_sorted.len();
    let n = i_in_sorted.len();
    if cut_out == 0 || cut_out >= m {
        return Err(PlanError::CutOutOfRange { cut: cut_out, dim: m });
    }
    if cut_in == 0 || cut_in >= n {
        return Err(PlanError::CutOutOfRange { cut: cut_in, dim: n });
    }
    let out = shift_nonnegative(i_out_sorted);
    let inp = shift_nonnegative(i_in_sorted);
    let top: f64 = out[..cut_out].iter().sum();
    let bottom: f64 = out[cut_out..].iter().sum();
    let left: f64 = inp[..cut_in].iter().sum();
    let right: f64 = inp[cut_in..].iter().sum();
    Ok([top * left, top * right, bottom * left, bottom * right])
}

/// Picks the 2x2 cut points along both axes from the sorted sensitivities.
pub fn choose_cut_points(
    i_out_sorted: &[f64],
    i_in_sorted: &[f64],
    strategy: CutStrategy,
) -> (usize, usize) {
    (cut_axis(i_out_sorted, strategy), cut_axis(i_in_sorted, strategy))
}

fn cut_axis(values: &[f64], strategy: CutStrategy) -> usize {
    let dim = values.len();
    debug_assert!(dim >= 2, "axis must have at least two channels");
    let clamp = |c: usize| c.clamp(1, dim - 1);
    match strategy {
        CutStrategy::Fixed(f) => clamp((f * dim as f64).round() as usize),
        CutStrategy::Balanced => {
            let shifted = shift_nonnegative(values);
            let total: f64 = shifted.iter().sum();
            if total <= 0.0 {
                return clamp(dim / 2);
            }
            let half = total / 2.0;
            let mut acc = 0.0;
            for (i, &v) in shifted.iter().enumerate() {
                acc += v;
                if acc >= half {
                    return clamp(i + 1);
                }
            }
            dim - 1
        }
    }
}

/// Closed-form budget split `b_t = B * sqrt(S_t) / sum(sqrt(S_s))`.
///
/// Each `S_t` is floored at [`SENSITIVITY_FLOOR`] so entirely insensitive
/// blocks still receive a sliver and the division is safe. The floor keeps
/// the allocation exactly scale invariant for strictly positive inputs.
pub fn allocate_bits(s: &[f64; 4], budget: f64) -> [f64; 4] {
    assert!(budget > 0.0, "bit budget must be positive");
    let roots: Vec<f64> = s.iter().map(|&v| v.max(SENSITIVITY_FLOOR).sqrt()).collect();
    let denom: f64 = roots.iter().sum();
    let mut out = [0.0; 4];
    for (b, r) in out.iter_mut().zip(&roots) {
        *b = budget * r / denom;
    }
    out
}

/// Rounds continuous bits to power-of-two codebook sizes:
/// `K_t = 2^clamp(round(b_t * v), 1, log2(K_max))`, with the achieved
/// per-element bitwidth `log2(K_t) / v`.
pub fn discretize_bits(b_cont: &[f64; 4], v: usize, k_max: usize) -> ([usize; 4], [f64; 4]) {
    assert!(v >= 1, "vector length must be at least 1");
    assert!(k_max >= 2 && k_max.is_power_of_two(), "K_max must be a power of two >= 2");
    let max_bits = k_max.trailing_zeros() as i64;
    let mut sizes = [0usize; 4];
    let mut achieved = [0.0f64; 4];
    for t in 0..4 {
        let bits = (b_cont[t] * v as f64).round() as i64;
        let bits = bits.clamp(1, max_bits);
        sizes[t] = 1usize << bits;
        achieved[t] = bits as f64 / v as f64;
    }
    (sizes, achieved)
}

/// Largest power of two not exceeding `n` (n >= 1).
pub fn pow2_floor(n: usize) -> usize {
    1usize << (usize::BITS - 1 - n.leading_zeros())
}

/// Caps each codebook size by its block's vector count so k-means always has
/// at least as many vectors as codewords, keeping sizes powers of two.
fn cap_sizes_to_capacity(plan: &mut BlockPlan) {
    let v = plan.vector_len;
    for t in 0..4 {
        let vectors = plan.block_elements(t).div_ceil(v).max(1);
        if plan.codebook_sizes[t] > vectors {
            plan.codebook_sizes[t] = pow2_floor(vectors);
            plan.achieved_bits[t] = plan.codebook_sizes[t].trailing_zeros() as f64 / v as f64;
        }
    }
}

/// A plan that skips the sensitivity machinery: identity permutations,
/// midpoint cuts, and an equal budget split. Used by the ablation arm that
/// quantizes without reordering.
pub fn uniform_plan(m: usize, n: usize, budget: f64, v: usize, k_max: usize) -> BlockPlan {
    assert!(m >= 2 && n >= 2, "matrix must be at least 2x2");
    let b_cont = [budget / 4.0; 4];
    let (sizes, achieved) = discretize_bits(&b_cont, v, k_max);
    let mut plan = BlockPlan {
        perm_in: Permutation::identity(n),
        perm_out: Permutation::identity(m),
        cut_in: n / 2,
        cut_out: m / 2,
        s: [1.0; 4],
        b_cont,
        bit_budget: budget,
        codebook_sizes: sizes,
        achieved_bits: achieved,
        vector_len: v,
    };
    cap_sizes_to_capacity(&mut plan);
    plan
}

/// Builds the full quantization plan for one weight matrix: permutations from
/// the fused profile, cut points, block sensitivities, the continuous budget
/// split, and codebook sizes.
///
/// Codebook sizes are additionally capped by each block's vector count
/// (largest power of two that does not exceed it) so k-means always has at
/// least as many vectors as codewords.
pub fn build_plan(
    profile: &SensitivityProfile,
    budget: f64,
    v: usize,
    k_max: usize,
    strategy: CutStrategy,
) -> Result<BlockPlan, PlanError> {
    let (perm_in, perm_out) = reorder_channels(profile);
    let i_in_sorted: Vec<f64> = perm_in.order().iter().map(|&i| profile.i_in[i]).collect();
    let i_out_sorted: Vec<f64> = perm_out.order().iter().map(|&i| profile.i_out[i]).collect();
    let (cut_out, cut_in) = choose_cut_points(&i_out_sorted, &i_in_sorted, strategy);
    let s = elementwise_block_sensitivities(&i_out_sorted, &i_in_sorted, cut_out, cut_in)?;
    let b_cont = allocate_bits(&s, budget);
    let (sizes, achieved) = discretize_bits(&b_cont, v, k_max);

    let mut plan = BlockPlan {
        perm_in,
        perm_out,
        cut_in,
        cut_out,
        s,
        b_cont,
        bit_budget: budget,
        codebook_sizes: sizes,
        achieved_bits: achieved,
        vector_len: v,
    };
    cap_sizes_to_capacity(&mut plan);
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn profile_with(i_in: Vec<f64>, i_out: Vec<f64>) -> SensitivityProfile {
        SensitivityProfile {
            i_g_in: vec![0.0; i_in.len()],
            i_g_out: vec![0.0; i_out.len()],
            i_l_in: vec![0.0; i_in.len()],
            i_l_out: vec![0.0; i_out.len()],
            i_in,
            i_out,
        }
    }

    #[test]
    fn reorder_sorts_descending() {
        let p = profile_with(vec![0.2, 0.9, 0.5], vec![1.0, 2.0]);
        let (perm_in, perm_out) = reorder_channels(&p);
        assert_eq!(perm_in.order(), &[1, 2, 0]);
        assert_eq!(perm_out.order(), &[1, 0]);
    }

    #[test]
    fn reorder_ties_keep_original_order() {
        let p = profile_with(vec![1.0, 1.0, 1.0], vec![3.0, 2.0, 1.0]);
        let (perm_in, perm_out) = reorder_channels(&p);
        assert_eq!(perm_in.order(), &[0, 1, 2]);
        assert_eq!(perm_out.order(), &[0, 1, 2]);
    }

    #[test]
    fn block_sensitivities_single_element_blocks() {
        let s = elementwise_block_sensitivities(&[2.0, 1.0], &[3.0, 1.0], 1, 1).unwrap();
        assert_eq!(s, [6.0, 2.0, 3.0, 1.0]);
    }

    #[test]
    fn block_sensitivities_uniform() {
        let ones = [1.0; 4];
        let s = elementwise_block_sensitivities(&ones, &ones, 2, 2).unwrap();
        assert_eq!(s, [4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn block_sensitivities_match_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let m = 2 + rng.gen_range(0..8);
            let n = 2 + rng.gen_range(0..8);
            // Log-fused scores are generically negative; cover that range.
            let i_out: Vec<f64> = (0..m).map(|_| rng.gen_range(-30.0..0.0)).collect();
            let i_in: Vec<f64> = (0..n).map(|_| rng.gen_range(-30.0..0.0)).collect();
            let co = 1 + rng.gen_range(0..m - 1);
            let ci = 1 + rng.gen_range(0..n - 1);
            let got = elementwise_block_sensitivities(&i_out, &i_in, co, ci).unwrap();

            let so = shift_nonnegative(&i_out);
            let si = shift_nonnegative(&i_in);
            let mut want = [0.0f64; 4];
            for (i, &vo) in so.iter().enumerate() {
                for (j, &vi) in si.iter().enumerate() {
                    let t = match (i < co, j < ci) {
                        (true, true) => 0,
                        (true, false) => 1,
                        (false, true) => 2,
                        (false, false) => 3,
                    };
                    want[t] += vo * vi;
                }
            }
            for t in 0..4 {
                assert!(
                    (got[t] - want[t]).abs() <= 1e-12 * want[t].abs().max(1.0),
                    "block {t}: {} vs {}",
                    got[t],
                    want[t]
                );
            }
        }
    }

    #[test]
    fn block_sensitivities_reject_bad_cuts() {
        let v = [1.0, 1.0];
        assert!(elementwise_block_sensitivities(&v, &v, 0, 1).is_err());
        assert!(elementwise_block_sensitivities(&v, &v, 1, 2).is_err());
    }

    #[test]
    fn balanced_cut_uniform_is_midpoint() {
        let ones = vec![1.0; 8];
        let (co, ci) = choose_cut_points(&ones, &ones, CutStrategy::Balanced);
        assert_eq!((co, ci), (4, 4));
    }

    #[test]
    fn fixed_cut_rounds_fraction() {
        let v = vec![1.0; 8];
        let (_, ci) = choose_cut_points(&v, &v, CutStrategy::Fixed(0.25));
        assert_eq!(ci, 2);
    }

    #[test]
    fn balanced_cut_clamps_dominant_channel() {
        let mut v = vec![0.001; 10];
        v[0] = 99.0;
        let shifted_cut = cut_axis(&v, CutStrategy::Balanced);
        assert_eq!(shifted_cut, 1);
    }

    #[test]
    fn allocate_uniform_budget() {
        assert_eq!(allocate_bits(&[1.0; 4], 8.0), [2.0; 4]);
    }

    #[test]
    fn allocate_worked_examples() {
        let b = allocate_bits(&[4.0, 1.0, 1.0, 1.0], 10.0);
        for (got, want) in b.iter().zip(&[4.0, 2.0, 2.0, 2.0]) {
            assert!((got - want).abs() <= 1e-12);
        }
        let b = allocate_bits(&[9.0, 1.0, 1.0, 1.0], 12.0);
        for (got, want) in b.iter().zip(&[6.0, 2.0, 2.0, 2.0]) {
            assert!((got - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn allocate_conserves_budget_and_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let s = [
                rng.gen_range(0.0..10.0),
                rng.gen_range(0.0..10.0),
                rng.gen_range(0.0..10.0),
                rng.gen_range(0.0..10.0),
            ];
            let budget = rng.gen_range(4.0..16.0);
            let b = allocate_bits(&s, budget);
            let sum: f64 = b.iter().sum();
            assert!((sum - budget).abs() <= 1e-9);
            for i in 0..4 {
                for j in 0..4 {
                    if s[i] > s[j] {
                        assert!(b[i] > b[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn allocate_scale_invariant() {
        let s = [0.3, 2.0, 5.5, 9.1];
        let base = allocate_bits(&s, 8.0);
        for c in [1e-3, 1.0, 1e3] {
            let scaled = [s[0] * c, s[1] * c, s[2] * c, s[3] * c];
            let b = allocate_bits(&scaled, 8.0);
            for t in 0..4 {
                assert!((b[t] - base[t]).abs() <= 1e-12, "c={c}: {} vs {}", b[t], base[t]);
            }
        }
    }

    #[test]
    fn allocate_floors_zero_blocks() {
        let b = allocate_bits(&[0.0, 1.0, 1.0, 1.0], 8.0);
        assert!(b[0] > 0.0 && b[0] < 1e-3);
        let sum: f64 = b.iter().sum();
        assert!((sum - 8.0).abs() <= 1e-9);
    }

    #[test]
    fn discretize_plain_two_bits() {
        let (k, a) = discretize_bits(&[2.0; 4], 4, 4096);
        assert_eq!(k, [256; 4]);
        assert_eq!(a, [2.0; 4]);
    }

    #[test]
    fn discretize_clamps_to_k_max() {
        let (k, a) = discretize_bits(&[4.0, 2.0, 2.0, 2.0], 4, 4096);
        assert_eq!(k, [4096, 256, 256, 256]);
        assert_eq!(a, [3.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn discretize_floor_clamp() {
        let (k, a) = discretize_bits(&[0.1, 2.0, 2.0, 2.0], 4, 4096);
        assert_eq!(k[0], 2);
        assert_eq!(a[0], 0.25);
    }

    #[test]
    fn build_plan_caps_codebooks_by_block_capacity() {
        // 4x4 matrix: blocks are tiny, so codebooks shrink to the vector count.
        let p = profile_with(vec![1.0, 0.8, 0.6, 0.4], vec![1.0, 0.8, 0.6, 0.4]);
        let plan = build_plan(&p, 8.0, 4, 4096, CutStrategy::Balanced).unwrap();
        for t in 0..4 {
            let vectors = plan.block_elements(t).div_ceil(4).max(1);
            assert!(plan.codebook_sizes[t] <= vectors.next_power_of_two());
            assert!(plan.codebook_sizes[t].is_power_of_two());
        }
        let sum: f64 = plan.b_cont.iter().sum();
        assert!((sum - 8.0).abs() <= 1e-9);
    }

    #[test]
    fn weighted_bits_accounts_for_block_sizes() {
        let p = profile_with(vec![1.0; 8], vec![1.0; 8]);
        let plan = build_plan(&p, 8.0, 4, 4096, CutStrategy::Balanced).unwrap();
        // Uniform profile: all blocks 4x4 = 16 elements, 4 vectors, so the
        // 2-bit (K=256) allocation caps at K=4, i.e. 0.5 bits per element.
        assert_eq!(plan.codebook_sizes, [4, 4, 4, 4]);
        assert!((plan.weighted_achieved_bits() - 0.5).abs() <= 1e-12);
    }
}
