//! SVD-inspired attention (SVDA) heads and the standard dot-product
//! baseline behind one interface.
//!
//! An SVDA head scores tokens as `Q Σ Kᵀ / √d_k` where Q and K are
//! row-wise ℓ2-normalized projections and Σ is a learned diagonal matrix
//! that weights each latent dimension. With Σ = I the scores reduce to
//! cosine similarity over √d_k, so a fresh head starts as pure cosine
//! attention. The baseline head is ordinary scaled dot-product attention;
//! it carries a Σ buffer for weight compatibility but ignores it.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Standard deviation for projection-weight initialization.
pub const INIT_STD: f64 = 0.02;

/// Which attention computation a head (or model) runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionVariant {
    Svda,
    Baseline,
}

impl AttentionVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionVariant::Svda => "svda",
            AttentionVariant::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "svda" => Ok(AttentionVariant::Svda),
            "baseline" => Ok(AttentionVariant::Baseline),
            other => Err(Error::Config(format!(
                "unknown attention variant {other:?} (expected svda or baseline)"
            ))),
        }
    }
}

impl std::fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-head learnable parameters.
///
/// `sigma` is the diagonal of Σ — unconstrained reals, initialized to ones.
/// It is always allocated so baseline and SVDA checkpoints stay
/// weight-compatible, but baseline forwards ignore it and baseline
/// parameter counts exclude it.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdaHeadParams {
    /// d x d_k query projection.
    pub w_q: Tensor,
    /// d x d_k key projection.
    pub w_k: Tensor,
    /// d x d_k value projection.
    pub w_v: Tensor,
    /// Diagonal of Σ, length d_k.
    pub sigma: Tensor,
}

impl SvdaHeadParams {
    pub fn init<R: Rng>(model_dim: usize, head_dim: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut draw = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
            Tensor::from_vec(shape.to_vec(), data).expect("shape matches data")
        };
        SvdaHeadParams {
            w_q: draw(&[model_dim, head_dim]),
            w_k: draw(&[model_dim, head_dim]),
            w_v: draw(&[model_dim, head_dim]),
            sigma: Tensor::ones(&[head_dim]),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.w_q.cols()
    }

    pub fn model_dim(&self) -> usize {
        self.w_q.rows()
    }

    /// Trainable scalars in this head under the given variant.
    pub fn parameter_count(&self, variant: AttentionVariant) -> usize {
        let projections = self.w_q.len() + self.w_k.len() + self.w_v.len();
        match variant {
            AttentionVariant::Svda => projections + self.sigma.len(),
            AttentionVariant::Baseline => projections,
        }
    }

    /// Registers the head on a tape. `tracked` controls gradient tracking;
    /// under the baseline variant sigma is registered untracked since it
    /// does not participate in the forward pass.
    pub fn register(&self, tape: &mut Tape, tracked: bool, variant: AttentionVariant) -> HeadVars {
        let track_sigma = tracked && variant == AttentionVariant::Svda;
        HeadVars {
            w_q: if tracked {
                tape.tracked(self.w_q.clone())
            } else {
                tape.constant(self.w_q.clone())
            },
            w_k: if tracked {
                tape.tracked(self.w_k.clone())
            } else {
                tape.constant(self.w_k.clone())
            },
            w_v: if tracked {
                tape.tracked(self.w_v.clone())
            } else {
                tape.constant(self.w_v.clone())
            },
            sigma: if track_sigma {
                tape.tracked(self.sigma.clone())
            } else {
                tape.constant(self.sigma.clone())
            },
        }
    }
}

/// Tape handles for one head's parameters.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub sigma: Var,
}

/// Everything a head forward produces, kept for diagnostics.
///
/// `q_normed`/`k_normed` are the row-normalized projections the angular
/// alignment indicator consumes; for the baseline head they are computed
/// on the side and do not feed the value path.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// n x d_k attended values.
    pub values: Var,
    /// n x n post-softmax attention map; rows sum to 1.
    pub attention_map: Var,
    /// n x n pre-softmax scores.
    pub scores: Var,
    pub q_normed: Var,
    pub k_normed: Var,
}

/// `scores[i][j] = Σ_m q[i][m] · sigma[m] · k[j][m] / √d_k`.
///
/// Callers are expected to pass unit-norm rows; the scaling matches the
/// baseline's √d_k softmax temperature so the two variants differ only in
/// structure.
pub fn svda_scores(tape: &mut Tape, q_normed: Var, sigma: Var, k_normed: Var) -> Result<Var> {
    let d_k = tape.value(q_normed).cols();
    let sigma_len = tape.value(sigma).len();
    if sigma_len != d_k || tape.value(k_normed).cols() != d_k {
        return Err(Error::shape(
            "svda_scores",
            tape.value(q_normed).shape(),
            tape.value(sigma).shape(),
        ));
    }
    let weighted = tape.scale_cols(q_normed, sigma)?;
    let k_t = tape.transpose(k_normed)?;
    let raw = tape.matmul(weighted, k_t)?;
    Ok(tape.scale(raw, 1.0 / (d_k as f64).sqrt()))
}

/// Full SVDA head: normalized projections, spectral scoring, softmax,
/// value aggregation.
pub fn svda_head_forward(tape: &mut Tape, x: Var, params: &HeadVars) -> Result<AttentionOutput> {
    let q = tape.matmul(x, params.w_q)?;
    let k = tape.matmul(x, params.w_k)?;
    let v = tape.matmul(x, params.w_v)?;
    let q_normed = tape.l2_normalize_rows(q)?;
    let k_normed = tape.l2_normalize_rows(k)?;
    let scores = svda_scores(tape, q_normed, params.sigma, k_normed)?;
    let attention_map = tape.softmax_rows(scores)?;
    let values = tape.matmul(attention_map, v)?;
    Ok(AttentionOutput {
        values,
        attention_map,
        scores,
        q_normed,
        k_normed,
    })
}

/// Standard scaled dot-product head: `softmax(Q Kᵀ / √d_k) V`.
/// `params.sigma` is ignored.
pub fn baseline_head_forward(
    tape: &mut Tape,
    x: Var,
    params: &HeadVars,
) -> Result<AttentionOutput> {
    let q = tape.matmul(x, params.w_q)?;
    let k = tape.matmul(x, params.w_k)?;
    let v = tape.matmul(x, params.w_v)?;
    let d_k = tape.value(q).cols();
    let k_t = tape.transpose(k)?;
    let raw = tape.matmul(q, k_t)?;
    let scores = tape.scale(raw, 1.0 / (d_k as f64).sqrt());
    let attention_map = tape.softmax_rows(scores)?;
    let values = tape.matmul(attention_map, v)?;
    // Measurement-only normalized projections for the alignment indicator.
    let q_normed = tape.l2_normalize_rows(q)?;
    let k_normed = tape.l2_normalize_rows(k)?;
    Ok(AttentionOutput {
        values,
        attention_map,
        scores,
        q_normed,
        k_normed,
    })
}

pub fn head_forward(
    tape: &mut Tape,
    x: Var,
    params: &HeadVars,
    variant: AttentionVariant,
) -> Result<AttentionOutput> {
    match variant {
        AttentionVariant::Svda => svda_head_forward(tape, x, params),
        AttentionVariant::Baseline => baseline_head_forward(tape, x, params),
    }
}

/// Runs every head, concatenates their values, and projects by `w_o`.
/// Returns the projected n x d output plus each head's diagnostics.
pub fn multi_head_forward(
    tape: &mut Tape,
    x: Var,
    heads: &[HeadVars],
    w_o: Var,
    variant: AttentionVariant,
) -> Result<(Var, Vec<AttentionOutput>)> {
    let d = tape.value(x).cols();
    if heads.is_empty() || d % heads.len() != 0 {
        return Err(Error::Config(format!(
            "head count {} does not divide model dim {d}",
            heads.len()
        )));
    }
    let mut outputs = Vec::with_capacity(heads.len());
    let mut values = Vec::with_capacity(heads.len());
    for params in heads {
        let out = head_forward(tape, x, params, variant)?;
        values.push(out.values);
        outputs.push(out);
    }
    let merged = tape.concat_cols(&values)?;
    let projected = tape.matmul(merged, w_o)?;
    Ok((projected, outputs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut data = vec![0.0; rows * cols];
        for row in data.chunks_mut(cols) {
            let mut norm = 0.0;
            for v in row.iter_mut() {
                *v = normal.sample(&mut rng);
                norm += *v * *v;
            }
            let norm = norm.sqrt();
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        Tensor::from_vec(vec![rows, cols], data).unwrap()
    }

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn svda_scores_orthonormal_identity() {
        // q = k with orthonormal rows and sigma = ones: scores = I / sqrt(d_k)
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::eye(4));
        let k = tape.constant(Tensor::eye(4));
        let sigma = tape.constant(Tensor::ones(&[4]));
        let s = svda_scores(&mut tape, q, sigma, k).unwrap();
        let want = 1.0 / 2.0;
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { want } else { 0.0 };
                assert!((tape.value(s).at(i, j) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn svda_scores_zero_sigma_zero_scores() {
        let mut tape = Tape::new();
        let q = tape.constant(unit_rows(5, 3, 1));
        let k = tape.constant(unit_rows(5, 3, 2));
        let sigma = tape.constant(Tensor::zeros(&[3]));
        let s = svda_scores(&mut tape, q, sigma, k).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn svda_scores_matches_triple_loop_oracle() {
        let q = unit_rows(6, 4, 3);
        let k = unit_rows(6, 4, 4);
        let sigma = random_tensor(&[4], 5);

        let mut tape = Tape::new();
        let qv = tape.constant(q.clone());
        let kv = tape.constant(k.clone());
        let sv = tape.constant(sigma.clone());
        let s = svda_scores(&mut tape, qv, sv, kv).unwrap();

        // independent oracle: literal triple loop over Σ_m q[i][m] σ[m] k[j][m]
        let scale = 1.0 / (4.0f64).sqrt();
        for i in 0..6 {
            for j in 0..6 {
                let mut acc = 0.0;
                for m in 0..4 {
                    acc += q.at(i, m) * sigma.data()[m] * k.at(j, m);
                }
                assert!((tape.value(s).at(i, j) - acc * scale).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn svda_scores_sigma_mismatch_is_error() {
        let mut tape = Tape::new();
        let q = tape.constant(unit_rows(5, 4, 1));
        let k = tape.constant(unit_rows(5, 4, 2));
        let sigma = tape.constant(Tensor::ones(&[3]));
        assert!(svda_scores(&mut tape, q, sigma, k).is_err());
    }

    #[test]
    fn sigma_ones_equals_cosine_similarity() {
        // With sigma = ones, scores are cos(q_i, k_j) / sqrt(d_k) even for
        // unnormalized projections fed through the normalizing head.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = SvdaHeadParams::init(8, 4, &mut rng);
        let x = random_tensor(&[6, 8], 11);

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let hv = params.register(&mut tape, false, AttentionVariant::Svda);
        let out = svda_head_forward(&mut tape, xv, &hv).unwrap();

        let q = x.matmul(&params.w_q).unwrap();
        let k = x.matmul(&params.w_k).unwrap();
        let scale = 1.0 / (4.0f64).sqrt();
        for i in 0..6 {
            for j in 0..6 {
                let qi = q.row(i);
                let kj = k.row(j);
                let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                let nq = qi.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nk = kj.iter().map(|v| v * v).sum::<f64>().sqrt();
                let cosine = dot / (nq * nk);
                assert!(
                    (tape.value(out.scores).at(i, j) - cosine * scale).abs() < 1e-12,
                    "cosine mismatch at ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn single_token_attention_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = SvdaHeadParams::init(8, 4, &mut rng);
        for variant in [AttentionVariant::Svda, AttentionVariant::Baseline] {
            let mut tape = Tape::new();
            let x = tape.constant(random_tensor(&[1, 8], 5));
            let hv = params.register(&mut tape, false, variant);
            let out = head_forward(&mut tape, x, &hv, variant).unwrap();
            assert_eq!(tape.value(out.attention_map).data(), &[1.0]);
        }
    }

    #[test]
    fn duplicated_tokens_get_identical_map_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = SvdaHeadParams::init(8, 4, &mut rng);
        let mut x = random_tensor(&[5, 8], 13);
        let row1: Vec<f64> = x.row(0).to_vec();
        for (j, v) in row1.iter().enumerate() {
            x.set(1, j, *v);
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let hv = params.register(&mut tape, false, AttentionVariant::Svda);
        let out = svda_head_forward(&mut tape, xv, &hv).unwrap();
        let map = tape.value(out.attention_map);
        for j in 0..5 {
            assert!((map.at(0, j) - map.at(1, j)).abs() < 1e-15);
        }
    }

    #[test]
    fn svda_head_matches_compositional_oracle() {
        // Step-by-step recomposition from module operations on a fresh tape.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = SvdaHeadParams::init(16, 8, &mut rng);
        let x = random_tensor(&[8, 16], 22);

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let hv = params.register(&mut tape, false, AttentionVariant::Svda);
        let out = svda_head_forward(&mut tape, xv, &hv).unwrap();

        let mut oracle = Tape::new();
        let xo = oracle.constant(x);
        let wq = oracle.constant(params.w_q.clone());
        let wk = oracle.constant(params.w_k.clone());
        let wv = oracle.constant(params.w_v.clone());
        let sg = oracle.constant(params.sigma.clone());
        let q = oracle.matmul(xo, wq).unwrap();
        let q = oracle.l2_normalize_rows(q).unwrap();
        let k = oracle.matmul(xo, wk).unwrap();
        let k = oracle.l2_normalize_rows(k).unwrap();
        let s = svda_scores(&mut oracle, q, sg, k).unwrap();
        let a = oracle.softmax_rows(s).unwrap();
        let v = oracle.matmul(xo, wv).unwrap();
        let vals = oracle.matmul(a, v).unwrap();

        assert!(tape.value(out.values).max_abs_diff(oracle.value(vals)) < 1e-12);
        assert!(tape.value(out.attention_map).max_abs_diff(oracle.value(a)) < 1e-12);
    }

    #[test]
    fn baseline_uniform_attention_with_zero_projections() {
        let params = SvdaHeadParams {
            w_q: Tensor::zeros(&[8, 4]),
            w_k: Tensor::zeros(&[8, 4]),
            w_v: Tensor::zeros(&[8, 4]),
            sigma: Tensor::ones(&[4]),
        };
        let mut tape = Tape::new();
        let x = tape.constant(random_tensor(&[5, 8], 31));
        let hv = params.register(&mut tape, false, AttentionVariant::Baseline);
        let out = baseline_head_forward(&mut tape, x, &hv).unwrap();
        for &v in tape.value(out.attention_map).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn baseline_matches_textbook_formula_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let params = SvdaHeadParams::init(8, 4, &mut rng);
        let x = random_tensor(&[6, 8], 42);

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let hv = params.register(&mut tape, false, AttentionVariant::Baseline);
        let out = baseline_head_forward(&mut tape, xv, &hv).unwrap();

        // direct textbook formula on raw tensors
        let q = x.matmul(&params.w_q).unwrap();
        let k = x.matmul(&params.w_k).unwrap();
        let v = x.matmul(&params.w_v).unwrap();
        let mut scores = q.matmul(&k.transposed()).unwrap();
        for s in scores.data_mut() {
            *s /= 2.0; // sqrt(4)
        }
        let mut map = scores.clone();
        for row in map.data_mut().chunks_mut(6) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for val in row.iter_mut() {
                *val = (*val - max).exp();
                sum += *val;
            }
            for val in row.iter_mut() {
                *val /= sum;
            }
        }
        let values = map.matmul(&v).unwrap();
        assert!(tape.value(out.values).max_abs_diff(&values) < 1e-12);
        assert!(tape.value(out.attention_map).max_abs_diff(&map) < 1e-12);
    }

    #[test]
    fn attention_map_invariant_to_positive_query_rescale() {
        // Scaling W_q (hence x W_q) by c > 0 leaves the SVDA map unchanged.
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let params = SvdaHeadParams::init(8, 4, &mut rng);
        let x = random_tensor(&[6, 8], 56);

        let run = |scale: f64| {
            let mut p = params.clone();
            for v in p.w_q.data_mut() {
                *v *= scale;
            }
            for v in p.w_k.data_mut() {
                *v *= scale * 2.0;
            }
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let hv = p.register(&mut tape, false, AttentionVariant::Svda);
            let out = svda_head_forward(&mut tape, xv, &hv).unwrap();
            tape.value(out.attention_map).clone()
        };
        let base = run(1.0);
        let scaled = run(37.5);
        assert!(base.max_abs_diff(&scaled) < 1e-9);
    }

    #[test]
    fn token_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let params = SvdaHeadParams::init(8, 4, &mut rng);
        let x = random_tensor(&[5, 8], 62);
        let perm = [3usize, 0, 4, 1, 2];

        let mut px = Tensor::zeros(&[5, 8]);
        for (to, &from) in perm.iter().enumerate() {
            for j in 0..8 {
                px.set(to, j, x.at(from, j));
            }
        }

        let map_of = |input: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.constant(input.clone());
            let hv = params.register(&mut tape, false, AttentionVariant::Svda);
            let out = svda_head_forward(&mut tape, xv, &hv).unwrap();
            tape.value(out.attention_map).clone()
        };
        let base = map_of(&x);
        let permuted = map_of(&px);
        for i in 0..5 {
            for j in 0..5 {
                let diff = (permuted.at(i, j) - base.at(perm[i], perm[j])).abs();
                assert!(diff <= 1e-12, "equivariance broken at ({i},{j})");
            }
        }
    }

    #[test]
    fn svda_parameter_count_exceeds_baseline_by_head_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let params = SvdaHeadParams::init(32, 8, &mut rng);
        let svda = params.parameter_count(AttentionVariant::Svda);
        let baseline = params.parameter_count(AttentionVariant::Baseline);
        assert_eq!(svda, baseline + 8);
    }

    #[test]
    fn multi_head_single_head_identity_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let params = SvdaHeadParams::init(8, 8, &mut rng);
        let x = random_tensor(&[5, 8], 82);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let hv = params.register(&mut tape, false, AttentionVariant::Svda);
        let w_o = tape.constant(Tensor::eye(8));
        let (merged, outs) =
            multi_head_forward(&mut tape, xv, &[hv], w_o, AttentionVariant::Svda).unwrap();
        assert_eq!(outs.len(), 1);
        assert!(tape.value(merged).max_abs_diff(tape.value(outs[0].values)) < 1e-15);
    }

    #[test]
    fn multi_head_slices_match_independent_single_heads() {
        let d = 32;
        let heads = 4;
        let d_k = d / heads;
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let head_params: Vec<SvdaHeadParams> = (0..heads)
            .map(|_| SvdaHeadParams::init(d, d_k, &mut rng))
            .collect();
        let x = random_tensor(&[7, d], 92);

        // multi-head with identity output projection exposes raw head slices
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let hvs: Vec<HeadVars> = head_params
            .iter()
            .map(|p| p.register(&mut tape, false, AttentionVariant::Svda))
            .collect();
        let w_o = tape.constant(Tensor::eye(d));
        let (merged, _) =
            multi_head_forward(&mut tape, xv, &hvs, w_o, AttentionVariant::Svda).unwrap();
        let merged = tape.value(merged).clone();

        for (h, p) in head_params.iter().enumerate() {
            let mut solo = Tape::new();
            let xv = solo.constant(x.clone());
            let hv = p.register(&mut solo, false, AttentionVariant::Svda);
            let out = svda_head_forward(&mut solo, xv, &hv).unwrap();
            let vals = solo.value(out.values);
            for i in 0..7 {
                for j in 0..d_k {
                    let diff = (merged.at(i, h * d_k + j) - vals.at(i, j)).abs();
                    assert!(diff < 1e-12);
                }
            }
        }
    }

    #[test]
    fn multi_head_rejects_nondividing_head_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let p = SvdaHeadParams::init(8, 3, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(random_tensor(&[4, 8], 100));
        let hv = p.register(&mut tape, false, AttentionVariant::Svda);
        let w_o = tape.constant(Tensor::eye(8));
        let err = multi_head_forward(&mut tape, x, &[hv, hv, hv], w_o, AttentionVariant::Svda);
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
