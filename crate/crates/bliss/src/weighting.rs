//! Importance weights: softmax over score-model outputs, including the
//! sharded three-phase evaluation (local reduce, gather, finalize) and the
//! softmax-Jacobian contraction the stochastic hypergradient needs.

use crate::autodiff::{self, ParamVector};
use crate::error::{BlissError, Result};

/// Scores held by one logical shard.
#[derive(Clone, Debug)]
pub struct ScoreBatch {
    pub shard_id: usize,
    pub sample_indices: Vec<usize>,
    pub scores: Vec<f64>,
}

impl ScoreBatch {
    pub fn new(shard_id: usize, sample_indices: Vec<usize>, scores: Vec<f64>) -> Result<Self> {
        if sample_indices.len() != scores.len() {
            return Err(BlissError::Usage("index/score length mismatch".into()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(BlissError::Usage("non-finite score".into()));
        }
        Ok(ScoreBatch { shard_id, sample_indices, scores })
    }
}

/// Per-shard sample counts; sizes must sum to the batch size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShardLayout {
    pub counts: Vec<usize>,
}

impl ShardLayout {
    pub fn single(n: usize) -> ShardLayout {
        ShardLayout { counts: vec![n] }
    }

    pub fn num_shards(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Softmax weights P_i with the denominator reported in the unshifted
/// convention (sum of exp of raw scores).
#[derive(Clone, Debug)]
pub struct ImportanceWeights {
    pub weights: Vec<f64>,
    pub denominator: f64,
    pub layout: ShardLayout,
}

/// Numerically stabilized softmax over one batch of scores.
pub fn softmax_weights(scores: &[f64]) -> Result<ImportanceWeights> {
    if scores.is_empty() {
        return Err(BlissError::Usage("softmax over empty batch".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(BlissError::Usage("non-finite score".into()));
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let shifted_sum: f64 = exps.iter().sum();
    let weights = exps.iter().map(|e| e / shifted_sum).collect();
    Ok(ImportanceWeights {
        weights,
        denominator: shifted_sum * max.exp(),
        layout: ShardLayout::single(scores.len()),
    })
}

/// Three-phase sharded softmax mirroring the distributed pattern: each shard
/// reduces locally to (max, shifted exp-sum), one gather combines those pairs
/// in ascending shard order, then each shard finalizes its local weights with
/// the global terms. Equals the monolithic softmax over the concatenation.
pub fn sharded_weights(shards: &[ScoreBatch]) -> Result<ImportanceWeights> {
    if shards.is_empty() || shards.iter().all(|s| s.scores.is_empty()) {
        return Err(BlissError::Usage("softmax over empty batch".into()));
    }
    let mut sorted: Vec<&ScoreBatch> = shards.iter().collect();
    sorted.sort_by_key(|s| s.shard_id);
    for (i, s) in sorted.iter().enumerate() {
        if s.shard_id != i {
            return Err(BlissError::Usage(format!(
                "shard ids must be 0..n, got {} at position {i}",
                s.shard_id
            )));
        }
    }

    // Phase 1: local stabilized reductions.
    let locals: Vec<(f64, f64)> = sorted
        .iter()
        .map(|s| {
            let lmax = s.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lsum: f64 = s.scores.iter().map(|x| (x - lmax).exp()).sum();
            (lmax, lsum)
        })
        .collect();

    // Phase 2: gather (max, sum) pairs; global reduction in shard order.
    let gmax = locals
        .iter()
        .filter(|(m, _)| m.is_finite())
        .map(|(m, _)| *m)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut gsum = 0.0;
    for (lmax, lsum) in &locals {
        if lmax.is_finite() {
            gsum += (lmax - gmax).exp() * lsum;
        }
    }

    // Phase 3: finalize local weights with the global denominator.
    let mut weights = Vec::with_capacity(sorted.iter().map(|s| s.scores.len()).sum());
    for s in &sorted {
        for x in &s.scores {
            weights.push((x - gmax).exp() / gsum);
        }
    }
    Ok(ImportanceWeights {
        weights,
        denominator: gsum * gmax.exp(),
        layout: ShardLayout { counts: sorted.iter().map(|s| s.scores.len()).collect() },
    })
}

/// Softmax-Jacobian contraction of Eq. 5's bracket:
/// sum_i P_i c_i grad(h_i) - (sum_i P_i c_i) (sum_j P_j grad(h_j)),
/// computed in the fused single-pass form sum_i P_i (c_i - cbar) grad(h_i).
/// The leading minus of the hypergradient is applied by the caller.
pub fn weight_jacobian_contraction(
    weights: &ImportanceWeights,
    head_grads: &[ParamVector],
    scalars: &[f64],
) -> Result<ParamVector> {
    let n = weights.weights.len();
    if head_grads.len() != n || scalars.len() != n {
        return Err(BlissError::Usage(format!(
            "contraction needs matched lengths, got {n} weights, {} grads, {} scalars",
            head_grads.len(),
            scalars.len()
        )));
    }
    let cbar: f64 = weights.weights.iter().zip(scalars).map(|(p, c)| p * c).sum();
    let mut out = head_grads[0].zeros_like();
    for ((p, c), grad) in weights.weights.iter().zip(scalars).zip(head_grads) {
        out = autodiff::axpy(p * (c - cbar), grad, &out)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_scores_give_uniform_weights() {
        let w = softmax_weights(&[0.4; 8]).unwrap();
        for p in &w.weights {
            assert!((p - 0.125).abs() < 1e-15);
        }
    }

    #[test]
    fn two_point_analytic_softmax() {
        let w = softmax_weights(&[std::f64::consts::LN_2, 0.0]).unwrap();
        assert!((w.weights[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w.weights[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((w.denominator - 3.0).abs() < 1e-12);
    }

    #[test]
    fn shift_invariance() {
        let scores = [0.1, 0.7, 0.3, 0.9, 0.5];
        let a = softmax_weights(&scores).unwrap();
        let shifted: Vec<f64> = scores.iter().map(|s| s + 123.456).collect();
        let b = softmax_weights(&shifted).unwrap();
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_sum_to_one_positive_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let scores: Vec<f64> = (0..16).map(|_| rng.random_range(-5.0..5.0)).collect();
            let w = softmax_weights(&scores).unwrap();
            let sum: f64 = w.weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-10);
            assert!(w.weights.iter().all(|&p| p > 0.0));
            for i in 0..16 {
                for j in 0..16 {
                    if scores[i] > scores[j] {
                        assert!(w.weights[i] > w.weights[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn empty_batch_is_usage_error() {
        assert!(matches!(softmax_weights(&[]), Err(BlissError::Usage(_))));
        assert!(matches!(sharded_weights(&[]), Err(BlissError::Usage(_))));
    }

    fn split_into(scores: &[f64], shards: usize) -> Vec<ScoreBatch> {
        let per = scores.len().div_ceil(shards);
        scores
            .chunks(per)
            .enumerate()
            .map(|(i, chunk)| {
                ScoreBatch::new(i, (i * per..i * per + chunk.len()).collect(), chunk.to_vec())
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn single_shard_matches_monolithic_exactly() {
        let scores = [0.2, 0.9, 0.1, 0.5];
        let mono = softmax_weights(&scores).unwrap();
        let shard = sharded_weights(&split_into(&scores, 1)).unwrap();
        assert_eq!(mono.weights, shard.weights);
    }

    #[test]
    fn two_point_split_across_shards() {
        let shards = vec![
            ScoreBatch::new(0, vec![0], vec![std::f64::consts::LN_2]).unwrap(),
            ScoreBatch::new(1, vec![1], vec![0.0]).unwrap(),
        ];
        let w = sharded_weights(&shards).unwrap();
        assert!((w.weights[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w.weights[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn shard_count_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scores: Vec<f64> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mono = softmax_weights(&scores).unwrap();
        for shards in [1usize, 2, 4, 8] {
            let w = sharded_weights(&split_into(&scores, shards)).unwrap();
            assert_eq!(w.layout.num_shards(), shards);
            assert_eq!(w.layout.total(), 64);
            let sum: f64 = w.weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-10);
            for (a, b) in mono.weights.iter().zip(&w.weights) {
                assert!((a - b).abs() < 1e-12, "{shards} shards: {a} vs {b}");
            }
        }
    }

    fn grad_of(vals: &[f64]) -> ParamVector {
        let mut pv = ParamVector::new();
        pv.push("g", Tensor::new(vec![vals.len()], vals.to_vec())).unwrap();
        pv
    }

    #[test]
    fn constant_scalars_are_annihilated() {
        let w = softmax_weights(&[0.3, 0.8, 0.1]).unwrap();
        let grads: Vec<ParamVector> =
            (0..3).map(|i| grad_of(&[i as f64 + 1.0, -2.0 * i as f64])).collect();
        let out = weight_jacobian_contraction(&w, &grads, &[7.5; 3]).unwrap();
        for x in out.flat() {
            assert!(x.abs() <= 1e-12, "constant c leaked: {x}");
        }
    }

    #[test]
    fn single_sample_contraction_is_exactly_zero() {
        let w = softmax_weights(&[0.42]).unwrap();
        assert_eq!(w.weights[0], 1.0);
        let out = weight_jacobian_contraction(&w, &[grad_of(&[3.0, -1.0])], &[2.0]).unwrap();
        assert_eq!(out.flat(), vec![0.0, 0.0]);
    }

    #[test]
    fn length_mismatch_is_usage_error() {
        let w = softmax_weights(&[0.1, 0.2]).unwrap();
        let r = weight_jacobian_contraction(&w, &[grad_of(&[1.0])], &[1.0, 2.0]);
        assert!(matches!(r, Err(BlissError::Usage(_))));
    }
}
