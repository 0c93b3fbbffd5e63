use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::scalar::Scalar;

use super::RoutingTrace;

/// Per-layer expert affinity scores over a calibration set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinitySummary {
    /// `scores[l][i]` is `s_i^{(l)}`.
    pub scores: Vec<Vec<f64>>,
    pub tokens: usize,
    pub sequences: usize,
}

impl AffinitySummary {
    pub fn num_layers(&self) -> usize {
        self.scores.len()
    }

    pub fn num_experts(&self) -> usize {
        self.scores.first().map(Vec::len).unwrap_or(0)
    }

    /// Experts of each layer ordered by descending score, ties to the lower index.
    pub fn ranked(&self, layer: usize) -> Vec<usize> {
        let s = &self.scores[layer];
        let mut order: Vec<usize> = (0..s.len()).collect();
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        order
    }

    /// Top-`k` expert set of every layer.
    pub fn top_sets(&self, k: usize) -> Vec<Vec<usize>> {
        top_k_sets(&self.scores, k)
    }
}

/// Per layer, the indices of the `k` largest values (ties to the lower
/// index), returned in ascending index order.
pub fn top_k_sets(per_layer: &[Vec<f64>], k: usize) -> Vec<Vec<usize>> {
    per_layer
        .iter()
        .map(|s| {
            let mut order: Vec<usize> = (0..s.len()).collect();
            order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
            order.truncate(k);
            order.sort_unstable();
            order
        })
        .collect()
}

/// `s_i^{(l)} = (1/Z) sum_j (1/L_j) sum_t g_{i,t}^{(l)}`: the mean over
/// sequences of each sequence's mean gate value.
pub fn affinity_scores<S: Scalar>(trace: &RoutingTrace<S>) -> Result<AffinitySummary> {
    let n = trace.num_experts();
    let z = trace.num_sequences();
    let mut scores = Vec::with_capacity(trace.num_layers());
    for l in 0..trace.num_layers() {
        let mut layer = vec![0.0; n];
        for block in trace.layer(l) {
            let len = block.shape()[0];
            let mut seq = vec![0.0; n];
            for row in block.data().chunks(n) {
                for (acc, v) in seq.iter_mut().zip(row) {
                    *acc += v.to_f64_lossy();
                }
            }
            for (acc, s) in layer.iter_mut().zip(seq) {
                *acc += s / len as f64;
            }
        }
        layer.iter_mut().for_each(|v| *v /= z as f64);
        scores.push(layer);
    }
    Ok(AffinitySummary {
        scores,
        tokens: trace.num_tokens(),
        sequences: z,
    })
}

/// Fraction of token slots in which each expert is selected (non-zero gate).
/// Each layer's proportions sum to `K`.
pub fn token_assignment_proportion<S: Scalar>(trace: &RoutingTrace<S>) -> Result<Vec<Vec<f64>>> {
    let n = trace.num_experts();
    let total = trace.num_tokens() as f64;
    let mut out = Vec::with_capacity(trace.num_layers());
    for l in 0..trace.num_layers() {
        let mut counts = vec![0usize; n];
        for block in trace.layer(l) {
            for (j, v) in block.data().iter().enumerate() {
                if *v > S::zero() {
                    counts[j % n] += 1;
                }
            }
        }
        out.push(counts.into_iter().map(|c| c as f64 / total).collect());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn block(rows: &[&[f64]]) -> Tensor<f64> {
        let n = rows[0].len();
        Tensor::matrix(rows.len(), n, rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn single_token_affinity_is_the_gate_row() {
        let t = RoutingTrace::new(vec![vec![block(&[&[0.7, 0.3, 0.0, 0.0]])]]).unwrap();
        assert_eq!(affinity_scores(&t).unwrap().scores[0], vec![0.7, 0.3, 0.0, 0.0]);
    }

    #[test]
    fn sequences_are_weighted_equally() {
        let t = RoutingTrace::new(vec![vec![block(&[&[1.0, 0.0]]), block(&[&[0.0, 1.0], &[0.0, 1.0]])]]).unwrap();
        let s = affinity_scores(&t).unwrap();
        assert_eq!(s.scores[0], vec![0.5, 0.5]);
        assert_eq!(s.tokens, 3);
    }

    #[test]
    fn one_hot_routing_proportion() {
        let t = RoutingTrace::new(vec![vec![block(&[&[0.0, 0.0, 0.0, 0.9], &[0.0, 0.0, 0.0, 0.8]])]]).unwrap();
        assert_eq!(token_assignment_proportion(&t).unwrap()[0], vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn ranking_breaks_ties_low() {
        let s = AffinitySummary {
            scores: vec![vec![0.1, 0.3, 0.3, 0.2]],
            tokens: 1,
            sequences: 1,
        };
        assert_eq!(s.ranked(0), vec![1, 2, 3, 0]);
        assert_eq!(s.top_sets(2), vec![vec![1, 2]]);
    }
}
