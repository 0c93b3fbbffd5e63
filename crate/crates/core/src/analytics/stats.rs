use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::RoutingTrace;

/// Mean over layers of `|A_l ∩ B_l| / k`.
pub fn overlap_ratio(a: &[Vec<usize>], b: &[Vec<usize>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("overlap_ratio", &[a.len()], &[b.len()]));
    }
    let k = a[0].len();
    if k == 0 || a.iter().chain(b).any(|s| s.len() != k) {
        return Err(Error::config("overlap_ratio needs equal-sized non-empty sets"));
    }
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| x.iter().filter(|e| y.contains(e)).count() as f64 / k as f64)
        .sum();
    Ok(total / a.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LongTail {
    /// Combined proportion of the six busiest experts, divided by `K`.
    pub top6_share: f64,
    pub gini: f64,
}

pub fn long_tail_stats(proportions: &[f64], top_k: usize) -> LongTail {
    let mut sorted = proportions.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let top6: f64 = sorted.iter().take(6).sum();
    LongTail {
        top6_share: top6 / top_k as f64,
        gini: gini(proportions),
    }
}

/// Gini coefficient `sum_ij |x_i - x_j| / (2 n^2 mean)`, evaluated in
/// `O(n log n)` from the ascending order statistics.
pub fn gini(values: &[f64]) -> f64 {
    let n = values.len();
    let total: f64 = values.iter().sum();
    if n == 0 || total == 0.0 {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| (2.0 * (i as f64 + 1.0) - n as f64 - 1.0) * x)
        .sum();
    weighted / (n as f64 * total)
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rank correlation with average-rank ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("spearman", &[x.len()], &[y.len()]));
    }
    if x.len() < 2 {
        return Err(Error::Empty("spearman needs at least two points"));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx).powi(2);
        vy += (b - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::config("spearman undefined for constant input"));
    }
    Ok(cov / (vx * vy).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankCheck {
    pub per_layer: Vec<f64>,
    pub mean: f64,
}

/// Per layer, Spearman's rho between each expert's mean gate value and its
/// mean norm-weighted gate `g_{i,t} ||E_i(x_t)||`.
///
/// `norms` mirrors the trace layout and holds expert output norms at every
/// selected slot. `top` restricts each layer to its `top` highest-mass experts.
pub fn weighted_norm_rank_check<S: Scalar>(
    trace: &RoutingTrace<S>,
    norms: &[Vec<Tensor<f64>>],
    top: Option<usize>,
) -> Result<RankCheck> {
    if norms.len() != trace.num_layers() {
        return Err(Error::shape("weighted_norm_rank_check", &[trace.num_layers()], &[norms.len()]));
    }
    let n = trace.num_experts();
    let mut per_layer = Vec::with_capacity(norms.len());
    for (l, layer_norms) in norms.iter().enumerate() {
        let mut mass = vec![0.0; n];
        let mut weighted = vec![0.0; n];
        for (block, nb) in trace.layer(l).iter().zip(layer_norms) {
            if block.shape() != nb.shape() {
                return Err(Error::shape("weighted_norm_rank_check", block.shape(), nb.shape()));
            }
            for (j, (g, e)) in block.data().iter().zip(nb.data()).enumerate() {
                let g = g.to_f64_lossy();
                mass[j % n] += g;
                weighted[j % n] += g * e;
            }
        }
        let mut experts: Vec<usize> = (0..n).filter(|&i| mass[i] > 0.0).collect();
        if let Some(k) = top {
            experts.sort_by(|&a, &b| mass[b].total_cmp(&mass[a]).then(a.cmp(&b)));
            experts.truncate(k);
        }
        if experts.len() < 2 {
            return Err(Error::Empty("fewer than two experts with non-zero mass"));
        }
        let x: Vec<f64> = experts.iter().map(|&i| mass[i]).collect();
        let y: Vec<f64> = experts.iter().map(|&i| weighted[i]).collect();
        per_layer.push(spearman(&x, &y)?);
    }
    let mean = per_layer.iter().sum::<f64>() / per_layer.len() as f64;
    Ok(RankCheck { per_layer, mean })
}
