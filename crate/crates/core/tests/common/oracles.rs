//! Brute-force reference implementations, written against the definitions
//! rather than against the library code.

use std::collections::HashSet;

use moeulab::analytics::{
    affinity_scores, gini, overlap_ratio, spearman, token_assignment_proportion, RoutingTrace,
};
use moeulab::model::{ModelConfig, MoEModel};
use moeulab::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DENSE_TOL: f64 = 1e-10;
/// Summation order differs from the library, so "exact" means agreement to
/// the last few ulps.
pub const FLOAT_TOL: f64 = 1e-12;

fn matvec_row(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (k, xv) in x.iter().enumerate() {
        for c in 0..cols {
            out[c] += xv * w[k * cols + c];
        }
    }
    out
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn dense_ffn(x: &[f64], up: &Tensor<f64>, down: &Tensor<f64>) -> Vec<f64> {
    let h = up.shape()[1];
    let d = down.shape()[1];
    let a: Vec<f64> = matvec_row(x, up.data(), h).into_iter().map(silu).collect();
    matvec_row(&a, down.data(), d)
}

/// Logits and per-layer gates of one sequence, evaluating every expert on
/// every token and weighting by the (mostly zero) gate.
pub fn dense_forward(model: &MoEModel<f64>, tokens: &[usize]) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let cfg = model.config();
    let (d, n, v) = (cfg.embed_dim, cfg.experts_per_layer, cfg.vocab_size);
    let emb: Vec<Vec<f64>> = tokens.iter().map(|&t| model.embed.data()[t * d..(t + 1) * d].to_vec()).collect();
    let mut u: Vec<Vec<f64>> = (0..tokens.len())
        .map(|t| {
            (0..d)
                .map(|k| emb[t][k] + (0..=t).map(|s| emb[s][k]).sum::<f64>() / (t + 1) as f64)
                .collect()
        })
        .collect();
    let mut gates_all = Vec::new();
    for layer in &model.layers {
        let mut gates = Vec::new();
        let mut next = Vec::new();
        for x in &u {
            let logits = matvec_row(x, layer.router.data(), n);
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            let s: Vec<f64> = logits.iter().map(|l| (l - mx).exp() / z).collect();
            // Top-K by repeated selection of the largest remaining, lowest index first.
            let mut chosen = Vec::new();
            for _ in 0..cfg.top_k {
                let mut best: Option<usize> = None;
                for i in 0..n {
                    if chosen.contains(&i) {
                        continue;
                    }
                    if best.map_or(true, |b| s[i] > s[b]) {
                        best = Some(i);
                    }
                }
                chosen.push(best.unwrap());
            }
            let mut g = vec![0.0; n];
            for &i in &chosen {
                g[i] = s[i];
            }
            if cfg.renormalize_gates {
                let m: f64 = g.iter().sum();
                g.iter_mut().for_each(|x| *x /= m);
            }
            let mut h = x.clone();
            for (i, e) in layer.experts.iter().enumerate() {
                let y = dense_ffn(x, &e.up, &e.down);
                for k in 0..d {
                    h[k] += g[i] * y[k];
                }
            }
            for e in &layer.shared {
                let y = dense_ffn(x, &e.up, &e.down);
                for k in 0..d {
                    h[k] += y[k];
                }
            }
            gates.push(g);
            next.push(h);
        }
        gates_all.push(gates);
        u = next;
    }
    let logits = u.iter().map(|x| matvec_row(x, model.head.data(), v)).collect();
    (logits, gates_all)
}

pub fn oracle_assignment(trace: &RoutingTrace<f64>) -> Vec<Vec<f64>> {
    let n = trace.num_experts();
    (0..trace.num_layers())
        .map(|l| {
            let mut slots = 0usize;
            let mut counts = vec![0usize; n];
            for block in trace.layer(l) {
                for t in 0..block.shape()[0] {
                    slots += 1;
                    for i in 0..n {
                        if block.at(t, i) != 0.0 {
                            counts[i] += 1;
                        }
                    }
                }
            }
            counts.iter().map(|&c| c as f64 / slots as f64).collect()
        })
        .collect()
}

pub fn oracle_affinity(trace: &RoutingTrace<f64>) -> Vec<Vec<f64>> {
    let n = trace.num_experts();
    let z = trace.num_sequences() as f64;
    (0..trace.num_layers())
        .map(|l| {
            (0..n)
                .map(|i| {
                    trace
                        .layer(l)
                        .iter()
                        .map(|b| {
                            let len = b.shape()[0];
                            (0..len).map(|t| b.at(t, i)).sum::<f64>() / len as f64
                        })
                        .sum::<f64>()
                        / z
                })
                .collect()
        })
        .collect()
}

pub fn oracle_overlap(a: &[Vec<usize>], b: &[Vec<usize>]) -> f64 {
    let per: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let xs: HashSet<_> = x.iter().collect();
            let ys: HashSet<_> = y.iter().collect();
            xs.intersection(&ys).count() as f64 / x.len() as f64
        })
        .collect();
    per.iter().sum::<f64>() / per.len() as f64
}

/// `sum_ij |x_i - x_j| / (2 n^2 mean)`.
pub fn oracle_gini(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let mut total = 0.0;
    for a in x {
        for b in x {
            total += (a - b).abs();
        }
    }
    total / (2.0 * n * n * mean)
}

/// Pearson correlation of average ranks, ranks found by counting.
pub fn oracle_spearman(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|a| {
                let less = v.iter().filter(|b| *b < a).count() as f64;
                let equal = v.iter().filter(|b| *b == a).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// A random routing trace whose rows look like top-K gates.
pub fn random_trace(rng: &mut ChaCha8Rng, layers: usize, n: usize, k: usize) -> RoutingTrace<f64> {
    let seqs = rng.gen_range(1..5);
    let lens: Vec<usize> = (0..seqs).map(|_| rng.gen_range(1..6)).collect();
    let per_layer = (0..layers)
        .map(|_| {
            lens.iter()
                .map(|&len| {
                    let mut data = vec![0.0; len * n];
                    for t in 0..len {
                        let mut idx: Vec<usize> = (0..n).collect();
                        for i in 0..k {
                            let j = rng.gen_range(i..n);
                            idx.swap(i, j);
                        }
                        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
                        let total: f64 = raw.iter().sum::<f64>() + rng.gen_range(0.0..1.0);
                        for (slot, &i) in idx[..k].iter().enumerate() {
                            data[t * n + i] = raw[slot] / total;
                        }
                    }
                    Tensor::matrix(len, n, data).unwrap()
                })
                .collect()
        })
        .collect();
    RoutingTrace::new(per_layer).unwrap()
}

#[derive(Debug, Clone, Default)]
pub struct OracleReport {
    pub dense_cases: usize,
    pub dense_max_err: f64,
    pub analytics_cases: usize,
    /// Names of the first few mismatching checks.
    pub failures: Vec<String>,
}

impl OracleReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty() && self.dense_max_err <= DENSE_TOL
    }
}

fn close(a: &[Vec<f64>], b: &[Vec<f64>], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len() && x.iter().zip(y).all(|(p, q)| (p - q).abs() <= tol))
}

pub fn small_model_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let n = rng.gen_range(2..7);
    ModelConfig {
        vocab_size: rng.gen_range(5..20),
        embed_dim: rng.gen_range(2..6),
        num_layers: rng.gen_range(1..4),
        experts_per_layer: n,
        top_k: rng.gen_range(1..=n),
        shared_experts: rng.gen_range(0..2),
        ffn_hidden: rng.gen_range(2..6),
        renormalize_gates: rng.gen_bool(0.3),
    }
}

/// Sparse forward against the dense oracle, and every routing statistic
/// against its brute-force oracle, on `instances` random small cases each.
pub fn suite(instances: usize) -> OracleReport {
    let mut report = OracleReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..instances {
        let cfg = small_model_config(&mut rng);
        let model = MoEModel::<f64>::seeded(cfg.clone(), case as u64).unwrap();
        let len = rng.gen_range(1..7);
        let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
        let (logits, trace) = model.forward(&tokens).unwrap();
        let (want_logits, want_gates) = dense_forward(&model, &tokens);
        let v = cfg.vocab_size;
        let mut err = 0.0f64;
        for (t, row) in want_logits.iter().enumerate() {
            for (c, w) in row.iter().enumerate() {
                err = err.max((logits.data()[t * v + c] - w).abs());
            }
        }
        for (l, gates) in want_gates.iter().enumerate() {
            let block = &trace.layer(l)[0];
            for (t, row) in gates.iter().enumerate() {
                for (i, w) in row.iter().enumerate() {
                    err = err.max((block.at(t, i) - w).abs());
                }
            }
        }
        report.dense_cases += 1;
        report.dense_max_err = report.dense_max_err.max(err);
        if err > DENSE_TOL {
            report.failures.push(format!("dense forward #{case}: {err:e}"));
        }
    }

    for case in 0..instances {
        let n = rng.gen_range(2..9);
        let k = rng.gen_range(1..=n);
        let layers = rng.gen_range(1..4);
        let trace = random_trace(&mut rng, layers, n, k);
        report.analytics_cases += 1;

        let prop = token_assignment_proportion(&trace).unwrap();
        if prop != oracle_assignment(&trace) {
            report.failures.push(format!("token_assignment_proportion #{case}"));
        }
        let aff = affinity_scores(&trace).unwrap();
        if !close(&aff.scores, &oracle_affinity(&trace), FLOAT_TOL) {
            report.failures.push(format!("affinity_scores #{case}"));
        }

        let top = rng.gen_range(1..=n);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<usize>> {
            (0..layers)
                .map(|_| {
                    let mut idx: Vec<usize> = (0..n).collect();
                    for i in 0..top {
                        let j = rng.gen_range(i..n);
                        idx.swap(i, j);
                    }
                    idx.truncate(top);
                    idx
                })
                .collect()
        };
        let (a, b) = (draw(&mut rng), draw(&mut rng));
        if overlap_ratio(&a, &b).unwrap() != oracle_overlap(&a, &b) {
            report.failures.push(format!("overlap_ratio #{case}"));
        }

        let len = rng.gen_range(2..12);
        // Coarse values so ties occur.
        let x: Vec<f64> = (0..len).map(|_| rng.gen_range(0..6) as f64 / 4.0).collect();
        let y: Vec<f64> = (0..len).map(|_| rng.gen_range(0..6) as f64 / 4.0).collect();
        if (gini(&x) - oracle_gini(&x)).abs() > FLOAT_TOL {
            report.failures.push(format!("gini #{case}"));
        }
        let want = oracle_spearman(&x, &y);
        match spearman(&x, &y) {
            Ok(got) if (got - want).abs() <= FLOAT_TOL => {}
            Err(_) if !want.is_finite() => {}
            other => report.failures.push(format!("spearman #{case}: {other:?} vs {want}")),
        }
    }
    report
}
