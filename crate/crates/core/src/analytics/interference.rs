use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{MoEModel, Positions, TokenBatch};
use crate::scalar::Scalar;

use super::SelectionPlan;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertGradNorm {
    pub layer: usize,
    pub expert: usize,
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCosine {
    pub a: (usize, usize),
    pub b: (usize, usize),
    pub cosine: f64,
}

/// Gradient diagnostics of the forget loss restricted to the planned experts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterferenceReport {
    pub norms: Vec<ExpertGradNorm>,
    pub cosines: Vec<PairCosine>,
}

impl InterferenceReport {
    pub fn mean_abs_cosine(&self) -> Option<f64> {
        if self.cosines.is_empty() {
            return None;
        }
        Some(self.cosines.iter().map(|c| c.cosine.abs()).sum::<f64>() / self.cosines.len() as f64)
    }
}

/// Per target expert, the norm of the gradient of `-CE(forget)` with respect
/// to its flattened FFN weights, and the cosine between every pair of those
/// gradient blocks.
pub fn gradient_interference<S: Scalar>(
    model: &MoEModel<S>,
    plan: &SelectionPlan,
    forget: &TokenBatch,
) -> Result<InterferenceReport> {
    if plan.is_empty() {
        return Err(Error::Empty("selection plan"));
    }
    let mut probe = model.clone();
    probe.set_all_trainable(false);
    for e in &plan.entries {
        let ex = probe
            .layers
            .get_mut(e.layer)
            .and_then(|l| l.experts.get_mut(e.expert))
            .ok_or(Error::Index {
                what: "planned expert",
                index: e.expert,
                bound: model.config().experts_per_layer,
            })?;
        ex.up.set_requires_grad(true);
        ex.down.set_requires_grad(true);
    }
    let mut g = Graph::new();
    let vars = probe.bind(&mut g);
    let pass = probe.forward_pass(&mut g, &vars, forget, Positions::All)?;
    let logits = probe.prediction_logits(&mut g, &vars, &pass, forget)?;
    let ce = g.cross_entropy(logits, &forget.targets)?;
    let loss = g.neg(ce)?;
    g.backward(loss)?;

    let blocks: Vec<Vec<f64>> = plan
        .entries
        .iter()
        .map(|e| {
            let (up, down) = vars.layers[e.layer].experts[e.expert];
            let mut flat = Vec::new();
            for v in [up, down] {
                match g.grad(v) {
                    Some(gr) => flat.extend(gr.iter().map(|x| x.to_f64_lossy())),
                    None => flat.extend(std::iter::repeat(0.0).take(g.value(v).numel())),
                }
            }
            flat
        })
        .collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let norms = plan
        .entries
        .iter()
        .zip(&blocks)
        .map(|(e, b)| ExpertGradNorm {
            layer: e.layer,
            expert: e.expert,
            norm: norm(b),
        })
        .collect();
    let mut cosines = Vec::new();
    for i in 0..blocks.len() {
        for j in i + 1..blocks.len() {
            let dot: f64 = blocks[i].iter().zip(&blocks[j]).map(|(a, b)| a * b).sum();
            let denom = norm(&blocks[i]) * norm(&blocks[j]);
            let ei = &plan.entries[i];
            let ej = &plan.entries[j];
            cosines.push(PairCosine {
                a: (ei.layer, ei.expert),
                b: (ej.layer, ej.expert),
                cosine: if denom > 0.0 { dot / denom } else { 0.0 },
            });
        }
    }
    Ok(InterferenceReport { norms, cosines })
}
