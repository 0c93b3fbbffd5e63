use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytics::Anchor;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{ForwardPass, GateMatrix, LayerGates, MoEModel, ParamVars, Positions, TokenBatch};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Scalar values of one step's objective terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub forget: f64,
    pub retain: f64,
    pub anchor: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub total: f64,
}

fn answer_ce<S: Scalar>(
    g: &mut Graph<S>,
    model: &MoEModel<S>,
    vars: &ParamVars,
    pass: &ForwardPass,
    batch: &TokenBatch,
) -> Result<Var> {
    let logits = model.prediction_logits(g, vars, pass, batch)?;
    g.cross_entropy(logits, &batch.targets)
}

/// Summed answer log-likelihood of each sequence, `[Z]`.
pub fn sequence_logprobs<S: Scalar>(
    g: &mut Graph<S>,
    model: &MoEModel<S>,
    vars: &ParamVars,
    pass: &ForwardPass,
    batch: &TokenBatch,
) -> Result<Var> {
    let logits = model.prediction_logits(g, vars, pass, batch)?;
    let lp = g.log_softmax_pick(logits, &batch.targets)?;
    g.segment_sum(lp, &batch.pred_offsets)
}

/// `log pi_ref(y|x)` per sequence under a frozen reference.
pub fn reference_logprobs<S: Scalar>(reference: &MoEModel<S>, batch: &TokenBatch) -> Result<Vec<S>> {
    let mut g = Graph::new();
    let vars = reference.bind_frozen(&mut g);
    let pass = reference.forward_pass(&mut g, &vars, batch, Positions::Predictions)?;
    let lp = sequence_logprobs(&mut g, reference, &vars, &pass, batch)?;
    Ok(g.value(lp).data().to_vec())
}

/// `(2 / beta) * mean_j softplus(beta * (log pi(y_j|x_j) - log pi_ref(y_j|x_j)))`.
pub fn npo_term<S: Scalar>(g: &mut Graph<S>, seq_logprobs: Var, reference: &[S], beta: f64) -> Result<Var> {
    let r = g.constant(Tensor::vector(reference.to_vec()));
    let diff = g.sub(seq_logprobs, r)?;
    let z = g.scale(diff, S::from_f64_lossy(beta))?;
    let sp = g.softplus(z)?;
    let m = g.mean(sp)?;
    g.scale(m, S::from_f64_lossy(2.0 / beta))
}

/// A fixed random unit direction scaled by `c`.
pub fn control_vector<S: Scalar>(dim: usize, c: f64, seed: u64) -> Vec<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>()).collect();
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    u.iter().map(|v| S::from_f64_lossy(c * v / norm)).collect()
}

/// RMU forget and retain terms at one layer: pull forget activations toward
/// the control vector and pin retain activations to the frozen model's.
pub fn rmu_terms<S: Scalar>(
    g: &mut Graph<S>,
    forget_hidden: Var,
    retain_hidden: Option<(Var, &Tensor<S>)>,
    control: &[S],
) -> Result<(Var, Option<Var>)> {
    let shape = g.shape(forget_hidden).to_vec();
    if shape.len() != 2 || shape[1] != control.len() {
        return Err(Error::shape("rmu control", &shape, &[control.len()]));
    }
    let target: Vec<S> = (0..shape[0]).flat_map(|_| control.iter().copied()).collect();
    let target = g.constant(Tensor::new(shape, target)?);
    let forget = g.mse(forget_hidden, target)?;
    let retain = match retain_hidden {
        Some((h, frozen)) => {
            let f = g.constant(Tensor::new(frozen.shape().to_vec(), frozen.data().to_vec())?);
            Some(g.mse(h, f)?)
        }
        None => None,
    };
    Ok((forget, retain))
}

/// `mean_t || g_t - a ||^2` over every token of a layer's gate matrix.
pub fn anchor_term<S: Scalar>(g: &mut Graph<S>, gates: &LayerGates, anchor: &Anchor) -> Result<Var> {
    let shape = g.shape(gates.gate).to_vec();
    if shape[1] != anchor.targets.len() {
        return Err(Error::shape("anchor_loss", &shape, &[anchor.targets.len()]));
    }
    let rows: Vec<S> = (0..shape[0])
        .flat_map(|_| anchor.targets.iter().map(|&a| S::from_f64_lossy(a as f64)))
        .collect();
    let a = g.constant(Tensor::new(shape.clone(), rows)?);
    let diff = g.sub(gates.gate, a)?;
    let sq = g.square(diff)?;
    let total = g.sum(sq)?;
    g.scale(total, S::one() / S::from_usize_lossy(shape[0]))
}

/// Tensor-level anchor loss for a recorded gate matrix.
pub fn anchor_loss<S: Scalar>(gates: &GateMatrix<S>, a: &[u8]) -> Result<S> {
    let n = gates.num_experts();
    if a.len() != n {
        return Err(Error::shape("anchor_loss", gates.g.shape(), &[a.len()]));
    }
    if gates.num_tokens() == 0 {
        return Err(Error::Empty("gate matrix"));
    }
    let mut total = S::zero();
    for t in 0..gates.num_tokens() {
        for (gv, &av) in gates.row(t).iter().zip(a) {
            let d = *gv - S::from_f64_lossy(av as f64);
            total = total + d * d;
        }
    }
    Ok(total / S::from_usize_lossy(gates.num_tokens()))
}

fn eval_graph<S: Scalar>(model: &MoEModel<S>) -> (Graph<S>, ParamVars) {
    let mut g = Graph::new();
    let vars = model.bind_frozen(&mut g);
    (g, vars)
}

/// Gradient ascent objective `-CE(forget)`.
pub fn loss_ga<S: Scalar>(model: &MoEModel<S>, forget: &TokenBatch) -> Result<S> {
    let (mut g, vars) = eval_graph(model);
    let pass = model.forward_pass(&mut g, &vars, forget, Positions::Predictions)?;
    let ce = answer_ce(&mut g, model, &vars, &pass, forget)?;
    Ok(-g.value(ce).item())
}

/// `-CE(forget) + lambda * CE(retain)`.
pub fn loss_gdiff<S: Scalar>(model: &MoEModel<S>, forget: &TokenBatch, retain: &TokenBatch, lambda: f64) -> Result<S> {
    let r = -loss_ga(model, retain)?;
    Ok(loss_ga(model, forget)? + S::from_f64_lossy(lambda) * r)
}

pub fn loss_npo<S: Scalar>(model: &MoEModel<S>, reference: &MoEModel<S>, forget: &TokenBatch, beta: f64) -> Result<S> {
    let refs = reference_logprobs(reference, forget)?;
    let (mut g, vars) = eval_graph(model);
    let pass = model.forward_pass(&mut g, &vars, forget, Positions::Predictions)?;
    let lp = sequence_logprobs(&mut g, model, &vars, &pass, forget)?;
    let l = npo_term(&mut g, lp, &refs, beta)?;
    Ok(g.value(l).item())
}

/// `MSE(h_l(forget), control) + retain_weight * MSE(h_l(retain), h_l^frozen(retain))`.
pub fn loss_rmu<S: Scalar>(
    model: &MoEModel<S>,
    frozen: &MoEModel<S>,
    forget: &TokenBatch,
    retain: &TokenBatch,
    control: &[S],
    layer: usize,
    retain_weight: f64,
) -> Result<S> {
    check_layer(model, layer)?;
    let frozen_h = frozen.hidden_states(retain, layer)?;
    let (mut g, vars) = eval_graph(model);
    let pf = model.forward_pass(&mut g, &vars, forget, Positions::All)?;
    let pr = model.forward_pass(&mut g, &vars, retain, Positions::All)?;
    let (f, r) = rmu_terms(&mut g, pf.hidden(layer), Some((pr.hidden(layer), &frozen_h)), control)?;
    let r = r.expect("retain pass supplied");
    Ok(g.value(f).item() + S::from_f64_lossy(retain_weight) * g.value(r).item())
}

pub(crate) fn check_layer<S: Scalar>(model: &MoEModel<S>, layer: usize) -> Result<()> {
    let layers = model.config().num_layers;
    if layer >= layers {
        return Err(Error::Index {
            what: "layer",
            index: layer,
            bound: layers,
        });
    }
    Ok(())
}
