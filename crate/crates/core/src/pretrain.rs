//! Supervised pretraining of the base model on the full fact corpus.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{batch_of, exact_match, eval_threads, Example};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{ForwardPass, MoEModel, Positions, TokenBatch};
use crate::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub seed: u64,
    pub max_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub eval_interval: u64,
    /// Training stops once both held-out accuracies reach this value.
    pub target_accuracy: f64,
    /// Minimum accuracy the finished model must reach.
    pub gate: f64,
    /// Weight of next-token prediction on question tokens, added to the
    /// answer loss. Zero trains on answers only.
    pub question_weight: f64,
    /// Weight of the load-balancing auxiliary loss `N * sum_i f_i * P_i`.
    pub balance_weight: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            seed: 11,
            max_steps: 6000,
            batch_size: 32,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            eval_interval: 100,
            target_accuracy: 0.98,
            gate: 0.9,
            question_weight: 0.0,
            balance_weight: 0.0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::config("batch_size and eval_interval must be positive"));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("need lr > 0 and Adam betas in [0, 1)"));
        }
        Ok(())
    }
}

/// Adam moments, stored as two models shaped like the one being trained so
/// they reuse the checkpoint container.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub step: u64,
    pub m: MoEModel<S>,
    pub v: MoEModel<S>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(model: &MoEModel<S>) -> Self {
        let mut m = model.clone();
        for (_, t) in m.named_params_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = S::zero());
            t.set_requires_grad(false);
        }
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// One Adam update of every trainable tensor; consumes their gradients.
    pub fn update(&mut self, model: &mut MoEModel<S>, cfg: &PretrainConfig) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let b1 = S::from_f64_lossy(cfg.beta1);
        let b2 = S::from_f64_lossy(cfg.beta2);
        let c1 = S::one() - b1.powi(t);
        let c2 = S::one() - b2.powi(t);
        let lr = S::from_f64_lossy(cfg.lr);
        let eps = S::from_f64_lossy(cfg.eps);
        let params = model.named_params_mut();
        let ms = self.m.named_params_mut();
        let vs = self.v.named_params_mut();
        for (((id, p), (_, m)), (_, v)) in params.into_iter().zip(ms).zip(vs) {
            if !p.requires_grad() {
                continue;
            }
            let grad = p.grad().ok_or_else(|| Error::MissingGrad(id.to_string()))?.to_vec();
            let m = m.data_mut();
            let v = v.data_mut();
            let w = p.data_mut();
            for i in 0..w.len() {
                let gi = grad[i];
                m[i] = b1 * m[i] + (S::one() - b1) * gi;
                v[i] = b2 * v[i] + (S::one() - b2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                w[i] = w[i] - lr * mh / (vh.sqrt() + eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub loss: f64,
    pub forget_acc: f64,
    pub utility_acc: f64,
}

pub const CURVE_HEADER: &str = "step,loss,forget_acc,utility_acc";

impl CurvePoint {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.step, self.loss, self.forget_acc, self.utility_acc)
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub curve: Vec<CurvePoint>,
    pub steps: u64,
    pub forget_acc: f64,
    pub utility_acc: f64,
    pub passed_gate: bool,
}

/// Indices of the batch used at `step`: the corpus is walked in epochs, each
/// a fresh permutation drawn from a stream keyed by the epoch number, so any
/// step's batch can be recomputed after a resume.
pub fn batch_indices(seed: u64, step: u64, batch_size: usize, n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch_size);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for j in 0..batch_size as u64 {
        let i = step * batch_size as u64 + j;
        let epoch = i / n as u64;
        let pos = (i % n as u64) as usize;
        if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(epoch);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("filled above").1[pos]);
    }
    out
}

/// Mean answer-token cross-entropy of one batch, with gradients accumulated
/// into the model's trainable tensors.
pub fn answer_loss_and_grad<S: Scalar>(
    model: &mut MoEModel<S>,
    examples: &[&Example],
    cfg: &PretrainConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let (loss, pass) = if cfg.question_weight == 0.0 {
        let batch = batch_of(examples.iter().copied())?;
        let pass = model.forward_pass(&mut g, &vars, &batch, Positions::Predictions)?;
        let logits = model.prediction_logits(&mut g, &vars, &pass, &batch)?;
        (g.cross_entropy(logits, &batch.targets)?, pass)
    } else {
        let mut batch = TokenBatch::new();
        let (mut q_rows, mut a_rows) = (Vec::new(), Vec::new());
        for e in examples {
            let before = batch.pred_rows.len();
            let nq = batch.push_full(&e.q, &e.a)?;
            q_rows.extend(before..before + nq);
            a_rows.extend(before + nq..batch.pred_rows.len());
        }
        let pass = model.forward_pass(&mut g, &vars, &batch, Positions::All)?;
        let logits = model.prediction_logits(&mut g, &vars, &pass, &batch)?;
        let pick = |g: &mut Graph<S>, rows: &[usize]| -> Result<Var> {
            let l = g.gather_rows(logits, rows)?;
            let t: Vec<usize> = rows.iter().map(|&r| batch.targets[r]).collect();
            g.cross_entropy(l, &t)
        };
        let a = pick(&mut g, &a_rows)?;
        let q = pick(&mut g, &q_rows)?;
        let q = g.scale(q, S::from_f64_lossy(cfg.question_weight))?;
        (g.add(a, q)?, pass)
    };
    let loss = if cfg.balance_weight != 0.0 {
        let b = balance_loss(&mut g, &pass, model.config().top_k)?;
        let b = g.scale(b, S::from_f64_lossy(cfg.balance_weight))?;
        g.add(loss, b)?
    } else {
        loss
    };
    g.backward(loss)?;
    model.accumulate_grads(&g, &vars)?;
    Ok(g.value(loss).item().to_f64_lossy())
}

/// Mean over layers of `N * sum_i f_i * P_i`, where `f_i` is the share of
/// routing slots sent to expert `i` and `P_i` its mean router probability.
/// Equals 1 under perfectly uniform routing.
pub fn balance_loss<S: Scalar>(g: &mut Graph<S>, pass: &ForwardPass, top_k: usize) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for layer in &pass.layers {
        let shape = g.shape(layer.gates.scores).to_vec();
        let (t, n) = (shape[0], shape[1]);
        let mut f = vec![0.0; n];
        for sel in &layer.gates.selected {
            for &i in sel {
                f[i] += 1.0 / (t * top_k) as f64;
            }
        }
        let fm: Vec<S> = (0..t).flat_map(|_| f.iter().map(|&v| S::from_f64_lossy(v))).collect();
        let fm = g.constant(Tensor::matrix(t, n, fm)?);
        let prod = g.mul(layer.gates.scores, fm)?;
        let total = g.sum(prod)?;
        let term = g.scale(total, S::from_f64_lossy(n as f64 / t as f64))?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    let acc = acc.ok_or(Error::Empty("model layers"))?;
    g.scale(acc, S::from_f64_lossy(1.0 / pass.layers.len() as f64))
}

/// Trains until both held-out accuracies reach the target or the step budget
/// runs out. `state` carries the optimizer across resumes.
pub fn pretrain<S: Scalar>(
    model: &mut MoEModel<S>,
    state: &mut AdamState<S>,
    corpus: &[Example],
    eval_forget: &[Example],
    eval_utility: &[Example],
    cfg: &PretrainConfig,
    mut on_point: impl FnMut(&CurvePoint),
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("pretraining corpus"));
    }
    model.set_all_trainable(true);
    let threads = eval_threads();
    let mut curve = Vec::new();
    let mut loss_acc = 0.0;
    let mut loss_n = 0u64;
    let mut last = (0.0, 0.0);
    while state.step < cfg.max_steps {
        let idx = batch_indices(cfg.seed, state.step, cfg.batch_size, corpus.len());
        let examples: Vec<&Example> = idx.iter().map(|&i| &corpus[i]).collect();
        loss_acc += answer_loss_and_grad(model, &examples, cfg)?;
        loss_n += 1;
        state.update(model, cfg)?;
        if state.step % cfg.eval_interval == 0 || state.step == cfg.max_steps {
            let fa = exact_match(model, eval_forget, threads)?;
            let ua = exact_match(model, eval_utility, threads)?;
            last = (fa, ua);
            let point = CurvePoint {
                step: state.step,
                loss: loss_acc / loss_n as f64,
                forget_acc: fa,
                utility_acc: ua,
            };
            on_point(&point);
            curve.push(point);
            loss_acc = 0.0;
            loss_n = 0;
            if fa >= cfg.target_accuracy && ua >= cfg.target_accuracy {
                break;
            }
        }
    }
    if curve.last().map(|p| p.step) != Some(state.step) {
        last = (
            exact_match(model, eval_forget, threads)?,
            exact_match(model, eval_utility, threads)?,
        );
    }
    Ok(PretrainOutcome {
        steps: state.step,
        forget_acc: last.0,
        utility_acc: last.1,
        passed_gate: last.0 >= cfg.gate && last.1 >= cfg.gate,
        curve,
    })
}
