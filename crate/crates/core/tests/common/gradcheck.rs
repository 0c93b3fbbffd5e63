//! Central finite-difference checks for every graph op and every full loss.

use moeulab::analytics::Anchor;
use moeulab::graph::{Graph, Var};
use moeulab::model::{ForwardPass, ModelConfig, MoEModel, ParamVars, Positions, TokenBatch};
use moeulab::unlearn::{
    anchor_term, control_vector, loss_ga, loss_gdiff, loss_npo, loss_rmu, npo_term, reference_logprobs,
    rmu_terms, sequence_logprobs,
};
use moeulab::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-6;
pub const TOL_NPO: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Case {
    pub name: String,
    pub rel_err: f64,
    pub tol: f64,
    /// Coordinates left out because a perturbation flipped a top-K choice.
    pub kinks: usize,
    pub coords: usize,
}

impl Case {
    pub fn ok(&self) -> bool {
        self.rel_err < self.tol && self.coords > 0
    }
}

/// `||a - n|| / max(||a||, ||n||)` over the whole gradient vector.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// Reduces the op output with fixed random weights, then compares the
/// backward pass with central differences over every input coordinate.
fn check_op(name: &str, inputs: Vec<Tensor<f64>>, build: &Build, seed: u64) -> Case {
    let weights = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        let shape = g.shape(out).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        rand_tensor(&mut rng, &shape, -1.0, 1.0)
    };
    let value = |xs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w).unwrap();
        let s = g.sum(prod).unwrap();
        g.value(s).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w).unwrap();
    let s = g.sum(prod).unwrap();
    g.backward(s).unwrap();

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        let grad = g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= H;
            numeric.push((value(&plus) - value(&minus)) / (2.0 * H));
            analytic.push(grad[j]);
        }
    }
    Case {
        name: format!("{name}#{seed}"),
        rel_err: rel_err(&analytic, &numeric),
        tol: TOL,
        kinks: 0,
        coords: analytic.len(),
    }
}

/// Every differentiable graph op on random inputs in [-2, 2].
pub fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| rand_tensor(&mut rng, shape, -2.0, 2.0);
    let a34 = r(&[3, 4]);
    let b34 = r(&[3, 4]);
    let b42 = r(&[4, 2]);
    let v6 = r(&[6]);
    let m53 = r(&[5, 3]);
    let logits = r(&[4, 5]);
    let pos = {
        let mut t = r(&[3, 4]);
        t.data_mut().iter_mut().for_each(|x| *x = 0.5 + x.abs());
        t
    };
    let targets = vec![0usize, 3, 4, 1];

    let mut cases = Vec::new();
    let mut push = |name: &str, inputs: Vec<Tensor<f64>>, build: &Build| {
        cases.push(check_op(name, inputs, build, seed));
    };
    push("matmul", vec![a34.clone(), b42.clone()], &|g, v| g.matmul(v[0], v[1]));
    push("add", vec![a34.clone(), b34.clone()], &|g, v| g.add(v[0], v[1]));
    push("sub", vec![a34.clone(), b34.clone()], &|g, v| g.sub(v[0], v[1]));
    push("mul", vec![a34.clone(), b34.clone()], &|g, v| g.mul(v[0], v[1]));
    push("scale", vec![a34.clone()], &|g, v| g.scale(v[0], -1.7));
    push("neg", vec![a34.clone()], &|g, v| g.neg(v[0]));
    push("square", vec![a34.clone()], &|g, v| g.square(v[0]));
    push("silu", vec![a34.clone()], &|g, v| g.silu(v[0]));
    push("softplus", vec![a34.clone()], &|g, v| g.softplus(v[0]));
    push("recip", vec![pos], &|g, v| g.recip(v[0]));
    push("softmax_rows", vec![a34.clone()], &|g, v| g.softmax(v[0], 1));
    push("softmax_cols", vec![a34.clone()], &|g, v| g.softmax(v[0], 0));
    let t1 = targets.clone();
    push("log_softmax_pick", vec![logits.clone()], &move |g, v| g.log_softmax_pick(v[0], &t1));
    push("sum", vec![a34.clone()], &|g, v| g.sum(v[0]));
    push("mean", vec![a34.clone()], &|g, v| g.mean(v[0]));
    push("row_sum", vec![a34.clone()], &|g, v| g.row_sum(v[0]));
    push("scale_rows", vec![m53.clone(), r5(&v6)], &|g, v| g.scale_rows(v[0], v[1]));
    push("gather_rows", vec![m53.clone()], &|g, v| g.gather_rows(v[0], &[4, 0, 4, 2]));
    push("scatter_rows", vec![m53.clone()], &|g, v| g.scatter_rows(v[0], &[1, 0, 1, 3, 5], 6));
    push("pick", vec![a34.clone()], &|g, v| g.pick(v[0], &[0, 5, 5, 11]));
    push("segment_sum", vec![v6.clone()], &|g, v| g.segment_sum(v[0], &[0, 2, 3, 6]));
    push("causal_mean", vec![m53.clone()], &|g, v| g.causal_mean(v[0], &[0, 3, 5]));
    let t2 = targets;
    push("cross_entropy", vec![logits], &move |g, v| g.cross_entropy(v[0], &t2));
    push("mse", vec![a34, b34], &|g, v| g.mse(v[0], v[1]));
    cases
}

fn r5(v6: &Tensor<f64>) -> Tensor<f64> {
    Tensor::vector(v6.data()[..5].to_vec())
}

pub fn tiny_config(variant: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 10,
        embed_dim: 4,
        num_layers: 2,
        experts_per_layer: 4,
        top_k: 2,
        shared_experts: usize::from(variant % 3 == 1),
        ffn_hidden: 3,
        renormalize_gates: variant % 3 == 2,
    }
}

pub fn random_batch(rng: &mut ChaCha8Rng, v: usize, seqs: usize) -> TokenBatch {
    let mut b = TokenBatch::new();
    for _ in 0..seqs {
        let q: Vec<usize> = (0..rng.gen_range(2..5)).map(|_| rng.gen_range(0..v)).collect();
        let a: Vec<usize> = (0..rng.gen_range(1..3)).map(|_| rng.gen_range(0..v)).collect();
        b.push_answer(&q, &a).unwrap();
    }
    b
}

type Graphed = dyn Fn(&mut Graph<f64>, &ParamVars, &MoEModel<f64>) -> Result<Var>;
type Valued = dyn Fn(&MoEModel<f64>) -> f64;

fn selection_pattern(model: &MoEModel<f64>, batches: &[&TokenBatch]) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for b in batches {
        let trace = model.trace(b).unwrap();
        for l in 0..trace.num_layers() {
            for block in trace.layer(l) {
                out.push(block.data().iter().map(|v| usize::from(*v > 0.0)).collect());
            }
        }
    }
    out
}

/// Full-model check: the graph objective's backward pass against central
/// differences of an independently evaluated loss value.
fn check_model(
    name: &str,
    model: &MoEModel<f64>,
    batches: &[&TokenBatch],
    graphed: &Graphed,
    valued: &Valued,
    tol: f64,
) -> Case {
    let mut m = model.clone();
    m.set_all_trainable(true);
    let mut g = Graph::new();
    let vars = m.bind(&mut g);
    let loss = graphed(&mut g, &vars, &m).unwrap();
    g.backward(loss).unwrap();
    // The graph objective and the value path must agree before comparing slopes.
    let v0 = valued(&m);
    let gv = g.value(loss).item();
    assert!((gv - v0).abs() <= 1e-9 * v0.abs().max(1.0), "{name}: graph {gv} vs value {v0}");

    let base_pattern = selection_pattern(&m, batches);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut kinks = 0;
    let ids: Vec<_> = m.named_params().into_iter().map(|(id, t)| (id, t.numel())).collect();
    for ((id, n), (_, var)) in ids.into_iter().zip(vars.iter()) {
        let grad = g.grad(var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        for j in 0..n {
            let perturbed = |delta: f64| {
                let mut p = m.clone();
                let t = p.named_params_mut().into_iter().find(|(pid, _)| *pid == id).unwrap().1;
                t.data_mut()[j] += delta;
                p
            };
            let (plus, minus) = (perturbed(H), perturbed(-H));
            if selection_pattern(&plus, batches) != base_pattern || selection_pattern(&minus, batches) != base_pattern {
                kinks += 1;
                continue;
            }
            numeric.push((valued(&plus) - valued(&minus)) / (2.0 * H));
            analytic.push(grad[j]);
        }
    }
    Case {
        name: name.to_string(),
        rel_err: rel_err(&analytic, &numeric),
        tol,
        kinks,
        coords: analytic.len(),
    }
}

fn answer_ce(g: &mut Graph<f64>, model: &MoEModel<f64>, vars: &ParamVars, pass: &ForwardPass, b: &TokenBatch) -> Result<Var> {
    let logits = model.prediction_logits(g, vars, pass, b)?;
    g.cross_entropy(logits, &b.targets)
}

fn frozen_value(model: &MoEModel<f64>, f: &dyn Fn(&mut Graph<f64>, &ParamVars, &MoEModel<f64>) -> Result<Var>) -> f64 {
    let mut g = Graph::new();
    let vars = model.bind_frozen(&mut g);
    let v = f(&mut g, &vars, model).unwrap();
    g.value(v).item()
}

/// GA, GDiff, NPO, RMU, the anchor term, the combined objective and the raw
/// model output, on a tiny model.
pub fn loss_cases(seed: u64) -> Vec<Case> {
    let cfg = tiny_config(seed);
    let model = MoEModel::<f64>::seeded(cfg.clone(), 100 + seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let forget = random_batch(&mut rng, cfg.vocab_size, 3);
    let retain = random_batch(&mut rng, cfg.vocab_size, 3);
    // A reference slightly away from the model, so NPO's log-ratio is non-zero.
    let mut reference = model.clone();
    for (_, t) in reference.named_params_mut() {
        t.data_mut().iter_mut().for_each(|x| *x += rng.gen_range(-0.05..0.05));
    }
    let control = control_vector::<f64>(cfg.embed_dim, 20.0, seed);
    let anchor = Anchor {
        layer: (seed % 2) as usize,
        targets: {
            let mut t = vec![0u8; cfg.experts_per_layer];
            t[(seed % 4) as usize] = 1;
            t
        },
    };
    let beta = 0.001;
    let (lambda, alpha, rw) = (0.7, 1.3, 100.0);
    let both = [&forget, &retain];
    let mut cases = Vec::new();

    let f = forget.clone();
    let ga: Box<Graphed> = Box::new(move |g, v, m| {
        let p = m.forward_pass(g, v, &f, Positions::Predictions)?;
        let ce = answer_ce(g, m, v, &p, &f)?;
        g.neg(ce)
    });
    let f2 = forget.clone();
    cases.push(check_model(&format!("loss_ga#{seed}"), &model, &both, &*ga, &move |m| loss_ga(m, &f2).unwrap(), TOL));

    let gdiff: Box<Graphed> = {
        let (f, r) = (forget.clone(), retain.clone());
        Box::new(move |g, v, m| {
            let pf = m.forward_pass(g, v, &f, Positions::Predictions)?;
            let cf = answer_ce(g, m, v, &pf, &f)?;
            let pr = m.forward_pass(g, v, &r, Positions::Predictions)?;
            let cr = answer_ce(g, m, v, &pr, &r)?;
            let nf = g.neg(cf)?;
            let sr = g.scale(cr, lambda)?;
            g.add(nf, sr)
        })
    };
    let (f3, r3) = (forget.clone(), retain.clone());
    cases.push(check_model(
        &format!("loss_gdiff#{seed}"),
        &model,
        &both,
        &*gdiff,
        &move |m| loss_gdiff(m, &f3, &r3, lambda).unwrap(),
        TOL,
    ));

    let refs = reference_logprobs(&reference, &forget).unwrap();
    let npo: Box<Graphed> = {
        let f = forget.clone();
        Box::new(move |g, v, m| {
            let p = m.forward_pass(g, v, &f, Positions::Predictions)?;
            let lp = sequence_logprobs(g, m, v, &p, &f)?;
            npo_term(g, lp, &refs, beta)
        })
    };
    let (f4, ref4) = (forget.clone(), reference.clone());
    cases.push(check_model(
        &format!("loss_npo#{seed}"),
        &model,
        &both,
        &*npo,
        &move |m| loss_npo(m, &ref4, &f4, beta).unwrap(),
        TOL_NPO,
    ));

    let layer = 1;
    let frozen_h = reference.hidden_states(&retain, layer).unwrap();
    let rmu: Box<Graphed> = {
        let (f, r, c) = (forget.clone(), retain.clone(), control.clone());
        Box::new(move |g, v, m| {
            let pf = m.forward_pass(g, v, &f, Positions::All)?;
            let pr = m.forward_pass(g, v, &r, Positions::All)?;
            let (lf, lr) = rmu_terms(g, pf.hidden(layer), Some((pr.hidden(layer), &frozen_h)), &c)?;
            let lr = g.scale(lr.unwrap(), rw)?;
            g.add(lf, lr)
        })
    };
    let (f5, r5_, c5, ref5) = (forget.clone(), retain.clone(), control.clone(), reference.clone());
    cases.push(check_model(
        &format!("loss_rmu#{seed}"),
        &model,
        &both,
        &*rmu,
        &move |m| loss_rmu(m, &ref5, &f5, &r5_, &c5, layer, rw).unwrap(),
        TOL,
    ));

    let anchor_only: Box<Graphed> = {
        let (f, a) = (forget.clone(), anchor.clone());
        Box::new(move |g, v, m| {
            let p = m.forward_pass(g, v, &f, Positions::All)?;
            anchor_term(g, &p.layers[a.layer].gates, &a)
        })
    };
    let anchor_value = {
        let (f, a) = (forget.clone(), anchor.clone());
        move |m: &MoEModel<f64>| {
            frozen_value(m, &|g, v, m| {
                let p = m.forward_pass(g, v, &f, Positions::All)?;
                anchor_term(g, &p.layers[a.layer].gates, &a)
            })
        }
    };
    cases.push(check_model(&format!("anchor#{seed}"), &model, &both, &*anchor_only, &anchor_value, TOL));

    // l_f + lambda * l_r + alpha * L_anchor with GA/CE terms.
    let total: Box<Graphed> = {
        let (f, r, a) = (forget.clone(), retain.clone(), anchor.clone());
        Box::new(move |g, v, m| {
            let pf = m.forward_pass(g, v, &f, Positions::All)?;
            let cf = answer_ce(g, m, v, &pf, &f)?;
            let lf = g.neg(cf)?;
            let pr = m.forward_pass(g, v, &r, Positions::Predictions)?;
            let cr = answer_ce(g, m, v, &pr, &r)?;
            let la = anchor_term(g, &pf.layers[a.layer].gates, &a)?;
            let sr = g.scale(cr, lambda)?;
            let sa = g.scale(la, alpha)?;
            let t = g.add(lf, sr)?;
            g.add(t, sa)
        })
    };
    let total_value = {
        let (f, r, a) = (forget.clone(), retain.clone(), anchor.clone());
        move |m: &MoEModel<f64>| {
            let anchor = frozen_value(m, &|g, v, m| {
                let p = m.forward_pass(g, v, &f, Positions::All)?;
                anchor_term(g, &p.layers[a.layer].gates, &a)
            });
            loss_gdiff(m, &f, &r, lambda).unwrap() + alpha * anchor
        }
    };
    cases.push(check_model(&format!("total#{seed}"), &model, &both, &*total, &total_value, TOL));

    // Raw logits of the whole stack under fixed random weights.
    let v = cfg.vocab_size;
    let rows = forget.num_tokens();
    let w: Vec<f64> = (0..rows * v).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wt = Tensor::matrix(rows, v, w).unwrap();
    let forward: Box<Graphed> = {
        let (f, wt) = (forget.clone(), wt.clone());
        Box::new(move |g, v, m| {
            let p = m.forward_pass(g, v, &f, Positions::All)?;
            let logits = g.matmul(p.output(), v.head)?;
            let w = g.constant(wt.clone());
            let prod = g.mul(logits, w)?;
            g.sum(prod)
        })
    };
    let forward_value = {
        let (f, wt) = (forget.clone(), wt);
        move |m: &MoEModel<f64>| {
            frozen_value(m, &|g, v, m| {
                let p = m.forward_pass(g, v, &f, Positions::All)?;
                let logits = g.matmul(p.output(), v.head)?;
                let w = g.constant(wt.clone());
                let prod = g.mul(logits, w)?;
                g.sum(prod)
            })
        }
    };
    cases.push(check_model(&format!("moe_forward#{seed}"), &model, &[&forget], &*forward, &forward_value, TOL));
    cases
}

/// The whole seeded suite.
pub fn suite() -> Vec<Case> {
    let mut cases = Vec::new();
    for seed in 0..4 {
        cases.extend(op_cases(seed));
    }
    for seed in 0..4 {
        cases.extend(loss_cases(seed));
    }
    cases
}
