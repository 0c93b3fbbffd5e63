use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytics::{
    affinity_scores, overlap_ratio, random_plan, rank_and_select, sample_subset, token_assignment_proportion,
    top_k_sets, AffinitySummary, PlanEntry, SelectionPlan, Strategy,
};
use crate::bench::{batch_of, chance_floor, exact_match, eval_threads, BenchmarkSplit, Example};
use crate::error::{Error, Result, StageExt};
use crate::graph::{Graph, Var};
use crate::model::{apply_mask, argmax, MoEModel, ParamMask, Positions, TokenBatch};
use crate::scalar::Scalar;
use crate::tensor::sgd_step;

use super::losses::{anchor_term, check_layer, control_vector, npo_term, reference_logprobs, rmu_terms, sequence_logprobs};
use super::{Algorithm, LossBundle, Selection, UnlearnConfig};

/// FE counts as matched once it is within this margin of the chance floor.
pub const MATCH_MARGIN: f64 = 0.05;

pub const METRICS_HEADER: &str = "step,loss_forget,loss_retain,loss_anchor,overlap_ratio,fe,ut";

/// Fixed inputs shared by every step of a run.
#[derive(Debug, Clone)]
pub struct StepContext<'a, S> {
    /// The model before unlearning; NPO's reference and RMU's frozen copy.
    pub reference: &'a MoEModel<S>,
    /// RMU steering target `c * u`.
    pub control: Vec<S>,
    pub rmu_layer: usize,
}

/// One optimization step of `l_f + lambda * l_r + alpha * L_anchor` on the
/// currently trainable tensors.
pub fn seuf_step<S: Scalar>(
    model: &mut MoEModel<S>,
    ctx: &StepContext<'_, S>,
    plan: &SelectionPlan,
    forget: &TokenBatch,
    retain: &TokenBatch,
    cfg: &UnlearnConfig,
) -> Result<LossBundle> {
    let lambda = cfg.effective_lambda();
    let alpha = cfg.effective_alpha();
    let anchored = alpha != 0.0 && !plan.is_empty();
    let rmu = cfg.algorithm == Algorithm::Rmu;
    if rmu {
        check_layer(model, ctx.rmu_layer)?;
    }
    let positions = if anchored || rmu { Positions::All } else { Positions::Predictions };

    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let pf = model.forward_pass(&mut g, &vars, forget, positions)?;
    let (forget_term, retain_term) = match cfg.algorithm {
        Algorithm::Ga | Algorithm::Gdiff => {
            let ce = answer_ce(&mut g, model, &vars, &pf, forget)?;
            let f = g.neg(ce)?;
            let pr = model.forward_pass(&mut g, &vars, retain, Positions::Predictions)?;
            (f, answer_ce(&mut g, model, &vars, &pr, retain)?)
        }
        Algorithm::Npo => {
            let refs = reference_logprobs(ctx.reference, forget)?;
            let lp = sequence_logprobs(&mut g, model, &vars, &pf, forget)?;
            let f = npo_term(&mut g, lp, &refs, cfg.beta)?;
            let pr = model.forward_pass(&mut g, &vars, retain, Positions::Predictions)?;
            (f, answer_ce(&mut g, model, &vars, &pr, retain)?)
        }
        Algorithm::Rmu => {
            let frozen = ctx.reference.hidden_states(retain, ctx.rmu_layer)?;
            let pr = model.forward_pass(&mut g, &vars, retain, Positions::All)?;
            let (f, r) = rmu_terms(
                &mut g,
                pf.hidden(ctx.rmu_layer),
                Some((pr.hidden(ctx.rmu_layer), &frozen)),
                &ctx.control,
            )?;
            (f, r.expect("retain pass supplied"))
        }
    };
    let anchor = if anchored {
        let mut acc: Option<Var> = None;
        for a in &plan.anchors {
            let term = anchor_term(&mut g, &pf.layers[a.layer].gates, a)?;
            acc = Some(match acc {
                Some(prev) => g.add(prev, term)?,
                None => term,
            });
        }
        acc
    } else {
        None
    };

    let mut total = forget_term;
    if lambda != 0.0 {
        let r = g.scale(retain_term, S::from_f64_lossy(lambda))?;
        total = g.add(total, r)?;
    }
    if let Some(a) = anchor {
        let a = g.scale(a, S::from_f64_lossy(alpha))?;
        total = g.add(total, a)?;
    }
    g.backward(total)?;
    model.accumulate_grads(&g, &vars)?;
    let lr = S::from_f64_lossy(cfg.lr);
    sgd_step(model.named_params_mut().into_iter().map(|(id, t)| (id.to_string(), t)), lr)?;

    let value = |v: Var| g.value(v).item().to_f64_lossy();
    Ok(LossBundle {
        forget: value(forget_term),
        retain: value(retain_term),
        anchor: anchor.map(|a| value(a)).unwrap_or(0.0),
        lambda,
        alpha: if anchored { alpha } else { 0.0 },
        total: value(total),
    })
}

fn answer_ce<S: Scalar>(
    g: &mut Graph<S>,
    model: &MoEModel<S>,
    vars: &crate::model::ParamVars,
    pass: &crate::model::ForwardPass,
    batch: &TokenBatch,
) -> Result<Var> {
    let logits = model.prediction_logits(g, vars, pass, batch)?;
    g.cross_entropy(logits, &batch.targets)
}

/// Affinity-ranked or uniformly random targets, per the config.
pub fn select_plan(summary: &AffinitySummary, cfg: &UnlearnConfig, rng: &mut ChaCha8Rng) -> Result<SelectionPlan> {
    match cfg.selection {
        Selection::Affinity => rank_and_select(summary, cfg.m, cfg.strategy),
        Selection::Random => random_plan(summary, cfg.m, cfg.strategy, rng),
    }
}

/// Held-out evaluation at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub fe: f64,
    pub ut: f64,
    /// Top-k expert overlap with the model before unlearning.
    pub overlap: f64,
    /// Share of forget tokens whose largest gate in the tracked expert's
    /// layer belongs to that expert.
    pub target_top1: f64,
    /// Of the tokens where the tracked expert was top-1 before unlearning,
    /// the share where it still is.
    pub target_retention: f64,
}

/// One line of the metrics log. Loss fields are empty on the step-0 line;
/// evaluation fields are filled only at evaluation steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub loss_forget: Option<f64>,
    pub loss_retain: Option<f64>,
    pub loss_anchor: Option<f64>,
    pub overlap_ratio: Option<f64>,
    pub fe: Option<f64>,
    pub ut: Option<f64>,
}

impl MetricRow {
    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            f(self.loss_forget),
            f(self.loss_retain),
            f(self.loss_anchor),
            f(self.overlap_ratio),
            f(self.fe),
            f(self.ut)
        )
    }
}

#[derive(Debug, Clone)]
pub struct UnlearnOutcome<S> {
    /// Checkpoint picked by the best-checkpoint rule.
    pub model: MoEModel<S>,
    pub final_model: MoEModel<S>,
    pub summary: AffinitySummary,
    pub plan: SelectionPlan,
    /// Expert whose routing share is tracked in [`EvalPoint::target_top1`].
    pub tracked: PlanEntry,
    pub mask: ParamMask,
    pub calibration: Vec<usize>,
    pub chance: f64,
    pub threshold: f64,
    pub evals: Vec<EvalPoint>,
    pub rows: Vec<MetricRow>,
    pub best: EvalPoint,
    pub first_match: Option<EvalPoint>,
    /// Step whose update produced a non-finite value. The run stops there and
    /// keeps the last finite model.
    pub diverged_at: Option<u64>,
}

impl<S> UnlearnOutcome<S> {
    pub fn base(&self) -> &EvalPoint {
        &self.evals[0]
    }

    pub fn matched(&self) -> bool {
        self.first_match.is_some()
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

struct Probe<'a> {
    batch: TokenBatch,
    base_sets: Vec<Vec<usize>>,
    tracked: PlanEntry,
    base_top1: Vec<bool>,
    eval_forget: &'a [Example],
    eval_utility: &'a [Example],
    top: usize,
    threads: usize,
}

impl Probe<'_> {
    fn eval<S: Scalar>(&self, model: &MoEModel<S>, step: u64) -> Result<EvalPoint> {
        let fe = exact_match(model, self.eval_forget, self.threads)?;
        let ut = exact_match(model, self.eval_utility, self.threads)?;
        let trace = model.trace(&self.batch)?;
        let sets = top_k_sets(&token_assignment_proportion(&trace)?, self.top);
        let overlap = overlap_ratio(&self.base_sets, &sets)?;
        let top1 = top1_tokens(&trace, self.tracked);
        let kept = top1.iter().zip(&self.base_top1).filter(|&(&now, &was)| now && was).count();
        let was = self.base_top1.iter().filter(|&&b| b).count();
        Ok(EvalPoint {
            step,
            fe,
            ut,
            overlap,
            target_top1: top1.iter().filter(|&&b| b).count() as f64 / top1.len() as f64,
            target_retention: if was == 0 { 0.0 } else { kept as f64 / was as f64 },
        })
    }
}

/// Per token of the expert's layer, whether that expert holds the largest gate.
fn top1_tokens<S: Scalar>(trace: &crate::analytics::RoutingTrace<S>, e: PlanEntry) -> Vec<bool> {
    let mut out = Vec::with_capacity(trace.num_tokens());
    for block in trace.layer(e.layer) {
        let n = block.shape()[1];
        out.extend(block.data().chunks(n).map(|row| argmax(row) == e.expert));
    }
    out
}

fn draw<'a>(pool: &'a [Example], k: usize, rng: &mut ChaCha8Rng) -> Result<TokenBatch> {
    let k = k.min(pool.len());
    let mut idx = sample(rng, pool.len(), k).into_vec();
    idx.sort_unstable();
    batch_of(idx.iter().map(|&i| &pool[i]))
}

/// Calibration, attribution, selection, masking, then `cfg.steps` unlearning
/// steps with periodic held-out evaluation. `on_row` sees each metrics line
/// as it is produced.
pub fn unlearn_run<S: Scalar>(
    base: &MoEModel<S>,
    split: &BenchmarkSplit,
    cfg: &UnlearnConfig,
    mut on_row: impl FnMut(&MetricRow),
) -> Result<UnlearnOutcome<S>> {
    cfg.validate().stage("config")?;
    for (name, set) in [
        ("forget set", &split.forget),
        ("retain set", &split.retain),
        ("forget evaluation set", &split.eval_forget),
        ("utility evaluation set", &split.eval_utility),
    ] {
        if set.is_empty() {
            return Err(Error::Empty(name)).stage("data");
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let lens: Vec<usize> = split.forget.iter().map(Example::input_len).collect();
    let calibration = sample_subset(&lens, cfg.calibration_tokens, &mut rng).stage("calibration")?;
    let summary = batch_of(calibration.iter().map(|&j| &split.forget[j]))
        .and_then(|b| base.trace(&b))
        .and_then(|t| affinity_scores(&t))
        .stage("attribution")?;

    let plan = if cfg.seuf {
        select_plan(&summary, cfg, &mut rng).stage("selection")?
    } else {
        SelectionPlan::empty()
    };
    let tracked = match plan.entries.first() {
        Some(e) => *e,
        None => rank_and_select(&summary, 1, Strategy::SameLayer).stage("selection")?.entries[0],
    };

    let mut model = base.clone();
    let mask = if cfg.seuf {
        apply_mask(&mut model, &plan).stage("mask")?
    } else {
        ParamMask::all(&mut model)
    };
    let rmu_layer = if cfg.seuf {
        *plan.layers().iter().max().expect("non-empty plan")
    } else {
        cfg.rmu_layer
    };
    let ctx = StepContext {
        reference: base,
        control: control_vector(base.config().embed_dim, cfg.rmu_c, cfg.seed ^ 0x5eed_c0de),
        rmu_layer,
    };

    let probe_batch = batch_of(&split.eval_forget).stage("probe")?;
    let base_trace = base.trace(&probe_batch).stage("probe")?;
    let probe = Probe {
        base_top1: top1_tokens(&base_trace, tracked),
        base_sets: token_assignment_proportion(&base_trace)
            .map(|p| top_k_sets(&p, cfg.overlap_top))
            .stage("probe")?,
        batch: probe_batch,
        tracked,
        eval_forget: &split.eval_forget,
        eval_utility: &split.eval_utility,
        top: cfg.overlap_top,
        threads: eval_threads(),
    };
    let chance = chance_floor(&split.eval_forget, split.answer_space);
    let threshold = chance + MATCH_MARGIN;

    let first = probe.eval(&model, 0).stage("evaluation")?;
    let mut evals = vec![first];
    let mut rows = Vec::new();
    let row0 = MetricRow {
        step: 0,
        loss_forget: None,
        loss_retain: None,
        loss_anchor: None,
        overlap_ratio: Some(first.overlap),
        fe: Some(first.fe),
        ut: Some(first.ut),
    };
    on_row(&row0);
    rows.push(row0);
    let mut best: Option<(EvalPoint, MoEModel<S>)> = None;
    let consider = |e: EvalPoint, m: &MoEModel<S>, best: &mut Option<(EvalPoint, MoEModel<S>)>| {
        if e.fe <= threshold && best.as_ref().map_or(true, |(b, _)| e.ut > b.ut) {
            *best = Some((e, m.clone()));
        }
    };
    consider(first, &model, &mut best);

    let mut diverged_at = None;
    for step in 1..=cfg.steps {
        let forget = draw(&split.forget, cfg.batch_size, &mut rng).stage("batching")?;
        let retain = draw(&split.retain, cfg.batch_size, &mut rng).stage("batching")?;
        let before = model.clone();
        let bundle = match seuf_step(&mut model, &ctx, &plan, &forget, &retain, cfg) {
            Ok(b) if b.total.is_finite() && model.is_finite() => b,
            Ok(_) => {
                model = before;
                diverged_at = Some(step);
                break;
            }
            Err(e) if e.is_non_finite() => {
                model = before;
                diverged_at = Some(step);
                break;
            }
            Err(e) => return Err(e).stage("unlearn step"),
        };
        let mut row = MetricRow {
            step,
            loss_forget: Some(bundle.forget),
            loss_retain: Some(bundle.retain),
            loss_anchor: Some(bundle.anchor),
            overlap_ratio: None,
            fe: None,
            ut: None,
        };
        if step % cfg.eval_interval == 0 || step == cfg.steps {
            let e = match probe.eval(&model, step) {
                Ok(e) => e,
                Err(e) if e.is_non_finite() => {
                    model = before;
                    diverged_at = Some(step);
                    break;
                }
                Err(e) => return Err(e).stage("evaluation"),
            };
            row.overlap_ratio = Some(e.overlap);
            row.fe = Some(e.fe);
            row.ut = Some(e.ut);
            evals.push(e);
            consider(e, &model, &mut best);
        }
        on_row(&row);
        rows.push(row);
    }

    if let Some(step) = diverged_at {
        let last_step = step - 1;
        if evals.last().map_or(true, |e| e.step != last_step) {
            match probe.eval(&model, last_step) {
                Ok(e) => {
                    if let Some(row) = rows.last_mut() {
                        row.overlap_ratio = Some(e.overlap);
                        row.fe = Some(e.fe);
                        row.ut = Some(e.ut);
                    }
                    evals.push(e);
                    consider(e, &model, &mut best);
                }
                Err(e) if e.is_non_finite() => {}
                Err(e) => return Err(e).stage("evaluation"),
            }
        }
    }
    let first_match = evals.iter().find(|e| e.fe <= threshold).copied();
    let last = *evals.last().expect("step-0 evaluation");
    let (best, chosen) = match best {
        Some((e, m)) => (e, m),
        None => (last, model.clone()),
    };
    Ok(UnlearnOutcome {
        model: chosen,
        final_model: model,
        summary,
        plan,
        tracked,
        mask,
        calibration,
        chance,
        threshold,
        evals,
        rows,
        best,
        first_match,
        diverged_at,
    })
}
