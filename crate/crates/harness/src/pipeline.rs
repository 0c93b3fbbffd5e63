//! The steps behind each subcommand, callable without going through the CLI.

use std::path::Path;
use std::time::Instant;

use moeulab::analytics::{
    affinity_scores, long_tail_stats, rank_and_select, sample_subset, token_assignment_proportion, AffinitySummary,
    SelectionPlan, Strategy,
};
use moeulab::bench::{batch_of, seed_topic_embeddings, Benchmark, Example};
use moeulab::pretrain::{pretrain, AdamState, CurvePoint, PretrainOutcome};
use moeulab::unlearn::{unlearn_run, EvalPoint, UnlearnOutcome};
use moeulab::{Model64, MoEModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ReportRow};
use crate::error::{HarnessError, HarnessResult};

pub const EVALS_HEADER: &str = "step,fe,ut,overlap,target_top1,target_retention";
pub const ASSIGNMENT_HEADER: &str = "layer,expert,proportion";

pub fn load_benchmark(path: &Path) -> HarnessResult<Benchmark> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Usage(format!("cannot read benchmark {}: {e}", path.display())))?;
    Benchmark::from_json(&text).map_err(HarnessError::usage)
}

pub fn load_model(path: &Path) -> HarnessResult<Model64> {
    moeulab::checkpoint::load(path).map_err(|e| HarnessError::Usage(format!("checkpoint {}: {e}", path.display())))
}

/// Seeded initial weights with topic-clustered embeddings.
pub fn fresh_model(cfg: &ExperimentConfig) -> HarnessResult<Model64> {
    let mut model = MoEModel::seeded(cfg.model.clone(), cfg.init.seed)?;
    if cfg.init.topic_prior != 0.0 {
        seed_topic_embeddings(&mut model, &cfg.bench, cfg.init.topic_prior, cfg.init.topic_seed)?;
    }
    Ok(model)
}

/// Pretrains from `start` (a fresh model unless resuming) on the full corpus.
pub fn train_base(
    cfg: &ExperimentConfig,
    bench: &Benchmark,
    start: Option<(Model64, AdamState<f64>)>,
    on_point: impl FnMut(&CurvePoint),
) -> HarnessResult<(Model64, AdamState<f64>, PretrainOutcome)> {
    let (mut model, mut state) = match start {
        Some(s) => s,
        None => {
            let m = fresh_model(cfg)?;
            let st = AdamState::new(&m);
            (m, st)
        }
    };
    let split = bench.split();
    let corpus = bench.corpus();
    let out = pretrain(&mut model, &mut state, &corpus, &split.eval_forget, &split.eval_utility, &cfg.pretrain, on_point)?;
    model.set_all_trainable(false);
    Ok((model, state, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTail {
    pub layer: usize,
    /// Combined assignment share of the six busiest experts, over `K`.
    pub top6_share: f64,
    /// The same share under uniform routing, `6 / N`.
    pub uniform_share: f64,
    pub gini: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub calibration: Vec<usize>,
    pub tokens: usize,
    pub summary: AffinitySummary,
    pub proportions: Vec<Vec<f64>>,
    pub long_tail: Vec<LayerTail>,
    pub plan: SelectionPlan,
}

impl Attribution {
    pub fn proportions_csv(&self) -> String {
        let mut s = format!("{ASSIGNMENT_HEADER}\n");
        for (l, row) in self.proportions.iter().enumerate() {
            for (e, p) in row.iter().enumerate() {
                s.push_str(&format!("{l},{e},{p}\n"));
            }
        }
        s
    }
}

/// Affinity, routing shares and a selection plan from a calibration sample
/// of about `tokens` tokens drawn from `pool`.
pub fn attribute(
    model: &Model64,
    pool: &[Example],
    tokens: usize,
    seed: u64,
    m: usize,
    strategy: Strategy,
) -> HarnessResult<Attribution> {
    let lens: Vec<usize> = pool.iter().map(Example::input_len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let calibration = sample_subset(&lens, tokens, &mut rng)?;
    attribute_subset(model, pool, calibration, m, strategy)
}

pub fn attribute_subset(
    model: &Model64,
    pool: &[Example],
    calibration: Vec<usize>,
    m: usize,
    strategy: Strategy,
) -> HarnessResult<Attribution> {
    let trace = model.trace(&batch_of(calibration.iter().map(|&j| &pool[j]))?)?;
    let summary = affinity_scores(&trace)?;
    let proportions = token_assignment_proportion(&trace)?;
    let k = model.config().top_k;
    let n = model.config().experts_per_layer;
    let long_tail = proportions
        .iter()
        .enumerate()
        .map(|(layer, p)| {
            let t = long_tail_stats(p, k);
            LayerTail {
                layer,
                top6_share: t.top6_share,
                uniform_share: 6.0f64.min(n as f64) / n as f64,
                gini: t.gini,
            }
        })
        .collect();
    let plan = rank_and_select(&summary, m, strategy)?;
    Ok(Attribution {
        tokens: trace.num_tokens(),
        calibration,
        summary,
        proportions,
        long_tail,
        plan,
    })
}

pub fn evals_csv(evals: &[EvalPoint]) -> String {
    let mut s = format!("{EVALS_HEADER}\n");
    for e in evals {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.step, e.fe, e.ut, e.overlap, e.target_top1, e.target_retention
        ));
    }
    s
}

/// Runs one unlearning job and summarises it as a report row.
pub fn run_unlearn(
    base: &Model64,
    bench: &Benchmark,
    cfg: &ExperimentConfig,
) -> HarnessResult<(UnlearnOutcome<f64>, ReportRow)> {
    cfg.validate()?;
    if base.config() != &cfg.model {
        return Err(HarnessError::Usage("checkpoint architecture differs from the config's model".into()));
    }
    let u = &cfg.unlearn;
    let t = Instant::now();
    let out = unlearn_run(base, &bench.split(), u, |_| {})?;
    let wall_seconds = t.elapsed().as_secs_f64();
    let base_eval = *out.base();
    let row = ReportRow {
        method: ReportRow::method_label(u.algorithm, u.seuf, u.selection),
        algorithm: u.algorithm,
        seuf: u.seuf,
        m: u.m,
        strategy: u.strategy,
        selection: u.selection,
        alpha: u.effective_alpha(),
        seed: u.seed,
        fe: out.best.fe,
        ut: out.best.ut,
        base_fe: base_eval.fe,
        base_ut: base_eval.ut,
        chance: out.chance,
        threshold: out.threshold,
        matched: out.matched(),
        step: out.best.step,
        first_match_step: out.first_match.map(|e| e.step),
        overlap: out.best.overlap,
        first_match_overlap: out.first_match.map(|e| e.overlap),
        target_retention: out.best.target_retention,
        param_fraction: out.mask.fraction(),
        diverged_at: out.diverged_at,
        wall_seconds,
    };
    row.validate()?;
    Ok((out, row))
}
