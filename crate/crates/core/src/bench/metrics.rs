use crate::error::Result;
use crate::model::MoEModel;
use crate::scalar::Scalar;

use super::{batch_of, Example};

const CHUNK: usize = 128;

/// Worker count for evaluation, from `MOEULAB_THREADS` (default 1).
pub fn eval_threads() -> usize {
    std::env::var("MOEULAB_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

fn count_correct<S: Scalar>(model: &MoEModel<S>, examples: &[Example]) -> Result<usize> {
    let mut correct = 0;
    for chunk in examples.chunks(CHUNK) {
        let batch = batch_of(chunk)?;
        let preds = model.predict(&batch)?;
        for (j, e) in chunk.iter().enumerate() {
            let span = batch.pred_offsets[j]..batch.pred_offsets[j + 1];
            if preds[span] == e.a[..] {
                correct += 1;
            }
        }
    }
    Ok(correct)
}

/// Fraction of examples whose greedy continuation reproduces the answer
/// exactly. Counts are integers, so the thread split never changes the result.
pub fn exact_match<S: Scalar>(model: &MoEModel<S>, examples: &[Example], threads: usize) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let threads = threads.clamp(1, examples.len().div_ceil(CHUNK));
    let correct = if threads == 1 {
        count_correct(model, examples)?
    } else {
        let per = examples.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = examples
                .chunks(per)
                .map(|part| scope.spawn(move || count_correct(model, part)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .sum::<Result<usize>>()
        })?
    };
    Ok(correct as f64 / examples.len() as f64)
}

/// Exact-match accuracy on held-out forget paraphrases. Lower is better.
pub fn forget_efficacy<S: Scalar>(model: &MoEModel<S>, eval_forget: &[Example]) -> Result<f64> {
    exact_match(model, eval_forget, eval_threads())
}

/// Exact-match accuracy on held-out retain paraphrases. Higher is better.
pub fn utility<S: Scalar>(model: &MoEModel<S>, eval_utility: &[Example]) -> Result<f64> {
    exact_match(model, eval_utility, eval_threads())
}

/// Expected exact-match rate of a guesser uniform over the answer space.
pub fn chance_floor(examples: &[Example], answer_space: usize) -> f64 {
    if examples.is_empty() || answer_space == 0 {
        return 0.0;
    }
    let p = 1.0 / answer_space as f64;
    examples.iter().map(|e| p.powi(e.a.len() as i32)).sum::<f64>() / examples.len() as f64
}
