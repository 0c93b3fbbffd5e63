use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Draws sequences uniformly without replacement until at least `tokens`
/// tokens are covered (or the pool runs out). Returns sequence indices in
/// draw order.
pub fn sample_subset<R: Rng + ?Sized>(seq_lens: &[usize], tokens: usize, rng: &mut R) -> Result<Vec<usize>> {
    Ok(sample_disjoint(seq_lens, tokens, 1, rng)?.remove(0))
}

/// `count` disjoint subsets of at least `tokens` tokens each, drawn from one
/// shuffled pass over the pool.
pub fn sample_disjoint<R: Rng + ?Sized>(
    seq_lens: &[usize],
    tokens: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if seq_lens.is_empty() {
        return Err(Error::Empty("calibration pool"));
    }
    let mut order: Vec<usize> = (0..seq_lens.len()).collect();
    order.shuffle(rng);
    let mut it = order.into_iter();
    let mut out = Vec::with_capacity(count);
    for c in 0..count {
        let mut subset = Vec::new();
        let mut covered = 0;
        while covered < tokens {
            match it.next() {
                Some(j) => {
                    covered += seq_lens[j];
                    subset.push(j);
                }
                None if count == 1 => break,
                None => {
                    return Err(Error::config(format!(
                        "pool too small for {count} disjoint subsets of {tokens} tokens (ran out in subset {c})"
                    )))
                }
            }
        }
        out.push(subset);
    }
    Ok(out)
}
