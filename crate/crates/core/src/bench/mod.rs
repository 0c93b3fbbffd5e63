//! Synthetic topic-partitioned fact benchmark.
//!
//! Vocabulary layout: topic `t` owns the band `[t * band, (t + 1) * band)`;
//! every token from `topics * band` up to the vocabulary size forms the shared
//! band, which also supplies the answer tokens. A question is a block of
//! filler tokens (topic band and shared band mixed) followed by the fact's
//! key tokens. Paraphrases reorder the filler block and keep the keys fixed.

mod metrics;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenBatch;

pub use metrics::{chance_floor, eval_threads, exact_match, forget_efficacy, utility};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchParams {
    pub seed: u64,
    pub topics: usize,
    pub facts_per_topic: usize,
    /// Training surface forms per fact; one further form is held out for evaluation.
    pub paraphrases: usize,
    pub forget_topics: Vec<usize>,
    pub vocab_size: usize,
    pub band_width: usize,
    pub question_len: usize,
    pub key_tokens: usize,
    /// Share of question tokens drawn from the topic band.
    pub topic_fraction: f64,
    pub min_answer_len: usize,
    pub max_answer_len: usize,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self {
            seed: 7,
            topics: 8,
            facts_per_topic: 64,
            paraphrases: 4,
            forget_topics: vec![0],
            vocab_size: 256,
            band_width: 24,
            question_len: 16,
            key_tokens: 3,
            topic_fraction: 0.7,
            min_answer_len: 1,
            max_answer_len: 4,
        }
    }
}

impl BenchParams {
    pub fn shared_band(&self) -> std::ops::Range<usize> {
        self.topics * self.band_width..self.vocab_size
    }

    pub fn topic_band(&self, t: usize) -> std::ops::Range<usize> {
        t * self.band_width..(t + 1) * self.band_width
    }

    /// Number of tokens an answer position can take.
    pub fn answer_space(&self) -> usize {
        self.shared_band().len()
    }

    fn topic_tokens(&self) -> usize {
        (self.topic_fraction * self.question_len as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.topics == 0 || self.facts_per_topic == 0 || self.paraphrases == 0 {
            return Err(Error::config("topics, facts_per_topic and paraphrases must be positive"));
        }
        if self.topics * self.band_width + 8 > self.vocab_size {
            return Err(Error::config(format!(
                "vocab too small: {} topics x {} band tokens leave fewer than 8 shared tokens in {}",
                self.topics, self.band_width, self.vocab_size
            )));
        }
        if !(0.0..=1.0).contains(&self.topic_fraction) {
            return Err(Error::config("topic_fraction must lie in [0, 1]"));
        }
        let topic_tokens = self.topic_tokens();
        if self.key_tokens == 0 || self.key_tokens > topic_tokens || topic_tokens > self.question_len {
            return Err(Error::config("need 0 < key_tokens <= topic tokens <= question_len"));
        }
        if self.key_tokens > self.band_width {
            return Err(Error::config("key_tokens exceeds band width"));
        }
        if self.min_answer_len == 0 || self.min_answer_len > self.max_answer_len {
            return Err(Error::config("answer length range must satisfy 1 <= min <= max"));
        }
        if self.question_len - self.key_tokens < 2 {
            return Err(Error::config("question needs at least two filler tokens to paraphrase"));
        }
        if self.forget_topics.is_empty() || self.forget_topics.iter().any(|&t| t >= self.topics) {
            return Err(Error::config("forget_topics must name existing topics"));
        }
        Ok(())
    }
}

/// One question/answer pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub q: Vec<usize>,
    pub a: Vec<usize>,
}

impl Example {
    /// Tokens the model consumes when scored on this example.
    pub fn input_len(&self) -> usize {
        self.q.len() + self.a.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub topic: usize,
    /// Canonical question; also the first training form.
    pub q: Vec<usize>,
    pub a: Vec<usize>,
    /// All training forms, canonical first.
    pub train_q: Vec<Vec<usize>>,
    /// Held-out paraphrase used only for evaluation.
    pub eval_q: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub forget_topics: Vec<usize>,
    pub retain_topics: Vec<usize>,
}

/// Serialized benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub seed: u64,
    pub topics: usize,
    pub params: BenchParams,
    pub facts: Vec<Fact>,
    pub splits: Splits,
}

/// Forget/retain training data and the two held-out evaluation sets.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSplit {
    pub forget: Vec<Example>,
    pub retain: Vec<Example>,
    pub eval_forget: Vec<Example>,
    pub eval_utility: Vec<Example>,
    pub answer_space: usize,
}

pub fn gen_benchmark(params: &BenchParams) -> Result<Benchmark> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let shared: Vec<usize> = params.shared_band().collect();
    let topic_tokens = params.topic_tokens();
    let filler_topic = topic_tokens - params.key_tokens;
    let filler_shared = params.question_len - topic_tokens;
    let mut facts = Vec::with_capacity(params.topics * params.facts_per_topic);
    for topic in 0..params.topics {
        let band: Vec<usize> = params.topic_band(topic).collect();
        let mut used_keys = BTreeSet::new();
        for _ in 0..params.facts_per_topic {
            let keys = loop {
                let mut k: Vec<usize> = band.choose_multiple(&mut rng, params.key_tokens).copied().collect();
                let mut sorted = k.clone();
                sorted.sort_unstable();
                if used_keys.insert(sorted) {
                    k.shuffle(&mut rng);
                    break k;
                }
            };
            let mut filler: Vec<usize> = (0..filler_topic).map(|_| band[rng.gen_range(0..band.len())]).collect();
            filler.extend((0..filler_shared).map(|_| shared[rng.gen_range(0..shared.len())]));
            let mut forms: Vec<Vec<usize>> = Vec::with_capacity(params.paraphrases + 1);
            let mut attempts = 0;
            while forms.len() < params.paraphrases + 1 {
                filler.shuffle(&mut rng);
                let q: Vec<usize> = filler.iter().chain(&keys).copied().collect();
                attempts += 1;
                if !forms.contains(&q) {
                    forms.push(q);
                } else if attempts > 1000 {
                    return Err(Error::config("filler too uniform to produce distinct paraphrases"));
                }
            }
            let len = rng.gen_range(params.min_answer_len..=params.max_answer_len);
            let a = (0..len).map(|_| shared[rng.gen_range(0..shared.len())]).collect();
            let eval_q = forms.pop().expect("paraphrases + 1 forms");
            facts.push(Fact {
                topic,
                q: forms[0].clone(),
                a,
                train_q: forms,
                eval_q,
            });
        }
    }
    let forget_topics = params.forget_topics.clone();
    let retain_topics = (0..params.topics).filter(|t| !forget_topics.contains(t)).collect();
    Ok(Benchmark {
        seed: params.seed,
        topics: params.topics,
        params: params.clone(),
        facts,
        splits: Splits {
            forget_topics,
            retain_topics,
        },
    })
}

impl Benchmark {
    pub fn split(&self) -> BenchmarkSplit {
        let mut out = BenchmarkSplit {
            forget: Vec::new(),
            retain: Vec::new(),
            eval_forget: Vec::new(),
            eval_utility: Vec::new(),
            answer_space: self.params.answer_space(),
        };
        for f in &self.facts {
            let forget = self.splits.forget_topics.contains(&f.topic);
            let train = f.train_q.iter().map(|q| Example {
                q: q.clone(),
                a: f.a.clone(),
            });
            let eval = Example {
                q: f.eval_q.clone(),
                a: f.a.clone(),
            };
            if forget {
                out.forget.extend(train);
                out.eval_forget.push(eval);
            } else {
                out.retain.extend(train);
                out.eval_utility.push(eval);
            }
        }
        out
    }

    /// Every training sequence of every topic.
    pub fn corpus(&self) -> Vec<Example> {
        self.facts
            .iter()
            .flat_map(|f| {
                f.train_q.iter().map(move |q| Example {
                    q: q.clone(),
                    a: f.a.clone(),
                })
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let b: Benchmark = serde_json::from_str(text)?;
        b.params.validate()?;
        Ok(b)
    }
}

/// Adds a shared random direction, scaled by `strength`, to the embedding of
/// every token in each topic band, so tokens of one topic start clustered.
pub fn seed_topic_embeddings<S: crate::scalar::Scalar>(
    model: &mut crate::model::MoEModel<S>,
    params: &BenchParams,
    strength: f64,
    seed: u64,
) -> Result<()> {
    let d = model.config().embed_dim;
    if params.topics * params.band_width > model.config().vocab_size {
        return Err(Error::config("topic bands exceed the model vocabulary"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..params.topics {
        let centroid: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        for tok in params.topic_band(t) {
            let row = &mut model.embed.data_mut()[tok * d..(tok + 1) * d];
            for (x, c) in row.iter_mut().zip(&centroid) {
                *x = *x + S::from_f64_lossy(strength * c);
            }
        }
    }
    Ok(())
}

/// Packs examples into a scored batch.
pub fn batch_of<'a, I>(examples: I) -> Result<TokenBatch>
where
    I: IntoIterator<Item = &'a Example>,
{
    let mut batch = TokenBatch::new();
    for e in examples {
        batch.push_answer(&e.q, &e.a)?;
    }
    Ok(batch)
}
