//! Planted-structure synthetic QA data.
//!
//! The content vocabulary is split into one pool per question type plus a
//! filler pool. A type-`k` question is a type prefix token followed by one
//! segment of distinct tokens from every type pool, in pool order. Evidence
//! sentences copy `round(overlap_strength * sentence_len)` tokens from the
//! question's own type-`k` segment; every other token, in evidence and
//! distractors alike, is drawn uniformly from the filler pool. Which question
//! segment matters is therefore type-conditional.

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, QaInstance, QuestionTypes};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_instances: usize,
    /// Sentences per instance.
    pub m: usize,
    /// Evidence sentences per instance.
    pub n: usize,
    /// Content tokens, excluding the type prefix tokens.
    pub vocab_size: usize,
    pub num_types: usize,
    pub overlap_strength: f64,
    pub seed: u64,
    pub segment_len: usize,
    pub sentence_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_instances: 1000,
            m: 8,
            n: 2,
            vocab_size: 160,
            num_types: 3,
            overlap_strength: 0.6,
            seed: 0,
            segment_len: 4,
            sentence_len: 6,
        }
    }
}

impl SynthConfig {
    fn pool_size(&self) -> usize {
        self.vocab_size / (self.num_types + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.m == 0 || self.n > self.m {
            return err(format!(
                "need 1 <= m and n <= m (m={}, n={})",
                self.m, self.n
            ));
        }
        if self.num_types == 0 {
            return err("num_types must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.overlap_strength) {
            return err(format!(
                "overlap_strength {} outside [0, 1]",
                self.overlap_strength
            ));
        }
        if self.segment_len == 0 || self.sentence_len == 0 {
            return err("segment_len and sentence_len must be positive".into());
        }
        // Each type pool must hold a question segment and still leave tokens
        // for the background.
        if self.pool_size() < 2 * self.segment_len {
            return err(format!(
                "vocab_size {} too small: {} type pools plus filler need at least {} tokens each",
                self.vocab_size,
                self.num_types,
                2 * self.segment_len
            ));
        }
        Ok(())
    }

    pub fn type_labels(&self) -> Vec<String> {
        (0..self.num_types).map(|k| format!("type{k}")).collect()
    }

    fn overlap_count(&self) -> usize {
        (self.overlap_strength * self.sentence_len as f64).round() as usize
    }
}

fn content_token(idx: usize) -> String {
    format!("w{idx}")
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let types = QuestionTypes::new(cfg.type_labels())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pool = cfg.pool_size();
    let n_overlap = cfg.overlap_count();
    let filler = cfg.num_types * pool..cfg.vocab_size;

    let mut instances = Vec::with_capacity(cfg.num_instances);
    for i in 0..cfg.num_instances {
        let k = rng.random_range(0..cfg.num_types);
        let segments: Vec<Vec<usize>> = (0..cfg.num_types)
            .map(|t| {
                index::sample(&mut rng, pool, cfg.segment_len)
                    .into_iter()
                    .map(|x| t * pool + x)
                    .collect()
            })
            .collect();
        let own = &segments[k];

        let background = |rng: &mut ChaCha8Rng| rng.random_range(filler.clone());

        let evidence: BTreeSet<usize> = index::sample(&mut rng, cfg.m, cfg.n).into_iter().collect();
        let mut sentences = Vec::with_capacity(cfg.m);
        for j in 0..cfg.m {
            let mut toks: Vec<usize> = Vec::with_capacity(cfg.sentence_len);
            if evidence.contains(&j) {
                if n_overlap <= own.len() {
                    toks.extend(
                        index::sample(&mut rng, own.len(), n_overlap)
                            .into_iter()
                            .map(|x| own[x]),
                    );
                } else {
                    toks.extend((0..n_overlap).map(|_| own[rng.random_range(0..own.len())]));
                }
            }
            while toks.len() < cfg.sentence_len {
                toks.push(background(&mut rng));
            }
            toks.shuffle(&mut rng);
            sentences.push(toks.into_iter().map(content_token).collect());
        }

        let mut question = vec![format!("kind{k}")];
        question.extend(segments.iter().flatten().map(|&t| content_token(t)));
        instances.push(QaInstance {
            id: format!("synth-{}-{i}", cfg.seed),
            question,
            sentences,
            evidence,
            qtype: types.get(k).expect("k < K"),
            answerable: true,
            answer: None,
        });
    }
    Ok(Dataset { types, instances })
}
