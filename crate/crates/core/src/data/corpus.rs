use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::domains::DomainSpec;
use crate::math::Matrix;
use crate::model::{predictions_for, Prediction};
use crate::rng;
use crate::Token;

/// One `(c, x, y)` triple.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    /// Position in the sampled dataset; unique across all domains.
    pub id: usize,
    pub domain: usize,
    /// Domain tag token.
    pub c: Token,
    pub x: Vec<Token>,
    pub y: Vec<Token>,
}

impl Sample {
    /// `[c] + x`, the generation prompt.
    pub fn prompt(&self) -> Vec<Token> {
        let mut p = Vec::with_capacity(1 + self.x.len());
        p.push(self.c);
        p.extend_from_slice(&self.x);
        p
    }

    /// One prediction per token of `response`, each conditioned on everything before it.
    pub fn predictions(&self, response: &[Token], context_len: usize) -> Vec<Prediction> {
        let mut seq = self.prompt();
        let start = seq.len();
        seq.extend_from_slice(response);
        predictions_for(&seq, start, context_len)
    }

    /// Predictions for the sample's own response.
    pub fn response_predictions(&self, context_len: usize) -> Vec<Prediction> {
        self.predictions(&self.y, context_len)
    }
}

fn step(transition: &Matrix, from: Token, rng: &mut rng::Rng) -> Token {
    let u: f64 = rng.random();
    let row = transition.row(from as usize);
    let mut acc = 0.0;
    for (j, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j as Token;
        }
    }
    (row.len() - 1) as Token
}

/// Walks `len` steps of the chain starting after `start`.
pub fn walk(transition: &Matrix, start: Token, len: usize, rng: &mut rng::Rng) -> Vec<Token> {
    let mut out = Vec::with_capacity(len);
    let mut cur = start;
    for _ in 0..len {
        cur = step(transition, cur, rng);
        out.push(cur);
    }
    out
}

/// Samples `per_domain` triples from every domain; prompts of length
/// `prompt_len` and responses of length `response_len` continue one walk
/// that starts at the domain tag. Output is grouped by domain.
pub fn sample_dataset(
    domains: &[DomainSpec],
    per_domain: usize,
    prompt_len: usize,
    response_len: usize,
    seed: u64,
) -> Vec<Vec<Sample>> {
    let mut next_id = 0;
    domains
        .iter()
        .map(|d| {
            let mut rng = rng::rng(rng::derive2(seed, rng::CORPUS, d.id as u64));
            (0..per_domain)
                .map(|_| {
                    let seq = walk(&d.transition, d.tag(), prompt_len + response_len, &mut rng);
                    let sample = Sample {
                        id: next_id,
                        domain: d.id,
                        c: d.tag(),
                        x: seq[..prompt_len].to_vec(),
                        y: seq[prompt_len..].to_vec(),
                    };
                    next_id += 1;
                    sample
                })
                .collect()
        })
        .collect()
}

/// Balanced pre-training mixture drawn from the filler-boosted chains.
/// Every position of every sequence becomes one prediction.
pub fn pretraining_corpus(
    domains: &[DomainSpec],
    sequences_per_domain: usize,
    sequence_len: usize,
    context_len: usize,
    seed: u64,
) -> Vec<Prediction> {
    let mut out = Vec::new();
    for d in domains {
        let boosted = d.boosted_transition();
        let mut rng = rng::rng(rng::derive2(seed, rng::PRETRAIN, d.id as u64));
        for _ in 0..sequences_per_domain {
            let mut seq = vec![d.tag()];
            seq.extend(walk(&boosted, d.tag(), sequence_len, &mut rng));
            out.extend(predictions_for(&seq, 1, context_len));
        }
    }
    out
}
