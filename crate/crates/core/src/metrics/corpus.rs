use serde::Serialize;

use crate::error::{Error, Result};
use crate::Token;

/// Additive smoothing applied to unigram distributions before JS divergence.
pub const JS_SMOOTHING: f64 = 1e-9;

/// Unigram counts of one corpus, treated as a single document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub counts: Vec<u64>,
    pub total: u64,
}

impl CorpusStats {
    pub fn new(vocab: usize) -> Self {
        Self {
            counts: vec![0; vocab],
            total: 0,
        }
    }

    pub fn from_sequences<'a>(
        vocab: usize,
        sequences: impl IntoIterator<Item = &'a [Token]>,
    ) -> Result<Self> {
        let mut s = Self::new(vocab);
        for seq in sequences {
            s.add(seq)?;
        }
        Ok(s)
    }

    pub fn add(&mut self, tokens: &[Token]) -> Result<()> {
        let vocab = self.counts.len();
        for &t in tokens {
            *self
                .counts
                .get_mut(t as usize)
                .ok_or(Error::TokenOutOfRange { token: t, vocab })? += 1;
        }
        self.total += tokens.len() as u64;
        Ok(())
    }

    pub fn vocab(&self) -> usize {
        self.counts.len()
    }

    fn check(&self, what: &str) -> Result<()> {
        if self.total == 0 {
            Err(Error::EmptyCorpus(what.to_string()))
        } else {
            Ok(())
        }
    }

    fn smoothed(&self, vocab: usize) -> Vec<f64> {
        let denom = self.total as f64 + JS_SMOOTHING * vocab as f64;
        (0..vocab)
            .map(|i| (self.counts.get(i).copied().unwrap_or(0) as f64 + JS_SMOOTHING) / denom)
            .collect()
    }
}

fn kl2(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p / q).log2())
        .sum()
}

/// Jensen-Shannon divergence of the unigram distributions, base 2.
pub fn js_divergence(a: &CorpusStats, b: &CorpusStats) -> Result<f64> {
    a.check("first corpus")?;
    b.check("second corpus")?;
    let vocab = a.vocab().max(b.vocab());
    let p = a.smoothed(vocab);
    let q = b.smoothed(vocab);
    let m: Vec<f64> = p.iter().zip(&q).map(|(p, q)| 0.5 * (p + q)).collect();
    let js = 0.5 * kl2(&p, &m) + 0.5 * kl2(&q, &m);
    Ok(js.clamp(0.0, 1.0))
}

/// Cosine similarity of tf-idf vectors, with document frequencies taken
/// over `context`. `tf = count / length`, `idf = ln((1 + N) / (1 + df)) + 1`.
pub fn tfidf_cosine(a: &CorpusStats, b: &CorpusStats, context: &[CorpusStats]) -> Result<f64> {
    if context.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "tf-idf needs at least 2 documents in context, got {}",
            context.len()
        )));
    }
    let vocab = context
        .iter()
        .chain([a, b])
        .map(CorpusStats::vocab)
        .max()
        .unwrap_or(0);
    let n = context.len() as f64;
    let idf: Vec<f64> = (0..vocab)
        .map(|t| {
            let df = context
                .iter()
                .filter(|d| d.counts.get(t).copied().unwrap_or(0) > 0)
                .count() as f64;
            ((1.0 + n) / (1.0 + df)).ln() + 1.0
        })
        .collect();
    let weights = |d: &CorpusStats| -> Vec<f64> {
        let len = d.total.max(1) as f64;
        (0..vocab)
            .map(|t| d.counts.get(t).copied().unwrap_or(0) as f64 / len * idf[t])
            .collect()
    };
    let (wa, wb) = (weights(a), weights(b));
    let na = crate::math::norm(&wa);
    let nb = crate::math::norm(&wb);
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((crate::math::dot(&wa, &wb) / (na * nb)).clamp(0.0, 1.0))
}

/// Mean JS divergence over all unordered pairs.
pub fn mean_pairwise_js(docs: &[CorpusStats]) -> Result<f64> {
    mean_over_pairs(docs, js_divergence)
}

/// Mean tf-idf cosine over all unordered pairs, idf taken over `docs`.
pub fn mean_pairwise_tfidf(docs: &[CorpusStats]) -> Result<f64> {
    mean_over_pairs(docs, |a, b| tfidf_cosine(a, b, docs))
}

fn mean_over_pairs(
    docs: &[CorpusStats],
    f: impl Fn(&CorpusStats, &CorpusStats) -> Result<f64>,
) -> Result<f64> {
    if docs.len() < 2 {
        return Err(Error::InvalidArgument(
            "pairwise mean needs at least 2 corpora".into(),
        ));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..docs.len() {
        for j in i + 1..docs.len() {
            sum += f(&docs[i], &docs[j])?;
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}
