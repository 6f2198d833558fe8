use serde::Serialize;

use crate::data::{filler_tokens, ClientShard, DomainSpec, Sample};
use crate::error::{Error, Result};
use crate::Token;

/// Share of the joint bigram mass kept in the "supported" set.
const SUPPORT_MASS: f64 = 0.9;
/// Responses whose bigram overlap falls below this count as unsupported.
const OVERLAP_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ParadoxStats {
    /// Share of distilled responses poorly supported by their domain's chain.
    pub halluc_rate: f64,
    /// Same statistic on the raw responses.
    pub halluc_rate_raw: f64,
    pub mean_len_raw: f64,
    pub mean_len_distilled: f64,
    pub filler_freq_raw: f64,
    pub filler_freq_distilled: f64,
}

impl ParadoxStats {
    pub fn length_ratio(&self) -> f64 {
        self.mean_len_distilled / self.mean_len_raw
    }

    /// Infinite when raw responses contain no filler at all.
    pub fn filler_ratio(&self) -> f64 {
        self.filler_freq_distilled / self.filler_freq_raw
    }
}

/// The smallest set of bigrams `(i, j)` whose joint probability `π_i T_ij`
/// reaches 90% of the mass, as a `V × V` membership table.
pub fn high_probability_bigrams(domain: &DomainSpec) -> Vec<Vec<bool>> {
    let v = domain.vocab();
    let pi = domain.stationary();
    let mut joint: Vec<(f64, usize, usize)> = (0..v)
        .flat_map(|i| {
            let pi_i = pi[i];
            (0..v).map(move |j| (i, j, pi_i)).collect::<Vec<_>>()
        })
        .map(|(i, j, p)| (p * domain.transition.get(i, j), i, j))
        .collect();
    joint.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut set = vec![vec![false; v]; v];
    let mut acc = 0.0;
    for (p, i, j) in joint {
        if acc >= SUPPORT_MASS {
            break;
        }
        set[i][j] = true;
        acc += p;
    }
    set
}

/// Fraction of the response's bigrams (starting from the last prompt token)
/// inside `set`; `None` for an empty response.
fn overlap(sample: &Sample, response: &[Token], set: &[Vec<bool>]) -> Option<f64> {
    if response.is_empty() {
        return None;
    }
    let prev = *sample.x.last().unwrap_or(&sample.c);
    let seq: Vec<Token> = std::iter::once(prev)
        .chain(response.iter().copied())
        .collect();
    let hits = seq
        .windows(2)
        .filter(|w| set[w[0] as usize][w[1] as usize])
        .count();
    Some(hits as f64 / (seq.len() - 1) as f64)
}

struct Side {
    unsupported: usize,
    responses: usize,
    tokens: usize,
    fillers: usize,
}

impl Side {
    fn new() -> Self {
        Self {
            unsupported: 0,
            responses: 0,
            tokens: 0,
            fillers: 0,
        }
    }

    fn add(
        &mut self,
        sample: &Sample,
        response: &[Token],
        set: &[Vec<bool>],
        fillers: &[Token; 2],
    ) {
        self.responses += 1;
        self.tokens += response.len();
        self.fillers += response.iter().filter(|t| fillers.contains(t)).count();
        if overlap(sample, response, set).is_some_and(|o| o < OVERLAP_THRESHOLD) {
            self.unsupported += 1;
        }
    }

    fn rate(a: usize, b: usize) -> f64 {
        if b == 0 {
            0.0
        } else {
            a as f64 / b as f64
        }
    }
}

pub fn paradox_stats(shards: &[ClientShard], domains: &[DomainSpec]) -> Result<ParadoxStats> {
    let sets: Vec<Vec<Vec<bool>>> = domains.iter().map(high_probability_bigrams).collect();
    let vocab = domains.first().map(DomainSpec::vocab).unwrap_or(0);
    if vocab < 2 {
        return Err(Error::InvalidArgument(
            "paradox statistics need domain specs".into(),
        ));
    }
    let fillers = filler_tokens(vocab);
    let mut raw = Side::new();
    let mut dist = Side::new();
    for shard in shards {
        if shard.distilled.len() != shard.raw.len() {
            return Err(Error::RefineryNotRun {
                client_id: shard.client_id,
            });
        }
        for (r, d) in shard.raw.iter().zip(&shard.distilled) {
            let set = sets.get(r.domain).ok_or_else(|| {
                Error::InvalidArgument(format!("sample domain {} has no spec", r.domain))
            })?;
            raw.add(r, &r.y, set, &fillers);
            dist.add(r, &d.y, set, &fillers);
        }
    }
    if raw.responses == 0 || raw.tokens == 0 {
        return Err(Error::EmptyCorpus("no responses to compare".into()));
    }
    Ok(ParadoxStats {
        halluc_rate: Side::rate(dist.unsupported, dist.responses),
        halluc_rate_raw: Side::rate(raw.unsupported, raw.responses),
        mean_len_raw: raw.tokens as f64 / raw.responses as f64,
        mean_len_distilled: dist.tokens as f64 / dist.responses as f64,
        filler_freq_raw: Side::rate(raw.fillers, raw.tokens),
        filler_freq_distilled: Side::rate(dist.fillers, dist.tokens),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_domains, dirichlet_partition, sample_dataset, PartitionSpec};

    fn shards_with(distill: impl Fn(&Sample) -> Vec<Token>) -> (Vec<ClientShard>, Vec<DomainSpec>) {
        let domains = build_domains(5, 32, 0).unwrap();
        let data = sample_dataset(&domains, 10, 4, 8, 1);
        let mut shards = dirichlet_partition(
            &data,
            &PartitionSpec {
                num_clients: 4,
                ..Default::default()
            },
        )
        .unwrap();
        for s in &mut shards {
            s.distilled = s
                .raw
                .iter()
                .map(|r| Sample {
                    y: distill(r),
                    ..r.clone()
                })
                .collect();
        }
        (shards, domains)
    }

    #[test]
    fn support_set_covers_ninety_percent() {
        let d = &build_domains(5, 32, 0).unwrap()[2];
        let set = high_probability_bigrams(d);
        let pi = d.stationary();
        let mass: f64 = (0..32)
            .flat_map(|i| (0..32).map(move |j| (i, j)))
            .filter(|&(i, j)| set[i][j])
            .map(|(i, j)| pi[i] * d.transition.get(i, j))
            .sum();
        assert!(mass >= 0.9 - 1e-12);
    }

    #[test]
    fn identity_corpora() {
        let (shards, domains) = shards_with(|r| r.y.clone());
        let p = paradox_stats(&shards, &domains).unwrap();
        assert_eq!(p.halluc_rate, p.halluc_rate_raw);
        assert_eq!(p.length_ratio(), 1.0);
        assert_eq!(p.filler_freq_raw, p.filler_freq_distilled);
    }

    #[test]
    fn longer_and_filler_heavy_rewrites() {
        let (shards, domains) = shards_with(|r| {
            let mut y = r.y.clone();
            y.extend([31, 30]);
            y
        });
        let p = paradox_stats(&shards, &domains).unwrap();
        assert_eq!(p.length_ratio(), 10.0 / 8.0);
        assert!(p.filler_freq_distilled > p.filler_freq_raw);
        assert!((0.0..=1.0).contains(&p.halluc_rate));
    }

    #[test]
    fn off_chain_rewrites_count_as_unsupported() {
        let (shards, domains) = shards_with(|r| vec![(r.c + 13) % 28; r.y.len()]);
        let p = paradox_stats(&shards, &domains).unwrap();
        assert!(p.halluc_rate > p.halluc_rate_raw);
    }

    #[test]
    fn requires_distilled() {
        let (mut shards, domains) = shards_with(|r| r.y.clone());
        shards[0].distilled.clear();
        assert!(matches!(
            paradox_stats(&shards, &domains),
            Err(Error::RefineryNotRun { .. })
        ));
    }
}
