use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::corpus::Sample;
use crate::error::{Error, Result};
use crate::rng;

pub const MAX_PARTITION_RETRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub dirichlet_alpha: f64,
    /// Average shard size; sizes the sampled dataset.
    pub samples_per_client: usize,
    pub seed: u64,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self {
            num_clients: 8,
            dirichlet_alpha: 0.1,
            samples_per_client: 128,
            seed: 0,
        }
    }
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 || self.num_clients > u16::MAX as usize {
            return Err(Error::Config(
                "partition.num_clients must be in 1..=65535".into(),
            ));
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return Err(Error::Config(format!(
                "partition.dirichlet_alpha must be > 0, got {}",
                self.dirichlet_alpha
            )));
        }
        if self.samples_per_client == 0 {
            return Err(Error::Config(
                "partition.samples_per_client must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Samples per domain needed so the corpus holds `K · samples_per_client` triples.
    pub fn per_domain(&self, num_domains: usize) -> usize {
        (self.num_clients * self.samples_per_client).div_ceil(num_domains)
    }
}

/// One client's local data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub raw: Vec<Sample>,
    /// Same samples with responses regenerated by the teacher; empty until
    /// the refinery runs.
    pub distilled: Vec<Sample>,
    /// Per-domain share of `raw`.
    pub domain_mix: Vec<f64>,
}

impl ClientShard {
    pub fn new(client_id: usize, raw: Vec<Sample>, num_domains: usize) -> Self {
        let mut mix = vec![0.0; num_domains];
        for s in &raw {
            mix[s.domain] += 1.0;
        }
        let n = raw.len().max(1) as f64;
        mix.iter_mut().for_each(|m| *m /= n);
        Self {
            client_id,
            raw,
            distilled: Vec::new(),
            domain_mix: mix,
        }
    }

    pub fn n_k(&self) -> usize {
        self.raw.len()
    }

    pub fn is_distilled(&self) -> bool {
        !self.distilled.is_empty()
    }
}

/// Draws one point from the symmetric Dirichlet(α) on `dim` categories.
pub fn sample_dirichlet(alpha: f64, dim: usize, rng: &mut rng::Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let mut w: Vec<f64> = (0..dim).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = w.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        w.iter_mut().for_each(|x| *x /= sum);
    } else {
        // every draw underflowed: fall back to a uniformly chosen vertex
        let k = rand::Rng::random_range(rng, 0..dim);
        w.iter_mut()
            .enumerate()
            .for_each(|(i, x)| *x = if i == k { 1.0 } else { 0.0 });
    }
    w
}

/// Splits `total` into integer counts proportional to `weights` (largest remainder).
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let shares: Vec<f64> = if sum > 0.0 {
        weights.iter().map(|w| w / sum * total as f64).collect()
    } else {
        vec![total as f64 / weights.len() as f64; weights.len()]
    };
    let mut counts: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let mut rest = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // stable: ties go to the lower index
    order.sort_by(|&a, &b| {
        let ra = shares[a] - shares[a].floor();
        let rb = shares[b] - shares[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in &order {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

/// Dirichlet label-skew partition over domains.
///
/// Each client draws domain proportions `p_k ~ Dir(α, …, α)`. Every domain
/// pool is then shuffled and dealt out to clients in proportion to their
/// weight on that domain, so shards are disjoint and together cover the
/// whole dataset. Draws that leave a client empty are rejected and redrawn.
pub fn dirichlet_partition(
    by_domain: &[Vec<Sample>],
    spec: &PartitionSpec,
) -> Result<Vec<ClientShard>> {
    spec.validate()?;
    let num_domains = by_domain.len();
    if num_domains == 0 || by_domain.iter().all(Vec::is_empty) {
        return Err(Error::EmptyCorpus("nothing to partition".into()));
    }
    let mut rng = rng::rng(rng::derive(spec.seed, rng::PARTITION));
    let k = spec.num_clients;
    for _ in 0..MAX_PARTITION_RETRIES {
        let proportions: Vec<Vec<f64>> = (0..k)
            .map(|_| sample_dirichlet(spec.dirichlet_alpha, num_domains, &mut rng))
            .collect();
        let mut raw: Vec<Vec<Sample>> = vec![Vec::new(); k];
        for (t, pool) in by_domain.iter().enumerate() {
            let weights: Vec<f64> = proportions.iter().map(|p| p[t]).collect();
            let counts = apportion(pool.len(), &weights);
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.shuffle(&mut rng);
            let mut cursor = 0;
            for (client, &c) in counts.iter().enumerate() {
                raw[client].extend(order[cursor..cursor + c].iter().map(|&i| pool[i].clone()));
                cursor += c;
            }
        }
        if raw.iter().all(|r| !r.is_empty()) {
            return Ok(raw
                .into_iter()
                .enumerate()
                .map(|(id, mut samples)| {
                    samples.sort_by_key(|s| s.id);
                    ClientShard::new(id, samples, num_domains)
                })
                .collect());
        }
    }
    Err(Error::PartitionInfeasible {
        retries: MAX_PARTITION_RETRIES,
    })
}

/// Mean Shannon entropy (nats) of the clients' domain mixes.
pub fn mean_mix_entropy(shards: &[ClientShard]) -> f64 {
    let total: f64 = shards
        .iter()
        .map(|s| {
            s.domain_mix
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum::<f64>()
        })
        .sum();
    total / shards.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::sample_dataset;
    use crate::data::domains::build_domains;
    use proptest::prelude::*;

    fn corpus(per_domain: usize) -> Vec<Vec<Sample>> {
        let d = build_domains(5, 32, 0).unwrap();
        sample_dataset(&d, per_domain, 2, 3, 0)
    }

    fn spec(k: usize, alpha: f64, seed: u64) -> PartitionSpec {
        PartitionSpec {
            num_clients: k,
            dirichlet_alpha: alpha,
            samples_per_client: 10,
            seed,
        }
    }

    #[test]
    fn huge_alpha_is_near_uniform() {
        let shards = dirichlet_partition(&corpus(40), &spec(5, 1e6, 0)).unwrap();
        for s in &shards {
            for m in &s.domain_mix {
                assert!((m - 0.2).abs() < 0.05, "{:?}", s.domain_mix);
            }
        }
    }

    #[test]
    fn single_client_gets_everything() {
        let data = corpus(7);
        let shards = dirichlet_partition(&data, &spec(1, 0.1, 3)).unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0].raw, data.concat());
        for m in &shards[0].domain_mix {
            assert!((m - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn smaller_alpha_means_lower_entropy() {
        // Monte Carlo over 20 seeds.
        let data = corpus(20);
        let mean = |alpha: f64| {
            (0..20)
                .map(|seed| {
                    mean_mix_entropy(&dirichlet_partition(&data, &spec(8, alpha, seed)).unwrap())
                })
                .sum::<f64>()
                / 20.0
        };
        assert!(mean(0.1) < mean(1.0));
    }

    #[test]
    fn infeasible_when_too_few_samples() {
        let data = corpus(1);
        assert!(matches!(
            dirichlet_partition(&data, &spec(40, 0.1, 0)),
            Err(Error::PartitionInfeasible { retries: 100 })
        ));
    }

    #[test]
    fn apportion_sums_to_total() {
        assert_eq!(apportion(10, &[0.5, 0.25, 0.25]), vec![5, 3, 2]);
        assert_eq!(apportion(3, &[0.0, 0.0]), vec![2, 1]);
    }

    proptest! {
        #[test]
        fn shards_are_disjoint_and_cover(seed in 0u64..500, k in 1usize..9, alpha in 0.05f64..5.0) {
            let data = corpus(12);
            let shards = dirichlet_partition(&data, &spec(k, alpha, seed)).unwrap();
            let mut ids: Vec<usize> = shards.iter().flat_map(|s| s.raw.iter().map(|x| x.id)).collect();
            ids.sort_unstable();
            prop_assert_eq!(ids, (0..60).collect::<Vec<_>>());
            for s in &shards {
                prop_assert!(s.n_k() >= 1);
                prop_assert!((s.domain_mix.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            prop_assert_eq!(&shards, &dirichlet_partition(&data, &spec(k, alpha, seed)).unwrap());
        }
    }
}
