use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::rng;
use crate::Token;

/// Shape of the synthetic domain chains.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainParams {
    /// Share of every transition row placed on the domain's own token block.
    pub block_mass: f64,
    /// Mass given to each filler token in the raw chains.
    pub filler_mass: f64,
    /// Extra filler mass mixed into the backbone pre-training chains.
    pub filler_boost: f64,
    /// Dirichlet concentration of the within-block weights; small values
    /// give each token a few dominant successors.
    pub block_concentration: f64,
}

impl Default for DomainParams {
    fn default() -> Self {
        Self {
            block_mass: 0.7,
            filler_mass: 0.02,
            filler_boost: 0.06,
            block_concentration: 0.5,
        }
    }
}

impl DomainParams {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.block_mass) || !in_unit(self.filler_boost) || self.filler_mass < 0.0 {
            return Err(Error::Config("domain masses must lie in [0, 1]".into()));
        }
        if self.block_mass + 2.0 * self.filler_mass > 1.0 + 1e-12 {
            return Err(Error::Config("block_mass + 2·filler_mass exceeds 1".into()));
        }
        if !(self.block_concentration > 0.0 && self.block_concentration.is_finite()) {
            return Err(Error::Config("block_concentration must be > 0".into()));
        }
        Ok(())
    }
}

/// A synthetic task domain: a Markov chain over the vocabulary that prefers
/// its own disjoint block of tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: usize,
    pub name: String,
    /// Row-stochastic `V × V` transition matrix.
    pub transition: Matrix,
    pub filler_boost: f64,
    /// First token and length of the preferred block.
    pub block_start: usize,
    pub block_len: usize,
}

/// The two designated filler tokens: the highest ids of the vocabulary.
pub fn filler_tokens(vocab: usize) -> [Token; 2] {
    [(vocab - 2) as Token, (vocab - 1) as Token]
}

impl DomainSpec {
    /// Context token identifying the domain.
    pub fn tag(&self) -> Token {
        self.block_start as Token
    }

    pub fn vocab(&self) -> usize {
        self.transition.rows()
    }

    pub fn block(&self) -> std::ops::Range<usize> {
        self.block_start..self.block_start + self.block_len
    }

    /// Transition used for backbone pre-training: `(1 - boost)·T + boost·U_filler`.
    pub fn boosted_transition(&self) -> Matrix {
        let v = self.vocab();
        let fillers = filler_tokens(v);
        let b = self.filler_boost;
        Matrix::from_fn(v, v, |i, j| {
            let extra = if fillers.contains(&(j as Token)) {
                b / 2.0
            } else {
                0.0
            };
            (1.0 - b) * self.transition.get(i, j) + extra
        })
    }

    /// Stationary distribution by power iteration.
    pub fn stationary(&self) -> Vec<f64> {
        stationary(&self.transition)
    }
}

pub fn stationary(transition: &Matrix) -> Vec<f64> {
    let v = transition.rows();
    let mut pi = vec![1.0 / v as f64; v];
    for _ in 0..10_000 {
        let mut next = vec![0.0; v];
        for (i, &p) in pi.iter().enumerate() {
            for (n, t) in next.iter_mut().zip(transition.row(i)) {
                *n += p * t;
            }
        }
        let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if diff < 1e-15 {
            break;
        }
    }
    pi
}

fn dirichlet_weights(n: usize, concentration: f64, rng: &mut rng::Rng) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive shape");
    let mut w: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = w.iter().sum();
    if sum > 0.0 {
        w.iter_mut().for_each(|x| *x /= sum);
    } else {
        w.iter_mut().for_each(|x| *x = 1.0 / n as f64);
    }
    w
}

/// Builds `num_domains` chains with the default shape parameters.
pub fn build_domains(num_domains: usize, vocab: usize, seed: u64) -> Result<Vec<DomainSpec>> {
    build_domains_with(num_domains, vocab, seed, &DomainParams::default())
}

pub fn build_domains_with(
    num_domains: usize,
    vocab: usize,
    seed: u64,
    params: &DomainParams,
) -> Result<Vec<DomainSpec>> {
    params.validate()?;
    if num_domains == 0 {
        return Err(Error::Config("num_domains must be >= 1".into()));
    }
    if vocab < 4 || vocab < 2 * num_domains {
        return Err(Error::Config(format!(
            "vocabulary of {vocab} is too small for {num_domains} domain blocks (need >= max(4, 2·T))"
        )));
    }
    let content = vocab - 2;
    let block_len = content / num_domains;
    let fillers = filler_tokens(vocab);
    (0..num_domains)
        .map(|id| {
            let mut rng = rng::rng(rng::derive2(seed, rng::DOMAINS, id as u64));
            let block_start = id * block_len;
            let block = block_start..block_start + block_len;
            let off_block: Vec<usize> = (0..content).filter(|j| !block.contains(j)).collect();
            let off_mass = 1.0 - params.block_mass - 2.0 * params.filler_mass;
            let (in_mass, off_mass) = if off_block.is_empty() {
                (params.block_mass + off_mass, 0.0)
            } else {
                (params.block_mass, off_mass)
            };
            let mut transition = Matrix::zeros(vocab, vocab);
            for i in 0..vocab {
                let w_in = dirichlet_weights(block_len, params.block_concentration, &mut rng);
                for (k, w) in w_in.iter().enumerate() {
                    transition.set(i, block_start + k, in_mass * w);
                }
                if !off_block.is_empty() {
                    let w_off = dirichlet_weights(off_block.len(), 1.0, &mut rng);
                    for (&j, w) in off_block.iter().zip(&w_off) {
                        transition.set(i, j, off_mass * w);
                    }
                }
                for &f in &fillers {
                    transition.set(i, f as usize, params.filler_mass);
                }
                // exact renormalization against rounding
                let sum: f64 = transition.row(i).iter().sum();
                for j in 0..vocab {
                    transition.set(i, j, transition.get(i, j) / sum);
                }
            }
            Ok(DomainSpec {
                id,
                name: format!("domain-{id}"),
                transition,
                filler_boost: params.filler_boost,
                block_start,
                block_len,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_stochastic() {
        let domains = build_domains(5, 32, 3).unwrap();
        for d in &domains {
            for (m, label) in [(&d.transition, "raw"), (&d.boosted_transition(), "boosted")] {
                for i in 0..32 {
                    let sum: f64 = m.row(i).iter().sum();
                    assert!((sum - 1.0).abs() < 1e-12, "{label} row {i}");
                    assert!(m.row(i).iter().all(|&p| p >= 0.0));
                }
            }
        }
    }

    #[test]
    fn blocks_are_disjoint_and_carry_block_mass() {
        let domains = build_domains(5, 32, 0).unwrap();
        for (a, b) in domains.iter().zip(domains.iter().skip(1)) {
            assert!(a.block().end <= b.block().start);
        }
        for d in &domains {
            let mass: f64 = d.block().map(|j| d.transition.get(3, j)).sum();
            assert!((mass - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_in_seed() {
        assert_eq!(
            build_domains(3, 16, 9).unwrap(),
            build_domains(3, 16, 9).unwrap()
        );
        assert_ne!(
            build_domains(3, 16, 9).unwrap(),
            build_domains(3, 16, 10).unwrap()
        );
    }

    #[test]
    fn too_small_vocab_is_rejected() {
        assert!(matches!(build_domains(5, 9, 0), Err(Error::Config(_))));
        assert!(build_domains(2, 4, 0).is_ok());
    }

    #[test]
    fn stationary_is_fixed_point() {
        let d = &build_domains(4, 20, 1).unwrap()[2];
        let pi = d.stationary();
        assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for j in 0..20 {
            let next: f64 = (0..20).map(|i| pi[i] * d.transition.get(i, j)).sum();
            assert!((next - pi[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn boost_raises_filler_mass() {
        let d = &build_domains(5, 32, 2).unwrap()[0];
        let boosted = d.boosted_transition();
        let [f1, f2] = filler_tokens(32);
        let raw = d.transition.get(0, f1 as usize) + d.transition.get(0, f2 as usize);
        let up = boosted.get(0, f1 as usize) + boosted.get(0, f2 as usize);
        assert!(up > raw);
    }
}
