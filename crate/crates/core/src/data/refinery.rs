//! One-shot self-distillation: the shared round-0 model regenerates every
//! client's responses before federated training starts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corpus::Sample;
use super::partition::ClientShard;
use crate::error::{Error, Result};
use crate::model::{DualAdapterModel, GenerationConfig};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub temperature: f64,
    /// Distilled length = round(|y| · length_factor).
    pub length_factor: f64,
    pub teacher_forcing_prefix: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            length_factor: 1.25,
            teacher_forcing_prefix: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("distill.temperature must be >= 0".into()));
        }
        if !(self.length_factor > 0.0 && self.length_factor.is_finite()) {
            return Err(Error::Config("distill.length_factor must be > 0".into()));
        }
        Ok(())
    }
}

/// Seed of the generation stream for one sample of one client.
fn sample_seed(seed: u64, client_id: usize, index: usize) -> u64 {
    rng::derive2(
        rng::derive(seed, rng::DISTILL),
        client_id as u64,
        index as u64,
    )
}

/// Fills `shard.distilled` with teacher-generated responses.
///
/// Fails if the shard was already distilled; the refinery runs once per
/// client per experiment.
pub fn distill_shard(
    teacher: &DualAdapterModel,
    shard: ClientShard,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<ClientShard> {
    cfg.validate()?;
    if shard.is_distilled() {
        return Err(Error::RefineryAlreadyRun {
            client_id: shard.client_id,
        });
    }
    let distilled = shard
        .raw
        .iter()
        .enumerate()
        .map(|(i, s)| distill_sample(teacher, s, cfg, sample_seed(seed, shard.client_id, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ClientShard { distilled, ..shard })
}

pub fn distill_sample(
    teacher: &DualAdapterModel,
    sample: &Sample,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<Sample> {
    let gen = GenerationConfig {
        max_new_tokens: (sample.y.len() as f64 * cfg.length_factor).round() as usize,
        temperature: cfg.temperature,
        seed,
        teacher_forcing_prefix: cfg.teacher_forcing_prefix.min(sample.y.len()),
    };
    let y = teacher.generate(&sample.prompt(), &gen, &sample.y)?;
    Ok(Sample {
        y,
        ..sample.clone()
    })
}

/// Distills every shard in parallel; results do not depend on scheduling.
pub fn distill_all(
    teacher: &DualAdapterModel,
    shards: Vec<ClientShard>,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    shards
        .into_par_iter()
        .map(|s| distill_shard(teacher, s, cfg, seed))
        .collect()
}

/// Clears distilled data so the refinery can run again with a refreshed
/// teacher (per-round teacher refresh).
pub fn reset_refinery(shard: &mut ClientShard) {
    shard.distilled.clear();
}
