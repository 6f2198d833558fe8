//! Building blocks shared by the pipeline stages and the reproduction suites.

use std::sync::Arc;

use super::config::ExperimentConfig;
use crate::data::{
    build_domains_with, dirichlet_partition, distill_all, pretraining_corpus, sample_dataset,
    ClientShard, DomainSpec, Sample,
};
use crate::error::Result;
use crate::federation::{Federation, RoundOutcome};
use crate::model::{Backbone, DualAdapterModel, Stream};
use crate::rng;

/// Sampled data for one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Fixture {
    pub domains: Vec<DomainSpec>,
    /// Training corpus grouped by domain.
    pub dataset: Vec<Vec<Sample>>,
    /// Balanced held-out set drawn from every domain.
    pub heldout: Vec<Sample>,
    /// Client shards with only raw data.
    pub shards: Vec<ClientShard>,
}

pub fn build_domains_for(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<DomainSpec>> {
    build_domains_with(
        cfg.data.num_domains,
        cfg.backbone.vocab_size,
        seed,
        &cfg.domains,
    )
}

pub fn build_fixture(cfg: &ExperimentConfig, seed: u64) -> Result<Fixture> {
    let domains = build_domains_for(cfg, seed)?;
    let spec = cfg.partition.spec(seed);
    let d = &cfg.data;
    let dataset = sample_dataset(
        &domains,
        spec.per_domain(d.num_domains),
        d.prompt_len,
        d.response_len,
        seed,
    );
    let heldout = sample_dataset(
        &domains,
        d.heldout_per_domain,
        d.prompt_len,
        d.response_len,
        rng::derive(seed, rng::HELDOUT),
    )
    .into_iter()
    .flatten()
    .collect();
    let shards = dirichlet_partition(&dataset, &spec)?;
    Ok(Fixture {
        domains,
        dataset,
        heldout,
        shards,
    })
}

/// Random backbone pre-trained on the balanced, filler-boosted mixture.
pub fn pretrain_backbone(
    cfg: &ExperimentConfig,
    domains: &[DomainSpec],
    seed: u64,
) -> Result<Backbone> {
    let mut backbone = Backbone::random(cfg.backbone, seed)?;
    let corpus = pretraining_corpus(
        domains,
        cfg.pretrain.sequences_per_domain,
        cfg.pretrain.sequence_len,
        cfg.backbone.context_len,
        seed,
    );
    backbone.pretrain(&corpus, &cfg.pretrain.opts(), seed)?;
    Ok(backbone)
}

/// The round-0 global model: frozen backbone plus freshly initialized streams.
pub fn initial_model(
    cfg: &ExperimentConfig,
    backbone: Backbone,
    seed: u64,
) -> Result<DualAdapterModel> {
    DualAdapterModel::new(Arc::new(backbone), cfg.lora, seed)
}

/// The global model as broadcast at round 0: initial `Θ_r`, no smoothing bypass.
pub fn round0_teacher(initial: &DualAdapterModel) -> DualAdapterModel {
    let mut teacher = initial.clone();
    teacher.zero_stream(Stream::S);
    teacher
}

/// One-shot refinery with the round-0 model as teacher.
pub fn distill_shards(
    cfg: &ExperimentConfig,
    teacher: &DualAdapterModel,
    shards: Vec<ClientShard>,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    distill_all(teacher, shards, &cfg.distill, seed)
}

/// Runs `cfg.rounds` rounds, handing every outcome to `on_round`.
pub fn train(
    cfg: &ExperimentConfig,
    initial: DualAdapterModel,
    shards: Vec<ClientShard>,
    heldout: Vec<Sample>,
    seed: u64,
    mut on_round: impl FnMut(&Federation, &RoundOutcome) -> Result<()>,
) -> Result<Federation> {
    let mut fed = Federation::new(initial, shards, cfg.round_config(), seed)?.with_heldout(heldout);
    for _ in 0..cfg.rounds {
        let out = fed.run_round()?;
        on_round(&fed, &out)?;
    }
    Ok(fed)
}

/// Everything up to and including distillation, in memory.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub fixture: Fixture,
    pub initial: DualAdapterModel,
    /// Shards with distilled responses filled in.
    pub shards: Vec<ClientShard>,
}

pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    cfg.validate()?;
    let fixture = build_fixture(cfg, seed)?;
    let backbone = pretrain_backbone(cfg, &fixture.domains, seed)?;
    let initial = initial_model(cfg, backbone, seed)?;
    let teacher = round0_teacher(&initial);
    let shards = distill_shards(cfg, &teacher, fixture.shards.clone(), seed)?;
    Ok(Prepared {
        fixture,
        initial,
        shards,
    })
}
