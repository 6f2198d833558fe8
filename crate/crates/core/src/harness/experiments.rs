//! The desk-scale measurements behind the reproduction suites.

use serde::Serialize;

use super::config::ExperimentConfig;
use super::fixture::{prepare, round0_teacher, train, Prepared};
use crate::data::{distill_shard, ClientShard, Sample};
use crate::error::Result;
use crate::federation::Mode;
use crate::metrics::{
    grad_cosine_matrix, loss_transfer_matrix, mean_pairwise_js, mean_pairwise_tfidf, paradox_stats,
    AlignmentMatrix, CorpusStats, ParadoxStats,
};
use crate::model::{Prediction, StreamSelector};
use crate::Token;

/// Mean pairwise inter-client divergence of raw and distilled responses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DivergenceReport {
    pub js_raw: f64,
    pub js_distilled: f64,
    pub tfidf_raw: f64,
    pub tfidf_distilled: f64,
}

fn client_corpora(
    shards: &[ClientShard],
    vocab: usize,
    distilled: bool,
) -> Result<Vec<CorpusStats>> {
    shards
        .iter()
        .filter(|s| s.n_k() > 0)
        .map(|s| {
            let samples = if distilled { &s.distilled } else { &s.raw };
            CorpusStats::from_sequences(vocab, samples.iter().map(|x| x.y.as_slice()))
        })
        .collect()
}

pub fn divergence(shards: &[ClientShard], vocab: usize) -> Result<DivergenceReport> {
    let raw = client_corpora(shards, vocab, false)?;
    let dist = client_corpora(shards, vocab, true)?;
    Ok(DivergenceReport {
        js_raw: mean_pairwise_js(&raw)?,
        js_distilled: mean_pairwise_js(&dist)?,
        tfidf_raw: mean_pairwise_tfidf(&raw)?,
        tfidf_distilled: mean_pairwise_tfidf(&dist)?,
    })
}

pub fn corpus_divergence(cfg: &ExperimentConfig, seed: u64) -> Result<DivergenceReport> {
    let p = prepare(cfg, seed)?;
    divergence(&p.shards, cfg.backbone.vocab_size)
}

/// Cross-domain alignment at the round-0 model under both supervisions.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentReport {
    pub grad_cosine_raw: AlignmentMatrix,
    pub grad_cosine_distilled: AlignmentMatrix,
    pub loss_transfer_raw: AlignmentMatrix,
    pub loss_transfer_distilled: AlignmentMatrix,
}

/// Per-domain tasks: the first `samples_per_task` samples of each domain,
/// as raw and as distilled predictions.
type Tasks = Vec<Vec<Prediction>>;

fn domain_tasks(cfg: &ExperimentConfig, p: &Prepared, seed: u64) -> Result<(Tasks, Tasks)> {
    let ctx = cfg.backbone.context_len;
    let teacher = round0_teacher(&p.initial);
    let n = cfg.probe.samples_per_task;
    let mut raw = Vec::new();
    let mut dist = Vec::new();
    for (d, samples) in p.fixture.dataset.iter().enumerate() {
        let take: Vec<Sample> = samples.iter().take(n).cloned().collect();
        let pseudo = ClientShard::new(d, take, cfg.data.num_domains);
        let distilled = distill_shard(&teacher, pseudo, &cfg.distill, seed)?;
        raw.push(
            distilled
                .raw
                .iter()
                .flat_map(|s| s.response_predictions(ctx))
                .collect(),
        );
        dist.push(
            distilled
                .distilled
                .iter()
                .flat_map(|s| s.response_predictions(ctx))
                .collect(),
        );
    }
    Ok((raw, dist))
}

pub fn domain_alignment(cfg: &ExperimentConfig, seed: u64) -> Result<AlignmentReport> {
    let p = prepare(cfg, seed)?;
    let (raw, dist) = domain_tasks(cfg, &p, seed)?;
    let labels: Vec<String> = p.fixture.domains.iter().map(|d| d.name.clone()).collect();
    let mut model = round0_teacher(&p.initial);
    model.set_trainable(StreamSelector::ROnly);
    let probe = cfg.probe.local_opts();
    Ok(AlignmentReport {
        grad_cosine_raw: grad_cosine_matrix(&model, &raw, &labels)?,
        grad_cosine_distilled: grad_cosine_matrix(&model, &dist, &labels)?,
        loss_transfer_raw: loss_transfer_matrix(
            &model,
            &raw,
            &labels,
            &probe,
            cfg.probe.scale,
            seed,
        )?,
        loss_transfer_distilled: loss_transfer_matrix(
            &model,
            &dist,
            &labels,
            &probe,
            cfg.probe.scale,
            seed,
        )?,
    })
}

/// Final held-out NLL after training `mode` for `cfg.rounds` rounds.
pub fn final_heldout_nll(cfg: &ExperimentConfig, mode: Mode, seed: u64) -> Result<f64> {
    let cfg = ExperimentConfig {
        mode,
        ..cfg.clone()
    };
    let p = prepare(&cfg, seed)?;
    heldout_after_training(&cfg, p, seed)
}

pub fn heldout_after_training(cfg: &ExperimentConfig, p: Prepared, seed: u64) -> Result<f64> {
    let heldout = p.fixture.heldout.clone();
    let fed = train(cfg, p.initial, p.shards, heldout.clone(), seed, |_, _| {
        Ok(())
    })?;
    Ok(crate::metrics::eval_heldout(&fed.global_model()?, &heldout)?.0)
}

pub fn paradox(cfg: &ExperimentConfig, seed: u64) -> Result<ParadoxStats> {
    let p = prepare(cfg, seed)?;
    paradox_stats(&p.shards, &p.fixture.domains)
}

/// Tokens of all responses, raw or distilled.
pub fn responses(shards: &[ClientShard], distilled: bool) -> Vec<Token> {
    shards
        .iter()
        .flat_map(|s| if distilled { &s.distilled } else { &s.raw })
        .flat_map(|x| x.y.iter().copied())
        .collect()
}
