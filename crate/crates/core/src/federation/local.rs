//! Client-side training: single-stream updates and the alternating
//! smoothing → rectification schedule.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::opts::{LocalOpts, Objective};
use crate::data::{ClientShard, Sample};
use crate::error::{Error, Result};
use crate::math::norm;
use crate::model::{DualAdapterModel, Prediction, Stream, StreamSelector};
use crate::rng;

/// One optimizer step as seen by the client.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stream,
    pub loss: f64,
    pub grad_norm_r: f64,
    pub grad_norm_s: f64,
}

/// What a client reports after local training.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// Post-training minus received rectification parameters.
    pub delta_r: Vec<f64>,
    /// Smoothing delta; only present when both streams are uploaded.
    pub delta_s: Option<Vec<f64>>,
    pub n_k: usize,
    pub steps: Vec<StepRecord>,
    /// Size of the encoded upload; filled in by the protocol layer.
    pub payload_bytes: usize,
}

impl ClientUpdate {
    /// Mean loss of the steps of one stage.
    pub fn mean_stage_loss(&self, stage: Stream) -> Option<f64> {
        let losses: Vec<f64> = self
            .steps
            .iter()
            .filter(|s| s.stage == stage)
            .map(|s| s.loss)
            .collect();
        (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// Mean loss over the final epoch-equivalent tail of the last stage.
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }
}

/// Context for one stage of local training.
pub(crate) struct Stage<'a> {
    pub stream: Stream,
    pub opts: &'a LocalOpts,
    pub seed: u64,
    pub round: usize,
    /// Proximal anchor for the trained stream.
    pub anchor: Option<&'a [f64]>,
}

fn pick<'s>(
    raw: &'s Sample,
    distilled: Option<&'s Sample>,
    objective: Objective,
    rng: &mut rng::Rng,
) -> Result<&'s Sample> {
    match objective {
        Objective::Raw => Ok(raw),
        Objective::Distilled => distilled.ok_or(Error::RefineryNotRun {
            client_id: usize::MAX,
        }),
        Objective::Mixture { raw_ratio } => {
            let coin: f64 = rng.random();
            if coin < raw_ratio {
                Ok(raw)
            } else {
                distilled.ok_or(Error::RefineryNotRun {
                    client_id: usize::MAX,
                })
            }
        }
    }
}

/// Runs `opts.epochs` of shuffled mini-batch SGD on one stream.
pub(crate) fn train_stage(
    model: &mut DualAdapterModel,
    shard: &ClientShard,
    stage: &Stage<'_>,
) -> Result<Vec<StepRecord>> {
    let opts = stage.opts;
    opts.validate()?;
    if shard.raw.is_empty() {
        return Err(Error::EmptyShard {
            client_id: shard.client_id,
        });
    }
    let needs_distilled = !matches!(opts.objective, Objective::Raw);
    if needs_distilled && !shard.is_distilled() {
        return Err(Error::RefineryNotRun {
            client_id: shard.client_id,
        });
    }
    model.set_trainable(StreamSelector::only(stage.stream));
    let context_len = model.backbone().config().context_len;
    let mu = opts.prox_mu;
    let mut rng = rng::rng(stage.seed);
    let mut mix_rng = rng::rng(rng::derive(stage.seed, rng::MIXTURE));
    let mut order: Vec<usize> = (0..shard.raw.len()).collect();
    let mut records = Vec::new();
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch_size) {
            let mut batch: Vec<Prediction> = Vec::new();
            for &i in chunk {
                let sample = pick(
                    &shard.raw[i],
                    shard.distilled.get(i),
                    opts.objective,
                    &mut mix_rng,
                )
                .map_err(|_| Error::RefineryNotRun {
                    client_id: shard.client_id,
                })?;
                batch.extend(sample.response_predictions(context_len));
            }
            if batch.is_empty() {
                continue;
            }
            let (mut loss, grad) = model.batch_nll(&batch).map_err(|e| match e {
                Error::NonFinite(_) => Error::Divergence {
                    client_id: shard.client_id,
                    round: stage.round,
                    step: records.len(),
                    loss: f64::NAN,
                },
                other => other,
            })?;
            if let (Some(anchor), true) = (stage.anchor, mu > 0.0) {
                let params = model.stream_params(stage.stream);
                let dist2: f64 = params
                    .iter()
                    .zip(anchor)
                    .map(|(p, a)| (p - a) * (p - a))
                    .sum();
                loss += 0.5 * mu * dist2;
            }
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    client_id: shard.client_id,
                    round: stage.round,
                    step: records.len(),
                    loss,
                });
            }
            records.push(StepRecord {
                stage: stage.stream,
                loss,
                grad_norm_r: norm(&grad.r),
                grad_norm_s: norm(&grad.s),
            });
            let prox = stage.anchor.map(|a| (mu, stage.stream, a));
            model.sgd_step(&grad, opts.lr, prox)?;
        }
    }
    Ok(records)
}

fn diff(after: &[f64], before: &[f64]) -> Vec<f64> {
    after.iter().zip(before).map(|(a, b)| a - b).collect()
}

/// Single-stream local update: only the rectification stream trains, on the
/// responses selected by `opts.objective`. `global` carries the broadcast
/// parameters.
pub fn local_update_single(
    global: &DualAdapterModel,
    shard: &ClientShard,
    opts: &LocalOpts,
    seed: u64,
    round: usize,
) -> Result<ClientUpdate> {
    let mut model = global.clone();
    let received = model.stream_params(Stream::R);
    let steps = train_stage(
        &mut model,
        shard,
        &Stage {
            stream: Stream::R,
            opts,
            seed: rng::derive(seed, rng::STAGE_R),
            round,
            anchor: Some(&received),
        },
    )?;
    Ok(ClientUpdate {
        client_id: shard.client_id,
        delta_r: diff(&model.stream_params(Stream::R), &received),
        delta_s: None,
        n_k: shard.n_k(),
        steps,
        payload_bytes: 0,
    })
}

/// Result of the alternating schedule: the upload plus the smoothing stream
/// the client keeps.
#[derive(Clone, Debug, PartialEq)]
pub struct DualOutcome {
    pub update: ClientUpdate,
    pub smoothing: Vec<f64>,
    /// Smoothing parameters right after stage 1.
    pub smoothing_after_stage1: Vec<f64>,
}

/// Alternating dual-stream update.
///
/// Stage 1 trains the smoothing stream on distilled responses with the
/// rectification stream frozen; stage 2 trains the rectification stream on
/// raw responses with the smoothing stream frozen at its stage-1 value. Both
/// streams take part in every forward pass. `global` carries the broadcast
/// rectification parameters and this client's smoothing parameters.
pub fn local_update_dual(
    global: &DualAdapterModel,
    shard: &ClientShard,
    opts_s: &LocalOpts,
    opts_r: &LocalOpts,
    seed: u64,
    round: usize,
) -> Result<DualOutcome> {
    if !shard.is_distilled() {
        return Err(Error::RefineryNotRun {
            client_id: shard.client_id,
        });
    }
    let mut model = global.clone();
    let received_r = model.stream_params(Stream::R);
    let received_s = model.stream_params(Stream::S);
    let opts_s = opts_s.with_objective(Objective::Distilled);
    let opts_r = opts_r.with_objective(Objective::Raw);
    let mut steps = train_stage(
        &mut model,
        shard,
        &Stage {
            stream: Stream::S,
            opts: &opts_s,
            seed: rng::derive(seed, rng::STAGE_S),
            round,
            anchor: None,
        },
    )?;
    let smoothing_after_stage1 = model.stream_params(Stream::S);
    steps.extend(train_stage(
        &mut model,
        shard,
        &Stage {
            stream: Stream::R,
            opts: &opts_r,
            seed: rng::derive(seed, rng::STAGE_R),
            round,
            anchor: Some(&received_r),
        },
    )?);
    let smoothing = model.stream_params(Stream::S);
    Ok(DualOutcome {
        update: ClientUpdate {
            client_id: shard.client_id,
            delta_r: diff(&model.stream_params(Stream::R), &received_r),
            delta_s: Some(diff(&smoothing, &received_s)),
            n_k: shard.n_k(),
            steps,
            payload_bytes: 0,
        },
        smoothing,
        smoothing_after_stage1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{
        build_domains, dirichlet_partition, distill_shard, sample_dataset, DistillConfig,
        PartitionSpec,
    };
    use crate::math::grad_check;
    use crate::model::{Backbone, BackboneConfig, LoraConfig};
    use std::sync::Arc;

    fn setup() -> (DualAdapterModel, ClientShard) {
        let cfg = BackboneConfig {
            vocab_size: 12,
            context_len: 4,
            embed_dim: 4,
            hidden_dim: 6,
        };
        let bb = Arc::new(Backbone::random(cfg, 4).unwrap());
        let lora = LoraConfig {
            rank: 2,
            alpha: 4.0,
            init_std: 0.1,
        };
        let model = DualAdapterModel::new(bb, lora, 1).unwrap();
        let domains = build_domains(3, 12, 0).unwrap();
        let data = sample_dataset(&domains, 6, 3, 4, 0);
        let shard = dirichlet_partition(
            &data,
            &PartitionSpec {
                num_clients: 1,
                ..Default::default()
            },
        )
        .unwrap()
        .remove(0);
        let shard = distill_shard(&model, shard, &DistillConfig::default(), 0).unwrap();
        (model, shard)
    }

    fn opts(epochs: usize, lr: f64) -> LocalOpts {
        LocalOpts {
            epochs,
            batch_size: 4,
            lr,
            prox_mu: 0.0,
            objective: Objective::Raw,
        }
    }

    #[test]
    fn zero_epochs_zero_delta() {
        let (m, shard) = setup();
        let up = local_update_single(&m, &shard, &opts(0, 0.1), 0, 0).unwrap();
        assert!(up.delta_r.iter().all(|&d| d == 0.0));
        assert!(up.steps.is_empty());
        assert_eq!(up.n_k, shard.n_k());
    }

    #[test]
    fn zero_mu_matches_plain_sgd_bitwise() {
        let (m, shard) = setup();
        let plain = local_update_single(&m, &shard, &opts(2, 0.1), 7, 0).unwrap();
        // hand-rolled SGD loop with the same shuffle stream
        let mut model = m.clone();
        let o = opts(2, 0.1);
        train_stage(
            &mut model,
            &shard,
            &Stage {
                stream: Stream::R,
                opts: &o,
                seed: rng::derive(7, rng::STAGE_R),
                round: 0,
                anchor: None,
            },
        )
        .unwrap();
        let delta: Vec<f64> = diff(&model.stream_params(Stream::R), &m.stream_params(Stream::R));
        assert_eq!(plain.delta_r, delta);
    }

    #[test]
    fn single_step_delta_is_minus_lr_grad() {
        let (m, mut shard) = setup();
        shard.raw.truncate(1);
        shard.distilled.truncate(1);
        let o = LocalOpts {
            epochs: 1,
            batch_size: 1,
            ..opts(1, 0.05)
        };
        let up = local_update_single(&m, &shard, &o, 3, 0).unwrap();
        let mut probe = m.clone();
        probe.set_trainable(StreamSelector::ROnly);
        let (_, g) = probe
            .batch_nll(&shard.raw[0].response_predictions(4))
            .unwrap();
        for (d, g) in up.delta_r.iter().zip(&g.r) {
            assert!((d + 0.05 * g).abs() < 1e-12);
        }
    }

    #[test]
    fn prox_pulls_toward_anchor() {
        let (m, shard) = setup();
        let free = local_update_single(&m, &shard, &opts(3, 0.2), 1, 0).unwrap();
        let prox = local_update_single(
            &m,
            &shard,
            &LocalOpts {
                prox_mu: 5.0,
                ..opts(3, 0.2)
            },
            1,
            0,
        )
        .unwrap();
        assert!(norm(&prox.delta_r) < norm(&free.delta_r));
    }

    #[test]
    fn dual_stages_are_exclusive_and_frozen() {
        let (m, shard) = setup();
        let out = local_update_dual(&m, &shard, &opts(2, 0.1), &opts(2, 0.1), 5, 0).unwrap();
        assert_eq!(out.smoothing, out.smoothing_after_stage1);
        assert!(!out.update.steps.is_empty());
        for s in &out.update.steps {
            match s.stage {
                Stream::S => assert!(s.grad_norm_s > 0.0 && s.grad_norm_r == 0.0),
                Stream::R => assert!(s.grad_norm_r > 0.0 && s.grad_norm_s == 0.0),
            }
        }
        // rectification stream untouched by stage 1: stage-1-only run leaves delta_r = 0
        let only_s = local_update_dual(&m, &shard, &opts(2, 0.1), &opts(0, 0.1), 5, 0).unwrap();
        assert!(only_s.update.delta_r.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn degenerate_dual_equals_single_on_raw() {
        let (mut m, shard) = setup();
        m.zero_stream(Stream::S);
        let dual = local_update_dual(&m, &shard, &opts(0, 0.1), &opts(2, 0.1), 9, 0).unwrap();
        let single = local_update_single(&m, &shard, &opts(2, 0.1), 9, 0).unwrap();
        assert_eq!(dual.update.delta_r, single.delta_r);
    }

    #[test]
    fn stage_two_gradient_matches_finite_differences() {
        let (m, shard) = setup();
        let out = local_update_dual(&m, &shard, &opts(2, 0.2), &opts(0, 0.1), 5, 0).unwrap();
        let mut model = m.clone();
        model.set_stream_params(Stream::S, &out.smoothing).unwrap();
        model.set_trainable(StreamSelector::ROnly);
        let batch: Vec<Prediction> = shard.raw[..2]
            .iter()
            .flat_map(|s| s.response_predictions(4))
            .collect();
        let f = |p: &[f64]| {
            let mut mm = model.clone();
            mm.set_stream_params(Stream::R, p).unwrap();
            let (l, g) = mm.batch_nll(&batch).unwrap();
            (l, g.r)
        };
        assert!(grad_check(f, &model.stream_params(Stream::R), 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn error_paths() {
        let (m, shard) = setup();
        let mut empty = shard.clone();
        empty.raw.clear();
        empty.distilled.clear();
        assert!(matches!(
            local_update_single(&m, &empty, &opts(1, 0.1), 0, 0),
            Err(Error::EmptyShard { .. })
        ));
        let mut raw_only = shard.clone();
        raw_only.distilled.clear();
        assert!(matches!(
            local_update_dual(&m, &raw_only, &opts(1, 0.1), &opts(1, 0.1), 0, 0),
            Err(Error::RefineryNotRun { .. })
        ));
        let distilled = opts(1, 0.1).with_objective(Objective::Distilled);
        assert!(matches!(
            local_update_single(&m, &raw_only, &distilled, 0, 0),
            Err(Error::RefineryNotRun { .. })
        ));
        let err = local_update_single(&m, &shard, &opts(3, 1e300), 0, 4).unwrap_err();
        assert!(matches!(err, Error::Divergence { round: 4, .. }), "{err}");
    }
}
