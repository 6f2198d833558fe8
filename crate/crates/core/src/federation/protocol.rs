//! One communication round: broadcast, local training, upload as bytes,
//! server-side decoding and aggregation.
//!
//! Client envelope:
//! ```text
//! client_id u16 | n_k u32 | round u16 | adapter payload (R) [| adapter payload (S), dual upload only]
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::local::{local_update_dual, local_update_single, ClientUpdate};
use super::opts::{LocalOpts, Mode, Objective, Strategy, TeacherRefresh};
use super::server::{aggregate_detailed, ServerState};
use crate::data::{distill_shard, reset_refinery, ClientShard, DistillConfig, Sample};
use crate::error::{Error, Result};
use crate::metrics::eval_heldout;
use crate::model::{AdapterPayload, DualAdapterModel, Reader, Stream};
use crate::rng;

/// Bytes before the first adapter payload.
pub const ENVELOPE_HEADER_LEN: usize = 8;

/// A decoded client upload.
#[derive(Clone, Debug, PartialEq)]
pub struct Envelope {
    pub client_id: usize,
    pub n_k: usize,
    pub round: usize,
    pub adapters: Vec<AdapterPayload>,
}

impl Envelope {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let field = |name: &str, v: usize, max: usize| {
            if v > max {
                Err(Error::InvalidArgument(format!(
                    "envelope {name} {v} exceeds {max}"
                )))
            } else {
                Ok(v)
            }
        };
        let mut buf = Vec::new();
        buf.extend_from_slice(
            &(field("client_id", self.client_id, u16::MAX as usize)? as u16).to_le_bytes(),
        );
        buf.extend_from_slice(&(field("n_k", self.n_k, u32::MAX as usize)? as u32).to_le_bytes());
        buf.extend_from_slice(
            &(field("round", self.round, u16::MAX as usize)? as u16).to_le_bytes(),
        );
        for a in &self.adapters {
            buf.extend_from_slice(&a.encode());
        }
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let client_id = r.u16()? as usize;
        let n_k = r.u32()? as usize;
        let round = r.u16()? as usize;
        let mut adapters = Vec::new();
        while r.pos < bytes.len() {
            let (payload, used) =
                AdapterPayload::decode_prefix(&bytes[r.pos..]).map_err(|e| match e {
                    Error::Parse { offset, reason } => Error::Parse {
                        offset: offset + r.pos,
                        reason,
                    },
                    other => other,
                })?;
            r.pos += used;
            adapters.push(payload);
        }
        Ok(Self {
            client_id,
            n_k,
            round,
            adapters,
        })
    }

    pub fn adapter(&self, stream: Stream) -> Option<&AdapterPayload> {
        self.adapters.iter().find(|a| a.stream == stream)
    }
}

/// Everything that shapes a round besides the data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub mode: Mode,
    pub strategy: Strategy,
    /// Stage-1 (smoothing) options; dual modes only.
    pub opts_s: LocalOpts,
    /// Options of the rectification stream's training.
    pub opts_r: LocalOpts,
    /// Share of raw responses mixed into single-stream distilled training.
    pub mixture_ratio: f64,
    /// Re-initialize every client's smoothing stream at the start of each round.
    pub reinit_smoothing: bool,
    pub teacher_refresh: TeacherRefresh,
    pub distill: DistillConfig,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            mode: Mode::FedsdrDual,
            strategy: Strategy::FedAvg,
            opts_s: LocalOpts::default(),
            opts_r: LocalOpts::default(),
            mixture_ratio: 0.0,
            reinit_smoothing: false,
            teacher_refresh: TeacherRefresh::OneShot,
            distill: DistillConfig::default(),
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        self.strategy.validate()?;
        self.opts_s.validate()?;
        self.opts_r.validate()?;
        self.distill.validate()?;
        if !(0.0..=1.0).contains(&self.mixture_ratio) {
            return Err(Error::Config(format!(
                "mixture_ratio must lie in [0, 1], got {}",
                self.mixture_ratio
            )));
        }
        Ok(())
    }

    /// Options for the rectification stream in single-stream modes.
    fn single_opts(&self) -> LocalOpts {
        let objective = match self.mode {
            Mode::BaselineRaw => Objective::Raw,
            _ if self.mixture_ratio > 0.0 => Objective::Mixture {
                raw_ratio: self.mixture_ratio,
            },
            _ => Objective::Distilled,
        };
        self.with_prox(self.opts_r).with_objective(objective)
    }

    fn with_prox(&self, opts: LocalOpts) -> LocalOpts {
        match self.strategy.client_prox() {
            Some(mu) => LocalOpts {
                prox_mu: mu,
                ..opts
            },
            None => opts,
        }
    }
}

/// Client-side state that outlives a round.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientState {
    pub shard: ClientShard,
    /// This client's smoothing stream; never leaves the client in the
    /// selective protocol.
    pub smoothing: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub client_id: usize,
    pub n_k: usize,
    /// Mean loss of the smoothing stage.
    pub loss_s: Option<f64>,
    /// Mean loss of the rectification stage.
    pub loss_r: Option<f64>,
    /// Mean raw-response NLL of the aggregated model on this client's data,
    /// with the client's own smoothing stream attached.
    pub raw_nll: f64,
    pub payload_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub clients: Vec<ClientReport>,
    /// `n_k`-weighted mean of the clients' `raw_nll`.
    pub weighted_raw_nll: f64,
    pub heldout_nll: Option<f64>,
    pub heldout_accuracy: Option<f64>,
    pub mean_delta_r: Vec<f64>,
    pub mean_delta_s: Option<Vec<f64>>,
}

/// The model the server would deploy: global `Θ_r`, plus global `Θ_s` in
/// dual upload and a zero smoothing bypass otherwise.
pub fn global_model(template: &DualAdapterModel, state: &ServerState) -> Result<DualAdapterModel> {
    let mut m = template.clone();
    m.set_stream_params(Stream::R, &state.global_r)?;
    match &state.global_s {
        Some(s) => m.set_stream_params(Stream::S, s)?,
        None => m.zero_stream(Stream::S),
    }
    Ok(m)
}

fn client_seed(seed: u64, round: usize, client_id: usize) -> u64 {
    rng::derive2(
        rng::derive(seed, rng::CLIENT),
        round as u64,
        client_id as u64,
    )
}

struct ClientOutput {
    bytes: Vec<u8>,
    update: ClientUpdate,
    smoothing: Option<Vec<f64>>,
}

fn run_client(
    template: &DualAdapterModel,
    state: &ServerState,
    client: &ClientState,
    cfg: &RoundConfig,
    seed: u64,
) -> Result<ClientOutput> {
    let round = state.round;
    let id = client.shard.client_id;
    let seed = client_seed(seed, round, id);
    let mut model = template.clone();
    model.set_stream_params(Stream::R, &state.global_r)?;
    let (update, smoothing) = if cfg.mode.is_dual() {
        match &state.global_s {
            Some(s) if cfg.mode == Mode::DualUpload => model.set_stream_params(Stream::S, s)?,
            _ => model.set_stream_params(Stream::S, &client.smoothing)?,
        }
        if cfg.reinit_smoothing {
            model.reinit_stream(Stream::S, rng::derive(seed, rng::ADAPTER_S));
        }
        let out = local_update_dual(
            &model,
            &client.shard,
            &cfg.opts_s,
            &cfg.with_prox(cfg.opts_r),
            seed,
            round,
        )?;
        (out.update, Some(out.smoothing))
    } else {
        (
            local_update_single(&model, &client.shard, &cfg.single_opts(), seed, round)?,
            None,
        )
    };

    let mut trained = model.clone();
    let received_r = model.stream_params(Stream::R);
    let post_r: Vec<f64> = received_r
        .iter()
        .zip(&update.delta_r)
        .map(|(p, d)| p + d)
        .collect();
    trained.set_stream_params(Stream::R, &post_r)?;
    let mut adapters = vec![trained.stream_payload(Stream::R)];
    if cfg.mode == Mode::DualUpload {
        trained.set_stream_params(Stream::S, smoothing.as_ref().expect("dual mode"))?;
        adapters.push(trained.stream_payload(Stream::S));
    }
    let bytes = Envelope {
        client_id: id,
        n_k: update.n_k,
        round,
        adapters,
    }
    .encode()?;
    Ok(ClientOutput {
        update: ClientUpdate {
            payload_bytes: bytes.len(),
            ..update
        },
        bytes,
        smoothing,
    })
}

/// Server side: rebuilds the client's update from its bytes alone.
fn decode_update(
    bytes: &[u8],
    template: &DualAdapterModel,
    state: &ServerState,
    mode: Mode,
) -> Result<ClientUpdate> {
    let env = Envelope::decode(bytes)?;
    if env.round != state.round {
        return Err(Error::InvalidArgument(format!(
            "client {} uploaded for round {}, server is at {}",
            env.client_id, env.round, state.round
        )));
    }
    let expected = if mode == Mode::DualUpload { 2 } else { 1 };
    if env.adapters.len() != expected {
        return Err(Error::InvalidArgument(format!(
            "client {} uploaded {} adapters, expected {expected}",
            env.client_id,
            env.adapters.len()
        )));
    }
    let delta = |stream: Stream, base: &[f64]| -> Result<Vec<f64>> {
        let payload = env.adapter(stream).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "client {} payload lacks stream {stream:?}",
                env.client_id
            ))
        })?;
        let mut probe = template.clone();
        probe.deserialize_stream(&payload.encode())?;
        Ok(probe
            .stream_params(stream)
            .iter()
            .zip(base)
            .map(|(p, b)| p - b)
            .collect())
    };
    let delta_r = delta(Stream::R, &state.global_r)?;
    let delta_s = match &state.global_s {
        Some(s) => Some(delta(Stream::S, s)?),
        None => None,
    };
    Ok(ClientUpdate {
        client_id: env.client_id,
        delta_r,
        delta_s,
        n_k: env.n_k,
        steps: Vec::new(),
        payload_bytes: bytes.len(),
    })
}

fn first_error<T>(results: Vec<(usize, Result<T>)>) -> Result<Vec<T>> {
    results
        .into_iter()
        .map(|(client_id, r)| {
            r.map_err(|e| Error::Client {
                client_id,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Outcome of [`run_round`].
#[derive(Clone, Debug)]
pub struct RoundOutcome {
    pub state: ServerState,
    pub report: RoundReport,
    /// Every client→server upload of the round, in client order.
    pub payloads: Vec<Vec<u8>>,
}

/// Runs one round with full participation. Clients train in parallel on the
/// current rayon pool; the outcome does not depend on its size.
pub fn run_round(
    template: &DualAdapterModel,
    state: &ServerState,
    clients: &mut [ClientState],
    cfg: &RoundConfig,
    seed: u64,
    heldout: Option<&[Sample]>,
) -> Result<RoundOutcome> {
    if clients.is_empty() {
        return Err(Error::EmptyUpdates);
    }
    if cfg.mode.needs_distilled() {
        if let Some(c) = clients.iter().find(|c| !c.shard.is_distilled()) {
            return Err(Error::RefineryNotRun {
                client_id: c.shard.client_id,
            });
        }
    }
    let outputs = first_error(
        clients
            .par_iter()
            .map(|c| (c.shard.client_id, run_client(template, state, c, cfg, seed)))
            .collect(),
    )?;
    let payloads: Vec<Vec<u8>> = outputs.iter().map(|o| o.bytes.clone()).collect();
    let decoded = first_error(
        outputs
            .iter()
            .map(|o| {
                (
                    o.update.client_id,
                    decode_update(&o.bytes, template, state, cfg.mode),
                )
            })
            .collect(),
    )?;
    let agg = aggregate_detailed(state, &decoded, &cfg.strategy)?;

    for (c, o) in clients.iter_mut().zip(&outputs) {
        if let Some(s) = &o.smoothing {
            c.smoothing = s.clone();
        }
    }
    let global = global_model(template, &agg.state)?;
    let raw_nll = first_error(
        clients
            .par_iter()
            .map(|c| {
                let id = c.shard.client_id;
                let eval = || -> Result<f64> {
                    let mut m = global.clone();
                    if cfg.mode == Mode::FedsdrDual {
                        m.set_stream_params(Stream::S, &c.smoothing)?;
                    }
                    Ok(eval_heldout(&m, &c.shard.raw)?.0)
                };
                (id, eval())
            })
            .collect(),
    )?;

    let total: f64 = outputs.iter().map(|o| o.update.n_k as f64).sum();
    let mut reports: Vec<ClientReport> = outputs
        .iter()
        .zip(&raw_nll)
        .map(|(o, &nll)| ClientReport {
            client_id: o.update.client_id,
            n_k: o.update.n_k,
            loss_s: o.update.mean_stage_loss(Stream::S),
            loss_r: o.update.mean_stage_loss(Stream::R),
            raw_nll: nll,
            payload_bytes: o.update.payload_bytes,
        })
        .collect();
    reports.sort_by_key(|r| r.client_id);
    let weighted_raw_nll = reports
        .iter()
        .map(|r| r.n_k as f64 / total * r.raw_nll)
        .sum();
    let (heldout_nll, heldout_accuracy) = match heldout {
        Some(h) if !h.is_empty() => {
            let (nll, acc) = eval_heldout(&global, h)?;
            (Some(nll), Some(acc))
        }
        _ => (None, None),
    };
    Ok(RoundOutcome {
        report: RoundReport {
            round: state.round,
            clients: reports,
            weighted_raw_nll,
            heldout_nll,
            heldout_accuracy,
            mean_delta_r: agg.mean_delta_r,
            mean_delta_s: agg.mean_delta_s,
        },
        state: agg.state,
        payloads,
    })
}

/// A running federation: template model, server state and client states.
#[derive(Clone, Debug)]
pub struct Federation {
    template: DualAdapterModel,
    state: ServerState,
    clients: Vec<ClientState>,
    cfg: RoundConfig,
    seed: u64,
    heldout: Vec<Sample>,
}

impl Federation {
    /// `initial` is the round-0 global model; its `Θ_r` seeds the server and
    /// its `Θ_s` seeds every client's smoothing stream. In dual upload the
    /// server tracks `Θ_s` as well.
    pub fn new(
        initial: DualAdapterModel,
        shards: Vec<ClientShard>,
        cfg: RoundConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if shards.is_empty() {
            return Err(Error::Config("federation needs at least one client".into()));
        }
        let global_s = (cfg.mode == Mode::DualUpload).then(|| initial.stream_params(Stream::S));
        let state = ServerState::new(initial.stream_params(Stream::R), global_s, &cfg.strategy);
        let smoothing = initial.stream_params(Stream::S);
        let mut clients: Vec<ClientState> = shards
            .into_iter()
            .map(|shard| ClientState {
                shard,
                smoothing: smoothing.clone(),
            })
            .collect();
        clients.sort_by_key(|c| c.shard.client_id);
        Ok(Self {
            template: initial,
            state,
            clients,
            cfg,
            seed,
            heldout: Vec::new(),
        })
    }

    pub fn with_heldout(mut self, heldout: Vec<Sample>) -> Self {
        self.heldout = heldout;
        self
    }

    pub fn state(&self) -> &ServerState {
        &self.state
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn clients_mut(&mut self) -> &mut [ClientState] {
        &mut self.clients
    }

    pub fn config(&self) -> &RoundConfig {
        &self.cfg
    }

    pub fn template(&self) -> &DualAdapterModel {
        &self.template
    }

    pub fn global_model(&self) -> Result<DualAdapterModel> {
        global_model(&self.template, &self.state)
    }

    /// Runs the refinery on every client that has not been distilled yet,
    /// using the current global model as teacher.
    pub fn distill_pending(&mut self) -> Result<()> {
        let teacher = self.global_model()?;
        let seed = rng::derive2(self.seed, rng::DISTILL, self.state.round as u64);
        let cfg = self.cfg.distill;
        let results: Vec<(usize, Result<ClientShard>)> = self
            .clients
            .par_iter()
            .map(|c| {
                let out = if c.shard.is_distilled() {
                    Ok(c.shard.clone())
                } else {
                    distill_shard(&teacher, c.shard.clone(), &cfg, seed)
                };
                (c.shard.client_id, out)
            })
            .collect();
        for (c, shard) in self.clients.iter_mut().zip(first_error(results)?) {
            c.shard = shard;
        }
        Ok(())
    }

    pub fn run_round(&mut self) -> Result<RoundOutcome> {
        if self.cfg.teacher_refresh == TeacherRefresh::PerRound
            && self.state.round > 0
            && self.cfg.mode.needs_distilled()
        {
            for c in &mut self.clients {
                reset_refinery(&mut c.shard);
            }
            self.distill_pending()?;
        }
        let heldout = (!self.heldout.is_empty()).then_some(self.heldout.as_slice());
        let out = run_round(
            &self.template,
            &self.state,
            &mut self.clients,
            &self.cfg,
            self.seed,
            heldout,
        )?;
        self.state = out.state.clone();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{
        build_domains, dirichlet_partition, distill_all, sample_dataset, PartitionSpec,
    };
    use crate::model::{contains_f64, Backbone, BackboneConfig, LoraConfig};
    use std::sync::Arc;

    fn small() -> (DualAdapterModel, Vec<ClientShard>) {
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
        let data = sample_dataset(&domains, 8, 3, 4, 0);
        let shards = dirichlet_partition(
            &data,
            &PartitionSpec {
                num_clients: 3,
                dirichlet_alpha: 0.5,
                samples_per_client: 8,
                seed: 2,
            },
        )
        .unwrap();
        let shards = distill_all(&model, shards, &DistillConfig::default(), 0).unwrap();
        (model, shards)
    }

    fn cfg(mode: Mode) -> RoundConfig {
        let opts = LocalOpts {
            epochs: 1,
            batch_size: 4,
            lr: 0.1,
            prox_mu: 0.0,
            objective: Objective::Distilled,
        };
        RoundConfig {
            mode,
            opts_s: opts,
            opts_r: opts,
            ..Default::default()
        }
    }

    #[test]
    fn envelope_round_trip_and_header() {
        let (m, _) = small();
        let env = Envelope {
            client_id: 3,
            n_k: 70000,
            round: 12,
            adapters: vec![m.stream_payload(Stream::R), m.stream_payload(Stream::S)],
        };
        let bytes = env.encode().unwrap();
        assert_eq!(&bytes[..2], &3u16.to_le_bytes());
        assert_eq!(&bytes[2..6], &70000u32.to_le_bytes());
        assert_eq!(&bytes[6..8], &12u16.to_le_bytes());
        assert_eq!(&bytes[8..12], b"FSDR");
        assert_eq!(Envelope::decode(&bytes).unwrap(), env);
        assert!(matches!(
            Envelope::decode(&bytes[..bytes.len() - 3]),
            Err(Error::Parse { .. })
        ));
        assert!(Envelope {
            round: 70000,
            ..env
        }
        .encode()
        .is_err());
    }

    #[test]
    fn selective_upload_never_carries_smoothing() {
        let (m, shards) = small();
        let sentinel = 0.123_456_789_012_345_6;
        let mut fed = Federation::new(m, shards, cfg(Mode::FedsdrDual), 3).unwrap();
        for c in fed.clients_mut() {
            c.smoothing[0] = sentinel;
        }
        assert!(fed.state().global_s.is_none());
        for _ in 0..3 {
            let out = fed.run_round().unwrap();
            for bytes in &out.payloads {
                let env = Envelope::decode(bytes).unwrap();
                assert_eq!(env.adapters.len(), 1);
                assert_eq!(env.adapters[0].stream, Stream::R);
                assert!(!contains_f64(bytes, sentinel));
                for c in fed.clients() {
                    for &v in c.smoothing.iter().filter(|v| **v != 0.0) {
                        assert!(!contains_f64(bytes, v));
                    }
                }
            }
            assert!(fed.state().global_s.is_none());
        }
    }

    #[test]
    fn replica_clients_agree_with_single_client() {
        let (m, shards) = small();
        let shard = shards.into_iter().find(|s| s.n_k() > 0).unwrap();
        let replicas: Vec<ClientShard> = (0..3)
            .map(|id| ClientShard {
                client_id: id,
                ..shard.clone()
            })
            .collect();
        let c = cfg(Mode::FedsdSingle);
        let state = ServerState::new(m.stream_params(Stream::R), None, &c.strategy);
        // every replica gets its own seed, so compare against one client with the same seed
        let mut clients: Vec<ClientState> = replicas
            .iter()
            .map(|s| ClientState {
                shard: s.clone(),
                smoothing: m.stream_params(Stream::S),
            })
            .collect();
        let c = RoundConfig {
            opts_r: LocalOpts {
                batch_size: 64,
                ..c.opts_r
            },
            ..c
        };
        let all = run_round(&m, &state, &mut clients, &c, 0, None).unwrap();
        let mut one = vec![clients[0].clone()];
        let single = run_round(&m, &state, &mut one, &c, 0, None).unwrap();
        for (a, b) in all
            .report
            .mean_delta_r
            .iter()
            .zip(&single.report.mean_delta_r)
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_size_does_not_matter() {
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                let (m, shards) = small();
                let mut fed = Federation::new(m, shards, cfg(Mode::FedsdrDual), 9).unwrap();
                let reports: Vec<RoundReport> =
                    (0..3).map(|_| fed.run_round().unwrap().report).collect();
                (fed.state().clone(), reports)
            })
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn fedprox_zero_equals_fedavg() {
        let (m, shards) = small();
        let mut a = Federation::new(m.clone(), shards.clone(), cfg(Mode::FedsdrDual), 5).unwrap();
        let mut b = Federation::new(
            m,
            shards,
            RoundConfig {
                strategy: Strategy::FedProx { mu: 0.0 },
                ..cfg(Mode::FedsdrDual)
            },
            5,
        )
        .unwrap();
        for _ in 0..2 {
            a.run_round().unwrap();
            b.run_round().unwrap();
        }
        assert_eq!(a.state().global_r, b.state().global_r);
    }

    #[test]
    fn dual_upload_tracks_smoothing() {
        let (m, shards) = small();
        let mut fed = Federation::new(m, shards, cfg(Mode::DualUpload), 1).unwrap();
        let before = fed.state().global_s.clone().unwrap();
        let out = fed.run_round().unwrap();
        assert!(out
            .payloads
            .iter()
            .all(|p| Envelope::decode(p).unwrap().adapters.len() == 2));
        assert_ne!(fed.state().global_s.as_ref().unwrap(), &before);
        assert!(out.report.mean_delta_s.is_some());
    }

    #[test]
    fn replay_from_mean_deltas() {
        let (m, shards) = small();
        let c = RoundConfig {
            strategy: Strategy::fedadam(),
            ..cfg(Mode::DualUpload)
        };
        let mut fed = Federation::new(m, shards, c, 4).unwrap();
        let mut replay = fed.state().clone();
        for _ in 0..3 {
            let r = fed.run_round().unwrap().report;
            replay
                .apply_round(&r.mean_delta_r, r.mean_delta_s.as_deref(), &c.strategy)
                .unwrap();
        }
        assert_eq!(&replay, fed.state());
    }

    #[test]
    fn missing_refinery_is_reported() {
        let (m, mut shards) = small();
        shards[1].distilled.clear();
        let mut fed =
            Federation::new(m.clone(), shards.clone(), cfg(Mode::FedsdSingle), 0).unwrap();
        assert!(matches!(fed.run_round(), Err(Error::RefineryNotRun { .. })));
        let mut base = Federation::new(m, shards, cfg(Mode::BaselineRaw), 0).unwrap();
        assert!(base.run_round().is_ok());
    }

    #[test]
    fn client_errors_carry_client_id() {
        let (m, mut shards) = small();
        shards[2].raw.clear();
        shards[2].distilled.clear();
        let mut fed = Federation::new(m, shards, cfg(Mode::BaselineRaw), 0).unwrap();
        match fed.run_round() {
            Err(Error::Client { client_id, source }) => {
                assert_eq!(client_id, 2);
                assert!(matches!(*source, Error::EmptyShard { .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn per_round_teacher_refresh_redistills() {
        let (m, shards) = small();
        let c = RoundConfig {
            teacher_refresh: TeacherRefresh::PerRound,
            ..cfg(Mode::FedsdSingle)
        };
        let mut fed = Federation::new(m, shards, c, 0).unwrap();
        fed.run_round().unwrap();
        let first = fed.clients()[0].shard.distilled.clone();
        fed.run_round().unwrap();
        assert_ne!(fed.clients()[0].shard.distilled, first);
    }
}
