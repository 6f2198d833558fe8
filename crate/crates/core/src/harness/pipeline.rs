//! File-backed pipeline stages: partition, distill, train, eval and metrics.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::experiments::divergence;
use super::fixture::{
    build_domains_for, build_fixture, distill_shards, initial_model, pretrain_backbone,
    round0_teacher, train,
};
use crate::data::{read_corpus, read_samples, write_corpus, write_samples, ClientShard, Sample};
use crate::error::{Error, Result};
use crate::federation::{global_model, Mode, RoundReport, ServerState};
use crate::metrics::{eval_heldout, paradox_stats, write_metric_csv, MetricRow};
use crate::model::{Backbone, DualAdapterModel, Stream};

/// Where every stage reads and writes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunArtifacts {
    pub dir: PathBuf,
}

impl RunArtifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.dir.join("run.json")
    }

    pub fn corpus(&self) -> PathBuf {
        self.dir.join("corpus.jsonl")
    }

    pub fn heldout(&self) -> PathBuf {
        self.dir.join("heldout.jsonl")
    }

    pub fn backbone(&self) -> PathBuf {
        self.dir.join("backbone.json")
    }

    pub fn distilled(&self) -> PathBuf {
        self.dir.join("distilled.jsonl")
    }

    pub fn checkpoint(&self, round: usize) -> PathBuf {
        self.dir
            .join("checkpoints")
            .join(format!("round_{round:03}.json"))
    }

    pub fn round_log(&self) -> PathBuf {
        self.dir.join("rounds.jsonl")
    }

    pub fn train_metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn eval_metrics(&self) -> PathBuf {
        self.dir.join("eval.csv")
    }

    pub fn corpus_metrics(&self) -> PathBuf {
        self.dir.join("corpus_metrics.csv")
    }

    pub fn report(&self) -> PathBuf {
        self.dir.join("report.json")
    }
}

/// Writes through a temporary sibling and renames it into place, so a
/// reader never sees a truncated file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = parent.join(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_required(path: &Path, command: &'static str) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            command,
        });
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("artifact serializes");
    v.push(b'\n');
    v
}

fn from_json<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Json(format!("{}: {e}", path.display())))
}

/// Identifies the config and seed a directory of artifacts belongs to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
}

fn check_manifest(cfg: &ExperimentConfig, seed: u64, art: &RunArtifacts) -> Result<()> {
    let path = art.manifest();
    let found: Manifest = from_json(&path, &read_required(&path, "partition")?)?;
    let want = Manifest {
        config_hash: cfg.hash(),
        seed,
    };
    if found != want {
        return Err(Error::Config(format!(
            "artifacts in {} come from config {} seed {}, not config {} seed {}; rerun `fedsdr partition`",
            art.dir.display(),
            found.config_hash,
            found.seed,
            want.config_hash,
            want.seed
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PartitionSummary {
    pub clients: usize,
    pub samples: usize,
    pub heldout: usize,
}

/// Samples the domains, the training corpus and the held-out set, and
/// splits the corpus across clients.
pub fn cmd_partition(
    cfg: &ExperimentConfig,
    seed: u64,
    art: &RunArtifacts,
) -> Result<PartitionSummary> {
    cfg.validate()?;
    let fixture = build_fixture(cfg, seed)?;
    write_atomic(&art.corpus(), write_corpus(&fixture.shards).as_bytes())?;
    write_atomic(&art.heldout(), write_samples(&fixture.heldout).as_bytes())?;
    write_atomic(
        &art.manifest(),
        &to_json(&Manifest {
            config_hash: cfg.hash(),
            seed,
        }),
    )?;
    Ok(PartitionSummary {
        clients: fixture.shards.len(),
        samples: fixture.shards.iter().map(ClientShard::n_k).sum(),
        heldout: fixture.heldout.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistillSummary {
    pub clients: usize,
    pub mean_len_raw: f64,
    pub mean_len_distilled: f64,
}

/// Pre-trains the backbone and runs the one-shot refinery on every shard.
pub fn cmd_distill(
    cfg: &ExperimentConfig,
    seed: u64,
    art: &RunArtifacts,
) -> Result<DistillSummary> {
    cfg.validate()?;
    check_manifest(cfg, seed, art)?;
    let shards = read_corpus(
        &read_required(&art.corpus(), "partition")?,
        cfg.data.num_domains,
    )?;
    let domains = build_domains_for(cfg, seed)?;
    let backbone = pretrain_backbone(cfg, &domains, seed)?;
    let initial = initial_model(cfg, backbone.clone(), seed)?;
    let shards = distill_shards(cfg, &round0_teacher(&initial), shards, seed)?;
    write_atomic(&art.backbone(), &to_json(&backbone))?;
    write_atomic(&art.distilled(), write_corpus(&shards).as_bytes())?;
    let stats = paradox_stats(&shards, &domains)?;
    Ok(DistillSummary {
        clients: shards.len(),
        mean_len_raw: stats.mean_len_raw,
        mean_len_distilled: stats.mean_len_distilled,
    })
}

fn load_backbone(art: &RunArtifacts) -> Result<Backbone> {
    let path = art.backbone();
    from_json(&path, &read_required(&path, "distill")?)
}

fn load_initial(cfg: &ExperimentConfig, seed: u64, art: &RunArtifacts) -> Result<DualAdapterModel> {
    DualAdapterModel::new(Arc::new(load_backbone(art)?), cfg.lora, seed)
}

fn load_heldout(art: &RunArtifacts) -> Result<Vec<Sample>> {
    read_samples(&read_required(&art.heldout(), "partition")?)
}

fn round_rows(report: &RoundReport, seed: u64, hash: &str) -> Vec<MetricRow> {
    let round = format!("round_{}", report.round);
    let mut rows = vec![MetricRow::new(
        "weighted_raw_nll",
        &round,
        "",
        report.weighted_raw_nll,
        seed,
        hash,
    )];
    if let (Some(nll), Some(acc)) = (report.heldout_nll, report.heldout_accuracy) {
        rows.push(MetricRow::new("heldout_nll", &round, "", nll, seed, hash));
        rows.push(MetricRow::new(
            "heldout_accuracy",
            &round,
            "",
            acc,
            seed,
            hash,
        ));
    }
    for c in &report.clients {
        let client = format!("client_{}", c.client_id);
        rows.push(MetricRow::new(
            "client_raw_nll",
            &round,
            &client,
            c.raw_nll,
            seed,
            hash,
        ));
        if let Some(l) = c.loss_s {
            rows.push(MetricRow::new(
                "client_loss_s",
                &round,
                &client,
                l,
                seed,
                hash,
            ));
        }
        if let Some(l) = c.loss_r {
            rows.push(MetricRow::new(
                "client_loss_r",
                &round,
                &client,
                l,
                seed,
                hash,
            ));
        }
        rows.push(MetricRow::new(
            "payload_bytes",
            &round,
            &client,
            c.payload_bytes as f64,
            seed,
            hash,
        ));
    }
    rows
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub seed: u64,
    pub mode: Mode,
    pub rounds: usize,
    pub heldout_nll: f64,
    pub heldout_accuracy: f64,
}

/// Runs the federation, checkpointing the server state after every round.
/// Round 0 is the initialization.
pub fn cmd_train(cfg: &ExperimentConfig, seed: u64, art: &RunArtifacts) -> Result<TrainSummary> {
    cfg.validate()?;
    check_manifest(cfg, seed, art)?;
    let hash = cfg.hash();
    let initial = load_initial(cfg, seed, art)?;
    let heldout = load_heldout(art)?;
    let text = read_required(&art.distilled(), "distill")?;
    let shards = read_corpus(&text, cfg.data.num_domains)?;

    let init_state = ServerState::new(
        initial.stream_params(Stream::R),
        (cfg.mode == Mode::DualUpload).then(|| initial.stream_params(Stream::S)),
        &cfg.strategy,
    );
    write_atomic(&art.checkpoint(0), &to_json(&init_state))?;
    let mut log = String::new();
    let mut rows = Vec::new();
    let fed = train(cfg, initial, shards, heldout.clone(), seed, |fed, out| {
        write_atomic(&art.checkpoint(fed.state().round), &to_json(fed.state()))?;
        log.push_str(&serde_json::to_string(&out.report).expect("report serializes"));
        log.push('\n');
        write_atomic(&art.round_log(), log.as_bytes())?;
        rows.extend(round_rows(&out.report, seed, &hash));
        write_atomic(&art.train_metrics(), write_metric_csv(&rows).as_bytes())
    })?;
    if cfg.rounds == 0 {
        write_atomic(&art.round_log(), b"")?;
        write_atomic(&art.train_metrics(), write_metric_csv(&[]).as_bytes())?;
    }
    let (nll, acc) = eval_heldout(&fed.global_model()?, &heldout)?;
    let summary = TrainSummary {
        config_hash: hash,
        seed,
        mode: cfg.mode,
        rounds: cfg.rounds,
        heldout_nll: nll,
        heldout_accuracy: acc,
    };
    write_atomic(&art.report(), &to_json(&summary))?;
    Ok(summary)
}

pub fn load_checkpoint(art: &RunArtifacts, round: usize) -> Result<ServerState> {
    let path = art.checkpoint(round);
    from_json(&path, &read_required(&path, "train")?)
}

pub fn read_round_log(art: &RunArtifacts) -> Result<Vec<RoundReport>> {
    let path = art.round_log();
    read_required(&path, "train")?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| from_json(&path, l))
        .collect()
}

/// Rebuilds the server state after `round` rounds from the initialization
/// and the logged mean deltas alone.
pub fn replay_state(
    cfg: &ExperimentConfig,
    seed: u64,
    art: &RunArtifacts,
    round: usize,
) -> Result<ServerState> {
    let initial = load_initial(cfg, seed, art)?;
    let mut state = ServerState::new(
        initial.stream_params(Stream::R),
        (cfg.mode == Mode::DualUpload).then(|| initial.stream_params(Stream::S)),
        &cfg.strategy,
    );
    let log = read_round_log(art)?;
    if round > log.len() {
        return Err(Error::InvalidArgument(format!(
            "round {round} is beyond the {} logged rounds",
            log.len()
        )));
    }
    for r in &log[..round] {
        state.apply_round(&r.mean_delta_r, r.mean_delta_s.as_deref(), &cfg.strategy)?;
    }
    Ok(state)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub round: usize,
    pub heldout_nll: f64,
    pub heldout_accuracy: f64,
}

pub fn eval_state(
    cfg: &ExperimentConfig,
    seed: u64,
    art: &RunArtifacts,
    state: &ServerState,
) -> Result<EvalSummary> {
    let model = global_model(&load_initial(cfg, seed, art)?, state)?;
    let (nll, acc) = eval_heldout(&model, &load_heldout(art)?)?;
    Ok(EvalSummary {
        round: state.round,
        heldout_nll: nll,
        heldout_accuracy: acc,
    })
}

/// Evaluates a checkpoint (the last round by default) on the held-out set.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    seed: u64,
    art: &RunArtifacts,
    round: Option<usize>,
) -> Result<EvalSummary> {
    cfg.validate()?;
    check_manifest(cfg, seed, art)?;
    let state = load_checkpoint(art, round.unwrap_or(cfg.rounds))?;
    let summary = eval_state(cfg, seed, art, &state)?;
    let hash = cfg.hash();
    let scope = format!("round_{}", summary.round);
    let rows = [
        MetricRow::new("heldout_nll", &scope, "", summary.heldout_nll, seed, &hash),
        MetricRow::new(
            "heldout_accuracy",
            &scope,
            "",
            summary.heldout_accuracy,
            seed,
            &hash,
        ),
    ];
    write_atomic(&art.eval_metrics(), write_metric_csv(&rows).as_bytes())?;
    Ok(summary)
}

/// Corpus-level diagnostics of the distilled shards: divergence and the
/// rewrite-paradox statistics.
pub fn cmd_metrics(
    cfg: &ExperimentConfig,
    seed: u64,
    art: &RunArtifacts,
) -> Result<Vec<MetricRow>> {
    cfg.validate()?;
    check_manifest(cfg, seed, art)?;
    let shards = read_corpus(
        &read_required(&art.distilled(), "distill")?,
        cfg.data.num_domains,
    )?;
    let domains = build_domains_for(cfg, seed)?;
    let d = divergence(&shards, cfg.backbone.vocab_size)?;
    let p = paradox_stats(&shards, &domains)?;
    let hash = cfg.hash();
    let row = |metric: &str, scope: &str, value: f64| {
        MetricRow::new(metric, scope, "", value, seed, &hash)
    };
    let rows = vec![
        row("js_divergence", "raw", d.js_raw),
        row("js_divergence", "distilled", d.js_distilled),
        row("tfidf_cosine", "raw", d.tfidf_raw),
        row("tfidf_cosine", "distilled", d.tfidf_distilled),
        row("halluc_rate", "raw", p.halluc_rate_raw),
        row("halluc_rate", "distilled", p.halluc_rate),
        row("mean_len", "raw", p.mean_len_raw),
        row("mean_len", "distilled", p.mean_len_distilled),
        row("filler_freq", "raw", p.filler_freq_raw),
        row("filler_freq", "distilled", p.filler_freq_distilled),
    ];
    write_atomic(&art.corpus_metrics(), write_metric_csv(&rows).as_bytes())?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a").join("x.csv");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "two");
        let names: Vec<_> = fs::read_dir(path.parent().unwrap())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names, vec![std::ffi::OsString::from("x.csv")]);
    }

    #[test]
    fn missing_upstream_names_the_command() {
        let dir = tempfile::tempdir().unwrap();
        let art = RunArtifacts::new(dir.path());
        let cfg = ExperimentConfig::default();
        let err = cmd_distill(&cfg, 0, &art).unwrap_err();
        assert!(
            matches!(
                err,
                Error::MissingArtifact {
                    command: "partition",
                    ..
                }
            ),
            "{err}"
        );
        assert!(err.to_string().contains("fedsdr partition"));
        assert!(err.is_validation());
    }
}
