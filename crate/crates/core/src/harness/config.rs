use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DistillConfig, DomainParams, PartitionSpec};
use crate::error::{Error, Result};
use crate::federation::{LocalOpts, Mode, RoundConfig, Strategy, TeacherRefresh};
use crate::metrics::TransferScale;
use crate::model::{BackboneConfig, LoraConfig, PretrainOpts};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_domains: usize,
    pub prompt_len: usize,
    pub response_len: usize,
    /// Held-out samples per domain (a balanced global test set).
    pub heldout_per_domain: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_domains: 5,
            prompt_len: 4,
            response_len: 8,
            heldout_per_domain: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub num_clients: usize,
    pub dirichlet_alpha: f64,
    pub samples_per_client: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        let spec = PartitionSpec::default();
        Self {
            num_clients: spec.num_clients,
            dirichlet_alpha: spec.dirichlet_alpha,
            samples_per_client: spec.samples_per_client,
        }
    }
}

impl PartitionConfig {
    pub fn spec(&self, seed: u64) -> PartitionSpec {
        PartitionSpec {
            num_clients: self.num_clients,
            dirichlet_alpha: self.dirichlet_alpha,
            samples_per_client: self.samples_per_client,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub sequences_per_domain: usize,
    pub sequence_len: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        let opts = PretrainOpts::default();
        Self {
            steps: opts.steps,
            batch_size: opts.batch_size,
            lr: opts.lr,
            sequences_per_domain: 64,
            sequence_len: 24,
        }
    }
}

impl PretrainConfig {
    pub fn opts(&self) -> PretrainOpts {
        PretrainOpts {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
        }
    }
}

/// Options of the loss-transfer probe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    /// Counted in predictions.
    pub batch_size: usize,
    pub lr: f64,
    pub scale: TransferScale,
    /// Samples per domain used to build each task.
    pub samples_per_task: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 16,
            lr: 0.05,
            scale: TransferScale::Relative,
            samples_per_task: 32,
        }
    }
}

impl ProbeConfig {
    pub fn local_opts(&self) -> LocalOpts {
        LocalOpts {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            ..LocalOpts::default()
        }
    }
}

/// A whole experiment. Every key is optional; absent keys take the defaults
/// below and unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    pub lora: LoraConfig,
    pub domains: DomainParams,
    pub data: DataConfig,
    pub partition: PartitionConfig,
    pub pretrain: PretrainConfig,
    pub distill: DistillConfig,
    /// Stage-1 (smoothing) local training.
    pub local_s: LocalOpts,
    /// Rectification-stream local training (the only stage in single-stream modes).
    pub local_r: LocalOpts,
    pub strategy: Strategy,
    pub mode: Mode,
    pub rounds: usize,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
    pub mixture_ratio: f64,
    pub teacher_refresh: TeacherRefresh,
    pub reinit_smoothing: bool,
    pub probe: ProbeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            lora: LoraConfig::default(),
            domains: DomainParams::default(),
            data: DataConfig::default(),
            partition: PartitionConfig::default(),
            pretrain: PretrainConfig::default(),
            distill: DistillConfig::default(),
            local_s: LocalOpts::default(),
            local_r: LocalOpts::default(),
            strategy: Strategy::default(),
            mode: Mode::FedsdrDual,
            rounds: 20,
            seeds: (0..5).collect(),
            output_dir: None,
            mixture_ratio: 0.0,
            teacher_refresh: TeacherRefresh::OneShot,
            reinit_smoothing: false,
            probe: ProbeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.lora.validate()?;
        self.domains.validate()?;
        self.partition.spec(0).validate()?;
        self.round_config().validate()?;
        let d = &self.data;
        if d.num_domains == 0 {
            return Err(Error::Config("data.num_domains must be >= 1".into()));
        }
        if d.response_len == 0 {
            return Err(Error::Config("data.response_len must be >= 1".into()));
        }
        let v = self.backbone.vocab_size;
        if v < 2 * d.num_domains {
            return Err(Error::Config(format!(
                "backbone.vocab_size {v} is too small for {} domains",
                d.num_domains
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.pretrain.sequence_len == 0 || self.pretrain.sequences_per_domain == 0 {
            return Err(Error::Config("pretrain corpus must be nonempty".into()));
        }
        if !(self.pretrain.lr > 0.0 && self.pretrain.batch_size > 0) {
            return Err(Error::Config(
                "pretrain.lr and pretrain.batch_size must be > 0".into(),
            ));
        }
        self.probe.local_opts().validate()?;
        Ok(())
    }

    pub fn round_config(&self) -> RoundConfig {
        RoundConfig {
            mode: self.mode,
            strategy: self.strategy,
            opts_s: self.local_s,
            opts_r: self.local_r,
            mixture_ratio: self.mixture_ratio,
            reinit_smoothing: self.reinit_smoothing,
            teacher_refresh: self.teacher_refresh,
            distill: self.distill,
        }
    }

    /// Canonical JSON with every field spelled out.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// First 64 bits of SHA-256 over the canonical JSON, as 16 hex digits.
    /// The output directory is excluded so relocating a run keeps its hash.
    pub fn hash(&self) -> String {
        let canonical = ExperimentConfig {
            output_dir: None,
            ..self.clone()
        };
        let digest = Sha256::digest(serde_json::to_vec(&canonical).expect("config serializes"));
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let (line, column) = (inner.line(), inner.column());
            Error::Config(format!("{path}: {inner} (line {line}, column {column})"))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Reads, parses and validates a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            Error::Config(format!("config file {} not found", path.display()))
        }
        _ => Error::io(path, e),
    })?;
    ExperimentConfig::from_json(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.partition.num_clients, 8);
        assert_eq!(cfg.rounds, 20);
        assert_eq!(cfg.local_r.epochs, 3);
        assert_eq!(cfg.local_s.epochs, 3);
        assert_eq!(cfg.local_r.lr, 3e-4);
        assert_eq!(cfg.lora.rank, 8);
        assert_eq!(cfg.lora.alpha, 16.0);
        assert_eq!(cfg.local_r.batch_size, 8);
        assert_eq!(cfg.strategy, Strategy::FedAvg);
    }

    #[test]
    fn typo_names_the_key() {
        let err = ExperimentConfig::from_json(r#"{"local_r": {"epohcs": 2}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("epohcs"), "{msg}");
        assert!(msg.contains("local_r"), "{msg}");
        let err = ExperimentConfig::from_json(r#"{"epohcs": 2}"#).unwrap_err();
        assert!(err.to_string().contains("epohcs"));
    }

    #[test]
    fn bad_values_are_rejected_with_path() {
        let err =
            ExperimentConfig::from_json(r#"{"partition": {"dirichlet_alpha": "x"}}"#).unwrap_err();
        assert!(
            err.to_string().contains("partition.dirichlet_alpha"),
            "{err}"
        );
        assert!(ExperimentConfig::from_json(r#"{"partition": {"dirichlet_alpha": 0}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"local_r": {"lr": -1}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"seeds": []}"#).is_err());
    }

    #[test]
    fn round_trip_keeps_hash() {
        let cfg = ExperimentConfig {
            rounds: 3,
            strategy: Strategy::fedyogi(),
            mode: Mode::BaselineRaw,
            ..Default::default()
        };
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 16);
        assert_ne!(cfg.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn nested_strategy_and_mode_parse() {
        let cfg = ExperimentConfig::from_json(
            r#"{"strategy": {"kind": "fedprox", "mu": 0.1}, "mode": "dual-upload"}"#,
        )
        .unwrap();
        assert_eq!(cfg.strategy, Strategy::FedProx { mu: 0.1 });
        assert_eq!(cfg.mode, Mode::DualUpload);
    }
}
