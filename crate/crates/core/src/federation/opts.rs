use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which responses supervise a training stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Objective {
    Raw,
    Distilled,
    /// Each sample uses its raw response with probability `raw_ratio`
    /// (redrawn every epoch), its distilled response otherwise.
    Mixture {
        raw_ratio: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalOpts {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub prox_mu: f64,
    pub objective: Objective,
}

impl Default for LocalOpts {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 8,
            lr: 3e-4,
            prox_mu: 0.0,
            objective: Objective::Distilled,
        }
    }
}

impl LocalOpts {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.prox_mu >= 0.0 && self.prox_mu.is_finite()) {
            return Err(Error::Config(format!(
                "prox_mu must be >= 0, got {}",
                self.prox_mu
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let Objective::Mixture { raw_ratio } = self.objective {
            if !(0.0..=1.0).contains(&raw_ratio) {
                return Err(Error::Config(format!(
                    "mixture raw_ratio must lie in [0, 1], got {raw_ratio}"
                )));
            }
        }
        Ok(())
    }

    pub fn with_objective(self, objective: Objective) -> Self {
        Self { objective, ..self }
    }
}

/// Server aggregation rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", deny_unknown_fields)]
pub enum Strategy {
    #[default]
    FedAvg,
    FedAvgM {
        #[serde(default = "default_momentum")]
        beta: f64,
    },
    /// Proximal term applied on the clients; the server step is FedAvg's.
    FedProx {
        #[serde(default = "default_mu")]
        mu: f64,
    },
    FedAdam {
        #[serde(default = "default_eta")]
        eta: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_tau")]
        tau: f64,
    },
    FedYogi {
        #[serde(default = "default_eta")]
        eta: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_tau")]
        tau: f64,
    },
    FedAdagrad {
        #[serde(default = "default_eta")]
        eta: f64,
        #[serde(default = "default_tau")]
        tau: f64,
    },
}

fn default_momentum() -> f64 {
    0.9
}
fn default_mu() -> f64 {
    0.01
}
fn default_eta() -> f64 {
    1e-2
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.99
}
fn default_tau() -> f64 {
    1e-3
}

impl Strategy {
    pub fn fedavgm() -> Self {
        Strategy::FedAvgM {
            beta: default_momentum(),
        }
    }

    pub fn fedadam() -> Self {
        Strategy::FedAdam {
            eta: default_eta(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            tau: default_tau(),
        }
    }

    pub fn fedyogi() -> Self {
        Strategy::FedYogi {
            eta: default_eta(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            tau: default_tau(),
        }
    }

    pub fn fedadagrad() -> Self {
        Strategy::FedAdagrad {
            eta: default_eta(),
            tau: default_tau(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::FedAvg => "fedavg",
            Strategy::FedAvgM { .. } => "fedavgm",
            Strategy::FedProx { .. } => "fedprox",
            Strategy::FedAdam { .. } => "fedadam",
            Strategy::FedYogi { .. } => "fedyogi",
            Strategy::FedAdagrad { .. } => "fedadagrad",
        }
    }

    /// Client-side proximal coefficient implied by the strategy.
    pub fn client_prox(&self) -> Option<f64> {
        match *self {
            Strategy::FedProx { mu } => Some(mu),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "strategy.{name} must lie in [0, 1), got {v}"
                )))
            }
        };
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "strategy.{name} must be > 0, got {v}"
                )))
            }
        };
        match *self {
            Strategy::FedAvg => Ok(()),
            Strategy::FedAvgM { beta } => unit("beta", beta),
            Strategy::FedProx { mu } => {
                if mu >= 0.0 && mu.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Config(format!("strategy.mu must be >= 0, got {mu}")))
                }
            }
            Strategy::FedAdam {
                eta,
                beta1,
                beta2,
                tau,
            }
            | Strategy::FedYogi {
                eta,
                beta1,
                beta2,
                tau,
            } => {
                positive("eta", eta)?;
                unit("beta1", beta1)?;
                unit("beta2", beta2)?;
                positive("tau", tau)
            }
            Strategy::FedAdagrad { eta, tau } => {
                positive("eta", eta)?;
                positive("tau", tau)
            }
        }
    }
}

/// Federated training protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Single stream trained on distilled responses.
    FedsdSingle,
    /// Alternating dual-stream training with selective aggregation.
    FedsdrDual,
    /// Single stream trained on raw responses.
    BaselineRaw,
    /// Dual-stream training that uploads and averages both streams.
    DualUpload,
}

impl Mode {
    pub fn needs_distilled(self) -> bool {
        !matches!(self, Mode::BaselineRaw)
    }

    pub fn is_dual(self) -> bool {
        matches!(self, Mode::FedsdrDual | Mode::DualUpload)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::FedsdSingle => "fedsd-single",
            Mode::FedsdrDual => "fedsdr-dual",
            Mode::BaselineRaw => "baseline-raw",
            Mode::DualUpload => "dual-upload",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedsd-single" => Ok(Mode::FedsdSingle),
            "fedsdr-dual" => Ok(Mode::FedsdrDual),
            "baseline-raw" => Ok(Mode::BaselineRaw),
            "dual-upload" => Ok(Mode::DualUpload),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// When the teacher regenerates the distilled responses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherRefresh {
    /// Once, with the round-0 global model, before training starts.
    #[default]
    OneShot,
    /// At the start of every round, with the current global model.
    PerRound,
}
