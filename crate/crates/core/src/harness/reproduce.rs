//! Directional reproduction suites with verdict CSVs.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use super::config::ExperimentConfig;
use super::experiments::{corpus_divergence, domain_alignment, final_heldout_nll, paradox};
use super::pipeline::{write_atomic, RunArtifacts};
use crate::error::{Error, Result};
use crate::federation::Mode;
use crate::metrics::{write_metric_csv, MetricRow};

/// Dirichlet concentrations of the heterogeneity sweep, least to most skewed.
pub const SWEEP_ALPHAS: [f64; 3] = [1.0, 0.5, 0.1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Table1Direction,
    Table2Direction,
    HeteroSweep,
    FedsdVsBaseline,
    Paradox,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Table1Direction,
        Suite::Table2Direction,
        Suite::HeteroSweep,
        Suite::FedsdVsBaseline,
        Suite::Paradox,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Table1Direction => "table1-direction",
            Suite::Table2Direction => "table2-direction",
            Suite::HeteroSweep => "hetero-sweep",
            Suite::FedsdVsBaseline => "fedsd-vs-baseline",
            Suite::Paradox => "paradox",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Suite::ALL.iter().map(|x| x.name()).collect();
                Error::InvalidArgument(format!(
                    "unknown suite {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

/// One directional check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Verdict {
    pub metric: String,
    pub criterion: String,
    pub pass: bool,
    /// Seeds on which the direction held (1 of 1 for seed-averaged checks).
    pub passed: usize,
    pub total: usize,
    /// Measured values, `;`-separated.
    pub measured: String,
}

impl Verdict {
    /// Passes when the direction holds on at least 4 of every 5 seeds.
    fn per_seed(metric: &str, criterion: &str, outcomes: &[bool], measured: String) -> Self {
        let passed = outcomes.iter().filter(|&&b| b).count();
        let total = outcomes.len();
        Self {
            metric: metric.into(),
            criterion: criterion.into(),
            pass: total > 0 && passed * 5 >= total * 4,
            passed,
            total,
            measured,
        }
    }

    fn single(metric: &str, criterion: &str, pass: bool, measured: String) -> Self {
        Self {
            metric: metric.into(),
            criterion: criterion.into(),
            pass,
            passed: pass as usize,
            total: 1,
            measured,
        }
    }
}

pub const VERDICT_CSV_HEADER: &str = "metric,criterion,verdict,passed,total,measured,config_hash";

pub fn write_verdict_csv(verdicts: &[Verdict], config_hash: &str) -> String {
    let mut out = String::from(VERDICT_CSV_HEADER);
    out.push('\n');
    for v in verdicts {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            v.metric,
            v.criterion,
            if v.pass { "pass" } else { "fail" },
            v.passed,
            v.total,
            v.measured,
            config_hash
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteOutcome {
    pub suite: Suite,
    pub verdicts: Vec<Verdict>,
    pub measurements: Vec<MetricRow>,
}

impl SuiteOutcome {
    pub fn all_pass(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn fmt_mean(label: &str, xs: &[f64]) -> String {
    format!("{label}={:.6}", mean(xs))
}

/// Runs `suite` over `seeds`.
pub fn run_suite(cfg: &ExperimentConfig, suite: Suite, seeds: &[u64]) -> Result<SuiteOutcome> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("no seeds to run".into()));
    }
    let hash = cfg.hash();
    let mut rows = Vec::new();
    let mut row = |metric: &str, a: &str, b: &str, value: f64, seed: u64| {
        rows.push(MetricRow::new(metric, a, b, value, seed, &hash));
    };
    let verdicts = match suite {
        Suite::Table1Direction => {
            let (mut js, mut tf) = (Vec::new(), Vec::new());
            let (mut jr, mut jd, mut tr, mut td) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for &seed in seeds {
                let d = corpus_divergence(cfg, seed)?;
                row("js_divergence", "raw", "", d.js_raw, seed);
                row("js_divergence", "distilled", "", d.js_distilled, seed);
                row("tfidf_cosine", "raw", "", d.tfidf_raw, seed);
                row("tfidf_cosine", "distilled", "", d.tfidf_distilled, seed);
                js.push(d.js_raw > d.js_distilled);
                tf.push(d.tfidf_distilled > d.tfidf_raw);
                jr.push(d.js_raw);
                jd.push(d.js_distilled);
                tr.push(d.tfidf_raw);
                td.push(d.tfidf_distilled);
            }
            vec![
                Verdict::per_seed(
                    "js_divergence",
                    "raw>distilled",
                    &js,
                    format!("{};{}", fmt_mean("raw", &jr), fmt_mean("distilled", &jd)),
                ),
                Verdict::per_seed(
                    "tfidf_cosine",
                    "distilled>raw",
                    &tf,
                    format!("{};{}", fmt_mean("raw", &tr), fmt_mean("distilled", &td)),
                ),
            ]
        }
        Suite::Table2Direction => {
            let (mut gc, mut lt) = (Vec::new(), Vec::new());
            let (mut gr, mut gd, mut lr, mut ld) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for &seed in seeds {
                let r = domain_alignment(cfg, seed)?;
                let g = (
                    r.grad_cosine_raw.mean_off_diagonal(),
                    r.grad_cosine_distilled.mean_off_diagonal(),
                );
                let l = (
                    r.loss_transfer_raw.mean_off_diagonal(),
                    r.loss_transfer_distilled.mean_off_diagonal(),
                );
                for (kind, m) in [
                    ("raw", &r.grad_cosine_raw),
                    ("distilled", &r.grad_cosine_distilled),
                ] {
                    for (i, label) in m.labels.iter().enumerate() {
                        row(
                            "grad_cosine_off_diag",
                            kind,
                            label,
                            m.row_off_diagonal(i),
                            seed,
                        );
                    }
                }
                for (kind, m) in [
                    ("raw", &r.loss_transfer_raw),
                    ("distilled", &r.loss_transfer_distilled),
                ] {
                    for (i, label) in m.labels.iter().enumerate() {
                        row(
                            "loss_transfer_off_diag",
                            kind,
                            label,
                            m.row_off_diagonal(i),
                            seed,
                        );
                    }
                }
                row("grad_cosine_mean_off_diag", "raw", "", g.0, seed);
                row("grad_cosine_mean_off_diag", "distilled", "", g.1, seed);
                row("loss_transfer_mean_off_diag", "raw", "", l.0, seed);
                row("loss_transfer_mean_off_diag", "distilled", "", l.1, seed);
                gc.push(g.1 > g.0);
                lt.push(l.1 < l.0);
                gr.push(g.0);
                gd.push(g.1);
                lr.push(l.0);
                ld.push(l.1);
            }
            vec![
                Verdict::per_seed(
                    "grad_cosine",
                    "distilled>raw",
                    &gc,
                    format!("{};{}", fmt_mean("raw", &gr), fmt_mean("distilled", &gd)),
                ),
                Verdict::per_seed(
                    "loss_transfer",
                    "distilled<raw",
                    &lt,
                    format!("{};{}", fmt_mean("raw", &lr), fmt_mean("distilled", &ld)),
                ),
            ]
        }
        Suite::HeteroSweep => {
            let mut gaps = Vec::new();
            for alpha in SWEEP_ALPHAS {
                let c = ExperimentConfig {
                    partition: super::config::PartitionConfig {
                        dirichlet_alpha: alpha,
                        ..cfg.partition
                    },
                    ..cfg.clone()
                };
                let mut per_seed = Vec::new();
                for &seed in seeds {
                    let base = final_heldout_nll(&c, Mode::BaselineRaw, seed)?;
                    let fedsd = final_heldout_nll(&c, Mode::FedsdSingle, seed)?;
                    let a = alpha.to_string();
                    row("heldout_nll", Mode::BaselineRaw.name(), &a, base, seed);
                    row("heldout_nll", Mode::FedsdSingle.name(), &a, fedsd, seed);
                    per_seed.push(base - fedsd);
                }
                gaps.push(mean(&per_seed));
            }
            let monotone = gaps.windows(2).all(|w| w[1] >= w[0]);
            let measured = SWEEP_ALPHAS
                .iter()
                .zip(&gaps)
                .map(|(a, g)| format!("gap@{a}={g:.6}"))
                .collect::<Vec<_>>()
                .join(";");
            vec![Verdict::single(
                "nll_gap",
                "gap(0.1)>=gap(0.5)>=gap(1)",
                monotone,
                measured,
            )]
        }
        Suite::FedsdVsBaseline => {
            let modes = [Mode::BaselineRaw, Mode::FedsdSingle, Mode::FedsdrDual];
            let mut nll = vec![Vec::new(); modes.len()];
            for &seed in seeds {
                for (i, mode) in modes.into_iter().enumerate() {
                    let v = final_heldout_nll(cfg, mode, seed)?;
                    row("heldout_nll", mode.name(), "", v, seed);
                    nll[i].push(v);
                }
            }
            let beats = |i: usize| -> Vec<bool> {
                nll[i].iter().zip(&nll[0]).map(|(m, b)| m < b).collect()
            };
            let measured = modes
                .iter()
                .zip(&nll)
                .map(|(m, v)| fmt_mean(m.name(), v))
                .collect::<Vec<_>>()
                .join(";");
            vec![
                Verdict::per_seed(
                    "heldout_nll",
                    "fedsd-single<baseline-raw",
                    &beats(1),
                    measured.clone(),
                ),
                Verdict::per_seed(
                    "heldout_nll",
                    "fedsdr-dual<baseline-raw",
                    &beats(2),
                    measured,
                ),
            ]
        }
        Suite::Paradox => {
            let (mut len, mut fill) = (Vec::new(), Vec::new());
            let (mut lr, mut fr, mut hr) = (Vec::new(), Vec::new(), Vec::new());
            for &seed in seeds {
                let p = paradox(cfg, seed)?;
                row("halluc_rate", "raw", "", p.halluc_rate_raw, seed);
                row("halluc_rate", "distilled", "", p.halluc_rate, seed);
                row("mean_len", "raw", "", p.mean_len_raw, seed);
                row("mean_len", "distilled", "", p.mean_len_distilled, seed);
                row("filler_freq", "raw", "", p.filler_freq_raw, seed);
                row(
                    "filler_freq",
                    "distilled",
                    "",
                    p.filler_freq_distilled,
                    seed,
                );
                len.push(p.length_ratio() > 1.0);
                fill.push(p.filler_ratio() > 1.0);
                lr.push(p.length_ratio());
                fr.push(p.filler_ratio());
                hr.push(p.halluc_rate);
            }
            vec![
                Verdict::per_seed(
                    "length_ratio",
                    "distilled/raw>1",
                    &len,
                    fmt_mean("ratio", &lr),
                ),
                Verdict::per_seed(
                    "filler_ratio",
                    "distilled/raw>1",
                    &fill,
                    fmt_mean("ratio", &fr),
                ),
                Verdict::single("halluc_rate", "reported", true, fmt_mean("distilled", &hr)),
            ]
        }
    };
    Ok(SuiteOutcome {
        suite,
        verdicts,
        measurements: rows,
    })
}

/// Runs a suite and writes `verdict_<suite>.csv` and `measurements_<suite>.csv`.
pub fn cmd_reproduce(
    cfg: &ExperimentConfig,
    suite: Suite,
    seeds: &[u64],
    art: &RunArtifacts,
) -> Result<SuiteOutcome> {
    let out = run_suite(cfg, suite, seeds)?;
    let hash = cfg.hash();
    write_atomic(
        &art.dir.join(format!("measurements_{}.csv", suite.name())),
        write_metric_csv(&out.measurements).as_bytes(),
    )?;
    write_atomic(
        &art.dir.join(format!("verdict_{}.csv", suite.name())),
        write_verdict_csv(&out.verdicts, &hash).as_bytes(),
    )?;
    Ok(out)
}
