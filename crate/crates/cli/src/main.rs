use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fedsdr_core::harness::{
    cmd_distill, cmd_eval, cmd_metrics, cmd_partition, cmd_reproduce, cmd_train, load_config,
    ExperimentConfig, RunArtifacts, Suite,
};

/// Federated self-distillation simulator.
#[derive(Parser, Debug)]
#[command(name = "fedsdr", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Seed override; defaults to the first seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = "FEDSDR_OUT")]
    out: Option<PathBuf>,
    /// Client worker threads (results do not depend on it).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample the corpus and split it across clients.
    Partition(Common),
    /// Pre-train the backbone and rewrite every client's responses.
    Distill(Common),
    /// Run federated training with per-round checkpoints.
    Train(Common),
    /// Evaluate a checkpoint on the held-out set.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint round; defaults to the last.
        #[arg(long)]
        round: Option<usize>,
    },
    /// Corpus divergence and rewrite-paradox statistics.
    Metrics(Common),
    /// Run a directional reproduction suite, or `all`.
    Reproduce {
        suite: String,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Partition(c)
            | Command::Distill(c)
            | Command::Train(c)
            | Command::Metrics(c) => c,
            Command::Eval { common, .. } | Command::Reproduce { common, .. } => common,
        }
    }
}

struct Setup {
    cfg: ExperimentConfig,
    seed: u64,
    art: RunArtifacts,
}

fn setup(common: &Common) -> Result<Setup> {
    let cfg = load_config(&common.config)?;
    let seed = common.seed.unwrap_or(cfg.seeds[0]);
    let dir = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| {
            fedsdr_core::Error::Config(
                "no output directory: pass --out, set FEDSDR_OUT or output_dir".into(),
            )
        })?;
    Ok(Setup {
        cfg,
        seed,
        art: RunArtifacts::new(dir),
    })
}

fn run(cli: Cli) -> Result<()> {
    let common = cli.command.common();
    let ctx = setup(common)?;
    let (cfg, seed, art) = (&ctx.cfg, ctx.seed, &ctx.art);
    match &cli.command {
        Command::Partition(_) => {
            let s = cmd_partition(cfg, seed, art)?;
            println!(
                "partition: {} clients, {} samples, {} held out -> {}",
                s.clients,
                s.samples,
                s.heldout,
                art.dir.display()
            );
        }
        Command::Distill(_) => {
            let s = cmd_distill(cfg, seed, art)?;
            println!(
                "distill: {} clients, mean length {:.3} raw -> {:.3} distilled",
                s.clients, s.mean_len_raw, s.mean_len_distilled
            );
        }
        Command::Train(_) => {
            let s = cmd_train(cfg, seed, art)?;
            println!(
                "train: {} rounds of {}, heldout_nll={:.6} heldout_accuracy={:.6}",
                s.rounds,
                s.mode.name(),
                s.heldout_nll,
                s.heldout_accuracy
            );
        }
        Command::Eval { round, .. } => {
            let s = cmd_eval(cfg, seed, art, *round)?;
            println!(
                "round={} heldout_nll={:.6} heldout_accuracy={:.6}",
                s.round, s.heldout_nll, s.heldout_accuracy
            );
        }
        Command::Metrics(_) => {
            for r in cmd_metrics(cfg, seed, art)? {
                println!("{} {} {:.6}", r.metric, r.scope_a, r.value);
            }
        }
        Command::Reproduce { suite, .. } => {
            let suites = if suite == "all" {
                Suite::ALL.to_vec()
            } else {
                vec![suite.parse::<Suite>()?]
            };
            let seeds = match common.seed {
                Some(s) => vec![s],
                None => cfg.seeds.clone(),
            };
            for s in suites {
                let out =
                    cmd_reproduce(cfg, s, &seeds, art).with_context(|| format!("suite {s}"))?;
                for v in &out.verdicts {
                    println!(
                        "{s}: {} {} {} ({}/{}) {}",
                        v.metric,
                        v.criterion,
                        if v.pass { "pass" } else { "fail" },
                        v.passed,
                        v.total,
                        v.measured
                    );
                }
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err
        .chain()
        .filter_map(|e| e.downcast_ref::<fedsdr_core::Error>())
        .any(fedsdr_core::Error::is_validation);
    if validation {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let workers = cli.command.common().workers;
    let result = match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .context("building worker pool")
            .and_then(|pool| pool.install(|| run(cli))),
        None => run(cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
