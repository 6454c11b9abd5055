use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use selfvalnet::harness::{self, HarnessError, RunConfig, SuiteOptions};
use selfvalnet::netmodel::{ModelKind, QueryFrame};
use selfvalnet::selfval::ValidationKind;

/// Attended-object detection with self validation on synthetic egocentric clips.
#[derive(Debug, Parser)]
#[command(name = "selfvalnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration; omitted keys take the defaults listed below.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Validation mode: the training mode for train/ablate, the test mode for eval.
    #[arg(long, global = true)]
    mode: Option<ValidationKind>,

    /// Query frame: middle or last.
    #[arg(long, global = true)]
    query: Option<QueryFrame>,

    /// Model: mrnet, joint or cascade.
    #[arg(long, global = true)]
    baseline: Option<ModelKind>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the train/test splits to disk.
    Synth,
    /// Train one model and write weights, log and metrics.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate stored weights on the test split.
    Eval {
        /// Defaults to `<out>/weights.svnw`.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Train the validation-mode grid over the configured seeds.
    Ablate {
        #[arg(long)]
        epochs: Option<usize>,
        /// Training runs executed concurrently.
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Finite-difference check of every differentiable op and the network loss.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        points: usize,
        /// Maximum relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn config(cli: &Cli, epochs: Option<usize>) -> Result<RunConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(q) = cli.query {
        cfg.net.query = q;
    }
    if let Some(b) = cli.baseline {
        cfg.baseline = b;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(m) = cli.mode {
        match cli.command {
            Command::Eval { .. } => cfg.train.test_mode = m,
            _ => cfg.train.mode = m,
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn set_threads() -> Result<(), HarnessError> {
    let Ok(v) = std::env::var("SELFVALNET_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| HarnessError::Config(format!("SELFVALNET_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| HarnessError::Other(e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    set_threads()?;
    match cli.command {
        Command::Synth => {
            let cfg = config(&cli, None)?;
            let s = harness::cmd_synth(&cfg, &cfg.out)?;
            println!("wrote {} train and {} test clips to {}", s.train, s.test, cfg.out.display());
        }
        Command::Train { epochs } => {
            let cfg = config(&cli, epochs)?;
            let s = harness::cmd_train(&cfg, |r| {
                let test = r.test.as_ref().map(|t| format!(" acc_50 {:.4} m_acc {:.4}", t.acc_50, t.m_acc)).unwrap_or_default();
                eprintln!("epoch {:>3} loss {:.4}{test}", r.epoch, r.loss.total);
            })?;
            println!("best epoch {}\n{}\n{}", s.outcome.best_epoch, s.report, s.baselines);
            println!("weights: {}", s.weights.display());
        }
        Command::Eval { ref weights } => {
            let cfg = config(&cli, None)?;
            let path = weights.clone().unwrap_or_else(|| cfg.out.join("weights.svnw"));
            let s = harness::cmd_eval(&cfg, &path, cfg.train.test_mode).with_context(|| format!("evaluating {}", path.display()))?;
            println!("{s}");
        }
        Command::Ablate { epochs, parallel } => {
            let mut cfg = config(&cli, epochs)?;
            if let Some(k) = parallel {
                cfg.ablate.parallel = k;
                cfg.validate()?;
            }
            let t = harness::cmd_ablate(&cfg, &|job, r| {
                let m = r.test.as_ref().map(|t| t.m_acc).unwrap_or(f64::NAN);
                eprintln!("[{} seed {}] epoch {:>3} loss {:.4} m_acc {:.4}", job.variant, job.seed, r.epoch, r.loss.total, m);
            })?;
            println!("{t}");
        }
        Command::Gradcheck { points, tolerance } => {
            let seed = match &cli.config {
                Some(_) => config(&cli, None)?.seed,
                None => cli.seed.unwrap_or(0),
            };
            let r = harness::cmd_gradcheck(&SuiteOptions { points, seed, tolerance, ..SuiteOptions::default() })?;
            println!("{r}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let defaults = format!("Default configuration:\n\n{}", RunConfig::default().to_toml());
    let matches = Cli::command().after_long_help(defaults).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.chain().find_map(|c| c.downcast_ref::<HarnessError>()).map_or(1, HarnessError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
