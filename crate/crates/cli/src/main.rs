//! `ser`: synthesize a corpus, build the feature cache, train, evaluate,
//! predict and run gradient checks.

mod commands;
mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ser_core::config::{RunConfig, CONFIG_ENV};
use ser_core::data::Split;

use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "ser", version, about = "Speech emotion recognition from log-Mel spectrograms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic four-class corpus and its manifest.
    Synth {
        /// Output directory for WAVs and manifest.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        n_per_class: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Compute and cache features for every manifest row.
    Featurize {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes best.ckpt, last.ckpt and train_log.csv.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on one split and write report files.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Predict class probabilities for one WAV file.
    Predict {
        #[command(flatten)]
        common: Common,
        wav: PathBuf,
    },
    /// Finite-difference check of every differentiable op and the tiny models.
    Gradcheck {
        /// Random trials per op.
        #[arg(long, default_value_t = ser_core::gradcheck::DEFAULT_TRIALS)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Skip the end-to-end model checks.
        #[arg(long)]
        ops_only: bool,
        /// Corrupt one op's backward rule (harness self-test).
        #[arg(long, value_name = "OP")]
        inject_fault: Option<String>,
    },
}

/// Options shared by every config-driven subcommand. Flags override the file.
#[derive(Debug, Args)]
struct Common {
    /// INI config file.
    #[arg(long, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Override any config key, as section.key=value. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    report_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.set_override(o)?;
        }
        let p = &mut cfg.paths;
        let pick = |flag: &Option<PathBuf>, slot: &mut Option<PathBuf>| {
            if flag.is_some() {
                *slot = flag.clone();
            }
        };
        pick(&self.manifest, &mut p.manifest);
        pick(&self.data_dir, &mut p.data_dir);
        pick(&self.checkpoint, &mut p.checkpoint);
        if let Some(d) = &self.cache_dir {
            p.cache_dir = d.clone();
        }
        if let Some(d) = &self.run_dir {
            p.run_dir = d.clone();
        }
        if let Some(d) = &self.report_dir {
            p.report_dir = d.clone();
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(e) = self.max_epochs {
            cfg.train.max_epochs = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { out, n_per_class, seed } => commands::synth(&out, n_per_class, seed),
        Command::Featurize { common } => commands::featurize(&common.resolve()?),
        Command::Train { common } => commands::train(&common.resolve()?),
        Command::Eval { common, split } => commands::eval(&common.resolve()?, split),
        Command::Predict { common, wav } => commands::predict(&common.resolve()?, &wav),
        Command::Gradcheck {
            trials,
            seed,
            ops_only,
            inject_fault,
        } => commands::gradcheck(trials, seed, !ops_only, inject_fault),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            std::process::exit(if e.use_stderr() { error::ExitCode::Usage as i32 } else { 0 });
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code() as i32);
    }
}
