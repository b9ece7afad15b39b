//! Command-line surface: one subcommand per pipeline stage, all driven by a
//! TOML run document.

pub mod artifacts;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{CommandFactory, Parser, Subcommand};

pub use commands::{
    cmd_build_tree, cmd_cost, cmd_embed, cmd_eval, cmd_pretrain, cmd_route, cmd_synth, cmd_train, cost_inputs, Baseline,
    Router,
};
pub use config::{DomainEntry, RunConfig, SEED_ENV};

use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "hieradapt", version, about = "Tree-structured adapters for a frozen causal language model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a planted four-domain corpus, a held-out mixture and a run config
    Synth {
        /// Directory to create
        #[arg(long)]
        out: PathBuf,
        /// Generator seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the backbone language model on the training domains
    Pretrain {
        /// Run config (TOML)
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Embed documents of every training domain with the frozen backbone
    Embed {
        /// Run config (TOML)
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Build the domain tree from the manual grouping or by clustering embeddings
    BuildTree {
        /// Run config (TOML)
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Train adapters with the backbone frozen
    Train {
        /// Run config (TOML)
        #[arg(short, long)]
        config: PathBuf,
        /// Train a baseline instead of the tree: multi, single or single:<domain>
        #[arg(long, value_name = "KIND")]
        baseline: Option<String>,
    },
    /// Perplexity of the backbone and every trained variant on held-back text
    Eval {
        /// Run config (TOML)
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Choose paths for held-out domains and evaluate with 1..=n_paths paths
    Route {
        /// Run config (TOML)
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Print the parameter and flop accounting table
    Cost {
        /// Run config (TOML); its [cost] section overrides the built-in inputs
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Print CSV instead of the text table
        #[arg(long)]
        csv: bool,
        /// Take layers, width and backbone size from the config's [model]
        #[arg(long)]
        from_model: bool,
    },
}

fn load(path: &PathBuf) -> Result<RunConfig> {
    RunConfig::load(path)
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { out, seed } => {
            let path = cmd_synth(&out, seed)?;
            println!("{}", path.display());
        }
        Command::Pretrain { config } => cmd_pretrain(&load(&config)?)?,
        Command::Embed { config } => cmd_embed(&load(&config)?)?,
        Command::BuildTree { config } => cmd_build_tree(&load(&config)?)?,
        Command::Train { config, baseline } => {
            let baseline = baseline.as_deref().map(Baseline::parse).transpose()?;
            cmd_train(&load(&config)?, baseline.as_ref())?
        }
        Command::Eval { config } => cmd_eval(&load(&config)?)?,
        Command::Route { config } => cmd_route(&load(&config)?)?,
        Command::Cost { config, csv, from_model } => {
            let cfg = config.as_ref().map(load).transpose()?;
            let (text, table) = cmd_cost(cfg.as_ref(), from_model)?;
            print!("{}", if csv { table } else { text });
        }
    }
    Ok(())
}

/// Single-line, machine-parsable failure report.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace(['\n', '\r'], " ");
    format!("error: kind={} msg={}", e.kind(), msg)
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            1
        }
    }
}

/// Long help of the top-level command and of each subcommand, keyed by name.
pub fn help_texts() -> Vec<(String, String)> {
    let mut root = Cli::command();
    root.build();
    let mut out = vec![("hieradapt".to_string(), root.render_long_help().to_string())];
    for sub in root.get_subcommands_mut() {
        out.push((sub.get_name().to_string(), sub.render_long_help().to_string()));
    }
    out
}
