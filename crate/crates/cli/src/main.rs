mod commands;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trimodal_core::config::RunConfig;
use trimodal_core::{Error, ErrorKind};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "TRIMODAL_OUT";
pub const FAILED_MARKER: &str = ".failed";
pub const CONFIG_ECHO: &str = "config.toml";

#[derive(Parser)]
#[command(
    name = "trimodal",
    version,
    about = "Tri-modal skin lesion classifier: data, training, evaluation and ablations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// TOML config file; defaults apply to missing keys
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override a config value after the file is parsed, e.g. `--set optim.lr=3e-4`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory [default: $TRIMODAL_OUT/<command> or runs/<command>]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Run seed; takes precedence over the config file and overrides
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write the best checkpoint and history
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory or CSV file; synthetic data when omitted
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test", "all"])]
        split: String,
    },
    /// Finite-difference gradient checks over the registered blocks
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Restrict to the named blocks
        #[arg(long = "block", value_name = "NAME")]
        blocks: Vec<String>,
    },
    /// Train and test every arm of an ablation under several seeds
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Built-in arm set: components, variants, modalities, decision
        #[arg(long, default_value = "components", conflicts_with = "arms")]
        preset: String,
        /// TOML file of `[[arm]]` tables with `name` and `overrides`
        #[arg(long, value_name = "PATH")]
        arms: Option<PathBuf>,
        /// Comma-separated seeds [default: the run seed]
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Concurrent runs
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Render tables and training curves from result and history CSVs
    Report {
        #[command(flatten)]
        common: Common,
        /// CSV files or directories searched recursively
        #[arg(required = true, value_name = "PATH")]
        inputs: Vec<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Ablate { .. } => "ablate",
            Command::Report { .. } => "report",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData { common }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Gradcheck { common, .. }
            | Command::Ablate { common, .. }
            | Command::Report { common, .. } => common,
        }
    }
}

pub fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
        ErrorKind::Verification => 5,
    }
}

fn kind_name(kind: ErrorKind) -> &'static str {
    match kind {
        ErrorKind::Config => "config",
        ErrorKind::Data => "data",
        ErrorKind::Numeric => "numeric",
        ErrorKind::Verification => "verification",
    }
}

fn error_line(command: &str, e: &Error) -> String {
    let kind = e.kind();
    serde_json::json!({
        "status": "error",
        "command": command,
        "kind": kind_name(kind),
        "exit": exit_code(kind),
        "message": e.to_string().replace('\n', " "),
    })
    .to_string()
}

/// File config, then `--set` overrides, then `--seed`.
pub fn resolve_config(
    common: &Common,
    fallback: Option<&Path>,
) -> trimodal_core::Result<RunConfig> {
    let base = match common.config.as_deref().or(fallback) {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&common.set)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(command: &str, common: &Common) -> PathBuf {
    common.out.clone().unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        root.join(command)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    let out = out_dir(name, cli.command.common());
    let mut created = false;
    let result = commands::run(&cli.command, &out, &mut created);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = error_line(name, &e);
            eprintln!("{line}");
            if created {
                let _ = std::fs::write(out.join(FAILED_MARKER), format!("{line}\n"));
            }
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
