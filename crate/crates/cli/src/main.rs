use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;

/// Toy-universe pipeline for distillation and fairness studies in face
/// verification.
#[derive(Debug, Parser)]
#[command(name = "fairkd", version)]
pub struct Cli {
    /// Run configuration (TOML). Relative names are also looked up in
    /// `$FAIRKD_CONFIG_DIR`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override a configuration key, e.g. `--set train.epochs=4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Run every batch operation on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Md,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the real, synthetic and evaluation sources and a held-out pair protocol.
    SynthGen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Group-balanced merge of manifests.
    Merge {
        #[arg(long)]
        out: PathBuf,
        /// Identities to keep; defaults to every input identity.
        #[arg(long)]
        total: Option<usize>,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Group-balanced mix of real and synthetic manifests.
    Mix {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        total: usize,
        #[arg(long, default_value_t = 0.7)]
        real_fraction: f64,
        #[arg(long, required = true, num_args = 1..)]
        real: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        synthetic: Vec<PathBuf>,
    },
    /// Train an encoder and classification head from scratch.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Trace path; defaults to the checkpoint path with a `.trace.tsv` extension.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Which encoder spec of the config to train.
        #[arg(long, value_enum, default_value_t = Role::Student)]
        role: Role,
    },
    /// Train the student encoder with feature distillation from a frozen teacher.
    Distill {
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Verify a checkpoint on a pair protocol and write a report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        protocol: PathBuf,
        /// Manifest whose features the protocol samples refer to.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Model label in the report; defaults to the checkpoint's role.
        #[arg(long)]
        model_id: Option<String>,
    },
    /// Render reports as one table.
    Report {
        #[arg(long, value_enum, default_value_t = Format::Md)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Recompute Average, STD and SER of published table rows.
    VerifyTables {
        /// Fixture file; defaults to the bundled one.
        #[arg(long)]
        fixture: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code().clamp(0, 255) as u8);
        }
    };
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e
                .chain()
                .find_map(|c| c.downcast_ref::<fairkd::Error>())
                .is_some_and(fairkd::Error::is_config_error);
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}
