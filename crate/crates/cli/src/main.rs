mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use unictr_core::config::RunConfig;
use unictr_core::model::MaskMode;
use unictr_core::Result;

#[derive(Parser)]
#[command(name = "unictr", version, about = "Multi-domain CTR prediction with prompt-encoded samples")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Clone)]
pub struct Global {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Floating-point width (32 or 64).
    #[arg(long, global = true, value_parser = ["32", "64"])]
    pub precision: Option<String>,
    /// Run every domain network on every sample and mask the loss.
    #[arg(long, global = true)]
    pub strict_mask: bool,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Baseline {
    SharedBottom,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Scale {
    /// Small fixed model, independent of the configured sizes.
    Tiny,
    /// The configured model sizes.
    Config,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSONL dataset; defaults to `data.path` from the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// train, valid, test or all.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Only this domain; an undefined AUC is then an error.
    #[arg(long, conflicts_with = "zero_shot")]
    pub domain: Option<String>,
    /// Score this domain with the general head only.
    #[arg(long)]
    pub zero_shot: Option<String>,
    /// Write the metrics as JSON here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic multi-domain dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Also write the true click probability of every record, one per line.
        #[arg(long)]
        probs: Option<PathBuf>,
    },
    /// Train a model and write its best checkpoint and reports.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Train a baseline instead.
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
    },
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Evaluate one domain with the general head only.
    ZeroShot {
        /// Domain to score.
        domain: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "all")]
        split: String,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Add and train a network for a new domain with everything else frozen.
    AddDomain {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Records of the new domain (other domains are ignored).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the extended checkpoint and reports.
        #[arg(long)]
        out: PathBuf,
        /// Name of the new domain; inferred when the data has exactly one
        /// unregistered domain.
        #[arg(long)]
        domain: Option<String>,
        /// Data of the existing domains, to confirm their AUCs are unchanged.
        #[arg(long)]
        old_data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Finite-difference and gradient-decoupling audit.
    GradCheck {
        #[arg(long, value_enum, default_value = "tiny")]
        scale: Scale,
        /// Write the audit as JSON here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Deliberately breaks the loss mask so the decoupling audit must fail.
        #[arg(long, hide = true)]
        corrupt_mask: bool,
    },
    /// Write per-sample representations as TSV.
    DumpReps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// h<layer>, dsn:<domain> or general.
        #[arg(long)]
        select: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

impl Global {
    /// Config file (or defaults) with command-line flags applied.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.synth.seed = s;
        }
        if let Some(p) = &self.precision {
            cfg.precision = p.parse().expect("validated by clap");
        }
        if self.strict_mask {
            cfg.train.mask_mode = MaskMode::Strict;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
