//! Subcommand definitions and dispatch.
//!
//! Every command prints stable `key=value` lines on stdout so runs are easy
//! to diff and grep; human-oriented tables follow those lines. Failures exit
//! with the error family's code (usage 2, data 3, format 4, transport 5).

mod assist;
mod data;
mod model;

use std::path::Path;

use clap::{Parser, Subcommand};
use fusedec_core::error::{Error, Result};
use fusedec_core::fusion::BranchMode;

#[derive(Parser)]
#[command(
    name = "fusedec",
    version,
    about = "Dual-branch multimodal decision engine over precomputed features"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic planted-salience dataset
    Synth(data::SynthArgs),
    /// Rank lexicon objects mentioned in a manifest's descriptions
    Bag(data::BagArgs),
    /// Extract scene objects and detail sentences via a chat backend
    Enrich(assist::EnrichArgs),
    /// Derive per-description relevance tables for each positive class
    Pseudo(assist::PseudoArgs),
    /// Train the dual-branch decision model
    Train(model::TrainArgs),
    /// Train the text-refinement surrogate on relevance tables
    Refine(model::RefineArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(model::EvalArgs),
    /// Print the decision and instance evidence for one sample
    Explain(model::ExplainArgs),
    /// Verify analytic gradients against central finite differences
    Gradcheck(model::GradcheckArgs),
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => data::synth(args),
        Command::Bag(args) => data::bag(args),
        Command::Enrich(args) => assist::enrich(args),
        Command::Pseudo(args) => assist::pseudo(args),
        Command::Train(args) => model::train(args),
        Command::Refine(args) => model::refine(args),
        Command::Eval(args) => model::eval(args),
        Command::Explain(args) => model::explain(args),
        Command::Gradcheck(args) => model::gradcheck(args),
    }
}

/// Branch selection shared by train, eval, and explain.
#[derive(clap::Args)]
pub struct ModeFlags {
    /// Drop the vision branch (text and global context only)
    #[arg(long, conflicts_with_all = ["no_text", "global_only", "full"])]
    pub no_vision: bool,
    /// Drop the text branch (vision and global context only)
    #[arg(long, conflicts_with_all = ["global_only", "full"])]
    pub no_text: bool,
    /// Use only the pooled global context
    #[arg(long, conflicts_with = "full")]
    pub global_only: bool,
    /// Force the full dual-branch blend
    #[arg(long)]
    pub full: bool,
}

impl ModeFlags {
    pub fn mode(&self, default: BranchMode) -> BranchMode {
        if self.full {
            BranchMode::Full
        } else if self.global_only {
            BranchMode::GlobalOnly
        } else if self.no_vision {
            BranchMode::TextOnly
        } else if self.no_text {
            BranchMode::VisionOnly
        } else {
            default
        }
    }
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
        }
    }
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Parse(format!("serializing {}: {e}", path.display())))?;
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}
