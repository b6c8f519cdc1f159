//! Command-line front end: training runs, evaluation, latency reports, gate
//! traces and gradient-check sweeps.

pub mod commands;
pub mod config;
pub mod error;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use mgru_core::cells::{CellBnMode, GateBnMode};
use mgru_core::network::{CellKind, LatencyModel};
use mgru_core::training::SweepScope;

pub use commands::REFERENCE_PLANS;
pub use config::{LoadedConfig, RunConfig};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "mgru", version, about = "mGRU / mGRUIP-Ctx acoustic-model toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train per a run config; writes checkpoint, metrics and manifest.
    Train {
        config: PathBuf,
    },
    /// Evaluate a checkpoint on the config's task.
    Eval {
        config: PathBuf,
        /// Defaults to the run's own checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Model latency of layerwise context plans.
    Latency(LatencyArgs),
    /// Per-frame mean update-gate activation of one layer, as CSV.
    TraceGate {
        config: PathBuf,
        /// Without one, a freshly initialized model is traced.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        layer: usize,
        /// Sequences in the traced batch.
        #[arg(long, default_value_t = 64)]
        batch: usize,
        /// CSV destination; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient check over cells and BN configurations.
    Gradcheck(GradcheckCli),
}

#[derive(Debug, Args)]
pub struct LatencyArgs {
    /// Plans such as "{0;1×1} {0;1×3}"; one token per layer from layer 2.
    pub plans: Vec<String>,
    /// Reference plans A-D by letter.
    #[arg(long = "preset", value_delimiter = ',')]
    pub presets: Vec<char>,
    #[arg(long, default_value_t = 70.0)]
    pub base: f64,
    #[arg(long, default_value_t = 10.0)]
    pub frame: f64,
}

#[derive(Debug, Args)]
pub struct GradcheckCli {
    #[arg(long)]
    pub cell: Option<CellKind>,
    /// none, itoh or itoh-htoh (alias both).
    #[arg(long)]
    pub bn_gate: Option<GateBnMode>,
    /// itoh or itoh-htoh (alias both).
    #[arg(long)]
    pub bn_cell: Option<CellBnMode>,
    /// Only the stacked-model checks.
    #[arg(long, conflicts_with = "cells_only")]
    pub full_model: bool,
    /// Only the single-step cell checks.
    #[arg(long)]
    pub cells_only: bool,
    #[arg(long, hide = true)]
    pub corrupt: bool,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config } => commands::cmd_train(&config, out),
        Command::Eval { config, checkpoint } => commands::cmd_eval(&config, checkpoint.as_deref(), out),
        Command::Latency(args) => {
            let mut plans = Vec::new();
            for row in &args.presets {
                let up = row.to_ascii_uppercase().to_string();
                let (_, plan) = REFERENCE_PLANS.iter().find(|(name, _)| *name == up).ok_or_else(|| {
                    mgru_core::Error::Parse {
                        token: row.to_string(),
                        reason: "presets are A, B, C or D".into(),
                    }
                })?;
                plans.push(plan.to_string());
            }
            plans.extend(args.plans);
            let lat = LatencyModel {
                base_latency_ms: args.base,
                frame_ms: args.frame,
            };
            commands::cmd_latency(&plans, &lat, out)
        }
        Command::TraceGate {
            config,
            checkpoint,
            layer,
            batch,
            out: dest,
        } => commands::cmd_trace_gate(
            &commands::TraceArgs {
                config: &config,
                checkpoint: checkpoint.as_deref(),
                layer,
                batch,
                out: dest.as_deref(),
            },
            out,
        ),
        Command::Gradcheck(g) => commands::cmd_gradcheck(
            &commands::GradcheckArgs {
                cell: g.cell,
                bn_gate: g.bn_gate,
                bn_cell: g.bn_cell,
                scope: match (g.full_model, g.cells_only) {
                    (true, _) => SweepScope::Model,
                    (_, true) => SweepScope::Cells,
                    _ => SweepScope::All,
                },
                corrupt: g.corrupt,
            },
            out,
        ),
    }
}
