use std::fs;
use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};

use himtm_cli::diag::{self, CheckScale};
use himtm_cli::pipeline;
use himtm_core::config::RunConfig;

/// Hierarchical multi-scale masked time-series pre-training and long-term
/// forecasting.
#[derive(Parser)]
#[command(name = "himtm", version, about, max_term_width = 100)]
struct Cli {
    /// Path to a `key = value` config file; defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Suppress progress output (files are still written).
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Masked pre-training of the hierarchical backbone
    Pretrain,
    /// Fine-tune the forecaster on top of a pre-trained backbone
    Finetune {
        /// Checkpoint to take the backbone from (default: <out.dir>/pretrain.ckpt)
        #[arg(long, value_name = "CKPT")]
        from: Option<PathBuf>,
        /// Train from scratch instead of loading a pre-trained backbone
        #[arg(long)]
        no_pretrain: bool,
    },
    /// Evaluate a fine-tuned checkpoint on the test split
    Eval {
        /// Checkpoint to evaluate (default: <out.dir>/finetune.ckpt)
        #[arg(long, value_name = "CKPT")]
        from: Option<PathBuf>,
    },
    /// Write per-step test-split forecasts to CSV
    Forecast {
        /// Checkpoint to forecast with (default: <out.dir>/finetune.ckpt)
        #[arg(long, value_name = "CKPT")]
        from: Option<PathBuf>,
        /// Output file (default: <out.dir>/forecasts.csv)
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Verify analytic gradients against central finite differences
    Gradcheck {
        /// Composed-model size: tiny or small
        #[arg(long, default_value = "tiny")]
        scale: String,
    },
    /// Re-run the whole pipeline across several values of one config key
    Sweep {
        /// Config key to vary, e.g. pretrain.mask_ratio
        #[arg(long, value_name = "KEY")]
        param: String,
        /// Comma-separated values, e.g. 0.1,0.3,0.5
        #[arg(long, value_name = "LIST")]
        values: String,
    },
    /// Compare the full model against variants with components removed
    Ablate {
        /// Comma-separated components to drop: hsd, ded, hmt, csa
        #[arg(long, value_name = "LIST")]
        drop: String,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_config(path: &Option<PathBuf>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("cannot read config {}", p.display()))?;
            Ok(RunConfig::parse(&text)
                .with_context(|| format!("config {}", p.display()))?)
        }
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli.config)?;
    let quiet = cli.quiet;
    match cli.command {
        Command::Pretrain => pipeline::run_pretrain(&cfg, quiet)?,
        Command::Finetune { from, no_pretrain } => {
            pipeline::run_finetune(&cfg, from.as_deref(), no_pretrain, quiet)?;
        }
        Command::Eval { from } => {
            pipeline::run_eval(&cfg, from.as_deref(), quiet)?;
        }
        Command::Forecast { from, out } => {
            pipeline::run_forecast(&cfg, from.as_deref(), out.as_deref(), quiet)?;
        }
        Command::Gradcheck { scale } => {
            let scale = match scale.as_str() {
                "tiny" => CheckScale::Tiny,
                "small" => CheckScale::Small,
                other => anyhow::bail!("unknown gradcheck scale '{other}' (tiny or small)"),
            };
            let outcomes = diag::gradcheck_suite(scale)?;
            let mut failed = 0usize;
            for o in &outcomes {
                println!(
                    "{:<24} max rel err {:>10.3e}  ({} compared)  {}",
                    o.name,
                    o.max_rel_err,
                    o.compared,
                    if o.pass { "ok" } else { "FAIL" }
                );
                if !o.pass {
                    failed += 1;
                    if let Some((pi, ei, a, n)) = o.worst {
                        println!(
                            "  worst: param {pi} element {ei}: analytic {a:.6e}, numeric {n:.6e}"
                        );
                    }
                }
            }
            if failed > 0 {
                anyhow::bail!("{failed} of {} gradient checks failed", outcomes.len());
            }
            println!("all {} gradient checks passed", outcomes.len());
        }
        Command::Sweep { param, values } => {
            let values: Vec<String> = values
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            diag::run_sweep(&cfg, &param, &values, quiet)?;
        }
        Command::Ablate { drop } => {
            let drops: Vec<String> = drop
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            diag::run_ablate(&cfg, &drops, quiet)?;
        }
    }
    Ok(())
}
