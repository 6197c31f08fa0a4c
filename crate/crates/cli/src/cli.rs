use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use oqat_core::search::CostKey;
use oqat_core::space::ArchSpec;

use crate::commands::{self, EvalTarget};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "oqat", version, about = "Quantization-aware supernet training, bit inheritance and search")]
pub struct Cli {
    /// JSON run configuration; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (default: $OQAT_OUT, then ./oqat-out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one supernet with the sandwich rule.
    Train {
        #[arg(long, conflicts_with = "fp")]
        bits: Option<u32>,
        /// Train in floating point.
        #[arg(long)]
        fp: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Derive the next lower bit width from a checkpoint.
    Inherit {
        #[arg(long)]
        ckpt: PathBuf,
        /// Target bits; must be one below the checkpoint's.
        #[arg(long)]
        to: Option<u32>,
        /// Finetune for the configured fraction of the training epochs.
        #[arg(long)]
        finetune: bool,
    },
    /// Train the first bit width, then inherit and finetune down the list.
    Schedule {
        /// Comma-separated descending bit widths, e.g. 4,3,2.
        #[arg(long, value_delimiter = ',')]
        bits: Option<Vec<u32>>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Also train each lower bit width from scratch.
        #[arg(long)]
        scratch_baseline: bool,
    },
    /// Coarse-to-fine architecture search under a cost budget.
    Search {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        budget: Option<f64>,
        #[arg(long, value_parser = parse_cost_key)]
        budget_key: Option<CostKey>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Calibrate and evaluate architectures of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        target: TargetArgs,
        #[arg(long)]
        wbits: Option<u32>,
        #[arg(long)]
        abits: Option<u32>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// QF scores, correlations and cohorts from evaluation records.
    Analyze {
        /// Record CSV (`arch,bit,acc,flops_fp,bitops`); repeatable.
        #[arg(long, required = true)]
        records: Vec<PathBuf>,
        #[arg(long)]
        bit: Option<String>,
        #[arg(long)]
        k: Option<usize>,
    },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct TargetArgs {
    /// Architecture string as printed by other commands.
    #[arg(long)]
    arch: Option<String>,
    /// The largest architecture.
    #[arg(long)]
    max: bool,
    /// Random architectures; the count defaults to `eval.sample`.
    #[arg(long, num_args = 0..=1, default_missing_value = "0")]
    sample: Option<usize>,
}

fn parse_cost_key(s: &str) -> Result<CostKey, String> {
    match s {
        "flops" => Ok(CostKey::Flops),
        "bitops" => Ok(CostKey::Bitops),
        _ => Err(format!("expected `flops` or `bitops`, got `{s}`")),
    }
}

/// Parse arguments and run one command.
pub fn run<I, T>(args: I) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.to_string())),
    };
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.resolve(cli.out);
    match cli.command {
        Command::Train { bits, fp, epochs } => {
            if fp {
                cfg.train.bits = None;
            } else if bits.is_some() {
                cfg.train.bits = bits;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            commands::train(cfg)
        }
        Command::Inherit { ckpt, to, finetune } => commands::inherit(cfg, &ckpt, to, finetune),
        Command::Schedule { bits, epochs, scratch_baseline } => {
            if let Some(b) = bits {
                cfg.schedule.bits = b;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.schedule.scratch_baseline |= scratch_baseline;
            commands::schedule(cfg)
        }
        Command::Search { ckpt, budget, budget_key, workers } => {
            if let Some(b) = budget {
                cfg.search.budget = b;
            }
            if let Some(k) = budget_key {
                cfg.search.budget_key = k;
            }
            if let Some(w) = workers {
                cfg.search.workers = w;
            }
            commands::search(cfg, &ckpt)
        }
        Command::Eval { ckpt, target, wbits, abits, workers } => {
            if wbits.is_some() {
                cfg.eval.weight_bits = wbits;
            }
            if abits.is_some() {
                cfg.eval.act_bits = abits;
            }
            if let Some(w) = workers {
                cfg.eval.workers = w;
            }
            let target = match (target.arch, target.max, target.sample) {
                (Some(a), _, _) => EvalTarget::Arch(a.parse::<ArchSpec>().map_err(|e| CliError::Usage(format!("--arch: {e}")))?),
                (_, true, _) => EvalTarget::Max,
                (_, _, n) => {
                    if let Some(n) = n.filter(|&n| n > 0) {
                        cfg.eval.sample = n;
                    }
                    EvalTarget::Sample
                }
            };
            commands::eval(cfg, &ckpt, target)
        }
        Command::Analyze { records, bit, k } => {
            if let Some(b) = bit {
                cfg.analysis.bit = b;
            }
            if let Some(k) = k {
                cfg.analysis.k = k;
            }
            commands::analyze(cfg, &records)
        }
    }
}
