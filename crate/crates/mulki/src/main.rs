use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use mulki::{cmd_ablate, cmd_generate, cmd_pretrain, cmd_report, cmd_run, ExperimentConfig, Variant};

/// Continual learning of a toy dual encoder with multi-stage knowledge
/// integration.
///
/// Config keys can be overridden with MULKI_<SECTION>__<KEY> environment
/// variables, e.g. MULKI_HYPER__LR=0.01.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// TOML experiment config; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a task stream.
    Generate {
        /// Output stream file [default: <out>/stream.json].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the initial model on the stream's pretraining pool.
    Pretrain {
        #[arg(long)]
        stream: PathBuf,
        /// Output directory [default: <out>/c0].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train sequentially over the stream, once per seed.
    Run {
        #[arg(long)]
        stream: PathBuf,
        /// Initial-model checkpoint manifest.
        #[arg(long)]
        c0: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds, replacing the config's.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Run the whole variant grid and tabulate seed means.
    Ablate {
        #[arg(long)]
        stream: PathBuf,
        #[arg(long)]
        c0: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Merge finished runs into one CSV table.
    Report {
        /// Directories searched recursively for metrics.json.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-task accuracy-over-time series here.
        #[arg(long)]
        series: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref())?;
    match cli.cmd {
        Cmd::Generate { out } => {
            let out = out.unwrap_or_else(|| cfg.out.join("stream.json"));
            let s = cmd_generate(&cfg, &out)?;
            eprintln!("wrote {} ({} tasks)", out.display(), s.n_tasks());
        }
        Cmd::Pretrain { stream, out } => {
            let out = out.unwrap_or_else(|| cfg.out.join("c0"));
            let path = cmd_pretrain(&cfg, &stream, &out)?;
            eprintln!("wrote {}", path.display());
        }
        Cmd::Run {
            stream,
            c0,
            out,
            seeds,
            variant,
        } => {
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            if let Some(v) = variant {
                cfg.variant = v;
            }
            let out = out.unwrap_or_else(|| cfg.out.join(cfg.variant.name()));
            for rec in cmd_run(&cfg, &stream, &c0, &out)? {
                let s = rec.matrix.summary();
                eprintln!(
                    "seed {}: transfer {:.4} avg {:.4} last {:.4} current_avg {:.4}",
                    rec.seed, s.transfer, s.avg, s.last, s.current_avg
                );
            }
            eprintln!("wrote {}", out.display());
        }
        Cmd::Ablate { stream, c0, out, seeds } => {
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            let out = out.unwrap_or_else(|| cfg.out.join("ablation"));
            for r in cmd_ablate(&cfg, &stream, &c0, &out)? {
                eprintln!(
                    "{:<13} transfer {:.4}±{:.4} avg {:.4}±{:.4} last {:.4}±{:.4}",
                    r.variant.name(),
                    r.transfer.mean,
                    r.transfer.std,
                    r.avg.mean,
                    r.avg.std,
                    r.last.mean,
                    r.last.std
                );
            }
        }
        Cmd::Report { runs, out, series } => {
            let rows = cmd_report(&runs, &out, series.as_deref()).context("report")?;
            eprintln!("merged {} runs into {}", rows.len(), out.display());
        }
    }
    Ok(())
}
