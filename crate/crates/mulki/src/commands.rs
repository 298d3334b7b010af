//! The five commands. Each reads its inputs, never modifies them, and
//! writes outputs that are byte-for-byte reproducible from config and
//! seed.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use mulki_core::metrics::{AccuracyMatrix, Summary};
use mulki_core::runner::{self, IterationLog, RunRecord};
use mulki_core::taskgen::generate_stream;
use mulki_core::{HyperParams, ModelSnapshot, StreamSpec};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Variant};
use crate::formats::{self, write_text};
use crate::json::{self, g17};

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsFile {
    pub matrix: AccuracyMatrix,
    pub transfer: f64,
    pub avg: f64,
    pub last: f64,
    pub current_avg: f64,
    pub zero_shot_row: Vec<f64>,
}

impl MetricsFile {
    pub fn new(matrix: &AccuracyMatrix) -> Self {
        let s = matrix.summary();
        Self {
            matrix: matrix.clone(),
            transfer: s.transfer,
            avg: s.avg,
            last: s.last,
            current_avg: s.current_avg,
            zero_shot_row: matrix.zero_shot_row().to_vec(),
        }
    }

    pub fn summary(&self) -> Summary {
        Summary {
            transfer: self.transfer,
            avg: self.avg,
            last: self.last,
            current_avg: self.current_avg,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        json::from_str(&formats::read_text(path)?, &path.display().to_string())
    }
}

#[derive(Serialize)]
struct ConfigEcho<'a> {
    config: &'a ExperimentConfig,
    seed: u64,
    hyper: &'a HyperParams,
}

#[derive(Serialize)]
struct ZeroShotFile {
    zero_shot_row: Vec<f64>,
    mean: f64,
}

/// Writes `out` as canonical stream JSON.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<StreamSpec> {
    let stream = generate_stream(&cfg.stream, cfg.stream_seed)?;
    formats::save_stream(out, &stream)?;
    Ok(stream)
}

/// Writes `out_dir/c0.json` (+ `.bin`) and `out_dir/zero_shot.json`;
/// returns the checkpoint manifest path.
pub fn cmd_pretrain(cfg: &ExperimentConfig, stream_path: &Path, out_dir: &Path) -> Result<PathBuf> {
    let stream = formats::load_stream(stream_path)?;
    let c0 = runner::pretrain(&stream, &cfg.pretrain, cfg.pretrain_seed)?;
    let path = out_dir.join("c0.json");
    formats::save_checkpoint(&path, &c0)?;
    let row = runner::zero_shot_row(&c0, &stream)?;
    let mean = row.iter().sum::<f64>() / row.len() as f64;
    write_text(&out_dir.join("zero_shot.json"), &json::to_string(&ZeroShotFile { zero_shot_row: row, mean })?)?;
    Ok(path)
}

fn load_inputs(stream_path: &Path, c0_path: &Path) -> Result<(StreamSpec, ModelSnapshot)> {
    let stream = formats::load_stream(stream_path)?;
    let c0 = formats::load_checkpoint(c0_path)?;
    let d = c0.dims();
    ensure!(
        d.d_in == stream.d_in() && d.vocab_size == stream.vocab_size(),
        "{} (d_in {}, vocab {}) does not fit {} (d_in {}, vocab {})",
        c0_path.display(),
        d.d_in,
        d.vocab_size,
        stream_path.display(),
        stream.d_in(),
        stream.vocab_size()
    );
    Ok((stream, c0))
}

pub fn write_losses_csv(path: &Path, log: &[IterationLog]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record([
        "task", "iteration", "ce", "csa", "fd0", "fd_prev", "ird0", "ird_prev", "idd0", "idd_prev", "mdd", "wc",
        "total", "r0_mean",
    ])?;
    for l in log {
        let b = &l.loss;
        let r0 = if b.per_sample_r0.is_empty() {
            String::new()
        } else {
            g17(b.per_sample_r0.iter().sum::<f64>() / b.per_sample_r0.len() as f64)
        };
        let mut rec = vec![(l.task + 1).to_string(), l.iteration.to_string()];
        rec.extend(
            [b.ce, b.csa, b.fd0, b.fd_prev, b.ird0, b.ird_prev, b.idd0, b.idd_prev, b.mdd, b.wc, b.total]
                .into_iter()
                .map(g17),
        );
        rec.push(r0);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn write_metrics(dir: &Path, matrix: &AccuracyMatrix) -> Result<()> {
    write_text(&dir.join("metrics.json"), &json::to_string(&MetricsFile::new(matrix))?)
}

fn echo_config(dir: &Path, cfg: &ExperimentConfig, seed: u64) -> Result<()> {
    let hyper = cfg.effective_hyper();
    let echo = ConfigEcho {
        config: cfg,
        seed,
        hyper: &hyper,
    };
    write_text(&dir.join("config.json"), &json::to_string(&echo)?)
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// Trains the configured variant once per seed. Each seed writes
/// `out_dir/seed_<s>/` with `metrics.json`, `losses.csv`, `config.json`
/// and `checkpoints/task_<i>.json`.
pub fn cmd_run(cfg: &ExperimentConfig, stream_path: &Path, c0_path: &Path, out_dir: &Path) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let (stream, c0) = load_inputs(stream_path, c0_path)?;
    let hyper = cfg.effective_hyper();
    let mut records = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let rec = runner::run_stream(&stream, &c0, &hyper, seed)?;
        let dir = seed_dir(out_dir, seed);
        write_metrics(&dir, &rec.matrix)?;
        write_losses_csv(&dir.join("losses.csv"), &rec.losses)?;
        echo_config(&dir, cfg, seed)?;
        for (i, ck) in rec.checkpoints.iter().enumerate() {
            formats::save_checkpoint(&dir.join("checkpoints").join(format!("task_{}.json", i + 1)), ck)?;
        }
        records.push(rec);
    }
    Ok(records)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub transfer: Stat,
    pub avg: Stat,
    pub last: Stat,
    pub current_avg: Stat,
}

#[derive(Serialize)]
struct AblationFile<'a> {
    rows: &'a [AblationRow],
}

/// Runs every variant over every seed. Writes
/// `out_dir/<variant>/seed_<s>/{metrics.json,config.json}` and the
/// comparison table `out_dir/ablation.{csv,json}`.
pub fn cmd_ablate(cfg: &ExperimentConfig, stream_path: &Path, c0_path: &Path, out_dir: &Path) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let (stream, c0) = load_inputs(stream_path, c0_path)?;
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let vcfg = ExperimentConfig {
            variant,
            ..cfg.clone()
        };
        let hyper = vcfg.effective_hyper();
        let mut sums = Vec::new();
        for &seed in &cfg.seeds {
            let rec = runner::run_stream(&stream, &c0, &hyper, seed)
                .with_context(|| format!("variant {variant}, seed {seed}"))?;
            let dir = seed_dir(&out_dir.join(variant.name()), seed);
            write_metrics(&dir, &rec.matrix)?;
            echo_config(&dir, &vcfg, seed)?;
            sums.push(rec.matrix.summary());
        }
        let col = |f: fn(&Summary) -> f64| Stat::of(&sums.iter().map(f).collect::<Vec<_>>());
        rows.push(AblationRow {
            variant,
            seeds: cfg.seeds.clone(),
            transfer: col(|s| s.transfer),
            avg: col(|s| s.avg),
            last: col(|s| s.last),
            current_avg: col(|s| s.current_avg),
        });
    }
    write_text(&out_dir.join("ablation.json"), &json::to_string(&AblationFile { rows: &rows })?)?;
    let mut w = csv::Writer::from_path(out_dir.join("ablation.csv"))?;
    w.write_record([
        "variant", "seeds", "transfer_mean", "transfer_std", "avg_mean", "avg_std", "last_mean", "last_std",
        "current_avg_mean", "current_avg_std",
    ])?;
    for r in &rows {
        let mut rec = vec![r.variant.name().to_string(), r.seeds.len().to_string()];
        for s in [r.transfer, r.avg, r.last, r.current_avg] {
            rec.push(g17(s.mean));
            rec.push(g17(s.std));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(rows)
}

/// One `metrics.json` found by [`cmd_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub run: String,
    pub metrics: MetricsFile,
}

fn find_metrics(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_metrics(&p, found)?;
        } else if p.file_name().is_some_and(|n| n == "metrics.json") {
            found.push(p);
        }
    }
    Ok(())
}

/// Collects every `metrics.json` under `run_dirs` into one CSV table at
/// `out`. With `series`, also writes one line per accuracy-matrix entry
/// (`run,after_task,task,accuracy`) for accuracy-over-time plots.
pub fn cmd_report(run_dirs: &[PathBuf], out: &Path, series: Option<&Path>) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for d in run_dirs {
        let mut found = Vec::new();
        find_metrics(d, &mut found)?;
        ensure!(!found.is_empty(), "no metrics.json under {}", d.display());
        for p in found {
            let run = p.parent().unwrap_or(Path::new(".")).display().to_string();
            rows.push(ReportRow {
                run,
                metrics: MetricsFile::load(&p)?,
            });
        }
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(out).with_context(|| format!("writing {}", out.display()))?;
    w.write_record(["run", "transfer", "avg", "last", "current_avg", "zero_shot_mean"])?;
    for r in &rows {
        let m = &r.metrics;
        let zs = m.zero_shot_row.iter().sum::<f64>() / m.zero_shot_row.len() as f64;
        w.write_record([r.run.clone(), g17(m.transfer), g17(m.avg), g17(m.last), g17(m.current_avg), g17(zs)])?;
    }
    w.flush()?;
    if let Some(path) = series {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
        w.write_record(["run", "after_task", "task", "accuracy"])?;
        for r in &rows {
            for (i, row) in r.metrics.matrix.rows().iter().enumerate() {
                for (j, a) in row.iter().enumerate() {
                    w.write_record([r.run.clone(), i.to_string(), (j + 1).to_string(), g17(*a)])?;
                }
            }
        }
        w.flush()?;
    }
    Ok(rows)
}
