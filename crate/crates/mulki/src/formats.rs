//! On-disk formats: stream JSON, model checkpoints and weight-ensemble
//! state.
//!
//! A checkpoint is a JSON manifest `name.json` plus a raw array of
//! little-endian `f64` in `name.bin` next to it.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use mulki_core::encoder::{EncoderDims, PARAM_ORDER_VERSION};
use mulki_core::taskgen::SCHEMA_VERSION;
use mulki_core::{DualEncoder, ModelSnapshot, StreamSpec, WeMode, WeState};
use serde::{Deserialize, Serialize};

use crate::json;

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn save_stream(path: &Path, stream: &StreamSpec) -> Result<()> {
    write_text(path, &json::to_string(stream)?)
}

pub fn load_stream(path: &Path) -> Result<StreamSpec> {
    let s: StreamSpec = json::from_str(&read_text(path)?, &path.display().to_string())?;
    ensure!(
        s.schema_version == SCHEMA_VERSION,
        "{}: unsupported schema_version {} (expected {SCHEMA_VERSION})",
        path.display(),
        s.schema_version
    );
    s.validate().with_context(|| format!("{}: invalid stream", path.display()))?;
    Ok(s)
}

fn bin_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn write_f64s(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_f64s(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    ensure!(
        bytes.len() == expected * 8,
        "{}: expected {expected} parameters ({} bytes), found {} bytes",
        path.display(),
        expected * 8,
        bytes.len()
    );
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    dims: EncoderDims,
    seed: u64,
    param_order_version: u32,
    param_count: usize,
    params_file: String,
}

/// Writes `path` (the manifest) and its `.bin` sibling.
pub fn save_checkpoint(path: &Path, model: &ModelSnapshot) -> Result<()> {
    let bin = bin_path(path);
    let flat = model.params_flat();
    let manifest = CheckpointManifest {
        dims: model.dims(),
        seed: model.model().seed(),
        param_order_version: PARAM_ORDER_VERSION,
        param_count: flat.len(),
        params_file: file_name(&bin),
    };
    write_text(path, &json::to_string(&manifest)?)?;
    write_f64s(&bin, &flat)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelSnapshot> {
    let m: CheckpointManifest = json::from_str(&read_text(path)?, &path.display().to_string())?;
    if m.param_order_version != PARAM_ORDER_VERSION {
        bail!(
            "{}: parameter order version {} is not supported (expected {PARAM_ORDER_VERSION})",
            path.display(),
            m.param_order_version
        );
    }
    ensure!(
        m.param_count == m.dims.param_count(),
        "{}: param_count {} does not match dims ({})",
        path.display(),
        m.param_count,
        m.dims.param_count()
    );
    let flat = read_f64s(&path.with_file_name(&m.params_file), m.param_count)?;
    let mut model = DualEncoder::init(m.seed, m.dims)?;
    model.load_flat(&flat)?;
    Ok(model.snapshot())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeManifest {
    averagings: u64,
    interval: u64,
    eta: u64,
    mode: WeMode,
    param_count: usize,
    params_file: String,
}

/// Same layout as a checkpoint, with the running mean as the array.
pub fn save_we_state(path: &Path, state: &WeState) -> Result<()> {
    let bin = bin_path(path);
    let manifest = WeManifest {
        averagings: state.averagings(),
        interval: state.interval(),
        eta: state.eta(),
        mode: state.mode(),
        param_count: state.theta_hat().len(),
        params_file: file_name(&bin),
    };
    write_text(path, &json::to_string(&manifest)?)?;
    write_f64s(&bin, state.theta_hat())
}

pub fn load_we_state(path: &Path) -> Result<WeState> {
    let m: WeManifest = json::from_str(&read_text(path)?, &path.display().to_string())?;
    let theta = read_f64s(&path.with_file_name(&m.params_file), m.param_count)?;
    Ok(WeState::from_parts(theta, m.averagings, m.interval, m.eta, m.mode)?)
}
