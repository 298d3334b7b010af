//! Experiment configuration: a TOML document with optional environment
//! overrides.
//!
//! Any variable `MULKI_<SECTION>__<KEY>` (nested keys joined by `__`,
//! case-insensitive) replaces the matching key, e.g.
//! `MULKI_HYPER__LR=0.01` or `MULKI_HYPER__ENABLE__WE=false`. Top-level
//! keys drop the section: `MULKI_SEEDS=[1,2]`. Values are parsed as TOML
//! and fall back to a plain string.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use mulki_core::losses::{Components, Weighting};
use mulki_core::runner::PretrainConfig;
use mulki_core::{HyperParams, StreamConfig};
use serde::{Deserialize, Serialize};

pub const ENV_PREFIX: &str = "MULKI_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub stream: StreamConfig,
    /// Seed of the generated stream.
    pub stream_seed: u64,
    pub pretrain: PretrainConfig,
    /// Seed of the initial model.
    pub pretrain_seed: u64,
    pub hyper: HyperParams,
    /// Training seeds; `run` and `ablate` repeat over each.
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub variant: Variant,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            stream: StreamConfig::default(),
            stream_seed: 0,
            pretrain: PretrainConfig::default(),
            pretrain_seed: 0,
            hyper: HyperParams::default(),
            seeds: vec![0, 1, 2, 3, 4],
            out: PathBuf::from("runs"),
            variant: Variant::Mulki,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        self.hyper.validate()?;
        self.variant.apply(&self.hyper).validate()?;
        if self.seeds.is_empty() {
            bail!("seeds must not be empty");
        }
        Ok(())
    }

    /// Hyperparameters of the configured variant.
    pub fn effective_hyper(&self) -> HyperParams {
        self.variant.apply(&self.hyper)
    }

    /// Parses `text`, applies `env` overrides and validates.
    pub fn parse<I>(text: &str, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table: toml::Table = text.parse()?;
        apply_overrides(&mut table, env)?;
        let cfg: Self = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            anyhow!("config key `{path}`: {}", e.into_inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` with the process environment as overrides. Without a
    /// path the defaults are used, still subject to overrides.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        let label = path.map(|p| p.display().to_string()).unwrap_or_else(|| "<defaults>".into());
        Self::parse(&text, std::env::vars()).with_context(|| format!("config {label}"))
    }
}

fn apply_overrides<I>(table: &mut toml::Table, env: I) -> Result<()>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut vars: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(|s| s.to_lowercase()).collect();
        if path.iter().any(|p| p.is_empty()) {
            bail!("malformed override variable {key}");
        }
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or(toml::Value::String(raw));
        let (last, parents) = path.split_last().expect("non-empty path");
        let mut t = &mut *table;
        for p in parents {
            t = t
                .entry(p.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| anyhow!("{key}: `{p}` is not a section"))?;
        }
        t.insert(last.clone(), value);
    }
    Ok(())
}

/// The ablation grid. Each variant is a transformation of the configured
/// hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Everything as configured.
    Mulki,
    WoWeWc,
    WoWe,
    /// Classification loss plus feature distillation only; likewise for
    /// the other `Only*` component variants.
    OnlyFd,
    OnlyIrd,
    OnlyIdd,
    /// All three distillation levels, nothing else.
    OnlyMdd,
    /// Plain sequential fine-tuning.
    ContinualFt,
    OnlyC0,
    OnlyPrev,
    Average,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::Mulki,
        Variant::WoWeWc,
        Variant::WoWe,
        Variant::OnlyFd,
        Variant::OnlyIrd,
        Variant::OnlyIdd,
        Variant::OnlyMdd,
        Variant::ContinualFt,
        Variant::OnlyC0,
        Variant::OnlyPrev,
        Variant::Average,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mulki => "mulki",
            Variant::WoWeWc => "wo_we_wc",
            Variant::WoWe => "wo_we",
            Variant::OnlyFd => "only_fd",
            Variant::OnlyIrd => "only_ird",
            Variant::OnlyIdd => "only_idd",
            Variant::OnlyMdd => "only_mdd",
            Variant::ContinualFt => "continual_ft",
            Variant::OnlyC0 => "only_c0",
            Variant::OnlyPrev => "only_prev",
            Variant::Average => "average",
        }
    }

    pub fn apply(self, base: &HyperParams) -> HyperParams {
        let mut h = base.clone();
        let only = |fd, ird, idd| Components {
            fd,
            ird,
            idd,
            ..Components::NONE
        };
        match self {
            Variant::Mulki => {}
            Variant::WoWeWc => {
                h.enable.we = false;
                h.enable.ewe = false;
                h.enable.wc = false;
            }
            Variant::WoWe => {
                h.enable.we = false;
                h.enable.ewe = false;
            }
            Variant::OnlyFd => h.enable = only(true, false, false),
            Variant::OnlyIrd => h.enable = only(false, true, false),
            Variant::OnlyIdd => h.enable = only(false, false, true),
            Variant::OnlyMdd => h.enable = only(true, true, true),
            Variant::ContinualFt => {
                h.lambda1 = 0.0;
                h.lambda2 = 0.0;
                h.lambda_wc = 0.0;
                h.enable = Components::NONE;
            }
            Variant::OnlyC0 => h.weighting = Weighting::OnlyC0,
            Variant::OnlyPrev => h.weighting = Weighting::OnlyPrev,
            Variant::Average => h.weighting = Weighting::Average,
        }
        h
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                anyhow!("unknown variant `{s}`; expected one of {}", names.join(", "))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(ExperimentConfig::parse("", env(&[])).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::parse("[hyper]\nlearning_rate = 0.1\n", env(&[])).unwrap_err();
        assert!(format!("{err:#}").contains("learning_rate"), "{err:#}");
        let err = ExperimentConfig::parse("", env(&[("MULKI_HYPER__BOGUS", "1")])).unwrap_err();
        assert!(format!("{err:#}").contains("bogus"), "{err:#}");
    }

    #[test]
    fn env_overrides_nested_keys() {
        let cfg = ExperimentConfig::parse(
            "seeds = [3]\n[hyper]\nlr = 0.5\n",
            env(&[
                ("MULKI_HYPER__LR", "0.25"),
                ("MULKI_HYPER__ENABLE__WE", "false"),
                ("MULKI_VARIANT", "only_c0"),
                ("MULKI_SEEDS", "[7, 8]"),
                ("OTHER", "x"),
            ]),
        )
        .unwrap();
        assert_eq!(cfg.hyper.lr, 0.25);
        assert!(!cfg.hyper.enable.we);
        assert_eq!(cfg.variant, Variant::OnlyC0);
        assert_eq!(cfg.seeds, vec![7, 8]);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::parse("[stream]\nn_tasks = 1\n", env(&[])).is_err());
        assert!(ExperimentConfig::parse("seeds = []\n", env(&[])).is_err());
        assert!(ExperimentConfig::parse("variant = \"nope\"\n", env(&[])).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        let ft = Variant::ContinualFt.apply(&HyperParams::default());
        assert_eq!(ft, HyperParams::continual_ft());
    }
}
