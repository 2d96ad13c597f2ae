//! Run configuration: TOML parsing with dotted-key overrides, validation and
//! digests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::densities::{GaussianPreset, Range};
use crate::embedding::Thresholds;
use crate::error::{Error, Result};
use crate::experiments::divfield::DivfieldConfig;
use crate::experiments::lorenz::LorenzConfig;
use crate::experiments::map1d::Map1dConfig;
use crate::experiments::ExperimentKind;
use crate::transport::FlowConfig;

/// Name of the resolved configuration written into every run directory.
pub const RESOLVED_FILE: &str = "config.resolved";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Usually chosen by the subcommand rather than the file.
    pub experiment: Option<ExperimentKind>,
    /// Root seed; trial `k` uses `seed + k`.
    pub seed: u64,
    pub trials: usize,
    /// Trials run concurrently. Results do not depend on it.
    pub workers: usize,
    pub out: PathBuf,
    /// Iterations per loss-curve window.
    pub record_every: usize,
    pub map1d: Map1dConfig,
    pub lorenz: LorenzConfig,
    pub divfield: DivfieldConfig,
    pub embedding: Thresholds,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: None,
            seed: 0,
            trials: 1,
            workers: 1,
            out: PathBuf::from("runs"),
            record_every: 100,
            map1d: Map1dConfig::default(),
            lorenz: LorenzConfig::default(),
            divfield: DivfieldConfig::default(),
            embedding: Thresholds::default(),
        }
    }
}

fn config_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(config_err(
            key,
            format!("must be a positive finite number, got {v}"),
        ))
    }
}

fn at_least(key: &str, v: usize, min: usize) -> Result<()> {
    if v >= min {
        Ok(())
    } else {
        Err(config_err(key, format!("must be at least {min}, got {v}")))
    }
}

fn range(key: &str, r: Range, lower: Option<f64>) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
        return Err(config_err(
            key,
            format!("must be a finite interval [lo, hi], got {r:?}"),
        ));
    }
    if let Some(min) = lower {
        if r[0] <= min {
            return Err(config_err(
                key,
                format!("lower end must exceed {min}, got {}", r[0]),
            ));
        }
    }
    Ok(())
}

fn hidden(key: &str, h: &[usize]) -> Result<()> {
    if h.is_empty() || h.contains(&0) {
        Err(config_err(
            key,
            format!("needs at least one layer, all widths positive, got {h:?}"),
        ))
    } else {
        Ok(())
    }
}

fn gaussian_preset(key: &str, p: &GaussianPreset, dim: usize) -> Result<()> {
    if p.mean.len() != dim {
        return Err(config_err(
            &format!("{key}.mean"),
            format!("needs {dim} ranges, got {}", p.mean.len()),
        ));
    }
    for (k, r) in p.mean.iter().enumerate() {
        range(&format!("{key}.mean[{k}]"), *r, None)?;
    }
    range(&format!("{key}.sigma"), p.sigma, Some(0.0))
}

impl RunConfig {
    /// Checks every constraint, naming the first offending key.
    pub fn validate(&self) -> Result<()> {
        at_least("trials", self.trials, 1)?;
        at_least("workers", self.workers, 1)?;
        at_least("record_every", self.record_every, 1)?;

        let c = &self.map1d;
        at_least("map1d.m", c.m, 1)?;
        at_least("map1d.samples_per_density", c.samples_per_density, 1)?;
        hidden("map1d.hidden", &c.hidden)?;
        positive("map1d.lr", c.lr)?;
        at_least("map1d.iterations", c.iterations, 1)?;
        at_least("map1d.eval_grid", c.eval_grid, 1)?;
        range(
            "map1d.preset.concentration",
            c.preset.concentration,
            Some(0.0),
        )?;
        range("map1d.preset.center", c.preset.center, None)?;

        let c = &self.lorenz;
        positive("lorenz.sigma", c.sigma)?;
        positive("lorenz.rho", c.rho)?;
        positive("lorenz.beta", c.beta)?;
        at_least("lorenz.m", c.m, 1)?;
        positive("lorenz.dt", c.dt)?;
        positive("lorenz.substep", c.substep)?;
        FlowConfig {
            horizon: c.dt,
            substep: c.substep,
        }
        .validate()
        .map_err(|e| config_err("lorenz.substep", e.to_string()))?;
        at_least("lorenz.particles", c.particles, 2)?;
        at_least("lorenz.batch", c.batch, 1)?;
        hidden("lorenz.hidden", &c.hidden)?;
        positive("lorenz.lr", c.lr)?;
        at_least("lorenz.iterations", c.iterations, 1)?;
        gaussian_preset("lorenz.initial", &c.initial, 3)?;

        let c = &self.divfield;
        at_least("divfield.m", c.m, 1)?;
        at_least("divfield.m_max", c.m_max, 1)?;
        at_least("divfield.repeats", c.repeats, 1)?;
        at_least("divfield.batch", c.batch, 1)?;
        hidden("divfield.hidden", &c.hidden)?;
        positive("divfield.lr", c.lr)?;
        at_least("divfield.iterations", c.iterations, 1)?;
        at_least("divfield.eval_grid", c.eval_grid, 1)?;
        gaussian_preset("divfield.preset", &c.preset, 2)?;

        positive("embedding.sep_threshold", self.embedding.sep_threshold)?;
        positive("embedding.sv_threshold", self.embedding.sv_threshold)?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of everything that affects a
    /// trial's results, plus the trial seed. `out` and `workers` are left
    /// out; key order in the source file cannot matter.
    pub fn digest(&self, trial_seed: u64) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        let map = value.as_object_mut().expect("config is an object");
        map.remove("out");
        map.remove("workers");
        map.insert("trial_seed".into(), trial_seed.into());
        let canonical = serde_json::to_string(&value).expect("json value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// The fully-defaulted configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(RESOLVED_FILE), self.to_toml())?;
        Ok(())
    }
}

/// Splits `key=value`. The value is read as a TOML value, falling back to a
/// bare string.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| config_err(arg, "override must look like key=value"))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(config_err(arg, "override key is empty"));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

fn override_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("single key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn insert_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut cur = table;
    for (depth, p) in parts.iter().enumerate() {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(&parts[..=depth].join("."), "is not a table"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Builds a validated config from TOML text and `key=value` overrides.
/// Overrides win over the text.
pub fn parse_config_str(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| config_err("<file>", e.message().to_string()))?;
    for (k, v) in overrides {
        insert_dotted(&mut table, k, override_value(v))?;
    }
    let cfg: RunConfig =
        serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            config_err(&path, e.into_inner().to_string())
        })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads an optional config file and applies overrides. Without a file every
/// field takes its default.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| config_err("<file>", format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    parse_config_str(&text, overrides)
}
