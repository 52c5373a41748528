//! Experiment configuration: a TOML file, then `LAMBDA_*` environment
//! variables, then `--set` flags, each overriding the last.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lambda_core::ipule::IpuleConfig;
use lambda_core::kgdata::SynthConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

pub const ENV_PREFIX: &str = "LAMBDA_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: IpuleConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub synth: SynthConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    /// Share of anchors used as labeled positives; 1 labels every anchor.
    pub train_ratio: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            train_ratio: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub csls_k: usize,
    /// Candidates kept per source ranking.
    pub rank_depth: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            csls_k: 10,
            rank_depth: 50,
        }
    }
}

impl ExperimentConfig {
    /// Reads `path` and applies the environment and `sets` overrides.
    pub fn load(path: &Path, sets: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut table: Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let env: Vec<(String, String)> = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        Self::from_table(&mut table, &env, sets)
    }

    pub fn from_table(table: &mut Table, env: &[(String, String)], sets: &[String]) -> Result<Self> {
        for (k, v) in env {
            let key = k[ENV_PREFIX.len()..].to_lowercase();
            if key == "log" {
                continue;
            }
            let path: Vec<&str> = key.split("__").collect();
            set_path(table, &path, parse_value(v)).with_context(|| format!("applying {k}"))?;
        }
        for s in sets {
            let Some((k, v)) = s.split_once('=') else {
                bail!("--set expects key=value, got {s:?}");
            };
            let path: Vec<&str> = k.trim().split('.').collect();
            set_path(table, &path, parse_value(v.trim())).with_context(|| format!("applying --set {s}"))?;
        }
        let mut cfg: Self = Value::Table(table.clone()).try_into().context("invalid configuration")?;
        cfg.model.seed = cfg.seed;
        cfg.synth.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.data.train_ratio > 0.0 && self.data.train_ratio <= 1.0) {
            bail!("data.train_ratio must lie in (0, 1]");
        }
        if self.eval.csls_k == 0 || self.eval.rank_depth == 0 {
            bail!("eval.csls_k and eval.rank_depth must be positive");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }
}

/// A TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(table: &mut Table, path: &[&str], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("split yields one key");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!("{p} is not a section"),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
