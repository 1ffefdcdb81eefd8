//! Run configuration: one TOML file with `[data]`, `[noise]`, `[model]`,
//! `[train]`, `[kernel]` and `[eval]` sections. Every key has a default, so an
//! empty file describes the reference 8-mode ring run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSpec, NoiseSpec};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::kernels::Kernel;
use crate::training::{ModelConfig, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DatasetSpec,
    pub noise: NoiseSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub kernel: Kernel,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.kernel.validate()?;
        self.eval.validate()?;
        if self.noise.dim == 0 || self.model.code_dim == 0 {
            return Err(crate::error::contract("noise and code dimensions must be positive"));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| parse_error(path, text, &e))?;
        Self::from_table(table, path, text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, path)
    }

    /// Loads `path` (or the defaults when `None`) and applies `key=value`
    /// overrides with dotted keys, e.g. `train.learning_rate=1e-4`.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let (text, shown) = match path {
            Some(p) => (std::fs::read_to_string(p)?, p.to_path_buf()),
            None => (String::new(), "<defaults>".into()),
        };
        let mut table: toml::Table = text.parse().map_err(|e| parse_error(&shown, &text, &e))?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        Self::from_table(table, &shown, &text)
    }

    fn from_table(table: toml::Table, path: &Path, text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::Value::Table(table.clone())
            .try_into()
            .map_err(|e: toml::de::Error| {
                // Re-parse from text for a span; overrides have none, so fall
                // back to line 0.
                let spanned = toml::from_str::<RunConfig>(text).err();
                match spanned {
                    Some(se) if se.message() == e.message() => parse_error(path, text, &se),
                    _ => Error::Parse {
                        path: path.to_path_buf(),
                        line: 0,
                        message: e.message().to_string(),
                    },
                }
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical TOML with every default filled in.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration is always representable in TOML")
    }
}

fn parse_error(path: &Path, text: &str, e: &toml::de::Error) -> Error {
    let line = e
        .span()
        .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
        .unwrap_or(0);
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.message().to_string(),
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let bad = |message: String| Error::Parse {
        path: "<override>".into(),
        line: 0,
        message,
    };
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| bad(format!("expected key=value, got `{assignment}`")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(bad(format!("malformed key `{key}`")));
    }
    // Parse the value as a TOML expression; bare words become strings.
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().unwrap();
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| bad(format!("`{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
