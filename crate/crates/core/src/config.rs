//! Run configuration: one TOML file mirroring the module configs, plus
//! dotted `key=value` overrides that win over file values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ais::{BoundingBox, CleaningLimits, ColumnMap, SegmentLimits};
use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::preprocess::{CornerMode, DatasetSpec, SplitFractions};
use crate::synthetic::FleetSpec;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub bbox: BoundingBox,
    pub columns: ColumnMap,
    pub cleaning: CleaningLimits,
    pub segment: SegmentLimits,
    /// Keep at most this many records per vessel type; unset keeps all.
    pub per_type_cap: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub corner_mode: CornerMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed. It replaces `fleet.seed` and `train.seed` and seeds evaluation.
    pub seed: u64,
    pub fleet: FleetSpec,
    pub ingest: IngestConfig,
    pub dataset: DatasetSpec,
    pub split: SplitFractions,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            fleet: FleetSpec::default(),
            ingest: IngestConfig::default(),
            dataset: DatasetSpec::default(),
            split: SplitFractions::default(),
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        };
        cfg.propagate_seed();
        cfg
    }
}

impl RunConfig {
    /// Reads `path` (if any) over the defaults, applies overrides, then
    /// the root seed. Missing keys keep their [`RunConfig::default`] value.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut table = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let file = text.parse::<toml::Table>().map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            merge(&mut table, file);
        }
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let mut cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.propagate_seed();
        cfg.model = cfg.model.with_spec(&cfg.dataset);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn propagate_seed(&mut self) {
        self.fleet.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.fleet.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Sets `a.b.c = value` in `table`. The value is read as a TOML literal
/// and falls back to a bare string, so `eval.corner_mode=or` works.
pub fn apply_override(table: &mut toml::Table, ov: &str) -> Result<()> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{ov}` is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
