use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{GridSpec, TemporalSpec};
use crate::error::{Error, Result};
use crate::eval::AblationAxis;
use crate::impute::IdwConfig;
use crate::ingest::ReadingFormat;
use crate::models::{ForecasterConfig, ModelKind, TrainConfig};
use crate::represent::WindowConfig;
use crate::synth::SynthConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Readings file; when unset, the output of `synth` is used.
    pub readings: Option<PathBuf>,
    /// Optional `row,col,f1..fs` static feature sidecar.
    pub static_features: Option<PathBuf>,
    pub output_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct IngestConfig {
    /// Derive the grid origin and size from the readings (keeping
    /// `grid.cell_size_m`) instead of using `[grid]` as given.
    pub auto_grid: bool,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Fraction of days used for training.
    pub train_ratio: f64,
    /// Core cells moved to the extended set, as `[row, col]`.
    pub holdout_cells: Vec<[usize; 2]>,
    /// Additional randomly chosen core cells moved to the extended set.
    pub random_holdout: usize,
    pub holdout_seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_ratio: 0.8,
            holdout_cells: Vec::new(),
            random_holdout: 0,
            holdout_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Generate synthetic readings first.
    pub synth: bool,
    /// Models trained and evaluated by `pipeline`.
    pub kinds: Vec<ModelKind>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            synth: false,
            kinds: ModelKind::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub axis: Option<AblationAxis>,
    /// Grid values; empty means the axis default.
    pub values: Vec<usize>,
}

/// Whole-run configuration, one TOML section per stage concern.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, overrides `model.seed`, `synth.seed` and `split.holdout_seed`.
    pub seed: Option<u64>,
    pub paths: Paths,
    pub format: ReadingFormat,
    pub ingest: IngestConfig,
    pub grid: GridSpec,
    pub temporal: TemporalSpec,
    pub idw: IdwConfig,
    pub split: SplitConfig,
    pub windows: WindowConfig,
    pub model: ForecasterConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub pipeline: PipelineConfig,
    pub ablate: AblateConfig,
}

impl RunConfig {
    /// Parses TOML text, applies `section.key=value` overrides, and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(s) = cfg.seed {
            cfg.model.seed = s;
            cfg.synth.seed = s;
            cfg.split.holdout_seed = s;
        }
        if cfg.paths.output_dir.as_os_str().is_empty() {
            cfg.paths.output_dir = PathBuf::from("aqcast-out");
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        self.grid.validate().map_err(cfg_err)?;
        self.temporal.validate().map_err(cfg_err)?;
        self.idw.validate().map_err(cfg_err)?;
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if !(self.split.train_ratio > 0.0 && self.split.train_ratio < 1.0) {
            return Err(Error::Config(format!(
                "split.train_ratio must lie in (0, 1), got {}",
                self.split.train_ratio
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Sets `a.b.c = value` in a TOML table; the value is parsed as TOML and
/// falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let spec = spec.strip_prefix("--").unwrap_or(spec);
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` must look like section.key=value")))?;
    let path: Vec<&str> = key.split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut cur = table;
    for p in &path[..path.len() - 1] {
        let next = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

/// Splits `--section.key=value` arguments from the rest of the command line.
/// Returns `(rest, overrides)`.
pub fn split_overrides<I: IntoIterator<Item = String>>(args: I) -> (Vec<String>, Vec<String>) {
    let (ov, rest): (Vec<String>, Vec<String>) = args.into_iter().partition(|a| {
        a.strip_prefix("--")
            .and_then(|s| s.split_once('='))
            .is_some_and(|(k, _)| k.contains('.'))
    });
    (rest, ov)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::from_toml("", &[]).unwrap();
        let again = RunConfig::from_toml(&c.to_toml(), &[]).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.model.layers, 3);
        assert_eq!(c.model.hidden, 64);
    }

    #[test]
    fn unknown_key_rejected() {
        let e = RunConfig::from_toml("[grid]\nn_rowz = 3\n", &[]).unwrap_err();
        assert!(e.to_string().contains("n_rowz"), "{e}");
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::from_toml(
            "[model]\nkind = \"GRU\"\n",
            &[
                "--model.kind=GAT_GRU".into(),
                "--train.adam.lr=0.01".into(),
                "--paths.output_dir=/tmp/x".into(),
                "--seed=4".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.model.kind, ModelKind::GatGru);
        assert_eq!(c.train.adam.lr, 0.01);
        assert_eq!(c.paths.output_dir, PathBuf::from("/tmp/x"));
        assert_eq!(c.model.seed, 4);
    }

    #[test]
    fn split_override_args() {
        let (rest, ov) = split_overrides(
            ["aqcast", "train", "--config", "c.toml", "--grid.n_rows=4"].map(String::from),
        );
        assert_eq!(ov, vec!["--grid.n_rows=4".to_string()]);
        assert_eq!(rest.len(), 4);
    }
}
