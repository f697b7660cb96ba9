//! The TOML run configuration shared by every command.
//!
//! Window length, codebook size and raster size each appear once (in
//! `[dataset]` and `[[scenario]]`) and are copied into the model
//! configuration, so a model can never be built for data of another shape.

use std::path::{Path, PathBuf};

use blockwatch_core::dataset::DatasetConfig;
use blockwatch_core::model::{ModelConfig, ModelKind};
use blockwatch_core::pipeline::TrainConfig;
use blockwatch_core::scene::ScenarioConfig;
use blockwatch_core::wireless::OfdmConfig;
use blockwatch_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Seconds between consecutive triples in the default scenario.
pub const DEFAULT_DT: f64 = 0.2;
pub const DEFAULT_RASTER: (usize, usize) = (32, 16);

/// The scenario used when a config file names none.
pub fn default_scenario() -> ScenarioConfig {
    ScenarioConfig {
        dt: DEFAULT_DT,
        raster_width: DEFAULT_RASTER.0,
        raster_height: DEFAULT_RASTER.1,
        ..Default::default()
    }
}

/// Architecture knobs; the data-shape fields of [`ModelConfig`] are filled
/// in from the dataset and scenario blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embedding_dim: usize,
    pub hidden: usize,
    pub conv_channels: usize,
    pub kernel: usize,
    pub pool: usize,
    pub dense_hidden: usize,
    pub embedding_norm: bool,
    pub table_seed: u64,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            embedding_dim: m.embedding_dim,
            hidden: m.hidden,
            conv_channels: m.conv_channels,
            kernel: m.kernel,
            pool: m.pool,
            dense_hidden: m.dense_hidden,
            embedding_norm: m.embedding_norm,
            table_seed: m.table_seed,
            init_seed: m.init_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub dropout: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: t.seed,
            eval_every: t.eval_every,
            dropout: ModelConfig::default().dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory holding datasets, checkpoints and reports.
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { out: PathBuf::from("runs/default") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Each entry overrides fields of [`default_scenario`].
    #[serde(deserialize_with = "scenarios_over_default")]
    pub scenario: Vec<ScenarioConfig>,
    pub wireless: OfdmConfig,
    pub dataset: DatasetConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub paths: Paths,
}

fn scenarios_over_default<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<ScenarioConfig>, D::Error> {
    use serde::de::Error as _;
    let entries = Vec::<toml::Table>::deserialize(d)?;
    let base = toml::Table::try_from(default_scenario()).map_err(D::Error::custom)?;
    entries
        .into_iter()
        .map(|entry| {
            let mut merged = base.clone();
            merged.extend(entry);
            merged.try_into().map_err(|e: toml::de::Error| D::Error::custom(e.message()))
        })
        .collect()
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: vec![default_scenario()],
            wireless: OfdmConfig::default(),
            dataset: DatasetConfig::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates a config file. Parse errors carry the line and
    /// column; semantic errors carry the offending field.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config { field, msg } if field.is_empty() => Error::config(path.display().to_string(), msg),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config("", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.scenario.first().ok_or_else(|| Error::config("scenario", "at least one scenario is required"))?;
        for (i, s) in self.scenario.iter().enumerate() {
            s.validate()?;
            if (s.raster_width, s.raster_height) != (first.raster_width, first.raster_height) {
                return Err(Error::config(format!("scenario[{i}].raster_width"), "all scenarios must share one raster size"));
            }
            if self.scenario[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::config(format!("scenario[{i}].name"), format!("duplicate scenario name `{}`", s.name)));
            }
        }
        self.wireless.validate()?;
        self.dataset.validate()?;
        self.train_config().validate()?;
        for kind in [ModelKind::Vision, ModelKind::Baseline] {
            self.model_config(kind).validate()?;
        }
        Ok(())
    }

    pub fn model_config(&self, kind: ModelKind) -> ModelConfig {
        let m = &self.model;
        let raster = self.scenario.first().map_or(DEFAULT_RASTER, |s| (s.raster_width, s.raster_height));
        ModelConfig {
            kind,
            window: self.dataset.window,
            embedding_dim: m.embedding_dim,
            hidden: m.hidden,
            dropout: self.train.dropout,
            beams: self.dataset.beams,
            width: raster.0,
            height: raster.1,
            conv_channels: m.conv_channels,
            kernel: m.kernel,
            pool: m.pool,
            dense_hidden: m.dense_hidden,
            embedding_norm: m.embedding_norm,
            table_seed: m.table_seed,
            init_seed: m.init_seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig { lr: t.lr, batch_size: t.batch_size, epochs: t.epochs, seed: t.seed, eval_every: t.eval_every }
    }

    pub fn train_path(&self) -> PathBuf {
        self.paths.out.join("train.bwds")
    }

    pub fn val_path(&self) -> PathBuf {
        self.paths.out.join("val.bwds")
    }

    pub fn checkpoint_path(&self, kind: ModelKind) -> PathBuf {
        self.paths.out.join(format!("{}.bwck", kind.name()))
    }

    pub fn curve_path(&self, kind: ModelKind) -> PathBuf {
        self.paths.out.join(format!("{}_curve.csv", kind.name()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(RunConfig::parse("").unwrap(), cfg);
    }

    #[test]
    fn dropout_lives_in_the_train_block() {
        let cfg = RunConfig::parse("[train]\ndropout = 0.5\n").unwrap();
        assert_eq!(cfg.model_config(ModelKind::Vision).dropout, 0.5);
    }

    #[test]
    fn parse_errors_point_at_the_line() {
        let err = RunConfig::parse("[dataset]\nepisodes = 10\nwindow = \"eight\"\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = RunConfig::parse("[dataset]\nepisode = 10\n").unwrap_err();
        assert!(err.to_string().contains("episode"), "{err}");
    }

    #[test]
    fn scenario_entries_start_from_the_run_default() {
        let cfg = RunConfig::parse("[[scenario]]\nname = \"busy\"\nblockers = { min = 3, max = 4 }\n").unwrap();
        let s = &cfg.scenario[0];
        assert_eq!((s.name.as_str(), s.blockers.max, s.dt), ("busy", 4, DEFAULT_DT));
        assert_eq!((s.raster_width, s.raster_height), DEFAULT_RASTER);
        let err = RunConfig::parse("[[scenario]]\nblokers = 2\n").unwrap_err();
        assert!(err.to_string().contains("blokers"), "{err}");
    }

    #[test]
    fn semantic_errors_name_the_field() {
        let err = RunConfig::parse("[dataset]\nepisodes = 0\n").unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "dataset.episodes"), "{err}");
        let err = RunConfig::parse("[dataset]\nwindow = 13\n").unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "dataset.episode_length"), "{err}");
        let two = "[[scenario]]\nname = \"a\"\n[[scenario]]\nname = \"b\"\nraster_width = 64\n";
        let err = RunConfig::parse(two).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "scenario[1].raster_width"), "{err}");
    }
}
