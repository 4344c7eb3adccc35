//! Run configuration: one TOML file plus dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use cmml_core::data::{
    EpisodeParams, MfConfig, ScenarioTaskParams, Setting, SyntheticTaskSpec, UserTaskParams,
};
use cmml_core::metalearn::{BaselineConfig, EvalConfig, LossMode, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::error::{Error, Result};
use crate::io::LabelMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Feed-forward contextual modulation.
    Cmml,
    /// Gradient-adapted backbone.
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    /// Tasks written by `gen-synthetic`.
    Synthetic,
    /// A ratings CSV turned into tasks by `prepare`.
    Ratings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolKind {
    /// Scenario ranking for scenario tasks, rating metrics for ratings
    /// users, regression metrics for synthetic tasks.
    Auto,
    Scenario,
    Rating,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub ratings: PathBuf,
    pub label_mode: LabelMode,
    pub setting: Setting,
    /// Embed user ids; unset means only in the scenario setting.
    pub user_field: Option<bool>,
    pub user_dim: usize,
    pub item_dim: usize,
    /// Factorize the ratings during `prepare` and train on the frozen
    /// tables.
    pub pretrain: bool,
    pub protocol: ProtocolKind,
    /// Share of meta-train tasks held out for checkpoint selection.
    pub validation_fraction: f64,
    /// Stop after this many epochs without a validation improvement; 0
    /// never stops early.
    pub patience: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            ratings: PathBuf::from("ratings.csv"),
            label_mode: LabelMode::Rating,
            setting: Setting::User,
            user_field: None,
            user_dim: 32,
            item_dim: 32,
            pretrain: false,
            protocol: ProtocolKind::Auto,
            validation_fraction: 0.1,
            patience: 0,
        }
    }
}

impl DataConfig {
    pub fn uses_user_field(&self) -> bool {
        self.user_field.unwrap_or(self.setting == Setting::Scenario)
    }

    pub fn protocol(&self) -> ProtocolKind {
        match (self.protocol, self.setting, self.source) {
            (ProtocolKind::Auto, Setting::Scenario, _) => ProtocolKind::Scenario,
            (ProtocolKind::Auto, Setting::User, DataSource::Synthetic) => ProtocolKind::Regression,
            (ProtocolKind::Auto, Setting::User, DataSource::Ratings) => ProtocolKind::Rating,
            (p, _, _) => p,
        }
    }
}

/// Everything a command needs besides its name. The top-level `seed`
/// replaces the seed of every section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub method: Method,
    pub data: DataConfig,
    pub synthetic: SyntheticTaskSpec,
    pub scenario: ScenarioTaskParams,
    pub user: UserTaskParams,
    pub episode: EpisodeParams,
    pub mf: MfConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub baseline: BaselineConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            method: Method::Cmml,
            data: DataConfig::default(),
            synthetic: SyntheticTaskSpec::default(),
            scenario: ScenarioTaskParams::default(),
            user: UserTaskParams::default(),
            episode: EpisodeParams::default(),
            mf: MfConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                loss: LossMode::Mse,
                ..TrainConfig::default()
            },
            baseline: BaselineConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a config file, then applies `overrides` (dotted key, raw
    /// value) on top.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        let file: toml::Table = toml::from_str(&text).map_err(|e| {
            Error::Config(format!(
                "{}: {e}",
                path.map_or("<defaults>".into(), |p| p.display().to_string())
            ))
        })?;
        let mut table = toml::Table::try_from(RunConfig::default())
            .map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut table, file);
        for (key, value) in overrides {
            set_dotted(&mut table, key, value)?;
        }
        let mut cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.sync_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a complete config, as written by [`RunConfig::to_toml`].
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.sync_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn sync_seeds(&mut self) {
        let s = self.seed;
        self.synthetic.seed = s;
        self.scenario.seed = s;
        self.user.seed = s;
        self.mf.seed = s;
        self.train.seed = s;
        self.eval.seed = s;
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synthetic.validate()?;
        if self.baseline.inner_steps == 0 {
            return Err(Error::Config(
                "baseline.inner_steps must be at least 1".into(),
            ));
        }
        if self.model.backbone.hidden.contains(&0) || self.model.backbone.hidden.is_empty() {
            return Err(Error::Config(
                "model.backbone.hidden sizes must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.data.validation_fraction) {
            return Err(Error::Config(
                "data.validation_fraction must lie in [0, 1)".into(),
            ));
        }
        if self.train.loss == LossMode::Hinge && self.data.setting == Setting::User {
            return Err(Error::Config(
                "hinge loss needs scenario tasks; use train.loss = \"mse\"".into(),
            ));
        }
        if self.data.source == DataSource::Synthetic && self.data.setting == Setting::Scenario {
            return Err(Error::Config(
                "synthetic tasks are user tasks; set data.setting = \"user\"".into(),
            ));
        }
        self.bench.validate()
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

/// Section-wise overlay, so a partial section keeps the run defaults of
/// the keys it omits.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `a.b.c = value`, creating intermediate tables.
pub fn set_dotted(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut node = table;
    for p in path {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: `{p}` is not a section")))?;
    }
    node.insert(last.to_string(), parse_value(raw));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use cmml_core::context::EncoderVariant;
    use cmml_core::modulation::ModulationVariant;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = RunConfig::load(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[train]\nepochz = 3\n").unwrap();
        let err = RunConfig::load(Some(&path), &[]).unwrap_err();
        assert!(err.to_string().contains("epochz"), "{err}");
        assert!(RunConfig::load(None, &[("model.colour".into(), "1".into())]).is_err());
    }

    #[test]
    fn overrides_beat_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 4\n[train]\nepochs = 7\nbatch_size = 3\n[model.encoder]\nvariant = \"pooling-max\"\n").unwrap();
        let cfg = RunConfig::load(
            Some(&path),
            &[
                ("train.epochs".into(), "9".into()),
                ("model.modulation.variant".into(), "soft".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 9);
        assert_eq!(cfg.train.batch_size, 3);
        assert_eq!(cfg.train.seed, 4);
        assert_eq!(cfg.model.encoder.variant, EncoderVariant::PoolingMax);
        assert_eq!(cfg.model.modulation.variant, ModulationVariant::SoftModular);
        assert_eq!(cfg.model.backbone.hidden, vec![64, 64, 64]);
    }

    #[test]
    fn parse_errors_name_the_location() {
        let err = RunConfig::load(None, &[("train.epochs".into(), "\"many\"".into())])
            .unwrap_err()
            .to_string();
        assert!(err.contains("epochs") || err.contains("line 2"), "{err}");
    }

    #[test]
    fn override_values_parse_as_toml_first() {
        let mut t = toml::Table::new();
        set_dotted(&mut t, "a.b", "[1, 2]").unwrap();
        set_dotted(&mut t, "a.c", "word").unwrap();
        assert_eq!(t["a"]["b"], toml::Value::Array(vec![1.into(), 2.into()]));
        assert_eq!(t["a"]["c"], toml::Value::String("word".into()));
        assert!(set_dotted(&mut t, "a.b.c", "1").is_err());
    }

    #[test]
    fn hinge_on_user_tasks_is_rejected() {
        assert!(RunConfig::load(None, &[("train.loss".into(), "hinge".into())]).is_err());
    }
}
