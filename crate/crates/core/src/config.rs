//! Run configuration: a TOML document whose every key has a default, with
//! `key.path=value` overrides applied on top.
//!
//! Resolution order, later wins: built-in defaults, the config file, flag
//! overrides. Unknown keys are rejected with their name.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::consistency::ConsistencyConfig;
use crate::error::{Error, Result};
use crate::ocrm::{TrainSetup, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    DidacticOcrm,
    DidacticPpo,
    Ablation,
    Consistency,
    DatasetGen,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::DidacticOcrm,
        Experiment::DidacticPpo,
        Experiment::Ablation,
        Experiment::Consistency,
        Experiment::DatasetGen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::DidacticOcrm => "didactic-ocrm",
            Experiment::DidacticPpo => "didactic-ppo",
            Experiment::Ablation => "ablation",
            Experiment::Consistency => "consistency",
            Experiment::DatasetGen => "dataset-gen",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// The 2-D box task with a Gaussian policy.
    #[default]
    Continuous,
    /// A seeded finite task with a softmax policy.
    Discrete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Discrete task shape; ignored for the continuous task.
    pub task_seed: u64,
    pub n_states: usize,
    pub n_actions: usize,
    pub feature_dim: usize,
    /// Initial standard deviation of the continuous SFT policy.
    pub sft_std: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: TaskKind::Continuous,
            task_seed: 7,
            n_states: 2,
            n_actions: 16,
            feature_dim: 2,
            sft_std: 0.7f64.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Preference pairs drawn from the SFT policy.
    pub n_pairs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { n_pairs: 50_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub variants: Vec<Variant>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            variants: Variant::ALL.to_vec(),
        }
    }
}

fn didactic_train() -> TrainSetup {
    let mut t = TrainSetup::default();
    t.ppo.beta = 0.5;
    t.ppo.policy_optimizer.learning_rate = 1e-3;
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "didactic_train")]
    pub train: TrainSetup,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default)]
    pub consistency: ConsistencyConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/latest")
}

impl RunConfig {
    pub fn new(experiment: Experiment) -> Self {
        RunConfig {
            experiment,
            seed: 0,
            out_dir: default_out_dir(),
            task: TaskConfig::default(),
            data: DataConfig::default(),
            train: didactic_train(),
            ablation: AblationConfig::default(),
            consistency: ConsistencyConfig::default(),
        }
    }

    /// Fully resolved TOML, suitable for replaying the run.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The training setup with the run seed applied.
    pub fn train_setup(&self) -> TrainSetup {
        let mut t = self.train.clone();
        t.seed = self.seed;
        t
    }
}

/// Parses `key.path=value`. The value is read as a TOML literal when it is
/// one (numbers, booleans, arrays, quoted strings) and as a bare string
/// otherwise.
pub fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {raw:?} is not of the form key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("override {raw:?} has an empty key segment")));
    }
    let value = value.trim();
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((path, parsed))
}

fn apply_override(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for (depth, seg) in parents.iter().enumerate() {
        let entry = cur
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            Error::Config(format!("override key {} is not a table", path[..=depth].join(".")))
        })?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Resolves a configuration from optional file text and overrides.
pub fn resolve_config(file_text: Option<&str>, overrides: &[String]) -> Result<RunConfig> {
    let mut table = match file_text {
        Some(text) => text
            .parse::<toml::Table>()
            .map_err(|e| Error::Config(format!("config is not valid TOML: {e}")))?,
        None => toml::Table::new(),
    };
    for raw in overrides {
        let (path, value) = parse_override(raw)?;
        apply_override(&mut table, &path, value)?;
    }
    RunConfig::deserialize(toml::Value::Table(table)).map_err(|e| Error::Config(e.to_string()))
}

/// Reads `path` (if any) and applies `overrides`.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    resolve_config(text.as_deref(), overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_documented_defaults() {
        let cfg = resolve_config(Some(""), &["experiment=didactic-ppo".into()]).unwrap();
        assert_eq!(cfg, RunConfig::new(Experiment::DidacticPpo));
        assert_eq!(cfg.train.schedule.iterations, 3);
        assert_eq!(cfg.train.schedule.samples_per_iteration, 200_000);
        assert_eq!(cfg.train.rm.epochs, 50);
        assert_eq!(cfg.train.models.rm_hidden, vec![4]);
        assert_eq!(cfg.data.n_pairs, 50_000);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = resolve_config(Some("experiment = \"ablation\"\nfoo = 1\n"), &[]).unwrap_err();
        assert!(err.to_string().contains("foo"), "{err}");
        let err = resolve_config(Some("experiment = \"ablation\"\n[train.ppo]\nbogus_rate = 1\n"), &[]).unwrap_err();
        assert!(err.to_string().contains("bogus_rate"), "{err}");
    }

    #[test]
    fn missing_experiment_and_type_mismatch_are_named() {
        let err = resolve_config(Some("seed = 1\n"), &[]).unwrap_err();
        assert!(err.to_string().contains("experiment"), "{err}");
        let err = resolve_config(Some("experiment = \"ablation\"\nseed = \"x\"\n"), &[]).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn flag_overrides_beat_the_file() {
        let file = "experiment = \"didactic-ocrm\"\nseed = 4\n[train.schedule]\niterations = 5\n";
        let cfg = resolve_config(Some(file), &["seed=9".into(), "train.schedule.iterations=2".into(), "out_dir=/tmp/x".into()]).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.schedule.iterations, 2);
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/x"));
        let cfg = resolve_config(Some(file), &[]).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.train.schedule.iterations, 5);
    }

    #[test]
    fn overrides_parse_literals() {
        let cfg = resolve_config(
            None,
            &[
                "experiment=ablation".into(),
                "ablation.variants=[\"ppo\", \"ocrm\"]".into(),
                "train.schedule.iw.clip=2.5".into(),
                "train.ppo.whiten_advantages=false".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.ablation.variants, vec![Variant::Ppo, Variant::Ocrm]);
        assert_eq!(cfg.train.schedule.iw.clip, Some(2.5));
        assert!(!cfg.train.ppo.whiten_advantages);
        assert!(parse_override("no-equals").is_err());
        assert!(resolve_config(None, &["experiment=ablation".into(), "seed.x=1".into()]).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig::new(Experiment::Consistency);
        cfg.train.schedule.iw.clip = Some(3.0);
        let text = cfg.to_toml().unwrap();
        assert_eq!(resolve_config(Some(&text), &[]).unwrap(), cfg);
    }
}
