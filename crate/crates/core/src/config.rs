//! Run configuration: one TOML document covering universe, encoders, loss,
//! training and evaluation, with dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experiment::GapStudyConfig;
use crate::losses::LossConfig;
use crate::synthdata::UniverseConfig;
use crate::training::{EncoderSpec, TrainConfig};

/// Directory searched for config files when no absolute path is given.
pub const CONFIG_DIR_ENV: &str = "FAIRKD_CONFIG_DIR";
pub const DEFAULT_CONFIG_FILE: &str = "fairkd.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub folds: usize,
    pub pairs_per_group: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            folds: 10,
            pairs_per_group: 400,
        }
    }
}

/// Everything a command needs besides its input and output paths. The
/// top-level `seed` replaces the universe and training seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub universe: UniverseConfig,
    pub teacher: EncoderSpec,
    pub student: EncoderSpec,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let study = GapStudyConfig::default();
        RunConfig {
            seed: 0,
            universe: study.universe,
            teacher: study.teacher,
            student: study.student,
            loss: study.loss,
            train: TrainConfig {
                weight_decay: study.student_train.weight_decay,
                ..TrainConfig::default()
            },
            eval: EvalConfig {
                folds: study.folds,
                pairs_per_group: study.pairs_per_group,
            },
        }
    }
}

fn toml_error(e: impl std::fmt::Display) -> Error {
    Error::InvalidConfig(e.to_string().trim().replace('\n', " "))
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrapper {
        v: toml::Value,
    }
    toml::from_str::<Wrapper>(&format!("v = {value}"))
        .map(|w| w.v)
        .unwrap_or_else(|_| toml::Value::String(value.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidConfig(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("`{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Parses a TOML document over the defaults and applies `key=value`
    /// overrides on top.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let doc: toml::Table = toml::from_str(text).map_err(toml_error)?;
        let mut table = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        merge(&mut table, doc);
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("override `{o}` is not key=value")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(toml_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path`, or the default file from [`CONFIG_DIR_ENV`], or the
    /// built-in defaults, then applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let dir = std::env::var_os(CONFIG_DIR_ENV).map(PathBuf::from);
        let resolved = match (path, &dir) {
            (Some(p), Some(d)) if p.is_relative() && !p.exists() => Some(d.join(p)),
            (Some(p), _) => Some(p.to_path_buf()),
            (None, Some(d)) if d.join(DEFAULT_CONFIG_FILE).exists() => {
                Some(d.join(DEFAULT_CONFIG_FILE))
            }
            (None, _) => None,
        };
        let text = match &resolved {
            Some(p) => std::fs::read_to_string(p).map_err(|e| {
                Error::InvalidConfig(format!("cannot read config {}: {e}", p.display()))
            })?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.universe.validate()?;
        self.teacher.validate()?;
        self.student.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.eval.folds < 2 {
            return Err(Error::InvalidConfig(format!(
                "eval.folds must be at least 2, got {}",
                self.eval.folds
            )));
        }
        if self.eval.pairs_per_group % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "eval.pairs_per_group must be even, got {}",
                self.eval.pairs_per_group
            )));
        }
        Ok(())
    }

    pub fn universe_config(&self) -> UniverseConfig {
        UniverseConfig {
            seed: self.seed,
            ..self.universe.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        let cfg = RunConfig::from_toml("", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.epochs, 26);
        assert_eq!(cfg.train.lr_milestones, vec![8, 14, 20, 25]);
    }

    #[test]
    fn overrides_and_round_trip() {
        let cfg = RunConfig::from_toml(
            "seed = 3\n[train]\nepochs = 5\nlr_milestones = [2]\n",
            &[
                "train.base_lr=0.05".into(),
                "loss.margin.kind=arcface".into(),
                "seed=9".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.base_lr, 0.05);
        assert_eq!(cfg.train_config().seed, 9);
        let back = RunConfig::from_toml(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
        assert_ne!(cfg.digest(), RunConfig::default().digest());
    }

    #[test]
    fn errors_name_the_key() {
        let e = RunConfig::from_toml("[train]\nepoch = 5\n", &[]).unwrap_err();
        assert!(e.to_string().contains("epoch"), "{e}");
        let e = RunConfig::from_toml("", &["train.epochs=many".into()]).unwrap_err();
        assert!(e.to_string().contains("epochs"), "{e}");
        assert!(e.is_config_error());
        let e = RunConfig::from_toml("", &["eval.pairs_per_group=7".into()]).unwrap_err();
        assert!(e.to_string().contains("pairs_per_group"), "{e}");
    }
}
