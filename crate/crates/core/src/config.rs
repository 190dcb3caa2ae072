//! Run configuration: one TOML file with `model`, `train`, `degradation`,
//! `loss`, `data`, `eval` and `paths` sections, plus `section.key=value`
//! overrides applied on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::degradation::DegradationRanges;
use crate::error::{Error, Result};
use crate::evaluation::BenchmarkGrid;
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Folder of training PNGs. Synthetic images are used when unset.
    pub train_dir: Option<PathBuf>,
    /// Precomputed kernel projection; computed from the seed when unset.
    pub pca: Option<PathBuf>,
    /// Checkpoint to resume from or to evaluate.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic_count: usize,
    pub synthetic_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic_count: 100,
            synthetic_size: 96,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub degradation: DegradationRanges,
    pub loss: LossWeights,
    pub data: DataConfig,
    pub eval: BenchmarkGrid,
    pub paths: Paths,
}

fn cfg_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// `a.b.c=value`, with `value` read as a TOML literal and taken as a bare
/// string when it does not parse as one.
fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| cfg_err(format!("override `{spec}` is not key=value")))?;
    let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(cfg_err(format!("bad override key `{path}`")));
    }
    let mut table = root;
    for k in &keys[..keys.len() - 1] {
        table = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| cfg_err(format!("`{k}` in `{path}` is not a section")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Parses `text` (possibly empty) over the defaults, then applies
    /// `overrides` in order.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        Self::layered(&Self::default(), text, overrides)
    }

    /// Like [`RunConfig::from_toml_str`] with `base` in place of the defaults.
    pub fn layered(base: &Self, text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = toml::from_str(&base.to_toml()?).map_err(cfg_err)?;
        let mut user: toml::Table = toml::from_str(text).map_err(cfg_err)?;
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        // The degradation scale follows the model unless set on its own.
        let scale = user.get("model").and_then(|m| m.get("scale")).cloned();
        if let Some(scale) = scale {
            let deg = user
                .entry("degradation")
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            if let Some(deg) = deg.as_table_mut() {
                deg.entry("scale").or_insert(scale);
            }
        }
        merge(&mut root, user);
        let cfg: Self = toml::Value::Table(root).try_into().map_err(cfg_err)?;
        Ok(cfg)
    }

    pub fn load(base: &Self, path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| cfg_err(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::layered(base, &text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(cfg_err)
    }

    /// The training config with the degradation and loss sections folded in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            ranges: self.degradation,
            weights: self.loss.clone(),
            ..self.train.clone()
        }
    }

    /// Checks the model and training sections; failures are [`Error::Config`].
    pub fn validate(&self) -> Result<()> {
        self.model
            .validate()
            .and_then(|_| self.train_config().validate(&self.model))
            .map_err(|e| match e {
                Error::InvalidArgument(m) => Error::Config(m),
                e => e,
            })
    }

    /// A small, fast configuration: tiny network at x2, 5x5 kernels, short run.
    pub fn desk(scale: usize) -> Self {
        let model = ModelConfig::tiny(scale);
        Self {
            degradation: DegradationRanges {
                scale,
                kernel_size: model.blur_kernel_size,
                ..DegradationRanges::default()
            },
            train: TrainConfig {
                batch: 4,
                lr_patch: 16,
                total_iters: 2000,
                base_lr: 2e-3,
                halve_every: 4000,
                checkpoint_every: 500,
                log_every: 50,
                finetune_iters: 500,
                ..TrainConfig::default()
            },
            data: DataConfig {
                synthetic_count: 100,
                synthetic_size: 64,
            },
            eval: BenchmarkGrid {
                kernel_size: model.blur_kernel_size,
                ..BenchmarkGrid::default()
            },
            model,
            ..Self::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_full_size_settings() {
        let c = RunConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(c.train.batch, 32);
        assert_eq!(c.train.lr_patch, 48);
        assert_eq!(c.train.total_iters, 500_000);
        assert_eq!(c.loss.dr, 10.0);
        assert_eq!(c.model.channels, 64);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn degradation_scale_follows_the_model() {
        let c = RunConfig::from_toml_str("[model]\nscale = 2\n", &[]).unwrap();
        assert_eq!(c.degradation.scale, 2);
        assert!(c.validate().is_ok());
        let c = RunConfig::from_toml_str("", &["model.scale=3".into()]).unwrap();
        assert_eq!(c.degradation.scale, 3);
        let c = RunConfig::from_toml_str("[model]\nscale = 2\n[degradation]\nscale = 4\n", &[]).unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_win_over_file_values() {
        let text = "[train]\ntotal_iters = 10\nseed = 3\n";
        let c = RunConfig::from_toml_str(text, &["train.total_iters=2000".into(), "loss.stop_grad_estimates=true".into()]).unwrap();
        assert_eq!(c.train.total_iters, 2000);
        assert_eq!(c.train.seed, 3);
        assert!(c.loss.stop_grad_estimates);
        let c = RunConfig::from_toml_str("", &["model.mnm_mode=noise_scalar".into(), "paths.train_dir=/tmp/x".into()]).unwrap();
        assert_eq!(c.model.mnm_mode, crate::model::MnmMode::NoiseScalar);
        assert_eq!(c.paths.train_dir.as_deref(), Some(Path::new("/tmp/x")));
        let c = RunConfig::from_toml_str("", &["degradation.noise_level=[0.0, 0.0]".into()]).unwrap();
        assert_eq!(c.degradation.noise_level, (0.0, 0.0));
    }

    #[test]
    fn unknown_keys_and_bad_overrides_are_errors() {
        assert!(RunConfig::from_toml_str("[train]\ntotal_iter = 3\n", &[]).is_err());
        assert!(RunConfig::from_toml_str("", &["train.total_iters".into()]).is_err());
        assert!(RunConfig::from_toml_str("", &["train.total_iters=abc".into()]).is_err());
        assert!(RunConfig::from_toml_str("", &["train.batch.x=1".into()]).is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let c = RunConfig::desk(2);
        assert!(c.validate().is_ok());
        let back = RunConfig::from_toml_str(&c.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(back, c);
        let over = RunConfig::layered(&c, "[train]\nbatch = 2\n", &[]).unwrap();
        assert_eq!(over.train.batch, 2);
        assert_eq!(over.model, c.model);
    }
}
