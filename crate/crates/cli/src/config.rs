use std::path::{Path, PathBuf};

use reslink::data::SplitSpec;
use reslink::optim::{AdamConfig, TrainOptions};
use reslink::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a `train` run needs. Relative paths resolve against the
/// directory holding the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub threshold: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        let train = TrainOptions::default();
        OptimConfig {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            epochs: train.epochs,
            batch_size: train.batch_size,
            threshold: train.threshold,
        }
    }
}

impl OptimConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            threshold: self.threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Class-per-directory image tree.
    pub root: Option<PathBuf>,
    /// Generate data in memory instead of reading `root`.
    pub synthetic: Option<SyntheticConfig>,
    pub split: SplitSpec,
    /// Duplicate minority-class samples until classes balance.
    pub oversample: bool,
    /// Oversample the whole dataset before splitting instead of the training split only.
    pub oversample_before_split: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            synthetic: None,
            split: SplitSpec::default(),
            oversample: true,
            oversample_before_split: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_per_class: usize,
    pub height: usize,
    pub width: usize,
    /// Defaults to the run seed.
    pub seed: Option<u64>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_per_class: 1250,
            height: 64,
            width: 64,
            seed: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(p) = p.as_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        resolve(&mut cfg.out);
        resolve(&mut cfg.data.root);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.optim.adam().validate()?;
        self.data.split.validate()?;
        if self.optim.batch_size == 0 {
            return Err(reslink::Error::Config {
                field: "optim.batch_size".into(),
                reason: "must be >= 1".into(),
            }
            .into());
        }
        match (&self.data.root, &self.data.synthetic) {
            (Some(_), Some(_)) => Err(CliError::config(
                "data: set either `root` or `synthetic`, not both",
            )),
            (None, None) => Err(CliError::config("data: set `root` or `synthetic`")),
            (Some(root), None) if !root.is_dir() => Err(CliError::config(format!(
                "data.root: {} does not exist or is not a directory",
                root.display()
            ))),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg: RunConfig = toml::from_str("seed = 3\n[data.synthetic]\nn_per_class = 10\n").unwrap();
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.optim.epochs, 5);
        assert_eq!(cfg.data.split, SplitSpec::default());
        assert_eq!(cfg.data.synthetic.unwrap().height, 64);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[model]\nfilters = 3\n").is_err());
    }

    #[test]
    fn data_source_must_be_unique_and_exist() {
        let mut cfg = RunConfig::default();
        assert!(cfg.validate().is_err());
        cfg.data.root = Some("/no/such/place".into());
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.code, 2);
        assert!(err.message.contains("/no/such/place"));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "out = \"o\"\n[data]\nroot = \"d\"\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.out.unwrap(), dir.path().join("o"));
        assert_eq!(cfg.data.root.unwrap(), dir.path().join("d"));
    }
}
