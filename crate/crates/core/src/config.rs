//! Run configuration file: TOML with `[model]`, `[train]`, `[eval]`, and
//! `[paths]` sections. Unknown keys anywhere are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::ChannelKind;
use crate::codec::ModelConfig;
use crate::error::{Error, Result};
use crate::image::{load_dir, synthetic_dataset};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub channel: ChannelKind,
    pub snrs: Vec<f64>,
    pub trials: usize,
    #[serde(default)]
    pub block_len: Option<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            channel: ChannelKind::Awgn,
            snrs: vec![1.0, 4.0, 7.0, 10.0, 13.0, 16.0, 19.0],
            trials: 1,
            block_len: None,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory of `.ppm` training images; absent means the synthetic corpus.
    #[serde(default)]
    pub train_dir: Option<PathBuf>,
    #[serde(default)]
    pub test_dir: Option<PathBuf>,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            train_dir: None,
            test_dir: None,
            synthetic_train: 16,
            synthetic_test: 8,
            checkpoint: PathBuf::from("model.mjsc"),
            log: PathBuf::from("train.log"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// Seed offset separating the synthetic test split from the training split.
const TEST_SPLIT_SEED: u64 = 0x7e57;

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.trials == 0 {
            return Err(Error::Config("eval trials must be at least 1".into()));
        }
        if self.eval.snrs.iter().any(|s| s.is_nan()) {
            return Err(Error::Config("eval SNRs must be numbers".into()));
        }
        if self.eval.block_len == Some(0) {
            return Err(Error::Config("eval block_len must be positive".into()));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always serializable")
    }

    /// Overrides every seed in the file.
    pub fn reseed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
    }

    fn dataset(&self, dir: &Option<PathBuf>, count: usize, seed: u64) -> Result<Vec<Tensor>> {
        let images = match dir {
            Some(d) => load_dir(d)?,
            None => synthetic_dataset(self.model.image_height, self.model.image_width, count, seed),
        };
        if images.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        let want = [3, self.model.image_height, self.model.image_width];
        if let Some(bad) = images.iter().find(|t| t.shape() != want) {
            return Err(Error::Config(format!("image of shape {:?} does not match model input {want:?}", bad.shape())));
        }
        Ok(images)
    }

    pub fn train_set(&self) -> Result<Vec<Tensor>> {
        self.dataset(&self.paths.train_dir, self.paths.synthetic_train, self.train.seed)
    }

    pub fn test_set(&self) -> Result<Vec<Tensor>> {
        self.dataset(&self.paths.test_dir, self.paths.synthetic_test, self.eval.seed ^ TEST_SPLIT_SEED)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        let text = c.to_toml();
        assert!(text.contains("[model]") && text.contains("[paths]"));
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let text = RunConfig::default().to_toml().replace("[train]\n", "[train]\nlearning_rate = 0.1\n");
        assert!(matches!(RunConfig::parse(&text), Err(Error::Config(_))));
        let text = format!("{}\n[extra]\nx = 1\n", RunConfig::default().to_toml());
        assert!(RunConfig::parse(&text).is_err());
    }

    #[test]
    fn invalid_values_rejected_before_compute() {
        let mut c = RunConfig::default();
        c.train.batch = 0;
        assert!(RunConfig::parse(&c.to_toml()).is_err());
        let mut c = RunConfig::default();
        c.model.csi.interval = 0;
        assert!(RunConfig::parse(&c.to_toml()).is_err());
    }

    #[test]
    fn missing_dataset_dir_is_an_error() {
        let mut c = RunConfig::default();
        c.paths.train_dir = Some(PathBuf::from("/definitely/not/here"));
        assert!(matches!(c.train_set(), Err(Error::Io(_))));
    }

    #[test]
    fn splits_differ() {
        let c = RunConfig::default();
        assert_ne!(c.train_set().unwrap()[0], c.test_set().unwrap()[0]);
    }
}
