//! Experiment configuration loaded from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cae::{CaeSpec, CaeTrainConfig};
use crate::error::{Error, Result};
use crate::mtrnn::{Connectivity, IoLayout, MtrnnSpec, MtrnnTrainConfig};
use crate::taskworld::{EpisodeSpec, StepCounts, POSITION_COUNT};

/// Overrides `artifacts` when set.
pub const ARTIFACTS_ENV: &str = "SWITCHFOLD_ARTIFACTS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub artifacts: PathBuf,
    pub steps: StepCounts,
    pub data: DataConfig,
    pub cae: CaeStageConfig,
    pub mtrnn: MtrnnStageConfig,
    pub rollout: RolloutConfig,
    pub serve: ServeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            artifacts: PathBuf::from("artifacts"),
            steps: StepCounts::DESK,
            data: DataConfig::default(),
            cae: CaeStageConfig::default(),
            mtrnn: MtrnnStageConfig::default(),
            rollout: RolloutConfig::default(),
            serve: ServeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_patterns: Vec<u8>,
    pub train_positions: Vec<u8>,
    pub test_patterns: Vec<u8>,
    pub test_positions: Vec<u8>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_patterns: vec![1, 2, 3],
            train_positions: vec![1, 3, 4, 6],
            test_patterns: vec![4],
            test_positions: vec![2, 5],
        }
    }
}

impl DataConfig {
    fn episodes(patterns: &[u8], positions: &[u8]) -> Result<Vec<EpisodeSpec>> {
        let mut out = Vec::with_capacity(patterns.len() * positions.len());
        for &p in patterns {
            for &pos in positions {
                out.push(EpisodeSpec::pattern(p, pos)?);
            }
        }
        Ok(out)
    }

    /// Pattern-major order: all positions of the first pattern, then the next.
    pub fn training_episodes(&self) -> Result<Vec<EpisodeSpec>> {
        Self::episodes(&self.train_patterns, &self.train_positions)
    }

    pub fn test_episodes(&self) -> Result<Vec<EpisodeSpec>> {
        Self::episodes(&self.test_patterns, &self.test_positions)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaeStageConfig {
    pub spec: CaeSpec,
    pub train: CaeTrainConfig,
    /// Use every n-th frame of each training episode.
    pub frame_stride: usize,
    /// Within the strided frames, every n-th one is held out for evaluation.
    pub holdout_every: usize,
}

impl Default for CaeStageConfig {
    fn default() -> Self {
        Self {
            spec: CaeSpec::small(),
            train: CaeTrainConfig::default(),
            frame_stride: 2,
            holdout_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MtrnnStageConfig {
    pub cf_count: usize,
    pub cs_count: usize,
    pub tau_io: f64,
    pub tau_cf: f64,
    pub tau_cs: f64,
    pub connectivity: Connectivity,
    pub train: MtrnnTrainConfig,
    /// Write an intermediate checkpoint every n epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for MtrnnStageConfig {
    fn default() -> Self {
        Self {
            cf_count: 80,
            cs_count: 20,
            tau_io: 1.0,
            tau_cf: 5.0,
            tau_cs: 70.0,
            connectivity: Connectivity::STANDARD,
            train: MtrnnTrainConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl MtrnnStageConfig {
    pub fn spec(&self, layout: IoLayout) -> Result<MtrnnSpec> {
        let mut spec = MtrnnSpec::new(
            layout.total(),
            self.cf_count,
            self.cs_count,
            [self.tau_io, self.tau_cf, self.tau_cs],
        )?;
        spec.connectivity = self.connectivity;
        Ok(spec)
    }
}

/// How the slow-context start state is chosen for a rollout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cs0Policy {
    /// Element-wise mean of the trained bank.
    Mean,
    /// The bank entry of one training sequence.
    Entry(usize),
    Zeros,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    /// Standard deviation of Gaussian noise added to normalized features.
    pub feature_jitter: f64,
    /// Number of noise seeds per test episode.
    pub trials: u64,
    pub cs0: Cs0Policy,
    /// Interactive sources give up after this many seconds (0 waits forever).
    pub instruction_timeout_secs: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            feature_jitter: 0.01,
            trials: 10,
            cs0: Cs0Policy::Mean,
            instruction_timeout_secs: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    /// Attach a PNG frame to every n-th state message (0 disables frames).
    pub frame_stride: usize,
    /// Sessions without a client are dropped after this many seconds.
    pub reconnect_timeout_secs: u64,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            frame_stride: 1,
            reconnect_timeout_secs: 60,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies [`ARTIFACTS_ENV`] if it is set and non-empty.
    pub fn apply_env(&mut self) {
        if let Some(root) = std::env::var_os(ARTIFACTS_ENV).filter(|v| !v.is_empty()) {
            self.artifacts = PathBuf::from(root);
        }
    }

    pub fn layout(&self) -> IoLayout {
        IoLayout {
            motor: 3,
            features: self.cae.spec.feature_dim,
            instruction: 3,
        }
    }

    pub fn mtrnn_spec(&self) -> Result<MtrnnSpec> {
        self.mtrnn.spec(self.layout())
    }

    pub fn paths(&self) -> ArtifactPaths {
        ArtifactPaths {
            root: self.artifacts.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.steps.validate()?;
        self.cae.spec.validate()?;
        self.cae.train.augmentation.validate()?;
        if self.cae.spec.input_size != crate::taskworld::IMAGE_SIZE {
            return Err(Error::Config(format!(
                "the renderer produces {0}x{0} frames, cae.spec.input_size is {1}",
                crate::taskworld::IMAGE_SIZE,
                self.cae.spec.input_size
            )));
        }
        if self.cae.frame_stride == 0 || self.cae.holdout_every < 2 || self.cae.train.batch_size == 0 {
            return Err(Error::Config(
                "cae.frame_stride and cae.train.batch_size must be >= 1, cae.holdout_every >= 2".into(),
            ));
        }
        self.mtrnn_spec()?;
        if !(self.mtrnn.train.clip_norm > 0.0 && self.mtrnn.train.init_scale > 0.0) {
            return Err(Error::Config("mtrnn clip_norm and init_scale must be positive".into()));
        }
        let d = &self.data;
        for &pos in d.train_positions.iter().chain(&d.test_positions) {
            if pos == 0 || pos > POSITION_COUNT {
                return Err(Error::Config(format!("position {pos} outside 1..={POSITION_COUNT}")));
            }
        }
        if d.train_patterns.is_empty() || d.train_positions.is_empty() {
            return Err(Error::Config("training needs at least one pattern and position".into()));
        }
        d.training_episodes().map_err(|e| Error::Config(e.to_string()))?;
        d.test_episodes().map_err(|e| Error::Config(e.to_string()))?;
        if let Cs0Policy::Entry(i) = self.rollout.cs0 {
            let n = d.train_patterns.len() * d.train_positions.len();
            if i >= n {
                return Err(Error::Config(format!("rollout.cs0 entry {i} but only {n} training sequences")));
            }
        }
        if !(self.rollout.feature_jitter >= 0.0) {
            return Err(Error::Config("rollout.feature_jitter must be >= 0".into()));
        }
        Ok(())
    }
}

/// File layout under the artifact root.
#[derive(Clone, Debug, PartialEq)]
pub struct ArtifactPaths {
    pub root: PathBuf,
}

impl ArtifactPaths {
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.bin")
    }

    /// Human-readable copy of the dataset's normalization ranges.
    pub fn normalization(&self) -> PathBuf {
        self.root.join("normalization.json")
    }

    pub fn cae(&self) -> PathBuf {
        self.root.join("cae.ckpt")
    }

    pub fn mtrnn(&self) -> PathBuf {
        self.root.join("mtrnn.ckpt")
    }

    pub fn mtrnn_intermediate(&self, epoch: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("mtrnn-{epoch:06}.ckpt"))
    }

    pub fn loss_history(&self, stage: &str) -> PathBuf {
        self.root.join(format!("{stage}-loss.json"))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn traces(&self) -> PathBuf {
        self.root.join("traces")
    }

    pub fn analysis(&self) -> PathBuf {
        self.root.join("analysis")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let text = c.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), c);
    }

    #[test]
    fn defaults_describe_twelve_training_sequences() {
        let c = ExperimentConfig::default();
        assert_eq!(c.data.training_episodes().unwrap().len(), 12);
        assert_eq!(c.data.test_episodes().unwrap().len(), 2);
        let spec = c.mtrnn_spec().unwrap();
        assert_eq!(spec.io_count, 16);
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let c = ExperimentConfig::from_toml_str("seed = 9\n[mtrnn]\ncf_count = 40\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.mtrnn.cf_count, 40);
        assert_eq!(c.mtrnn.cs_count, 20);
        let c = ExperimentConfig::from_toml_str("[mtrnn.train]\nmax_epochs = 7\n[cae.train.adam]\nlearning_rate = 0.01\n").unwrap();
        assert_eq!(c.mtrnn.train.max_epochs, 7);
        assert_eq!(c.mtrnn.train.clip_norm, 5.0);
        assert_eq!(c.cae.train.adam.learning_rate, 0.01);
        assert_eq!(c.cae.train.adam.beta1, 0.9);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("sede = 9").is_err());
        assert!(ExperimentConfig::from_toml_str("[mtrnn]\nfoo = 1").is_err());
        assert!(ExperimentConfig::from_toml_str("[data]\ntest_positions = [9]").is_err());
        assert!(ExperimentConfig::from_toml_str("[mtrnn]\ntau_cf = 100.0").is_err());
        assert!(ExperimentConfig::from_toml_str("[cae.spec]\ninput_size = 32\nchannels = [3, 8]\ndense = [4]\nfeature_dim = 10\nbatch_norm = [true]").is_err());
        assert!(ExperimentConfig::from_toml_str("[rollout]\ncs0 = { entry = 12 }").is_err());
        assert!(ExperimentConfig::from_toml_str("[rollout]\ncs0 = { entry = 11 }").is_ok());
    }
}
