//! Run configuration: a TOML file, then environment overrides, then flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use curvedn_core::decoder::train::TrainSettings;
use curvedn_core::decoder::DecoderConfig;
use curvedn_core::synth::SceneSpec;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;
pub const ENV_OUTPUT_DIR: &str = "CURVEDN_OUTPUT_DIR";
pub const ENV_SEED: &str = "CURVEDN_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub output_dir: PathBuf,
    /// Drives model initialization, denoising noise and data order. The
    /// dataset has its own seed under `[scene]`.
    pub seed: u64,
    /// Training images written by `gen`.
    pub images: usize,
    /// Held-out images written by `gen` and scored during training.
    pub eval_images: usize,
    /// Threads for `gen`; the output does not depend on it.
    pub jobs: usize,
    pub steps: usize,
    pub snapshot_interval: usize,
    /// Training images covered by each snapshot; 0 means all.
    pub snapshot_images: usize,
    /// Writes zero wall-time so reruns produce identical logs.
    pub deterministic: bool,
    pub score_threshold: f64,
    /// Largest mean boundary L1 distance that counts as a detection.
    pub match_threshold: f64,
    pub scene: SceneSpec,
    /// `feature_channels` and `init_seed` are derived from `[scene]` and `seed`.
    pub decoder: DecoderConfig,
    /// `noise.points_per_curve` is derived from `[decoder]`.
    pub train: TrainSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
            images: 100,
            eval_images: 50,
            jobs: 1,
            steps: 4000,
            snapshot_interval: 250,
            snapshot_images: 0,
            deterministic: true,
            score_threshold: 0.5,
            match_threshold: 0.05,
            scene: SceneSpec::default(),
            decoder: DecoderConfig::default(),
            train: TrainSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| anyhow::anyhow!("invalid config: {e}"))?;
        if cfg.schema_version != SCHEMA_VERSION {
            bail!(
                "invalid config: schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            );
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Applies `CURVEDN_OUTPUT_DIR` and `CURVEDN_SEED` from `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(dir) = lookup(ENV_OUTPUT_DIR) {
            self.output_dir = PathBuf::from(dir);
        }
        if let Some(seed) = lookup(ENV_SEED) {
            self.seed = seed
                .trim()
                .parse()
                .with_context(|| format!("{ENV_SEED}={seed:?} is not an unsigned integer"))?;
        }
        Ok(())
    }

    /// Fills derived fields and checks cross-section consistency.
    pub fn resolve(mut self) -> Result<Self> {
        self.decoder.feature_channels = self.scene.channels();
        self.decoder.init_seed = self.seed;
        self.train.noise.points_per_curve = self.decoder.points_per_curve;
        if self.decoder.alphabet_size != self.scene.alphabet_size {
            bail!(
                "decoder.alphabet_size ({}) must equal scene.alphabet_size ({})",
                self.decoder.alphabet_size,
                self.scene.alphabet_size
            );
        }
        self.scene.validate().context("in [scene]")?;
        self.decoder.validate().context("in [decoder]")?;
        self.train.validate().context("in [train]")?;
        if self.snapshot_interval == 0 {
            bail!("snapshot_interval must be positive");
        }
        if self.jobs == 0 {
            bail!("jobs must be positive");
        }
        if !(0.0..1.0).contains(&self.score_threshold) || self.match_threshold.is_nan() || self.match_threshold <= 0.0 {
            bail!("score_threshold must lie in [0, 1) and match_threshold must be positive");
        }
        Ok(self)
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.output_dir.join("dataset.jsonl")
    }

    pub fn eval_path(&self) -> PathBuf {
        self.output_dir.join("eval.jsonl")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join("checkpoint.bin")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.output_dir.join("metrics.jsonl")
    }

    pub fn snapshot_dir(&self) -> PathBuf {
        self.output_dir.join("snapshots")
    }

    pub fn trace_path(&self) -> PathBuf {
        self.output_dir.join("eval_trace.jsonl")
    }
}
