//! Experiment configuration: one JSON document with `data`, `model`, `diffusion`,
//! `train` and `metrics` sections. Every key is required and unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::condition::StyleExtractor;
use crate::error::{Error, Result};
use crate::ssm::MambaVariant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Built-in 80-bin log-mel at 100 Hz.
    Mel,
    /// Precomputed `.dimf` file next to each clip's audio.
    Interchange,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Manifest CSV written by `prepare`; relative paths resolve against the config file.
    pub manifest: PathBuf,
    /// 20
    pub gesture_fps: f64,
    /// 16000
    pub audio_rate: u32,
    /// 20 s clips.
    pub clip_s: f64,
    pub feature_backend: BackendKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// M = 3
    pub num_blocks: usize,
    /// D''; 1280 at full scale, 256 at desk scale.
    pub d_hidden: usize,
    /// 256
    pub d_state: usize,
    /// 4
    pub conv_width: usize,
    /// 2
    pub expand: usize,
    pub head_dim: usize,
    pub chunk_len: usize,
    pub variant: MambaVariant,
    pub adaln_gate: bool,
    pub encoder_kernel: usize,
    /// D'; 80 for the mel backend, 1024 for interchange features.
    pub feature_dim: usize,
    pub feature_rate_hz: f64,
    /// 201
    pub downsample_kernel: usize,
    pub style_extractor: StyleExtractor,
    pub style_variant: MambaVariant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    /// N = 1000
    pub num_steps: usize,
    /// 1e-4
    pub beta_start: f64,
    /// 8e-2
    pub beta_end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// 32
    pub batch_size: usize,
    pub lr: f64,
    pub max_steps: u64,
    pub seed: u64,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: u64,
    /// When false the loss log's wall-clock column is written as 0.
    pub record_wallclock: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Identity,
    Autoencoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// 40-frame windows.
    pub window_frames: usize,
    /// 0.1 s
    pub beat_sigma_s: f64,
    pub encoder: EncoderKind,
    pub encoder_dim: usize,
    pub encoder_steps: usize,
    pub encoder_lr: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Single-machine defaults (D'' = 256).
    Desk,
    /// Published model size (D'' = 1280).
    Paper,
    /// Seconds-scale smoke runs.
    Tiny,
}

impl Config {
    pub fn preset(p: Preset) -> Self {
        let mut cfg = Config {
            data: DataConfig {
                manifest: PathBuf::from("manifest.csv"),
                gesture_fps: 20.0,
                audio_rate: 16_000,
                clip_s: 20.0,
                feature_backend: BackendKind::Mel,
            },
            model: ModelConfig {
                num_blocks: 3,
                d_hidden: 256,
                d_state: 256,
                conv_width: 4,
                expand: 2,
                head_dim: 64,
                chunk_len: 64,
                variant: MambaVariant::Mamba2,
                adaln_gate: true,
                encoder_kernel: 3,
                feature_dim: 80,
                feature_rate_hz: 100.0,
                downsample_kernel: 201,
                style_extractor: StyleExtractor::Mamba,
                style_variant: MambaVariant::Mamba1,
            },
            diffusion: DiffusionConfig {
                num_steps: 1000,
                beta_start: 1e-4,
                beta_end: 8e-2,
            },
            train: TrainConfig {
                batch_size: 32,
                lr: 1e-4,
                max_steps: 100_000,
                seed: 0,
                checkpoint_every: 5_000,
                record_wallclock: true,
            },
            metrics: MetricsConfig {
                window_frames: 40,
                beat_sigma_s: 0.1,
                encoder: EncoderKind::Autoencoder,
                encoder_dim: 32,
                encoder_steps: 500,
                encoder_lr: 1e-3,
                seed: 0,
            },
        };
        match p {
            Preset::Desk => {}
            Preset::Paper => cfg.model.d_hidden = 1280,
            Preset::Tiny => {
                let m = &mut cfg.model;
                m.num_blocks = 1;
                m.d_hidden = 32;
                m.d_state = 8;
                m.head_dim = 16;
                m.chunk_len = 16;
                cfg.data.clip_s = 2.0;
                cfg.train.batch_size = 4;
                cfg.train.lr = 1e-3;
                cfg.train.max_steps = 2000;
                cfg.train.checkpoint_every = 0;
                cfg.metrics.encoder_steps = 100;
            }
        }
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates; a relative manifest path is resolved against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
        let mut cfg = Self::from_json(&text).map_err(|e| e.in_file(path))?;
        if cfg.data.manifest.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.data.manifest = dir.join(&cfg.data.manifest);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Short hex digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.diffusion;
        if d.num_steps == 0 {
            return Err(Error::Config("diffusion.num_steps must be >= 1".into()));
        }
        if !(0.0 < d.beta_start && d.beta_start < 1.0 && d.beta_end < 1.0)
            || (d.num_steps > 1 && d.beta_start >= d.beta_end)
        {
            return Err(Error::Config(format!(
                "diffusion betas must satisfy 0 < beta_start < beta_end < 1, got {} and {}",
                d.beta_start, d.beta_end
            )));
        }
        let t = &self.train;
        if t.batch_size == 0 || !(t.lr >= 0.0 && t.lr.is_finite()) {
            return Err(Error::Config("train.batch_size must be positive and train.lr finite >= 0".into()));
        }
        if self.data.gesture_fps <= 0.0 || self.data.clip_s <= 0.0 || self.data.audio_rate == 0 {
            return Err(Error::Config("data rates and clip length must be positive".into()));
        }
        if self.data.feature_backend == BackendKind::Mel {
            if self.model.feature_dim != 80 || self.model.feature_rate_hz != 100.0 {
                return Err(Error::Config(
                    "mel backend produces 80 features at 100 Hz; set model.feature_dim=80 and model.feature_rate_hz=100"
                        .into(),
                ));
            }
        }
        let m = &self.metrics;
        if m.window_frames == 0 || m.beat_sigma_s <= 0.0 || m.encoder_dim == 0 {
            return Err(Error::Config("metrics window, sigma and encoder_dim must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_json() {
        for p in [Preset::Desk, Preset::Paper, Preset::Tiny] {
            let cfg = Config::preset(p);
            assert_eq!(Config::from_json(&cfg.to_json()).unwrap(), cfg);
        }
    }

    #[test]
    fn missing_key_is_named() {
        let mut v: serde_json::Value = serde_json::from_str(&Config::preset(Preset::Desk).to_json()).unwrap();
        v["train"].as_object_mut().unwrap().remove("batch_size");
        let err = Config::from_json(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("batch_size"), "{err}");
    }

    #[test]
    fn unknown_key_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&Config::preset(Preset::Desk).to_json()).unwrap();
        v["model"]["dropout"] = serde_json::json!(0.1);
        let err = Config::from_json(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("dropout"), "{err}");
    }
}
