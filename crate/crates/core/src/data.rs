//! Clip manifests and corpus loading for training.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, resample_audio, MelConfig, SAMPLE_RATE};
use crate::condition::{extract_features, FeatureBackend};
use crate::config::{BackendKind, Config};
use crate::error::{Error, Result};
use crate::formats::read_gesture;

pub const SKELETON_FILE: &str = "skeleton.bvh";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub clip_id: String,
    pub gesture_path: PathBuf,
    pub audio_path: PathBuf,
    pub duration_s: f64,
}

/// Rows with paths resolved against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let path = path.as_ref();
    let dir = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Format(e.to_string()).in_file(path))?;
    reader
        .deserialize::<ManifestRow>()
        .map(|r| {
            let mut row = r.map_err(|e| Error::Format(e.to_string()).in_file(path))?;
            row.gesture_path = dir.join(&row.gesture_path);
            row.audio_path = dir.join(&row.audio_path);
            Ok(row)
        })
        .collect()
}

pub fn write_manifest(path: impl AsRef<Path>, rows: &[ManifestRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()).in_file(path))?;
    if rows.is_empty() {
        w.write_record(["clip_id", "gesture_path", "audio_path", "duration_s"])
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// 16 kHz mono audio; other rates are resampled.
pub fn load_audio_16k(path: impl AsRef<Path>) -> Result<Vec<f32>> {
    let path = path.as_ref();
    let (wave, rate) = read_wav(path)?;
    if rate == SAMPLE_RATE {
        return Ok(wave);
    }
    log::info!("{}: resampling {rate} Hz to {SAMPLE_RATE} Hz", path.display());
    resample_audio(&wave, rate, SAMPLE_RATE).map_err(|e| e.in_file(path))
}

/// Condition features for one audio file under the configured backend.
pub fn audio_features(audio_path: &Path, cfg: &Config) -> Result<Array2<f32>> {
    let (wave, backend) = match cfg.data.feature_backend {
        BackendKind::Mel => (load_audio_16k(audio_path)?, FeatureBackend::Mel(MelConfig::default())),
        BackendKind::Interchange => (Vec::new(), FeatureBackend::Interchange(audio_path.with_extension("dimf"))),
    };
    let seq = extract_features(&wave, SAMPLE_RATE, &backend)?;
    if (seq.frame_rate_hz - cfg.model.feature_rate_hz).abs() > 1e-3 {
        return Err(Error::Config(format!(
            "features are at {} Hz but the model expects {} Hz",
            seq.frame_rate_hz, cfg.model.feature_rate_hz
        ))
        .in_file(audio_path));
    }
    if seq.z_a.ncols() != cfg.model.feature_dim {
        return Err(Error::shape(format!(
            "features have {} dims, model.feature_dim is {}",
            seq.z_a.ncols(),
            cfg.model.feature_dim
        ))
        .in_file(audio_path));
    }
    Ok(seq.z_a)
}

#[derive(Clone, Debug)]
pub struct CorpusClip {
    pub id: String,
    /// Unstandardized `T x (D + 6)`.
    pub gesture: Array2<f64>,
    pub features: Array2<f32>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub clips: Vec<CorpusClip>,
    pub skeleton: Option<String>,
}

pub fn load_corpus(cfg: &Config) -> Result<Corpus> {
    let manifest = &cfg.data.manifest;
    let rows = read_manifest(manifest)?;
    if rows.is_empty() {
        return Err(Error::Empty(format!("manifest {} lists no clips", manifest.display())));
    }
    let clips = rows
        .par_iter()
        .map(|r| {
            let g = read_gesture(&r.gesture_path)?;
            if (g.rate_hz as f64 - cfg.data.gesture_fps).abs() > 1e-3 {
                return Err(Error::Config(format!(
                    "gesture at {} fps, config expects {}",
                    g.rate_hz, cfg.data.gesture_fps
                ))
                .in_file(&r.gesture_path));
            }
            Ok(CorpusClip {
                id: r.clip_id.clone(),
                gesture: g.data.mapv(f64::from),
                features: audio_features(&r.audio_path, cfg)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let cols = clips[0].gesture.ncols();
    if let Some(bad) = clips.iter().find(|c| c.gesture.ncols() != cols) {
        return Err(Error::shape(format!(
            "clip {} has {} channels, first clip {cols}",
            bad.id,
            bad.gesture.ncols()
        )));
    }
    let skel_path = manifest.parent().unwrap_or(Path::new("")).join(SKELETON_FILE);
    let skeleton = fs::read_to_string(&skel_path).ok();
    Ok(Corpus { clips, skeleton })
}
