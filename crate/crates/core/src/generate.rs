//! Inference: audio in, gesture sequence (and BVH) out.

use nalgebra::Vector3;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::SAMPLE_RATE;
use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::diffusion::{sample, NoiseSchedule, SampleOptions};
use crate::error::{Error, Result};
use crate::model::{CachedPredictor, GestureModel};
use crate::motion::process::first_root_position;
use crate::motion::{gesture_to_bvh, parse_bvh, Bvh, Standardizer};
use crate::params::ParamStore;
use crate::train::{build_model, standardize_features};

pub struct Generator {
    pub config: Config,
    pub model: GestureModel,
    pub sched: NoiseSchedule,
    pub params: ParamStore<f32>,
    pub stats: Standardizer,
    pub feature_stats: Standardizer,
    pub template: Option<Bvh>,
}

impl Generator {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (model, sched) = build_model(&ckpt.config, ckpt.gesture_channels)?;
        let template = ckpt.skeleton.as_deref().map(parse_bvh).transpose()?;
        Ok(Generator {
            config: ckpt.config.clone(),
            model,
            sched,
            params: ckpt.params.clone(),
            stats: ckpt.stats.clone(),
            feature_stats: ckpt.feature_stats.clone(),
            template,
        })
    }

    /// Gesture frames spanned by `samples` of 16 kHz audio.
    pub fn frames_for(&self, samples: usize) -> usize {
        (samples as f64 / SAMPLE_RATE as f64 * self.config.data.gesture_fps).round() as usize
    }

    /// Destandardized `frames x (D + 6)` gesture for the given raw audio features.
    pub fn generate(&self, features: &Array2<f32>, frames: usize, seed: u64) -> Result<Array2<f64>> {
        self.generate_with(features, frames, seed, SampleOptions::default())
    }

    pub fn generate_with(&self, features: &Array2<f32>, frames: usize, seed: u64, opts: SampleOptions) -> Result<Array2<f64>> {
        if frames == 0 {
            return Err(Error::InvalidArgument("audio is too short for a single gesture frame".into()));
        }
        let features = standardize_features(&self.feature_stats, features)?;
        let predictor = CachedPredictor::new(&self.model, &self.params, &features, frames)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let channels = self.model.den.cfg.gesture_channels;
        let g0 = sample(&predictor, &self.sched, frames, channels, &mut rng, opts)?;
        self.stats.destandardize(g0.mapv(f64::from).view())
    }

    pub fn to_bvh(&self, gesture: &Array2<f64>) -> Result<Bvh> {
        let template = self
            .template
            .as_ref()
            .ok_or_else(|| Error::Config("checkpoint carries no skeleton template".into()))?;
        let row: Vec<f64> = if template.motion.nrows() > 0 {
            template.motion.row(0).to_vec()
        } else {
            vec![0.0; template.skeleton.num_channels()]
        };
        let start: Vector3<f64> = first_root_position(template);
        gesture_to_bvh(&template.skeleton, gesture.view(), self.config.data.gesture_fps, &row, start)
    }
}
