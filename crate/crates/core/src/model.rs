//! The full noise predictor: condition extractor plus AdaLN denoiser.

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::condition::{ConditionConfig, ConditionExtractor};
use crate::config::ModelConfig;
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::Result;
use crate::params::ParamStore;
use crate::real::Real;
use crate::ssm::MambaBlockConfig;

#[derive(Clone, Debug)]
pub struct GestureModel {
    pub cond: ConditionExtractor,
    pub den: Denoiser,
    pub num_steps: usize,
}

impl GestureModel {
    pub fn new(m: &ModelConfig, gesture_channels: usize, gesture_fps: f64, num_steps: usize) -> Result<Self> {
        let block = MambaBlockConfig {
            d_model: m.d_hidden,
            d_state: m.d_state,
            conv_width: m.conv_width,
            expand: m.expand,
            variant: m.variant,
            chunk_len: m.chunk_len,
            head_dim: m.head_dim,
        };
        let style_block = MambaBlockConfig {
            d_model: m.feature_dim,
            variant: m.style_variant,
            ..block.clone()
        };
        let den = Denoiser::new(DenoiserConfig {
            num_blocks: m.num_blocks,
            d_hidden: m.d_hidden,
            gesture_channels,
            block,
            adaln_gate: m.adaln_gate,
            encoder_kernel: m.encoder_kernel,
        })?;
        let cond = ConditionExtractor::new(ConditionConfig {
            feature_dim: m.feature_dim,
            d_hidden: m.d_hidden,
            feature_rate_hz: m.feature_rate_hz,
            target_fps: gesture_fps,
            downsample_kernel: m.downsample_kernel,
            style: m.style_extractor,
            style_block,
        })?;
        Ok(GestureModel { cond, den, num_steps })
    }

    pub fn init<F: Real, R: Rng>(&self, rng: &mut R) -> ParamStore<F> {
        let mut store = ParamStore::new();
        self.cond.init(&mut store, rng);
        self.den.init(&mut store, rng);
        store
    }

    /// `eps_hat` for noisy gesture `g_n` at step `n`, given the fused latent `z_l`.
    pub fn noise_from_latent<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        g_n: Var,
        z_l: Var,
        n: usize,
    ) -> Result<Var> {
        let c = self.cond.build_condition(g, store, z_l, n, self.num_steps)?;
        self.den.denoise(g, store, g_n, c)
    }

    /// End to end from audio features.
    pub fn predict_noise<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        g_n: Var,
        z_a: Var,
        n: usize,
    ) -> Result<Var> {
        let frames = g.value(g_n).nrows();
        let z_l = self.cond.unified_latent(g, store, z_a, frames)?;
        self.noise_from_latent(g, store, g_n, z_l, n)
    }

    /// Parameter counts for the extractor and the denoiser.
    pub fn param_counts<F: Real>(store: &ParamStore<F>) -> (usize, usize) {
        (store.count_prefix("cond."), store.count_prefix("den."))
    }
}

/// Inference-time predictor with the step-independent latent cached.
pub struct CachedPredictor<'a, F: Real> {
    pub model: &'a GestureModel,
    pub store: &'a ParamStore<F>,
    pub z_l: Array2<F>,
}

impl<'a, F: Real> CachedPredictor<'a, F> {
    pub fn new(model: &'a GestureModel, store: &'a ParamStore<F>, z_a: &Array2<F>, frames: usize) -> Result<Self> {
        let z_l = model.cond.latent(store, z_a, frames)?;
        Ok(CachedPredictor { model, store, z_l })
    }
}

impl<F: Real> crate::diffusion::NoisePredictor<F> for CachedPredictor<'_, F> {
    fn predict(&self, g_n: &Array2<F>, n: usize) -> Result<Array2<F>> {
        let mut g = Graph::inference();
        let gv = g.constant(g_n.clone());
        let zv = g.constant(self.z_l.clone());
        let out = self.model.noise_from_latent(&mut g, self.store, gv, zv, n)?;
        Ok(g.take_value(out))
    }
}
