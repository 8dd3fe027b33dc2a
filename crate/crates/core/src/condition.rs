//! Audio conditioning: feature extraction, global style token, broadcast fusion,
//! downsampling to the gesture frame rate and diffusion-step injection.

use std::path::PathBuf;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{MelConfig, SAMPLE_RATE};
use crate::autodiff::{ConvSpec, Graph, PadMode, Var};
use crate::error::{Error, Result};
use crate::formats::read_features;
use crate::params::{lecun_uniform, ParamStore};
use crate::real::Real;
use crate::ssm::{MambaBlock, MambaBlockConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    Interchange,
    Mel,
}

/// `T' x D'` audio features at a fixed frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub z_a: Array2<f32>,
    pub frame_rate_hz: f64,
    pub source: FeatureSource,
}

#[derive(Clone, Debug)]
pub enum FeatureBackend {
    Mel(MelConfig),
    /// Precomputed features for this exact clip.
    Interchange(PathBuf),
}

/// Features for 16 kHz mono audio.
pub fn extract_features(wave: &[f32], sample_rate: u32, backend: &FeatureBackend) -> Result<FeatureSequence> {
    if sample_rate != SAMPLE_RATE {
        return Err(Error::InvalidArgument(format!(
            "feature extraction needs {SAMPLE_RATE} Hz audio, got {sample_rate} Hz"
        )));
    }
    match backend {
        FeatureBackend::Mel(cfg) => Ok(FeatureSequence {
            z_a: cfg.log_mel(wave),
            frame_rate_hz: cfg.frame_rate_hz(),
            source: FeatureSource::Mel,
        }),
        FeatureBackend::Interchange(path) => {
            let seq = read_features(path)?;
            Ok(FeatureSequence {
                z_a: seq.data,
                frame_rate_hz: seq.rate_hz as f64,
                source: FeatureSource::Interchange,
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StyleExtractor {
    Mamba,
    Conv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionConfig {
    /// D'
    pub feature_dim: usize,
    /// D''
    pub d_hidden: usize,
    pub feature_rate_hz: f64,
    pub target_fps: f64,
    pub downsample_kernel: usize,
    pub style: StyleExtractor,
    /// `d_model` must equal `feature_dim`.
    pub style_block: MambaBlockConfig,
}

impl ConditionConfig {
    /// Integer ratio between feature rate and gesture rate.
    pub fn stride(&self) -> Result<usize> {
        let ratio = self.feature_rate_hz / self.target_fps;
        let s = ratio.round();
        if !(ratio.is_finite() && s >= 1.0 && (ratio - s).abs() < 1e-9) {
            return Err(Error::Config(format!(
                "feature rate {} Hz is not an integer multiple of gesture rate {} fps",
                self.feature_rate_hz, self.target_fps
            )));
        }
        Ok(s as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.stride()?;
        if self.feature_dim == 0 || self.d_hidden == 0 {
            return Err(Error::Config("condition dimensions must be positive".into()));
        }
        if self.d_hidden % 2 != 0 {
            return Err(Error::Config("d_hidden must be even for the step embedding".into()));
        }
        if self.downsample_kernel % 2 == 0 {
            return Err(Error::Config("downsample kernel must be odd".into()));
        }
        if self.style_block.d_model != self.feature_dim {
            return Err(Error::Config(format!(
                "style block d_model {} != feature_dim {}",
                self.style_block.d_model, self.feature_dim
            )));
        }
        self.style_block.validate()
    }

    pub fn downsample_spec(&self) -> Result<ConvSpec> {
        Ok(ConvSpec {
            kernel: self.downsample_kernel,
            stride: self.stride()?,
            pad: self.downsample_kernel / 2,
            pad_mode: PadMode::Zero,
        })
    }
}

/// Interleaved `[sin(n w_0), cos(n w_0), sin(n w_1), ...]` with `w_i = 10000^(-2i/dim)`.
pub fn sinusoidal_embed(n: f64, dim: usize) -> Array1<f64> {
    Array1::from_shape_fn(dim, |j| {
        let i = (j / 2) as f64;
        let w = 10000f64.powf(-2.0 * i / dim as f64);
        if j % 2 == 0 {
            (n * w).sin()
        } else {
            (n * w).cos()
        }
    })
}

const STYLE_CONV: ConvSpec = ConvSpec {
    kernel: 3,
    stride: 2,
    pad: 1,
    pad_mode: PadMode::Replicate,
};

#[derive(Clone, Debug)]
pub struct ConditionExtractor {
    pub cfg: ConditionConfig,
    style_block: MambaBlock,
}

impl ConditionExtractor {
    pub fn new(cfg: ConditionConfig) -> Result<Self> {
        cfg.validate()?;
        let style_block = MambaBlock::new(cfg.style_block.clone(), "cond.style")?;
        Ok(ConditionExtractor { cfg, style_block })
    }

    pub fn init<F: Real, R: Rng>(&self, store: &mut ParamStore<F>, rng: &mut R) {
        let (d, h, k) = (self.cfg.feature_dim, self.cfg.d_hidden, self.cfg.downsample_kernel);
        match self.cfg.style {
            StyleExtractor::Mamba => self.style_block.init(store, rng),
            StyleExtractor::Conv => {
                store.insert("cond.style_conv.w", lecun_uniform(rng, 3 * d, d));
                store.insert("cond.style_conv.b", Array2::zeros((1, d)));
                store.insert("cond.style_proj.w", lecun_uniform(rng, d, d));
                store.insert("cond.style_proj.b", Array2::zeros((1, d)));
            }
        }
        store.insert("cond.down.w", lecun_uniform(rng, k * 2 * d, h));
        store.insert("cond.down.b", Array2::zeros((1, h)));
        store.insert("cond.step.w1", lecun_uniform(rng, h, h));
        store.insert("cond.step.b1", Array2::zeros((1, h)));
        store.insert("cond.step.w2", lecun_uniform(rng, h, h));
        store.insert("cond.step.b2", Array2::zeros((1, h)));
    }

    fn check_features<F: Real>(&self, g: &Graph<F>, z_a: Var) -> Result<()> {
        let (t, d) = g.value(z_a).dim();
        if t == 0 {
            return Err(Error::Empty("feature sequence has no frames".into()));
        }
        if d != self.cfg.feature_dim {
            return Err(Error::shape(format!(
                "features have {d} channels, model expects {}",
                self.cfg.feature_dim
            )));
        }
        Ok(())
    }

    /// Final-token output of one Mamba block over `z_a`, `1 x D'`.
    pub fn global_style<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, z_a: Var) -> Result<Var> {
        self.check_features(g, z_a)?;
        self.style_block.last_state_readout(g, store, z_a)
    }

    /// A shared kernel-3 stride-2 convolution applied until one frame remains, then a
    /// linear projection, `1 x D'`.
    pub fn conv_style_extractor<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        z_a: Var,
    ) -> Result<Var> {
        self.check_features(g, z_a)?;
        let w = g.param(store, "cond.style_conv.w")?;
        let b = g.param(store, "cond.style_conv.b")?;
        let mut z = z_a;
        while g.value(z).nrows() > 1 {
            z = g.conv1d(z, w, Some(b), STYLE_CONV)?;
        }
        let pw = g.param(store, "cond.style_proj.w")?;
        let pb = g.param(store, "cond.style_proj.b")?;
        g.linear(z, pw, pb)
    }

    pub fn style<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, z_a: Var) -> Result<Var> {
        match self.cfg.style {
            StyleExtractor::Mamba => self.global_style(g, store, z_a),
            StyleExtractor::Conv => self.conv_style_extractor(g, store, z_a),
        }
    }

    /// `[z_a | z_last repeated]`, `T' x 2D'`.
    pub fn fuse_broadcast<F: Real>(&self, g: &mut Graph<F>, z_a: Var, z_last: Var) -> Result<Var> {
        let (t, d) = g.value(z_a).dim();
        if g.value(z_last).dim() != (1, d) {
            return Err(Error::shape(format!(
                "style token {:?} does not match feature width {d}",
                g.value(z_last).dim()
            )));
        }
        let tiled = g.broadcast_rows(z_last, t)?;
        g.concat_cols(z_a, tiled)
    }

    /// Strided wide convolution to `target_len x D''`; surplus frames are dropped and
    /// missing ones repeat the last frame.
    pub fn downsample_to_frames<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        fused: Var,
        target_len: usize,
    ) -> Result<Var> {
        if target_len == 0 {
            return Err(Error::InvalidArgument("target length must be positive".into()));
        }
        let spec = self.cfg.downsample_spec()?;
        let w = g.param(store, "cond.down.w")?;
        let b = g.param(store, "cond.down.b")?;
        let z = g.conv1d(fused, w, Some(b), spec)?;
        let len = g.value(z).nrows();
        match len.cmp(&target_len) {
            std::cmp::Ordering::Equal => Ok(z),
            std::cmp::Ordering::Greater => g.slice_rows(z, 0, target_len),
            std::cmp::Ordering::Less => {
                let last = g.slice_rows(z, len - 1, 1)?;
                let fill = g.broadcast_rows(last, target_len - len)?;
                g.concat_rows(z, fill)
            }
        }
    }

    /// Step-independent fused condition `z_l`, `target_len x D''`.
    pub fn unified_latent<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        z_a: Var,
        target_len: usize,
    ) -> Result<Var> {
        let z_last = self.style(g, store, z_a)?;
        let fused = self.fuse_broadcast(g, z_a, z_last)?;
        self.downsample_to_frames(g, store, fused, target_len)
    }

    /// `step_mlp(sinusoidal(n))`, `1 x D''`.
    pub fn step_embedding<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, n: usize) -> Result<Var> {
        let e = sinusoidal_embed(n as f64, self.cfg.d_hidden).mapv(F::of);
        let e = g.row_constant(e);
        let (w1, b1) = (g.param(store, "cond.step.w1")?, g.param(store, "cond.step.b1")?);
        let (w2, b2) = (g.param(store, "cond.step.w2")?, g.param(store, "cond.step.b2")?);
        let h = g.linear(e, w1, b1)?;
        let h = g.silu(h);
        g.linear(h, w2, b2)
    }

    /// `c = z_l + step_mlp(sinusoidal(n))` broadcast over frames.
    pub fn build_condition<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        z_l: Var,
        n: usize,
        num_steps: usize,
    ) -> Result<Var> {
        if n == 0 || n > num_steps {
            return Err(Error::InvalidArgument(format!("diffusion step {n} outside 1..={num_steps}")));
        }
        let emb = self.step_embedding(g, store, n)?;
        let rows = g.value(z_l).nrows();
        let tiled = g.broadcast_rows(emb, rows)?;
        g.add(z_l, tiled)
    }

    pub fn latent<F: Real>(&self, store: &ParamStore<F>, z_a: &Array2<F>, target_len: usize) -> Result<Array2<F>> {
        let mut g = Graph::inference();
        let z = g.constant(z_a.clone());
        let out = self.unified_latent(&mut g, store, z, target_len)?;
        Ok(g.take_value(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embed_at_zero_alternates() {
        let e = sinusoidal_embed(0.0, 8);
        assert_eq!(e.to_vec(), vec![0., 1., 0., 1., 0., 1., 0., 1.]);
    }

    #[test]
    fn stride_rules() {
        let mut cfg = ConditionConfig {
            feature_dim: 4,
            d_hidden: 8,
            feature_rate_hz: 100.0,
            target_fps: 20.0,
            downsample_kernel: 201,
            style: StyleExtractor::Mamba,
            style_block: MambaBlockConfig::new(4, crate::ssm::MambaVariant::Mamba1),
        };
        assert_eq!(cfg.stride().unwrap(), 5);
        assert_eq!(cfg.downsample_spec().unwrap().out_len(2000), 400);
        cfg.feature_rate_hz = 49.95;
        let msg = cfg.stride().unwrap_err().to_string();
        assert!(msg.contains("49.95") && msg.contains("20"), "{msg}");
    }
}
