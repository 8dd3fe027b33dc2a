//! Parameter accounting and wall-clock timing of the denoiser against a quadratic
//! self-attention stand-in.

use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::condition::StyleExtractor;
use crate::config::Config;
use crate::diffusion::{sample, NoiseSchedule, SampleOptions};
use crate::error::Result;
use crate::model::{CachedPredictor, GestureModel};
use crate::params::{lecun_uniform, ParamStore};
use crate::ssm::MambaVariant;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchVariant {
    Mamba2,
    Mamba1,
    ConvStyle,
}

impl BenchVariant {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mamba2" => Some(BenchVariant::Mamba2),
            "mamba1" => Some(BenchVariant::Mamba1),
            "convse" => Some(BenchVariant::ConvStyle),
            _ => None,
        }
    }

    pub fn apply(self, cfg: &mut Config) {
        match self {
            BenchVariant::Mamba2 => cfg.model.variant = MambaVariant::Mamba2,
            BenchVariant::Mamba1 => cfg.model.variant = MambaVariant::Mamba1,
            BenchVariant::ConvStyle => cfg.model.style_extractor = StyleExtractor::Conv,
        }
    }
}

/// Single-head softmax attention with a residual, `T x d` to `T x d`. The bench times
/// only `attend`, the part whose cost grows with `T^2`; the projections are per-frame.
pub struct AttentionStandIn {
    pub wq: Array2<f32>,
    pub wk: Array2<f32>,
    pub wv: Array2<f32>,
}

impl AttentionStandIn {
    pub fn new(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AttentionStandIn {
            wq: lecun_uniform(&mut rng, d, d),
            wk: lecun_uniform(&mut rng, d, d),
            wv: lecun_uniform(&mut rng, d, d),
        }
    }

    pub fn project(&self, x: &Array2<f32>) -> [Array2<f32>; 3] {
        [x.dot(&self.wq), x.dot(&self.wk), x.dot(&self.wv)]
    }

    /// `softmax(q k^T / sqrt(d)) v`
    pub fn attend(q: &Array2<f32>, k: &Array2<f32>, v: &Array2<f32>) -> Array2<f32> {
        let scale = 1.0 / (q.ncols() as f32).sqrt();
        let mut scores = q.dot(&k.t()) * scale;
        for mut row in scores.axis_iter_mut(Axis(0)) {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            row.mapv_inplace(|s| (s - m).exp());
            let z = row.sum();
            row.mapv_inplace(|s| s / z);
        }
        scores.dot(v)
    }

    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let [q, k, v] = self.project(x);
        x + &Self::attend(&q, &k, &v)
    }
}

#[derive(Clone, Debug)]
pub struct Timing {
    pub length: usize,
    /// Median seconds per denoiser forward.
    pub denoiser_s: f64,
    /// Median seconds per attention mixing (`attend`) at the denoiser width.
    pub attention_s: f64,
    /// Seconds for the reverse chain with `sampling_steps` steps, if requested.
    pub sampling_s: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub extractor_params: usize,
    pub denoiser_params: usize,
    pub timings: Vec<Timing>,
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times the denoiser forward (and optionally a shortened sampling chain) at each length.
pub fn run_bench(
    cfg: &Config,
    gesture_channels: usize,
    lengths: &[usize],
    reps: usize,
    sampling_steps: Option<usize>,
    seed: u64,
) -> Result<BenchReport> {
    let model = GestureModel::new(&cfg.model, gesture_channels, cfg.data.gesture_fps, cfg.diffusion.num_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: ParamStore<f32> = model.init(&mut rng);
    let (extractor_params, denoiser_params) = GestureModel::param_counts(&params);
    let attn = AttentionStandIn::new(cfg.model.d_hidden, seed);
    let stride = model.cond.cfg.stride()?;
    let inputs: Vec<(Array2<f32>, Array2<f32>, [Array2<f32>; 3])> = lengths
        .iter()
        .map(|&len| {
            let g_n = crate::diffusion::standard_normal(&mut rng, len, gesture_channels);
            let c = crate::diffusion::standard_normal(&mut rng, len, cfg.model.d_hidden);
            let qkv = attn.project(&c);
            (g_n, c, qkv)
        })
        .collect();
    // repetitions are interleaved across lengths so slow drift in machine speed
    // does not bias the ratios between lengths
    let mut den_times = vec![Vec::with_capacity(reps); lengths.len()];
    let mut att_times = vec![Vec::with_capacity(reps); lengths.len()];
    for rep in 0..=reps {
        for (i, (g_n, c, [q, k, v])) in inputs.iter().enumerate() {
            let t = Instant::now();
            std::hint::black_box(model.den.predict(&params, g_n, c)?);
            let den = t.elapsed().as_secs_f64();
            let t = Instant::now();
            std::hint::black_box(AttentionStandIn::attend(q, k, v));
            let att = t.elapsed().as_secs_f64();
            // rep 0 is warm-up
            if rep > 0 {
                den_times[i].push(den);
                att_times[i].push(att);
            }
        }
    }
    let mut timings = Vec::new();
    for (i, &len) in lengths.iter().enumerate() {
        let sampling_s = match sampling_steps {
            Some(steps) => {
                let feats: Array2<f32> =
                    crate::diffusion::standard_normal(&mut rng, len * stride, cfg.model.feature_dim);
                let d = &cfg.diffusion;
                let sched = NoiseSchedule::linear(steps, d.beta_start, d.beta_end)?;
                let t = Instant::now();
                let pred = CachedPredictor::new(&model, &params, &feats, len)?;
                let mut srng = ChaCha8Rng::seed_from_u64(seed);
                sample(&pred, &sched, len, gesture_channels, &mut srng, SampleOptions::default())?;
                Some(t.elapsed().as_secs_f64())
            }
            None => None,
        };
        timings.push(Timing {
            length: len,
            denoiser_s: median(std::mem::take(&mut den_times[i])),
            attention_s: median(std::mem::take(&mut att_times[i])),
            sampling_s,
        });
    }
    Ok(BenchReport {
        extractor_params,
        denoiser_params,
        timings,
    })
}
