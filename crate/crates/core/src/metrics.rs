//! Objective metrics: Fréchet gesture distance in raw and feature space, onset and
//! gesture-beat detection, and beat alignment.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::autodiff::{ConvSpec, Graph};
use crate::error::{Error, Result};
use crate::motion::{Standardizer, ROOT_CHANNELS};
use crate::params::{lecun_uniform, Adam, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

/// Sample mean and unbiased covariance of the rows.
pub fn gaussian_stats(samples: ArrayView2<f64>) -> Result<GaussianStats> {
    let (n, d) = samples.dim();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples, got {n}")));
    }
    let mut mu = DVector::zeros(d);
    for row in samples.rows() {
        for (m, v) in mu.iter_mut().zip(row) {
            *m += v;
        }
    }
    mu /= n as f64;
    let centered = DMatrix::from_fn(n, d, |i, j| samples[[i, j]] - mu[j]);
    let sigma = centered.transpose() * &centered / (n - 1) as f64;
    Ok(GaussianStats { mu, sigma })
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`. The cross term is the nuclear norm of
/// `sqrt(S1) sqrt(S2)`, whose singular values are the square roots of the eigenvalues of
/// `sqrt(S1) S2 sqrt(S1)`; taking them from an SVD avoids squaring the condition number.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.mu.len();
    if b.mu.len() != d || a.sigma.shape() != (d, d) || b.sigma.shape() != (d, d) {
        return Err(Error::shape(format!("dimensions {d} and {}", b.mu.len())));
    }
    let mean_term = (&a.mu - &b.mu).norm_squared();
    let cross: f64 = (sym_sqrt(&a.sigma) * sym_sqrt(&b.sigma)).singular_values().sum();
    let dist = mean_term + a.sigma.trace() + b.sigma.trace() - 2.0 * cross;
    Ok(dist.max(0.0))
}

/// Non-overlapping `window`-frame slices of every clip, each flattened row-major.
pub fn windows(clips: &[Array2<f64>], window: usize) -> Result<Array2<f64>> {
    if window == 0 {
        return Err(Error::InvalidArgument("window must be positive".into()));
    }
    let cols = clips.first().map_or(0, |c| c.ncols());
    if clips.iter().any(|c| c.ncols() != cols) {
        return Err(Error::shape("clips differ in channel count"));
    }
    let mut rows = Vec::new();
    for c in clips {
        for w in 0..c.nrows() / window {
            rows.extend(c.slice(s![w * window..(w + 1) * window, ..]).iter().cloned());
        }
    }
    let n = rows.len() / (window * cols).max(1);
    Ok(Array2::from_shape_vec((n, window * cols), rows).expect("window layout"))
}

fn population(clips: &[Array2<f64>], window: usize, side: &str) -> Result<Array2<f64>> {
    if clips.is_empty() {
        return Err(Error::Empty(format!("no {side} clips")));
    }
    let w = windows(clips, window)?;
    if w.nrows() < 2 {
        return Err(Error::InvalidArgument(format!(
            "{side} set yields {} windows of {window} frames; need at least 2",
            w.nrows()
        )));
    }
    Ok(w)
}

pub fn fgd_raw(real: &[Array2<f64>], gen: &[Array2<f64>], window: usize) -> Result<f64> {
    fgd_feature(real, gen, window, &IdentityEncoder)
}

/// Maps flattened windows (`n x window*C`) to embeddings (`n x k`).
pub trait WindowEncoder: Sync {
    fn encode(&self, windows: ArrayView2<f64>) -> Result<Array2<f64>>;
}

pub struct IdentityEncoder;

impl WindowEncoder for IdentityEncoder {
    fn encode(&self, windows: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(windows.to_owned())
    }
}

/// `x -> x W`.
pub struct LinearEncoder(pub Array2<f64>);

impl WindowEncoder for LinearEncoder {
    fn encode(&self, windows: ArrayView2<f64>) -> Result<Array2<f64>> {
        if windows.ncols() != self.0.nrows() {
            return Err(Error::shape("linear encoder input width"));
        }
        Ok(windows.dot(&self.0))
    }
}

pub fn fgd_feature(real: &[Array2<f64>], gen: &[Array2<f64>], window: usize, encoder: &dyn WindowEncoder) -> Result<f64> {
    let r = encoder.encode(population(real, window, "real")?.view())?;
    let g = encoder.encode(population(gen, window, "generated")?.view())?;
    frechet_distance(&gaussian_stats(r.view())?, &gaussian_stats(g.view())?)
}

/// Two temporal convolutions (kernel 3) with a SiLU between them, mean-pooled over time
/// into the bottleneck; a linear decoder reconstructs the whole window.
#[derive(Clone, Debug)]
pub struct ConvAutoencoder {
    pub window: usize,
    pub channels: usize,
    pub hidden: usize,
    pub bottleneck: usize,
    pub params: ParamStore<f64>,
    pub stats: Standardizer,
}

impl ConvAutoencoder {
    fn window_matrix(&self, flat: ndarray::ArrayView1<f64>) -> Array2<f64> {
        let m = flat.to_owned().into_shape_with_order((self.window, self.channels)).expect("window shape");
        self.stats.standardize(m.view()).expect("stats width")
    }

    fn embed_graph(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, x: &Array2<f64>) -> Result<crate::autodiff::Var> {
        let xv = g.constant(x.clone());
        let (w1, b1) = (g.param(store, "ae.enc1.w")?, g.param(store, "ae.enc1.b")?);
        let h = g.conv1d(xv, w1, Some(b1), ConvSpec::same(3))?;
        let h = g.silu(h);
        let (w2, b2) = (g.param(store, "ae.enc2.w")?, g.param(store, "ae.enc2.b")?);
        let h = g.conv1d(h, w2, Some(b2), ConvSpec::same(3))?;
        Ok(g.mean_rows(h))
    }

    /// Trains on the real windows only (`n x window*channels`).
    pub fn train(real_windows: ArrayView2<f64>, window: usize, bottleneck: usize, steps: usize, lr: f64, seed: u64) -> Result<Self> {
        let (n, width) = real_windows.dim();
        if n == 0 || window == 0 || width % window != 0 {
            return Err(Error::InvalidArgument("autoencoder needs at least one whole window".into()));
        }
        let channels = width / window;
        let frames: Vec<Array2<f64>> = real_windows
            .rows()
            .into_iter()
            .map(|r| r.to_owned().into_shape_with_order((window, channels)).expect("window shape"))
            .collect();
        let stats = Standardizer::fit(frames.iter().map(|f| f.view()))?;
        let hidden = 2 * bottleneck;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        params.insert("ae.enc1.w", lecun_uniform(&mut rng, 3 * channels, hidden));
        params.insert("ae.enc1.b", Array2::zeros((1, hidden)));
        params.insert("ae.enc2.w", lecun_uniform(&mut rng, 3 * hidden, bottleneck));
        params.insert("ae.enc2.b", Array2::zeros((1, bottleneck)));
        params.insert("ae.dec.w", lecun_uniform(&mut rng, bottleneck, width));
        params.insert("ae.dec.b", Array2::zeros((1, width)));
        let mut ae = ConvAutoencoder {
            window,
            channels,
            hidden,
            bottleneck,
            params,
            stats,
        };
        let inputs: Vec<Array2<f64>> = real_windows.rows().into_iter().map(|r| ae.window_matrix(r)).collect();
        let mut adam = Adam::new(&ae.params, lr);
        let batch = n.min(16);
        for _ in 0..steps {
            let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
            let grads: Vec<ParamStore<f64>> = idx
                .par_iter()
                .map(|&i| ae.reconstruction_grads(&inputs[i]))
                .collect::<Result<_>>()?;
            let mut total = ae.params.zeros_like();
            for g in &grads {
                total.add_scaled(g, 1.0 / batch as f64)?;
            }
            adam.update(&mut ae.params, &total)?;
        }
        Ok(ae)
    }

    fn reconstruction_grads(&self, x: &Array2<f64>) -> Result<ParamStore<f64>> {
        let mut g = Graph::new();
        let z = self.embed_graph(&mut g, &self.params, x)?;
        let (wd, bd) = (g.param(&self.params, "ae.dec.w")?, g.param(&self.params, "ae.dec.b")?);
        let rec = g.linear(z, wd, bd)?;
        let flat = x.clone().into_shape_with_order((1, x.len())).expect("flatten");
        let target = g.constant(flat);
        let loss = g.mse(rec, target)?;
        Ok(g.backward(loss)?.into_params(&self.params))
    }

    pub fn reconstruction_loss(&self, windows: ArrayView2<f64>) -> Result<f64> {
        let losses: Vec<f64> = windows
            .rows()
            .into_iter()
            .map(|r| {
                let x = self.window_matrix(r);
                let mut g = Graph::inference();
                let z = self.embed_graph(&mut g, &self.params, &x)?;
                let (wd, bd) = (g.param(&self.params, "ae.dec.w")?, g.param(&self.params, "ae.dec.b")?);
                let rec = g.linear(z, wd, bd)?;
                let target = g.constant(x.clone().into_shape_with_order((1, x.len())).expect("flatten"));
                let l = g.mse(rec, target)?;
                Ok(g.value(l)[[0, 0]])
            })
            .collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
    }
}

impl WindowEncoder for ConvAutoencoder {
    fn encode(&self, windows: ArrayView2<f64>) -> Result<Array2<f64>> {
        if windows.ncols() != self.window * self.channels {
            return Err(Error::shape("autoencoder input width"));
        }
        let rows: Vec<Vec<f64>> = windows
            .rows()
            .into_iter()
            .collect::<Vec<_>>()
            .par_iter()
            .map(|r| {
                let x = self.window_matrix(*r);
                let mut g = Graph::inference();
                let z = self.embed_graph(&mut g, &self.params, &x)?;
                Ok(g.value(z).iter().cloned().collect())
            })
            .collect::<Result<_>>()?;
        let flat: Vec<f64> = rows.concat();
        Ok(Array2::from_shape_vec((windows.nrows(), self.bottleneck), flat).expect("embedding layout"))
    }
}

/// Onset detector settings: spectral flux over Hann frames with peak picking.
#[derive(Clone, Debug)]
pub struct OnsetConfig {
    pub win: usize,
    pub hop: usize,
    pub min_separation_s: f64,
    /// Peaks must exceed `mean + k * std` of the envelope.
    pub threshold_k: f64,
}

impl Default for OnsetConfig {
    fn default() -> Self {
        OnsetConfig {
            win: 512,
            hop: 160,
            min_separation_s: 0.2,
            threshold_k: 1.0,
        }
    }
}

/// Half-wave rectified spectral flux, one value per hop (frame centers at `t*hop + win/2`).
pub fn spectral_flux(wave: &[f32], cfg: &OnsetConfig) -> Vec<f64> {
    if wave.len() < cfg.win {
        return Vec::new();
    }
    let n_frames = (wave.len() - cfg.win) / cfg.hop + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.win);
    let window: Vec<f64> = (0..cfg.win)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / cfg.win as f64).cos())
        .collect();
    let bins = cfg.win / 2 + 1;
    let mut prev = vec![0.0f64; bins];
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.win];
    let mut flux = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let start = t * cfg.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(wave[start + i] as f64 * window[i], 0.0);
        }
        fft.process(&mut buf);
        let mut f = 0.0;
        for k in 0..bins {
            let mag = buf[k].norm();
            if t > 0 {
                f += (mag - prev[k]).max(0.0);
            }
            prev[k] = mag;
        }
        flux.push(f);
    }
    flux
}

/// Onset times in seconds, ascending.
pub fn audio_beats(wave: &[f32], sample_rate: u32, cfg: &OnsetConfig) -> Vec<f64> {
    let env = spectral_flux(wave, cfg);
    if env.len() < 3 {
        return Vec::new();
    }
    let n = env.len() as f64;
    let mean = env.iter().sum::<f64>() / n;
    let std = (env.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
    let peak = env.iter().cloned().fold(0.0, f64::max);
    if peak <= 1e-9 {
        return Vec::new();
    }
    let threshold = mean + cfg.threshold_k * std;
    let mut cands: Vec<usize> = (1..env.len() - 1)
        .filter(|&t| env[t] > threshold && env[t] >= env[t - 1] && env[t] > env[t + 1])
        .collect();
    // strongest first, then enforce the minimum separation
    cands.sort_by(|&a, &b| env[b].total_cmp(&env[a]).then(a.cmp(&b)));
    let sep = cfg.min_separation_s * sample_rate as f64 / cfg.hop as f64;
    let mut kept: Vec<usize> = Vec::new();
    for c in cands {
        if kept.iter().all(|&k| (k as f64 - c as f64).abs() >= sep) {
            kept.push(c);
        }
    }
    kept.sort_unstable();
    kept.iter()
        .map(|&t| (t * cfg.hop + cfg.win / 2) as f64 / sample_rate as f64)
        .collect()
}

/// Mean angular speed over joints (root channels excluded), central differences.
pub fn joint_speed(gesture: ArrayView2<f64>, fps: f64) -> Result<Vec<f64>> {
    let (t_len, cols) = gesture.dim();
    if cols <= ROOT_CHANNELS || (cols - ROOT_CHANNELS) % 3 != 0 {
        return Err(Error::shape(format!("gesture width {cols} is not 3J + 6")));
    }
    if t_len < 3 {
        return Err(Error::InvalidArgument(format!("gesture beats need >= 3 frames, got {t_len}")));
    }
    let joints = (cols - ROOT_CHANNELS) / 3;
    Ok((0..t_len)
        .map(|t| {
            let (a, b, h) = match t {
                0 => (0, 1, 1.0),
                t if t == t_len - 1 => (t - 1, t, 1.0),
                t => (t - 1, t + 1, 2.0),
            };
            let mut acc = 0.0;
            for j in 0..joints {
                let mut sq = 0.0;
                for c in 0..3 {
                    let d = gesture[[b, 3 * j + c]] - gesture[[a, 3 * j + c]];
                    sq += d * d;
                }
                acc += sq.sqrt() * fps / h;
            }
            acc / joints as f64
        })
        .collect())
}

/// Frames where joint speed has a local minimum lying below its one-second running mean.
pub fn gesture_beats(gesture: ArrayView2<f64>, fps: f64) -> Result<Vec<f64>> {
    let speed = joint_speed(gesture, fps)?;
    let n = speed.len();
    let half = (fps / 2.0).round().max(1.0) as usize;
    let mut beats = Vec::new();
    for t in 1..n - 1 {
        let lo = t.saturating_sub(half);
        let hi = (t + half + 1).min(n);
        let running = speed[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
        if speed[t] < speed[t - 1] && speed[t] <= speed[t + 1] && speed[t] < running * (1.0 - 1e-3) {
            beats.push(t as f64 / fps);
        }
    }
    Ok(beats)
}

/// `mean_{t in gb} exp(-min_{s in ab} (t - s)^2 / (2 sigma^2))`; 0 when either list is empty.
pub fn beat_align(gb: &[f64], ab: &[f64], sigma_s: f64) -> f64 {
    if gb.is_empty() || ab.is_empty() {
        log::warn!("beat_align on an empty beat list is defined as 0");
        return 0.0;
    }
    let total: f64 = gb
        .iter()
        .map(|t| {
            let d2 = ab.iter().map(|s| (t - s) * (t - s)).fold(f64::INFINITY, f64::min);
            (-d2 / (2.0 * sigma_s * sigma_s)).exp()
        })
        .sum();
    total / gb.len() as f64
}
