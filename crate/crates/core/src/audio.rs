//! Audio I/O, band-limited resampling and the built-in log-mel front end.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Model audio rate.
pub const SAMPLE_RATE: u32 = 16_000;

/// Mono samples and their rate. Multi-channel files are averaged down.
pub fn read_wav(path: impl AsRef<Path>) -> Result<(Vec<f32>, u32)> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| Error::from(e).in_file(path))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().collect::<Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<Result<_, _>>()?
        }
    };
    let mono = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect();
    Ok((mono, spec.sample_rate))
}

/// 32-bit float mono WAV.
pub fn write_wav(path: impl AsRef<Path>, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path.as_ref(), spec)?;
    for &s in samples {
        w.write_sample(s)?;
    }
    w.finalize()?;
    Ok(())
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Kaiser-windowed sinc resampler.
#[derive(Clone, Debug)]
pub struct SincResampler {
    pub zero_crossings: usize,
    pub rolloff: f64,
    pub kaiser_beta: f64,
}

impl Default for SincResampler {
    fn default() -> Self {
        SincResampler {
            zero_crossings: 32,
            rolloff: 0.95,
            kaiser_beta: 9.0,
        }
    }
}

impl SincResampler {
    /// Output length is `round(len * dst / src)`. Each output's taps are normalized to
    /// unit sum so constant signals pass through unchanged.
    pub fn process(&self, wave: &[f32], src_hz: u32, dst_hz: u32) -> Result<Vec<f32>> {
        if wave.is_empty() {
            return Err(Error::Empty("cannot resample an empty signal".into()));
        }
        if src_hz == 0 || dst_hz == 0 {
            return Err(Error::InvalidArgument("sample rates must be positive".into()));
        }
        if src_hz == dst_hz {
            return Ok(wave.to_vec());
        }
        let ratio = dst_hz as f64 / src_hz as f64;
        let out_len = (wave.len() as f64 * ratio).round() as usize;
        // cutoff in cycles per input sample
        let fc = 0.5 * ratio.min(1.0) * self.rolloff;
        let half = self.zero_crossings as f64 / (2.0 * fc);
        let i0_beta = bessel_i0(self.kaiser_beta);
        let n_in = wave.len() as isize;

        let out = (0..out_len)
            .map(|m| {
                let pos = m as f64 / ratio;
                let lo = (pos - half).ceil() as isize;
                let hi = (pos + half).floor() as isize;
                let mut acc = 0.0f64;
                let mut wsum = 0.0f64;
                for k in lo..=hi {
                    let u = pos - k as f64;
                    let r = u / half;
                    if r.abs() > 1.0 {
                        continue;
                    }
                    let win = bessel_i0(self.kaiser_beta * (1.0 - r * r).sqrt()) / i0_beta;
                    let h = 2.0 * fc * sinc(2.0 * fc * u) * win;
                    wsum += h;
                    if (0..n_in).contains(&k) {
                        acc += h * wave[k as usize] as f64;
                    } else {
                        // edge replicate keeps DC flat at the borders
                        let edge = if k < 0 { wave[0] } else { wave[wave.len() - 1] };
                        acc += h * edge as f64;
                    }
                }
                (acc / wsum) as f32
            })
            .collect();
        Ok(out)
    }
}

pub fn resample_audio(wave: &[f32], src_hz: u32, dst_hz: u32) -> Result<Vec<f32>> {
    SincResampler::default().process(wave, src_hz, dst_hz)
}

/// Log-mel front end: 25 ms Hann windows every 10 ms at 16 kHz.
#[derive(Clone, Debug, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub win_len: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Energies are floored here before the log.
    pub floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            sample_rate: SAMPLE_RATE,
            win_len: 400,
            hop: 160,
            n_fft: 512,
            n_mels: 80,
            f_min: 0.0,
            f_max: 8000.0,
            floor: 1e-10,
        }
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl MelConfig {
    pub fn frame_rate_hz(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    /// `n_mels + 2` edge frequencies; filter `m` rises from edge `m`, peaks at `m + 1`
    /// and falls to `m + 2`.
    pub fn band_edges_hz(&self) -> Vec<f64> {
        let (lo, hi) = (hz_to_mel(self.f_min), hz_to_mel(self.f_max));
        (0..self.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (self.n_mels + 1) as f64))
            .collect()
    }

    /// `n_mels x (n_fft/2 + 1)` triangular filters with unit peak.
    pub fn filterbank(&self) -> Array2<f64> {
        let edges = self.band_edges_hz();
        let n_bins = self.n_fft / 2 + 1;
        Array2::from_shape_fn((self.n_mels, n_bins), |(m, k)| {
            let f = k as f64 * self.sample_rate as f64 / self.n_fft as f64;
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            }
        })
    }

    /// Frame count `round(len / hop)`; frame `i` is centered at `(i + 0.5) * hop`.
    pub fn num_frames(&self, n_samples: usize) -> usize {
        (n_samples as f64 / self.hop as f64).round() as usize
    }

    pub fn log_mel(&self, wave: &[f32]) -> Array2<f32> {
        let n_frames = self.num_frames(wave.len());
        let fb = self.filterbank();
        let n_bins = self.n_fft / 2 + 1;
        let window: Vec<f64> = (0..self.win_len)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / self.win_len as f64).cos())
            .collect();
        let fft = FftPlanner::<f64>::new().plan_fft_forward(self.n_fft);
        let mut out = Array2::<f32>::zeros((n_frames, self.n_mels));
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut power = vec![0.0f64; n_bins];
        for t in 0..n_frames {
            let center = t as isize * self.hop as isize + self.hop as isize / 2;
            let start = center - self.win_len as isize / 2;
            buf.fill(Complex::new(0.0, 0.0));
            for (i, w) in window.iter().enumerate() {
                let idx = start + i as isize;
                if idx >= 0 && (idx as usize) < wave.len() {
                    buf[i].re = wave[idx as usize] as f64 * w;
                }
            }
            fft.process(&mut buf);
            for (k, p) in power.iter_mut().enumerate() {
                *p = buf[k].norm_sqr();
            }
            for m in 0..self.n_mels {
                let e: f64 = fb.row(m).iter().zip(&power).map(|(w, p)| w * p).sum();
                out[[t, m]] = e.max(self.floor).ln() as f32;
            }
        }
        out
    }
}
