//! Python bindings. Arrays cross the boundary as nested lists of floats.

use std::path::PathBuf;

use dim_gesture::audio::SAMPLE_RATE;
use dim_gesture::checkpoint::Checkpoint;
use dim_gesture::condition::{extract_features, FeatureBackend};
use dim_gesture::config::{self, Preset};
use dim_gesture::diffusion;
use dim_gesture::formats;
use dim_gesture::generate;
use dim_gesture::metrics::{self, GaussianStats, OnsetConfig};
use dim_gesture::motion;
use dim_gesture::Error;
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn is_io(e: &Error) -> bool {
    match e {
        Error::Io(_) => true,
        Error::File { source, .. } => is_io(source),
        _ => false,
    }
}

fn to_py(e: Error) -> PyErr {
    if is_io(&e) {
        PyIOError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn to_array<F: Copy>(rows: Vec<Vec<F>>) -> PyResult<Array2<F>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_rows<F: Copy>(a: &Array2<F>) -> Vec<Vec<F>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

#[pyclass(module = "dim_gesture_py")]
struct Config {
    inner: config::Config,
}

#[pymethods]
impl Config {
    /// One of "desk", "paper", "tiny".
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        let p = match name {
            "desk" => Preset::Desk,
            "paper" => Preset::Paper,
            "tiny" => Preset::Tiny,
            _ => return Err(PyValueError::new_err(format!("unknown preset `{name}`"))),
        };
        Ok(Config { inner: config::Config::preset(p) })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        config::Config::from_json(text).map(|inner| Config { inner }).map_err(to_py)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn gesture_fps(&self) -> f64 {
        self.inner.data.gesture_fps
    }

    #[getter]
    fn num_steps(&self) -> usize {
        self.inner.diffusion.num_steps
    }
}

#[pyclass(module = "dim_gesture_py")]
struct NoiseSchedule {
    inner: diffusion::NoiseSchedule,
}

#[pymethods]
impl NoiseSchedule {
    #[new]
    #[pyo3(signature = (num_steps=1000, beta_start=1e-4, beta_end=8e-2))]
    fn new(num_steps: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        diffusion::NoiseSchedule::linear(num_steps, beta_start, beta_end)
            .map(|inner| NoiseSchedule { inner })
            .map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Steps are 1-based.
    fn beta(&self, n: usize) -> PyResult<f64> {
        self.check(n)?;
        Ok(self.inner.beta(n))
    }

    fn alpha_bar(&self, n: usize) -> PyResult<f64> {
        self.check(n)?;
        Ok(self.inner.alpha_bar(n))
    }

    /// `sqrt(abar_n) g0 + sqrt(1 - abar_n) eps`.
    fn q_sample(&self, g0: Vec<Vec<f64>>, n: usize, eps: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let g = self.inner.q_sample(&to_array(g0)?, n, &to_array(eps)?).map_err(to_py)?;
        Ok(to_rows(&g))
    }
}

impl NoiseSchedule {
    fn check(&self, n: usize) -> PyResult<()> {
        if n == 0 || n > self.inner.len() {
            return Err(PyValueError::new_err(format!("step {n} outside 1..={}", self.inner.len())));
        }
        Ok(())
    }
}

/// A trained model loaded from a checkpoint.
#[pyclass(module = "dim_gesture_py")]
struct Generator {
    inner: generate::Generator,
}

#[pymethods]
impl Generator {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(to_py)?;
        generate::Generator::from_checkpoint(&ckpt)
            .map(|inner| Generator { inner })
            .map_err(to_py)
    }

    fn frames_for(&self, samples: usize) -> usize {
        self.inner.frames_for(samples)
    }

    /// Features are `T_a x D` rows at the model's feature rate; returns destandardized gesture rows.
    fn generate(&self, features: Vec<Vec<f32>>, frames: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let g = self.inner.generate(&to_array(features)?, frames, seed).map_err(to_py)?;
        Ok(to_rows(&g))
    }

    /// Mel features, sampling and BVH export for a 16 kHz waveform.
    fn sample_bvh(&self, wave: Vec<f32>, seed: u64) -> PyResult<String> {
        let seq = extract_features(&wave, SAMPLE_RATE, &FeatureBackend::Mel(Default::default())).map_err(to_py)?;
        let frames = self.inner.frames_for(wave.len());
        let g = self.inner.generate(&seq.z_a, frames, seed).map_err(to_py)?;
        let bvh = self.inner.to_bvh(&g).map_err(to_py)?;
        Ok(motion::write_bvh(&bvh))
    }
}

#[pyfunction]
fn expmap_to_matrix(v: [f64; 3]) -> [[f64; 3]; 3] {
    let r = motion::from_expmap(&Vector3::from(v));
    std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)]))
}

#[pyfunction]
fn matrix_to_expmap(m: [[f64; 3]; 3]) -> [f64; 3] {
    let r = Matrix3::from_fn(|i, j| m[i][j]);
    motion::to_expmap(&r).into()
}

/// Frames x channels gesture rows from BVH text.
#[pyfunction]
#[pyo3(signature = (text, fps=20.0))]
fn gesture_from_bvh(text: &str, fps: f64) -> PyResult<Vec<Vec<f64>>> {
    let bvh = motion::parse_bvh(text).map_err(to_py)?;
    Ok(to_rows(&motion::gesture_from_bvh(&bvh, fps).map_err(to_py)?))
}

#[pyfunction]
fn frechet_distance(mu1: Vec<f64>, sigma1: Vec<Vec<f64>>, mu2: Vec<f64>, sigma2: Vec<Vec<f64>>) -> PyResult<f64> {
    let stats = |mu: Vec<f64>, s: Vec<Vec<f64>>| -> PyResult<GaussianStats> {
        let d = mu.len();
        let s = to_array(s)?;
        if s.dim() != (d, d) {
            return Err(PyValueError::new_err(format!("covariance must be {d}x{d}")));
        }
        Ok(GaussianStats {
            mu: DVector::from_vec(mu),
            sigma: DMatrix::from_fn(d, d, |i, j| s[[i, j]]),
        })
    };
    metrics::frechet_distance(&stats(mu1, sigma1)?, &stats(mu2, sigma2)?).map_err(to_py)
}

/// FGD between two sets of clips on raw standardized windows.
#[pyfunction]
fn fgd_raw(real: Vec<Vec<Vec<f64>>>, generated: Vec<Vec<Vec<f64>>>, window: usize) -> PyResult<f64> {
    let r = real.into_iter().map(to_array).collect::<PyResult<Vec<_>>>()?;
    let g = generated.into_iter().map(to_array).collect::<PyResult<Vec<_>>>()?;
    metrics::fgd_raw(&r, &g, window).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (gesture_beats, audio_beats, sigma_s=0.1))]
fn beat_align(gesture_beats: Vec<f64>, audio_beats: Vec<f64>, sigma_s: f64) -> f64 {
    metrics::beat_align(&gesture_beats, &audio_beats, sigma_s)
}

#[pyfunction]
fn audio_beats(wave: Vec<f32>, sample_rate: u32) -> Vec<f64> {
    metrics::audio_beats(&wave, sample_rate, &OnsetConfig::default())
}

#[pyfunction]
fn gesture_beats(gesture: Vec<Vec<f64>>, fps: f64) -> PyResult<Vec<f64>> {
    metrics::gesture_beats(to_array(gesture)?.view(), fps).map_err(to_py)
}

/// `(rows, rate_hz)` from a DIMF file.
#[pyfunction]
#[pyo3(signature = (path, dims=None))]
fn read_features(path: PathBuf, dims: Option<usize>) -> PyResult<(Vec<Vec<f32>>, f32)> {
    let seq = formats::check_features(&path, dims).map_err(to_py)?;
    Ok((to_rows(&seq.data), seq.rate_hz))
}

#[pyfunction]
fn write_features(path: PathBuf, rows: Vec<Vec<f32>>, rate_hz: f32) -> PyResult<()> {
    formats::write_features(&path, &formats::FrameSequence::new(to_array(rows)?, rate_hz)).map_err(to_py)
}

/// Log-mel features (`T x 80` at 100 Hz) of a 16 kHz waveform.
#[pyfunction]
fn mel_features(wave: Vec<f32>) -> PyResult<Vec<Vec<f32>>> {
    let seq = extract_features(&wave, SAMPLE_RATE, &FeatureBackend::Mel(Default::default())).map_err(to_py)?;
    Ok(to_rows(&seq.z_a))
}

#[pymodule]
fn dim_gesture_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Config>()?;
    m.add_class::<NoiseSchedule>()?;
    m.add_class::<Generator>()?;
    m.add_function(wrap_pyfunction!(expmap_to_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(matrix_to_expmap, m)?)?;
    m.add_function(wrap_pyfunction!(gesture_from_bvh, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_distance, m)?)?;
    m.add_function(wrap_pyfunction!(fgd_raw, m)?)?;
    m.add_function(wrap_pyfunction!(beat_align, m)?)?;
    m.add_function(wrap_pyfunction!(audio_beats, m)?)?;
    m.add_function(wrap_pyfunction!(gesture_beats, m)?)?;
    m.add_function(wrap_pyfunction!(read_features, m)?)?;
    m.add_function(wrap_pyfunction!(write_features, m)?)?;
    m.add_function(wrap_pyfunction!(mel_features, m)?)?;
    m.add("SAMPLE_RATE", SAMPLE_RATE)?;
    Ok(())
}
