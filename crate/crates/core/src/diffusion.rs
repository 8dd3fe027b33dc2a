//! Noise schedule, forward noising, posterior and the ancestral sampler.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::real::Real;

/// Linear variance schedule and its derived products. Steps are 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub beta_tilde: Vec<f64>,
}

impl NoiseSchedule {
    /// `beta^n = beta1 + (n-1)/(N-1) (betaN - beta1)`.
    pub fn linear(num_steps: usize, beta1: f64, beta_n: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta1 > 0.0 && beta_n < 1.0 && (num_steps == 1 || beta1 < beta_n)) {
            return Err(Error::Config(format!(
                "invalid beta range {beta1}..{beta_n}; need 0 < beta1 < betaN < 1"
            )));
        }
        let beta = if num_steps == 1 {
            vec![beta1]
        } else {
            (0..num_steps)
                .map(|i| beta1 + i as f64 / (num_steps - 1) as f64 * (beta_n - beta1))
                .collect()
        };
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config("betas must lie in (0, 1)".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let beta_tilde = (0..beta.len())
            .map(|i| {
                if i == 0 {
                    beta[0]
                } else {
                    (1.0 - alpha_bar[i - 1]) / (1.0 - alpha_bar[i]) * beta[i]
                }
            })
            .collect();
        Ok(NoiseSchedule {
            beta,
            alpha,
            alpha_bar,
            beta_tilde,
        })
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn check(&self, n: usize) -> Result<usize> {
        if n == 0 || n > self.len() {
            return Err(Error::InvalidArgument(format!(
                "diffusion step {n} outside 1..={}",
                self.len()
            )));
        }
        Ok(n - 1)
    }

    pub fn beta(&self, n: usize) -> f64 {
        self.beta[n - 1]
    }

    pub fn alpha(&self, n: usize) -> f64 {
        self.alpha[n - 1]
    }

    pub fn alpha_bar(&self, n: usize) -> f64 {
        self.alpha_bar[n - 1]
    }

    pub fn beta_tilde(&self, n: usize) -> f64 {
        self.beta_tilde[n - 1]
    }

    /// `sqrt(abar) g0 + sqrt(1 - abar) eps`.
    pub fn q_sample<F: Real>(&self, g0: &Array2<F>, n: usize, eps: &Array2<F>) -> Result<Array2<F>> {
        let i = self.check(n)?;
        if g0.dim() != eps.dim() {
            return Err(Error::shape(format!("g0 {:?} vs eps {:?}", g0.dim(), eps.dim())));
        }
        let a = F::of(self.alpha_bar[i].sqrt());
        let s = F::of((1.0 - self.alpha_bar[i]).sqrt());
        Ok(ndarray::Zip::from(g0).and(eps).map_collect(|&x, &e| a * x + s * e))
    }

    /// Mean and variance of `q(g^{n-1} | g^n, g^0)` for `n >= 2`.
    pub fn posterior_params<F: Real>(&self, g_n: &Array2<F>, g0: &Array2<F>, n: usize) -> Result<(Array2<F>, f64)> {
        let i = self.check(n)?;
        if i == 0 {
            return Err(Error::InvalidArgument(
                "posterior is defined for n >= 2; step 1 maps straight to g0".into(),
            ));
        }
        if g0.dim() != g_n.dim() {
            return Err(Error::shape("posterior operands differ in shape"));
        }
        let (ab, ab_prev) = (self.alpha_bar[i], self.alpha_bar[i - 1]);
        let c0 = F::of(ab_prev.sqrt() * self.beta[i] / (1.0 - ab));
        let cn = F::of(self.alpha[i].sqrt() * (1.0 - ab_prev) / (1.0 - ab));
        let mu = ndarray::Zip::from(g0).and(g_n).map_collect(|&x0, &xn| c0 * x0 + cn * xn);
        Ok((mu, self.beta_tilde[i]))
    }
}

/// Standard normal matrix; draws run row-major through `rng`.
pub fn standard_normal<F: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<F> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = rng.sample(StandardNormal);
        F::of(z)
    })
}

/// Anything that can predict the noise in `g_n` at step `n`.
pub trait NoisePredictor<F: Real> {
    fn predict(&self, g_n: &Array2<F>, n: usize) -> Result<Array2<F>>;
}

impl<F: Real, P: Fn(&Array2<F>, usize) -> Result<Array2<F>>> NoisePredictor<F> for P {
    fn predict(&self, g_n: &Array2<F>, n: usize) -> Result<Array2<F>> {
        self(g_n, n)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SampleOptions {
    /// Drop the `sqrt(beta_tilde) z` term (and its draws) at every step.
    pub suppress_noise: bool,
}

/// One reverse step `g^{n-1}` from `g^n` and predicted noise; `z` is ignored at `n = 1`.
pub fn reverse_step<F: Real>(
    sched: &NoiseSchedule,
    g_n: &Array2<F>,
    eps_hat: &Array2<F>,
    n: usize,
    z: Option<&Array2<F>>,
) -> Result<Array2<F>> {
    let i = sched.check(n)?;
    if eps_hat.dim() != g_n.dim() {
        return Err(Error::shape(format!(
            "predicted noise {:?} vs sample {:?}",
            eps_hat.dim(),
            g_n.dim()
        )));
    }
    let inv = F::of(1.0 / sched.alpha[i].sqrt());
    let k = F::of(sched.beta[i] / (1.0 - sched.alpha_bar[i]).sqrt());
    let mut out = ndarray::Zip::from(g_n)
        .and(eps_hat)
        .map_collect(|&g, &e| inv * (g - k * e));
    if let (Some(z), true) = (z, n > 1) {
        let s = F::of(sched.beta_tilde[i].sqrt());
        out.zip_mut_with(z, |o, &zv| *o += s * zv);
    }
    Ok(out)
}

/// Ancestral sampling from `g^N ~ N(0, I)` down to `g^0` for a `frames x channels` sequence.
pub fn sample<F: Real, P: NoisePredictor<F> + ?Sized, R: Rng>(
    predictor: &P,
    sched: &NoiseSchedule,
    frames: usize,
    channels: usize,
    rng: &mut R,
    opts: SampleOptions,
) -> Result<Array2<F>> {
    let init = standard_normal(rng, frames, channels);
    sample_from(predictor, sched, init, rng, opts)
}

/// Reverse chain from a given `g^N`.
pub fn sample_from<F: Real, P: NoisePredictor<F> + ?Sized, R: Rng>(
    predictor: &P,
    sched: &NoiseSchedule,
    init: Array2<F>,
    rng: &mut R,
    opts: SampleOptions,
) -> Result<Array2<F>> {
    let (rows, cols) = init.dim();
    let mut g = init;
    for n in (1..=sched.len()).rev() {
        let eps_hat = predictor.predict(&g, n)?;
        let z = (n > 1 && !opts.suppress_noise).then(|| standard_normal(rng, rows, cols));
        g = reverse_step(sched, &g, &eps_hat, n, z.as_ref())?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("sample became non-finite at step {n}")));
        }
    }
    Ok(g)
}
