use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AScheme, Graph, ScanKernel, Var};
use crate::error::{Error, Result};
use crate::params::{lecun_uniform, uniform, ParamStore};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MambaVariant {
    Mamba1,
    Mamba2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MambaBlockConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub conv_width: usize,
    pub expand: usize,
    pub variant: MambaVariant,
    /// Mamba-2 only.
    pub chunk_len: usize,
    /// Mamba-2 only.
    pub head_dim: usize,
}

impl MambaBlockConfig {
    /// State 256, conv width 4, expansion 2.
    pub fn new(d_model: usize, variant: MambaVariant) -> Self {
        MambaBlockConfig {
            d_model,
            d_state: 256,
            conv_width: 4,
            expand: 2,
            variant,
            chunk_len: 64,
            head_dim: 64,
        }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn n_heads(&self) -> usize {
        self.d_inner() / self.head_dim
    }

    pub fn dt_rank(&self) -> usize {
        self.d_model.div_ceil(16)
    }

    fn dt_dim(&self) -> usize {
        match self.variant {
            MambaVariant::Mamba1 => self.dt_rank(),
            MambaVariant::Mamba2 => self.n_heads(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_state == 0 || self.conv_width == 0 || self.expand == 0 {
            return Err(Error::Config("mamba dimensions must be positive".into()));
        }
        if self.variant == MambaVariant::Mamba2 {
            if self.head_dim == 0 || self.d_inner() % self.head_dim != 0 {
                return Err(Error::Config(format!(
                    "d_inner {} is not divisible by head_dim {}",
                    self.d_inner(),
                    self.head_dim
                )));
            }
            if self.chunk_len == 0 {
                return Err(Error::Config("chunk_len must be >= 1".into()));
            }
        }
        Ok(())
    }
}

fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// One Mamba block: gated input projection, causal depthwise conv, selective scan,
/// output projection. Parameters live in a [`ParamStore`] under `prefix`.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub cfg: MambaBlockConfig,
    pub prefix: String,
}

impl MambaBlock {
    pub fn new(cfg: MambaBlockConfig, prefix: impl Into<String>) -> Result<Self> {
        cfg.validate()?;
        Ok(MambaBlock {
            cfg,
            prefix: prefix.into(),
        })
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn init<F: Real, R: Rng>(&self, store: &mut ParamStore<F>, rng: &mut R) {
        let c = &self.cfg;
        let (dm, di, ds) = (c.d_model, c.d_inner(), c.d_state);
        store.insert(self.name("in_proj.w"), lecun_uniform(rng, dm, 2 * di));
        store.insert(self.name("in_proj.b"), Array2::zeros((1, 2 * di)));
        store.insert(
            self.name("conv.w"),
            uniform(rng, c.conv_width, di, 1.0 / (c.conv_width as f64).sqrt()),
        );
        store.insert(self.name("conv.b"), Array2::zeros((1, di)));
        store.insert(self.name("x_proj.w"), lecun_uniform(rng, di, c.dt_dim() + 2 * ds));
        let mut dt_init = |n: usize| -> Array2<F> {
            Array2::from_shape_simple_fn((1, n), || {
                let u: f64 = rng.random();
                let dt = (1e-3f64.ln() + u * (1e-1f64.ln() - 1e-3f64.ln())).exp();
                F::of(inv_softplus(dt))
            })
        };
        match c.variant {
            MambaVariant::Mamba1 => {
                let b = dt_init(di);
                store.insert(self.name("dt_proj.b"), b);
                let r = c.dt_rank();
                store.insert(self.name("dt_proj.w"), uniform(rng, r, di, (r as f64).powf(-0.5)));
                let a = Array2::from_shape_fn((di, ds), |(_, n)| F::of(((n + 1) as f64).ln()));
                store.insert(self.name("a_log"), a);
            }
            MambaVariant::Mamba2 => {
                let b = dt_init(c.n_heads());
                store.insert(self.name("dt_bias"), b);
                let a = Array2::from_shape_simple_fn((c.n_heads(), 1), || {
                    F::of(rng.random_range(1.0f64..16.0).ln())
                });
                store.insert(self.name("a_log"), a);
            }
        }
        store.insert(self.name("d_skip"), Array2::from_elem((1, di), F::one()));
        store.insert(self.name("out_proj.w"), lecun_uniform(rng, di, dm));
    }

    /// `u: T x d_model` to `T x d_model`.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, u: Var) -> Result<Var> {
        let c = &self.cfg;
        let (di, ds) = (c.d_inner(), c.d_state);
        if g.value(u).ncols() != c.d_model {
            return Err(Error::shape(format!(
                "mamba block expects {} channels, got {}",
                c.d_model,
                g.value(u).ncols()
            )));
        }
        if g.value(u).nrows() == 0 {
            return Err(Error::Empty("mamba block input has no frames".into()));
        }
        let p = |g: &mut Graph<F>, leaf: &str| g.param(store, &self.name(leaf));

        let w_in = p(g, "in_proj.w")?;
        let b_in = p(g, "in_proj.b")?;
        let xz = g.linear(u, w_in, b_in)?;
        let x = g.slice_cols(xz, 0, di)?;
        let z = g.slice_cols(xz, di, di)?;

        let cw = p(g, "conv.w")?;
        let cb = p(g, "conv.b")?;
        let xc = g.causal_depthwise_conv(x, cw, cb)?;
        let xc = g.silu(xc);

        let w_x = p(g, "x_proj.w")?;
        let proj = g.matmul(xc, w_x)?;
        let dt_dim = c.dt_dim();
        let dt_raw = g.slice_cols(proj, 0, dt_dim)?;
        let b = g.slice_cols(proj, dt_dim, ds)?;
        let cm = g.slice_cols(proj, dt_dim + ds, ds)?;

        let a_log = p(g, "a_log")?;
        let d = p(g, "d_skip")?;
        let y = match c.variant {
            MambaVariant::Mamba1 => {
                let w_dt = p(g, "dt_proj.w")?;
                let b_dt = p(g, "dt_proj.b")?;
                let dt = g.linear(dt_raw, w_dt, b_dt)?;
                let delta = g.softplus(dt);
                g.selective_scan(xc, delta, b, cm, a_log, d, AScheme::Diagonal, ScanKernel::Sequential)?
            }
            MambaVariant::Mamba2 => {
                let b_dt = p(g, "dt_bias")?;
                let dt = g.add_bias(dt_raw, b_dt)?;
                let dt = g.softplus(dt);
                let delta = g.repeat_cols(dt, c.head_dim);
                g.selective_scan(
                    xc,
                    delta,
                    b,
                    cm,
                    a_log,
                    d,
                    AScheme::PerHead {
                        head_dim: c.head_dim,
                    },
                    ScanKernel::Chunked(c.chunk_len),
                )?
            }
        };
        let gate = g.silu(z);
        let gated = g.mul(y, gate)?;
        let w_out = p(g, "out_proj.w")?;
        g.matmul(gated, w_out)
    }

    /// Output of the final token, `1 x d_model`.
    pub fn last_state_readout<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        u: Var,
    ) -> Result<Var> {
        let t_len = g.value(u).nrows();
        if t_len == 0 {
            return Err(Error::Empty("cannot read out the last token of an empty sequence".into()));
        }
        let out = self.forward(g, store, u)?;
        g.slice_rows(out, t_len - 1, 1)
    }

    /// Convenience forward without gradient bookkeeping.
    pub fn apply<F: Real>(&self, store: &ParamStore<F>, u: &Array2<F>) -> Result<Array2<F>> {
        let mut g = Graph::inference();
        let uv = g.constant(u.clone());
        let out = self.forward(&mut g, store, uv)?;
        Ok(g.take_value(out))
    }
}
