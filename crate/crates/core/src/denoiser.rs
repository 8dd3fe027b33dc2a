//! Noise predictor: gesture encoder, AdaLN-modulated Mamba blocks, modulated final
//! layer and pointwise gesture decoder.

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{ConvSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{lecun_uniform, ParamStore};
use crate::real::Real;
use crate::ssm::{MambaBlock, MambaBlockConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub num_blocks: usize,
    pub d_hidden: usize,
    /// D + 6
    pub gesture_channels: usize,
    /// Per-block Mamba settings; `d_model` must equal `d_hidden`.
    pub block: MambaBlockConfig,
    /// Zero-initialized residual gate next to scale and shift.
    pub adaln_gate: bool,
    pub encoder_kernel: usize,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(Error::Config("num_blocks must be >= 1".into()));
        }
        if self.block.d_model != self.d_hidden {
            return Err(Error::Config(format!(
                "block d_model {} != d_hidden {}",
                self.block.d_model, self.d_hidden
            )));
        }
        if self.encoder_kernel % 2 == 0 {
            return Err(Error::Config("encoder kernel must be odd".into()));
        }
        if self.gesture_channels == 0 {
            return Err(Error::Config("gesture_channels must be positive".into()));
        }
        self.block.validate()
    }
}

/// Per-token modulation regressed from the condition.
#[derive(Clone, Copy, Debug)]
pub struct Modulation {
    pub gamma: Var,
    pub beta: Var,
    pub gate: Option<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModTarget {
    Block(usize),
    Final,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    blocks: Vec<MambaBlock>,
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.num_blocks)
            .map(|m| MambaBlock::new(cfg.block.clone(), format!("den.blocks.{m}.mamba")))
            .collect::<Result<_>>()?;
        Ok(Denoiser { cfg, blocks })
    }

    fn mod_prefix(target: ModTarget) -> String {
        match target {
            ModTarget::Block(m) => format!("den.blocks.{m}.mod"),
            ModTarget::Final => "den.final.mod".to_string(),
        }
    }

    fn mod_width(&self, target: ModTarget) -> usize {
        match target {
            ModTarget::Block(_) if self.cfg.adaln_gate => 3,
            _ => 2,
        }
    }

    pub fn init<F: Real, R: Rng>(&self, store: &mut ParamStore<F>, rng: &mut R) {
        let (c, h, k) = (
            self.cfg.gesture_channels,
            self.cfg.d_hidden,
            self.cfg.encoder_kernel,
        );
        store.insert("den.enc.w", lecun_uniform(rng, k * c, h));
        store.insert("den.enc.b", Array2::zeros((1, h)));
        for (m, block) in self.blocks.iter().enumerate() {
            let target = ModTarget::Block(m);
            let width = self.mod_width(target) * h;
            let p = Self::mod_prefix(target);
            store.insert(format!("{p}.w"), Array2::zeros((h, width)));
            store.insert(format!("{p}.b"), Array2::zeros((1, width)));
            block.init(store, rng);
        }
        store.insert("den.final.mod.w", Array2::zeros((h, 2 * h)));
        store.insert("den.final.mod.b", Array2::zeros((1, 2 * h)));
        store.insert("den.dec.w", lecun_uniform(rng, h, c));
        store.insert("den.dec.b", Array2::zeros((1, c)));
    }

    /// Kernel-3 (by default) temporal convolution `T x (D+6)` to `T x D''`, same length.
    pub fn gesture_encode<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let cols = g.value(x).ncols();
        if cols != self.cfg.gesture_channels {
            return Err(Error::shape(format!(
                "gesture has {cols} channels, model expects {}",
                self.cfg.gesture_channels
            )));
        }
        if g.value(x).nrows() == 0 {
            return Err(Error::Empty("gesture sequence has no frames".into()));
        }
        let w = g.param(store, "den.enc.w")?;
        let b = g.param(store, "den.enc.b")?;
        g.conv1d(x, w, Some(b), ConvSpec::same(self.cfg.encoder_kernel))
    }

    /// Affine map of the condition split into (gamma, beta[, gate]).
    pub fn modulate<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        c: Var,
        target: ModTarget,
    ) -> Result<Modulation> {
        let h = self.cfg.d_hidden;
        if g.value(c).ncols() != h {
            return Err(Error::shape(format!(
                "condition has {} channels, expected {h}",
                g.value(c).ncols()
            )));
        }
        let p = Self::mod_prefix(target);
        let w = g.param(store, &format!("{p}.w"))?;
        let b = g.param(store, &format!("{p}.b"))?;
        let all = g.linear(c, w, b)?;
        let gamma = g.slice_cols(all, 0, h)?;
        let beta = g.slice_cols(all, h, h)?;
        let gate = if self.mod_width(target) == 3 {
            Some(g.slice_cols(all, 2 * h, h)?)
        } else {
            None
        };
        Ok(Modulation { gamma, beta, gate })
    }

    /// `z + gate * mamba(LN(z) * (1 + gamma) + beta)`.
    pub fn adaln_block<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        m: usize,
        z: Var,
        c: Var,
    ) -> Result<Var> {
        if g.value(z).nrows() != g.value(c).nrows() {
            return Err(Error::shape(format!(
                "latent has {} frames, condition {}",
                g.value(z).nrows(),
                g.value(c).nrows()
            )));
        }
        let block = self
            .blocks
            .get(m)
            .ok_or_else(|| Error::InvalidArgument(format!("no block {m}")))?;
        let md = self.modulate(g, store, c, ModTarget::Block(m))?;
        let normed = g.layer_norm(z);
        let modulated = g.scale_shift(normed, md.gamma, md.beta)?;
        let mixed = block.forward(g, store, modulated)?;
        let update = match md.gate {
            Some(gate) => g.mul(gate, mixed)?,
            None => mixed,
        };
        g.add(z, update)
    }

    /// `LN(z) * (1 + gamma_f) + beta_f`.
    pub fn final_layer<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, z: Var, c: Var) -> Result<Var> {
        if g.value(z).dim() != g.value(c).dim() {
            return Err(Error::shape("final layer latent/condition mismatch"));
        }
        let md = self.modulate(g, store, c, ModTarget::Final)?;
        let normed = g.layer_norm(z);
        g.scale_shift(normed, md.gamma, md.beta)
    }

    /// Pointwise projection `T x D''` to `T x (D+6)`.
    pub fn gesture_decode<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, h: Var) -> Result<Var> {
        if g.value(h).ncols() != self.cfg.d_hidden {
            return Err(Error::shape("decoder input width"));
        }
        let w = g.param(store, "den.dec.w")?;
        let b = g.param(store, "den.dec.b")?;
        g.linear(h, w, b)
    }

    /// Predicted noise for a noisy gesture `g_n` under condition `c` (step already embedded).
    pub fn denoise<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, g_n: Var, c: Var) -> Result<Var> {
        let mut z = self.gesture_encode(g, store, g_n)?;
        if g.value(c).nrows() != g.value(z).nrows() {
            return Err(Error::shape(format!(
                "gesture has {} frames, condition {}",
                g.value(z).nrows(),
                g.value(c).nrows()
            )));
        }
        for m in 0..self.cfg.num_blocks {
            z = self.adaln_block(g, store, m, z, c)?;
        }
        let z = self.final_layer(g, store, z, c)?;
        self.gesture_decode(g, store, z)
    }

    pub fn predict<F: Real>(&self, store: &ParamStore<F>, g_n: &Array2<F>, c: &Array2<F>) -> Result<Array2<F>> {
        let mut g = Graph::inference();
        let gv = g.constant(g_n.clone());
        let cv = g.constant(c.clone());
        let out = self.denoise(&mut g, store, gv, cv)?;
        Ok(g.take_value(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::layer_norm_rows;
    use crate::ssm::MambaVariant;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(c: usize, h: usize, variant: MambaVariant) -> DenoiserConfig {
        let mut block = MambaBlockConfig::new(h, variant);
        block.d_state = 4;
        block.head_dim = 4;
        block.chunk_len = 3;
        DenoiserConfig {
            num_blocks: 2,
            d_hidden: h,
            gesture_channels: c,
            block,
            adaln_gate: true,
            encoder_kernel: 3,
        }
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_encoder_kernel_reproduces_input() {
        let den = Denoiser::new(cfg(8, 8, MambaVariant::Mamba2)).unwrap();
        let mut store = ParamStore::<f64>::new();
        den.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let w = store.get_mut("den.enc.w").unwrap();
        w.fill(0.0);
        for i in 0..8 {
            w[[8 + i, i]] = 1.0; // center tap
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 5, 8);
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let h = den.gesture_encode(&mut g, &store, xv).unwrap();
        assert_eq!(g.value(h), &x);
    }

    #[test]
    fn encoder_channel_mismatch_is_an_error() {
        let den = Denoiser::new(cfg(6, 8, MambaVariant::Mamba2)).unwrap();
        let mut store = ParamStore::<f64>::new();
        den.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::inference();
        let xv = g.constant(Array2::zeros((4, 5)));
        assert!(matches!(den.gesture_encode(&mut g, &store, xv), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_init_modulation_and_bias_passthrough() {
        let den = Denoiser::new(cfg(6, 8, MambaVariant::Mamba2)).unwrap();
        let mut store = ParamStore::<f64>::new();
        den.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = random(&mut rng, 4, 8);
        let mut g = Graph::inference();
        let cv = g.constant(c);
        let md = den.modulate(&mut g, &store, cv, ModTarget::Block(0)).unwrap();
        for v in [md.gamma, md.beta, md.gate.unwrap()] {
            assert!(g.value(v).iter().all(|&x| x == 0.0));
        }

        let bias = random(&mut rng, 1, 24);
        store.get_mut("den.blocks.1.mod.b").unwrap().assign(&bias);
        let mut g = Graph::inference();
        let cv = g.constant(Array2::zeros((3, 8)));
        let md = den.modulate(&mut g, &store, cv, ModTarget::Block(1)).unwrap();
        for t in 0..3 {
            for j in 0..8 {
                assert_eq!(g.value(md.gamma)[[t, j]], bias[[0, j]]);
                assert_eq!(g.value(md.beta)[[t, j]], bias[[0, 8 + j]]);
                assert_eq!(g.value(md.gate.unwrap())[[t, j]], bias[[0, 16 + j]]);
            }
        }
    }

    #[test]
    fn unmodulated_unit_gate_block() {
        let den = Denoiser::new(cfg(6, 8, MambaVariant::Mamba1)).unwrap();
        let mut store = ParamStore::<f64>::new();
        den.init(&mut store, &mut ChaCha8Rng::seed_from_u64(3));
        // gamma = beta = 0, gate = 1
        let b = store.get_mut("den.blocks.0.mod.b").unwrap();
        b.slice_mut(ndarray::s![.., 16..]).fill(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = random(&mut rng, 5, 8);
        let c = random(&mut rng, 5, 8);
        let mut g = Graph::inference();
        let (zv, cv) = (g.constant(z.clone()), g.constant(c));
        let out = den.adaln_block(&mut g, &store, 0, zv, cv).unwrap();
        let block = MambaBlock::new(den.cfg.block.clone(), "den.blocks.0.mamba").unwrap();
        let expected = &z + &block.apply(&store, &layer_norm_rows(&z)).unwrap();
        let diff = (g.value(out) - &expected).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
        assert!(diff <= 1e-14);
    }

    #[test]
    fn final_layer_cases() {
        let den = Denoiser::new(cfg(6, 8, MambaVariant::Mamba2)).unwrap();
        let mut store = ParamStore::<f64>::new();
        den.init(&mut store, &mut ChaCha8Rng::seed_from_u64(5));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = random(&mut rng, 4, 8);
        let c = random(&mut rng, 4, 8);
        let mut g = Graph::inference();
        let (zv, cv) = (g.constant(z.clone()), g.constant(c.clone()));
        let out = den.final_layer(&mut g, &store, zv, cv).unwrap();
        assert_eq!(g.value(out), &layer_norm_rows(&z));

        // constant tokens normalize to zero, leaving beta_f
        let beta = random(&mut rng, 1, 8);
        store
            .get_mut("den.final.mod.b")
            .unwrap()
            .slice_mut(ndarray::s![.., 8..])
            .assign(&beta);
        let zc = Array2::from_shape_fn((4, 8), |(t, _)| t as f64 * 0.5 - 1.0);
        let mut g = Graph::inference();
        let (zv, cv) = (g.constant(zc), g.constant(c));
        let out = den.final_layer(&mut g, &store, zv, cv).unwrap();
        for t in 0..4 {
            for j in 0..8 {
                assert!((g.value(out)[[t, j]] - beta[[0, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoder_zero_and_identity() {
        let den = Denoiser::new(cfg(8, 8, MambaVariant::Mamba2)).unwrap();
        let mut store = ParamStore::<f64>::new();
        den.init(&mut store, &mut ChaCha8Rng::seed_from_u64(7));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = random(&mut rng, 3, 8);
        store.get_mut("den.dec.w").unwrap().fill(0.0);
        let mut g = Graph::inference();
        let hv = g.constant(h.clone());
        let out = den.gesture_decode(&mut g, &store, hv).unwrap();
        assert!(g.value(out).iter().all(|&v| v == 0.0));

        store.insert("den.dec.w", Array2::eye(8));
        let mut g = Graph::inference();
        let hv = g.constant(h.clone());
        let out = den.gesture_decode(&mut g, &store, hv).unwrap();
        assert_eq!(g.value(out), &h);
    }

    #[test]
    fn gate_off_config_has_two_way_modulation() {
        let mut c = cfg(6, 8, MambaVariant::Mamba2);
        c.adaln_gate = false;
        let den = Denoiser::new(c).unwrap();
        let mut store = ParamStore::<f32>::new();
        den.init(&mut store, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(store.get("den.blocks.0.mod.w").unwrap().ncols(), 16);
        let eps = den
            .predict(&store, &Array2::zeros((5, 6)), &Array2::zeros((5, 8)))
            .unwrap();
        assert_eq!(eps.dim(), (5, 6));
    }
}
