use dim_gesture::autodiff::{ConvSpec, Graph, PadMode};
use dim_gesture::condition::{sinusoidal_embed, StyleExtractor};
use dim_gesture::config::{Config, ModelConfig, Preset};
use dim_gesture::denoiser::{Denoiser, DenoiserConfig, ModTarget};
use dim_gesture::model::GestureModel;
use dim_gesture::params::ParamStore;
use dim_gesture::ssm::{MambaBlock, MambaBlockConfig, MambaVariant};
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_model_config(variant: MambaVariant, style: StyleExtractor) -> ModelConfig {
    let mut m = Config::preset(Preset::Tiny).model;
    m.d_hidden = 8;
    m.d_state = 4;
    m.head_dim = 4;
    m.chunk_len = 3;
    m.feature_dim = 4;
    m.feature_rate_hz = 40.0;
    m.downsample_kernel = 5;
    m.variant = variant;
    m.style_extractor = style;
    m.num_blocks = 2;
    m
}

fn rand_array(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-scale..scale))
}

/// Every parameter nudged away from its initial value so that zero-initialized
/// modulation and gates carry gradient.
fn perturbed(store: &ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) -> ParamStore<f64> {
    let mut out = store.clone();
    for (_, v) in out.iter_mut() {
        v.mapv_inplace(|x| x + rng.random_range(-scale..scale));
    }
    out
}

fn layer_norm(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    let n = x.ncols() as f64;
    for mut row in out.rows_mut() {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + 1e-6).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

/// Direct-loop convolution; `w` rows are tap-major.
fn conv_oracle(x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>, kernel: usize, stride: usize, pad: usize, replicate: bool) -> Array2<f64> {
    let (t_in, c_in) = x.dim();
    let c_out = w.ncols();
    let t_out = (t_in + 2 * pad - kernel) / stride + 1;
    let mut y = Array2::zeros((t_out, c_out));
    for o in 0..t_out {
        for co in 0..c_out {
            let mut acc = b[[0, co]];
            for j in 0..kernel {
                let pos = (o * stride + j) as isize - pad as isize;
                let src = if pos >= 0 && (pos as usize) < t_in {
                    pos as usize
                } else if replicate {
                    pos.clamp(0, t_in as isize - 1) as usize
                } else {
                    continue;
                };
                for ci in 0..c_in {
                    acc += x[[src, ci]] * w[[j * c_in + ci, co]];
                }
            }
            y[[o, co]] = acc;
        }
    }
    y
}

fn affine(x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut y = Array2::zeros((x.nrows(), w.ncols()));
    for t in 0..x.nrows() {
        for o in 0..w.ncols() {
            y[[t, o]] = b[[0, o]] + (0..x.ncols()).map(|i| x[[t, i]] * w[[i, o]]).sum::<f64>();
        }
    }
    y
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    (a - b).iter().fold(0.0f64, |m, d| m.max(d.abs()))
}

fn scalar_loss(model: &GestureModel, store: &ParamStore<f64>, g_n: &Array2<f64>, z_a: &Array2<f64>, w: &Array2<f64>, n: usize) -> (f64, Option<ParamStore<f64>>) {
    let mut g = Graph::new();
    let gv = g.constant(g_n.clone());
    let zv = g.constant(z_a.clone());
    let out = model.predict_noise(&mut g, store, gv, zv, n).unwrap();
    let wv = g.constant(w.clone());
    let loss = g.weighted_sum(out, wv).unwrap();
    let value = g.value(loss)[[0, 0]];
    let grads = g.backward(loss).unwrap().into_params(store);
    (value, Some(grads))
}

fn gradient_check(variant: MambaVariant, style: StyleExtractor, seed: u64) {
    let cfg = tiny_model_config(variant, style);
    let channels = 5;
    let model = GestureModel::new(&cfg, channels, 20.0, 50).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = perturbed(&model.init(&mut rng), &mut rng, 0.2);
    let frames = 6;
    let g_n = rand_array(&mut rng, frames, channels, 1.0);
    let z_a = rand_array(&mut rng, 2 * frames + 1, 4, 1.0);
    let w = rand_array(&mut rng, frames, channels, 1.0);
    let n = 17;
    let (_, grads) = scalar_loss(&model, &store, &g_n, &z_a, &w, n);
    let grads = grads.unwrap();
    let h = 1e-6;
    let mut checked = 0;
    for (name, value) in store.iter() {
        let gp = grads.get(name).unwrap();
        // a few entries per group, always including the largest gradient
        let mut idx: Vec<(usize, usize)> = (0..3)
            .map(|_| (rng.random_range(0..value.nrows()), rng.random_range(0..value.ncols())))
            .collect();
        let argmax = gp
            .indexed_iter()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, _)| i)
            .unwrap();
        idx.push(argmax);
        for (r, c) in idx {
            let mut plus = store.clone();
            plus.get_mut(name).unwrap()[[r, c]] += h;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap()[[r, c]] -= h;
            let fd = (scalar_loss(&model, &plus, &g_n, &z_a, &w, n).0 - scalar_loss(&model, &minus, &g_n, &z_a, &w, n).0) / (2.0 * h);
            let an = gp[[r, c]];
            let tol = 1e-3 * fd.abs().max(an.abs()) + 1e-7;
            assert!((fd - an).abs() <= tol, "{name}[{r},{c}]: analytic {an} vs fd {fd}");
            checked += 1;
        }
    }
    assert!(checked >= 4 * store.len());
}

#[test]
fn gradients_match_finite_differences_mamba2() {
    gradient_check(MambaVariant::Mamba2, StyleExtractor::Mamba, 1);
}

#[test]
fn gradients_match_finite_differences_mamba1_conv_style() {
    gradient_check(MambaVariant::Mamba1, StyleExtractor::Conv, 2);
}

fn denoiser(d_hidden: usize, channels: usize, kernel: usize, gate: bool) -> Denoiser {
    let mut block = MambaBlockConfig::new(d_hidden, MambaVariant::Mamba2);
    block.d_state = 4;
    block.head_dim = 4;
    block.chunk_len = 2;
    Denoiser::new(DenoiserConfig {
        num_blocks: 3,
        d_hidden,
        gesture_channels: channels,
        block,
        adaln_gate: gate,
        encoder_kernel: kernel,
    })
    .unwrap()
}

#[test]
fn blocks_are_exact_identities_at_init() {
    let den = denoiser(8, 5, 3, true);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    den.init(&mut store, &mut rng);
    let z = rand_array(&mut rng, 7, 8, 3.0);
    let c = rand_array(&mut rng, 7, 8, 3.0);
    for m in 0..3 {
        let mut g = Graph::inference();
        let (zv, cv) = (g.constant(z.clone()), g.constant(c.clone()));
        let out = den.adaln_block(&mut g, &store, m, zv, cv).unwrap();
        assert_eq!(g.value(out), &z);
    }
}

#[test]
fn init_time_output_has_closed_form() {
    let den = denoiser(8, 5, 3, true);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    den.init(&mut store, &mut rng);
    // nonzero encoder and decoder biases so they are exercised
    store.get_mut("den.enc.b").unwrap().mapv_inplace(|_| 0.3);
    store.get_mut("den.dec.b").unwrap().mapv_inplace(|_| -0.2);
    let g_n = rand_array(&mut rng, 9, 5, 2.0);
    let c = rand_array(&mut rng, 9, 8, 2.0);
    let got = den.predict(&store, &g_n, &c).unwrap();
    let enc = conv_oracle(&g_n, store.get("den.enc.w").unwrap(), store.get("den.enc.b").unwrap(), 3, 1, 1, false);
    let want = affine(&layer_norm(&enc), store.get("den.dec.w").unwrap(), store.get("den.dec.b").unwrap());
    assert!(max_abs_diff(&got, &want) <= 1e-12);
}

#[test]
fn hand_composition_of_the_four_ops() {
    let den = Denoiser::new(DenoiserConfig {
        num_blocks: 1,
        d_hidden: 8,
        gesture_channels: 3,
        block: MambaBlockConfig {
            d_model: 8,
            d_state: 4,
            conv_width: 4,
            expand: 2,
            variant: MambaVariant::Mamba2,
            chunk_len: 2,
            head_dim: 4,
        },
        adaln_gate: true,
        encoder_kernel: 3,
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    den.init(&mut store, &mut rng);
    let store = perturbed(&store, &mut rng, 0.3);
    let g_n = rand_array(&mut rng, 4, 3, 1.0);
    let c = rand_array(&mut rng, 4, 8, 1.0);

    let p = |name: &str| store.get(name).unwrap().clone();
    let z = conv_oracle(&g_n, &p("den.enc.w"), &p("den.enc.b"), 3, 1, 1, false);
    let m0 = affine(&c, &p("den.blocks.0.mod.w"), &p("den.blocks.0.mod.b"));
    let (gamma, beta, gate) = (m0.slice(s![.., 0..8]), m0.slice(s![.., 8..16]), m0.slice(s![.., 16..24]));
    let u = &layer_norm(&z) * &gamma.mapv(|v| 1.0 + v) + beta;
    let block = MambaBlock::new(den.cfg.block.clone(), "den.blocks.0.mamba").unwrap();
    let mixed = block.apply(&store, &u).unwrap();
    let z = &z + &(&gate * &mixed);
    let mf = affine(&c, &p("den.final.mod.w"), &p("den.final.mod.b"));
    let zf = &layer_norm(&z) * &mf.slice(s![.., 0..8]).mapv(|v| 1.0 + v) + mf.slice(s![.., 8..16]);
    let want = affine(&zf, &p("den.dec.w"), &p("den.dec.b"));

    let got = den.predict(&store, &g_n, &c).unwrap();
    assert!(max_abs_diff(&got, &want) <= 1e-12);
    assert_eq!(got, den.predict(&store, &g_n, &c).unwrap());
}

#[test]
fn modulation_matches_affine_oracle() {
    let den = denoiser(8, 5, 3, true);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::<f64>::new();
    den.init(&mut store, &mut rng);
    let store = perturbed(&store, &mut rng, 0.5);
    let c = rand_array(&mut rng, 5, 8, 1.0);
    let mut g = Graph::inference();
    let cv = g.constant(c.clone());
    let md = den.modulate(&mut g, &store, cv, ModTarget::Block(1)).unwrap();
    let want = affine(&c, store.get("den.blocks.1.mod.w").unwrap(), store.get("den.blocks.1.mod.b").unwrap());
    assert!(max_abs_diff(g.value(md.gamma), &want.slice(s![.., 0..8]).to_owned()) <= 1e-12);
    assert!(max_abs_diff(g.value(md.beta), &want.slice(s![.., 8..16]).to_owned()) <= 1e-12);
    assert!(max_abs_diff(g.value(md.gate.unwrap()), &want.slice(s![.., 16..24]).to_owned()) <= 1e-12);
}

/// Output sensitivity of frame 3 to input frame `src`.
fn coupling(den: &Denoiser, store: &ParamStore<f64>, g_n: &Array2<f64>, src: usize) -> f64 {
    let enc = |x: &Array2<f64>| {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let out = den.gesture_encode(&mut g, store, xv).unwrap();
        g.take_value(out)
    };
    let mut bumped = g_n.clone();
    bumped[[src, 0]] += 1e-3;
    (&enc(&bumped) - &enc(g_n)).row(3).iter().map(|v| v.abs()).sum()
}

#[test]
fn encoder_kernel_sets_temporal_coupling() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g_n = rand_array(&mut rng, 7, 5, 1.0);
    for kernel in [1, 3] {
        let den = denoiser(8, 5, kernel, true);
        let mut store = ParamStore::<f64>::new();
        den.init(&mut store, &mut rng);
        assert!(coupling(&den, &store, &g_n, 3) > 0.0);
        for src in [2, 4] {
            let c = coupling(&den, &store, &g_n, src);
            assert_eq!(c > 0.0, kernel == 3, "kernel {kernel}, frame {src}");
        }
        // constant input stays constant away from the zero-padded edges
        let constant = Array2::from_elem((7, 5), 0.7);
        let mut g = Graph::inference();
        let xv = g.constant(constant);
        let out = den.gesture_encode(&mut g, &store, xv).unwrap();
        let out = g.value(out);
        for t in 2..5 {
            assert!((&out.row(t) - &out.row(1)).iter().all(|d| d.abs() < 1e-12));
        }
    }
}

fn condition_model(style: StyleExtractor) -> (GestureModel, ParamStore<f64>) {
    let cfg = tiny_model_config(MambaVariant::Mamba2, style);
    let model = GestureModel::new(&cfg, 5, 20.0, 100).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let store = model.init(&mut rng);
    (model, store)
}

#[test]
fn fuse_broadcast_layout() {
    let (model, _) = condition_model(StyleExtractor::Mamba);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let z_a = rand_array(&mut rng, 7, 4, 1.0);
    let z_last = rand_array(&mut rng, 1, 4, 1.0);
    let mut g = Graph::inference();
    let (a, l) = (g.constant(z_a.clone()), g.constant(z_last.clone()));
    let fused = model.cond.fuse_broadcast(&mut g, a, l).unwrap();
    let f = g.value(fused);
    assert_eq!(f.dim(), (7, 8));
    assert_eq!(f.slice(s![.., ..4]), z_a);
    for t in 0..7 {
        assert_eq!(f.slice(s![t, 4..]), z_last.row(0));
    }
    let zero = g.constant(Array2::zeros((1, 4)));
    let fz = model.cond.fuse_broadcast(&mut g, a, zero).unwrap();
    assert!(g.value(fz).slice(s![.., 4..]).iter().all(|&v| v == 0.0));
    let wrong = g.constant(Array2::zeros((1, 3)));
    assert!(model.cond.fuse_broadcast(&mut g, a, wrong).is_err());
}

fn with_averaging_downsampler(model: &GestureModel, store: &ParamStore<f64>) -> ParamStore<f64> {
    let mut s = store.clone();
    let k = model.cond.cfg.downsample_kernel;
    let c = 2 * model.cond.cfg.feature_dim;
    s.get_mut("cond.down.w").unwrap().fill(1.0 / (k * c) as f64);
    s.get_mut("cond.down.b").unwrap().fill(0.0);
    s
}

fn downsample(model: &GestureModel, store: &ParamStore<f64>, x: &Array2<f64>, target: usize) -> Array2<f64> {
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let out = model.cond.downsample_to_frames(&mut g, store, xv, target).unwrap();
    g.take_value(out)
}

#[test]
fn downsampler_length_dc_and_support() {
    // stride 5 and kernel 201 as in the mel configuration
    let mut cfg = tiny_model_config(MambaVariant::Mamba2, StyleExtractor::Mamba);
    cfg.feature_rate_hz = 100.0;
    cfg.downsample_kernel = 201;
    let model = GestureModel::new(&cfg, 5, 20.0, 100).unwrap();
    let store = with_averaging_downsampler(&model, &model.init(&mut ChaCha8Rng::seed_from_u64(10)));
    assert_eq!(model.cond.cfg.stride().unwrap(), 5);
    assert_eq!(model.cond.cfg.downsample_spec().unwrap().out_len(2000), 2000usize.div_ceil(5));

    let constant = Array2::from_elem((2000, 8), 1.75);
    let out = downsample(&model, &store, &constant, 400);
    assert_eq!(out.dim(), (400, 8));
    // frames whose 201-tap window lies inside the input
    for t in 20..380 {
        assert!(out.row(t).iter().all(|v| (v - 1.75).abs() < 1e-12));
    }

    let mut delta = Array2::zeros((2000, 8));
    delta[[1000, 3]] = 1.0;
    let out = downsample(&model, &store, &delta, 400);
    let support = (0..400).filter(|&t| out.row(t).iter().any(|&v| v != 0.0)).count();
    assert_eq!(support, 201usize.div_ceil(5));

    // trim and repeat-last padding
    let short = downsample(&model, &store, &constant.slice(s![..1990, ..]).to_owned(), 400);
    assert_eq!(short.dim(), (400, 8));
    assert_eq!(short.row(399), short.row(397));
    assert_eq!(downsample(&model, &store, &constant, 300).dim(), (300, 8));
}

#[test]
fn non_integer_stride_names_both_rates() {
    let mut cfg = tiny_model_config(MambaVariant::Mamba2, StyleExtractor::Mamba);
    cfg.feature_rate_hz = 50.0;
    let msg = GestureModel::new(&cfg, 5, 30.0, 100).unwrap_err().to_string();
    assert!(msg.contains("50") && msg.contains("30"), "{msg}");
}

#[test]
fn step_embedding_offsets_every_frame_equally() {
    let (model, store) = condition_model(StyleExtractor::Mamba);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let z_l = rand_array(&mut rng, 6, 8, 1.0);
    let cond = |store: &ParamStore<f64>, n: usize| {
        let mut g = Graph::inference();
        let zv = g.constant(z_l.clone());
        let c = model.cond.build_condition(&mut g, store, zv, n, 100).unwrap();
        g.take_value(c)
    };
    let diff = &cond(&store, 3) - &cond(&store, 70);
    assert!(diff.row(0).iter().any(|v| v.abs() > 1e-6));
    for t in 1..6 {
        assert!((&diff.row(t) - &diff.row(0)).iter().all(|d| d.abs() < 1e-12));
    }

    // step MLP oracle: Linear, SiLU, Linear on the interleaved embedding
    let e = sinusoidal_embed(3.0, 8).insert_axis(ndarray::Axis(0));
    let p = |n: &str| store.get(n).unwrap().clone();
    let h = affine(&e, &p("cond.step.w1"), &p("cond.step.b1")).mapv(|x| x / (1.0 + (-x).exp()));
    let emb = affine(&h, &p("cond.step.w2"), &p("cond.step.b2"));
    let c3 = cond(&store, 3);
    for t in 0..6 {
        assert!((&c3.row(t) - &z_l.row(t) - &emb.row(0)).iter().all(|d| d.abs() < 1e-12));
    }

    let mut zeroed = store.clone();
    for name in ["cond.step.w2", "cond.step.b2"] {
        zeroed.get_mut(name).unwrap().fill(0.0);
    }
    assert_eq!(cond(&zeroed, 42), z_l);

    let mut g = Graph::inference();
    let zv = g.constant(z_l.clone());
    assert!(model.cond.build_condition(&mut g, &store, zv, 0, 100).is_err());
    assert!(model.cond.build_condition(&mut g, &store, zv, 101, 100).is_err());
}

fn conv_style(model: &GestureModel, store: &ParamStore<f64>, z_a: &Array2<f64>) -> Array2<f64> {
    let mut g = Graph::inference();
    let zv = g.constant(z_a.clone());
    let out = model.cond.conv_style_extractor(&mut g, store, zv).unwrap();
    g.take_value(out)
}

#[test]
fn conv_style_extractor_cases() {
    let (model, store) = condition_model(StyleExtractor::Conv);
    let store = perturbed(&store, &mut ChaCha8Rng::seed_from_u64(12), 0.1);
    let p = |n: &str| store.get(n).unwrap().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(13);

    let one = rand_array(&mut rng, 1, 4, 1.0);
    let got = conv_style(&model, &store, &one);
    assert!(max_abs_diff(&got, &affine(&one, &p("cond.style_proj.w"), &p("cond.style_proj.b"))) < 1e-12);

    // pooled-convolution oracle: halve with the shared k3/s2 replicate conv until one frame
    let z_a = rand_array(&mut rng, 13, 4, 1.0);
    let mut x = z_a.clone();
    while x.nrows() > 1 {
        x = conv_oracle(&x, &p("cond.style_conv.w"), &p("cond.style_conv.b"), 3, 2, 1, true);
    }
    let want = affine(&x, &p("cond.style_proj.w"), &p("cond.style_proj.b"));
    assert!(max_abs_diff(&conv_style(&model, &store, &z_a), &want) < 1e-12);

    // averaging kernels keep a constant
    let mut avg = store.clone();
    avg.get_mut("cond.style_conv.w").unwrap().fill(1.0 / 12.0);
    avg.get_mut("cond.style_conv.b").unwrap().fill(0.0);
    let constant = Array2::from_elem((9, 4), 0.4);
    let got = conv_style(&model, &avg, &constant);
    let want = affine(&Array2::from_elem((1, 4), 0.4), &p("cond.style_proj.w"), &p("cond.style_proj.b"));
    assert!(max_abs_diff(&got, &want) < 1e-12);
}

#[test]
fn style_choice_changes_no_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let z_a = rand_array(&mut rng, 21, 4, 1.0);
    let g_n = rand_array(&mut rng, 10, 5, 1.0);
    for style in [StyleExtractor::Mamba, StyleExtractor::Conv] {
        let (model, store) = condition_model(style);
        assert_eq!(model.cond.latent(&store, &z_a, 10).unwrap().dim(), (10, 8));
        let mut g = Graph::inference();
        let (gv, zv) = (g.constant(g_n.clone()), g.constant(z_a.clone()));
        let out = model.predict_noise(&mut g, &store, gv, zv, 5).unwrap();
        assert_eq!(g.value(out).dim(), (10, 5));
    }
}

#[test]
fn mamba_style_is_last_block_output() {
    let (model, store) = condition_model(StyleExtractor::Mamba);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let z_a = rand_array(&mut rng, 9, 4, 1.0);
    let block = MambaBlock::new(model.cond.cfg.style_block.clone(), "cond.style").unwrap();
    let full = block.apply(&store, &z_a).unwrap();
    let mut g = Graph::inference();
    let zv = g.constant(z_a.clone());
    let s = model.cond.global_style(&mut g, &store, zv).unwrap();
    assert_eq!(g.value(s).row(0), full.row(8));
    assert_eq!(model.cond.cfg.style_block.variant, MambaVariant::Mamba1);
}

#[test]
fn strided_conv_matches_oracle_both_pad_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = rand_array(&mut rng, 11, 3, 1.0);
    let w = rand_array(&mut rng, 5 * 3, 2, 1.0);
    let b = rand_array(&mut rng, 1, 2, 1.0);
    for (mode, rep) in [(PadMode::Zero, false), (PadMode::Replicate, true)] {
        let spec = ConvSpec { kernel: 5, stride: 3, pad: 2, pad_mode: mode };
        let mut g = Graph::inference();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv1d(xv, wv, Some(bv), spec).unwrap();
        assert!(max_abs_diff(g.value(y), &conv_oracle(&x, &w, &b, 5, 3, 2, rep)) < 1e-12);
    }
}
