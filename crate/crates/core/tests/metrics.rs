use dim_gesture::metrics::*;
use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian_clips(rng: &mut ChaCha8Rng, count: usize, frames: usize, cols: usize, shift: f64) -> Vec<Array2<f64>> {
    (0..count)
        .map(|_| Array2::from_shape_fn((frames, cols), |_| rng.sample::<f64, _>(StandardNormal) + shift))
        .collect()
}

/// Plain two-pass mean and (n - 1) covariance.
fn oracle_stats(x: &Array2<f64>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (n, d) = x.dim();
    let mean: Vec<f64> = (0..d).map(|j| x.column(j).sum() / n as f64).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for i in 0..n {
        for a in 0..d {
            for b in 0..d {
                cov[a][b] += (x[[i, a]] - mean[a]) * (x[[i, b]] - mean[b]);
            }
        }
    }
    for row in cov.iter_mut() {
        for v in row.iter_mut() {
            *v /= (n - 1) as f64;
        }
    }
    (mean, cov)
}

/// Fréchet distance through a Denman-Beavers square root of `S1 S2`.
fn oracle_frechet(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let (m1, c1) = oracle_stats(x);
    let (m2, c2) = oracle_stats(y);
    let d = m1.len();
    let s1 = DMatrix::from_fn(d, d, |i, j| c1[i][j]);
    let s2 = DMatrix::from_fn(d, d, |i, j| c2[i][j]);
    let mut yk = &s1 * &s2;
    let mut zk = DMatrix::<f64>::identity(d, d);
    for _ in 0..60 {
        let yi = yk.clone().try_inverse().unwrap();
        let zi = zk.clone().try_inverse().unwrap();
        let ny = (&yk + zi) * 0.5;
        zk = (&zk + yi) * 0.5;
        yk = ny;
    }
    let dm: f64 = m1.iter().zip(&m2).map(|(a, b)| (a - b).powi(2)).sum();
    dm + s1.trace() + s2.trace() - 2.0 * yk.trace()
}

fn stats(mu: &[f64], sigma: &[&[f64]]) -> GaussianStats {
    let d = mu.len();
    GaussianStats {
        mu: DVector::from_column_slice(mu),
        sigma: DMatrix::from_fn(d, d, |i, j| sigma[i][j]),
    }
}

#[test]
fn two_point_statistics() {
    let s = gaussian_stats(ndarray::arr2(&[[0.0, 0.0], [2.0, 2.0]]).view()).unwrap();
    assert_eq!(s.mu, DVector::from_column_slice(&[1.0, 1.0]));
    assert_eq!(s.sigma, DMatrix::from_row_slice(2, 2, &[2.0, 2.0, 2.0, 2.0]));
    let same = gaussian_stats(ndarray::arr2(&[[1.5, -2.0], [1.5, -2.0], [1.5, -2.0]]).view()).unwrap();
    assert!(same.sigma.iter().all(|&v| v == 0.0));
    assert!(gaussian_stats(ndarray::arr2(&[[1.0, 2.0]]).view()).is_err());
}

#[test]
fn statistics_match_two_pass_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Array2::from_shape_fn((1000, 4), |(_, j)| rng.sample::<f64, _>(StandardNormal) * (j + 1) as f64 + j as f64);
    let s = gaussian_stats(x.view()).unwrap();
    let (m, c) = oracle_stats(&x);
    for a in 0..4 {
        assert!((s.mu[a] - m[a]).abs() <= 1e-10);
        for b in 0..4 {
            assert!((s.sigma[(a, b)] - c[a][b]).abs() <= 1e-10);
        }
    }
}

#[test]
fn frechet_closed_forms() {
    let a = stats(&[0.0], &[&[1.0]]);
    let b = stats(&[3.0], &[&[4.0]]);
    assert!((frechet_distance(&a, &b).unwrap() - 10.0).abs() < 1e-12);

    let s = stats(&[1.0, 2.0], &[&[2.0, 0.5], &[0.5, 1.0]]);
    assert!(frechet_distance(&s, &s).unwrap() <= 1e-8);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let d = 5;
        let mu1: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mu2: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v1: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..3.0)).collect();
        let v2: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..3.0)).collect();
        let s1 = GaussianStats { mu: DVector::from_vec(mu1.clone()), sigma: DMatrix::from_diagonal(&DVector::from_vec(v1.clone())) };
        let s2 = GaussianStats { mu: DVector::from_vec(mu2.clone()), sigma: DMatrix::from_diagonal(&DVector::from_vec(v2.clone())) };
        let want: f64 = (0..d).map(|i| (mu1[i] - mu2[i]).powi(2) + (v1[i].sqrt() - v2[i].sqrt()).powi(2)).sum();
        assert!((frechet_distance(&s1, &s2).unwrap() - want).abs() < 1e-9);
    }

    assert!(frechet_distance(&a, &s).is_err());
}

#[test]
fn raw_fgd_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let real = gaussian_clips(&mut rng, 6, 120, 3, 0.0);
    assert!(fgd_raw(&real, &real, 40).unwrap() <= 1e-8);

    let c = 0.7;
    let shifted: Vec<Array2<f64>> = real
        .iter()
        .map(|x| {
            let mut y = x.clone();
            y.column_mut(1).mapv_inplace(|v| v + c);
            y
        })
        .collect();
    let d = fgd_raw(&real, &shifted, 40).unwrap();
    assert!((d - 40.0 * c * c).abs() <= 1e-6 * 40.0 * c * c, "{d}");

    // too few windows
    let short = vec![Array2::zeros((50, 3))];
    assert!(fgd_raw(&real, &short, 40).is_err());
    assert!(fgd_raw(&real, &[], 40).is_err());
}

#[test]
fn raw_fgd_matches_from_scratch_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let real = gaussian_clips(&mut rng, 40, 8, 2, 0.0);
    let gen: Vec<Array2<f64>> = gaussian_clips(&mut rng, 30, 8, 2, 0.3)
        .into_iter()
        .map(|x| x * 1.4)
        .collect();
    let window = 4;
    let d = fgd_raw(&real, &gen, window).unwrap();
    let want = oracle_frechet(&windows(&real, window).unwrap(), &windows(&gen, window).unwrap());
    assert!((d - want).abs() <= 1e-6, "{d} vs {want}");
}

#[test]
fn identity_and_orthogonal_encoders_reproduce_raw_fgd() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let real = gaussian_clips(&mut rng, 30, 6, 2, 0.0);
    let gen = gaussian_clips(&mut rng, 30, 6, 2, 0.5);
    let raw = fgd_raw(&real, &gen, 3).unwrap();
    assert_eq!(fgd_feature(&real, &gen, 3, &IdentityEncoder).unwrap(), raw);

    let dim = 6;
    let m = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = m.qr().q();
    let w = Array2::from_shape_fn((dim, dim), |(i, j)| q[(i, j)]);
    let rotated = fgd_feature(&real, &gen, 3, &LinearEncoder(w)).unwrap();
    assert!((rotated - raw).abs() <= 1e-9 * raw.max(1.0), "{rotated} vs {raw}");
    assert_eq!(fgd_feature(&real, &real, 3, &LinearEncoder(Array2::eye(dim))).unwrap(), 0.0);
}

#[test]
fn raw_fgd_is_invariant_to_channel_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let real = gaussian_clips(&mut rng, 20, 8, 3, 0.0);
    let gen = gaussian_clips(&mut rng, 20, 8, 3, 0.2);
    let perm = |c: &Array2<f64>| c.select(Axis(1), &[2, 0, 1]);
    let a = fgd_raw(&real, &gen, 4).unwrap();
    let b = fgd_raw(&real.iter().map(perm).collect::<Vec<_>>(), &gen.iter().map(perm).collect::<Vec<_>>(), 4).unwrap();
    assert!((a - b).abs() <= 1e-9 * a.max(1.0));
}

#[test]
fn autoencoder_learns_and_embeds() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let clips: Vec<Array2<f64>> = (0..8)
        .map(|k| {
            Array2::from_shape_fn((80, 9), |(t, c)| {
                (0.2 * t as f64 + k as f64 + c as f64).sin() + 0.05 * rng.sample::<f64, _>(StandardNormal)
            })
        })
        .collect();
    let w = windows(&clips, 40).unwrap();
    let untrained = ConvAutoencoder::train(w.view(), 40, 8, 0, 1e-3, 3).unwrap();
    let trained = ConvAutoencoder::train(w.view(), 40, 8, 200, 1e-2, 3).unwrap();
    assert!(trained.reconstruction_loss(w.view()).unwrap() < untrained.reconstruction_loss(w.view()).unwrap());
    assert_eq!(trained.encode(w.view()).unwrap().dim(), (w.nrows(), 8));
    let same = fgd_feature(&clips, &clips, 40, &trained).unwrap();
    assert!(same.abs() <= 1e-9, "{same}");
}

fn clicks(seconds: f64, at: &[f64]) -> Vec<f32> {
    let mut w = vec![0.0f32; (seconds * 16_000.0) as usize];
    for &t in at {
        let s = (t * 16_000.0) as usize;
        for (i, v) in w[s..s + 16].iter_mut().enumerate() {
            *v = if i % 2 == 0 { 0.9 } else { -0.9 };
        }
    }
    w
}

#[test]
fn onset_examples() {
    let cfg = OnsetConfig::default();
    assert!(audio_beats(&vec![0.0; 80_000], 16_000, &cfg).is_empty());

    let beats = audio_beats(&clicks(6.0, &[1.0, 2.0, 3.0, 4.0, 5.0]), 16_000, &cfg);
    assert_eq!(beats.len(), 5, "{beats:?}");
    for (k, b) in beats.iter().enumerate() {
        assert!((b - (k + 1) as f64).abs() <= 0.02, "{beats:?}");
    }

    let one = audio_beats(&clicks(1.0, &[0.5]), 16_000, &cfg);
    assert_eq!(one.len(), 1);
    assert!((one[0] - 0.5).abs() <= 0.02);
}

fn joint_track(frames: usize, f: impl Fn(f64) -> f64) -> Array2<f64> {
    Array2::from_shape_fn((frames, 9), |(t, c)| if c == 0 { f(t as f64 / 20.0) } else { 0.0 })
}

#[test]
fn gesture_beat_examples() {
    assert!(gesture_beats(Array2::from_elem((60, 9), 0.3).view(), 20.0).unwrap().is_empty());
    assert!(gesture_beats(joint_track(60, |t| 0.5 * t).view(), 20.0).unwrap().is_empty());
    assert!(gesture_beats(Array2::zeros((2, 9)).view(), 20.0).is_err());

    let beats = gesture_beats(joint_track(100, |t| (2.0 * std::f64::consts::PI * t).sin()).view(), 20.0).unwrap();
    assert!(beats.len() >= 8, "{beats:?}");
    for pair in beats.windows(2) {
        assert!((pair[1] - pair[0] - 0.5).abs() <= 0.05 + 1e-12, "{beats:?}");
    }
    // |cos| vanishes at a quarter period past each half second
    for b in &beats {
        let phase = (b - 0.25).rem_euclid(0.5);
        assert!(phase.min(0.5 - phase) <= 0.05 + 1e-12, "{b}");
    }
}

fn oracle_align(gb: &[f64], ab: &[f64], sigma: f64) -> f64 {
    let mut total = 0.0;
    for t in gb {
        let mut best = f64::INFINITY;
        for s in ab {
            best = best.min((t - s) * (t - s));
        }
        total += (-best / (2.0 * sigma * sigma)).exp();
    }
    total / gb.len() as f64
}

#[test]
fn beat_align_examples() {
    let list = [0.3, 1.1, 2.7];
    assert_eq!(beat_align(&list, &list, 0.1), 1.0);
    assert!((beat_align(&[1.0], &[1.1], 0.1) - (-0.5f64).exp()).abs() < 1e-12);
    assert_eq!(beat_align(&[], &list, 0.1), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..50 {
        let gb: Vec<f64> = (0..rng.random_range(1..20)).map(|_| rng.random_range(0.0..10.0)).collect();
        let ab: Vec<f64> = (0..rng.random_range(1..20)).map(|_| rng.random_range(0.0..10.0)).collect();
        assert!((beat_align(&gb, &ab, 0.1) - oracle_align(&gb, &ab, 0.1)).abs() <= 1e-12);
    }
}

proptest! {
    #[test]
    fn beat_align_bounds_and_far_beats(
        gb in prop::collection::vec(0.0f64..10.0, 1..12),
        ab in prop::collection::vec(0.0f64..10.0, 1..12),
    ) {
        let v = beat_align(&gb, &ab, 0.1);
        prop_assert!((0.0..=1.0).contains(&v));
        let mut more = ab.clone();
        more.push(100.0);
        prop_assert!((beat_align(&gb, &more, 0.1) - v).abs() <= 1e-6);
    }

    #[test]
    fn frechet_symmetric_and_nonnegative(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((30, 3), |_| rng.sample::<f64, _>(StandardNormal));
        let y = Array2::from_shape_fn((30, 3), |_| rng.sample::<f64, _>(StandardNormal) * 2.0 + 0.5);
        let sx = gaussian_stats(x.view()).unwrap();
        let sy = gaussian_stats(y.view()).unwrap();
        let a = frechet_distance(&sx, &sy).unwrap();
        let b = frechet_distance(&sy, &sx).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        prop_assert!(frechet_distance(&sx, &sx).unwrap() <= 1e-8);
    }
}
