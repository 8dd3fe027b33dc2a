use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dim_gesture::audio::{write_wav, MelConfig, SAMPLE_RATE};
use dim_gesture::bench::{run_bench, BenchVariant};
use dim_gesture::checkpoint::Checkpoint;
use dim_gesture::condition::{extract_features, FeatureBackend};
use dim_gesture::config::{BackendKind, Config, EncoderKind, Preset};
use dim_gesture::data::{load_audio_16k, load_corpus, write_manifest, ManifestRow, SKELETON_FILE};
use dim_gesture::formats::{check_features, read_gesture, write_gesture, FrameSequence};
use dim_gesture::generate::Generator;
use dim_gesture::metrics::{
    audio_beats, beat_align, fgd_feature, fgd_raw, gesture_beats, windows, ConvAutoencoder, IdentityEncoder,
    OnsetConfig,
};
use dim_gesture::motion::{gesture_from_bvh, segment_clips, Bvh};
use dim_gesture::train::{
    build_model, prepare_clips, resume, run, standardize_clips, RunContext, Trainer, LAST_CHECKPOINT,
};
use dim_gesture::{Error, Result};
use ndarray::Array2;
use rayon::prelude::*;

/// Files in `dir` with extension `ext`, keyed by stem.
fn files_by_stem(dir: &Path, ext: &str) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::from(e).in_file(dir))? {
        let path = entry?.path();
        let matches = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case(ext));
        if matches {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

struct PreparedFile {
    rows: Vec<ManifestRow>,
    template: Bvh,
}

fn prepare_pair(stem: &str, bvh_path: &Path, wav_path: &Path, out: &Path, fps: f64, clip_s: f64) -> Result<PreparedFile> {
    let bvh = Bvh::read(bvh_path)?;
    let gesture = gesture_from_bvh(&bvh, fps).map_err(|e| e.in_file(bvh_path))?;
    let audio = load_audio_16k(wav_path)?;
    let clips = segment_clips(gesture.view(), fps, &audio, SAMPLE_RATE, clip_s)?;
    let mut rows = Vec::with_capacity(clips.len());
    for (i, clip) in clips.iter().enumerate() {
        let id = format!("{stem}_{i:03}");
        let g_rel = PathBuf::from("gestures").join(format!("{id}.dimg"));
        let a_rel = PathBuf::from("audio").join(format!("{id}.wav"));
        write_gesture(out.join(&g_rel), &FrameSequence::new(clip.gesture.mapv(|v| v as f32), fps as f32))?;
        write_wav(out.join(&a_rel), &clip.audio, SAMPLE_RATE)?;
        rows.push(ManifestRow {
            clip_id: id,
            gesture_path: g_rel,
            audio_path: a_rel,
            duration_s: clip_s,
        });
    }
    let template = Bvh {
        skeleton: bvh.skeleton.clone(),
        motion: bvh.motion.slice(ndarray::s![..1.min(bvh.motion.nrows()), ..]).to_owned(),
        frame_time: 1.0 / fps,
    };
    Ok(PreparedFile { rows, template })
}

pub fn prepare(bvh_dir: &Path, wav_dir: &Path, out: &Path, clip_s: f64, fps: f64) -> Result<usize> {
    let bvhs = files_by_stem(bvh_dir, "bvh")?;
    let wavs = files_by_stem(wav_dir, "wav")?;
    for stem in bvhs.keys().filter(|s| !wavs.contains_key(*s)) {
        log::warn!("skipping {stem}.bvh: no matching wav");
    }
    for stem in wavs.keys().filter(|s| !bvhs.contains_key(*s)) {
        log::warn!("skipping {stem}.wav: no matching bvh");
    }
    let pairs: Vec<(&String, &PathBuf, &PathBuf)> = bvhs
        .iter()
        .filter_map(|(s, b)| wavs.get(s).map(|w| (s, b, w)))
        .collect();
    for sub in ["gestures", "audio"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::from(e).in_file(&d))?;
    }
    let prepared = pairs
        .par_iter()
        .map(|(stem, b, w)| prepare_pair(stem, b, w, out, fps, clip_s))
        .collect::<Result<Vec<_>>>()?;
    if let Some(first) = prepared.first() {
        if let Some(bad) = prepared.iter().find(|p| p.template.skeleton != first.template.skeleton) {
            let id = bad.rows.first().map_or("?", |r| r.clip_id.as_str());
            return Err(Error::Format(format!("skeleton of {id} differs from the first file")));
        }
        first.template.write(out.join(SKELETON_FILE))?;
    }
    let rows: Vec<ManifestRow> = prepared.into_iter().flat_map(|p| p.rows).collect();
    write_manifest(out.join("manifest.csv"), &rows)?;
    Ok(rows.len())
}

pub fn init_config(preset: Preset, out: &Path, manifest: Option<&Path>) -> Result<()> {
    let mut cfg = Config::preset(preset);
    if let Some(m) = manifest {
        cfg.data.manifest = m.to_path_buf();
    }
    fs::write(out, cfg.to_json() + "\n").map_err(|e| Error::from(e).in_file(out))
}

pub fn train(config: &Path, out: &Path, resume_from: Option<&Path>, seed: Option<u64>) -> Result<(u64, Option<f64>)> {
    let mut cfg = Config::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let corpus = load_corpus(&cfg)?;
    let channels = corpus.clips[0].gesture.ncols();
    let (mut trainer, ctx) = match resume_from {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.gesture_channels != channels {
                return Err(Error::shape(format!(
                    "checkpoint has {} gesture channels, corpus {channels}",
                    ckpt.gesture_channels
                )));
            }
            let clips = standardize_clips(&corpus, &ckpt.stats, &ckpt.feature_stats)?;
            let mut ckpt_cfg = ckpt.config.clone();
            ckpt_cfg.train.max_steps = cfg.train.max_steps;
            let ctx = RunContext {
                config: ckpt_cfg,
                stats: ckpt.stats.clone(),
                feature_stats: ckpt.feature_stats.clone(),
                skeleton: ckpt.skeleton.clone().or(corpus.skeleton.clone()),
            };
            (resume(&ckpt, clips)?, ctx)
        }
        None => {
            let (stats, feature_stats, clips) = prepare_clips(&corpus)?;
            let (model, sched) = build_model(&cfg, channels)?;
            let t = &cfg.train;
            let trainer = Trainer::new(model, sched, clips, t.batch_size, t.lr, t.seed)?;
            let ctx = RunContext {
                config: cfg.clone(),
                stats,
                feature_stats,
                skeleton: corpus.skeleton.clone(),
            };
            (trainer, ctx)
        }
    };
    fs::create_dir_all(out).map_err(|e| Error::from(e).in_file(out))?;
    fs::write(out.join("config.json"), ctx.config.to_json() + "\n")?;
    let (p_cond, p_den) = dim_gesture::model::GestureModel::param_counts(&trainer.params);
    log::info!(
        "training {} clips, {} extractor + {} denoiser parameters, config {}",
        trainer.clips.len(),
        p_cond,
        p_den,
        ctx.config.hash()
    );
    let losses = run(&mut trainer, &ctx, out, ctx.config.train.max_steps)?;
    Ok((trainer.step, losses.last().copied()))
}

pub fn sample(checkpoint: &Path, wav: &Path, out: &Path, seed: u64, features: Option<&Path>) -> Result<usize> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let generator = Generator::from_checkpoint(&ckpt)?;
    let wave = load_audio_16k(wav)?;
    let backend = match (generator.config.data.feature_backend, features) {
        (_, Some(p)) => FeatureBackend::Interchange(p.to_path_buf()),
        (BackendKind::Mel, None) => FeatureBackend::Mel(MelConfig::default()),
        (BackendKind::Interchange, None) => FeatureBackend::Interchange(wav.with_extension("dimf")),
    };
    let seq = extract_features(&wave, SAMPLE_RATE, &backend)?;
    let m = &generator.config.model;
    if seq.z_a.ncols() != m.feature_dim || (seq.frame_rate_hz - m.feature_rate_hz).abs() > 1e-3 {
        return Err(Error::shape(format!(
            "features are {} dims at {} Hz, model expects {} at {} Hz",
            seq.z_a.ncols(),
            seq.frame_rate_hz,
            m.feature_dim,
            m.feature_rate_hz
        )));
    }
    let frames = generator.frames_for(wave.len());
    let gesture = generator.generate(&seq.z_a, frames, seed)?;
    generator.to_bvh(&gesture)?.write(out)?;
    Ok(frames)
}

fn load_gesture_file(path: &Path, fps: f64) -> Result<Array2<f64>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("bvh") => gesture_from_bvh(&Bvh::read(path)?, fps).map_err(|e| e.in_file(path)),
        _ => {
            let seq = read_gesture(path)?;
            if (seq.rate_hz as f64 - fps).abs() > 1e-3 {
                return Err(Error::Config(format!("gesture at {} fps, expected {fps}", seq.rate_hz)).in_file(path));
            }
            Ok(seq.data.mapv(f64::from))
        }
    }
}

fn gesture_set(dir: &Path, fps: f64) -> Result<BTreeMap<String, Array2<f64>>> {
    let mut files = files_by_stem(dir, "bvh")?;
    files.extend(files_by_stem(dir, "dimg")?);
    if files.is_empty() {
        return Err(Error::Empty(format!("no .bvh or .dimg files in {}", dir.display())));
    }
    let loaded = files
        .par_iter()
        .map(|(stem, p)| Ok((stem.clone(), load_gesture_file(p, fps)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(loaded.into_iter().collect())
}

#[derive(Debug)]
pub struct EvalRow {
    pub metric: &'static str,
    pub value: f64,
    pub n_real: usize,
    pub n_gen: usize,
}

/// Mean BeatAlign over clips that have matching audio.
fn mean_beat_align(set: &BTreeMap<String, Array2<f64>>, wavs: &BTreeMap<String, PathBuf>, fps: f64, sigma: f64) -> Result<f64> {
    let scores = set
        .par_iter()
        .filter_map(|(stem, g)| wavs.get(stem).map(|w| (g, w)))
        .map(|(g, w)| {
            let ab = audio_beats(&load_audio_16k(w)?, SAMPLE_RATE, &OnsetConfig::default());
            let gb = gesture_beats(g.view(), fps)?;
            Ok(beat_align(&gb, &ab, sigma))
        })
        .collect::<Result<Vec<f64>>>()?;
    if scores.is_empty() {
        return Err(Error::Empty("no generated clip has a matching wav".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

pub fn eval(cfg: &Config, real_dir: &Path, gen_dir: &Path, wav_dir: &Path) -> Result<Vec<EvalRow>> {
    let fps = cfg.data.gesture_fps;
    let m = &cfg.metrics;
    let real = gesture_set(real_dir, fps)?;
    let gen = gesture_set(gen_dir, fps)?;
    let wavs = files_by_stem(wav_dir, "wav")?;
    let real_clips: Vec<Array2<f64>> = real.values().cloned().collect();
    let gen_clips: Vec<Array2<f64>> = gen.values().cloned().collect();
    let raw = fgd_raw(&real_clips, &gen_clips, m.window_frames)?;
    let feature = match m.encoder {
        EncoderKind::Identity => fgd_feature(&real_clips, &gen_clips, m.window_frames, &IdentityEncoder)?,
        EncoderKind::Autoencoder => {
            let w = windows(&real_clips, m.window_frames)?;
            let ae = ConvAutoencoder::train(w.view(), m.window_frames, m.encoder_dim, m.encoder_steps, m.encoder_lr, m.seed)?;
            fgd_feature(&real_clips, &gen_clips, m.window_frames, &ae)?
        }
    };
    let ba = mean_beat_align(&gen, &wavs, fps, m.beat_sigma_s)?;
    let ba_real = mean_beat_align(&real, &wavs, fps, m.beat_sigma_s).unwrap_or(f64::NAN);
    let (nr, ng) = (real.len(), gen.len());
    let row = |metric, value| EvalRow { metric, value, n_real: nr, n_gen: ng };
    Ok(vec![
        row("fgd_raw", raw),
        row("fgd_feature", feature),
        row("beat_align", ba),
        row("beat_align_real", ba_real),
    ])
}

pub fn eval_csv(rows: &[EvalRow], config_hash: &str) -> String {
    let mut s = String::from("metric,value,n_real,n_gen,config_hash\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{config_hash}\n", r.metric, r.value, r.n_real, r.n_gen));
    }
    s
}

pub fn bench(cfg: &Config, variant: BenchVariant, lengths: &[usize], reps: usize, sampling_steps: usize, channels: usize, seed: u64) -> Result<String> {
    let mut cfg = cfg.clone();
    variant.apply(&mut cfg);
    let steps = (sampling_steps > 0).then_some(sampling_steps);
    let report = run_bench(&cfg, channels, lengths, reps, steps, seed)?;
    let name = match variant {
        BenchVariant::Mamba2 => "mamba2",
        BenchVariant::Mamba1 => "mamba1",
        BenchVariant::ConvStyle => "convse",
    };
    let mut s = String::from("variant,length,extractor_params,denoiser_params,denoiser_s,attention_s,sampling_s\n");
    for t in &report.timings {
        let sampling = t.sampling_s.map_or(String::new(), |v| format!("{v:.6}"));
        s.push_str(&format!(
            "{name},{},{},{},{:.6},{:.6},{sampling}\n",
            t.length, report.extractor_params, report.denoiser_params, t.denoiser_s, t.attention_s
        ));
    }
    Ok(s)
}

pub fn check(paths: &[PathBuf], dims: Option<usize>) -> Result<Vec<String>> {
    paths
        .iter()
        .map(|p| {
            let seq = check_features(p, dims)?;
            Ok(format!("ok {} {}x{} @ {} Hz", p.display(), seq.frames(), seq.dims(), seq.rate_hz))
        })
        .collect()
}

pub fn last_checkpoint(out: &Path) -> PathBuf {
    out.join(LAST_CHECKPOINT)
}
