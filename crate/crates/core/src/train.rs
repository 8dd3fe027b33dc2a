//! Training loop: per-item noising, batch-parallel gradients with an order-fixed
//! reduction, Adam updates, loss logging and checkpoints.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::checkpoint::{Checkpoint, RngState};
use crate::config::Config;
use crate::data::Corpus;
use crate::diffusion::{standard_normal, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::GestureModel;
use crate::motion::Standardizer;
use crate::params::{Adam, ParamStore};

/// A standardized gesture with its audio features.
#[derive(Clone, Debug)]
pub struct TrainClip {
    pub gesture: Array2<f32>,
    pub features: Array2<f32>,
}

/// One element of a batch: which clip, which step, which noise.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub clip: usize,
    pub n: usize,
    pub eps: Array2<f32>,
}

/// `mse(eps, model(q_sample(g0, n, eps), audio, n))` and, when `grads`, its parameter gradient.
pub fn item_loss(
    model: &GestureModel,
    sched: &NoiseSchedule,
    params: &ParamStore<f32>,
    clip: &TrainClip,
    n: usize,
    eps: &Array2<f32>,
    grads: bool,
) -> Result<(f64, Option<ParamStore<f32>>)> {
    let g_n = sched.q_sample(&clip.gesture, n, eps)?;
    let mut g = if grads { Graph::new() } else { Graph::inference() };
    let gv = g.constant(g_n);
    let zv = g.constant(clip.features.clone());
    let eps_hat = model.predict_noise(&mut g, params, gv, zv, n)?;
    let target = g.constant(eps.clone());
    let loss = g.mse(eps_hat, target)?;
    let value = g.value(loss)[[0, 0]] as f64;
    let grad = if grads {
        Some(g.backward(loss)?.into_params(params))
    } else {
        None
    };
    Ok((value, grad))
}

pub struct Trainer {
    pub model: GestureModel,
    pub sched: NoiseSchedule,
    pub clips: Vec<TrainClip>,
    pub params: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub batch_size: usize,
}

impl Trainer {
    /// Fresh parameters drawn from `seed`; the same stream then drives batch sampling.
    pub fn new(model: GestureModel, sched: NoiseSchedule, clips: Vec<TrainClip>, batch_size: usize, lr: f64, seed: u64) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::Empty("training set is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = model.init(&mut rng);
        let adam = Adam::new(&params, lr);
        Ok(Trainer {
            model,
            sched,
            clips,
            params,
            adam,
            rng,
            step: 0,
            batch_size,
        })
    }

    /// Batch items drawn sequentially: clip index, step, then the noise tensor.
    pub fn draw_batch(&mut self) -> Vec<BatchItem> {
        (0..self.batch_size)
            .map(|_| {
                let clip = self.rng.random_range(0..self.clips.len());
                let n = self.rng.random_range(1..=self.sched.len());
                let (r, c) = self.clips[clip].gesture.dim();
                let eps = standard_normal(&mut self.rng, r, c);
                BatchItem { clip, n, eps }
            })
            .collect()
    }

    /// Mean loss and mean gradient over the batch, summed in item order.
    pub fn loss_and_grads(&self, items: &[BatchItem]) -> Result<(f64, ParamStore<f32>)> {
        let results: Vec<(f64, Option<ParamStore<f32>>)> = items
            .par_iter()
            .map(|it| item_loss(&self.model, &self.sched, &self.params, &self.clips[it.clip], it.n, &it.eps, true))
            .collect::<Result<_>>()?;
        let scale = 1.0 / items.len() as f32;
        let mut total = self.params.zeros_like();
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l;
            total.add_scaled(g.as_ref().expect("gradients requested"), scale)?;
        }
        Ok((loss / items.len() as f64, total))
    }

    /// One optimizer step; returns the batch loss before the update.
    pub fn train_step(&mut self) -> Result<f64> {
        let items = self.draw_batch();
        let (loss, grads) = self.loss_and_grads(&items)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss or gradient at step {} (loss = {loss})",
                self.step + 1
            )));
        }
        self.adam.update(&mut self.params, &grads)?;
        self.step += 1;
        Ok(loss)
    }
}

/// Everything besides the trainer that a checkpoint needs.
#[derive(Clone, Debug)]
pub struct RunContext {
    pub config: Config,
    pub stats: Standardizer,
    pub feature_stats: Standardizer,
    pub skeleton: Option<String>,
}

impl RunContext {
    pub fn checkpoint(&self, t: &Trainer) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            gesture_channels: t.model.den.cfg.gesture_channels,
            skeleton: self.skeleton.clone(),
            stats: self.stats.clone(),
            feature_stats: self.feature_stats.clone(),
            step: t.step,
            rng: RngState::capture(&t.rng),
            params: t.params.clone(),
            adam: t.adam.clone(),
        }
    }
}

/// Floor on feature standard deviations; log-mel bins that never vary (silence) would
/// otherwise blow up on unseen audio.
pub const FEATURE_STD_FLOOR: f64 = 1e-2;

pub fn fit_feature_stats(corpus: &Corpus) -> Result<Standardizer> {
    let feats: Vec<Array2<f64>> = corpus.clips.iter().map(|c| c.features.mapv(f64::from)).collect();
    let mut stats = Standardizer::fit(feats.iter().map(|f| f.view()))?;
    stats.std.iter_mut().for_each(|s| *s = s.max(FEATURE_STD_FLOOR));
    Ok(stats)
}

pub fn standardize_features(stats: &Standardizer, features: &Array2<f32>) -> Result<Array2<f32>> {
    Ok(stats.standardize(features.mapv(f64::from).view())?.mapv(|v| v as f32))
}

/// Clips with both streams standardized by the given statistics.
pub fn standardize_clips(corpus: &Corpus, stats: &Standardizer, feature_stats: &Standardizer) -> Result<Vec<TrainClip>> {
    corpus
        .clips
        .iter()
        .map(|c| {
            Ok(TrainClip {
                gesture: stats.standardize(c.gesture.view())?.mapv(|v| v as f32),
                features: standardize_features(feature_stats, &c.features)?,
            })
        })
        .collect()
}

/// Gesture statistics, feature statistics and the standardized clips.
pub fn prepare_clips(corpus: &Corpus) -> Result<(Standardizer, Standardizer, Vec<TrainClip>)> {
    let stats = Standardizer::fit(corpus.clips.iter().map(|c| c.gesture.view()))?;
    let feature_stats = fit_feature_stats(corpus)?;
    let clips = standardize_clips(corpus, &stats, &feature_stats)?;
    Ok((stats, feature_stats, clips))
}

pub fn build_model(cfg: &Config, gesture_channels: usize) -> Result<(GestureModel, NoiseSchedule)> {
    let model = GestureModel::new(&cfg.model, gesture_channels, cfg.data.gesture_fps, cfg.diffusion.num_steps)?;
    let d = &cfg.diffusion;
    let sched = NoiseSchedule::linear(d.num_steps, d.beta_start, d.beta_end)?;
    Ok((model, sched))
}

/// Trainer positioned exactly where `ckpt` left off.
pub fn resume(ckpt: &Checkpoint, clips: Vec<TrainClip>) -> Result<Trainer> {
    let (model, sched) = build_model(&ckpt.config, ckpt.gesture_channels)?;
    if clips.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    Ok(Trainer {
        model,
        sched,
        clips,
        params: ckpt.params.clone(),
        adam: ckpt.adam.clone(),
        rng: ckpt.rng.restore()?,
        step: ckpt.step,
        batch_size: ckpt.config.train.batch_size,
    })
}

pub const LOSS_LOG: &str = "loss.csv";
pub const LAST_CHECKPOINT: &str = "last.dimc";

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:08}.dimc")
}

/// Runs until `until_step`, appending to `out/loss.csv` and writing checkpoints at the
/// configured cadence plus `last.dimc` at the end. Returns the per-step losses.
pub fn run(trainer: &mut Trainer, ctx: &RunContext, out: &Path, until_step: u64) -> Result<Vec<f64>> {
    fs::create_dir_all(out).map_err(|e| Error::from(e).in_file(out))?;
    let log_path: PathBuf = out.join(LOSS_LOG);
    let fresh = !log_path.exists() || trainer.step == 0;
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&log_path)
        .map_err(|e| Error::from(e).in_file(&log_path))?;
    if fresh {
        writeln!(log, "step,loss,lr,wallclock_s")?;
    }
    let start = Instant::now();
    let every = ctx.config.train.checkpoint_every;
    let mut losses = Vec::new();
    while trainer.step < until_step {
        let loss = trainer.train_step()?;
        losses.push(loss);
        let wall = if ctx.config.train.record_wallclock {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        };
        writeln!(log, "{},{},{},{:.3}", trainer.step, loss, trainer.adam.lr, wall)?;
        if every > 0 && trainer.step % every == 0 {
            ctx.checkpoint(trainer).save(out.join(checkpoint_name(trainer.step)))?;
        }
    }
    log.flush()?;
    ctx.checkpoint(trainer).save(out.join(LAST_CHECKPOINT))?;
    Ok(losses)
}
