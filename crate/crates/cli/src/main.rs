//! `dim-gesture`: data preparation, training, sampling, evaluation and benchmarking.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dim_gesture::bench::BenchVariant;
use dim_gesture::config::{Config, Preset};
use dim_gesture::Error;

#[derive(Parser)]
#[command(name = "dim-gesture", version, about = "Audio-driven gesture diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
    Tiny,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Mamba2,
    Mamba1,
    Convse,
}

#[derive(Subcommand)]
enum Command {
    /// Pair BVH and WAV files by name, cut fixed-length clips and write a manifest.
    Prepare {
        #[arg(long)]
        bvh_dir: PathBuf,
        #[arg(long)]
        wav_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20.0)]
        clip_s: f64,
        #[arg(long, default_value_t = 20.0)]
        fps: f64,
    },
    /// Write a complete config file for a preset.
    InitConfig {
        #[arg(long, value_enum, default_value = "desk")]
        preset: PresetArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a BVH for a whole audio file.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Precomputed DIMF features instead of the configured backend.
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// FGD (raw and feature space) and BeatAlign as CSV.
    Eval {
        #[arg(long)]
        real_dir: PathBuf,
        #[arg(long)]
        gen_dir: PathBuf,
        #[arg(long)]
        wav_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter counts and forward timings against an attention stand-in.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "mamba2")]
        variant: VariantArg,
        #[arg(long, value_delimiter = ',', default_value = "200,400,800,1600")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Also time a reverse chain with this many steps (0 skips it).
        #[arg(long, default_value_t = 0)]
        sampling_steps: usize,
        /// Gesture channels (3 per joint plus 6 root channels).
        #[arg(long, default_value_t = 63)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate DIMF feature files (export itself lives in the python package).
    ExportFeatures {
        #[arg(long)]
        check: bool,
        #[arg(long)]
        dims: Option<usize>,
        files: Vec<PathBuf>,
    },
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Shape(_) => "shape",
        Error::Numeric(_) => "numeric",
        Error::Config(_) => "config",
        Error::Format(_) => "format",
        Error::Parse { .. } => "parse",
        Error::InvalidArgument(_) => "invalid_argument",
        Error::Empty(_) => "empty",
        Error::File { source, .. } => kind(source),
        Error::Io(_) => "io",
        Error::Json(_) => "json",
        Error::Wav(_) => "wav",
    }
}

fn load_or_preset(path: Option<&PathBuf>) -> dim_gesture::Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::preset(Preset::Desk)),
    }
}

fn write_or_print(out: Option<&PathBuf>, text: &str) -> dim_gesture::Result<()> {
    print!("{text}");
    if let Some(p) = out {
        std::fs::write(p, text).map_err(|e| Error::from(e).in_file(p))?;
    }
    Ok(())
}

fn execute(cmd: Command) -> dim_gesture::Result<()> {
    match cmd {
        Command::Prepare { bvh_dir, wav_dir, out, clip_s, fps } => {
            let n = commands::prepare(&bvh_dir, &wav_dir, &out, clip_s, fps)?;
            println!("wrote {n} clips to {}", out.join("manifest.csv").display());
        }
        Command::InitConfig { preset, out, manifest } => {
            let p = match preset {
                PresetArg::Desk => Preset::Desk,
                PresetArg::Paper => Preset::Paper,
                PresetArg::Tiny => Preset::Tiny,
            };
            commands::init_config(p, &out, manifest.as_deref())?;
        }
        Command::Train { config, out, resume, seed } => {
            let (step, loss) = commands::train(&config, &out, resume.as_deref(), seed)?;
            let loss = loss.map_or("n/a".to_string(), |l| format!("{l:.6}"));
            println!("step {step} loss {loss} checkpoint {}", commands::last_checkpoint(&out).display());
        }
        Command::Sample { checkpoint, wav, out, seed, features } => {
            let frames = commands::sample(&checkpoint, &wav, &out, seed, features.as_deref())?;
            println!("wrote {frames} frames to {}", out.display());
        }
        Command::Eval { real_dir, gen_dir, wav_dir, config, out } => {
            let cfg = load_or_preset(config.as_ref())?;
            let rows = commands::eval(&cfg, &real_dir, &gen_dir, &wav_dir)?;
            write_or_print(out.as_ref(), &commands::eval_csv(&rows, &cfg.hash()))?;
        }
        Command::Bench { config, variant, lengths, reps, sampling_steps, channels, seed, out } => {
            let cfg = load_or_preset(config.as_ref())?;
            let v = match variant {
                VariantArg::Mamba2 => BenchVariant::Mamba2,
                VariantArg::Mamba1 => BenchVariant::Mamba1,
                VariantArg::Convse => BenchVariant::ConvStyle,
            };
            let csv = commands::bench(&cfg, v, &lengths, reps, sampling_steps, channels, seed)?;
            write_or_print(out.as_ref(), &csv)?;
        }
        Command::ExportFeatures { check, dims, files } => {
            if !check {
                return Err(Error::InvalidArgument(
                    "feature export runs in the python exporter; this command only validates with --check".into(),
                ));
            }
            if files.is_empty() {
                return Err(Error::InvalidArgument("no files given".into()));
            }
            for line in commands::check(&files, dims)? {
                println!("{line}");
            }
        }
    }
    Ok(())
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("DIM_GESTURE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("DIM_GESTURE_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(msg) = init_threads() {
        eprintln!("error: config: {msg}");
        return ExitCode::from(2);
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", kind(&e));
            ExitCode::FAILURE
        }
    }
}
