//! `acfm` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 check failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use acfm::audio_io::{self, LabeledExample};
use acfm::cnn::{self, Model};
use acfm::features::{self, Denoise};
use acfm::metrics;
use acfm::monitor::{self, MonitorBuilder};
use acfm::spectrogram;
use acfm::synth;
use acfm::trainer::{self, FreezeMask, TrainConfig, DEFAULT_TRAIN_FRACTION};

const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "acfm", version, about = "Acoustic fault monitoring for FDM extruders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset and its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        count: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Render a WAV clip to a 64×64 PGM (or PPM with --color).
    Spectrogram {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        color: bool,
        /// Noise-only recording used for spectral subtraction.
        #[arg(long)]
        noise_profile: Option<PathBuf>,
    },
    /// Train a fresh model on the manifest's training split.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        color: bool,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Retrain a saved model with its conv layers optionally frozen.
    Finetune {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        freeze_conv: bool,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Evaluate a model on the manifest's test split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Print class probabilities for one clip as JSON.
    Classify {
        #[arg(long)]
        model: PathBuf,
        wav: PathBuf,
    },
    /// Stream a WAV file and print verdicts as JSON lines.
    Monitor {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Finite-difference check of the backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Seed of the stratified train/test split.
    #[arg(long, default_value_t = 42)]
    split_seed: u64,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 5)]
    patience: usize,
}

impl FitArgs {
    fn config(&self, colored: bool) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            colored,
            early_stop_patience: self.patience,
        }
    }
}

enum Failure {
    Data(Box<dyn std::error::Error>),
    Check(String),
}

impl<E: std::error::Error + 'static> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Data(Box::new(e))
    }
}

fn load_split(data: &DataArgs) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>), Failure> {
    let examples = audio_io::load_manifest(&data.manifest)?;
    let (train, test) = trainer::split_examples(&examples, DEFAULT_TRAIN_FRACTION, data.split_seed)?;
    log::info!("split: {} train / {} test", train.len(), test.len());
    Ok((train, test))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text)?;
    Ok(())
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Synth { out, count, seed } => {
            let manifest = synth::synth_dataset(count, seed, &out)?;
            log::info!("wrote {count} clips; manifest {}", manifest.display());
        }
        Command::Spectrogram { input, out, color, noise_profile } => {
            let clip = audio_io::read_wav(&input)?;
            let denoise = match noise_profile {
                Some(p) => Some(Denoise::from_noise_clip(&audio_io::read_wav(p)?)?),
                None => None,
            };
            let image = features::clip_features(&clip, color, denoise.as_ref())?;
            spectrogram::export_image(&image, &out)?;
        }
        Command::Train { data, color, fit, out, history } => {
            let (train, test) = load_split(&data)?;
            let (model, hist) =
                trainer::train(&trainer::load_clips(&train)?, &trainer::load_clips(&test)?, &fit.config(color))?;
            cnn::save_model(&model, &out)?;
            if let Some(h) = history {
                write_text(&h, &hist.to_json())?;
            }
            log::info!("best epoch {}; model written to {}", hist.best_epoch, out.display());
        }
        Command::Finetune { base, freeze_conv, data, fit, out, history } => {
            let base_model = cnn::load_model(&base)?;
            let layers = base_model.architecture().param_layer_count();
            let mask = if freeze_conv { FreezeMask::freeze_conv() } else { FreezeMask::uniform(layers, false) };
            let (train, test) = load_split(&data)?;
            let colored = base_model.input_shape().channels == 3;
            let (model, hist) = trainer::finetune(
                &base_model,
                &mask,
                &trainer::load_clips(&train)?,
                &trainer::load_clips(&test)?,
                &fit.config(colored),
            )?;
            cnn::save_model(&model, &out)?;
            if let Some(h) = history {
                write_text(&h, &hist.to_json())?;
            }
        }
        Command::Eval { data, model, report } => {
            let model = cnn::load_model(&model)?;
            let (_, test) = load_split(&data)?;
            let colored = model.input_shape().channels == 3;
            let feats = trainer::featurize(&trainer::load_clips(&test)?, colored)?;
            let (_, _, preds) = trainer::evaluate(&model, &feats)?;
            let truths: Vec<usize> = feats.iter().map(|f| f.label.index()).collect();
            let rep = metrics::metrics_from_confusion(&metrics::confusion(&truths, &preds)?)?;
            write_text(&report, &rep.to_json())?;
            log::info!("accuracy {:.4}, binary fault F1 {:.4}", rep.accuracy, rep.binary_fault.f1);
        }
        Command::Classify { model, wav } => {
            let model = cnn::load_model(&model)?;
            let probs = features::classify_clip(&model, &audio_io::read_wav(&wav)?)?;
            println!("{}", serde_json::to_string(&monitor::Probs::from(probs))?);
        }
        Command::Monitor { model, input } => {
            let model: Model = cnn::load_model(&model)?;
            let mut mon = MonitorBuilder::new().model(Arc::new(model)).build()?;
            let stdout = std::io::stdout();
            let verdicts = monitor::run_file(&mut mon, &input, stdout.lock())?;
            log::info!("{} verdicts", verdicts.len());
        }
        Command::Gradcheck { seed } => {
            let err = cnn::grad_check(seed);
            println!("{err:e}");
            if err.is_nan() || err >= GRADCHECK_TOL {
                return Err(Failure::Check(format!("max relative error {err:e} >= {GRADCHECK_TOL:e}")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(3)
        }
    }
}
