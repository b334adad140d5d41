//! `drgrade` command-line interface.
//!
//! Exit codes: 0 success, 2 invalid input or configuration, 3 runtime
//! failure (e.g. a diverging loss). Errors go to stderr as one JSON object.

mod commands;
mod config;
mod plots;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use drgrade::calibration::{Objective, ScoreKind};
use drgrade::data::{AugmentParams, AugmentationConfig};
use drgrade::io::{ClusterSpec, SynthKind};
use drgrade::losses::RankingVariant;
use drgrade::models::ScoreMode;
use drgrade::training::{ClassWeighting, Monitor, TrainConfig};
use drgrade::Backend;

use config::*;

pub const OUT_DIR_ENV: &str = "DRGRADE_OUT_DIR";

#[derive(Parser)]
#[command(name = "drgrade", version, about = "Diabetic-retinopathy grading over precomputed embeddings")]
struct Cli {
    /// Run data-parallel loops on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct OutArg {
    /// Output directory (default: $DRGRADE_OUT_DIR).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Patient-grouped stratified train/val/test split.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.7,0.15,0.15")]
        ratios: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        no_group_by_patient: bool,
        #[command(flatten)]
        out: OutArg,
    },
    /// Resample a manifest to exact per-grade counts.
    Resample {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "445,200,200,180,180")]
        targets: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        no_replacement: bool,
        #[command(flatten)]
        out: OutArg,
    },
    /// Write a manifest of synthetic records with the given grade counts.
    SynthManifest {
        #[arg(long, value_delimiter = ',')]
        counts: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        images_per_patient: usize,
        #[arg(long, default_value = "synthetic")]
        source: String,
        #[command(flatten)]
        out: OutArg,
    },
    /// Generate class-clustered embeddings for a manifest.
    Synth {
        #[arg(long)]
        manifest: PathBuf,
        /// Global embedding dimension.
        #[arg(long, conflicts_with = "featmap")]
        dim: Option<usize>,
        /// Feature-map shape C,H,W.
        #[arg(long, value_delimiter = ',')]
        featmap: Option<Vec<usize>>,
        #[arg(long, default_value_t = ClusterSpec::default().separation)]
        separation: f64,
        #[arg(long, default_value_t = ClusterSpec::default().noise_std)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the class means as prompts.gfp.
        #[arg(long)]
        write_prompts: bool,
        #[command(flatten)]
        out: OutArg,
    },
    /// Train a ranking or FCN head.
    Train(TrainArgs),
    /// Fit per-class decision thresholds on a held-out set.
    Calibrate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, value_enum, default_value_t = ObjectiveArg::F1)]
        objective: ObjectiveArg,
        #[arg(long, value_enum, default_value_t = ScoreKindArg::Probabilities)]
        score_kind: ScoreKindArg,
        #[command(flatten)]
        out: OutArg,
    },
    /// Compute metrics for a model, zero-shot prompts or a predictions file.
    Evaluate {
        #[command(flatten)]
        source: SourceArgs,
        /// Existing predictions CSV instead of a model.
        #[arg(long, conflicts_with_all = ["checkpoint", "prompts"])]
        predictions: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        thresholds: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Write per-image predictions.
    Predict {
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        thresholds: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Render training curves, confusion matrix and ROC curves as SVG.
    Report {
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        confusion: Option<PathBuf>,
        #[arg(long)]
        roc: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Write augmented copies of the images in a manifest.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory the manifest's file paths are relative to.
        #[arg(long)]
        image_root: PathBuf,
        /// JSON augmentation config; defaults to the standard/minority presets.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Re-execute a run from its resolved_config.json.
    Rerun {
        config: PathBuf,
        /// Write to this directory instead of the recorded one.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct SourceArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Prompt file for zero-shot classification.
    #[arg(long, conflicts_with = "checkpoint")]
    prompts: Option<PathBuf>,
    #[arg(long, default_value_t = 0.01)]
    zero_shot_temperature: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value_t = HeadChoice::Ranking)]
    head: HeadChoice,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    /// JSON training config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    score_mode: Option<ScoreModeArg>,
    #[arg(long)]
    init_prompts: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    fcn_widths: Option<Vec<usize>>,
    #[arg(long, default_value_t = 16)]
    fcn_reduction: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long, value_enum)]
    monitor: Option<MonitorArg>,
    #[arg(long, value_enum)]
    class_weighting: Option<WeightingArg>,
    #[arg(long, value_enum)]
    ranking_variant: Option<VariantArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    F1,
    Youden,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoreKindArg {
    Probabilities,
    Raw,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoreModeArg {
    Cosine,
    InnerProduct,
}

#[derive(Clone, Copy, ValueEnum)]
enum MonitorArg {
    ValLoss,
    ValAccuracy,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightingArg {
    Uniform,
    InverseFrequency,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Unimodal,
    Monotone,
}

fn out_dir(arg: OutArg) -> Result<PathBuf, commands::CliError> {
    arg.out
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .ok_or_else(|| commands::CliError::usage(format!("no output directory: pass --out or set {OUT_DIR_ENV}")))
}

fn model_source(s: SourceArgs) -> Result<ModelSource, commands::CliError> {
    match (s.checkpoint, s.prompts) {
        (Some(path), None) => Ok(ModelSource::Checkpoint { path }),
        (None, Some(prompts)) => Ok(ModelSource::ZeroShot {
            prompts,
            temperature: s.zero_shot_temperature,
        }),
        _ => Err(commands::CliError::usage("pass exactly one of --checkpoint or --prompts")),
    }
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig, commands::CliError> {
    let mut c: TrainConfig = match &a.config {
        Some(p) => serde_json::from_str(&drgrade::io::read_to_string(p)?)
            .map_err(|e| commands::CliError::usage(format!("{}: {e}", p.display())))?,
        None => TrainConfig::default(),
    };
    macro_rules! over {
        ($field:ident, $arg:expr) => {
            if let Some(v) = $arg {
                c.$field = v;
            }
        };
    }
    over!(epochs, a.epochs);
    over!(batch_size, a.batch_size);
    over!(learning_rate, a.lr);
    over!(weight_decay, a.weight_decay);
    over!(early_stop_patience, a.patience);
    over!(temperature, a.temperature);
    over!(alpha, a.alpha);
    over!(gamma, a.gamma);
    over!(margin, a.margin);
    over!(seed, a.seed);
    over!(
        monitor,
        a.monitor.map(|m| match m {
            MonitorArg::ValLoss => Monitor::ValLoss,
            MonitorArg::ValAccuracy => Monitor::ValAccuracy,
        })
    );
    over!(
        class_weighting,
        a.class_weighting.map(|w| match w {
            WeightingArg::Uniform => ClassWeighting::Uniform,
            WeightingArg::InverseFrequency => ClassWeighting::InverseFrequency,
        })
    );
    over!(
        ranking_variant,
        a.ranking_variant.map(|v| match v {
            VariantArg::Unimodal => RankingVariant::Unimodal,
            VariantArg::Monotone => RankingVariant::Monotone,
        })
    );
    Ok(c)
}

fn fixed<const N: usize, T: Copy>(flag: &str, v: Vec<T>) -> Result<[T; N], commands::CliError> {
    let n = v.len();
    v.try_into()
        .map_err(|_| commands::CliError::usage(format!("--{flag} takes {N} comma-separated values, got {n}")))
}

fn resolve(command: Command) -> Result<RunConfig, commands::CliError> {
    use commands::CliError;
    Ok(match command {
        Command::Split { manifest, ratios, seed, no_group_by_patient, out } => RunConfig::Split(SplitRun {
            manifest,
            out: out_dir(out)?,
            ratios: fixed("ratios", ratios)?,
            seed,
            group_by_patient: !no_group_by_patient,
        }),
        Command::Resample { manifest, targets, seed, no_replacement, out } => RunConfig::Resample(ResampleRun {
            manifest,
            out: out_dir(out)?,
            targets: fixed("targets", targets)?,
            seed,
            with_replacement: !no_replacement,
        }),
        Command::SynthManifest { counts, images_per_patient, source, out } => {
            RunConfig::SynthManifest(SynthManifestRun {
                out: out_dir(out)?,
                counts: fixed("counts", counts)?,
                images_per_patient,
                source,
            })
        }
        Command::Synth { manifest, dim, featmap, separation, noise, seed, write_prompts, out } => {
            let kind = match (dim, featmap) {
                (Some(dim), None) => SynthKind::Global { dim },
                (None, Some(f)) => {
                    let [channels, height, width] = fixed("featmap", f)?;
                    SynthKind::FeatureMap { channels, height, width }
                }
                _ => return Err(CliError::usage("pass exactly one of --dim or --featmap")),
            };
            RunConfig::Synth(SynthRun {
                manifest,
                out: out_dir(out)?,
                kind,
                cluster: ClusterSpec {
                    separation,
                    noise_std: noise,
                },
                seed,
                write_prompts,
            })
        }
        Command::Train(a) => {
            let train = train_config(&a)?;
            RunConfig::Train(TrainRun {
                head: a.head,
                train_manifest: a.train,
                val_manifest: a.val,
                embeddings: a.embeddings,
                out: out_dir(a.out)?,
                score_mode: match a.score_mode {
                    Some(ScoreModeArg::InnerProduct) => ScoreMode::InnerProduct,
                    _ => ScoreMode::Cosine,
                },
                init_prompts: a.init_prompts,
                fcn_widths: a.fcn_widths,
                fcn_reduction: a.fcn_reduction,
                train,
            })
        }
        Command::Calibrate { checkpoint, manifest, embeddings, objective, score_kind, out } => {
            RunConfig::Calibrate(CalibrateRun {
                checkpoint,
                manifest,
                embeddings,
                out: out_dir(out)?,
                objective: match objective {
                    ObjectiveArg::F1 => Objective::F1,
                    ObjectiveArg::Youden => Objective::Youden,
                },
                score_kind: match score_kind {
                    ScoreKindArg::Probabilities => ScoreKind::Probabilities,
                    ScoreKindArg::Raw => ScoreKind::Raw,
                },
            })
        }
        Command::Evaluate { source, predictions, manifest, embeddings, thresholds, out } => {
            let source = match predictions {
                Some(path) => ModelSource::Predictions { path },
                None => model_source(source)?,
            };
            RunConfig::Evaluate(EvaluateRun {
                source,
                manifest,
                embeddings,
                thresholds,
                out: out_dir(out)?,
            })
        }
        Command::Predict { source, manifest, embeddings, thresholds, out } => RunConfig::Predict(PredictRun {
            source: model_source(source)?,
            manifest,
            embeddings,
            thresholds,
            out: out_dir(out)?,
        }),
        Command::Report { history, confusion, roc, out } => RunConfig::Report(ReportRun {
            history,
            confusion,
            roc,
            out: out_dir(out)?,
        }),
        Command::Augment { manifest, image_root, config, seed, out } => {
            let config = match config {
                Some(p) => serde_json::from_str(&drgrade::io::read_to_string(&p)?)
                    .map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?,
                None => AugmentationConfig {
                    standard: AugmentParams::standard(),
                    minority: AugmentParams::minority(),
                    ..AugmentationConfig::uniform(AugmentParams::standard())
                },
            };
            RunConfig::Augment(AugmentRun {
                manifest,
                image_root,
                out: out_dir(out)?,
                config,
                seed,
            })
        }
        Command::Rerun { config, out } => {
            let text = drgrade::io::read_to_string(&config)?;
            let mut run: RunConfig = serde_json::from_str(&text)
                .map_err(|e| CliError::usage(format!("{}: {e}", config.display())))?;
            if let Some(out) = out {
                run.set_out(out);
            }
            run
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let backend = if cli.sequential { Backend::Sequential } else { Backend::default() };
    let result = resolve(cli.command).and_then(|run| commands::execute(&run, backend));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}
