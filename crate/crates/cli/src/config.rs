//! Resolved run configurations. Every command writes one of these as
//! `resolved_config.json`; `drgrade rerun` feeds it back.

use std::path::PathBuf;

use drgrade::calibration::{Objective, ScoreKind};
use drgrade::data::AugmentationConfig;
use drgrade::io::{ClusterSpec, SynthKind};
use drgrade::models::ScoreMode;
use drgrade::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum RunConfig {
    Split(SplitRun),
    Resample(ResampleRun),
    SynthManifest(SynthManifestRun),
    Synth(SynthRun),
    Train(TrainRun),
    Calibrate(CalibrateRun),
    Evaluate(EvaluateRun),
    Predict(PredictRun),
    Report(ReportRun),
    Augment(AugmentRun),
}

impl RunConfig {
    pub fn name(&self) -> &'static str {
        match self {
            RunConfig::Split(_) => "split",
            RunConfig::Resample(_) => "resample",
            RunConfig::SynthManifest(_) => "synth-manifest",
            RunConfig::Synth(_) => "synth",
            RunConfig::Train(_) => "train",
            RunConfig::Calibrate(_) => "calibrate",
            RunConfig::Evaluate(_) => "evaluate",
            RunConfig::Predict(_) => "predict",
            RunConfig::Report(_) => "report",
            RunConfig::Augment(_) => "augment",
        }
    }

    pub fn out(&self) -> &PathBuf {
        match self {
            RunConfig::Split(c) => &c.out,
            RunConfig::Resample(c) => &c.out,
            RunConfig::SynthManifest(c) => &c.out,
            RunConfig::Synth(c) => &c.out,
            RunConfig::Train(c) => &c.out,
            RunConfig::Calibrate(c) => &c.out,
            RunConfig::Evaluate(c) => &c.out,
            RunConfig::Predict(c) => &c.out,
            RunConfig::Report(c) => &c.out,
            RunConfig::Augment(c) => &c.out,
        }
    }

    pub fn set_out(&mut self, out: PathBuf) {
        match self {
            RunConfig::Split(c) => c.out = out,
            RunConfig::Resample(c) => c.out = out,
            RunConfig::SynthManifest(c) => c.out = out,
            RunConfig::Synth(c) => c.out = out,
            RunConfig::Train(c) => c.out = out,
            RunConfig::Calibrate(c) => c.out = out,
            RunConfig::Evaluate(c) => c.out = out,
            RunConfig::Predict(c) => c.out = out,
            RunConfig::Report(c) => c.out = out,
            RunConfig::Augment(c) => c.out = out,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRun {
    pub manifest: PathBuf,
    pub out: PathBuf,
    pub ratios: [f64; 3],
    pub seed: u64,
    pub group_by_patient: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResampleRun {
    pub manifest: PathBuf,
    pub out: PathBuf,
    pub targets: [usize; 5],
    pub seed: u64,
    pub with_replacement: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthManifestRun {
    pub out: PathBuf,
    pub counts: [usize; 5],
    /// Consecutive images of a grade share a patient id; 0 leaves it empty.
    pub images_per_patient: usize,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRun {
    pub manifest: PathBuf,
    pub out: PathBuf,
    pub kind: SynthKind,
    pub cluster: ClusterSpec,
    pub seed: u64,
    /// Also write the class means as a prompt file.
    pub write_prompts: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum HeadChoice {
    Ranking,
    Fcn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    pub head: HeadChoice,
    pub train_manifest: PathBuf,
    pub val_manifest: PathBuf,
    pub embeddings: PathBuf,
    pub out: PathBuf,
    pub score_mode: ScoreMode,
    /// Prompt file used to initialise the ranking head instead of random prompts.
    pub init_prompts: Option<PathBuf>,
    /// FCN block widths; `None` means C, C/2, C/4.
    pub fcn_widths: Option<Vec<usize>>,
    pub fcn_reduction: usize,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateRun {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub embeddings: PathBuf,
    pub out: PathBuf,
    pub objective: Objective,
    pub score_kind: ScoreKind,
}

/// Where predictions come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSource {
    Checkpoint { path: PathBuf },
    ZeroShot { prompts: PathBuf, temperature: f64 },
    /// An existing predictions CSV (evaluate only).
    Predictions { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateRun {
    pub source: ModelSource,
    pub manifest: PathBuf,
    pub embeddings: Option<PathBuf>,
    pub thresholds: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRun {
    pub source: ModelSource,
    pub manifest: PathBuf,
    pub embeddings: PathBuf,
    pub thresholds: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRun {
    pub history: Option<PathBuf>,
    pub confusion: Option<PathBuf>,
    pub roc: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentRun {
    pub manifest: PathBuf,
    /// Directory that manifest file paths are relative to.
    pub image_root: PathBuf,
    pub out: PathBuf,
    pub config: AugmentationConfig,
    pub seed: u64,
}
