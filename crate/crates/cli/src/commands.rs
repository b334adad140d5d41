use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use drgrade::calibration::{calibrate_thresholds_with, ScoreKind, ThresholdSet};
use drgrade::data::{
    augment_batch, load_manifest, load_resampled_manifest, resample, stratified_split, write_manifest,
    ImageRecord, Manifest, RgbImage, ResampleSpec, SplitSpec,
};
use drgrade::io::{
    load_embeddings, load_feature_maps, synth_embeddings_with, write_bytes, write_json, Container,
    EmbeddingSource, EntryKind, PromptFile, ShardSet,
};
use drgrade::metrics::{evaluate, roc_csv};
use drgrade::models::{load_checkpoint, save_checkpoint, FcnConfig, Model, Parameters, RankingHead, ScoreMode};
use drgrade::training::{
    history_csv, init_fcn_head, init_ranking_head, predict, train, Dataset, EpochRecord, Prediction,
};
use drgrade::{Backend, Error, Grade, Tensor, NUM_GRADES};
use serde::Serialize;
use serde_json::json;

use crate::config::*;
use crate::plots;

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    Usage(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if !e.is_validation() => 3,
            _ => 2,
        }
    }

    pub fn to_json(&self) -> String {
        let kind = if self.exit_code() == 2 { "validation" } else { "runtime" };
        let message = match self {
            CliError::Core(e) => e.to_string(),
            CliError::Usage(m) => m.clone(),
        };
        json!({ "error": { "kind": kind, "message": message } }).to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn execute(run: &RunConfig, backend: Backend) -> Result<()> {
    let started = unix_ms();
    let out = run.out();
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    let outputs = match run {
        RunConfig::Split(c) => split(c)?,
        RunConfig::Resample(c) => resample_cmd(c)?,
        RunConfig::SynthManifest(c) => synth_manifest(c)?,
        RunConfig::Synth(c) => synth(c, backend)?,
        RunConfig::Train(c) => train_cmd(c)?,
        RunConfig::Calibrate(c) => calibrate(c, backend)?,
        RunConfig::Evaluate(c) => evaluate_cmd(c)?,
        RunConfig::Predict(c) => predict_cmd(c)?,
        RunConfig::Report(c) => report(c)?,
        RunConfig::Augment(c) => augment_cmd(c, backend)?,
    };
    write_json(&out.join("resolved_config.json"), run)?;
    // Wall-clock data lives only here so every other output is reproducible.
    write_json(
        &out.join("run_meta.json"),
        &json!({
            "command": run.name(),
            "version": env!("CARGO_PKG_VERSION"),
            "started_unix_ms": started,
            "finished_unix_ms": unix_ms(),
            "outputs": outputs,
        }),
    )?;
    Ok(())
}

fn unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

fn split(c: &SplitRun) -> Result<Vec<&'static str>> {
    let manifest = load_manifest(&c.manifest)?;
    let spec = SplitSpec {
        ratios: c.ratios,
        seed: c.seed,
        group_by_patient: c.group_by_patient,
    };
    let s = stratified_split(&manifest, &spec)?;
    write_manifest(&c.out.join("train.csv"), s.train.records())?;
    write_manifest(&c.out.join("val.csv"), s.val.records())?;
    write_manifest(&c.out.join("test.csv"), s.test.records())?;
    write_json(&c.out.join("split_summary.json"), &s.summary)?;
    Ok(vec!["train.csv", "val.csv", "test.csv", "split_summary.json"])
}

fn resample_cmd(c: &ResampleRun) -> Result<Vec<&'static str>> {
    let manifest = load_resampled_manifest(&c.manifest)?;
    let spec = ResampleSpec {
        target_counts: c.targets,
        seed: c.seed,
        with_replacement: c.with_replacement,
    };
    let (records, summary) = resample(manifest.records(), &spec)?;
    write_manifest(&c.out.join("resampled.csv"), &records)?;
    write_json(&c.out.join("resample_summary.json"), &summary)?;
    Ok(vec!["resampled.csv", "resample_summary.json"])
}

fn synth_manifest(c: &SynthManifestRun) -> Result<Vec<&'static str>> {
    let mut records = Vec::new();
    for (g, &n) in c.counts.iter().enumerate() {
        for i in 0..n {
            let image_id = format!("syn_{g}_{i:05}");
            records.push(ImageRecord {
                filepath: format!("{}/{image_id}.png", c.source),
                image_id,
                grade: Grade::from_index(g)?,
                patient_id: (c.images_per_patient > 0).then(|| format!("p_{g}_{:05}", i / c.images_per_patient)),
                source: c.source.clone(),
            });
        }
    }
    if records.is_empty() {
        return Err(CliError::usage("all grade counts are zero"));
    }
    write_manifest(&c.out.join("manifest.csv"), &records)?;
    Ok(vec!["manifest.csv"])
}

fn synth(c: &SynthRun, backend: Backend) -> Result<Vec<&'static str>> {
    let manifest = load_manifest(&c.manifest)?;
    let out = synth_embeddings_with(backend, manifest.records(), c.kind.clone(), c.cluster.clone(), c.seed)?;
    out.container.write(&c.out.join("embeddings.gfe"))?;
    let mut outputs = vec!["embeddings.gfe"];
    if c.write_prompts {
        let means = &out.class_means;
        let rows = (0..NUM_GRADES)
            .map(|g| means.row(g).iter().map(|&v| v as f32).collect())
            .collect();
        PromptFile::with_default_texts(rows)?.write(&c.out.join("prompts.gfp"))?;
        outputs.push("prompts.gfp");
    }
    Ok(outputs)
}

/// A single container, or a shard manifest when the path ends in `.json`.
pub fn open_embeddings(path: &Path) -> Result<Box<dyn EmbeddingSource>> {
    if path.extension().is_some_and(|e| e == "json") {
        Ok(Box::new(ShardSet::open(path)?))
    } else {
        Ok(Box::new(Container::read(path)?))
    }
}

fn load_inputs(source: &dyn EmbeddingSource, manifest: &Manifest, kind: EntryKind) -> Result<Tensor> {
    let ids = manifest.ids();
    Ok(match kind {
        EntryKind::FeatureMap => load_feature_maps(source, &ids)?,
        _ => load_embeddings(source, &ids)?,
    })
}

#[derive(Serialize)]
struct TrainSummary {
    head: HeadChoice,
    train_samples: usize,
    val_samples: usize,
    parameter_count: usize,
    epochs_run: usize,
    best_epoch: usize,
    stopped_early: bool,
    best: Option<EpochRecord>,
    last: Option<EpochRecord>,
}

fn parameter_count(p: &dyn Parameters) -> usize {
    let mut n = 0;
    p.visit(&mut |_, t| n += t.len());
    n
}

fn train_cmd(c: &TrainRun) -> Result<Vec<&'static str>> {
    c.train.validate()?;
    let train_m = load_resampled_manifest(&c.train_manifest)?;
    let val_m = load_resampled_manifest(&c.val_manifest)?;
    let source = open_embeddings(&c.embeddings)?;
    let kind = match c.head {
        HeadChoice::Ranking => EntryKind::Global,
        HeadChoice::Fcn => EntryKind::FeatureMap,
    };
    let xt = load_inputs(source.as_ref(), &train_m, kind)?;
    let xv = load_inputs(source.as_ref(), &val_m, kind)?;
    let yt = train_m.grades();
    let yv = val_m.grades();
    let tset = Dataset::new(&xt, &yt)?;
    let vset = Dataset::new(&xv, &yv)?;

    let (model, history, best_epoch, stopped_early) = match c.head {
        HeadChoice::Ranking => {
            let dim = xt.shape()[1];
            let init = match &c.init_prompts {
                Some(p) => {
                    let mut prompts = PromptFile::read(p)?.to_prompt_bank(c.train.temperature)?;
                    prompts.learnable = true;
                    RankingHead {
                        prompts,
                        score_mode: c.score_mode,
                    }
                }
                None => init_ranking_head(dim, &c.train, c.score_mode)?,
            };
            let o = train(init, tset, vset, &c.train)?;
            (Model::Ranking(o.best), o.history, o.best_epoch, o.stopped_early)
        }
        HeadChoice::Fcn => {
            let mut cfg = FcnConfig::for_channels(xt.shape()[1]);
            if let Some(w) = &c.fcn_widths {
                cfg.widths = w.clone();
            }
            cfg.reduction = c.fcn_reduction;
            let o = train(init_fcn_head(cfg, &c.train)?, tset, vset, &c.train)?;
            (Model::Fcn(o.best), o.history, o.best_epoch, o.stopped_early)
        }
    };
    save_checkpoint(&c.out.join("model.gfe"), &model)?;
    write_bytes(&c.out.join("history.csv"), history_csv(&history).as_bytes())?;
    let count = match &model {
        Model::Ranking(h) => parameter_count(h),
        Model::Fcn(p) => parameter_count(p),
    };
    write_json(
        &c.out.join("train_summary.json"),
        &TrainSummary {
            head: c.head,
            train_samples: yt.len(),
            val_samples: yv.len(),
            parameter_count: count,
            epochs_run: history.len(),
            best_epoch,
            stopped_early,
            best: history.iter().find(|r| r.epoch == best_epoch).copied(),
            last: history.last().copied(),
        },
    )?;
    Ok(vec!["model.gfe", "model.gfe.json", "history.csv", "train_summary.json"])
}

fn load_model(source: &ModelSource) -> Result<Model> {
    match source {
        ModelSource::Checkpoint { path } => Ok(load_checkpoint(path)?),
        ModelSource::ZeroShot { prompts, temperature } => Ok(Model::Ranking(RankingHead {
            prompts: PromptFile::read(prompts)?.to_prompt_bank(*temperature)?,
            score_mode: ScoreMode::Cosine,
        })),
        ModelSource::Predictions { .. } => Err(CliError::usage("a predictions file is not a model")),
    }
}

fn run_model(source: &ModelSource, manifest: &Manifest, embeddings: &Path, th: Option<&ThresholdSet>) -> Result<Prediction> {
    let model = load_model(source)?;
    let src = open_embeddings(embeddings)?;
    let x = load_inputs(src.as_ref(), manifest, model.architecture().input_kind())?;
    Ok(predict(&model.logits(&x)?, th)?)
}

fn read_thresholds(path: Option<&PathBuf>) -> Result<Option<ThresholdSet>> {
    path.map(|p| {
        serde_json::from_str(&drgrade::io::read_to_string(p)?)
            .map_err(|e| CliError::usage(format!("{}: {e}", p.display())))
    })
    .transpose()
}

fn calibrate(c: &CalibrateRun, backend: Backend) -> Result<Vec<&'static str>> {
    let manifest = load_resampled_manifest(&c.manifest)?;
    let source = ModelSource::Checkpoint {
        path: c.checkpoint.clone(),
    };
    let pred = run_model(&source, &manifest, &c.embeddings, None)?;
    let scores = match c.score_kind {
        ScoreKind::Probabilities => &pred.probabilities,
        ScoreKind::Raw => &pred.logits,
    };
    let th = calibrate_thresholds_with(backend, scores, &manifest.grades(), c.objective, c.score_kind)?;
    write_json(&c.out.join("thresholds.json"), &th)?;
    Ok(vec!["thresholds.json"])
}

pub const PREDICTIONS_HEADER: &str = "image_id,true_grade,pred_grade,p_0,p_1,p_2,p_3,p_4";

fn predictions_csv(manifest: &Manifest, pred: &Prediction) -> String {
    let mut s = String::from(PREDICTIONS_HEADER);
    s.push('\n');
    for ((r, g), p) in manifest.records().iter().zip(&pred.grades).zip(&pred.probabilities) {
        s.push_str(&format!("{},{},{}", r.image_id, r.grade.index(), g.index()));
        for v in p {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

/// Read a predictions CSV; rows are matched to the manifest by image id.
fn read_predictions(path: &Path, manifest: &Manifest) -> Result<(Vec<Grade>, Option<Vec<[f64; NUM_GRADES]>>)> {
    let rows = plots::read_rows(path, &["image_id", "true_grade", "pred_grade"], Some(PREDICTIONS_HEADER))?;
    let mut by_id: HashMap<String, (Grade, Option<[f64; NUM_GRADES]>)> = HashMap::new();
    for row in rows {
        let g = Grade::new(row.parse::<u8>(2)?)?;
        let probs = if row.len() == 8 {
            let mut p = [0.0; NUM_GRADES];
            for (k, v) in p.iter_mut().enumerate() {
                *v = row.parse::<f64>(3 + k)?;
            }
            Some(p)
        } else {
            None
        };
        by_id.insert(row.field(0).to_string(), (g, probs));
    }
    let mut preds = Vec::new();
    let mut scores = Vec::new();
    for r in manifest.records() {
        let (g, p) = by_id
            .get(&r.image_id)
            .ok_or_else(|| CliError::usage(format!("{}: no prediction for {}", path.display(), r.image_id)))?;
        preds.push(*g);
        scores.push(*p);
    }
    let scores = scores.into_iter().collect::<Option<Vec<_>>>();
    Ok((preds, scores))
}

fn evaluate_cmd(c: &EvaluateRun) -> Result<Vec<&'static str>> {
    let manifest = load_resampled_manifest(&c.manifest)?;
    let labels = manifest.grades();
    let th = read_thresholds(c.thresholds.as_ref())?;
    let mut outputs = vec!["metrics.json", "confusion.csv"];
    let (preds, scores) = match &c.source {
        ModelSource::Predictions { path } => read_predictions(path, &manifest)?,
        src => {
            let emb = c
                .embeddings
                .as_ref()
                .ok_or_else(|| CliError::usage("--embeddings is required to evaluate a model"))?;
            let pred = run_model(src, &manifest, emb, th.as_ref())?;
            write_bytes(&c.out.join("predictions.csv"), predictions_csv(&manifest, &pred).as_bytes())?;
            outputs.push("predictions.csv");
            (pred.grades, Some(pred.probabilities))
        }
    };
    let report = evaluate(&preds, &labels, scores.as_deref())?;
    write_json(&c.out.join("metrics.json"), &report)?;
    write_bytes(&c.out.join("confusion.csv"), report.confusion.to_csv().as_bytes())?;
    if let Some(s) = &scores {
        write_bytes(&c.out.join("roc.csv"), roc_csv(s, &labels)?.as_bytes())?;
        outputs.push("roc.csv");
    }
    Ok(outputs)
}

fn predict_cmd(c: &PredictRun) -> Result<Vec<&'static str>> {
    let manifest = load_resampled_manifest(&c.manifest)?;
    let th = read_thresholds(c.thresholds.as_ref())?;
    let pred = run_model(&c.source, &manifest, &c.embeddings, th.as_ref())?;
    write_bytes(&c.out.join("predictions.csv"), predictions_csv(&manifest, &pred).as_bytes())?;
    Ok(vec!["predictions.csv"])
}

fn report(c: &ReportRun) -> Result<Vec<&'static str>> {
    let mut outputs = Vec::new();
    if let Some(p) = &c.history {
        write_bytes(&c.out.join("curves.svg"), plots::curves_svg(&plots::read_history(p)?).as_bytes())?;
        outputs.push("curves.svg");
    }
    if let Some(p) = &c.confusion {
        write_bytes(&c.out.join("confusion.svg"), plots::confusion_svg(&plots::read_confusion(p)?).as_bytes())?;
        outputs.push("confusion.svg");
    }
    if let Some(p) = &c.roc {
        write_bytes(&c.out.join("roc.svg"), plots::roc_svg(&plots::read_roc(p)?).as_bytes())?;
        outputs.push("roc.svg");
    }
    if outputs.is_empty() {
        return Err(CliError::usage("nothing to report: pass --history, --confusion or --roc"));
    }
    Ok(outputs)
}

fn augment_cmd(c: &AugmentRun, backend: Backend) -> Result<Vec<&'static str>> {
    c.config.validate()?;
    let manifest = load_resampled_manifest(&c.manifest)?;
    let items = manifest
        .records()
        .iter()
        .map(|r| Ok((RgbImage::load(&c.image_root.join(&r.filepath))?, r.grade)))
        .collect::<Result<Vec<_>>>()?;
    let images = augment_batch(backend, &items, &c.config, c.seed)?;
    let dir = c.out.join("images");
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    let mut records = Vec::with_capacity(images.len());
    for (i, (r, img)) in manifest.records().iter().zip(&images).enumerate() {
        // Row index keeps ids unique when the manifest repeats an image.
        let image_id = format!("{}_aug{i:05}", r.image_id);
        let filepath = format!("images/{image_id}.png");
        img.save(&c.out.join(&filepath))?;
        records.push(ImageRecord {
            image_id,
            filepath,
            ..r.clone()
        });
    }
    write_manifest(&c.out.join("augmented.csv"), &records)?;
    Ok(vec!["augmented.csv", "images/"])
}
