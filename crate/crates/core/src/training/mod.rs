//! AdamW, the epoch loop with early stopping, and prediction.

mod optim;

pub use optim::{adamw_step, AdamWConfig, OptimState};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::calibration::{decide, ScoreKind, ThresholdSet};
use crate::error::{Error, Result};
use crate::grade::{argmax_high, histogram, Grade, NUM_GRADES};
use crate::losses::{
    combined_loss, fcn_loss, AlphaWeights, ClassWeights, CombinedLossConfig, FcnLossMode,
    LossValue, RankingVariant,
};
use crate::models::{
    ranking_head_backward, ranking_head_forward, softmax, FcnHeadParams, GradeLogits, Grads,
    Mode, Model, Parameters, RankingHead,
};
use crate::rng;
use crate::tensor::{BatchStats, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    #[default]
    ValLoss,
    ValAccuracy,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    Uniform,
    /// Inverse training-set frequency, mean 1.
    #[default]
    InverseFrequency,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub early_stop_patience: usize,
    pub temperature: f64,
    /// Cross-entropy weight in the ranking head's combined loss.
    pub alpha: f64,
    /// Focal gamma of the FCN head's loss.
    pub gamma: f64,
    pub margin: f64,
    pub seed: u64,
    pub monitor: Monitor,
    pub class_weighting: ClassWeighting,
    pub ranking_variant: RankingVariant,
    pub alpha_weights: AlphaWeights,
    /// Focal gamma inside the ranking head's classification term.
    pub ranking_gamma: f64,
    pub fcn_loss: FcnLossMode,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Std of the initial learnable prompts.
    pub prompt_init_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 2e-4,
            weight_decay: 1e-3,
            epochs: 20,
            early_stop_patience: 7,
            temperature: 0.2,
            alpha: 0.7,
            gamma: 2.0,
            margin: 0.05,
            seed: 0,
            monitor: Monitor::ValLoss,
            class_weighting: ClassWeighting::InverseFrequency,
            ranking_variant: RankingVariant::Unimodal,
            alpha_weights: AlphaWeights::CrossEntropy,
            ranking_gamma: 0.0,
            fcn_loss: FcnLossMode::WeightedFocal,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            prompt_init_std: 0.02,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("learning_rate", self.learning_rate),
            ("epochs", self.epochs as f64),
            ("early_stop_patience", self.early_stop_patience as f64),
            ("temperature", self.temperature),
            ("eps", self.eps),
            ("prompt_init_std", self.prompt_init_std),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("gamma", self.gamma),
            ("ranking_gamma", self.ranking_gamma),
            ("margin", self.margin),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.early_stop_patience > self.epochs {
            return Err(Error::invalid(format!(
                "early_stop_patience {} exceeds epochs {}",
                self.early_stop_patience, self.epochs
            )));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn class_weights(&self, targets: &[Grade]) -> Result<ClassWeights> {
        match self.class_weighting {
            ClassWeighting::Uniform => Ok(ClassWeights::uniform()),
            ClassWeighting::InverseFrequency => ClassWeights::inverse_frequency(histogram(targets)),
        }
    }
}

/// The objective a head is trained and validated with.
#[derive(Clone, Debug, PartialEq)]
pub enum LossSpec {
    Combined {
        weights: ClassWeights,
        config: CombinedLossConfig,
    },
    Fcn {
        weights: ClassWeights,
        gamma: f64,
        mode: FcnLossMode,
    },
}

impl LossSpec {
    pub fn compute(&self, logits: &Tensor, targets: &[Grade]) -> Result<LossValue> {
        match self {
            LossSpec::Combined { weights, config } => combined_loss(logits, targets, weights, config),
            LossSpec::Fcn { weights, gamma, mode } => fcn_loss(logits, targets, *gamma, weights, *mode),
        }
    }
}

pub struct TrainStep {
    pub loss: f64,
    pub grads: Grads,
    pub batch_stats: Vec<BatchStats>,
}

/// A head the epoch loop can optimize.
pub trait TrainableHead: Parameters + Clone {
    fn loss_spec(&self, cfg: &TrainConfig, weights: ClassWeights) -> LossSpec;
    fn train_step(&self, inputs: &Tensor, targets: &[Grade], loss: &LossSpec) -> Result<TrainStep>;
    fn eval_logits(&self, inputs: &Tensor) -> Result<GradeLogits>;
    /// Fold train-mode batch statistics into running buffers.
    fn apply_batch_stats(&mut self, _stats: &[BatchStats]) {}
}

impl TrainableHead for RankingHead {
    fn loss_spec(&self, cfg: &TrainConfig, weights: ClassWeights) -> LossSpec {
        LossSpec::Combined {
            weights,
            config: CombinedLossConfig {
                alpha: cfg.alpha,
                gamma: cfg.ranking_gamma,
                margin: cfg.margin,
                score_scale: self.prompts.temperature,
                variant: cfg.ranking_variant,
                alpha_weights: cfg.alpha_weights,
            },
        }
    }

    fn train_step(&self, inputs: &Tensor, targets: &[Grade], loss: &LossSpec) -> Result<TrainStep> {
        let (logits, cache) = ranking_head_forward(inputs, &self.prompts, self.score_mode)?;
        let lv = loss.compute(logits.values(), targets)?;
        let d = ranking_head_backward(&self.prompts, &cache, &lv.d_logits, self.score_mode)?;
        Ok(TrainStep {
            loss: lv.value,
            grads: [("prompts".to_string(), d)].into(),
            batch_stats: Vec::new(),
        })
    }

    fn eval_logits(&self, inputs: &Tensor) -> Result<GradeLogits> {
        self.logits(inputs)
    }
}

impl TrainableHead for FcnHeadParams {
    fn loss_spec(&self, cfg: &TrainConfig, weights: ClassWeights) -> LossSpec {
        LossSpec::Fcn {
            weights,
            gamma: cfg.gamma,
            mode: cfg.fcn_loss,
        }
    }

    fn train_step(&self, inputs: &Tensor, targets: &[Grade], loss: &LossSpec) -> Result<TrainStep> {
        let fwd = self.forward(inputs, Mode::Train)?;
        let lv = loss.compute(fwd.logits.values(), targets)?;
        let mut grads = self.backward(&fwd.cache, &lv.d_logits)?;
        grads.remove("input");
        Ok(TrainStep {
            loss: lv.value,
            grads,
            batch_stats: fwd.batch_stats,
        })
    }

    fn eval_logits(&self, inputs: &Tensor) -> Result<GradeLogits> {
        Ok(self.forward(inputs, Mode::Eval)?.logits)
    }

    fn apply_batch_stats(&mut self, stats: &[BatchStats]) {
        self.update_running_stats(stats);
    }
}

/// Inputs (leading axis = samples) with their grades.
#[derive(Clone, Copy, Debug)]
pub struct Dataset<'a> {
    pub inputs: &'a Tensor,
    pub targets: &'a [Grade],
}

impl<'a> Dataset<'a> {
    pub fn new(inputs: &'a Tensor, targets: &'a [Grade]) -> Result<Self> {
        if inputs.shape().is_empty() || inputs.rows() != targets.len() {
            return Err(Error::shape(
                "Dataset",
                format!("{:?} inputs for {} targets", inputs.shape(), targets.len()),
            ));
        }
        if targets.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        Ok(Dataset { inputs, targets })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

impl EpochRecord {
    fn monitored(&self, m: Monitor) -> f64 {
        match m {
            Monitor::ValLoss => self.val_loss,
            Monitor::ValAccuracy => self.val_acc,
        }
    }
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in history {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
        ));
    }
    s
}

/// Patience counter over a monitored metric; only strict improvements reset it.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    monitor: Monitor,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, monitor: Monitor) -> Self {
        EarlyStopping {
            patience,
            monitor,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, value: f64) -> (bool, bool) {
        let improved = match (self.best, self.monitor) {
            (None, _) => true,
            (Some(b), Monitor::ValLoss) => value < b,
            (Some(b), Monitor::ValAccuracy) => value > b,
        };
        if improved {
            self.best = Some(value);
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        (improved, self.stale >= self.patience)
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<H> {
    /// Parameters after the best epoch.
    pub best: H,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Shuffled batches for one epoch; a trailing batch of one sample is merged
/// into the previous batch so batch statistics stay defined.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[0xe90c, epoch as u64]));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("nonempty");
        batches.last_mut().expect("nonempty").extend(last);
    }
    batches
}

fn accuracy(logits: &GradeLogits, targets: &[Grade]) -> f64 {
    let hits = logits.argmax().iter().zip(targets).filter(|(p, t)| p == t).count();
    hits as f64 / targets.len() as f64
}

/// Evaluate `(loss, accuracy)` in inference mode.
pub fn evaluate_head<H: TrainableHead>(head: &H, data: Dataset<'_>, loss: &LossSpec) -> Result<(f64, f64)> {
    let logits = head.eval_logits(data.inputs)?;
    let value = loss.compute(logits.values(), data.targets)?.value;
    Ok((value, accuracy(&logits, data.targets)))
}

pub fn train<H: TrainableHead>(
    init: H,
    train_set: Dataset<'_>,
    val_set: Dataset<'_>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<H>> {
    cfg.validate()?;
    let weights = cfg.class_weights(train_set.targets)?;
    let loss = init.loss_spec(cfg, weights);
    let adam = cfg.adamw();
    let mut head = init;
    let mut state = OptimState::default();
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience, cfg.monitor);
    let mut best = head.clone();
    let mut history = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        for (b, idx) in epoch_batches(train_set.targets.len(), cfg.batch_size, cfg.seed, epoch)
            .iter()
            .enumerate()
        {
            let x = train_set.inputs.gather_rows(idx)?;
            let y: Vec<Grade> = idx.iter().map(|&i| train_set.targets[i]).collect();
            let step = head.train_step(&x, &y, &loss)?;
            if !step.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b + 1,
                    value: step.loss,
                });
            }
            adamw_step(&mut head, &step.grads, &mut state, &adam)?;
            // an overflowing step would otherwise surface later as a bad-input error
            let mut blown = None;
            head.visit(&mut |_, t| {
                if blown.is_none() {
                    blown = t.data().iter().copied().find(|v| !v.is_finite());
                }
            });
            if let Some(value) = blown {
                return Err(Error::NonFiniteLoss { epoch, batch: b + 1, value });
            }
            head.apply_batch_stats(&step.batch_stats);
        }
        let (train_loss, train_acc) = evaluate_head(&head, train_set, &loss)?;
        let (val_loss, val_acc) = evaluate_head(&head, val_set, &loss)?;
        for v in [train_loss, val_loss] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: 0, value: v });
            }
        }
        let rec = EpochRecord {
            epoch,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
        };
        history.push(rec);
        let (improved, stop) = stopper.observe(epoch, rec.monitored(cfg.monitor));
        if improved {
            best = head.clone();
        }
        if stop {
            stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch: stopper.best_epoch(),
        history,
        stopped_early,
    })
}

/// Learnable prompt head with the configured temperature and init.
pub fn init_ranking_head(dim: usize, cfg: &TrainConfig, score_mode: crate::models::ScoreMode) -> Result<RankingHead> {
    let mut r = rng::stream(cfg.seed, &[0x1417, 0]);
    Ok(RankingHead {
        prompts: crate::models::PromptBank::random(dim, cfg.prompt_init_std, cfg.temperature, &mut r)?,
        score_mode,
    })
}

pub fn init_fcn_head(config: crate::models::FcnConfig, cfg: &TrainConfig) -> Result<FcnHeadParams> {
    FcnHeadParams::init(config, &mut rng::stream(cfg.seed, &[0x1417, 1]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub grades: Vec<Grade>,
    pub probabilities: Vec<[f64; NUM_GRADES]>,
    pub logits: Vec<[f64; NUM_GRADES]>,
}

/// Argmax decisions, or per-sample [`decide`] when thresholds are given.
pub fn predict(logits: &GradeLogits, thresholds: Option<&ThresholdSet>) -> Result<Prediction> {
    let raw: Vec<[f64; NUM_GRADES]> = (0..logits.rows()).map(|i| logits.row(i)).collect();
    let probabilities: Vec<[f64; NUM_GRADES]> = raw.iter().map(softmax).collect();
    let grades = match thresholds {
        None => probabilities
            .iter()
            .map(|p| Grade::from_index(argmax_high(p)))
            .collect::<Result<_>>()?,
        Some(t) => raw
            .iter()
            .zip(&probabilities)
            .map(|(z, p)| match t.score_kind {
                ScoreKind::Probabilities => decide(p, t),
                ScoreKind::Raw => decide(z, t),
            })
            .collect::<Result<_>>()?,
    };
    Ok(Prediction {
        grades,
        probabilities,
        logits: raw,
    })
}

pub fn predict_model(model: &Model, inputs: &Tensor, thresholds: Option<&ThresholdSet>) -> Result<Prediction> {
    predict(&model.logits(inputs)?, thresholds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::Objective;
    use crate::models::{PromptBank, ScoreMode};
    use crate::tensor::{linear, linear_backward};

    /// Linear softmax classifier, enough to exercise the loop.
    #[derive(Clone, Debug)]
    struct LinearHead {
        w: Tensor,
        b: Tensor,
    }

    impl Parameters for LinearHead {
        fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
            f("w", &self.w);
            f("b", &self.b);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
            f("w", &mut self.w);
            f("b", &mut self.b);
        }
    }

    impl TrainableHead for LinearHead {
        fn loss_spec(&self, _cfg: &TrainConfig, weights: ClassWeights) -> LossSpec {
            LossSpec::Fcn { weights, gamma: 0.0, mode: FcnLossMode::WeightedFocal }
        }
        fn train_step(&self, x: &Tensor, y: &[Grade], loss: &LossSpec) -> Result<TrainStep> {
            let z = linear(x, &self.w, &self.b)?;
            let lv = loss.compute(&z, y)?;
            let g = linear_backward(x, &self.w, &lv.d_logits)?;
            Ok(TrainStep {
                loss: lv.value,
                grads: [("w".to_string(), g.d_params["weight"].clone()), ("b".to_string(), g.d_params["bias"].clone())].into(),
                batch_stats: Vec::new(),
            })
        }
        fn eval_logits(&self, x: &Tensor) -> Result<GradeLogits> {
            GradeLogits::new(linear(x, &self.w, &self.b)?)
        }
    }

    fn blobs(n_per: usize, seed: u64) -> (Tensor, Vec<Grade>) {
        let mut r = rng::stream(seed, &[]);
        let noise = Tensor::randn(&[5 * n_per, 5], 0.3, &mut r);
        let mut data = noise.into_data();
        let mut y = Vec::new();
        for i in 0..5 * n_per {
            let g = i % 5;
            data[i * 5 + g] += 3.0;
            y.push(Grade::from_index(g).unwrap());
        }
        (Tensor::new(vec![5 * n_per, 5], data).unwrap(), y)
    }

    fn linear_head() -> LinearHead {
        LinearHead { w: Tensor::zeros(&[5, 5]), b: Tensor::zeros(&[5]) }
    }

    #[test]
    fn early_stopping_counts_patience() {
        let mut es = EarlyStopping::new(7, Monitor::ValLoss);
        let mut stop_at = None;
        for e in 1..=20 {
            if es.observe(e, 1.0).1 {
                stop_at = Some(e);
                break;
            }
        }
        assert_eq!(stop_at, Some(8));
        assert_eq!(es.best_epoch(), 1);
    }

    #[test]
    fn linear_head_learns_and_is_deterministic() {
        let (x, y) = blobs(20, 1);
        let (vx, vy) = blobs(10, 2);
        let cfg = TrainConfig { learning_rate: 0.05, batch_size: 16, ..Default::default() };
        let a = train(linear_head(), Dataset::new(&x, &y).unwrap(), Dataset::new(&vx, &vy).unwrap(), &cfg).unwrap();
        let b = train(linear_head(), Dataset::new(&x, &y).unwrap(), Dataset::new(&vx, &vy).unwrap(), &cfg).unwrap();
        assert_eq!(history_csv(&a.history), history_csv(&b.history));
        assert!(a.history.last().unwrap().val_acc > 0.95);
    }

    #[test]
    fn frozen_prompts_stop_at_one_plus_patience() {
        let (x, y) = blobs(10, 3);
        let cfg = TrainConfig::default();
        let mut head = init_ranking_head(5, &cfg, ScoreMode::Cosine).unwrap();
        head.prompts.learnable = false;
        let out = train(head, Dataset::new(&x, &y).unwrap(), Dataset::new(&x, &y).unwrap(), &cfg).unwrap();
        assert_eq!(out.history.len(), 8);
        assert_eq!(out.best_epoch, 1);
        assert!(out.stopped_early);
    }

    #[test]
    fn batches_cover_every_index_once() {
        let b = epoch_batches(65, 32, 4, 1);
        assert_eq!(b.len(), 2);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..65).collect::<Vec<_>>());
        assert_ne!(epoch_batches(65, 32, 4, 1), epoch_batches(65, 32, 4, 2));
    }

    #[test]
    fn thresholds_above_one_match_argmax() {
        let bank = PromptBank::new(Tensor::from_fn(&[5, 3], |i| (i as f64 * 0.37).sin()), 0.2).unwrap();
        let head = RankingHead { prompts: bank, score_mode: ScoreMode::Cosine };
        let x = Tensor::from_fn(&[7, 3], |i| (i as f64 * 1.3).cos());
        let logits = head.logits(&x).unwrap();
        let t = ThresholdSet::new([1.0 + 1e-9; 5], Objective::F1, ScoreKind::Probabilities).unwrap();
        assert_eq!(predict(&logits, None).unwrap(), predict(&logits, Some(&t)).unwrap());
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = TrainConfig { early_stop_patience: 30, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig { alpha: 1.5, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
