//! Training objectives on `N x 5` grade logits. Each returns the batch-mean
//! value together with its exact gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grade::{Grade, NUM_GRADES};
use crate::models::log_softmax;
use crate::tensor::Tensor;

/// Per-grade loss weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; NUM_GRADES]", into = "[f64; NUM_GRADES]")]
pub struct ClassWeights([f64; NUM_GRADES]);

impl ClassWeights {
    pub fn new(w: [f64; NUM_GRADES]) -> Result<Self> {
        if w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::invalid(format!("class weights must be finite and >= 0: {w:?}")));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(Error::invalid("at least one class weight must be positive"));
        }
        Ok(ClassWeights(w))
    }

    pub fn uniform() -> Self {
        ClassWeights([1.0; NUM_GRADES])
    }

    /// `1 / count`, rescaled so the five weights average 1. Absent grades get 0.
    pub fn inverse_frequency(counts: [usize; NUM_GRADES]) -> Result<Self> {
        let raw = counts.map(|c| if c == 0 { 0.0 } else { 1.0 / c as f64 });
        let mean = raw.iter().sum::<f64>() / NUM_GRADES as f64;
        if mean == 0.0 {
            return Err(Error::invalid("cannot derive class weights from an empty histogram"));
        }
        ClassWeights::new(raw.map(|w| w / mean))
    }

    pub fn get(&self, g: Grade) -> f64 {
        self.0[g.index()]
    }

    pub fn values(&self) -> [f64; NUM_GRADES] {
        self.0
    }
}

impl Default for ClassWeights {
    fn default() -> Self {
        ClassWeights::uniform()
    }
}

impl TryFrom<[f64; NUM_GRADES]> for ClassWeights {
    type Error = Error;
    fn try_from(w: [f64; NUM_GRADES]) -> Result<Self> {
        ClassWeights::new(w)
    }
}

impl From<ClassWeights> for [f64; NUM_GRADES] {
    fn from(w: ClassWeights) -> Self {
        w.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub d_logits: Tensor,
}

impl LossValue {
    fn blend(a: LossValue, wa: f64, b: LossValue, wb: f64) -> LossValue {
        let data = a
            .d_logits
            .data()
            .iter()
            .zip(b.d_logits.data())
            .map(|(x, y)| wa * x + wb * y)
            .collect();
        LossValue {
            value: wa * a.value + wb * b.value,
            d_logits: Tensor::new(a.d_logits.shape().to_vec(), data).expect("same shape"),
        }
    }
}

fn check_batch(op: &'static str, logits: &Tensor, targets: &[Grade]) -> Result<usize> {
    let [n, k] = logits.dims2(op)?;
    if k != NUM_GRADES {
        return Err(Error::shape(op, format!("expected {NUM_GRADES} columns, got {k}")));
    }
    if n == 0 {
        return Err(Error::invalid(format!("{op}: empty batch")));
    }
    if targets.len() != n {
        return Err(Error::shape(op, format!("{n} logit rows but {} targets", targets.len())));
    }
    Ok(n)
}

fn row5(t: &Tensor, i: usize) -> [f64; NUM_GRADES] {
    t.row(i).try_into().expect("5 columns")
}

/// Mean over the batch of `w[y] * -log softmax(z)[y]`.
pub fn weighted_cross_entropy(logits: &Tensor, targets: &[Grade], weights: &ClassWeights) -> Result<LossValue> {
    focal_like("weighted_cross_entropy", logits, targets, 0.0, weights)
}

/// Mean over the batch of `w[y] * (1 - p_y)^gamma * -log p_y`.
pub fn focal_loss(logits: &Tensor, targets: &[Grade], gamma: f64, weights: &ClassWeights) -> Result<LossValue> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("focal gamma must be >= 0, got {gamma}")));
    }
    focal_like("focal_loss", logits, targets, gamma, weights)
}

fn focal_like(
    op: &'static str,
    logits: &Tensor,
    targets: &[Grade],
    gamma: f64,
    weights: &ClassWeights,
) -> Result<LossValue> {
    let n = check_batch(op, logits, targets)?;
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; n * NUM_GRADES];
    for (i, &t) in targets.iter().enumerate() {
        let y = t.index();
        let w = weights.get(t);
        let ls = log_softmax(&row5(logits, i));
        let lp = ls[y];
        // 1 - p_y without cancellation when p_y is close to 1
        let q = -lp.exp_m1();
        let focal = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
        value += w * focal * -lp;
        // d(loss_i)/d(log p_y)
        let mut dl = -focal;
        if gamma > 0.0 && q > 0.0 {
            dl += gamma * lp.exp() * lp * q.powf(gamma - 1.0);
        }
        let scale = w * dl * inv_n;
        for k in 0..NUM_GRADES {
            let onehot = if k == y { 1.0 } else { 0.0 };
            grad[i * NUM_GRADES + k] = scale * (onehot - ls[k].exp());
        }
    }
    Ok(LossValue {
        value: value * inv_n,
        d_logits: Tensor::new(vec![n, NUM_GRADES], grad)?,
    })
}

/// Which grade pairs the ranking hinge constrains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingVariant {
    /// `(a, b)` with `|a - y| < |b - y|`: scores decay away from the truth.
    #[default]
    Unimodal,
    /// Truth above every other grade, and among the rest the more severe
    /// grade above the less severe one.
    Monotone,
}

impl RankingVariant {
    /// Ordered pairs `(a, b)` asking for `s_a >= s_b + margin`.
    pub fn pairs(self, y: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for a in 0..NUM_GRADES {
            for b in 0..NUM_GRADES {
                let keep = match self {
                    RankingVariant::Unimodal => a.abs_diff(y) < b.abs_diff(y),
                    RankingVariant::Monotone => {
                        (a == y && b != y) || (a != y && b != y && a > b)
                    }
                };
                if keep {
                    out.push((a, b));
                }
            }
        }
        out
    }
}

/// Mean over samples of the mean hinge `max(0, margin - (s_a - s_b))` over
/// that sample's pairs.
pub fn ranking_loss(
    scores: &Tensor,
    targets: &[Grade],
    margin: f64,
    variant: RankingVariant,
) -> Result<LossValue> {
    let n = check_batch("ranking_loss", scores, targets)?;
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::invalid(format!("ranking margin must be >= 0, got {margin}")));
    }
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; n * NUM_GRADES];
    for (i, &t) in targets.iter().enumerate() {
        let s = scores.row(i);
        let pairs = variant.pairs(t.index());
        let scale = inv_n / pairs.len() as f64;
        let g = &mut grad[i * NUM_GRADES..(i + 1) * NUM_GRADES];
        let mut sample = 0.0;
        for (a, b) in pairs {
            let h = margin - (s[a] - s[b]);
            if h > 0.0 {
                sample += h;
                g[a] -= scale;
                g[b] += scale;
            }
        }
        value += sample * scale;
    }
    Ok(LossValue {
        value,
        d_logits: Tensor::new(vec![n, NUM_GRADES], grad)?,
    })
}

/// Which term `alpha` multiplies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaWeights {
    #[default]
    CrossEntropy,
    Ranking,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CombinedLossConfig {
    pub alpha: f64,
    /// Focusing parameter of the classification term; 0 is plain weighted CE.
    pub gamma: f64,
    pub margin: f64,
    /// Logits are multiplied by this before the ranking hinge, so the margin
    /// is in similarity units when it equals the head temperature.
    pub score_scale: f64,
    pub variant: RankingVariant,
    pub alpha_weights: AlphaWeights,
}

impl Default for CombinedLossConfig {
    fn default() -> Self {
        CombinedLossConfig {
            alpha: 0.7,
            gamma: 0.0,
            margin: 0.05,
            score_scale: 1.0,
            variant: RankingVariant::Unimodal,
            alpha_weights: AlphaWeights::CrossEntropy,
        }
    }
}

/// `alpha * CE + (1 - alpha) * ranking` (or swapped, per `alpha_weights`).
pub fn combined_loss(
    logits: &Tensor,
    targets: &[Grade],
    weights: &ClassWeights,
    cfg: &CombinedLossConfig,
) -> Result<LossValue> {
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(Error::invalid(format!("alpha must be in [0, 1], got {}", cfg.alpha)));
    }
    if !(cfg.score_scale > 0.0 && cfg.score_scale.is_finite()) {
        return Err(Error::invalid("score_scale must be positive"));
    }
    let ce = focal_loss(logits, targets, cfg.gamma, weights)?;
    let scores = logits.clone().scaled(cfg.score_scale);
    let mut rank = ranking_loss(&scores, targets, cfg.margin, cfg.variant)?;
    rank.d_logits.scale(cfg.score_scale);
    let (w_ce, w_rank) = match cfg.alpha_weights {
        AlphaWeights::CrossEntropy => (cfg.alpha, 1.0 - cfg.alpha),
        AlphaWeights::Ranking => (1.0 - cfg.alpha, cfg.alpha),
    };
    Ok(LossValue::blend(ce, w_ce, rank, w_rank))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FcnLossMode {
    /// Class weights inside the focal term.
    #[default]
    WeightedFocal,
    /// Weighted cross-entropy plus weighted focal loss.
    Sum,
}

pub fn fcn_loss(
    logits: &Tensor,
    targets: &[Grade],
    gamma: f64,
    weights: &ClassWeights,
    mode: FcnLossMode,
) -> Result<LossValue> {
    let focal = focal_loss(logits, targets, gamma, weights)?;
    match mode {
        FcnLossMode::WeightedFocal => Ok(focal),
        FcnLossMode::Sum => {
            let ce = weighted_cross_entropy(logits, targets, weights)?;
            Ok(LossValue::blend(ce, 1.0, focal, 1.0))
        }
    }
}
