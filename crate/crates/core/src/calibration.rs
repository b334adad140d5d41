//! Per-grade decision thresholds fitted on validation scores, and the
//! one-vs-rest decision rule that uses them.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grade::{argmax_high, Grade, NUM_GRADES};
use crate::parallel::Backend;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    F1,
    /// Youden's J = TPR - FPR.
    Youden,
}

/// What the thresholds are compared against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Softmax probabilities; rows must sum to 1.
    #[default]
    Probabilities,
    /// Raw per-grade scores (logits or similarities); no row constraint.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdSet {
    pub tau: [f64; NUM_GRADES],
    pub objective: Objective,
    pub calibrated_on: usize,
    /// Grades absent from the calibration data; their tau is the 0.5 default.
    pub flagged: Vec<Grade>,
    pub score_kind: ScoreKind,
}

impl ThresholdSet {
    pub fn new(tau: [f64; NUM_GRADES], objective: Objective, score_kind: ScoreKind) -> Result<Self> {
        if tau.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid(format!("thresholds must be finite: {tau:?}")));
        }
        Ok(ThresholdSet {
            tau,
            objective,
            calibrated_on: 0,
            flagged: Vec::new(),
            score_kind,
        })
    }
}

const PROB_TOLERANCE: f64 = 1e-6;

fn check_row(row: &[f64; NUM_GRADES], kind: ScoreKind, what: &str) -> Result<()> {
    if row.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what}: non-finite score {row:?}")));
    }
    if kind == ScoreKind::Probabilities {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > PROB_TOLERANCE || row.iter().any(|&p| p < 0.0) {
            return Err(Error::invalid(format!(
                "{what}: probabilities {row:?} sum to {s}, not 1"
            )));
        }
    }
    Ok(())
}

/// Objective value as an exact fraction so equal scores compare equal.
#[derive(Clone, Copy, Debug)]
struct Ratio {
    num: i128,
    den: i128,
}

impl Ratio {
    fn cmp(&self, other: &Ratio) -> Ordering {
        (self.num * other.den).cmp(&(other.num * self.den))
    }

    fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

fn objective_ratio(obj: Objective, tp: usize, fp: usize, pos: usize, neg: usize) -> Ratio {
    let fnn = pos - tp;
    let (tp, fp, fnn, pos, neg) = (tp as i128, fp as i128, fnn as i128, pos as i128, neg as i128);
    match obj {
        Objective::F1 => {
            let den = 2 * tp + fp + fnn;
            if den == 0 {
                Ratio { num: 0, den: 1 }
            } else {
                Ratio { num: 2 * tp, den }
            }
        }
        Objective::Youden => {
            // tp/pos - fp/neg
            let neg = neg.max(1);
            Ratio {
                num: tp * neg - fp * pos,
                den: pos * neg,
            }
        }
    }
}

/// One-vs-rest objective at threshold `tau` (predict positive when `s >= tau`).
pub fn objective_at(obj: Objective, scores: &[f64], positives: &[bool], tau: f64) -> f64 {
    let mut tp = 0;
    let mut fp = 0;
    for (&s, &p) in scores.iter().zip(positives) {
        if s >= tau {
            if p {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    let pos = positives.iter().filter(|&&p| p).count();
    objective_ratio(obj, tp, fp, pos, positives.len() - pos).value()
}

/// Best threshold for one class: midpoints of consecutive distinct scores
/// plus the two bounds, ties toward the lower threshold.
fn calibrate_class(scores: &[f64], positives: &[bool], obj: Objective, bounds: (f64, f64)) -> (f64, f64) {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let sorted: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
    // positives among sorted[k..]
    let mut pos_suffix = vec![0usize; sorted.len() + 1];
    for k in (0..sorted.len()).rev() {
        pos_suffix[k] = pos_suffix[k + 1] + positives[order[k]] as usize;
    }
    let pos = pos_suffix[0];
    let neg = sorted.len() - pos;

    let mut candidates = vec![bounds.0];
    for w in sorted.windows(2) {
        if w[0] != w[1] {
            let mid = w[0] + (w[1] - w[0]) / 2.0;
            // adjacent floats have no midpoint; cut at the upper score instead
            candidates.push(if mid > w[0] { mid } else { w[1] });
        }
    }
    candidates.push(bounds.1);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let mut best: Option<(f64, Ratio)> = None;
    for tau in candidates {
        let k = sorted.partition_point(|&s| s < tau);
        let tp = pos_suffix[k];
        let fp = (sorted.len() - k) - tp;
        let r = objective_ratio(obj, tp, fp, pos, neg);
        // strict improvement only: candidates ascend, so ties keep the lower tau
        if best.is_none_or(|(_, b)| r.cmp(&b) == Ordering::Greater) {
            best = Some((tau, r));
        }
    }
    let (tau, r) = best.expect("at least two candidates");
    (tau, r.value())
}

pub fn calibrate_thresholds(
    scores: &[[f64; NUM_GRADES]],
    labels: &[Grade],
    objective: Objective,
    kind: ScoreKind,
) -> Result<ThresholdSet> {
    calibrate_thresholds_with(Backend::default(), scores, labels, objective, kind)
}

pub fn calibrate_thresholds_with(
    backend: Backend,
    scores: &[[f64; NUM_GRADES]],
    labels: &[Grade],
    objective: Objective,
    kind: ScoreKind,
) -> Result<ThresholdSet> {
    if scores.is_empty() {
        return Err(Error::invalid("calibration needs at least one sample"));
    }
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "calibrate_thresholds",
            format!("{} score rows but {} labels", scores.len(), labels.len()),
        ));
    }
    for (i, row) in scores.iter().enumerate() {
        check_row(row, kind, &format!("row {i}"))?;
    }
    let bounds = match kind {
        ScoreKind::Probabilities => (0.0, 1.0),
        ScoreKind::Raw => {
            let lo = scores.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
            let hi = scores.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
            (lo.min(0.0), hi.max(1.0) + 1.0)
        }
    };
    let per_class = backend.map(NUM_GRADES, |c| {
        let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|g| g.index() == c).collect();
        if pos.iter().any(|&p| p) {
            Some(calibrate_class(&col, &pos, objective, bounds).0)
        } else {
            None
        }
    });
    let mut tau = [0.5; NUM_GRADES];
    let mut flagged = Vec::new();
    for (c, t) in per_class.into_iter().enumerate() {
        match t {
            Some(t) => tau[c] = t,
            None => flagged.push(Grade::from_index(c)?),
        }
    }
    Ok(ThresholdSet {
        tau,
        objective,
        calibrated_on: scores.len(),
        flagged,
        score_kind: kind,
    })
}

/// Highest grade whose score reaches its threshold; argmax when none does.
pub fn decide(scores: &[f64; NUM_GRADES], thresholds: &ThresholdSet) -> Result<Grade> {
    check_row(scores, thresholds.score_kind, "decide")?;
    let chosen = (0..NUM_GRADES)
        .rev()
        .find(|&c| scores[c] >= thresholds.tau[c])
        .unwrap_or_else(|| argmax_high(scores));
    Grade::from_index(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(v: u8) -> Grade {
        Grade::new(v).unwrap()
    }

    fn set(tau: [f64; 5]) -> ThresholdSet {
        ThresholdSet::new(tau, Objective::F1, ScoreKind::Probabilities).unwrap()
    }

    #[test]
    fn decide_examples() {
        assert_eq!(decide(&[0.9, 0.025, 0.025, 0.025, 0.025], &set([0.5; 5])).unwrap(), g(0));
        assert_eq!(
            decide(&[0.4, 0.05, 0.05, 0.3, 0.2], &set([0.5, 0.5, 0.5, 0.25, 0.5])).unwrap(),
            g(3)
        );
        assert_eq!(
            decide(&[0.3, 0.05, 0.05, 0.3, 0.3], &set([0.25, 0.5, 0.5, 0.25, 0.25])).unwrap(),
            g(4)
        );
        assert!(decide(&[0.5, 0.5, 0.5, 0.0, 0.0], &set([0.5; 5])).is_err());
    }

    #[test]
    fn high_thresholds_reduce_to_argmax() {
        let p = [0.1, 0.3, 0.3, 0.2, 0.1];
        assert_eq!(decide(&p, &set([1.0 + 1e-9; 5])).unwrap(), g(2));
    }

    #[test]
    fn separated_scores_pick_midpoint() {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for i in 0..10 {
            let pos = i < 4;
            let p0 = if pos { 0.9 } else { 0.1 };
            let rest = (1.0 - p0) / 4.0;
            scores.push([p0, rest, rest, rest, rest]);
            labels.push(if pos { g(0) } else { g(1) });
        }
        let t = calibrate_thresholds(&scores, &labels, Objective::F1, ScoreKind::Probabilities).unwrap();
        assert_eq!(t.tau[0], 0.5);
        assert_eq!(t.flagged, vec![g(2), g(3), g(4)]);
        assert_eq!(t.tau[3], 0.5);
        assert_eq!(t.calibrated_on, 10);
    }

    #[test]
    fn single_top_positive() {
        let scores = vec![
            [0.2, 0.2, 0.2, 0.2, 0.2],
            [0.6, 0.1, 0.1, 0.1, 0.1],
            [0.1, 0.1, 0.1, 0.1, 0.6],
        ];
        let labels = vec![g(0), g(0), g(4)];
        let t = calibrate_thresholds(&scores, &labels, Objective::F1, ScoreKind::Probabilities).unwrap();
        assert!(t.tau[4] < 0.6 && t.tau[4] > 0.2);
        let col: Vec<f64> = scores.iter().map(|r| r[4]).collect();
        let pos: Vec<bool> = labels.iter().map(|l| *l == g(4)).collect();
        assert_eq!(objective_at(Objective::F1, &col, &pos, t.tau[4]), 1.0);
    }

    #[test]
    fn rows_must_sum_to_one() {
        let r = calibrate_thresholds(&[[0.5, 0.1, 0.1, 0.1, 0.1]], &[g(0)], Objective::F1, ScoreKind::Probabilities);
        assert!(r.is_err());
        let raw = calibrate_thresholds(&[[2.0, -1.0, 0.0, 0.5, 0.1]], &[g(0)], Objective::F1, ScoreKind::Raw);
        assert!(raw.is_ok());
    }
}
