//! Evaluation: confusion matrix, precision/recall/F1, one-vs-rest AUROC and
//! the error-margin distribution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grade::{Grade, NUM_GRADES};
use crate::parallel::Backend;

/// Rows are true grades, columns predicted grades.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_GRADES]; NUM_GRADES],
}

fn check_pairs(op: &'static str, preds: &[Grade], labels: &[Grade]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::shape(
            op,
            format!("{} predictions but {} labels", preds.len(), labels.len()),
        ));
    }
    if preds.is_empty() {
        return Err(Error::invalid(format!("{op}: no samples")));
    }
    Ok(())
}

pub fn confusion(preds: &[Grade], labels: &[Grade]) -> Result<ConfusionMatrix> {
    check_pairs("confusion", preds, labels)?;
    let mut counts = [[0u64; NUM_GRADES]; NUM_GRADES];
    for (p, t) in preds.iter().zip(labels) {
        counts[t.index()][p.index()] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_GRADES).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> [u64; NUM_GRADES] {
        self.counts.map(|r| r.iter().sum())
    }

    pub fn col_sums(&self) -> [u64; NUM_GRADES] {
        std::array::from_fn(|c| self.counts.iter().map(|r| r[c]).sum())
    }

    /// `true_grade,pred_0,...,pred_4` with one row per true grade.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("true_grade,pred_0,pred_1,pred_2,pred_3,pred_4\n");
        for (t, row) in self.counts.iter().enumerate() {
            s.push_str(&t.to_string());
            for c in row {
                s.push(',');
                s.push_str(&c.to_string());
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Nothing was predicted as this grade; precision reported as 0.
    pub precision_undefined: bool,
    /// The grade never occurs; recall reported as 0.
    pub recall_undefined: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrfSummary {
    pub per_class: [ClassPrf; NUM_GRADES],
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

pub fn prf_and_accuracy(cm: &ConfusionMatrix) -> Result<PrfSummary> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::invalid("confusion matrix is empty"));
    }
    let rows = cm.row_sums();
    let cols = cm.col_sums();
    let per_class = std::array::from_fn(|c| {
        let tp = cm.counts[c][c] as f64;
        let ratio = |den: u64| if den == 0 { 0.0 } else { tp / den as f64 };
        let precision = ratio(cols[c]);
        let recall = ratio(rows[c]);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassPrf {
            precision,
            recall,
            f1,
            support: rows[c],
            precision_undefined: cols[c] == 0,
            recall_undefined: rows[c] == 0,
        }
    });
    let mean = |f: fn(&ClassPrf) -> f64| per_class.iter().map(f).sum::<f64>() / NUM_GRADES as f64;
    Ok(PrfSummary {
        accuracy: cm.trace() as f64 / total as f64,
        macro_precision: mean(|p| p.precision),
        macro_recall: mean(|p| p.recall),
        macro_f1: mean(|p| p.f1),
        per_class,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMargin {
    pub exact: f64,
    pub off_by_one: f64,
    pub off_by_two_plus: f64,
}

pub fn error_margin(preds: &[Grade], labels: &[Grade]) -> Result<ErrorMargin> {
    check_pairs("error_margin", preds, labels)?;
    let mut buckets = [0usize; 3];
    for (p, t) in preds.iter().zip(labels) {
        buckets[p.distance(*t).min(2)] += 1;
    }
    let n = preds.len() as f64;
    Ok(ErrorMargin {
        exact: buckets[0] as f64 / n,
        off_by_one: buckets[1] as f64 / n,
        off_by_two_plus: buckets[2] as f64 / n,
    })
}

/// ROC staircase for one binary problem, `(fpr, tpr)` from `(0,0)` to `(1,1)`.
/// Tied scores move diagonally, which is what gives ties half credit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
}

impl RocCurve {
    /// Trapezoid area under the curve.
    pub fn area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
            .sum()
    }
}

/// Cumulative `(fp, tp)` counts after each distinct score, highest first.
fn roc_counts(scores: &[f64], positives: &[bool]) -> Vec<(u64, u64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = vec![(0, 0)];
    let (mut fp, mut tp) = (0u64, 0u64);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if positives[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        out.push((fp, tp));
    }
    out
}

fn check_binary(scores: &[f64], positives: &[bool]) -> Result<(u64, u64)> {
    if scores.len() != positives.len() {
        return Err(Error::shape(
            "roc",
            format!("{} scores but {} labels", scores.len(), positives.len()),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("roc: NaN score"));
    }
    let p = positives.iter().filter(|&&b| b).count() as u64;
    let n = positives.len() as u64 - p;
    if p == 0 || n == 0 {
        return Err(Error::invalid(format!(
            "roc: need at least one positive and one negative, got {p} and {n}"
        )));
    }
    Ok((p, n))
}

pub fn roc_points(scores: &[f64], positives: &[bool]) -> Result<RocCurve> {
    let (p, n) = check_binary(scores, positives)?;
    let points = roc_counts(scores, positives)
        .into_iter()
        .map(|(fp, tp)| (fp as f64 / n as f64, tp as f64 / p as f64))
        .collect();
    Ok(RocCurve { points })
}

/// Binary AUROC by trapezoid integration, exact in integer arithmetic up to
/// the final division.
pub fn binary_auroc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    let (p, n) = check_binary(scores, positives)?;
    let counts = roc_counts(scores, positives);
    let twice_area: u128 = counts
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) as u128 * (w[0].1 + w[1].1) as u128)
        .sum();
    Ok(twice_area as f64 / (2 * p as u128 * n as u128) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AurocSummary {
    /// `None` for grades without both positives and negatives.
    pub per_class: [Option<f64>; NUM_GRADES],
    pub degenerate: Vec<Grade>,
    /// Unweighted mean over the defined classes.
    pub macro_mean: Option<f64>,
    /// Single AUROC over all (sample, grade) pairs.
    pub micro: Option<f64>,
}

pub fn auroc_ovr(scores: &[[f64; NUM_GRADES]], labels: &[Grade]) -> Result<AurocSummary> {
    auroc_ovr_with(Backend::default(), scores, labels)
}

pub fn auroc_ovr_with(
    backend: Backend,
    scores: &[[f64; NUM_GRADES]],
    labels: &[Grade],
) -> Result<AurocSummary> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "auroc_ovr",
            format!("{} score rows but {} labels", scores.len(), labels.len()),
        ));
    }
    if scores.is_empty() {
        return Err(Error::invalid("auroc_ovr: no samples"));
    }
    let per: Vec<Option<f64>> = backend.map(NUM_GRADES, |c| {
        let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|g| g.index() == c).collect();
        binary_auroc(&col, &pos).ok()
    });
    let per_class: [Option<f64>; NUM_GRADES] = per.try_into().expect("5 classes");
    let degenerate = (0..NUM_GRADES)
        .filter(|&c| per_class[c].is_none())
        .map(|c| Grade::from_index(c).expect("c < 5"))
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    let flat: Vec<f64> = scores.iter().flatten().copied().collect();
    let flat_pos: Vec<bool> = labels
        .iter()
        .flat_map(|g| (0..NUM_GRADES).map(move |c| g.index() == c))
        .collect();
    Ok(AurocSummary {
        per_class,
        degenerate,
        macro_mean,
        micro: binary_auroc(&flat, &flat_pos).ok(),
    })
}

/// `grade,fpr,tpr` rows for every non-degenerate grade.
pub fn roc_csv(scores: &[[f64; NUM_GRADES]], labels: &[Grade]) -> Result<String> {
    let mut s = String::from("grade,fpr,tpr\n");
    for c in 0..NUM_GRADES {
        let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|g| g.index() == c).collect();
        if let Ok(curve) = roc_points(&col, &pos) {
            for (x, y) in curve.points {
                s.push_str(&format!("{c},{x},{y}\n"));
            }
        }
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub grade: Grade,
    pub name: String,
    #[serde(flatten)]
    pub prf: ClassPrf,
    pub auroc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub accuracy: f64,
    pub per_class: Vec<ClassReport>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub auroc_macro: Option<f64>,
    pub auroc_micro: Option<f64>,
    pub auroc_degenerate: Vec<Grade>,
    pub error_margin: ErrorMargin,
    pub confusion: ConfusionMatrix,
}

/// Full report. AUROC fields are `None` when no scores are given.
pub fn evaluate(
    preds: &[Grade],
    labels: &[Grade],
    scores: Option<&[[f64; NUM_GRADES]]>,
) -> Result<MetricsReport> {
    let cm = confusion(preds, labels)?;
    let prf = prf_and_accuracy(&cm)?;
    let auroc = scores.map(|s| auroc_ovr(s, labels)).transpose()?;
    let per_class = Grade::ALL
        .iter()
        .map(|&g| ClassReport {
            grade: g,
            name: g.name().to_string(),
            prf: prf.per_class[g.index()],
            auroc: auroc.as_ref().and_then(|a| a.per_class[g.index()]),
        })
        .collect();
    Ok(MetricsReport {
        samples: preds.len(),
        accuracy: prf.accuracy,
        per_class,
        macro_precision: prf.macro_precision,
        macro_recall: prf.macro_recall,
        macro_f1: prf.macro_f1,
        auroc_macro: auroc.as_ref().and_then(|a| a.macro_mean),
        auroc_micro: auroc.as_ref().and_then(|a| a.micro),
        auroc_degenerate: auroc.map(|a| a.degenerate).unwrap_or_default(),
        error_margin: error_margin(preds, labels)?,
        confusion: cm,
    })
}
