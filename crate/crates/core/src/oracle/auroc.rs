use rand::Rng;

use super::CheckReport;
use crate::grade::{Grade, NUM_GRADES};
use crate::metrics::{auroc_ovr_with, roc_points};
use crate::{rng, Backend};

/// Mann-Whitney statistic over every (positive, negative) pair, ties
/// counted as one half. `None` without both classes.
pub fn pairwise_auroc(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let mut twice_wins = 0u64;
    let (mut p, mut n) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if !positives[i] {
            n += 1;
            continue;
        }
        p += 1;
        for (j, &sj) in scores.iter().enumerate() {
            if !positives[j] {
                twice_wins += if si > sj { 2 } else if si == sj { 1 } else { 0 };
            }
        }
    }
    (p > 0 && n > 0).then(|| twice_wins as f64 / (2 * p * n) as f64)
}

fn same(a: Option<f64>, b: Option<f64>) -> f64 {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs(),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    }
}

/// Compare `auroc_ovr` (per class, macro, micro) with the pairwise
/// definition and with the trapezoid area of `roc_points`, on `instances`
/// random problems of up to 60 samples. Scores are often quantised so ties
/// are common, and some instances miss classes entirely.
pub fn auroc_oracle(instances: usize, seed: u64, backend: Backend) -> CheckReport {
    let mut rep = CheckReport::new("auroc oracle", 1e-12);
    for k in 0..instances {
        let mut r = rng::stream(seed, &[0xa0c, k as u64]);
        let n = r.random_range(1..=60);
        let levels = [0u32, 3, 10][r.random_range(0..3)];
        let present = r.random_range(1..=NUM_GRADES);
        let labels: Vec<Grade> = (0..n)
            .map(|_| Grade::from_index(r.random_range(0..present)).expect("< 5"))
            .collect();
        let scores: Vec<[f64; NUM_GRADES]> = (0..n)
            .map(|_| {
                std::array::from_fn(|_| {
                    let u: f64 = r.random();
                    if levels == 0 { u } else { (u * levels as f64).floor() / levels as f64 }
                })
            })
            .collect();
        let got = match auroc_ovr_with(backend, &scores, &labels) {
            Ok(s) => s,
            Err(e) => {
                rep.fail(format!("instance {k}: {e}"));
                continue;
            }
        };
        let mut defined = Vec::new();
        for c in 0..NUM_GRADES {
            let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|g| g.index() == c).collect();
            let want = pairwise_auroc(&col, &pos);
            rep.record(same(got.per_class[c], want), || format!("instance {k}: class {c}"));
            if let Some(w) = want {
                defined.push(w);
                let area = roc_points(&col, &pos).map(|curve| curve.area()).ok();
                rep.record(same(area, want), || format!("instance {k}: class {c} trapezoid"));
            }
        }
        let macro_want = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        rep.record(same(got.macro_mean, macro_want), || format!("instance {k}: macro"));
        let flat: Vec<f64> = scores.iter().flatten().copied().collect();
        let flat_pos: Vec<bool> = labels
            .iter()
            .flat_map(|g| (0..NUM_GRADES).map(move |c| g.index() == c))
            .collect();
        rep.record(same(got.micro, pairwise_auroc(&flat, &flat_pos)), || format!("instance {k}: micro"));
    }
    rep
}
