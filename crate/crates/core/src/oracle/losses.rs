use rand::Rng;

use super::CheckReport;
use crate::grade::{Grade, NUM_GRADES};
use crate::losses::{
    combined_loss, focal_loss, ranking_loss, weighted_cross_entropy, AlphaWeights, ClassWeights,
    CombinedLossConfig, LossValue, RankingVariant,
};
use crate::rng;
use crate::tensor::Tensor;

/// Ranking hinge by brute force over all ordered grade pairs, with the pair
/// sets written out from their definitions.
pub fn ranking_loss_oracle(scores: &Tensor, targets: &[Grade], margin: f64, variant: RankingVariant) -> f64 {
    let mut total = 0.0;
    for (i, t) in targets.iter().enumerate() {
        let y = t.index() as i64;
        let s = scores.row(i);
        let mut sum = 0.0;
        let mut count = 0usize;
        for a in 0..NUM_GRADES as i64 {
            for b in 0..NUM_GRADES as i64 {
                let constrained = match variant {
                    // a strictly closer to the truth than b
                    RankingVariant::Unimodal => (a - y).abs() < (b - y).abs(),
                    // truth above everything, then higher grades above lower ones
                    RankingVariant::Monotone => (a == y && b != y) || (a != y && b != y && a > b),
                };
                if constrained {
                    count += 1;
                    sum += (margin - (s[a as usize] - s[b as usize])).max(0.0);
                }
            }
        }
        total += sum / count as f64;
    }
    total / targets.len() as f64
}

fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b)
}

fn exact(a: &LossValue, b: &LossValue) -> f64 {
    // `==` rather than bit equality: a zero weight may flip the sign of a zero
    if a.value == b.value && a.d_logits.data().iter().zip(b.d_logits.data()).all(|(x, y)| x == y)
    {
        0.0
    } else {
        (a.value - b.value).abs().max(max_abs(&a.d_logits, &b.d_logits)).max(f64::MIN_POSITIVE)
    }
}

/// The three loss identities over `batches` random batches:
/// focal with gamma 0 equals weighted cross-entropy (1e-12), the combined
/// loss at alpha 0 and 1 is exactly one component, and the ranking loss
/// equals the brute-force oracle (1e-12).
pub fn loss_identities(batches: usize, seed: u64) -> [CheckReport; 3] {
    let mut focal = CheckReport::new("focal(gamma=0) vs weighted CE", 1e-12);
    let mut ends = CheckReport::new("combined loss endpoints", 0.0);
    let mut rank = CheckReport::new("ranking loss vs brute force", 1e-12);
    for k in 0..batches {
        let mut r = rng::stream(seed, &[0x1055, k as u64]);
        let n = r.random_range(1..=32);
        let scale = [0.1, 1.0, 5.0, 30.0][r.random_range(0..4)];
        let z = Tensor::randn(&[n, NUM_GRADES], scale, &mut r);
        let t: Vec<Grade> = (0..n).map(|_| Grade::from_index(r.random_range(0..NUM_GRADES)).expect("< 5")).collect();
        let w = ClassWeights::new(std::array::from_fn(|_| r.random_range(0.0..4.0))).expect("nonnegative");

        let f = focal_loss(&z, &t, 0.0, &w).expect("valid batch");
        let ce = weighted_cross_entropy(&z, &t, &w).expect("valid batch");
        let err = (f.value - ce.value).abs().max(max_abs(&f.d_logits, &ce.d_logits));
        focal.record(err, || format!("batch {k}"));

        let mut cfg = CombinedLossConfig {
            alpha: 0.0,
            gamma: r.random_range(0.0..3.0),
            margin: r.random_range(0.0..1.0),
            score_scale: r.random_range(0.05..2.0),
            variant: [RankingVariant::Unimodal, RankingVariant::Monotone][r.random_range(0..2)],
            alpha_weights: [AlphaWeights::CrossEntropy, AlphaWeights::Ranking][r.random_range(0..2)],
        };
        let cls = focal_loss(&z, &t, cfg.gamma, &w).expect("valid batch");
        let mut rk = ranking_loss(&z.clone().scaled(cfg.score_scale), &t, cfg.margin, cfg.variant).expect("valid batch");
        rk.d_logits.scale(cfg.score_scale);
        for alpha in [0.0, 1.0] {
            cfg.alpha = alpha;
            let got = combined_loss(&z, &t, &w, &cfg).expect("valid batch");
            let cls_side = (alpha == 1.0) == (cfg.alpha_weights == AlphaWeights::CrossEntropy);
            let want = if cls_side { &cls } else { &rk };
            ends.record(exact(&got, want), || format!("batch {k}: alpha {alpha}, {:?}", cfg.alpha_weights));
        }

        for variant in [RankingVariant::Unimodal, RankingVariant::Monotone] {
            let margin = r.random_range(0.0..2.0);
            let got = ranking_loss(&z, &t, margin, variant).expect("valid batch").value;
            let want = ranking_loss_oracle(&z, &t, margin, variant);
            rank.record((got - want).abs(), || format!("batch {k}: {variant:?}"));
        }
    }
    [focal, ends, rank]
}
