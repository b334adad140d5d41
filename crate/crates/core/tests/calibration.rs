use drgrade::calibration::{calibrate_thresholds, calibrate_thresholds_with, decide, Objective, ScoreKind};
use drgrade::models::softmax;
use drgrade::{rng, Backend, Grade, NUM_GRADES};
use rand::Rng;

/// Objective from raw counts, written independently of the library.
fn objective(obj: Objective, scores: &[f64], pos: &[bool], tau: f64) -> f64 {
    let (mut tp, mut fp, mut fnn, mut tn) = (0.0, 0.0, 0.0, 0.0);
    for (&s, &p) in scores.iter().zip(pos) {
        match (s >= tau, p) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fnn += 1.0,
            (false, false) => tn += 1.0,
        }
    }
    match obj {
        Objective::F1 => {
            if tp == 0.0 {
                0.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fnn)
            }
        }
        Objective::Youden => tp / (tp + fnn) - if fp + tn > 0.0 { fp / (fp + tn) } else { 0.0 },
    }
}

fn random_problem(seed: u64) -> (Vec<[f64; NUM_GRADES]>, Vec<Grade>) {
    let mut r = rng::stream(seed, &[0xca1]);
    let n = r.random_range(2..80);
    let present = r.random_range(2..=NUM_GRADES);
    let labels: Vec<Grade> = (0..n).map(|_| Grade::from_index(r.random_range(0..present)).unwrap()).collect();
    let quant = r.random_bool(0.3);
    let scores = labels
        .iter()
        .map(|g| {
            let mut z: [f64; NUM_GRADES] = std::array::from_fn(|_| r.random_range(-2.0..2.0));
            z[g.index()] += r.random_range(0.0..2.0);
            if quant {
                z = z.map(|v| v.round());
            }
            softmax(&z)
        })
        .collect();
    (scores, labels)
}

#[test]
fn thresholds_are_optimal_on_a_dense_grid() {
    for seed in 0..200 {
        let (scores, labels) = random_problem(seed);
        for obj in [Objective::F1, Objective::Youden] {
            let th = calibrate_thresholds(&scores, &labels, obj, ScoreKind::Probabilities).unwrap();
            for c in 0..NUM_GRADES {
                let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
                let pos: Vec<bool> = labels.iter().map(|g| g.index() == c).collect();
                if !pos.contains(&true) {
                    assert_eq!(th.tau[c], 0.5);
                    assert!(th.flagged.contains(&Grade::from_index(c).unwrap()));
                    continue;
                }
                let grid = (0..=10_000).map(|i| i as f64 / 10_000.0).chain(col.iter().copied());
                let best = grid.map(|t| objective(obj, &col, &pos, t)).fold(f64::NEG_INFINITY, f64::max);
                let got = objective(obj, &col, &pos, th.tau[c]);
                assert!(got >= best - 1e-12, "seed {seed} class {c} {obj:?}: {got} < grid best {best}");
                assert!((0.0..=1.0).contains(&th.tau[c]));
                // ties resolve to the lowest threshold: any lower score cut is worse
                for &s in col.iter().filter(|&&s| s < th.tau[c]) {
                    assert!(objective(obj, &col, &pos, s) < got, "seed {seed} class {c}: lower cut {s} ties");
                }
            }
        }
    }
}

#[test]
fn backends_agree() {
    for seed in 0..20 {
        let (scores, labels) = random_problem(seed);
        let a = calibrate_thresholds_with(Backend::Sequential, &scores, &labels, Objective::F1, ScoreKind::Probabilities).unwrap();
        let b = calibrate_thresholds_with(Backend::default(), &scores, &labels, Objective::F1, ScoreKind::Probabilities).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn raw_scores_are_accepted_and_probabilities_validated() {
    let labels: Vec<Grade> = Grade::ALL.to_vec();
    let raw: Vec<[f64; 5]> = (0..5).map(|i| std::array::from_fn(|c| if c == i { 4.0 } else { -1.0 })).collect();
    let th = calibrate_thresholds(&raw, &labels, Objective::F1, ScoreKind::Raw).unwrap();
    for (i, row) in raw.iter().enumerate() {
        assert_eq!(decide(row, &th).unwrap().index(), i);
    }
    assert!(calibrate_thresholds(&raw, &labels, Objective::F1, ScoreKind::Probabilities).is_err());
}

#[test]
fn decide_prefers_the_most_severe_grade_over_threshold() {
    let mut th = drgrade::calibration::ThresholdSet::new([0.5; 5], Objective::F1, ScoreKind::Probabilities).unwrap();
    th.tau[4] = 0.1;
    th.tau[1] = 0.3;
    assert_eq!(decide(&[0.5, 0.35, 0.0, 0.0, 0.15], &th).unwrap(), Grade::PROLIFERATIVE);
    // nothing reaches its threshold: argmax, ties to the higher grade
    th.tau = [0.9; 5];
    assert_eq!(decide(&[0.4, 0.4, 0.2, 0.0, 0.0], &th).unwrap(), Grade::MILD);
}
