use drgrade::data::{resample, stratified_split, ImageRecord, Manifest, ResampleSpec, SplitSpec};
use drgrade::io::{Container, EntryData};
use drgrade::metrics::{auroc_ovr, binary_auroc, confusion, error_margin, prf_and_accuracy};
use drgrade::models::{log_softmax, softmax};
use drgrade::{Grade, NUM_GRADES};
use proptest::prelude::*;

fn grade() -> impl Strategy<Value = Grade> {
    (0..NUM_GRADES).prop_map(|g| Grade::from_index(g).unwrap())
}

fn records(counts: [usize; 5], per_patient: usize) -> Vec<ImageRecord> {
    let mut out = Vec::new();
    for (g, &n) in counts.iter().enumerate() {
        for i in 0..n {
            out.push(ImageRecord {
                image_id: format!("g{g}_{i}"),
                filepath: format!("img/g{g}_{i}.png"),
                grade: Grade::from_index(g).unwrap(),
                patient_id: (per_patient > 0).then(|| format!("p{g}_{}", i / per_patient)),
                source: "prop".into(),
            });
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn softmax_is_a_distribution(z in prop::array::uniform5(-700.0f64..700.0)) {
        let p = softmax(&z);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        let ls = log_softmax(&z);
        prop_assert!(ls.iter().all(|v| v.is_finite() && *v <= 0.0));
    }

    #[test]
    fn split_is_a_stratified_partition(
        counts in prop::array::uniform5(3usize..60),
        per_patient in 0usize..4,
        seed in any::<u64>(),
    ) {
        let m = Manifest::new(records(counts, per_patient)).unwrap();
        let out = stratified_split(&m, &SplitSpec { seed, ..SplitSpec::default() }).unwrap();
        let mut ids: Vec<&str> = out.train.ids();
        ids.extend(out.val.ids());
        ids.extend(out.test.ids());
        ids.sort_unstable();
        let mut all = m.ids();
        all.sort_unstable();
        prop_assert_eq!(ids, all);
        let s = &out.summary;
        for g in 0..NUM_GRADES {
            prop_assert_eq!(s.train_histogram[g] + s.val_histogram[g] + s.test_histogram[g], counts[g]);
        }
        if out.summary.patient_grouping {
            let patients = |m: &Manifest| m.records().iter().filter_map(|r| r.patient_id.clone()).collect::<std::collections::HashSet<_>>();
            let (a, b, c) = (patients(&out.train), patients(&out.val), patients(&out.test));
            prop_assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        } else {
            // ungrouped splits hit every class target to within one record,
            // except tiny classes where each split is first given one record
            for g in (0..NUM_GRADES).filter(|&g| counts[g] >= 10) {
                prop_assert!((s.train_histogram[g] as f64 - 0.7 * counts[g] as f64).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn resample_hits_targets_exactly(
        counts in prop::array::uniform5(1usize..50),
        targets in prop::array::uniform5(0usize..80),
        seed in any::<u64>(),
    ) {
        let recs = records(counts, 0);
        let (out, summary) = resample(&recs, &ResampleSpec { target_counts: targets, seed, with_replacement: true }).unwrap();
        prop_assert_eq!(summary.output_histogram, targets);
        prop_assert_eq!(out.len(), targets.iter().sum::<usize>());
        for g in 0..NUM_GRADES {
            // undersampling never repeats a record
            if targets[g] <= counts[g] {
                prop_assert_eq!(summary.unique_per_class[g], targets[g]);
            }
        }
    }

    #[test]
    fn confusion_and_prf_are_consistent(pairs in prop::collection::vec((grade(), grade()), 1..200)) {
        let (preds, labels): (Vec<Grade>, Vec<Grade>) = pairs.into_iter().unzip();
        let cm = confusion(&preds, &labels).unwrap();
        prop_assert_eq!(cm.total() as usize, preds.len());
        let prf = prf_and_accuracy(&cm).unwrap();
        let hits = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        prop_assert!((prf.accuracy - hits as f64 / preds.len() as f64).abs() < 1e-15);
        let em = error_margin(&preds, &labels).unwrap();
        prop_assert!((em.exact + em.off_by_one + em.off_by_two_plus - 1.0).abs() < 1e-12);
        prop_assert!((em.exact - prf.accuracy).abs() < 1e-15);
    }

    #[test]
    fn auroc_is_invariant_to_monotone_transforms(
        rows in prop::collection::vec((prop::array::uniform5(0.0f64..1.0), grade()), 2..60),
    ) {
        let (scores, labels): (Vec<[f64; 5]>, Vec<Grade>) = rows.into_iter().unzip();
        let a = auroc_ovr(&scores, &labels).unwrap();
        let warped: Vec<[f64; 5]> = scores.iter().map(|r| r.map(|v| (3.0 * v).exp() - 7.0)).collect();
        let b = auroc_ovr(&warped, &labels).unwrap();
        prop_assert_eq!(a.per_class, b.per_class);
        for v in a.per_class.iter().flatten() {
            prop_assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn auroc_flips_under_negation(
        scores in prop::collection::vec(0.0f64..1.0, 2..60),
        pos in prop::collection::vec(any::<bool>(), 60),
    ) {
        let pos = &pos[..scores.len()];
        prop_assume!(pos.contains(&true) && pos.contains(&false));
        let a = binary_auroc(&scores, pos).unwrap();
        let neg: Vec<f64> = scores.iter().map(|v| -v).collect();
        prop_assert!((a + binary_auroc(&neg, pos).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn container_roundtrips_any_global_entry(values in prop::collection::vec(any::<u32>(), 1..100), meta in ".{0,40}") {
        let mut c = Container::new(meta.clone());
        c.push("x", EntryData::Global(values.iter().map(|&b| f32::from_bits(b)).collect())).unwrap();
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        prop_assert_eq!(back.meta.clone(), meta);
        prop_assert!(back.get("x").unwrap().bitwise_eq(c.get("x").unwrap()));
    }
}
