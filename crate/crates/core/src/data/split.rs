use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::manifest::{ImageRecord, Manifest};
use crate::error::{Error, Result};
use crate::grade::{histogram, NUM_GRADES};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    /// Train, validation and test fractions.
    pub ratios: [f64; 3],
    pub seed: u64,
    pub group_by_patient: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            ratios: [0.70, 0.15, 0.15],
            seed: 0,
            group_by_patient: true,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::invalid(format!(
                "split ratios must be nonnegative, got {:?}",
                self.ratios
            )));
        }
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "split ratios must sum to 1, got {:?} (sum {sum})",
                self.ratios
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub spec: SplitSpec,
    pub input_histogram: [usize; NUM_GRADES],
    pub train_histogram: [usize; NUM_GRADES],
    pub val_histogram: [usize; NUM_GRADES],
    pub test_histogram: [usize; NUM_GRADES],
    /// Whether patient groups constrained the assignment.
    pub patient_grouping: bool,
    /// Why patient grouping was requested but not applied.
    pub fallback: Option<String>,
    /// Largest |count - ratio * class size| over splits and classes.
    pub max_deviation: f64,
}

#[derive(Clone, Debug)]
pub struct SplitOutput {
    pub train: Manifest,
    pub val: Manifest,
    pub test: Manifest,
    pub summary: SplitSummary,
}

/// Split a manifest into train/validation/test, stratified by grade and,
/// when requested and available, without sharing patients across splits.
pub fn stratified_split(manifest: &Manifest, spec: &SplitSpec) -> Result<SplitOutput> {
    spec.validate()?;
    let records = manifest.records();
    let hist = manifest.histogram();
    let positive = spec.ratios.iter().filter(|&&r| r > 0.0).count();
    for (g, &n) in hist.iter().enumerate() {
        if n > 0 && n < positive {
            return Err(Error::invalid(format!(
                "grade {g} has {n} record(s), too few to populate {positive} splits"
            )));
        }
    }

    let has_ids = records.iter().any(|r| r.patient_id.is_some());
    let (assignment, grouped, fallback) = if spec.group_by_patient && has_ids {
        (grouped_assignment(records, &hist, spec), true, None)
    } else {
        let fallback = spec.group_by_patient.then(|| {
            "no patient ids in manifest; stratified at image level".to_string()
        });
        (image_level_assignment(records, &hist, spec), false, fallback)
    };

    let mut parts: [Vec<ImageRecord>; 3] = Default::default();
    for (r, &s) in records.iter().zip(&assignment) {
        parts[s].push(r.clone());
    }
    let hists = parts
        .each_ref()
        .map(|p| histogram(p.iter().map(|r| &r.grade)));
    let mut max_deviation: f64 = 0.0;
    for s in 0..3 {
        for g in 0..NUM_GRADES {
            let dev = (hists[s][g] as f64 - spec.ratios[s] * hist[g] as f64).abs();
            max_deviation = max_deviation.max(dev);
        }
    }
    let [train, val, test] = parts;
    Ok(SplitOutput {
        train: Manifest::new(train)?,
        val: Manifest::new(val)?,
        test: Manifest::new(test)?,
        summary: SplitSummary {
            spec: spec.clone(),
            input_histogram: hist,
            train_histogram: hists[0],
            val_histogram: hists[1],
            test_histogram: hists[2],
            patient_grouping: grouped,
            fallback,
            max_deviation,
        },
    })
}

/// Largest-remainder allocation of `n` items over the ratios, with every
/// positive-ratio split receiving at least one item when possible.
fn allocate(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact = ratios.map(|r| r * n as f64);
    let mut counts = exact.map(|e| e.floor() as usize);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &s in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratios[s] > 0.0 {
            counts[s] += 1;
            left -= 1;
        }
    }
    for s in 0..3 {
        if ratios[s] > 0.0 && counts[s] == 0 {
            let donor = (0..3).max_by_key(|&d| (counts[d], 3 - d)).expect("three splits");
            if counts[donor] > 1 {
                counts[donor] -= 1;
                counts[s] += 1;
            }
        }
    }
    counts
}

fn image_level_assignment(
    records: &[ImageRecord],
    hist: &[usize; NUM_GRADES],
    spec: &SplitSpec,
) -> Vec<usize> {
    let mut assignment = vec![0; records.len()];
    for g in 0..NUM_GRADES {
        let mut members: Vec<usize> = records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.grade.index() == g)
            .map(|(i, _)| i)
            .collect();
        members.shuffle(&mut rng::stream(spec.seed, &[0x5917, g as u64]));
        let counts = allocate(hist[g], &spec.ratios);
        let mut it = members.into_iter();
        for (s, &c) in counts.iter().enumerate() {
            for i in it.by_ref().take(c) {
                assignment[i] = s;
            }
        }
    }
    assignment
}

/// Greedy group assignment: groups (patients; records without a patient id
/// are their own group) are placed largest first into the split whose
/// per-grade counts move closest to their targets.
fn grouped_assignment(
    records: &[ImageRecord],
    hist: &[usize; NUM_GRADES],
    spec: &SplitSpec,
) -> Vec<usize> {
    let mut by_patient: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        match &r.patient_id {
            Some(p) => by_patient.entry(p.as_str()).or_default().push(i),
            None => groups.push(vec![i]),
        }
    }
    groups.extend(by_patient.into_values());
    groups.shuffle(&mut rng::stream(spec.seed, &[0x6209, 0]));
    groups.sort_by_key(|g| std::cmp::Reverse(g.len()));

    let targets: [[f64; NUM_GRADES]; 3] =
        spec.ratios.map(|r| hist.map(|n| r * n as f64));
    let mut counts = [[0.0f64; NUM_GRADES]; 3];
    let mut assignment = vec![0; records.len()];
    for group in &groups {
        let gh = histogram(group.iter().map(|&i| &records[i].grade));
        let mut best: Option<(f64, usize)> = None;
        for s in 0..3 {
            if spec.ratios[s] <= 0.0 {
                continue;
            }
            let cost: f64 = (0..NUM_GRADES)
                .map(|g| {
                    let before = counts[s][g] - targets[s][g];
                    let after = before + gh[g] as f64;
                    after * after - before * before
                })
                .sum();
            if best.is_none_or(|(c, _)| cost < c) {
                best = Some((cost, s));
            }
        }
        let (_, s) = best.expect("at least one positive ratio");
        for g in 0..NUM_GRADES {
            counts[s][g] += gh[g] as f64;
        }
        for &i in group {
            assignment[i] = s;
        }
    }
    assignment
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grade::Grade;
    use std::collections::HashSet;

    fn synthetic(hist: [usize; 5], patients: Option<usize>) -> Manifest {
        let mut records = Vec::new();
        for (g, &n) in hist.iter().enumerate() {
            for k in 0..n {
                let i = records.len();
                records.push(ImageRecord {
                    image_id: format!("img{g}_{k}"),
                    filepath: format!("{i}.png"),
                    grade: Grade::new(g as u8).unwrap(),
                    patient_id: patients.map(|p| format!("p{}", i % p)),
                    source: "synthetic".into(),
                });
            }
        }
        Manifest::new(records).unwrap()
    }

    #[test]
    fn allocation_never_goes_negative() {
        assert_eq!(allocate(3, &[0.5, 0.5, 0.0]), [2, 1, 0]);
        assert_eq!(allocate(3, &[0.9, 0.05, 0.05]), [1, 1, 1]);
        assert_eq!(allocate(10, &[1.0, 0.0, 0.0]), [10, 0, 0]);
        assert_eq!(allocate(2822, &[0.7, 0.15, 0.15]).iter().sum::<usize>(), 2822);
    }

    #[test]
    fn per_class_counts_within_one_of_ratio() {
        let m = synthetic([2822, 640, 1346, 268, 330], None);
        let out = stratified_split(&m, &SplitSpec::default()).unwrap();
        assert!(out.summary.max_deviation <= 1.0, "{:?}", out.summary);
        assert!(out.summary.fallback.is_some());
        assert_eq!(out.train.len() + out.val.len() + out.test.len(), m.len());
    }

    #[test]
    fn everything_to_train() {
        let m = synthetic([4, 3, 2, 1, 5], None);
        let spec = SplitSpec {
            ratios: [1.0, 0.0, 0.0],
            seed: 3,
            group_by_patient: false,
        };
        let out = stratified_split(&m, &spec).unwrap();
        assert_eq!(out.train, m);
        assert!(out.val.is_empty() && out.test.is_empty());
    }

    #[test]
    fn patients_do_not_cross_splits() {
        let m = synthetic([3, 2, 2, 2, 2], Some(2));
        let spec = SplitSpec {
            ratios: [0.5, 0.5, 0.0],
            seed: 1,
            group_by_patient: true,
        };
        let out = stratified_split(&m, &spec).unwrap();
        assert!(out.summary.patient_grouping);
        let pa: HashSet<_> = out.train.records().iter().map(|r| r.patient_id.clone()).collect();
        let pb: HashSet<_> = out.val.records().iter().map(|r| r.patient_id.clone()).collect();
        assert!(pa.is_disjoint(&pb));
        assert_eq!(out.train.len() + out.val.len(), 11);
    }

    #[test]
    fn rejects_bad_ratios_and_tiny_classes() {
        let m = synthetic([5, 5, 5, 5, 2], None);
        let mut spec = SplitSpec {
            ratios: [0.7, 0.2, 0.2],
            ..Default::default()
        };
        assert!(stratified_split(&m, &spec).is_err());
        spec.ratios = [0.7, 0.15, 0.15];
        let e = stratified_split(&m, &spec).unwrap_err();
        assert!(e.to_string().contains("grade 4"), "{e}");
    }

    #[test]
    fn deterministic_for_seed() {
        let m = synthetic([50, 20, 30, 10, 10], Some(40));
        let spec = SplitSpec::default();
        let a = stratified_split(&m, &spec).unwrap();
        let b = stratified_split(&m, &spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
    }
}
