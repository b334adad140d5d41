use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::manifest::ImageRecord;
use crate::error::{Error, Result};
use crate::grade::{histogram, NUM_GRADES};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResampleSpec {
    pub target_counts: [usize; NUM_GRADES],
    pub seed: u64,
    /// Allow drawing with replacement when a target exceeds the class size.
    pub with_replacement: bool,
}

impl Default for ResampleSpec {
    fn default() -> Self {
        ResampleSpec {
            target_counts: [445, 200, 200, 180, 180],
            seed: 0,
            with_replacement: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResampleSummary {
    pub spec: ResampleSpec,
    pub input_histogram: [usize; NUM_GRADES],
    pub output_histogram: [usize; NUM_GRADES],
    /// Distinct source records drawn per grade.
    pub unique_per_class: [usize; NUM_GRADES],
}

/// Draw exactly `target_counts[g]` records of each grade: without
/// replacement when the class is large enough (undersampling), with
/// replacement otherwise (oversampling). The output is shuffled.
pub fn resample(
    records: &[ImageRecord],
    spec: &ResampleSpec,
) -> Result<(Vec<ImageRecord>, ResampleSummary)> {
    let input_histogram = histogram(records.iter().map(|r| &r.grade));
    let mut out = Vec::with_capacity(spec.target_counts.iter().sum());
    let mut unique_per_class = [0; NUM_GRADES];
    for g in 0..NUM_GRADES {
        let pool: Vec<&ImageRecord> = records.iter().filter(|r| r.grade.index() == g).collect();
        let target = spec.target_counts[g];
        if target == 0 {
            continue;
        }
        if pool.is_empty() {
            return Err(Error::invalid(format!(
                "grade {g} has no records to draw {target} from"
            )));
        }
        let mut rng = rng::stream(spec.seed, &[0x4e5a, g as u64]);
        let picks: Vec<usize> = if target <= pool.len() {
            index::sample(&mut rng, pool.len(), target).into_vec()
        } else if spec.with_replacement {
            (0..target).map(|_| rng.random_range(0..pool.len())).collect()
        } else {
            return Err(Error::invalid(format!(
                "grade {g}: target {target} exceeds class size {} and replacement is disabled",
                pool.len()
            )));
        };
        let mut distinct = picks.clone();
        distinct.sort_unstable();
        distinct.dedup();
        unique_per_class[g] = distinct.len();
        out.extend(picks.into_iter().map(|i| pool[i].clone()));
    }
    out.shuffle(&mut rng::stream(spec.seed, &[0x4e5a, 0xff]));
    let output_histogram = histogram(out.iter().map(|r| &r.grade));
    Ok((
        out,
        ResampleSummary {
            spec: spec.clone(),
            input_histogram,
            output_histogram,
            unique_per_class,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grade::Grade;

    fn records(hist: [usize; 5]) -> Vec<ImageRecord> {
        let mut v = Vec::new();
        for (g, &n) in hist.iter().enumerate() {
            for k in 0..n {
                v.push(ImageRecord {
                    image_id: format!("g{g}_{k}"),
                    filepath: String::new(),
                    grade: Grade::new(g as u8).unwrap(),
                    patient_id: None,
                    source: "s".into(),
                });
            }
        }
        v
    }

    #[test]
    fn hits_targets_exactly() {
        let input = records([1957, 449, 961, 188, 229]);
        let (out, summary) = resample(&input, &ResampleSpec::default()).unwrap();
        assert_eq!(summary.output_histogram, [445, 200, 200, 180, 180]);
        assert_eq!(out.len(), 1205);
    }

    #[test]
    fn identity_targets_permute() {
        let input = records([3, 4, 5, 1, 2]);
        let spec = ResampleSpec {
            target_counts: [3, 4, 5, 1, 2],
            seed: 9,
            with_replacement: false,
        };
        let (out, _) = resample(&input, &spec).unwrap();
        let mut a: Vec<_> = input.iter().map(|r| r.image_id.clone()).collect();
        let mut b: Vec<_> = out.iter().map(|r| r.image_id.clone()).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn no_replacement_cannot_oversample() {
        let input = records([3, 3, 3, 3, 3]);
        let spec = ResampleSpec {
            target_counts: [9, 3, 3, 3, 3],
            seed: 0,
            with_replacement: false,
        };
        assert!(resample(&input, &spec).is_err());
    }

    #[test]
    fn empty_class_with_positive_target() {
        let input = records([3, 0, 3, 3, 3]);
        assert!(resample(&input, &ResampleSpec::default()).is_err());
    }
}
