use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_GRADES: usize = 5;

/// DR severity grade on the 0..=4 ordinal scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Grade(u8);

impl Grade {
    pub const NO_DR: Grade = Grade(0);
    pub const MILD: Grade = Grade(1);
    pub const MODERATE: Grade = Grade(2);
    pub const SEVERE: Grade = Grade(3);
    pub const PROLIFERATIVE: Grade = Grade(4);

    pub const ALL: [Grade; NUM_GRADES] = [
        Grade::NO_DR,
        Grade::MILD,
        Grade::MODERATE,
        Grade::SEVERE,
        Grade::PROLIFERATIVE,
    ];

    pub fn new(value: u8) -> Result<Self> {
        if (value as usize) < NUM_GRADES {
            Ok(Grade(value))
        } else {
            Err(Error::invalid(format!("grade {value} out of range 0..=4")))
        }
    }

    pub fn from_index(index: usize) -> Result<Self> {
        u8::try_from(index)
            .map_err(|_| Error::invalid(format!("grade {index} out of range 0..=4")))
            .and_then(Grade::new)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Severity word used in the prompt template.
    pub fn severity_word(self) -> &'static str {
        ["no", "mild", "moderate", "severe", "proliferative"][self.index()]
    }

    pub fn name(self) -> &'static str {
        ["No DR", "Mild", "Moderate", "Severe", "Proliferative"][self.index()]
    }

    /// Absolute distance on the ordinal scale.
    pub fn distance(self, other: Grade) -> usize {
        self.index().abs_diff(other.index())
    }
}

impl TryFrom<u8> for Grade {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        Grade::new(value)
    }
}

impl From<Grade> for u8 {
    fn from(g: Grade) -> u8 {
        g.0
    }
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Prompt text for a grade: "a fundus photograph showing {severity} diabetic retinopathy".
pub fn prompt_text(grade: Grade) -> String {
    format!(
        "a fundus photograph showing {} diabetic retinopathy",
        grade.severity_word()
    )
}

/// Per-class histogram of a grade sequence.
pub fn histogram<'a>(grades: impl IntoIterator<Item = &'a Grade>) -> [usize; NUM_GRADES] {
    let mut h = [0; NUM_GRADES];
    for g in grades {
        h[g.index()] += 1;
    }
    h
}

/// Index of the maximum value, ties going to the highest index.
pub fn argmax_high(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v >= values[best] {
            best = i;
        }
    }
    best
}
