//! Independent reference checks: every analytic result is compared against
//! a computation that shares no code with it (finite differences, exhaustive
//! pair enumeration, direct formulas, byte-level corruption).
//!
//! The integration tests and the acceptance runner both drive these.

mod auroc;
mod container;
mod gradients;
mod losses;

pub use auroc::{auroc_oracle, pairwise_auroc};
pub use container::{container_corruption, container_roundtrip, random_container};
pub use gradients::{gradient_suite, ABS_FLOOR, GRADIENT_STEP};
pub use losses::{loss_identities, ranking_loss_oracle};

use std::fmt;

/// Outcome of one family of checks.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub cases: usize,
    /// Largest observed error (whatever the check measures).
    pub worst: f64,
    pub tolerance: f64,
    pub failures: Vec<String>,
}

impl CheckReport {
    pub fn new(name: impl Into<String>, tolerance: f64) -> Self {
        CheckReport {
            name: name.into(),
            cases: 0,
            worst: 0.0,
            tolerance,
            failures: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.cases > 0
    }

    /// Record one case with error `err`; `what` describes it on failure.
    pub fn record(&mut self, err: f64, what: impl FnOnce() -> String) {
        self.cases += 1;
        if err.is_nan() || err > self.worst {
            self.worst = err;
        }
        if !(err <= self.tolerance) {
            // keep the list short; the count is what matters
            if self.failures.len() < 10 {
                self.failures.push(format!("{} (error {err:.3e})", what()));
            } else if self.failures.len() == 10 {
                self.failures.push("...".into());
            }
        }
    }

    pub fn fail(&mut self, what: impl Into<String>) {
        self.cases += 1;
        self.failures.push(what.into());
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} cases, worst {:.3e} (tol {:.0e})",
            self.name, self.cases, self.worst, self.tolerance
        )?;
        for msg in &self.failures {
            write!(f, "\n    {msg}")?;
        }
        Ok(())
    }
}
