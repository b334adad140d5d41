//! The three grading heads.

mod cbam;
mod checkpoint;
mod fcn;
mod prompt;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grade::{argmax_high, Grade, NUM_GRADES};
use crate::tensor::Tensor;

pub use cbam::{cbam_backward, cbam_forward, export_spatial_gate, CbamCache, CbamParams};
pub use checkpoint::{load_checkpoint, save_checkpoint, sidecar_path, HeadArchitecture, Model};
pub use fcn::{ConvBlock, FcnCache, FcnConfig, FcnForward, FcnHeadParams};
pub use prompt::{
    ranking_head_backward, ranking_head_forward, zero_shot_classify, PromptBank, RankingCache,
    RankingHead, ScoreMode, ZeroShotPrediction,
};

/// Named parameter gradients, keyed like [`Parameters::visit`].
pub type Grads = BTreeMap<String, Tensor>;

/// Access to a model's trainable tensors by stable name.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Per-grade scores for a batch, `N x 5`, columns in grade order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradeLogits(Tensor);

impl GradeLogits {
    pub fn new(values: Tensor) -> Result<Self> {
        let [_, k] = values.dims2("GradeLogits")?;
        if k != NUM_GRADES {
            return Err(Error::shape(
                "GradeLogits",
                format!("expected {NUM_GRADES} columns, got {k}"),
            ));
        }
        Ok(GradeLogits(values))
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn row(&self, i: usize) -> [f64; NUM_GRADES] {
        self.0.row(i).try_into().expect("5 columns")
    }

    /// Row-wise softmax.
    pub fn probabilities(&self) -> Vec<[f64; NUM_GRADES]> {
        (0..self.rows()).map(|i| softmax(&self.row(i))).collect()
    }

    /// Row-wise argmax, ties toward the higher grade.
    pub fn argmax(&self) -> Vec<Grade> {
        (0..self.rows())
            .map(|i| Grade::from_index(argmax_high(&self.row(i))).expect("index < 5"))
            .collect()
    }
}

pub fn softmax(z: &[f64; NUM_GRADES]) -> [f64; NUM_GRADES] {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p = z.map(|v| (v - m).exp());
    let s: f64 = p.iter().sum();
    for v in &mut p {
        *v /= s;
    }
    p
}

pub fn log_softmax(z: &[f64; NUM_GRADES]) -> [f64; NUM_GRADES] {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.map(|v| v - lse)
}

/// PyTorch-style default init: uniform in `+-1/sqrt(fan_in)`.
pub(crate) fn uniform_init<R: rand::Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_is_a_distribution() {
        let p = softmax(&[1.0, 2.0, 3.0, -1.0, 1000.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(p.iter().all(|v| *v >= 0.0));
        let lp = log_softmax(&[0.0; 5]);
        assert!((lp[0] + 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn logits_need_five_columns() {
        assert!(GradeLogits::new(Tensor::zeros(&[2, 4])).is_err());
    }
}
