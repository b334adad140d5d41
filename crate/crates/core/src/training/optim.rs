use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Grads, Parameters};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-4,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per named parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One AdamW update of every parameter `params` exposes mutably. Decay is
/// applied to the parameter directly before the Adam step.
pub fn adamw_step(
    params: &mut dyn Parameters,
    grads: &Grads,
    state: &mut OptimState,
    cfg: &AdamWConfig,
) -> Result<()> {
    if !(cfg.lr >= 0.0) || !(cfg.weight_decay >= 0.0) {
        return Err(Error::invalid("learning rate and weight decay must be >= 0"));
    }
    let t = state.step + 1;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let mut err = None;
    params.visit_mut(&mut |name, p| {
        if err.is_some() {
            return;
        }
        let Some(g) = grads.get(name) else {
            err = Some(Error::invalid(format!("no gradient for parameter {name}")));
            return;
        };
        if g.shape() != p.shape() {
            err = Some(Error::shape(
                "adamw_step",
                format!("{name}: gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
            ));
            return;
        }
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let decay = 1.0 - cfg.lr * cfg.weight_decay;
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *pi *= decay;
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    state.step = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scalar(Tensor);

    impl Parameters for Scalar {
        fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
            f("p", &self.0)
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
            f("p", &mut self.0)
        }
    }

    fn grads(g: f64) -> Grads {
        [("p".to_string(), Tensor::full(&[1], g))].into()
    }

    #[test]
    fn first_step_by_hand() {
        let mut p = Scalar(Tensor::full(&[1], 1.0));
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        let mut st = OptimState::default();
        adamw_step(&mut p, &grads(1.0), &mut st, &cfg).unwrap();
        assert!((p.0.data()[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let mut p = Scalar(Tensor::full(&[1], 3.0));
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 1e-3, ..Default::default() };
        adamw_step(&mut p, &grads(0.0), &mut OptimState::default(), &cfg).unwrap();
        assert_eq!(p.0.data()[0], 3.0 * (1.0 - 0.1 * 1e-3));
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = Scalar(Tensor::full(&[1], -0.7));
        let cfg = AdamWConfig { lr: 0.0, weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut p, &grads(5.0), &mut OptimState::default(), &cfg).unwrap();
        assert_eq!(p.0.data()[0], -0.7);
    }

    #[test]
    fn matches_plain_adam_without_decay() {
        let mut p = Scalar(Tensor::full(&[1], 0.5));
        let cfg = AdamWConfig { lr: 0.01, weight_decay: 0.0, ..Default::default() };
        let mut st = OptimState::default();
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.5f64);
        for t in 1..=5 {
            let g = 0.3 * t as f64 - 1.0;
            adamw_step(&mut p, &grads(g), &mut st, &cfg).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p.0.data()[0] - x).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = Scalar(Tensor::full(&[1], 0.0));
        let r = adamw_step(&mut p, &Grads::new(), &mut OptimState::default(), &AdamWConfig::default());
        assert!(r.is_err());
    }
}
