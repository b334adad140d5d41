use serde::{Deserialize, Serialize};

use super::{LayerGrads, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormConfig {
    pub eps: f64,
    /// Weight of the current batch in the running-statistics moving average.
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential moving average update; the variance uses the unbiased batch estimate.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - momentum) * self.mean[c] + momentum * batch.mean[c];
            self.var[c] = (1.0 - momentum) * self.var[c] + momentum * batch.unbiased_var[c];
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub unbiased_var: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    Train,
    Eval(&'a RunningStats),
}

#[derive(Clone, Debug)]
pub struct BatchNormCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
    gamma: Vec<f64>,
    train: bool,
}

#[derive(Clone, Debug)]
pub struct BatchNormOutput {
    pub output: Tensor,
    pub cache: BatchNormCache,
    /// Batch statistics in train mode, for the caller to fold into its running stats.
    pub batch_stats: Option<BatchStats>,
}

pub fn batchnorm2d(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mode: BnMode<'_>,
    config: BatchNormConfig,
) -> Result<BatchNormOutput> {
    let [n, c, h, w] = input.dims4("batchnorm2d")?;
    for (name, p) in [("gamma", gamma), ("beta", beta)] {
        if p.shape() != [c] {
            return Err(Error::shape(
                "batchnorm2d",
                format!("{name} shape {:?} != channel count [{c}]", p.shape()),
            ));
        }
    }
    if config.eps <= 0.0 {
        return Err(Error::invalid("batchnorm eps must be > 0"));
    }
    let plane = h * w;
    let count = n * plane;
    let x = input.data();
    let (mean, var, batch_stats) = match mode {
        BnMode::Train => {
            if count < 2 {
                return Err(Error::shape(
                    "batchnorm2d",
                    "train mode needs more than one value per channel (batch 1 with spatial size 1)",
                ));
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let vals = (0..n).flat_map(|b| &x[(b * c + ch) * plane..][..plane]);
                let m = vals.clone().sum::<f64>() / count as f64;
                let v = vals.map(|v| (v - m) * (v - m)).sum::<f64>() / count as f64;
                mean[ch] = m;
                var[ch] = v;
            }
            let unbiased_var = var
                .iter()
                .map(|v| v * count as f64 / (count - 1) as f64)
                .collect();
            let stats = BatchStats {
                mean: mean.clone(),
                unbiased_var,
            };
            (mean, var, Some(stats))
        }
        BnMode::Eval(running) => {
            if running.mean.len() != c || running.var.len() != c {
                return Err(Error::shape(
                    "batchnorm2d",
                    format!("running stats hold {} channels, input has {c}", running.mean.len()),
                ));
            }
            (running.mean.clone(), running.var.clone(), None)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + config.eps).sqrt()).collect();
    let mut x_hat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for p in off..off + plane {
                let xh = (x[p] - mean[ch]) * inv_std[ch];
                x_hat[p] = xh;
                out[p] = gamma.data()[ch] * xh + beta.data()[ch];
            }
        }
    }
    Ok(BatchNormOutput {
        output: Tensor::new(input.shape().to_vec(), out)?,
        cache: BatchNormCache {
            x_hat: Tensor::new(input.shape().to_vec(), x_hat)?,
            inv_std,
            gamma: gamma.data().to_vec(),
            train: batch_stats.is_some(),
        },
        batch_stats,
    })
}

/// Exact gradients for both modes; in train mode the batch statistics are
/// differentiated through.
pub fn batchnorm2d_backward(cache: &BatchNormCache, d_out: &Tensor) -> Result<LayerGrads> {
    cache.x_hat.expect_same_shape(d_out, "batchnorm2d_backward")?;
    let [n, c, h, w] = d_out.dims4("batchnorm2d_backward")?;
    let plane = h * w;
    let m = (n * plane) as f64;
    let dy = d_out.data();
    let xh = cache.x_hat.data();
    let mut d_gamma = vec![0.0; c];
    let mut d_beta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for p in off..off + plane {
                d_beta[ch] += dy[p];
                d_gamma[ch] += dy[p] * xh[p];
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let k = cache.gamma[ch] * cache.inv_std[ch];
            let off = (b * c + ch) * plane;
            for p in off..off + plane {
                dx[p] = if cache.train {
                    k * (dy[p] - d_beta[ch] / m - xh[p] * d_gamma[ch] / m)
                } else {
                    k * dy[p]
                };
            }
        }
    }
    let mut grads = LayerGrads {
        d_input: Some(Tensor::new(d_out.shape().to_vec(), dx)?),
        ..Default::default()
    };
    grads
        .d_params
        .insert("gamma".into(), Tensor::new(vec![c], d_gamma)?);
    grads
        .d_params
        .insert("beta".into(), Tensor::new(vec![c], d_beta)?);
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_channel_maps_to_zero() {
        let x = Tensor::full(&[2, 1, 3, 3], 4.2);
        let out = batchnorm2d(
            &x,
            &Tensor::full(&[1], 1.0),
            &Tensor::zeros(&[1]),
            BnMode::Train,
            BatchNormConfig::default(),
        )
        .unwrap();
        assert!(out.output.data().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn beta_sets_channel_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[3, 2, 4, 4], 3.0, &mut rng);
        let out = batchnorm2d(
            &x,
            &Tensor::full(&[2], 1.0),
            &Tensor::full(&[2], 5.0),
            BnMode::Train,
            BatchNormConfig::default(),
        )
        .unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|b| out.output.data()[(b * 2 + ch) * 16..][..16].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!((mean - 5.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_value_per_channel_is_rejected_in_train_mode() {
        let x = Tensor::full(&[1, 3, 1, 1], 1.0);
        let r = batchnorm2d(
            &x,
            &Tensor::full(&[3], 1.0),
            &Tensor::zeros(&[3]),
            BnMode::Train,
            BatchNormConfig::default(),
        );
        assert!(r.is_err());
        let stats = RunningStats::new(3);
        assert!(batchnorm2d(
            &x,
            &Tensor::full(&[3], 1.0),
            &Tensor::zeros(&[3]),
            BnMode::Eval(&stats),
            BatchNormConfig::default(),
        )
        .is_ok());
    }

    #[test]
    fn running_stats_follow_moving_average() {
        let x = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let out = batchnorm2d(
            &x,
            &Tensor::full(&[1], 1.0),
            &Tensor::zeros(&[1]),
            BnMode::Train,
            BatchNormConfig::default(),
        )
        .unwrap();
        let mut rs = RunningStats::new(1);
        rs.update(out.batch_stats.as_ref().unwrap(), 0.1);
        assert!((rs.mean[0] - 0.2).abs() < 1e-15);
        // unbiased variance of {1, 3} is 2
        assert!((rs.var[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn train_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[2, 3, 3, 2], 1.0, &mut rng);
        let gamma = Tensor::randn(&[3], 1.0, &mut rng);
        let beta = Tensor::randn(&[3], 1.0, &mut rng);
        let proj = Tensor::randn(x.shape(), 1.0, &mut rng);
        let cfg = BatchNormConfig::default();
        let out = batchnorm2d(&x, &gamma, &beta, BnMode::Train, cfg).unwrap();
        let g = batchnorm2d_backward(&out.cache, &proj).unwrap();
        let numeric = gradcheck::central_difference(
            |xd| {
                let x = Tensor::new(x.shape().to_vec(), xd.to_vec()).unwrap();
                let y = batchnorm2d(&x, &gamma, &beta, BnMode::Train, cfg).unwrap();
                y.output.dot(&proj).unwrap()
            },
            x.data(),
            1e-5,
        );
        let err = gradcheck::relative_error(g.d_input.as_ref().unwrap().data(), &numeric);
        assert!(err < 1e-4, "relative error {err}");
    }
}
