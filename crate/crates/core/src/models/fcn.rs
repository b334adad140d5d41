//! Supervised head over frozen encoder feature maps: three
//! conv3x3 -> batchnorm -> ReLU blocks with progressively narrower channels,
//! a CBAM module after each block, global average pooling and a linear
//! classifier to five grade logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cbam::{cbam_backward, cbam_forward, CbamCache, CbamParams};
use super::{uniform_init, GradeLogits, Grads, Mode, Parameters};
use crate::error::{Error, Result};
use crate::grade::NUM_GRADES;
use crate::tensor::{
    batchnorm2d, batchnorm2d_backward, conv2d, conv2d_backward, global_avg_pool,
    global_avg_pool_backward, linear, linear_backward, relu, relu_backward, BatchNormCache,
    BatchNormConfig, BatchStats, BnMode, RunningStats, Tensor,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FcnConfig {
    pub in_channels: usize,
    /// Output channels of each conv block, non-increasing.
    pub widths: Vec<usize>,
    pub kernel_size: usize,
    pub reduction: usize,
    /// Whether a CBAM module follows each block.
    pub cbam_after: Vec<bool>,
    pub batchnorm: BatchNormConfig,
}

impl FcnConfig {
    /// Widths C, C/2, C/4 with CBAM after every block.
    pub fn for_channels(in_channels: usize) -> Self {
        FcnConfig {
            in_channels,
            widths: vec![in_channels, in_channels / 2, in_channels / 4],
            kernel_size: 3,
            reduction: 16,
            cbam_after: vec![true; 3],
            batchnorm: BatchNormConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != 3 {
            return Err(Error::invalid(format!(
                "FCN head has three conv blocks, got {} widths",
                self.widths.len()
            )));
        }
        if self.cbam_after.len() != self.widths.len() {
            return Err(Error::invalid(
                "cbam_after needs one flag per conv block",
            ));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::invalid("conv kernel size must be odd"));
        }
        let mut prev = self.in_channels;
        for &w in &self.widths {
            if w == 0 || w > prev {
                return Err(Error::invalid(format!(
                    "block widths must be positive and non-increasing, got {} -> {:?}",
                    self.in_channels, self.widths
                )));
            }
            prev = w;
        }
        for (&w, &on) in self.widths.iter().zip(&self.cbam_after) {
            if on && (self.reduction == 0 || w % self.reduction != 0) {
                return Err(Error::invalid(format!(
                    "CBAM reduction ratio {} must divide block width {w}",
                    self.reduction
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub conv_weight: Tensor,
    pub conv_bias: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    pub running: RunningStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FcnHeadParams {
    pub config: FcnConfig,
    pub blocks: Vec<ConvBlock>,
    pub cbam: Vec<Option<CbamParams>>,
    /// `C_last x 5`.
    pub classifier_weight: Tensor,
    pub classifier_bias: Tensor,
}

struct BlockCache {
    input: Tensor,
    conv_out_shape: Vec<usize>,
    bn: BatchNormCache,
    bn_out: Tensor,
    cbam: Option<CbamCache>,
}

pub struct FcnCache {
    blocks: Vec<BlockCache>,
    last_map_shape: Vec<usize>,
    pooled: Tensor,
}

impl FcnCache {
    /// Spatial gates of each CBAM module, in block order.
    pub fn spatial_gates(&self) -> Vec<&Tensor> {
        self.blocks
            .iter()
            .filter_map(|b| b.cbam.as_ref().map(|c| c.spatial_gate()))
            .collect()
    }
}

pub struct FcnForward {
    pub logits: GradeLogits,
    pub cache: FcnCache,
    /// Per-block batch statistics (train mode only).
    pub batch_stats: Vec<BatchStats>,
}

impl FcnHeadParams {
    pub fn init<R: Rng + ?Sized>(config: FcnConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let k = config.kernel_size;
        let mut blocks = Vec::new();
        let mut cbam = Vec::new();
        let mut c_in = config.in_channels;
        for (&w, &on) in config.widths.iter().zip(&config.cbam_after) {
            let fan = c_in * k * k;
            blocks.push(ConvBlock {
                conv_weight: uniform_init(&[w, c_in, k, k], fan, rng),
                conv_bias: uniform_init(&[w], fan, rng),
                bn_gamma: Tensor::full(&[w], 1.0),
                bn_beta: Tensor::zeros(&[w]),
                running: RunningStats::new(w),
            });
            cbam.push(if on {
                Some(CbamParams::init(w, config.reduction, rng)?)
            } else {
                None
            });
            c_in = w;
        }
        Ok(FcnHeadParams {
            classifier_weight: uniform_init(&[c_in, NUM_GRADES], c_in, rng),
            classifier_bias: uniform_init(&[NUM_GRADES], c_in, rng),
            config,
            blocks,
            cbam,
        })
    }

    fn padding(&self) -> usize {
        self.config.kernel_size / 2
    }

    /// Pure forward pass; train mode reports batch statistics instead of
    /// mutating the running averages (see [`FcnHeadParams::update_running_stats`]).
    pub fn forward(&self, featmap: &Tensor, mode: Mode) -> Result<FcnForward> {
        let [_, c, _, _] = featmap.dims4("fcn_head_forward")?;
        if c != self.config.in_channels {
            return Err(Error::shape(
                "fcn_head_forward",
                format!(
                    "feature map has {c} channels, head expects {}",
                    self.config.in_channels
                ),
            ));
        }
        let mut x = featmap.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut stats = Vec::new();
        for (block, cbam) in self.blocks.iter().zip(&self.cbam) {
            let input = x;
            let conv_out = conv2d(&input, &block.conv_weight, &block.conv_bias, 1, self.padding())?;
            let bn_mode = match mode {
                Mode::Train => BnMode::Train,
                Mode::Eval => BnMode::Eval(&block.running),
            };
            let bn = batchnorm2d(
                &conv_out,
                &block.bn_gamma,
                &block.bn_beta,
                bn_mode,
                self.config.batchnorm,
            )?;
            stats.extend(bn.batch_stats);
            let act = relu(&bn.output);
            let (out, cbam_cache) = match cbam {
                Some(p) => {
                    let (y, cache) = cbam_forward(&act, p)?;
                    (y, Some(cache))
                }
                None => (act, None),
            };
            caches.push(BlockCache {
                input,
                conv_out_shape: conv_out.shape().to_vec(),
                bn: bn.cache,
                bn_out: bn.output,
                cbam: cbam_cache,
            });
            x = out;
        }
        let pooled = global_avg_pool(&x)?;
        let logits = linear(&pooled, &self.classifier_weight, &self.classifier_bias)?;
        Ok(FcnForward {
            logits: GradeLogits::new(logits)?,
            cache: FcnCache {
                blocks: caches,
                last_map_shape: x.shape().to_vec(),
                pooled,
            },
            batch_stats: stats,
        })
    }

    pub fn logits(&self, featmap: &Tensor) -> Result<GradeLogits> {
        Ok(self.forward(featmap, Mode::Eval)?.logits)
    }

    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        let momentum = self.config.batchnorm.momentum;
        for (block, s) in self.blocks.iter_mut().zip(stats) {
            block.running.update(s, momentum);
        }
    }

    /// Parameter gradients (and the feature-map gradient under `"input"`)
    /// for upstream gradient `d_logits`.
    pub fn backward(&self, cache: &FcnCache, d_logits: &Tensor) -> Result<Grads> {
        let mut grads = Grads::new();
        let g = linear_backward(&cache.pooled, &self.classifier_weight, d_logits)?;
        let mut gp = g.d_params;
        grads.insert("classifier.weight".into(), gp.remove("weight").expect("weight"));
        grads.insert("classifier.bias".into(), gp.remove("bias").expect("bias"));
        let mut d = global_avg_pool_backward(&cache.last_map_shape, &g.d_input.expect("input"))?;

        for (i, (block, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            if let (Some(p), Some(cc)) = (&self.cbam[i], &bc.cbam) {
                let g = cbam_backward(p, cc, &d)?;
                for (name, t) in g.d_params {
                    grads.insert(format!("block{i}.cbam.{name}"), t);
                }
                d = g.d_input.expect("input");
            }
            let d_bn = relu_backward(&bc.bn_out, &d)?;
            let g = batchnorm2d_backward(&bc.bn, &d_bn)?;
            debug_assert_eq!(g.d_input.as_ref().map(|t| t.shape().to_vec()), Some(bc.conv_out_shape.clone()));
            let mut gp = g.d_params;
            grads.insert(format!("block{i}.bn.gamma"), gp.remove("gamma").expect("gamma"));
            grads.insert(format!("block{i}.bn.beta"), gp.remove("beta").expect("beta"));
            let g = conv2d_backward(
                &bc.input,
                &block.conv_weight,
                1,
                self.padding(),
                &g.d_input.expect("input"),
            )?;
            let mut gp = g.d_params;
            grads.insert(format!("block{i}.conv.weight"), gp.remove("weight").expect("weight"));
            grads.insert(format!("block{i}.conv.bias"), gp.remove("bias").expect("bias"));
            d = g.d_input.expect("input");
        }
        grads.insert("input".into(), d);
        Ok(grads)
    }

    /// Non-trainable state (batchnorm running averages), by name.
    pub fn buffers(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let c = b.running.mean.len();
            out.push((
                format!("block{i}.bn.running_mean"),
                Tensor::new(vec![c], b.running.mean.clone()).expect("c >= 1"),
            ));
            out.push((
                format!("block{i}.bn.running_var"),
                Tensor::new(vec![c], b.running.var.clone()).expect("c >= 1"),
            ));
        }
        out
    }

    pub fn set_buffer(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let parsed = name
            .strip_prefix("block")
            .and_then(|rest| rest.split_once(".bn."))
            .and_then(|(i, field)| i.parse::<usize>().ok().map(|i| (i, field)));
        let Some((i, field)) = parsed else {
            return Err(Error::invalid(format!("unknown buffer {name}")));
        };
        let block = self
            .blocks
            .get_mut(i)
            .ok_or_else(|| Error::invalid(format!("unknown buffer {name}")))?;
        let target = match field {
            "running_mean" => &mut block.running.mean,
            "running_var" => &mut block.running.var,
            _ => return Err(Error::invalid(format!("unknown buffer {name}"))),
        };
        if target.len() != value.len() {
            return Err(Error::shape(
                "set_buffer",
                format!("{name} holds {} values, got {}", target.len(), value.len()),
            ));
        }
        target.copy_from_slice(value.data());
        Ok(())
    }
}

impl Parameters for FcnHeadParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, (b, c)) in self.blocks.iter().zip(&self.cbam).enumerate() {
            f(&format!("block{i}.conv.weight"), &b.conv_weight);
            f(&format!("block{i}.conv.bias"), &b.conv_bias);
            f(&format!("block{i}.bn.gamma"), &b.bn_gamma);
            f(&format!("block{i}.bn.beta"), &b.bn_beta);
            if let Some(c) = c {
                for (name, t) in c.tensors() {
                    f(&format!("block{i}.cbam.{name}"), t);
                }
            }
        }
        f("classifier.weight", &self.classifier_weight);
        f("classifier.bias", &self.classifier_bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, (b, c)) in self.blocks.iter_mut().zip(&mut self.cbam).enumerate() {
            f(&format!("block{i}.conv.weight"), &mut b.conv_weight);
            f(&format!("block{i}.conv.bias"), &mut b.conv_bias);
            f(&format!("block{i}.bn.gamma"), &mut b.bn_gamma);
            f(&format!("block{i}.bn.beta"), &mut b.bn_beta);
            if let Some(c) = c {
                for (name, t) in c.tensors_mut() {
                    f(&format!("block{i}.cbam.{name}"), t);
                }
            }
        }
        f("classifier.weight", &mut self.classifier_weight);
        f("classifier.bias", &mut self.classifier_bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> FcnConfig {
        FcnConfig {
            reduction: 4,
            ..FcnConfig::for_channels(16)
        }
    }

    #[test]
    fn default_widths_halve() {
        let c = FcnConfig::for_channels(64);
        assert_eq!(c.widths, vec![64, 32, 16]);
        c.validate().unwrap();
    }

    #[test]
    fn increasing_widths_are_rejected() {
        let mut c = tiny();
        c.widths = vec![8, 16, 4];
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_input_and_zero_bias_tie_all_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = FcnHeadParams::init(tiny(), &mut rng).unwrap();
        p.classifier_bias = Tensor::zeros(&[NUM_GRADES]);
        for b in &mut p.blocks {
            b.conv_bias = Tensor::zeros(b.conv_bias.shape());
        }
        let out = p.logits(&Tensor::zeros(&[2, 16, 4, 4])).unwrap();
        for r in 0..2 {
            let row = out.row(r);
            assert!(row.iter().all(|&v| v == row[0]), "{row:?}");
        }
    }

    #[test]
    fn eval_mode_is_deterministic_per_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = FcnHeadParams::init(tiny(), &mut rng).unwrap();
        let one = Tensor::randn(&[1, 16, 4, 4], 1.0, &mut rng);
        let batch = Tensor::stack(&[&one.clone().reshape(&[16, 4, 4]).unwrap(); 2]).unwrap();
        let out = p.logits(&batch).unwrap();
        assert_eq!(out.row(0), out.row(1));
        assert_eq!(out.values().shape(), &[2, 5]);
    }

    #[test]
    fn running_stats_move_only_on_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = FcnHeadParams::init(tiny(), &mut rng).unwrap();
        let x = Tensor::randn(&[2, 16, 4, 4], 1.0, &mut rng);
        let before = p.buffers();
        let fwd = p.forward(&x, Mode::Train).unwrap();
        assert_eq!(p.buffers(), before);
        assert_eq!(fwd.batch_stats.len(), 3);
        p.update_running_stats(&fwd.batch_stats);
        assert_ne!(p.buffers(), before);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = FcnHeadParams::init(tiny(), &mut rng).unwrap();
        assert!(p.logits(&Tensor::zeros(&[1, 8, 4, 4])).is_err());
    }
}
