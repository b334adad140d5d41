//! Convolutional block attention: a channel gate (pooled 1x1 bottleneck with
//! sigmoid) followed by a spatial gate (7x7 convolution over the channel-gated
//! map, C channels in, 1 out, sigmoid). Both gates multiply the feature map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{uniform_init, Grads};
use crate::error::{Error, Result};
use crate::tensor::{
    adaptive_avg_pool_1x1, adaptive_avg_pool_1x1_backward, conv2d, conv2d_backward,
    mul_broadcast, mul_broadcast_backward, relu, relu_backward, sigmoid, sigmoid_backward,
    LayerGrads, Tensor,
};

pub const SPATIAL_KERNEL: usize = 7;
const SPATIAL_PADDING: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CbamParams {
    pub channels: usize,
    pub reduction: usize,
    pub reduce_weight: Tensor,
    pub reduce_bias: Tensor,
    pub expand_weight: Tensor,
    pub expand_bias: Tensor,
    pub spatial_weight: Tensor,
    pub spatial_bias: Tensor,
}

impl CbamParams {
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        let hidden = hidden_width(channels, reduction)?;
        Ok(CbamParams {
            channels,
            reduction,
            reduce_weight: Tensor::zeros(&[hidden, channels, 1, 1]),
            reduce_bias: Tensor::zeros(&[hidden]),
            expand_weight: Tensor::zeros(&[channels, hidden, 1, 1]),
            expand_bias: Tensor::zeros(&[channels]),
            spatial_weight: Tensor::zeros(&[1, channels, SPATIAL_KERNEL, SPATIAL_KERNEL]),
            spatial_bias: Tensor::zeros(&[1]),
        })
    }

    pub fn init<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        let hidden = hidden_width(channels, reduction)?;
        let spatial_fan = channels * SPATIAL_KERNEL * SPATIAL_KERNEL;
        Ok(CbamParams {
            channels,
            reduction,
            reduce_weight: uniform_init(&[hidden, channels, 1, 1], channels, rng),
            reduce_bias: uniform_init(&[hidden], channels, rng),
            expand_weight: uniform_init(&[channels, hidden, 1, 1], hidden, rng),
            expand_bias: uniform_init(&[channels], hidden, rng),
            spatial_weight: uniform_init(
                &[1, channels, SPATIAL_KERNEL, SPATIAL_KERNEL],
                spatial_fan,
                rng,
            ),
            spatial_bias: uniform_init(&[1], spatial_fan, rng),
        })
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.reduction
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 6] {
        [
            ("reduce_weight", &self.reduce_weight),
            ("reduce_bias", &self.reduce_bias),
            ("expand_weight", &self.expand_weight),
            ("expand_bias", &self.expand_bias),
            ("spatial_weight", &self.spatial_weight),
            ("spatial_bias", &self.spatial_bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 6] {
        [
            ("reduce_weight", &mut self.reduce_weight),
            ("reduce_bias", &mut self.reduce_bias),
            ("expand_weight", &mut self.expand_weight),
            ("expand_bias", &mut self.expand_bias),
            ("spatial_weight", &mut self.spatial_weight),
            ("spatial_bias", &mut self.spatial_bias),
        ]
    }
}

fn hidden_width(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || channels % reduction != 0 {
        return Err(Error::invalid(format!(
            "CBAM reduction ratio {reduction} must divide channel count {channels}"
        )));
    }
    Ok(channels / reduction)
}

#[derive(Clone, Debug)]
pub struct CbamCache {
    input: Tensor,
    pooled: Tensor,
    hidden_pre: Tensor,
    hidden: Tensor,
    channel_gate: Tensor,
    channel_gated: Tensor,
    spatial_gate: Tensor,
}

impl CbamCache {
    /// Channel gate, `N x C x 1 x 1`.
    pub fn channel_gate(&self) -> &Tensor {
        &self.channel_gate
    }

    /// Spatial gate, `N x 1 x H x W`.
    pub fn spatial_gate(&self) -> &Tensor {
        &self.spatial_gate
    }
}

pub fn cbam_forward(x: &Tensor, p: &CbamParams) -> Result<(Tensor, CbamCache)> {
    let [_, c, _, _] = x.dims4("cbam_forward")?;
    if c != p.channels {
        return Err(Error::shape(
            "cbam_forward",
            format!("input has {c} channels, CBAM expects {}", p.channels),
        ));
    }
    let pooled = adaptive_avg_pool_1x1(x)?;
    let hidden_pre = conv2d(&pooled, &p.reduce_weight, &p.reduce_bias, 1, 0)?;
    let hidden = relu(&hidden_pre);
    let channel_gate = sigmoid(&conv2d(&hidden, &p.expand_weight, &p.expand_bias, 1, 0)?);
    let channel_gated = mul_broadcast(x, &channel_gate)?;
    let spatial_gate = sigmoid(&conv2d(
        &channel_gated,
        &p.spatial_weight,
        &p.spatial_bias,
        1,
        SPATIAL_PADDING,
    )?);
    let out = mul_broadcast(&channel_gated, &spatial_gate)?;
    Ok((
        out,
        CbamCache {
            input: x.clone(),
            pooled,
            hidden_pre,
            hidden,
            channel_gate,
            channel_gated,
            spatial_gate,
        },
    ))
}

/// Gradients w.r.t. the input and the six CBAM tensors.
pub fn cbam_backward(p: &CbamParams, cache: &CbamCache, d_out: &Tensor) -> Result<LayerGrads> {
    let mut d_params = Grads::new();

    let (mut d_gated, d_spatial_gate) =
        mul_broadcast_backward(&cache.channel_gated, &cache.spatial_gate, d_out)?;
    let d_spatial_pre = sigmoid_backward(&cache.spatial_gate, &d_spatial_gate)?;
    let g = conv2d_backward(
        &cache.channel_gated,
        &p.spatial_weight,
        1,
        SPATIAL_PADDING,
        &d_spatial_pre,
    )?;
    d_gated.add_assign(g.d_input.as_ref().expect("conv input grad"))?;
    let mut g = g.d_params;
    d_params.insert("spatial_weight".into(), g.remove("weight").expect("weight"));
    d_params.insert("spatial_bias".into(), g.remove("bias").expect("bias"));

    let (mut d_x, d_channel_gate) =
        mul_broadcast_backward(&cache.input, &cache.channel_gate, &d_gated)?;
    let d_expand_pre = sigmoid_backward(&cache.channel_gate, &d_channel_gate)?;
    let g = conv2d_backward(&cache.hidden, &p.expand_weight, 1, 0, &d_expand_pre)?;
    let d_hidden = g.d_input.expect("conv input grad");
    let mut gp = g.d_params;
    d_params.insert("expand_weight".into(), gp.remove("weight").expect("weight"));
    d_params.insert("expand_bias".into(), gp.remove("bias").expect("bias"));

    let d_hidden_pre = relu_backward(&cache.hidden_pre, &d_hidden)?;
    let g = conv2d_backward(&cache.pooled, &p.reduce_weight, 1, 0, &d_hidden_pre)?;
    let d_pooled = g.d_input.expect("conv input grad");
    let mut gp = g.d_params;
    d_params.insert("reduce_weight".into(), gp.remove("weight").expect("weight"));
    d_params.insert("reduce_bias".into(), gp.remove("bias").expect("bias"));

    d_x.add_assign(&adaptive_avg_pool_1x1_backward(cache.input.shape(), &d_pooled)?)?;
    Ok(LayerGrads {
        d_input: Some(d_x),
        d_params,
    })
}

/// The spatial attention map `N x 1 x H x W` that CBAM applies to `x`.
pub fn export_spatial_gate(x: &Tensor, p: &CbamParams) -> Result<Tensor> {
    let (_, cache) = cbam_forward(x, p)?;
    Ok(cache.spatial_gate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_quarter_the_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(&[2, 16, 3, 3], 1.0, &mut rng);
        let p = CbamParams::zeros(16, 16).unwrap();
        let (y, _) = cbam_forward(&x, &p).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, 0.25 * b);
        }
        let gate = export_spatial_gate(&x, &p).unwrap();
        assert_eq!(gate.shape(), &[2, 1, 3, 3]);
        assert!(gate.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn reduction_must_divide_channels() {
        assert!(CbamParams::zeros(8, 16).is_err());
        assert!(CbamParams::zeros(32, 16).is_ok());
    }

    #[test]
    fn output_never_exceeds_input_magnitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = CbamParams::init(16, 4, &mut rng).unwrap();
        let x = Tensor::randn(&[2, 16, 5, 5], 10.0, &mut rng);
        let (y, _) = cbam_forward(&x, &p).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!(a.abs() <= b.abs());
        }
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let p = CbamParams::zeros(16, 16).unwrap();
        assert!(cbam_forward(&Tensor::zeros(&[1, 8, 2, 2]), &p).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = CbamParams::init(16, 16, &mut rng).unwrap();
        let x = Tensor::randn(&[1, 16, 4, 4], 1.0, &mut rng);
        let proj = Tensor::randn(x.shape(), 1.0, &mut rng);
        let (_, cache) = cbam_forward(&x, &p).unwrap();
        let g = cbam_backward(&p, &cache, &proj).unwrap();
        let numeric = gradcheck::central_difference(
            |xd| {
                let x = Tensor::new(x.shape().to_vec(), xd.to_vec()).unwrap();
                cbam_forward(&x, &p).unwrap().0.dot(&proj).unwrap()
            },
            x.data(),
            1e-5,
        );
        let err = gradcheck::relative_error(g.d_input.unwrap().data(), &numeric);
        assert!(err < 1e-4, "relative error {err}");
    }
}
