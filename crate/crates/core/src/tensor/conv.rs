use super::{LayerGrads, Tensor};
use crate::error::{Error, Result};
use crate::parallel::Backend;

/// Output extent of a convolution along one axis.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

struct Geometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    h_out: usize,
    w_out: usize,
    stride: usize,
    padding: usize,
}

fn geometry(input: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Geometry> {
    let [n, c_in, h, w] = input.dims4("conv2d")?;
    let [c_out, wi, kh, kw] = weight.dims4("conv2d")?;
    if wi != c_in {
        return Err(Error::shape(
            "conv2d",
            format!("input channels {c_in} != weight input channels {wi}"),
        ));
    }
    if kh != kw {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be square, got {kh}x{kw}"),
        ));
    }
    if stride == 0 {
        return Err(Error::shape("conv2d", "stride must be >= 1"));
    }
    if kh > h + 2 * padding {
        return Err(Error::shape(
            "conv2d",
            format!("kernel height {kh} exceeds padded input height {}", h + 2 * padding),
        ));
    }
    if kw > w + 2 * padding {
        return Err(Error::shape(
            "conv2d",
            format!("kernel width {kw} exceeds padded input width {}", w + 2 * padding),
        ));
    }
    Ok(Geometry {
        n,
        c_in,
        h,
        w,
        c_out,
        k: kh,
        h_out: conv_output_size(h, kh, stride, padding),
        w_out: conv_output_size(w, kw, stride, padding),
        stride,
        padding,
    })
}

/// Source coordinate for output position `o` and kernel tap `k`, if inside the input.
#[inline]
fn source(o: usize, k: usize, stride: usize, padding: usize, extent: usize) -> Option<usize> {
    let pos = (o * stride + k).checked_sub(padding)?;
    (pos < extent).then_some(pos)
}

pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    conv2d_with(Backend::default(), input, weight, bias, stride, padding)
}

/// Cross-correlation over NCHW input with an `O x I x K x K` kernel.
pub fn conv2d_with(
    backend: Backend,
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = geometry(input, weight, stride, padding)?;
    if bias.shape() != [g.c_out] {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {:?} != [{}]", bias.shape(), g.c_out),
        ));
    }
    let plane = g.h_out * g.w_out;
    let mut out = vec![0.0; g.n * g.c_out * plane];
    let x = input.data();
    let wt = weight.data();
    let b = bias.data();
    backend.fill_chunks(&mut out, plane, |idx, dst| {
        let (n, o) = (idx / g.c_out, idx % g.c_out);
        dst.fill(b[o]);
        for i in 0..g.c_in {
            let src = &x[(n * g.c_in + i) * g.h * g.w..][..g.h * g.w];
            let ker = &wt[(o * g.c_in + i) * g.k * g.k..][..g.k * g.k];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let kv = ker[ky * g.k + kx];
                    for y in 0..g.h_out {
                        let Some(sy) = source(y, ky, g.stride, g.padding, g.h) else {
                            continue;
                        };
                        for xo in 0..g.w_out {
                            if let Some(sx) = source(xo, kx, g.stride, g.padding, g.w) {
                                dst[y * g.w_out + xo] += kv * src[sy * g.w + sx];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(vec![g.n, g.c_out, g.h_out, g.w_out], out)
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    d_out: &Tensor,
) -> Result<LayerGrads> {
    conv2d_backward_with(Backend::default(), input, weight, stride, padding, d_out)
}

/// Gradients of a convolution w.r.t. input, `weight` and `bias`.
pub fn conv2d_backward_with(
    backend: Backend,
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    d_out: &Tensor,
) -> Result<LayerGrads> {
    let g = geometry(input, weight, stride, padding)?;
    let expected = [g.n, g.c_out, g.h_out, g.w_out];
    if d_out.shape() != expected {
        return Err(Error::shape(
            "conv2d_backward",
            format!("upstream gradient {:?} != output shape {expected:?}", d_out.shape()),
        ));
    }
    let x = input.data();
    let wt = weight.data();
    let dy = d_out.data();
    let plane_in = g.h * g.w;
    let plane_out = g.h_out * g.w_out;
    let kk = g.k * g.k;

    let mut d_bias = vec![0.0; g.c_out];
    for (o, db) in d_bias.iter_mut().enumerate() {
        for n in 0..g.n {
            *db += dy[(n * g.c_out + o) * plane_out..][..plane_out]
                .iter()
                .sum::<f64>();
        }
    }

    let mut d_weight = vec![0.0; g.c_out * g.c_in * kk];
    backend.fill_chunks(&mut d_weight, g.c_in * kk, |o, dst| {
        for n in 0..g.n {
            let up = &dy[(n * g.c_out + o) * plane_out..][..plane_out];
            for i in 0..g.c_in {
                let src = &x[(n * g.c_in + i) * plane_in..][..plane_in];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let mut acc = 0.0;
                        for y in 0..g.h_out {
                            let Some(sy) = source(y, ky, g.stride, g.padding, g.h) else {
                                continue;
                            };
                            for xo in 0..g.w_out {
                                if let Some(sx) = source(xo, kx, g.stride, g.padding, g.w) {
                                    acc += up[y * g.w_out + xo] * src[sy * g.w + sx];
                                }
                            }
                        }
                        dst[i * kk + ky * g.k + kx] += acc;
                    }
                }
            }
        }
    });

    let mut d_input = vec![0.0; g.n * g.c_in * plane_in];
    backend.fill_chunks(&mut d_input, plane_in, |idx, dst| {
        let (n, i) = (idx / g.c_in, idx % g.c_in);
        for o in 0..g.c_out {
            let up = &dy[(n * g.c_out + o) * plane_out..][..plane_out];
            let ker = &wt[(o * g.c_in + i) * kk..][..kk];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let kv = ker[ky * g.k + kx];
                    for y in 0..g.h_out {
                        let Some(sy) = source(y, ky, g.stride, g.padding, g.h) else {
                            continue;
                        };
                        for xo in 0..g.w_out {
                            if let Some(sx) = source(xo, kx, g.stride, g.padding, g.w) {
                                dst[sy * g.w + sx] += kv * up[y * g.w_out + xo];
                            }
                        }
                    }
                }
            }
        }
    });

    let mut grads = LayerGrads {
        d_input: Some(Tensor::new(input.shape().to_vec(), d_input)?),
        ..Default::default()
    };
    grads.d_params.insert(
        "weight".into(),
        Tensor::new(weight.shape().to_vec(), d_weight)?,
    );
    grads
        .d_params
        .insert("bias".into(), Tensor::new(vec![g.c_out], d_bias)?);
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_kernel_returns_input() {
        let x = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 - 4.0);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn one_by_one_kernel_is_per_pixel_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 2, 1, 1], 1.0, &mut rng);
        let b = Tensor::zeros(&[3]);
        let y = conv2d(&x, &w, &b, 1, 0).unwrap();
        // Oracle: out[o, p] = sum_i W[o, i] * x[i, p]
        for o in 0..3 {
            for p in 0..16 {
                let expected: f64 = (0..2)
                    .map(|i| w.data()[o * 2 + i] * x.data()[i * 16 + p])
                    .sum();
                assert!((y.data()[o * 16 + p] - expected).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn output_geometry_and_errors() {
        let x = Tensor::zeros(&[2, 3, 7, 5]);
        let w = Tensor::zeros(&[4, 3, 3, 3]);
        let y = conv2d(&x, &w, &Tensor::zeros(&[4]), 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 3]);

        let bad = Tensor::zeros(&[4, 2, 3, 3]);
        let err = conv2d(&x, &bad, &Tensor::zeros(&[4]), 1, 0).unwrap_err();
        assert!(err.to_string().contains("input channels 3"), "{err}");

        let big = Tensor::zeros(&[1, 3, 9, 9]);
        let err = conv2d(&x, &big, &Tensor::zeros(&[1]), 1, 0).unwrap_err();
        assert!(err.to_string().contains("kernel height"), "{err}");
    }

    #[test]
    fn sum_output_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[2, 2, 5, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[3], 1.0, &mut rng);
        let y = conv2d(&x, &w, &b, 2, 1).unwrap();
        let ones = Tensor::full(y.shape(), 1.0);
        let g = conv2d_backward(&x, &w, 2, 1, &ones).unwrap();
        let numeric = gradcheck::central_difference(
            |wd| {
                let w = Tensor::new(w.shape().to_vec(), wd.to_vec()).unwrap();
                conv2d(&x, &w, &b, 2, 1).unwrap().sum()
            },
            w.data(),
            1e-5,
        );
        let err = gradcheck::relative_error(g.d_params["weight"].data(), &numeric);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn sequential_and_default_backends_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[3, 4, 6, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[5, 4, 3, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[5], 1.0, &mut rng);
        let a = conv2d_with(Backend::Sequential, &x, &w, &b, 1, 1).unwrap();
        let p = conv2d_with(Backend::default(), &x, &w, &b, 1, 1).unwrap();
        assert_eq!(a, p);
        let ga = conv2d_backward_with(Backend::Sequential, &x, &w, 1, 1, &a).unwrap();
        let gp = conv2d_backward_with(Backend::default(), &x, &w, 1, 1, &a).unwrap();
        assert_eq!(ga.d_input, gp.d_input);
        assert_eq!(ga.d_params["weight"], gp.d_params["weight"]);
    }
}
