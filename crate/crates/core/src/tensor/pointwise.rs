use super::Tensor;
use crate::error::{Error, Result};

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = v.max(0.0);
    }
    y
}

/// Gradient of ReLU given its input; zero at the kink.
pub fn relu_backward(input: &Tensor, d_out: &Tensor) -> Result<Tensor> {
    input.expect_same_shape(d_out, "relu_backward")?;
    let mut d = d_out.clone();
    for (g, &x) in d.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(d)
}

/// Largest double strictly below 1.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function, clamped so the result stays strictly inside (0, 1) in
/// double precision.
pub fn sigmoid_scalar(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, BELOW_ONE)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = sigmoid_scalar(*v);
    }
    y
}

/// Gradient of the sigmoid given its output.
pub fn sigmoid_backward(output: &Tensor, d_out: &Tensor) -> Result<Tensor> {
    output.expect_same_shape(d_out, "sigmoid_backward")?;
    let mut d = d_out.clone();
    for (g, &y) in d.data_mut().iter_mut().zip(output.data()) {
        *g *= y * (1.0 - y);
    }
    Ok(d)
}

fn broadcast_index(shape: &[usize; 4], gate: &[usize; 4]) -> Result<[usize; 4]> {
    // strides of the gate, zero along broadcast axes
    let mut strides = [0usize; 4];
    let mut acc = 1;
    for d in (0..4).rev() {
        if gate[d] == shape[d] {
            strides[d] = acc;
        } else if gate[d] != 1 {
            return Err(Error::shape(
                "mul_broadcast",
                format!("gate dimension {d} has size {} but map has {}", gate[d], shape[d]),
            ));
        }
        acc *= gate[d];
    }
    Ok(strides)
}

/// `x * gate` where each gate dimension either matches `x` or is 1.
pub fn mul_broadcast(x: &Tensor, gate: &Tensor) -> Result<Tensor> {
    let xs = x.dims4("mul_broadcast")?;
    let gs = gate.dims4("mul_broadcast")?;
    let strides = broadcast_index(&xs, &gs)?;
    let mut y = x.clone();
    let g = gate.data();
    let mut i = 0;
    let out = y.data_mut();
    for a in 0..xs[0] {
        for b in 0..xs[1] {
            for c in 0..xs[2] {
                for d in 0..xs[3] {
                    out[i] *= g[a * strides[0] + b * strides[1] + c * strides[2] + d * strides[3]];
                    i += 1;
                }
            }
        }
    }
    Ok(y)
}

/// Returns `(d_x, d_gate)` for `y = x * gate`.
pub fn mul_broadcast_backward(
    x: &Tensor,
    gate: &Tensor,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    x.expect_same_shape(d_out, "mul_broadcast_backward")?;
    let xs = x.dims4("mul_broadcast_backward")?;
    let gs = gate.dims4("mul_broadcast_backward")?;
    let strides = broadcast_index(&xs, &gs)?;
    let mut dx = vec![0.0; x.len()];
    let mut dg = vec![0.0; gate.len()];
    let (xv, gv, dy) = (x.data(), gate.data(), d_out.data());
    let mut i = 0;
    for a in 0..xs[0] {
        for b in 0..xs[1] {
            for c in 0..xs[2] {
                for d in 0..xs[3] {
                    let gi = a * strides[0] + b * strides[1] + c * strides[2] + d * strides[3];
                    dx[i] = dy[i] * gv[gi];
                    dg[gi] += dy[i] * xv[i];
                    i += 1;
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(gate.shape().to_vec(), dg)?,
    ))
}

/// Per-channel spatial mean, keeping an `N x C x 1 x 1` shape.
pub fn adaptive_avg_pool_1x1(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4("adaptive_avg_pool_1x1")?;
    let pooled = global_avg_pool(x)?;
    Tensor::new(vec![n, c, 1, 1], pooled.into_data()).map_err(|_| {
        Error::shape("adaptive_avg_pool_1x1", format!("bad input {n}x{c}x{h}x{w}"))
    })
}

pub fn adaptive_avg_pool_1x1_backward(input_shape: &[usize], d_out: &Tensor) -> Result<Tensor> {
    let [n, c, _, _] = d_out.dims4("adaptive_avg_pool_1x1_backward")?;
    let flat = Tensor::new(vec![n, c], d_out.data().to_vec())?;
    global_avg_pool_backward(input_shape, &flat)
}

/// Per-channel spatial mean as an `N x C` matrix.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4("global_avg_pool")?;
    let plane = h * w;
    let data = x
        .data()
        .chunks(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    Tensor::new(vec![n, c], data)
}

pub fn global_avg_pool_backward(input_shape: &[usize], d_out: &Tensor) -> Result<Tensor> {
    let &[n, c, h, w] = input_shape else {
        return Err(Error::shape(
            "global_avg_pool_backward",
            format!("expected NCHW input shape, got {input_shape:?}"),
        ));
    };
    if d_out.shape() != [n, c] {
        return Err(Error::shape(
            "global_avg_pool_backward",
            format!("upstream gradient {:?} != [{n}, {c}]", d_out.shape()),
        ));
    }
    let plane = h * w;
    let mut dx = Vec::with_capacity(n * c * plane);
    for &g in d_out.data() {
        dx.extend(std::iter::repeat_n(g / plane as f64, plane));
    }
    Tensor::new(input_shape.to_vec(), dx)
}
