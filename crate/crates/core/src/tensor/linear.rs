use super::{LayerGrads, Tensor};
use crate::error::{Error, Result};

/// `input (N x D) . weight (D x M) + bias (M)`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [n, d] = input.dims2("linear")?;
    let [wd, m] = weight.dims2("linear")?;
    if wd != d {
        return Err(Error::shape(
            "linear",
            format!("input width {d} != weight rows {wd}"),
        ));
    }
    if bias.shape() != [m] {
        return Err(Error::shape(
            "linear",
            format!("bias shape {:?} != [{m}]", bias.shape()),
        ));
    }
    let (x, w, b) = (input.data(), weight.data(), bias.data());
    let mut out = Vec::with_capacity(n * m);
    for r in 0..n {
        for j in 0..m {
            let mut acc = b[j];
            for k in 0..d {
                acc += x[r * d + k] * w[k * m + j];
            }
            out.push(acc);
        }
    }
    Tensor::new(vec![n, m], out)
}

pub fn linear_backward(input: &Tensor, weight: &Tensor, d_out: &Tensor) -> Result<LayerGrads> {
    let [n, d] = input.dims2("linear_backward")?;
    let [_, m] = weight.dims2("linear_backward")?;
    if d_out.shape() != [n, m] {
        return Err(Error::shape(
            "linear_backward",
            format!("upstream gradient {:?} != [{n}, {m}]", d_out.shape()),
        ));
    }
    let (x, w, dy) = (input.data(), weight.data(), d_out.data());
    let mut dx = vec![0.0; n * d];
    let mut dw = vec![0.0; d * m];
    let mut db = vec![0.0; m];
    for r in 0..n {
        for j in 0..m {
            let g = dy[r * m + j];
            db[j] += g;
            for k in 0..d {
                dx[r * d + k] += g * w[k * m + j];
                dw[k * m + j] += g * x[r * d + k];
            }
        }
    }
    let mut grads = LayerGrads {
        d_input: Some(Tensor::new(vec![n, d], dx)?),
        ..Default::default()
    };
    grads
        .d_params
        .insert("weight".into(), Tensor::new(vec![d, m], dw)?);
    grads.d_params.insert("bias".into(), Tensor::new(vec![m], db)?);
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_arithmetic() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![1], vec![5.0]).unwrap();
        assert_eq!(linear(&x, &w, &b).unwrap().data(), &[16.0]);
    }

    #[test]
    fn identity_weight() {
        let x = Tensor::from_fn(&[3, 2], |i| i as f64 * 0.5);
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(linear(&x, &w, &Tensor::zeros(&[2])).unwrap(), x);
    }

    #[test]
    fn dimension_mismatch() {
        let x = Tensor::zeros(&[1, 3]);
        let w = Tensor::zeros(&[2, 1]);
        assert!(linear(&x, &w, &Tensor::zeros(&[1])).is_err());
    }
}
