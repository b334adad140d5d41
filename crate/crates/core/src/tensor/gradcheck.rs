//! Central finite differences, used as the independent oracle for every
//! analytic backward pass.

/// Numeric gradient of `f` at `at` for every coordinate.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
    let all: Vec<usize> = (0..at.len()).collect();
    central_difference_at(f, at, &all, h)
}

/// Numeric partial derivatives of `f` at `at` for the selected coordinates.
pub fn central_difference_at(
    f: impl Fn(&[f64]) -> f64,
    at: &[f64],
    coords: &[usize],
    h: f64,
) -> Vec<f64> {
    let mut x = at.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = x[i];
            x[i] = orig + h;
            let plus = f(&x);
            x[i] = orig - h;
            let minus = f(&x);
            x[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Max-norm relative error `max|a - n| / max(|a|_inf, |n|_inf)`.
///
/// Returns 0 when both vectors are (numerically) zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let g = central_difference(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, -1.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
        assert!(relative_error(&[4.0, 3.0], &g) < 1e-8);
    }
}
