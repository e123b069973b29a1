//! Central finite differences, the slow reference for every analytic gradient.

use crate::tensor::Tensor;

/// Numeric gradient of `f` with respect to every scalar of every tensor in
/// `params`, by central differences `(f(w+eps) - f(w-eps)) / (2 eps)`.
pub fn finite_diff_grad<F>(mut f: F, params: &[Tensor<f64>], eps: f64) -> Vec<Tensor<f64>>
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        let mut g = Tensor::zeros(params[t].shape()).expect("shape already valid");
        for i in 0..params[t].len() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let plus = f(&work);
            work[t].data_mut()[i] = orig - eps;
            let minus = f(&work);
            work[t].data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * eps);
        }
        grads.push(g);
    }
    grads
}

/// `max|a - b| / max|b|`, the error measure used for gradient comparisons.
///
/// Returns the absolute error when `b` is identically zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error on different lengths");
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Elementwise probe objective `Σ y ⊙ r`; its gradient with respect to `y`
/// is exactly `r`, which turns any layer into a scalar function.
pub fn probe_objective(y: &Tensor<f64>, probe: &Tensor<f64>) -> f64 {
    y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{layer_backward_full, layer_forward, LayerSpec, ParamSet};

    #[test]
    fn quadratic_derivative() {
        let w = Tensor::new(vec![1], vec![3.0]).unwrap();
        let g = finite_diff_grad(|p| p[0].data()[0].powi(2), &[w], 1e-5);
        assert!((g[0].data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn zero_input_gives_zero_weight_gradient() {
        let spec = LayerSpec::Linear {
            in_features: 3,
            out_features: 2,
            bias: false,
        };
        let w = Tensor::from_f64(vec![2, 3], &[0.1, -0.4, 0.2, 0.7, 0.3, -0.9]).unwrap();
        let x = Tensor::zeros(&[2, 3]).unwrap();
        let probe = Tensor::from_f64(vec![2, 2], &[1.0, -2.0, 0.5, 3.0]).unwrap();
        let numeric = finite_diff_grad(
            |p| {
                let ps = ParamSet::from_values(vec![("weight", p[0].clone())]).unwrap();
                let (y, _) = layer_forward(&spec, Some(&ps), &x, 0).unwrap();
                probe_objective(&y, &probe)
            },
            std::slice::from_ref(&w),
            1e-5,
        );
        assert!(numeric[0].data().iter().all(|&v| v.abs() < 1e-12));

        let mut ps = ParamSet::from_values(vec![("weight", w)]).unwrap();
        let (_, cache) = layer_forward(&spec, Some(&ps), &x, 0).unwrap();
        layer_backward_full(&spec, Some(&mut ps), &probe, cache).unwrap();
        assert!(ps.grads()[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relative_error_cases() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0, 2.1], &[1.0, 2.0]) - 0.05).abs() < 1e-12);
        assert_eq!(relative_error(&[0.5], &[0.0]), 0.5);
    }
}
