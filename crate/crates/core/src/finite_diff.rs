//! Central-difference gradient oracles.

use crate::tensor::{Real, Tensor};

/// `(f(x + eps·e_i) − f(x − eps·e_i)) / 2eps` for every element `i`.
pub fn finite_diff_gradient<T, F>(f: F, at: &Tensor<T>, eps: f64) -> Tensor<T>
where
    T: Real,
    F: Fn(&Tensor<T>) -> f64,
{
    let indices: Vec<usize> = (0..at.len()).collect();
    let values = finite_diff_entries(f, at, &indices, eps);
    let mut out = at.zeros_like();
    for (d, v) in out.data_mut().iter_mut().zip(values) {
        *d = T::lit(v);
    }
    out
}

/// Central differences at selected flat indices only.
pub fn finite_diff_entries<T, F>(f: F, at: &Tensor<T>, indices: &[usize], eps: f64) -> Vec<f64>
where
    T: Real,
    F: Fn(&Tensor<T>) -> f64,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut x = at.clone();
    indices
        .iter()
        .map(|&i| {
            let orig = x.data()[i];
            x.data_mut()[i] = T::lit(orig.as_f64() + eps);
            let plus = f(&x);
            x.data_mut()[i] = T::lit(orig.as_f64() - eps);
            let minus = f(&x);
            x.data_mut()[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// Central difference of `t ↦ f(x + t·dir)` at `t = 0`.
pub fn directional_derivative<T, F>(f: F, at: &Tensor<T>, dir: &Tensor<T>, eps: f64) -> f64
where
    T: Real,
    F: Fn(&Tensor<T>) -> f64,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let step = |s: f64| {
        let mut x = at.clone();
        for (v, d) in x.data_mut().iter_mut().zip(dir.data()) {
            *v = T::lit(v.as_f64() + s * d.as_f64());
        }
        x
    };
    (f(&step(eps)) - f(&step(-eps))) / (2.0 * eps)
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn relative_error<A: Real, B: Real>(a: &[A], b: &[B]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    let scale = na.max(nb).sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gives_twice_x() {
        let x = Tensor::from_vec(1, 2, 3, vec![0.5f64, -1.0, 2.0, 0.0, 3.5, -0.25]).unwrap();
        let g = finite_diff_gradient(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-3);
        for (gi, xi) in g.data().iter().zip(x.data()) {
            assert!((gi - 2.0 * xi).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::filled(2, 2, 2, 0.3f64);
        let g = finite_diff_gradient(|_| 7.0, &x, 1e-3);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn directional_derivative_of_linear_map() {
        let x = Tensor::filled(1, 1, 4, 1.0f64);
        let w = Tensor::from_vec(1, 1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let d = Tensor::from_vec(1, 1, 4, vec![0.5, 0.0, -1.0, 1.0]).unwrap();
        let dd = directional_derivative(|t| t.dot(&w), &x, &d, 1e-3);
        assert!((dd - (0.5 - 3.0 + 4.0)).abs() < 1e-10);
    }

    #[test]
    fn relative_error_zero_for_equal_and_both_zero() {
        assert_eq!(relative_error(&[1.0f64, 2.0], &[1.0f64, 2.0]), 0.0);
        assert_eq!(relative_error(&[0.0f64], &[0.0f64]), 0.0);
        assert!((relative_error(&[1.0f64], &[-1.0f64]) - 2.0).abs() < 1e-12);
    }
}
