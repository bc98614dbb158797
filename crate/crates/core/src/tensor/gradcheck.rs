use super::Tensor;

/// Central-difference gradient `(f(x+h) − f(x−h)) / 2h`, one coordinate at a time.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, at: &Tensor, h: f64) -> Tensor {
    let mut probe = at.clone();
    let mut grad = Tensor::zeros(at.shape());
    for i in 0..at.len() {
        let x = at.data()[i];
        probe.data_mut()[i] = x + h;
        let plus = f(&probe);
        probe.data_mut()[i] = x - h;
        let minus = f(&probe);
        probe.data_mut()[i] = x;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// `‖a − b‖ / (‖a‖ + ‖b‖)`, defined as 0 when both are zero.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_error shape mismatch");
    let norm = |it: &mut dyn Iterator<Item = f64>| it.map(|v| v * v).sum::<f64>().sqrt();
    let diff = norm(&mut a.data().iter().zip(b.data()).map(|(x, y)| x - y));
    let scale = norm(&mut a.data().iter().copied()) + norm(&mut b.data().iter().copied());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::full(&[1], 3.0);
        let g = finite_diff_grad(|t| t.data()[0].powi(2), &x, 1e-5);
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function() {
        let x = Tensor::full(&[4], 1.5);
        let g = finite_diff_grad(|_| 42.0, &x, 1e-5);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relative_error_of_zeros() {
        assert_eq!(relative_error(&Tensor::zeros(&[3]), &Tensor::zeros(&[3])), 0.0);
    }
}
