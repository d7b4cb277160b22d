use super::Tensor;

/// Central-difference estimate of the gradient of a scalar function at `x`.
pub fn finite_difference_gradient(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`; zero when both are zero. NaN propagates.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let norm = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_difference_gradient(|x| x.item() * x.item(), &Tensor::scalar(3.0), 1e-4);
        assert!((g.item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::vector(vec![0.3, -1.0, 7.5, 2.0]);
        let g = finite_difference_gradient(Tensor::sum, &x, 1e-4);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn nan_fails_comparison() {
        let g = finite_difference_gradient(|_| f64::NAN, &Tensor::scalar(1.0), 1e-4);
        assert!(!(relative_error(&g, &Tensor::scalar(0.0)) < 1.0));
    }
}
