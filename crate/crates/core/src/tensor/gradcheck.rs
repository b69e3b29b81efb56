//! Central finite differences, used as an independent oracle for `backward`.

use super::Tensor;

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Per-element `(f(x + h e_i) - f(x - h e_i)) / 2h`, with `h` scaled by `max(1, |x_i|)`.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor<f64>) -> f64,
    x: &Tensor<f64>,
    h: f64,
) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let xi = x.data()[i];
        let step = h * xi.abs().max(1.0);
        probe.data_mut()[i] = xi + step;
        let up = f(&probe);
        probe.data_mut()[i] = xi - step;
        let down = f(&probe);
        probe.data_mut()[i] = xi;
        grad.push((up - down) / (2.0 * step));
    }
    Tensor::new(x.shape(), grad).expect("same shape as input")
}

/// `max|a - b| / max(max|a|, max|b|)`; zero when both are (near) zero.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}
