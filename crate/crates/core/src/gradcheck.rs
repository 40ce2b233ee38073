//! Central finite differences, the independent oracle for analytic gradients.

use crate::numerics::Tensor;

/// Default step for central differences in 64-bit arithmetic.
pub const STEP: f64 = 1e-5;

/// Numerical gradient of `f` at `x` by central differences with [`STEP`].
pub fn finite_difference(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.numel())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + STEP;
            let up = f(&probe);
            probe.data_mut()[i] = orig - STEP;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

/// Norm-relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
