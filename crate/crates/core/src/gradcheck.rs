//! Central finite differences, used as an independent oracle for the
//! analytic gradients produced by the autograd engine.

/// Central-difference gradient of a scalar function at `x`.
pub fn numerical_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let hi = f(&probe);
            probe[i] = orig - eps;
            let lo = f(&probe);
            probe[i] = orig;
            (hi - lo) / (2.0 * eps)
        })
        .collect()
}

/// Relative error `‖a − b‖ / max(‖a‖, ‖b‖, floor)`, measured over whole
/// vectors so that near-zero components do not dominate.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}
