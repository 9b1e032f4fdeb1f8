//! Central finite-difference checks for hand-written gradients.

/// Largest relative error between `analytic` and the central difference
/// estimate of `f` at `x`. Relative error is `|a − n| / max(|a|, |n|, floor)`.
pub fn max_relative_error(
    x: &[f64],
    analytic: &[f64],
    step: f64,
    floor: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> f64 {
    assert_eq!(x.len(), analytic.len(), "gradient length");
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = f(&probe);
        probe[i] = orig - step;
        let down = f(&probe);
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let scale = analytic[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    worst
}

/// Numeric gradient of `f` at `x` by central differences.
pub fn numeric_gradient(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}
