//! Central finite differences, used as an independent check on backprop.

/// `(f(θ + h·e_i) − f(θ − h·e_i)) / 2h` for every coordinate i.
pub fn numeric_gradient(loss_fn: impl Fn(&[f64]) -> f64, theta: &[f64], h: f64) -> Vec<f64> {
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = loss_fn(&probe);
            probe[i] = orig - h;
            let minus = loss_fn(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|)`, zero when both are zero.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}
