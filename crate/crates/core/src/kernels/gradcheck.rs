//! Central finite differences for checking backward passes.

use ndarray::Array2;

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_difference<F>(mut f: F, x: &Array2<f64>, h: f64) -> Array2<f64>
where
    F: FnMut(&Array2<f64>) -> f64,
{
    let mut probe = x.clone();
    let mut out = Array2::zeros(x.raw_dim());
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[(r, c)];
        probe[(r, c)] = orig + h;
        let up = f(&probe);
        probe[(r, c)] = orig - h;
        let down = f(&probe);
        probe[(r, c)] = orig;
        out[(r, c)] = (up - down) / (2.0 * h);
    }
    out
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    relative_error_with_floor(a, b, 0.0)
}

/// Like [`relative_error`] but the denominator never drops below `floor`,
/// so gradients that vanish analytically (and are pure rounding noise in the
/// finite difference) compare as absolute errors.
pub fn relative_error_with_floor(a: &Array2<f64>, b: &Array2<f64>, floor: f64) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let scale = a
        .mapv(|v| v * v)
        .sum()
        .sqrt()
        .max(b.mapv(|v| v * v).sum().sqrt())
        .max(floor);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
