//! Verification helpers shared by unit, integration and acceptance tests.
//!
//! Nothing here is used by the training code; these are independent oracles.

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative agreement with an absolute floor: `|a-b| <= rel*max(|a|,|b|) + abs`.
pub fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + abs
}

/// Index and values of the worst disagreement between two gradients, if any
/// entry fails [`close`].
pub fn first_mismatch(
    analytic: &[f64],
    numeric: &[f64],
    rel: f64,
    abs: f64,
) -> Option<(usize, f64, f64)> {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .find(|(_, (a, n))| !close(**a, **n, rel, abs))
        .map(|(i, (a, n))| (i, *a, *n))
}

/// Step size used by every finite-difference check in the test suites.
pub const FD_STEP: f64 = 1e-5;
/// Relative tolerance for gradient checks.
pub const FD_REL: f64 = 1e-4;
/// Absolute floor for gradient checks.
pub const FD_ABS: f64 = 1e-7;

/// Naive triple-loop matrix product of row-major `a (m x k)` and `b (k x n)`.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Sample mean and standard error of the mean.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}
