//! Shared oracle helpers: finite differences and error metrics.

#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use vcd_core::Tensor;

pub fn seeded(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Central-difference gradient of `f` at `at`, one element at a time.
pub fn fd_grad(at: &Tensor, eps: f64, f: &mut dyn FnMut(&Tensor) -> f64) -> Tensor {
    let mut grad = Tensor::zeros(at.shape());
    for i in 0..at.numel() {
        let mut hi = at.clone();
        hi.data_mut()[i] += eps;
        let mut lo = at.clone();
        lo.data_mut()[i] -= eps;
        grad.data_mut()[i] = (f(&hi) - f(&lo)) / (2.0 * eps);
    }
    grad
}

/// Largest elementwise relative error, with the denominator floored so
/// near-zero entries compare absolutely.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "rel err: length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

/// Mean and standard error of a slice.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Composite Simpson over [a, b] with n even intervals.
pub fn simpson(a: f64, b: f64, n: usize, f: &mut dyn FnMut(f64) -> f64) -> f64 {
    assert!(n >= 2 && n % 2 == 0, "simpson: need an even interval count");
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}
