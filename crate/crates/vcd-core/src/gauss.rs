//! Diagonal-Gaussian building blocks on the tape: reparameterised sampling,
//! analytic KL, and log-density. All work elementwise; callers reduce.

use crate::tape::{Tape, Var};

pub const LOG_2PI: f64 = 1.8378770664093453;

/// mean + exp(logvar / 2) * noise, with `noise` a constant draw.
pub fn reparam_sample(tape: &mut Tape, mean: Var, logvar: Var, noise: Var) -> Var {
    let half = tape.scale(logvar, 0.5);
    let std = tape.exp(half);
    let scaled = tape.mul(std, noise);
    tape.add(mean, scaled)
}

/// Elementwise KL(q || p) between diagonal Gaussians given means and
/// log-variances:
///
///   0.5 * (exp(lq - lp) + (mq - mp)^2 * exp(-lp) - 1 + lp - lq)
pub fn kl_diag(tape: &mut Tape, mq: Var, lq: Var, mp: Var, lp: Var) -> Var {
    let dl = tape.sub(lq, lp);
    let var_ratio = tape.exp(dl);
    let dm = tape.sub(mq, mp);
    let dm2 = tape.square(dm);
    let neg_lp = tape.neg(lp);
    let inv_vp = tape.exp(neg_lp);
    let maha = tape.mul(dm2, inv_vp);
    let s = tape.add(var_ratio, maha);
    let s = tape.sub(s, dl);
    let s = tape.add_scalar(s, -1.0);
    tape.scale(s, 0.5)
}

/// Elementwise log N(x; mean, exp(logvar)):
///
///   -0.5 * (log 2pi + logvar + (x - mean)^2 * exp(-logvar))
pub fn log_pdf_diag(tape: &mut Tape, x: Var, mean: Var, logvar: Var) -> Var {
    let d = tape.sub(x, mean);
    let d2 = tape.square(d);
    let neg_lv = tape.neg(logvar);
    let inv_v = tape.exp(neg_lv);
    let maha = tape.mul(d2, inv_v);
    let s = tape.add(maha, logvar);
    let s = tape.add_scalar(s, LOG_2PI);
    tape.scale(s, -0.5)
}

/// Scalar KL(q || p) for one-dimensional Gaussians, log-variance form.
pub fn kl_scalar(mq: f64, lq: f64, mp: f64, lp: f64) -> f64 {
    0.5 * ((lq - lp).exp() + (mq - mp).powi(2) * (-lp).exp() - 1.0 + lp - lq)
}

/// Scalar log N(x; mean, exp(logvar)).
pub fn log_pdf_scalar(x: f64, mean: f64, logvar: f64) -> f64 {
    -0.5 * (LOG_2PI + logvar + (x - mean).powi(2) * (-logvar).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn kl_of_identical_gaussians_is_zero() {
        assert_eq!(kl_scalar(0.3, -1.2, 0.3, -1.2), 0.0);
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::from_vec(&[2], vec![0.5, -2.0]));
        let l = tape.constant(Tensor::from_vec(&[2], vec![0.1, -0.7]));
        let kl = kl_diag(&mut tape, m, l, m, l);
        assert_eq!(tape.value(kl).data(), &[0.0, 0.0]);
    }

    #[test]
    fn kl_matches_scalar_form() {
        let (mq, lq, mp, lp) = (0.7, -0.4, -0.2, 0.3);
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(mq));
        let b = tape.constant(Tensor::scalar(lq));
        let c = tape.constant(Tensor::scalar(mp));
        let d = tape.constant(Tensor::scalar(lp));
        let kl = kl_diag(&mut tape, a, b, c, d);
        assert!((tape.value(kl).item() - kl_scalar(mq, lq, mp, lp)).abs() < 1e-15);
    }

    #[test]
    fn standard_normal_density_at_zero() {
        // log N(0; 0, 1) = -0.5 log 2pi
        assert!((log_pdf_scalar(0.0, 0.0, 0.0) + 0.5 * LOG_2PI).abs() < 1e-15);
    }

    #[test]
    fn reparam_with_zero_noise_returns_mean() {
        let mut tape = Tape::new();
        let mean = tape.constant(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.25]));
        let lv = tape.constant(Tensor::from_vec(&[3], vec![0.4, -1.0, 2.0]));
        let noise = tape.constant(Tensor::zeros(&[3]));
        let z = reparam_sample(&mut tape, mean, lv, noise);
        assert_eq!(tape.value(z).data(), &[1.0, -2.0, 0.25]);
    }
}
