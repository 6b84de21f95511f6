//! Discrete structure over mechanisms, learned through independent
//! Bernoulli beliefs. An edge probability is sigma(logit); sampling adds
//! logistic noise and thresholds, and the straight-through gate lets the
//! threshold pass a sigmoid gradient.

use rand::Rng;

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Logistic noise L = log u - log(1 - u), so sigma(logit + L) > 1/2 occurs
/// with probability sigma(logit).
pub fn logistic_noise<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let u: f64 = rng.gen_range(f64::EPSILON..1.0);
        *v = u.ln() - (1.0 - u).ln();
    }
    t
}

/// Hard Bernoulli sample with straight-through backward. `noise` is a
/// constant [`logistic_noise`] draw shaped like (or broadcastable to)
/// `logits`.
pub fn sample_mask_st(tape: &mut Tape, logits: Var, noise: Var) -> Var {
    let shifted = tape.add(logits, noise);
    tape.hard_gate(shifted)
}

/// Expected number of active edges, sum of sigma(logits). This is the
/// sparsity penalty before scaling.
pub fn expected_edges(tape: &mut Tape, logits: Var) -> Var {
    let p = tape.sigmoid(logits);
    tape.sum(p)
}

/// Deterministic reading of the beliefs: edge present when sigma(logit)
/// exceeds 1/2, i.e. the logit is strictly positive.
pub fn binarize(logits: &Tensor) -> Vec<bool> {
    logits.data().iter().map(|&x| x > 0.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn expected_edges_at_zero_logits_is_half_the_slots() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[18, 16]));
        let e = expected_edges(&mut tape, logits);
        assert_eq!(tape.value(e).item(), 144.0);
    }

    #[test]
    fn sample_frequency_tracks_sigmoid() {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let n = 100_000usize;
        for &logit in &[-1.5f64, 0.0, 0.8] {
            let mut tape = Tape::new();
            let l = tape.constant(Tensor::filled(&[n], logit));
            let noise = tape.constant(logistic_noise(&[n], &mut rng));
            let m = sample_mask_st(&mut tape, l, noise);
            let freq = tape.value(m).data().iter().sum::<f64>() / n as f64;
            let p = 1.0 / (1.0 + (-logit).exp());
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (freq - p).abs() < 3.0 * se,
                "logit {logit}: freq {freq} vs p {p}"
            );
        }
    }

    #[test]
    fn samples_are_exactly_zero_or_one() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::filled(&[1000], 0.3));
        let noise = tape.constant(logistic_noise(&[1000], &mut rng));
        let m = sample_mask_st(&mut tape, l, noise);
        assert!(tape.value(m).data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn gradient_reaches_logits_through_the_gate() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::zeros(&[4]));
        let noise = tape.constant(logistic_noise(&[4], &mut rng));
        let m = sample_mask_st(&mut tape, l, noise);
        let s = tape.sum(m);
        tape.backward(s);
        let g = tape.grad(l).unwrap();
        assert!(g.data().iter().all(|&v| v > 0.0 && v <= 0.25));
    }

    #[test]
    fn binarize_is_strict_at_zero() {
        let t = Tensor::from_vec(&[3], vec![-0.1, 0.0, 1e-9]);
        assert_eq!(binarize(&t), vec![false, false, true]);
    }
}
