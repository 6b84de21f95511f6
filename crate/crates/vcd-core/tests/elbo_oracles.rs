//! Value oracles for the evidence lower bound: Monte-Carlo against the
//! analytic KL, grid quadrature against the full bound on a one-latent
//! chain, and exact reductions (zero model, masked-vs-dense consistency).

mod common;

use std::f64::consts::PI;

use common::{mean_se, seeded, simpson};
use rand::Rng;
use rand_distr::StandardNormal;
use vcd_core::gauss::{kl_scalar, log_pdf_scalar, LOG_2PI};
use vcd_core::models::{ModelDims, ParamStore, VcdMasks, VcdModel, LOGVAR_FLOOR};
use vcd_core::training::{vcd_elbo, EnvBatch};
use vcd_core::{Tape, Tensor};

// ── analytic KL vs Monte-Carlo ─────────────────────────────────────────

#[test]
fn kl_matches_monte_carlo_within_one_percent() {
    const DIMS: usize = 8;
    const SAMPLES: usize = 1_000_000;
    let mut rng = seeded(31);
    let mut checked = 0;
    while checked < 20 {
        let mq: Vec<f64> = (0..DIMS).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mp: Vec<f64> = (0..DIMS).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let lq: Vec<f64> = (0..DIMS).map(|_| rng.gen_range(-1.0..0.5)).collect();
        let lp: Vec<f64> = (0..DIMS).map(|_| rng.gen_range(-1.0..0.5)).collect();
        let analytic: f64 = (0..DIMS)
            .map(|i| kl_scalar(mq[i], lq[i], mp[i], lp[i]))
            .sum();
        if analytic < 0.5 {
            continue;
        }
        checked += 1;
        let mut acc = 0.0;
        for _ in 0..SAMPLES {
            let mut ratio = 0.0;
            for i in 0..DIMS {
                let e: f64 = rng.sample(StandardNormal);
                let z = mq[i] + (0.5 * lq[i]).exp() * e;
                ratio += log_pdf_scalar(z, mq[i], lq[i]) - log_pdf_scalar(z, mp[i], lp[i]);
            }
            acc += ratio;
        }
        let mc = acc / SAMPLES as f64;
        let rel = (mc - analytic).abs() / analytic;
        assert!(rel < 0.01, "draw {checked}: analytic {analytic:.4}, mc {mc:.4}, rel {rel:.4}");
    }
}

// ── scalar re-implementation of the one-latent model ───────────────────

fn param<'a>(s: &'a ParamStore, name: &str) -> &'a Tensor {
    s.get(s.id_of(name).unwrap_or_else(|| panic!("missing param {name}")))
}

/// y = W x + b with W's trailing two dims [out, in]; leading group dims of
/// size one are flattened away.
fn affine(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let n_in = *w.shape().last().unwrap();
    let n_out = w.numel() / n_in;
    assert_eq!(n_in, x.len());
    assert_eq!(n_out, b.numel());
    (0..n_out)
        .map(|o| b.data()[o] + (0..n_in).map(|i| w.data()[o * n_in + i] * x[i]).sum::<f64>())
        .collect()
}

fn tanh_vec(mut v: Vec<f64>) -> Vec<f64> {
    for x in v.iter_mut() {
        *x = x.tanh();
    }
    v
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Three-layer Gaussian MLP with scalar output: (mean, floored logvar).
fn gaussian_head(s: &ParamStore, prefix: &str, x: &[f64]) -> (f64, f64) {
    let h = tanh_vec(affine(param(s, &format!("{prefix}.l0.w")), param(s, &format!("{prefix}.l0.b")), x));
    let h = tanh_vec(affine(param(s, &format!("{prefix}.l1.w")), param(s, &format!("{prefix}.l1.b")), &h));
    let out = affine(param(s, &format!("{prefix}.l2.w")), param(s, &format!("{prefix}.l2.b")), &h);
    (out[0], out[1].max(LOGVAR_FLOOR))
}

fn gru_cell(s: &ParamStore, h: &[f64], x: &[f64]) -> Vec<f64> {
    let gate = |wn: &str, un: &str, bn: &str, hin: &[f64]| -> Vec<f64> {
        let xs = affine(param(s, wn), param(s, bn), x);
        let n_in = *param(s, un).shape().last().unwrap();
        let u = param(s, un);
        (0..xs.len())
            .map(|o| xs[o] + (0..n_in).map(|i| u.data()[o * n_in + i] * hin[i]).sum::<f64>())
            .collect()
    };
    let r: Vec<f64> = gate("gru.wr", "gru.ur", "gru.br", h).into_iter().map(sigmoid).collect();
    let u: Vec<f64> = gate("gru.wu", "gru.uu", "gru.bu", h).into_iter().map(sigmoid).collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(r, h)| r * h).collect();
    let c: Vec<f64> = gate("gru.wc", "gru.uc", "gru.bc", &rh).into_iter().map(|x| x.tanh()).collect();
    u.iter()
        .zip(h)
        .zip(&c)
        .map(|((u, h), c)| u * h + (1.0 - u) * c)
        .collect()
}

/// E_{z ~ N(m, exp(lv))}[f(z)] on a truncated Simpson grid.
fn gauss_expect(m: f64, lv: f64, n: usize, f: &mut dyn FnMut(f64) -> f64) -> f64 {
    let s = (0.5 * lv).exp();
    let norm = 1.0 / (s * (2.0 * PI).sqrt());
    simpson(m - 9.0 * s, m + 9.0 * s, n, &mut |z| {
        let u = (z - m) / s;
        f(z) * norm * (-0.5 * u * u).exp()
    })
}

fn one_latent_dims() -> ModelDims {
    ModelDims {
        obs: 1,
        latent: 1,
        action: 1,
        hidden: 4,
        gru_hidden: 4,
    }
}

/// The expected filtering bound on a single T=2 trajectory, integrated on
/// a grid: reconstruction terms are one-dimensional expectations, the KL
/// at t depends on the sampled latents before t through the recurrent
/// state, giving nested integrals.
fn quadrature_expected_elbo(store: &ParamStore, obs: [f64; 3], actions: [f64; 2]) -> f64 {
    let q: Vec<(f64, f64)> = obs.iter().map(|&o| gaussian_head(store, "encoder", &[o])).collect();
    let recon: f64 = (0..3)
        .map(|t| {
            gauss_expect(q[t].0, q[t].1, 4000, &mut |z| {
                let (dm, dlv) = gaussian_head(store, "decoder", &[z]);
                log_pdf_scalar(obs[t], dm, dlv)
            })
        })
        .sum();
    let h0 = vec![0.0; 4];
    let kl0 = kl_scalar(q[0].0, q[0].1, 0.0, 0.0);
    let kl1 = gauss_expect(q[0].0, q[0].1, 2000, &mut |z0| {
        let h1 = gru_cell(store, &h0, &[z0, actions[0]]);
        let (pm, plv) = gaussian_head(store, "head0", &h1);
        kl_scalar(q[1].0, q[1].1, pm, plv)
    });
    let kl2 = gauss_expect(q[0].0, q[0].1, 600, &mut |z0| {
        let h1 = gru_cell(store, &h0, &[z0, actions[0]]);
        gauss_expect(q[1].0, q[1].1, 600, &mut |z1| {
            let h2 = gru_cell(store, &h1, &[z1, actions[1]]);
            let (pm, plv) = gaussian_head(store, "head0", &h2);
            kl_scalar(q[2].0, q[2].1, pm, plv)
        })
    });
    recon - kl0 - kl1 - kl2
}

#[test]
fn elbo_matches_grid_quadrature_on_one_latent_chain() {
    let mut rng = seeded(32);
    let mut store = ParamStore::new();
    let model = VcdModel::new(&mut store, one_latent_dims(), 1, &mut rng);
    for id in store.ids().collect::<Vec<_>>() {
        for x in store.get_mut(id).data_mut() {
            *x *= 0.4;
        }
    }
    let obs = [0.7, -0.3, 0.4];
    let actions = [0.5, -0.8];

    let expected = quadrature_expected_elbo(&store, obs, actions);

    const CHUNKS: usize = 80;
    const B: usize = 5000;
    let mut chunk_means = Vec::with_capacity(CHUNKS);
    let mut rng = seeded(33);
    for _ in 0..CHUNKS {
        let batch = EnvBatch {
            obs: obs.iter().map(|&o| Tensor::from_vec(&[B, 1], vec![o; B])).collect(),
            actions: actions.iter().map(|&a| Tensor::from_vec(&[B, 1], vec![a; B])).collect(),
            post_noise: (0..3).map(|_| Tensor::randn(&[B, 1], &mut rng)).collect(),
        };
        let mut tape = Tape::with_capacity(4096);
        let bound = store.bind_frozen(&mut tape);
        let masks = VcdMasks {
            graph: None,
            regime: None,
        };
        let parts = vcd_elbo(&model, &mut tape, &bound, 0, &masks, &batch);
        chunk_means.push(tape.value(parts.elbo).item());
    }
    let (mc, se) = mean_se(&chunk_means);
    assert!(
        se < 4e-4,
        "estimator too noisy for the pinned tolerance: se {se:.2e}"
    );
    let diff = (mc - expected).abs();
    assert!(
        diff < 1e-3,
        "quadrature {expected:.6}, monte-carlo {mc:.6} (se {se:.1e}), diff {diff:.2e}"
    );
}

// ── exact reductions ───────────────────────────────────────────────────

/// All-zero parameters give N(0, 1) everywhere: the KL vanishes and the
/// bound collapses to the standard-normal log-density of the data.
#[test]
fn zero_model_elbo_is_standard_normal_log_density() {
    let mut rng = seeded(34);
    let dims = ModelDims {
        obs: 3,
        latent: 2,
        action: 1,
        hidden: 4,
        gru_hidden: 4,
    };
    let mut store = ParamStore::new();
    let model = VcdModel::new(&mut store, dims, 1, &mut rng);
    for id in store.ids().collect::<Vec<_>>() {
        for x in store.get_mut(id).data_mut() {
            *x = 0.0;
        }
    }
    let horizon = 4;
    let batch = EnvBatch {
        obs: (0..=horizon).map(|_| Tensor::randn(&[1, 3], &mut rng)).collect(),
        actions: (0..horizon).map(|_| Tensor::randn(&[1, 1], &mut rng)).collect(),
        post_noise: (0..=horizon).map(|_| Tensor::randn(&[1, 2], &mut rng)).collect(),
    };
    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let masks = VcdMasks {
        graph: None,
        regime: None,
    };
    let parts = vcd_elbo(&model, &mut tape, &bound, 0, &masks, &batch);
    assert_eq!(parts.kl, 0.0);
    let analytic: f64 = batch
        .obs
        .iter()
        .flat_map(|o| o.data())
        .map(|&x| log_pdf_scalar(x, 0.0, 0.0))
        .sum();
    assert!((tape.value(parts.elbo).item() - analytic).abs() < 1e-12);
}

/// The floored log-variance caps every reconstruction term, so any model's
/// bound sits below the best-case log-density sum.
#[test]
fn elbo_respects_the_density_ceiling() {
    for seed in 40..45 {
        let mut rng = seeded(seed);
        let dims = ModelDims {
            obs: 3,
            latent: 2,
            action: 1,
            hidden: 4,
            gru_hidden: 4,
        };
        let mut store = ParamStore::new();
        let model = VcdModel::new(&mut store, dims, 1, &mut rng);
        let horizon = 3;
        let batch = EnvBatch {
            obs: (0..=horizon).map(|_| Tensor::randn(&[2, 3], &mut rng)).collect(),
            actions: (0..horizon).map(|_| Tensor::randn(&[2, 1], &mut rng)).collect(),
            post_noise: (0..=horizon).map(|_| Tensor::randn(&[2, 2], &mut rng)).collect(),
        };
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let masks = VcdMasks {
            graph: None,
            regime: None,
        };
        let parts = vcd_elbo(&model, &mut tape, &bound, 0, &masks, &batch);
        let ceiling = (horizon + 1) as f64 * 3.0 * (-0.5 * (LOG_2PI + LOGVAR_FLOOR));
        assert!(tape.value(parts.elbo).item() <= ceiling);
    }
}

/// On a constant trajectory the bound is a sum of near-identical per-step
/// terms, so doubling the horizon roughly doubles it. For the zero model
/// the terms are exactly identical and the ratio is (2T+1)/(T+1).
#[test]
fn bound_is_additive_over_time() {
    let dims = one_latent_dims();
    let make_batch = |horizon: usize, rng: &mut rand_chacha::ChaCha20Rng| EnvBatch {
        obs: (0..=horizon).map(|_| Tensor::from_vec(&[1, 1], vec![0.6])).collect(),
        actions: (0..horizon).map(|_| Tensor::from_vec(&[1, 1], vec![-0.2])).collect(),
        post_noise: (0..=horizon).map(|_| Tensor::randn(&[1, 1], rng)).collect(),
    };
    let elbo_at = |store: &ParamStore, model: &VcdModel, horizon: usize, seed: u64| {
        let mut rng = seeded(seed);
        let batch = make_batch(horizon, &mut rng);
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let masks = VcdMasks {
            graph: None,
            regime: None,
        };
        let parts = vcd_elbo(model, &mut tape, &bound, 0, &masks, &batch);
        tape.value(parts.elbo).item()
    };

    let mut rng = seeded(50);
    let mut store = ParamStore::new();
    let model = VcdModel::new(&mut store, dims, 1, &mut rng);
    for id in store.ids().collect::<Vec<_>>() {
        for x in store.get_mut(id).data_mut() {
            *x = 0.0;
        }
    }
    let short = elbo_at(&store, &model, 25, 51);
    let long = elbo_at(&store, &model, 50, 52);
    assert!((long / short - 51.0 / 26.0).abs() < 1e-12);

    let mut rng = seeded(53);
    let mut store = ParamStore::new();
    let model = VcdModel::new(&mut store, dims, 1, &mut rng);
    for id in store.ids().collect::<Vec<_>>() {
        for x in store.get_mut(id).data_mut() {
            *x *= 0.3;
        }
    }
    let short = elbo_at(&store, &model, 25, 54);
    let long = elbo_at(&store, &model, 50, 55);
    assert!((long / short - 2.0).abs() < 0.25, "ratio {}", long / short);
}

/// All-ones graph mask and all-zeros regime mask must reproduce the dense
/// observational bound exactly.
#[test]
fn consistency_reduction_to_the_dense_model() {
    let mut rng = seeded(60);
    let dims = ModelDims::default();
    let mut store = ParamStore::new();
    let model = VcdModel::new(&mut store, dims, 3, &mut rng);
    let horizon = 5;
    let bsz = 2;
    let batch = EnvBatch {
        obs: (0..=horizon).map(|_| Tensor::randn(&[bsz, dims.obs], &mut rng)).collect(),
        actions: (0..horizon).map(|_| Tensor::randn(&[bsz, dims.action], &mut rng)).collect(),
        post_noise: (0..=horizon)
            .map(|_| Tensor::randn(&[bsz, dims.latent], &mut rng))
            .collect(),
    };

    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let ones = Tensor::filled(&[dims.latent, dims.input()], 1.0);
    let zeros = Tensor::zeros(&[dims.latent]);
    let masks = model.const_masks(&mut tape, Some(&ones), Some(&zeros), bsz);
    let masked = vcd_elbo(&model, &mut tape, &bound, 2, &masks, &batch);

    let mut tape2 = Tape::new();
    let bound2 = store.bind_frozen(&mut tape2);
    let none = VcdMasks {
        graph: None,
        regime: None,
    };
    let dense = vcd_elbo(&model, &mut tape2, &bound2, 0, &none, &batch);

    let diff = (tape.value(masked.elbo).item() - tape2.value(dense.elbo).item()).abs();
    assert!(diff <= 1e-10, "masked vs dense: {diff:.3e}");
}

/// A regime mask of ones with an environment head cloned from the
/// observational one is again the dense bound: the gated KL difference
/// cancels exactly.
#[test]
fn all_ones_regime_with_cloned_head_matches_dense() {
    let mut rng = seeded(61);
    let dims = ModelDims {
        obs: 3,
        latent: 2,
        action: 1,
        hidden: 4,
        gru_hidden: 4,
    };
    let mut store = ParamStore::new();
    let mut model = VcdModel::new(&mut store, dims, 2, &mut rng);
    let (cloned, _) = model.add_adapted_head(&mut store);
    let horizon = 3;
    let batch = EnvBatch {
        obs: (0..=horizon).map(|_| Tensor::randn(&[2, 3], &mut rng)).collect(),
        actions: (0..horizon).map(|_| Tensor::randn(&[2, 1], &mut rng)).collect(),
        post_noise: (0..=horizon).map(|_| Tensor::randn(&[2, 2], &mut rng)).collect(),
    };

    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let ones_g = Tensor::filled(&[dims.latent, dims.input()], 1.0);
    let ones_r = Tensor::filled(&[dims.latent], 1.0);
    let masks = model.const_masks(&mut tape, Some(&ones_g), Some(&ones_r), 2);
    let switched = vcd_elbo(&model, &mut tape, &bound, cloned, &masks, &batch);

    let mut tape2 = Tape::new();
    let bound2 = store.bind_frozen(&mut tape2);
    let none = VcdMasks {
        graph: None,
        regime: None,
    };
    let dense = vcd_elbo(&model, &mut tape2, &bound2, 0, &none, &batch);

    let diff = (tape.value(switched.elbo).item() - tape2.value(dense.elbo).item()).abs();
    assert!(diff <= 1e-12, "switched vs dense: {diff:.3e}");
}

/// KL mixing endpoints, exercised through the real bound: gating with
/// zeros is bitwise the observational KL path.
#[test]
fn zero_regime_mask_is_bitwise_observational() {
    let mut rng = seeded(62);
    let dims = ModelDims {
        obs: 3,
        latent: 2,
        action: 1,
        hidden: 4,
        gru_hidden: 4,
    };
    let mut store = ParamStore::new();
    let model = VcdModel::new(&mut store, dims, 2, &mut rng);
    let horizon = 4;
    let batch = EnvBatch {
        obs: (0..=horizon).map(|_| Tensor::randn(&[2, 3], &mut rng)).collect(),
        actions: (0..horizon).map(|_| Tensor::randn(&[2, 1], &mut rng)).collect(),
        post_noise: (0..=horizon).map(|_| Tensor::randn(&[2, 2], &mut rng)).collect(),
    };
    let graph = Tensor::filled(&[dims.latent, dims.input()], 1.0);
    let zeros = Tensor::zeros(&[dims.latent]);

    let run = |head: usize, regime: Option<&Tensor>| {
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let masks = model.const_masks(&mut tape, Some(&graph), regime, 2);
        let parts = vcd_elbo(&model, &mut tape, &bound, head, &masks, &batch);
        tape.value(parts.elbo).item()
    };
    let gated = run(1, Some(&zeros));
    let observational = run(0, None);
    assert_eq!(gated.to_bits(), observational.to_bits());
}
