//! Evaluation contracts: rollout error is a state-space quantity
//! independent of the observation mixing, batching never changes bits,
//! sensitivity analysis is exact on linear maps, and the recovery counters
//! partition their edge and target sets.

mod common;

use common::seeded;
use proptest::prelude::*;
use rand::Rng;
use vcd_core::dataset::{generate, generate_trajectory, GenConfig};
use vcd_core::eval::{
    disentangle_map, probe_observations, recover_graph, recover_targets, rollout_error,
    DenseRollout, OracleRollout, VcdRollout,
};
use vcd_core::models::{ModelDims, ParamStore, RssmModel, VcdModel};
use vcd_core::sim::{EnvParams, Mixing, STATE_DIM};
use vcd_core::tensor::Tensor;

/// Prediction error lives in simulator coordinates, so the same model bias
/// must score the same through any well-conditioned mixing.
#[test]
fn rollout_error_is_invariant_to_the_mixing() {
    let env = EnvParams::base();
    let mut biased = env.clone();
    for s in &mut biased.springs {
        s.stiffness *= 1.3;
    }
    let run = |mixing: &Mixing| {
        // The state and action draws do not depend on the mixing, so both
        // runs score the same underlying trajectories.
        let mut rng = seeded(314);
        let trajs: Vec<_> = (0..5)
            .map(|_| generate_trajectory(&env, mixing, 16, false, &mut rng))
            .collect();
        let mut model = OracleRollout::new(&biased, mixing);
        rollout_error(&mut model, &trajs, mixing, 8, 2).per_step
    };
    let plain = run(&Mixing::identity());
    let mixed = run(&Mixing::sample(&mut seeded(77)));
    for (p, m) in plain.iter().zip(&mixed) {
        assert!(p > &1e-6, "bias too small to measure: {p}");
        assert!(
            (p - m).abs() / p < 1e-6,
            "mixing changed the error: {p} vs {m}"
        );
    }
}

#[test]
fn model_rollouts_are_chunk_size_invariant() {
    let data = generate(&GenConfig {
        seed: 33,
        interventions: vec![0, 1],
        train_per_env: 1,
        val_per_env: 5,
        horizon: 12,
        quantize: true,
        ..Default::default()
    })
    .unwrap();
    let mut rng = seeded(90);
    let dims = ModelDims {
        hidden: 12,
        gru_hidden: 8,
        ..Default::default()
    };
    let mut store = ParamStore::new();
    let vcd = VcdModel::new(&mut store, dims, 2, &mut rng);
    let mut rssm_store = ParamStore::new();
    let rssm = RssmModel::new(&mut rssm_store, dims, &mut rng);

    let run_vcd = |chunk: usize| {
        let mut m = VcdRollout::new(&vcd, &store, 0, None);
        rollout_error(&mut m, &data.envs[0].val, &data.mixing, 6, chunk).per_step
    };
    let run_rssm = |chunk: usize| {
        let mut m = DenseRollout::rssm(&rssm, &rssm_store);
        rollout_error(&mut m, &data.envs[0].val, &data.mixing, 6, chunk).per_step
    };
    for runner in [&run_vcd as &dyn Fn(usize) -> Vec<f64>, &run_rssm] {
        let whole = runner(5);
        for chunk in [1, 2, 3] {
            let split = runner(chunk);
            assert!(whole
                .iter()
                .zip(&split)
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}

#[test]
fn probe_sets_grow_by_prefix() {
    let data = generate(&GenConfig {
        seed: 4,
        interventions: vec![0, 2],
        train_per_env: 1,
        val_per_env: 2,
        horizon: 6,
        quantize: true,
        ..Default::default()
    })
    .unwrap();
    let small = probe_observations(&data, 9);
    let big = probe_observations(&data, 20);
    assert_eq!(small.shape(), &[9, STATE_DIM]);
    assert_eq!(small.data(), &big.data()[..9 * STATE_DIM]);
}

proptest! {
    /// state = z W^T differentiates to W, so the sensitivity matrix is
    /// |W| for any probe set.
    #[test]
    fn linear_map_sensitivity_is_the_weight_magnitude(
        w_data in prop::collection::vec(-2.0f64..2.0, 6),
        seed in 0u64..1000,
    ) {
        let w = Tensor::from_vec(&[2, 3], w_data);
        let probes = Tensor::randn(&[5, 3], &mut seeded(seed));
        let d = disentangle_map(&probes, 2, |tape, z| {
            let wv = tape.constant(w.clone());
            tape.matmul_nt(z, wv)
        });
        for i in 0..2 {
            for j in 0..3 {
                prop_assert!((d.matrix.at(&[i, j]) - w.at(&[i, j]).abs()).abs() < 1e-9);
            }
        }
    }

    /// correct + missed exhausts the truth edges and correct + false_pos
    /// exhausts the mapped learned edges, for any beliefs and assignment.
    #[test]
    fn graph_recovery_counts_partition_the_edge_sets(
        latent in 2usize..6,
        n_action in 0usize..3,
        seed in 0u64..10_000,
    ) {
        let mut rng = seeded(seed);
        let state_dim = rng.gen_range(1..=latent);
        let alpha = Tensor::randn(&[latent + n_action, latent], &mut rng);
        let mut truth = Tensor::zeros(&[state_dim + n_action, state_dim]);
        for v in truth.data_mut() {
            *v = f64::from(rng.gen_bool(0.4));
        }
        let assignment: Vec<usize> =
            (0..state_dim).map(|_| rng.gen_range(0..latent)).collect();

        let r = recover_graph(&alpha, &assignment, &truth);
        let truth_edges = truth.data().iter().filter(|&&v| v != 0.0).count();
        let mapped_edges = r.mapped.data().iter().filter(|&&v| v != 0.0).count();
        prop_assert!(r.mapped.data().iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert_eq!(r.correct + r.missed, truth_edges);
        prop_assert_eq!(r.correct + r.false_pos, mapped_edges);
        let mut seen = vec![false; latent];
        let injective = assignment
            .iter()
            .all(|&j| !std::mem::replace(&mut seen[j], true));
        prop_assert_eq!(r.injective, injective);
    }

    /// The mapped target set is exactly the coordinates whose assigned
    /// latent is flagged, and the counters measure its symmetric
    /// difference against the truth.
    #[test]
    fn target_recovery_counts_partition_the_target_sets(
        latent in 2usize..8,
        seed in 0u64..10_000,
    ) {
        let mut rng = seeded(seed);
        let state_dim = rng.gen_range(1..=latent);
        let beta = Tensor::randn(&[3, latent], &mut rng);
        let row = rng.gen_range(0..3);
        let assignment: Vec<usize> =
            (0..state_dim).map(|_| rng.gen_range(0..latent)).collect();
        let truth: Vec<usize> = (0..state_dim).filter(|_| rng.gen_bool(0.3)).collect();

        let r = recover_targets(&beta, row, &assignment, &truth);
        for win in r.mapped_targets.windows(2) {
            prop_assert!(win[0] < win[1]);
        }
        for &i in &r.mapped_targets {
            prop_assert!(beta.at(&[row, assignment[i]]) > 0.0);
        }
        for i in 0..state_dim {
            let flagged = beta.at(&[row, assignment[i]]) > 0.0;
            prop_assert_eq!(flagged, r.mapped_targets.contains(&i));
        }
        let hit = truth.iter().filter(|t| r.mapped_targets.contains(t)).count();
        prop_assert_eq!(r.missed, truth.len() - hit);
        prop_assert_eq!(r.false_pos, r.mapped_targets.len() - hit);
    }
}
