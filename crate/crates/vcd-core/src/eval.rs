//! Evaluation: filtered-then-predicted rollouts, decoder-Jacobian
//! disentanglement, and recovery of the simulator's adjacency and
//! intervention targets from learned beliefs.

use crate::dataset::{batch_actions, batch_obs, Dataset, Trajectory};
use crate::models::{ParamId, ParamStore, VcdModel};
use crate::sim::{Mixing, ACTION_DIM, STATE_DIM};
use crate::structure::binarize;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A model driven through the rollout protocol: it is seeded with the
/// first observation, filters on ground-truth observations while they are
/// supplied, and otherwise predicts mean observations from its prior.
pub trait RolloutModel {
    fn begin(&mut self, first_obs: &Tensor);
    /// Advance one step with `action`. With `obs` the model filters on it
    /// and returns nothing; without, it predicts and returns the mean
    /// observation for the new time.
    fn step(&mut self, action: &Tensor, obs: Option<&Tensor>) -> Option<Tensor>;
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct RolloutReport {
    /// State-space squared error per prediction step, batch-averaged.
    pub per_step: Vec<f64>,
    /// Mean of `per_step` over the whole prediction window.
    pub mean: f64,
    pub observed: usize,
}

/// Run the protocol over `trajs` in fixed-size chunks: filter for
/// `observed` steps, predict to the end, and score predictions by the
/// squared state-space error, unmixing prediction minus truth.
pub fn rollout_error(
    model: &mut dyn RolloutModel,
    trajs: &[Trajectory],
    mixing: &Mixing,
    observed: usize,
    chunk: usize,
) -> RolloutReport {
    assert!(!trajs.is_empty(), "rollout: no trajectories");
    let horizon = trajs[0].horizon();
    assert!(
        observed < horizon,
        "rollout: observed {observed} leaves no steps of horizon {horizon} to predict"
    );
    let n_pred = horizon - observed;
    let mut sums = vec![0.0f64; n_pred];

    for group in trajs.chunks(chunk.max(1)) {
        let picked: Vec<&Trajectory> = group.iter().collect();
        model.begin(&batch_obs(&picked, 0));
        for t in 1..=horizon {
            let a = batch_actions(&picked, t - 1);
            if t <= observed {
                model.step(&a, Some(&batch_obs(&picked, t)));
            } else {
                let pred = model
                    .step(&a, None)
                    .expect("rollout model returned no prediction");
                let slot = t - observed - 1;
                for (b, tr) in picked.iter().enumerate() {
                    let truth = tr.obs_at(t);
                    let row = &pred.data()[b * STATE_DIM..(b + 1) * STATE_DIM];
                    let mut diff = [0.0; STATE_DIM];
                    for (d, (p, g)) in diff.iter_mut().zip(row.iter().zip(truth)) {
                        *d = p - g;
                    }
                    let state_diff = mixing.unmix(&diff);
                    sums[slot] += state_diff.iter().map(|v| v * v).sum::<f64>();
                }
            }
        }
    }

    let n = trajs.len() as f64;
    let per_step: Vec<f64> = sums.into_iter().map(|s| s / n).collect();
    let mean = per_step.iter().sum::<f64>() / per_step.len() as f64;
    RolloutReport {
        per_step,
        mean,
        observed,
    }
}

/// Binarised graph mask in mechanism layout [latent, input] from raw edge
/// beliefs [input, latent].
pub fn graph_mask_from_beliefs(alpha: &Tensor) -> Tensor {
    let (input, latent) = (alpha.shape()[0], alpha.shape()[1]);
    let mut out = Tensor::zeros(&[latent, input]);
    for i in 0..input {
        for j in 0..latent {
            if alpha.at(&[i, j]) > 0.0 {
                out.set(&[j, i], 1.0);
            }
        }
    }
    out
}

/// Binarised regime mask [latent] from row `row` of a belief matrix.
pub fn regime_mask_from_beliefs(beta: &Tensor, row: usize) -> Tensor {
    let latent = beta.shape()[1];
    let mut out = Tensor::zeros(&[latent]);
    for j in 0..latent {
        if beta.at(&[row, j]) > 0.0 {
            out.set(&[j], 1.0);
        }
    }
    out
}

pub struct VcdRollout<'a> {
    model: &'a VcdModel,
    store: &'a ParamStore,
    head: usize,
    graph: Tensor,
    regime: Option<Tensor>,
    h: Tensor,
    z: Tensor,
}

impl<'a> VcdRollout<'a> {
    /// Roll out under environment `head`, gating mechanisms by the
    /// binarised beliefs. `beta` names the belief matrix and row for the
    /// regime; None rolls the observational mechanisms alone.
    pub fn new(
        model: &'a VcdModel,
        store: &'a ParamStore,
        head: usize,
        beta: Option<(ParamId, usize)>,
    ) -> Self {
        assert_eq!(
            head == 0,
            beta.is_none(),
            "vcd rollout: regime belief goes with a non-observational head"
        );
        let graph = graph_mask_from_beliefs(store.get(model.alpha));
        let regime = beta.map(|(pid, row)| regime_mask_from_beliefs(store.get(pid), row));
        VcdRollout {
            model,
            store,
            head,
            graph,
            regime,
            h: Tensor::zeros(&[0]),
            z: Tensor::zeros(&[0]),
        }
    }
}

impl RolloutModel for VcdRollout<'_> {
    fn begin(&mut self, first_obs: &Tensor) {
        let batch = first_obs.shape()[0];
        let dims = self.model.dims;
        self.h = Tensor::zeros(&[dims.latent, batch, dims.gru_hidden]);
        let mut tape = Tape::with_capacity(64);
        let bound = self.store.bind_frozen(&mut tape);
        let o = tape.constant(first_obs.clone());
        let (qm, _) = self.model.encode(&mut tape, &bound, o);
        self.z = tape.value(qm).clone();
    }

    fn step(&mut self, action: &Tensor, obs: Option<&Tensor>) -> Option<Tensor> {
        let batch = self.z.shape()[0];
        let mut tape = Tape::with_capacity(512);
        let bound = self.store.bind_frozen(&mut tape);
        let masks =
            self.model
                .const_masks(&mut tape, Some(&self.graph), self.regime.as_ref(), batch);
        let h = tape.constant(self.h.clone());
        let z = tape.constant(self.z.clone());
        let a = tape.constant(action.clone());
        let prior = self
            .model
            .transition(&mut tape, &bound, self.head, h, z, a, &masks);
        self.h = tape.value(prior.h_next).clone();
        let mean = match (prior.mean_k, masks.regime) {
            (Some(mk), Some(r)) => {
                let d = tape.sub(mk, prior.mean0);
                let gated = tape.mul(r, d);
                tape.add(prior.mean0, gated)
            }
            _ => prior.mean0,
        };
        match obs {
            Some(o) => {
                let ov = tape.constant(o.clone());
                let (qm, _) = self.model.encode(&mut tape, &bound, ov);
                self.z = tape.value(qm).clone();
                None
            }
            None => {
                let zmean = tape.transpose2(mean);
                let (dm, _) = self.model.decode(&mut tape, &bound, zmean);
                self.z = tape.value(zmean).clone();
                Some(tape.value(dm).clone())
            }
        }
    }
}

/// Rollout over any dense transition of the baseline family. `transition`
/// and `encode`/`decode` are resolved through the closures so both
/// baselines share the driver.
pub struct DenseRollout<'a> {
    store: &'a ParamStore,
    encode: Box<dyn Fn(&mut Tape, &crate::models::Bound, Var) -> (Var, Var) + 'a>,
    decode: Box<dyn Fn(&mut Tape, &crate::models::Bound, Var) -> (Var, Var) + 'a>,
    transition: Box<dyn Fn(&mut Tape, &crate::models::Bound, Var, Var, Var) -> (Var, Var, Var) + 'a>,
    gru_hidden: usize,
    h: Tensor,
    z: Tensor,
}

impl<'a> DenseRollout<'a> {
    pub fn rssm(model: &'a crate::models::RssmModel, store: &'a ParamStore) -> Self {
        DenseRollout {
            store,
            encode: Box::new(move |t, b, o| model.encode(t, b, o)),
            decode: Box::new(move |t, b, z| model.decode(t, b, z)),
            transition: Box::new(move |t, b, h, z, a| model.transition(t, b, h, z, a)),
            gru_hidden: model.dims.gru_hidden,
            h: Tensor::zeros(&[0]),
            z: Tensor::zeros(&[0]),
        }
    }

    pub fn multi_rssm(
        model: &'a crate::models::MultiRssmModel,
        store: &'a ParamStore,
        env: usize,
    ) -> Self {
        DenseRollout {
            store,
            encode: Box::new(move |t, b, o| model.encode(t, b, o)),
            decode: Box::new(move |t, b, z| model.decode(t, b, z)),
            transition: Box::new(move |t, b, h, z, a| model.transition(t, b, env, h, z, a)),
            gru_hidden: model.dims.gru_hidden,
            h: Tensor::zeros(&[0]),
            z: Tensor::zeros(&[0]),
        }
    }
}

impl RolloutModel for DenseRollout<'_> {
    fn begin(&mut self, first_obs: &Tensor) {
        let batch = first_obs.shape()[0];
        self.h = Tensor::zeros(&[batch, self.gru_hidden]);
        let mut tape = Tape::with_capacity(64);
        let bound = self.store.bind_frozen(&mut tape);
        let o = tape.constant(first_obs.clone());
        let (qm, _) = (self.encode)(&mut tape, &bound, o);
        self.z = tape.value(qm).clone();
    }

    fn step(&mut self, action: &Tensor, obs: Option<&Tensor>) -> Option<Tensor> {
        let mut tape = Tape::with_capacity(256);
        let bound = self.store.bind_frozen(&mut tape);
        let h = tape.constant(self.h.clone());
        let z = tape.constant(self.z.clone());
        let a = tape.constant(action.clone());
        let (h_next, pm, _) = (self.transition)(&mut tape, &bound, h, z, a);
        self.h = tape.value(h_next).clone();
        match obs {
            Some(o) => {
                let ov = tape.constant(o.clone());
                let (qm, _) = (self.encode)(&mut tape, &bound, ov);
                self.z = tape.value(qm).clone();
                None
            }
            None => {
                let (dm, _) = (self.decode)(&mut tape, &bound, pm);
                self.z = tape.value(pm).clone();
                Some(tape.value(dm).clone())
            }
        }
    }
}

/// Reference dynamics: unmix to state, run the simulator, remix. Its
/// rollout error vanishes on unquantised data from the same environment.
pub struct OracleRollout<'a> {
    pub env: &'a crate::sim::EnvParams,
    pub mixing: &'a Mixing,
    states: Vec<[f64; STATE_DIM]>,
}

impl<'a> OracleRollout<'a> {
    pub fn new(env: &'a crate::sim::EnvParams, mixing: &'a Mixing) -> Self {
        OracleRollout {
            env,
            mixing,
            states: Vec::new(),
        }
    }
}

impl RolloutModel for OracleRollout<'_> {
    fn begin(&mut self, first_obs: &Tensor) {
        let batch = first_obs.shape()[0];
        self.states = (0..batch)
            .map(|b| {
                let mut o = [0.0; STATE_DIM];
                o.copy_from_slice(&first_obs.data()[b * STATE_DIM..(b + 1) * STATE_DIM]);
                self.mixing.unmix(&o)
            })
            .collect();
    }

    fn step(&mut self, action: &Tensor, obs: Option<&Tensor>) -> Option<Tensor> {
        for (b, state) in self.states.iter_mut().enumerate() {
            let a = [
                action.data()[b * ACTION_DIM],
                action.data()[b * ACTION_DIM + 1],
            ];
            crate::sim::step(self.env, state, a);
        }
        if let Some(o) = obs {
            for (b, state) in self.states.iter_mut().enumerate() {
                let mut row = [0.0; STATE_DIM];
                row.copy_from_slice(&o.data()[b * STATE_DIM..(b + 1) * STATE_DIM]);
                *state = self.mixing.unmix(&row);
            }
            None
        } else {
            let mut data = Vec::with_capacity(self.states.len() * STATE_DIM);
            for state in &self.states {
                data.extend_from_slice(&self.mixing.observe(state));
            }
            Some(Tensor::from_vec(&[self.states.len(), STATE_DIM], data))
        }
    }
}

// ── disentanglement ────────────────────────────────────────────────────

#[derive(Clone, Debug, serde::Serialize)]
pub struct Disentanglement {
    /// Mean absolute sensitivity of each unmixed state coordinate to each
    /// latent, [state, latent].
    pub matrix: Tensor,
    /// Latent assigned to each state coordinate: row-wise argmax, lowest
    /// index on ties.
    pub assignment: Vec<usize>,
}

/// Sensitivity from latent probe points through an arbitrary latent-to-
/// state mean map. The closure gets a differentiable leaf holding all
/// probes, [N, latent], and must return [N, state].
pub fn disentangle_map(
    probes_z: &Tensor,
    state_dim: usize,
    map: impl Fn(&mut Tape, Var) -> Var,
) -> Disentanglement {
    let n = probes_z.shape()[0];
    let latent = probes_z.shape()[1];
    let mut tape = Tape::with_capacity(2048);
    let z = tape.leaf(probes_z.clone());
    let state = map(&mut tape, z);
    assert_eq!(
        tape.value(state).shape(),
        &[n, state_dim],
        "disentangle: map produced {:?}, want [{n}, {state_dim}]",
        tape.value(state).shape()
    );
    let mut matrix = Tensor::zeros(&[state_dim, latent]);
    for i in 0..state_dim {
        let col = tape.slice_last(state, i, 1);
        let root = tape.sum(col);
        tape.backward(root);
        let g = tape.grad(z).expect("disentangle: state ignores all latents");
        for j in 0..latent {
            let mut s = 0.0;
            for b in 0..n {
                s += g.data()[b * latent + j].abs();
            }
            matrix.set(&[i, j], s / n as f64);
        }
    }
    let assignment = (0..state_dim)
        .map(|i| {
            let mut best = 0;
            for j in 1..latent {
                if matrix.at(&[i, j]) > matrix.at(&[i, best]) {
                    best = j;
                }
            }
            best
        })
        .collect();
    Disentanglement { matrix, assignment }
}

/// Disentanglement of a trained model: encode probe observations to
/// posterior means, then trace decoder means unmixed back to state space.
pub fn disentangle_vcd(
    model: &VcdModel,
    store: &ParamStore,
    probe_obs: &Tensor,
    mixing: &Mixing,
) -> Disentanglement {
    let z0 = {
        let mut tape = Tape::with_capacity(64);
        let bound = store.bind_frozen(&mut tape);
        let o = tape.constant(probe_obs.clone());
        let (qm, _) = model.encode(&mut tape, &bound, o);
        tape.value(qm).clone()
    };
    let a_inv = mixing.a_inv.clone();
    disentangle_map(&z0, STATE_DIM, |tape, z| {
        let bound = store.bind_frozen(tape);
        let (dm, _) = model.decode(tape, &bound, z);
        let ai = tape.constant(a_inv.clone());
        tape.matmul_nt(dm, ai)
    })
}

/// First `count` observations across validation trajectories, in
/// environment-major order.
pub fn probe_observations(data: &Dataset, count: usize) -> Tensor {
    let mut rows = Vec::with_capacity(count * STATE_DIM);
    let mut n = 0;
    'outer: for env in &data.envs {
        for tr in &env.val {
            for t in 0..=tr.horizon() {
                rows.extend_from_slice(tr.obs_at(t));
                n += 1;
                if n == count {
                    break 'outer;
                }
            }
        }
    }
    assert!(n == count, "probe_observations: only {n} of {count} available");
    Tensor::from_vec(&[count, STATE_DIM], rows)
}

// ── structure recovery ─────────────────────────────────────────────────

#[derive(Clone, Debug, serde::Serialize)]
pub struct GraphRecovery {
    /// Learned adjacency carried into simulator coordinates, [state +
    /// action, state].
    pub mapped: Tensor,
    pub correct: usize,
    pub missed: usize,
    pub false_pos: usize,
    /// Whether the assignment used distinct latents for all coordinates.
    pub injective: bool,
    /// Active edges in the raw binarised belief matrix.
    pub learned_edges: usize,
}

/// Pull the binarised latent-space graph back through the assignment and
/// compare with a ground-truth adjacency. With a non-injective assignment
/// the comparison collapses onto the shared latents and is flagged.
pub fn recover_graph(alpha: &Tensor, assignment: &[usize], truth: &Tensor) -> GraphRecovery {
    let (input, latent) = (alpha.shape()[0], alpha.shape()[1]);
    let state_dim = assignment.len();
    let n_action = input - latent;
    assert_eq!(
        truth.shape(),
        &[state_dim + n_action, state_dim],
        "recover_graph: truth {:?} does not match {state_dim} states and {n_action} actions",
        truth.shape()
    );
    let bits = binarize(alpha);
    let learned_edges = bits.iter().filter(|&&b| b).count();
    let parent_row = |p: usize| {
        if p < state_dim {
            assignment[p]
        } else {
            latent + (p - state_dim)
        }
    };
    let mut mapped = Tensor::zeros(&[state_dim + n_action, state_dim]);
    let (mut correct, mut missed, mut false_pos) = (0, 0, 0);
    for p in 0..state_dim + n_action {
        for c in 0..state_dim {
            let learned = bits[parent_row(p) * latent + assignment[c]];
            let truth_edge = truth.at(&[p, c]) != 0.0;
            if learned {
                mapped.set(&[p, c], 1.0);
            }
            match (learned, truth_edge) {
                (true, true) => correct += 1,
                (false, true) => missed += 1,
                (true, false) => false_pos += 1,
                (false, false) => {}
            }
        }
    }
    let mut seen = vec![false; latent];
    let injective = assignment.iter().all(|&j| !std::mem::replace(&mut seen[j], true));
    GraphRecovery {
        mapped,
        correct,
        missed,
        false_pos,
        injective,
        learned_edges,
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct TargetRecovery {
    /// State coordinates whose assigned latent is flagged.
    pub mapped_targets: Vec<usize>,
    /// Flag count in latent space, before mapping.
    pub latent_flags: usize,
    pub missed: usize,
    pub false_pos: usize,
}

/// Carry a binarised target-belief row into state space and compare with
/// the true intervention targets.
pub fn recover_targets(
    beta: &Tensor,
    row: usize,
    assignment: &[usize],
    truth_targets: &[usize],
) -> TargetRecovery {
    let latent = beta.shape()[1];
    let flags: Vec<bool> = (0..latent).map(|j| beta.at(&[row, j]) > 0.0).collect();
    let latent_flags = flags.iter().filter(|&&b| b).count();
    let mapped_targets: Vec<usize> = (0..assignment.len())
        .filter(|&i| flags[assignment[i]])
        .collect();
    let missed = truth_targets
        .iter()
        .filter(|t| !mapped_targets.contains(t))
        .count();
    let false_pos = mapped_targets
        .iter()
        .filter(|t| !truth_targets.contains(t))
        .count();
    TargetRecovery {
        mapped_targets,
        latent_flags,
        missed,
        false_pos,
    }
}
