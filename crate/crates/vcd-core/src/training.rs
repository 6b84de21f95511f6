//! Evidence lower bounds and the optimisation loops around them.
//!
//! One training step: draw a batch of trajectories per environment, build
//! one tape per environment, run backward from the negated ELBO, add the
//! structure penalties, clip the joint gradient norm, and apply Adam. All
//! randomness runs through the trainer's single ChaCha20 stream in a fixed
//! order (batch indices per environment, then per environment the mask
//! noises followed by the posterior noises), so runs are reproducible and
//! resumable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::dataset::{batch_actions, batch_obs, Dataset, Trajectory};
use crate::error::{CoreError, Result};
use crate::gauss;
use crate::models::{
    Bound, MultiRssmModel, ParamId, ParamStore, RssmModel, VcdMasks, VcdModel,
};
use crate::opt::{clip_global_norm, Adam, AdamConfig};
use crate::structure::{expected_edges, logistic_noise};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_per_env: usize,
    pub lambda_graph: f64,
    pub lambda_regime: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 50_000,
            lr: 1e-3,
            batch_per_env: 2,
            lambda_graph: 0.01,
            lambda_regime: 0.01,
            grad_clip: 100.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct StepMetrics {
    pub step: usize,
    /// Minimised quantity: penalties minus the summed ELBOs.
    pub loss: f64,
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
    pub penalty: f64,
    pub expected_graph_edges: f64,
    pub expected_regime_flags: f64,
    pub grad_norm: f64,
    pub per_env_elbo: Vec<f64>,
}

/// Constant inputs for one environment's slice of a step: observations
/// [B, obs] per time, actions [B, action], posterior noise [B, latent].
pub struct EnvBatch {
    pub obs: Vec<Tensor>,
    pub actions: Vec<Tensor>,
    pub post_noise: Vec<Tensor>,
}

pub fn assemble_env_batch<R: Rng>(
    trajs: &[&Trajectory],
    horizon: usize,
    latent: usize,
    rng: &mut R,
) -> EnvBatch {
    let obs = (0..=horizon).map(|t| batch_obs(trajs, t)).collect();
    let actions = (0..horizon).map(|t| batch_actions(trajs, t)).collect();
    let post_noise = (0..=horizon)
        .map(|_| Tensor::randn(&[trajs.len(), latent], rng))
        .collect();
    EnvBatch {
        obs,
        actions,
        post_noise,
    }
}

pub struct ElboParts {
    pub elbo: Var,
    pub recon: f64,
    pub kl: f64,
}

/// Filtering ELBO for one environment under the causal transition.
/// `head` picks the environment mechanism head; the masks are already on
/// the tape (sampled per trajectory, or constant for evaluation). Terms
/// are batch means; time is summed.
pub fn vcd_elbo(
    model: &VcdModel,
    tape: &mut Tape,
    bound: &Bound,
    head: usize,
    masks: &VcdMasks,
    batch: &EnvBatch,
) -> ElboParts {
    let bsz = batch.obs[0].shape()[0];
    let horizon = batch.actions.len();
    let latent = model.dims.latent;
    let inv_b = 1.0 / bsz as f64;

    let mut h = model.init_hidden(tape, bsz);
    let mut z_prev: Option<Var> = None;
    let mut elbo: Option<Var> = None;
    let (mut recon_total, mut kl_total) = (0.0, 0.0);

    for t in 0..=horizon {
        let o = tape.constant(batch.obs[t].clone());
        let (qm, qlv) = model.encode(tape, bound, o);
        let qm_t = tape.transpose2(qm);
        let qlv_t = tape.transpose2(qlv);

        let kl = if t == 0 {
            let zeros = tape.constant(Tensor::zeros(&[latent, bsz]));
            gauss::kl_diag(tape, qm_t, qlv_t, zeros, zeros)
        } else {
            let a = tape.constant(batch.actions[t - 1].clone());
            let prior = model.transition(tape, bound, head, h, z_prev.unwrap(), a, masks);
            h = prior.h_next;
            let kl0 = gauss::kl_diag(tape, qm_t, qlv_t, prior.mean0, prior.logvar0);
            match (prior.mean_k, prior.logvar_k, masks.regime) {
                (Some(mk), Some(lk), Some(r)) => {
                    let klk = gauss::kl_diag(tape, qm_t, qlv_t, mk, lk);
                    let diff = tape.sub(klk, kl0);
                    let gated = tape.mul(r, diff);
                    tape.add(kl0, gated)
                }
                (None, None, None) => kl0,
                _ => panic!("vcd elbo: regime mask and environment head must come together"),
            }
        };
        let kl_term = tape.sum(kl);
        let kl_term = tape.scale(kl_term, inv_b);

        let noise = tape.constant(batch.post_noise[t].clone());
        let z = gauss::reparam_sample(tape, qm, qlv, noise);
        let (dm, dlv) = model.decode(tape, bound, z);
        let lp = gauss::log_pdf_diag(tape, o, dm, dlv);
        let recon = tape.sum(lp);
        let recon = tape.scale(recon, inv_b);

        recon_total += tape.value(recon).item();
        kl_total += tape.value(kl_term).item();

        let term = tape.sub(recon, kl_term);
        elbo = Some(match elbo {
            Some(e) => tape.add(e, term),
            None => term,
        });
        z_prev = Some(z);
    }
    ElboParts {
        elbo: elbo.unwrap(),
        recon: recon_total,
        kl: kl_total,
    }
}

fn dense_ssm_elbo(
    tape: &mut Tape,
    bound: &Bound,
    latent: usize,
    batch: &EnvBatch,
    encode: &dyn Fn(&mut Tape, &Bound, Var) -> (Var, Var),
    decode: &dyn Fn(&mut Tape, &Bound, Var) -> (Var, Var),
    init_h: Var,
    transition: &mut dyn FnMut(&mut Tape, &Bound, Var, Var, Var) -> (Var, Var, Var),
) -> ElboParts {
    let bsz = batch.obs[0].shape()[0];
    let horizon = batch.actions.len();
    let inv_b = 1.0 / bsz as f64;

    let mut h = init_h;
    let mut z_prev: Option<Var> = None;
    let mut elbo: Option<Var> = None;
    let (mut recon_total, mut kl_total) = (0.0, 0.0);

    for t in 0..=horizon {
        let o = tape.constant(batch.obs[t].clone());
        let (qm, qlv) = encode(tape, bound, o);
        let kl = if t == 0 {
            let zeros = tape.constant(Tensor::zeros(&[bsz, latent]));
            gauss::kl_diag(tape, qm, qlv, zeros, zeros)
        } else {
            let a = tape.constant(batch.actions[t - 1].clone());
            let (h_next, pm, plv) = transition(tape, bound, h, z_prev.unwrap(), a);
            h = h_next;
            gauss::kl_diag(tape, qm, qlv, pm, plv)
        };
        let kl_term = tape.sum(kl);
        let kl_term = tape.scale(kl_term, inv_b);

        let noise = tape.constant(batch.post_noise[t].clone());
        let z = gauss::reparam_sample(tape, qm, qlv, noise);
        let (dm, dlv) = decode(tape, bound, z);
        let lp = gauss::log_pdf_diag(tape, o, dm, dlv);
        let recon = tape.sum(lp);
        let recon = tape.scale(recon, inv_b);

        recon_total += tape.value(recon).item();
        kl_total += tape.value(kl_term).item();

        let term = tape.sub(recon, kl_term);
        elbo = Some(match elbo {
            Some(e) => tape.add(e, term),
            None => term,
        });
        z_prev = Some(z);
    }
    ElboParts {
        elbo: elbo.unwrap(),
        recon: recon_total,
        kl: kl_total,
    }
}

pub fn rssm_elbo(
    model: &RssmModel,
    tape: &mut Tape,
    bound: &Bound,
    batch: &EnvBatch,
) -> ElboParts {
    let bsz = batch.obs[0].shape()[0];
    let init_h = model.init_hidden(tape, bsz);
    dense_ssm_elbo(
        tape,
        bound,
        model.dims.latent,
        batch,
        &|t, b, o| model.encode(t, b, o),
        &|t, b, z| model.decode(t, b, z),
        init_h,
        &mut |t, b, h, z, a| model.transition(t, b, h, z, a),
    )
}

pub fn multi_rssm_elbo(
    model: &MultiRssmModel,
    tape: &mut Tape,
    bound: &Bound,
    env: usize,
    batch: &EnvBatch,
) -> ElboParts {
    let bsz = batch.obs[0].shape()[0];
    let init_h = model.init_hidden(tape, bsz);
    dense_ssm_elbo(
        tape,
        bound,
        model.dims.latent,
        batch,
        &|t, b, o| model.encode(t, b, o),
        &|t, b, z| model.decode(t, b, z),
        init_h,
        &mut |t, b, h, z, a| model.transition(t, b, env, h, z, a),
    )
}

/// One environment's role in a VCD step: which head it trains, which
/// belief row gates its regime mask (none for the observational regime),
/// and the trajectories it draws batches from.
pub struct VcdEnvSpec<'a> {
    pub head: usize,
    pub beta: Option<(ParamId, usize)>,
    pub trajs: &'a [Trajectory],
}

/// Optimisation state shared by all variants: Adam over the trainable
/// subset, the step counter, and the RNG stream.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub opt: Adam,
    pub rng: ChaCha20Rng,
    pub step: usize,
    trainable: Vec<bool>,
    slots: Vec<ParamId>,
}

impl Trainer {
    pub fn new(store: &ParamStore, trainable: Vec<bool>, cfg: TrainConfig) -> Self {
        assert_eq!(
            trainable.len(),
            store.len(),
            "trainer: mask covers {} params, store has {}",
            trainable.len(),
            store.len()
        );
        let slots: Vec<ParamId> = store.ids().filter(|id| trainable[id.index()]).collect();
        assert!(!slots.is_empty(), "trainer: nothing to train");
        let shapes: Vec<Vec<usize>> = slots.iter().map(|&id| store.get(id).shape().to_vec()).collect();
        let opt = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                ..Default::default()
            },
            &shapes,
        );
        Trainer {
            opt,
            rng: ChaCha20Rng::seed_from_u64(cfg.seed),
            step: 0,
            trainable,
            slots,
            cfg,
        }
    }

    pub fn trainable_mask(&self) -> &[bool] {
        &self.trainable
    }

    pub fn rng_word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn set_rng_word_pos(&mut self, pos: u128) {
        self.rng.set_word_pos(pos);
    }

    fn zero_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        self.slots
            .iter()
            .map(|&id| Tensor::zeros(store.get(id).shape()))
            .collect()
    }

    fn collect_grads(&self, tape: &Tape, bound: &Bound, acc: &mut [Tensor]) {
        for (slot, &id) in self.slots.iter().enumerate() {
            if let Some(g) = tape.grad(bound.var(id)) {
                acc[slot].add_assign(g);
            }
        }
    }

    fn apply(&mut self, store: &mut ParamStore, mut acc: Vec<Tensor>, loss: f64) -> Result<f64> {
        if !loss.is_finite() {
            return Err(CoreError::Diverged { step: self.step });
        }
        let grad_norm = clip_global_norm(&mut acc, self.cfg.grad_clip);
        let mut params = store.tensors_mut_masked(&self.trainable);
        self.opt.step(&mut params, &acc);
        self.step += 1;
        Ok(grad_norm)
    }

    /// One joint step over the given environments of a causal model.
    /// Structure penalties are added once per distinct trainable belief.
    pub fn step_vcd(
        &mut self,
        model: &VcdModel,
        store: &mut ParamStore,
        envs: &[VcdEnvSpec],
        horizon: usize,
    ) -> Result<StepMetrics> {
        let bsz = self.cfg.batch_per_env;
        let dims = model.dims;

        let picks: Vec<Vec<usize>> = envs
            .iter()
            .map(|e| (0..bsz).map(|_| self.rng.gen_range(0..e.trajs.len())).collect())
            .collect();
        struct Drawn {
            batch: EnvBatch,
            graph_noise: Tensor,
            regime_noise: Option<Tensor>,
        }
        let drawn: Vec<Drawn> = envs
            .iter()
            .zip(&picks)
            .map(|(spec, pick)| {
                let trajs: Vec<&Trajectory> = pick.iter().map(|&i| &spec.trajs[i]).collect();
                let graph_noise =
                    logistic_noise(&[dims.latent, bsz, dims.input()], &mut self.rng);
                let regime_noise = spec
                    .beta
                    .map(|_| logistic_noise(&[dims.latent, bsz], &mut self.rng));
                let batch = assemble_env_batch(&trajs, horizon, dims.latent, &mut self.rng);
                Drawn {
                    batch,
                    graph_noise,
                    regime_noise,
                }
            })
            .collect();

        let mut acc = self.zero_grads(store);
        let mut loss = 0.0;
        let (mut elbo_sum, mut recon_sum, mut kl_sum) = (0.0, 0.0, 0.0);
        let mut per_env_elbo = Vec::with_capacity(envs.len());

        for (spec, d) in envs.iter().zip(&drawn) {
            let mut tape = Tape::with_capacity(8192);
            let bound = store.bind(&mut tape, |id| self.trainable[id.index()]);
            let gn = tape.constant(d.graph_noise.clone());
            let graph = model.graph_mask(&mut tape, &bound, gn);
            let regime = spec.beta.map(|(pid, row)| {
                let rn = tape.constant(d.regime_noise.clone().unwrap());
                model.regime_mask(&mut tape, &bound, pid, row, rn)
            });
            let masks = VcdMasks {
                graph: Some(graph),
                regime,
            };
            let parts = vcd_elbo(model, &mut tape, &bound, spec.head, &masks, &d.batch);
            let e = tape.value(parts.elbo).item();
            per_env_elbo.push(e);
            elbo_sum += e;
            recon_sum += parts.recon;
            kl_sum += parts.kl;
            loss -= e;
            let neg = tape.neg(parts.elbo);
            tape.backward(neg);
            self.collect_grads(&tape, &bound, &mut acc);
        }

        // Sparsity penalties once per trainable belief matrix.
        let mut penalty = 0.0;
        {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, |id| self.trainable[id.index()]);
            let mut total: Option<Var> = None;
            let push = |tape: &mut Tape, term: Var, total: &mut Option<Var>| {
                *total = Some(match *total {
                    Some(t) => tape.add(t, term),
                    None => term,
                });
            };
            if self.trainable[model.alpha.index()] {
                let e = expected_edges(&mut tape, bound.var(model.alpha));
                let e = tape.scale(e, self.cfg.lambda_graph);
                push(&mut tape, e, &mut total);
            }
            let mut seen: Vec<ParamId> = Vec::new();
            for spec in envs {
                if let Some((pid, _)) = spec.beta {
                    if self.trainable[pid.index()] && !seen.contains(&pid) {
                        seen.push(pid);
                        let e = expected_edges(&mut tape, bound.var(pid));
                        let e = tape.scale(e, self.cfg.lambda_regime);
                        push(&mut tape, e, &mut total);
                    }
                }
            }
            if let Some(p) = total {
                penalty = tape.value(p).item();
                loss += penalty;
                tape.backward(p);
                self.collect_grads(&tape, &bound, &mut acc);
            }
        }

        let expected_graph_edges = sum_sigmoid(store.get(model.alpha));
        let mut expected_regime_flags = 0.0;
        let mut seen: Vec<ParamId> = Vec::new();
        for spec in envs {
            if let Some((pid, _)) = spec.beta {
                if !seen.contains(&pid) {
                    seen.push(pid);
                    expected_regime_flags += sum_sigmoid(store.get(pid));
                }
            }
        }

        let step = self.step;
        let grad_norm = self.apply(store, acc, loss)?;
        Ok(StepMetrics {
            step,
            loss,
            elbo: elbo_sum,
            recon: recon_sum,
            kl: kl_sum,
            penalty,
            expected_graph_edges,
            expected_regime_flags,
            grad_norm,
            per_env_elbo,
        })
    }

    /// One step of the monolithic baseline over the given environments,
    /// all sharing the single transition.
    pub fn step_rssm(
        &mut self,
        model: &RssmModel,
        store: &mut ParamStore,
        envs: &[&[Trajectory]],
        horizon: usize,
    ) -> Result<StepMetrics> {
        let bsz = self.cfg.batch_per_env;
        let picks: Vec<Vec<usize>> = envs
            .iter()
            .map(|t| (0..bsz).map(|_| self.rng.gen_range(0..t.len())).collect())
            .collect();
        let batches: Vec<EnvBatch> = envs
            .iter()
            .zip(&picks)
            .map(|(trajs, pick)| {
                let picked: Vec<&Trajectory> = pick.iter().map(|&i| &trajs[i]).collect();
                assemble_env_batch(&picked, horizon, model.dims.latent, &mut self.rng)
            })
            .collect();

        let mut acc = self.zero_grads(store);
        let mut loss = 0.0;
        let (mut elbo_sum, mut recon_sum, mut kl_sum) = (0.0, 0.0, 0.0);
        let mut per_env_elbo = Vec::with_capacity(envs.len());
        for batch in &batches {
            let mut tape = Tape::with_capacity(4096);
            let bound = store.bind(&mut tape, |id| self.trainable[id.index()]);
            let parts = rssm_elbo(model, &mut tape, &bound, batch);
            let e = tape.value(parts.elbo).item();
            per_env_elbo.push(e);
            elbo_sum += e;
            recon_sum += parts.recon;
            kl_sum += parts.kl;
            loss -= e;
            let neg = tape.neg(parts.elbo);
            tape.backward(neg);
            self.collect_grads(&tape, &bound, &mut acc);
        }
        let step = self.step;
        let grad_norm = self.apply(store, acc, loss)?;
        Ok(StepMetrics {
            step,
            loss,
            elbo: elbo_sum,
            recon: recon_sum,
            kl: kl_sum,
            penalty: 0.0,
            expected_graph_edges: 0.0,
            expected_regime_flags: 0.0,
            grad_norm,
            per_env_elbo,
        })
    }

    /// One step over (transition index, trajectories) pairs of the
    /// per-environment baseline.
    pub fn step_multi_rssm(
        &mut self,
        model: &MultiRssmModel,
        store: &mut ParamStore,
        envs: &[(usize, &[Trajectory])],
        horizon: usize,
    ) -> Result<StepMetrics> {
        let bsz = self.cfg.batch_per_env;
        let picks: Vec<Vec<usize>> = envs
            .iter()
            .map(|(_, t)| (0..bsz).map(|_| self.rng.gen_range(0..t.len())).collect())
            .collect();
        let batches: Vec<EnvBatch> = envs
            .iter()
            .zip(&picks)
            .map(|((_, trajs), pick)| {
                let picked: Vec<&Trajectory> = pick.iter().map(|&i| &trajs[i]).collect();
                assemble_env_batch(&picked, horizon, model.dims.latent, &mut self.rng)
            })
            .collect();

        let mut acc = self.zero_grads(store);
        let mut loss = 0.0;
        let (mut elbo_sum, mut recon_sum, mut kl_sum) = (0.0, 0.0, 0.0);
        let mut per_env_elbo = Vec::with_capacity(envs.len());
        for ((env, _), batch) in envs.iter().zip(&batches) {
            let mut tape = Tape::with_capacity(4096);
            let bound = store.bind(&mut tape, |id| self.trainable[id.index()]);
            let parts = multi_rssm_elbo(model, &mut tape, &bound, *env, batch);
            let e = tape.value(parts.elbo).item();
            per_env_elbo.push(e);
            elbo_sum += e;
            recon_sum += parts.recon;
            kl_sum += parts.kl;
            loss -= e;
            let neg = tape.neg(parts.elbo);
            tape.backward(neg);
            self.collect_grads(&tape, &bound, &mut acc);
        }
        let step = self.step;
        let grad_norm = self.apply(store, acc, loss)?;
        Ok(StepMetrics {
            step,
            loss,
            elbo: elbo_sum,
            recon: recon_sum,
            kl: kl_sum,
            penalty: 0.0,
            expected_graph_edges: 0.0,
            expected_regime_flags: 0.0,
            grad_norm,
            per_env_elbo,
        })
    }
}

fn sum_sigmoid(t: &Tensor) -> f64 {
    t.data().iter().map(|&x| 1.0 / (1.0 + (-x).exp())).sum()
}

/// Environment specs for joint training: head k trains on dataset slot k,
/// regime rows follow the intervened environments in order. Fails unless
/// slot 0 is observational and the others are interventions.
pub fn training_env_specs<'a>(model: &VcdModel, data: &'a Dataset) -> Result<Vec<VcdEnvSpec<'a>>> {
    if data.envs.is_empty() || data.envs[0].intervention != 0 {
        return Err(CoreError::Config(
            "joint training expects the observational environment first".into(),
        ));
    }
    if data.envs.iter().skip(1).any(|e| e.intervention == 0) {
        return Err(CoreError::Config(
            "joint training expects exactly one observational environment".into(),
        ));
    }
    if model.n_envs != data.envs.len() {
        return Err(CoreError::Config(format!(
            "model has {} environment heads, dataset has {} environments",
            model.n_envs,
            data.envs.len()
        )));
    }
    Ok(data
        .envs
        .iter()
        .enumerate()
        .map(|(e, env)| VcdEnvSpec {
            head: e,
            beta: (e > 0).then(|| (model.beta, e - 1)),
            trajs: &env.train,
        })
        .collect())
}

pub fn train_vcd(
    model: &VcdModel,
    store: &mut ParamStore,
    data: &Dataset,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&StepMetrics),
) -> Result<Vec<f64>> {
    let specs = training_env_specs(model, data)?;
    let mut trainer = Trainer::new(store, vec![true; store.len()], *cfg);
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let m = trainer.step_vcd(model, store, &specs, data.horizon)?;
        losses.push(m.loss);
        observer(&m);
    }
    Ok(losses)
}

pub fn train_rssm(
    model: &RssmModel,
    store: &mut ParamStore,
    data: &Dataset,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&StepMetrics),
) -> Result<Vec<f64>> {
    let envs: Vec<&[Trajectory]> = data.envs.iter().map(|e| e.train.as_slice()).collect();
    let mut trainer = Trainer::new(store, vec![true; store.len()], *cfg);
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let m = trainer.step_rssm(model, store, &envs, data.horizon)?;
        losses.push(m.loss);
        observer(&m);
    }
    Ok(losses)
}

pub fn train_multi_rssm(
    model: &MultiRssmModel,
    store: &mut ParamStore,
    data: &Dataset,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&StepMetrics),
) -> Result<Vec<f64>> {
    if model.transitions.len() != data.envs.len() {
        return Err(CoreError::Config(format!(
            "model has {} transitions, dataset has {} environments",
            model.transitions.len(),
            data.envs.len()
        )));
    }
    let envs: Vec<(usize, &[Trajectory])> = data
        .envs
        .iter()
        .enumerate()
        .map(|(e, env)| (e, env.train.as_slice()))
        .collect();
    let mut trainer = Trainer::new(store, vec![true; store.len()], *cfg);
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let m = trainer.step_multi_rssm(model, store, &envs, data.horizon)?;
        losses.push(m.loss);
        observer(&m);
    }
    Ok(losses)
}

/// Handle to the parameters added for one adaptation run.
pub struct AdaptedVcd {
    pub head: usize,
    pub beta: ParamId,
    pub losses: Vec<f64>,
}

/// Fit a new environment with everything frozen except a warm-started
/// mechanism head and its one-row target belief.
pub fn adapt_vcd(
    model: &mut VcdModel,
    store: &mut ParamStore,
    trajs: &[Trajectory],
    cfg: &TrainConfig,
    mut observer: impl FnMut(&StepMetrics),
) -> Result<AdaptedVcd> {
    if trajs.is_empty() {
        return Err(CoreError::Config("adaptation needs at least one trajectory".into()));
    }
    let (head, beta) = model.add_adapted_head(store);
    let mut mask = vec![false; store.len()];
    for id in model.head_param_ids(head) {
        mask[id.index()] = true;
    }
    mask[beta.index()] = true;
    let mut trainer = Trainer::new(store, mask, *cfg);
    let horizon = trajs[0].horizon();
    let specs = [VcdEnvSpec {
        head,
        beta: Some((beta, 0)),
        trajs,
    }];
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let m = trainer.step_vcd(model, store, &specs, horizon)?;
        losses.push(m.loss);
        observer(&m);
    }
    Ok(AdaptedVcd { head, beta, losses })
}

/// Fine-tune the baseline transition on a new environment; encoder and
/// decoder stay frozen.
pub fn adapt_rssm(
    model: &RssmModel,
    store: &mut ParamStore,
    trajs: &[Trajectory],
    cfg: &TrainConfig,
    mut observer: impl FnMut(&StepMetrics),
) -> Result<Vec<f64>> {
    if trajs.is_empty() {
        return Err(CoreError::Config("adaptation needs at least one trajectory".into()));
    }
    let mut mask = vec![false; store.len()];
    for id in model.transition_param_ids() {
        mask[id.index()] = true;
    }
    let mut trainer = Trainer::new(store, mask, *cfg);
    let horizon = trajs[0].horizon();
    let envs = [trajs];
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let m = trainer.step_rssm(model, store, &envs, horizon)?;
        losses.push(m.loss);
        observer(&m);
    }
    Ok(losses)
}

/// Train a fresh randomly initialised transition for a new environment;
/// encoder and decoder stay frozen. Returns the new transition's index.
pub fn adapt_multi_rssm(
    model: &mut MultiRssmModel,
    store: &mut ParamStore,
    trajs: &[Trajectory],
    cfg: &TrainConfig,
    mut observer: impl FnMut(&StepMetrics),
) -> Result<(usize, Vec<f64>)> {
    if trajs.is_empty() {
        return Err(CoreError::Config("adaptation needs at least one trajectory".into()));
    }
    let mut init_rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x5EED_1A17);
    let env = model.add_transition(store, &mut init_rng);
    let mut mask = vec![false; store.len()];
    for id in model.transition_param_ids(env) {
        mask[id.index()] = true;
    }
    let mut trainer = Trainer::new(store, mask, *cfg);
    let horizon = trajs[0].horizon();
    let envs = [(env, trajs)];
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let m = trainer.step_multi_rssm(model, store, &envs, horizon)?;
        losses.push(m.loss);
        observer(&m);
    }
    Ok((env, losses))
}
