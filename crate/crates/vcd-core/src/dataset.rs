//! Trajectory generation across intervened environments.
//!
//! Every trajectory has its own ChaCha20 stream keyed by (master seed,
//! environment id, trajectory index, role), so datasets are reproducible
//! and insensitive to generation order. Observations and actions are
//! rounded through f32 at generation time; what sits in memory is exactly
//! what a round trip through the on-disk format yields.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::Result;
use crate::sim::{
    self, draw_action, EnvParams, Mixing, ACTION_DIM, ACTION_HOLD, BOX_HALF_WIDTH, STATE_DIM,
};
use crate::tensor::Tensor;

const ROLE_TRAIN: u64 = 0;
const ROLE_VAL: u64 = 1;
const ROLE_MIXING: u64 = 2;

/// One rollout: observations [T+1, 8] and actions [T, 2], row-major flat.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len() / ACTION_DIM
    }

    pub fn obs_at(&self, t: usize) -> &[f64] {
        &self.obs[t * STATE_DIM..(t + 1) * STATE_DIM]
    }

    pub fn action_at(&self, t: usize) -> &[f64] {
        &self.actions[t * ACTION_DIM..(t + 1) * ACTION_DIM]
    }
}

#[derive(Clone, Debug)]
pub struct EnvData {
    pub intervention: usize,
    pub train: Vec<Trajectory>,
    pub val: Vec<Trajectory>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub envs: Vec<EnvData>,
    pub mixing: Mixing,
    pub horizon: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub seed: u64,
    pub interventions: Vec<usize>,
    pub train_per_env: usize,
    pub val_per_env: usize,
    pub horizon: usize,
    pub quantize: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            interventions: default_training_envs(),
            train_per_env: 2000,
            val_per_env: 400,
            horizon: 50,
            quantize: true,
        }
    }
}

/// The six regimes models are trained on jointly: the observational system,
/// one spring removal, one mass scaling, and three coordinate freezes.
pub fn default_training_envs() -> Vec<usize> {
    vec![0, 1, 5, 11, 14, 17]
}

fn stream_seed(master: u64, env: usize, index: usize, role: u64) -> [u8; 32] {
    let mut s = [0u8; 32];
    s[0..8].copy_from_slice(&master.to_le_bytes());
    s[8..16].copy_from_slice(&(env as u64).to_le_bytes());
    s[16..24].copy_from_slice(&(index as u64).to_le_bytes());
    s[24..32].copy_from_slice(&role.to_le_bytes());
    s
}

fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

/// Roll one trajectory: initial positions uniform in the inner half of the
/// box, actions standard normal held for [`ACTION_HOLD`] steps.
pub fn generate_trajectory<R: Rng>(
    env: &EnvParams,
    mixing: &Mixing,
    horizon: usize,
    quantize_io: bool,
    rng: &mut R,
) -> Trajectory {
    let q = |x: f64| if quantize_io { quantize(x) } else { x };
    let mut state = [0.0f64; STATE_DIM];
    for c in state.iter_mut() {
        *c = rng.gen_range(-BOX_HALF_WIDTH / 2.0..BOX_HALF_WIDTH / 2.0);
    }
    let mut obs = Vec::with_capacity((horizon + 1) * STATE_DIM);
    let mut actions = Vec::with_capacity(horizon * ACTION_DIM);
    let mut a = [0.0f64; ACTION_DIM];
    for t in 0..horizon {
        obs.extend(mixing.observe(&state).iter().map(|&x| q(x)));
        if t % ACTION_HOLD == 0 {
            let raw = draw_action(rng);
            a = [q(raw[0]), q(raw[1])];
        }
        actions.extend_from_slice(&a);
        sim::step(env, &mut state, a);
    }
    obs.extend(mixing.observe(&state).iter().map(|&x| q(x)));
    Trajectory { obs, actions }
}

pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    use crate::error::CoreError;
    if cfg.horizon == 0 {
        return Err(CoreError::Config("horizon must be positive".into()));
    }
    if cfg.interventions.is_empty() {
        return Err(CoreError::Config("no environments requested".into()));
    }
    let params: Vec<EnvParams> = cfg
        .interventions
        .iter()
        .map(|&id| EnvParams::for_intervention(id))
        .collect::<Result<_>>()?;

    let mut mix_rng = ChaCha20Rng::from_seed(stream_seed(cfg.seed, 0, 0, ROLE_MIXING));
    let mixing = Mixing::sample(&mut mix_rng);

    let mut envs = Vec::with_capacity(cfg.interventions.len());
    for (&id, env) in cfg.interventions.iter().zip(&params) {
        let roll = |count: usize, role: u64| -> Vec<Trajectory> {
            (0..count)
                .map(|i| {
                    let mut rng = ChaCha20Rng::from_seed(stream_seed(cfg.seed, id, i, role));
                    generate_trajectory(env, &mixing, cfg.horizon, cfg.quantize, &mut rng)
                })
                .collect()
        };
        envs.push(EnvData {
            intervention: id,
            train: roll(cfg.train_per_env, ROLE_TRAIN),
            val: roll(cfg.val_per_env, ROLE_VAL),
        });
    }
    Ok(Dataset {
        envs,
        mixing,
        horizon: cfg.horizon,
        seed: cfg.seed,
    })
}

/// Stack observations at time `t` from the picked trajectories into [B, 8].
pub fn batch_obs(trajs: &[&Trajectory], t: usize) -> Tensor {
    let mut data = Vec::with_capacity(trajs.len() * STATE_DIM);
    for tr in trajs {
        data.extend_from_slice(tr.obs_at(t));
    }
    Tensor::from_vec(&[trajs.len(), STATE_DIM], data)
}

/// Stack actions at time `t` into [B, 2].
pub fn batch_actions(trajs: &[&Trajectory], t: usize) -> Tensor {
    let mut data = Vec::with_capacity(trajs.len() * ACTION_DIM);
    for tr in trajs {
        data.extend_from_slice(tr.action_at(t));
    }
    Tensor::from_vec(&[trajs.len(), ACTION_DIM], data)
}
