//! Multi-body benchmark system: four particles in a reflecting box with
//! springs and inverse-square pair forces, first-order (overdamped)
//! dynamics, and a fixed catalogue of interventions.
//!
//! State is the eight position coordinates [x1,y1,...,x4,y4]. Observations
//! are a random linear mixing of the state, sampled once per dataset.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

pub const N_PARTICLES: usize = 4;
pub const STATE_DIM: usize = 8;
pub const ACTION_DIM: usize = 2;
/// Intervention ids run 1..=N_INTERVENTIONS; 0 is the observational regime.
pub const N_INTERVENTIONS: usize = 18;

pub const DT: f64 = 0.05;
pub const BOX_HALF_WIDTH: f64 = 1.0;
pub const SPRING_STIFFNESS: f64 = 2.0;
pub const SPRING_REST_LEN: f64 = 0.4;
pub const PAIR_STRENGTH: f64 = 0.2;
pub const ACTION_GAIN: f64 = 1.0;
/// Piecewise-constant actions are redrawn every this many steps.
pub const ACTION_HOLD: usize = 5;

const R_MIN: f64 = 1e-6;
const INTERVENTION_FACTOR: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spring {
    pub i: usize,
    pub j: usize,
    pub stiffness: f64,
    pub rest_len: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairForce {
    pub i: usize,
    pub j: usize,
    /// Positive attracts, negative repels.
    pub strength: f64,
}

/// Full physical configuration of one environment.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvParams {
    pub masses: [f64; N_PARTICLES],
    pub springs: Vec<Spring>,
    pub pairs: Vec<PairForce>,
    pub frozen: [bool; STATE_DIM],
}

impl EnvParams {
    /// The observational system: chain springs 1-2 and 2-3, particle 1
    /// attracting and particle 3 repelling the actuated particle 4.
    pub fn base() -> Self {
        EnvParams {
            masses: [1.0; N_PARTICLES],
            springs: vec![
                Spring { i: 0, j: 1, stiffness: SPRING_STIFFNESS, rest_len: SPRING_REST_LEN },
                Spring { i: 1, j: 2, stiffness: SPRING_STIFFNESS, rest_len: SPRING_REST_LEN },
            ],
            pairs: vec![
                PairForce { i: 0, j: 3, strength: PAIR_STRENGTH },
                PairForce { i: 2, j: 3, strength: -PAIR_STRENGTH },
            ],
            frozen: [false; STATE_DIM],
        }
    }

    /// Environment for intervention `id` (0 = observational).
    pub fn for_intervention(id: usize) -> Result<Self> {
        if id > N_INTERVENTIONS {
            return Err(CoreError::Config(format!(
                "intervention id {id} out of range 0..={N_INTERVENTIONS}"
            )));
        }
        let mut env = Self::base();
        match id {
            0 => {}
            1 => env.springs.retain(|s| (s.i, s.j) != (0, 1)),
            2 => env.springs.retain(|s| (s.i, s.j) != (1, 2)),
            3..=5 => env.masses[id - 3] *= INTERVENTION_FACTOR,
            6..=8 => env.masses[id - 6] /= INTERVENTION_FACTOR,
            9 => env.springs[0].stiffness *= INTERVENTION_FACTOR,
            10 => env.springs[1].stiffness *= INTERVENTION_FACTOR,
            11..=18 => env.frozen[id - 11] = true,
            _ => unreachable!(),
        }
        Ok(env)
    }

    fn partners(&self, p: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for s in &self.springs {
            if s.i == p {
                out.push(s.j);
            } else if s.j == p {
                out.push(s.i);
            }
        }
        for f in &self.pairs {
            if f.i == p {
                out.push(f.j);
            } else if f.j == p {
                out.push(f.i);
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

pub fn intervention_name(id: usize) -> String {
    match id {
        0 => "observational".into(),
        1 => "remove spring 1-2".into(),
        2 => "remove spring 2-3".into(),
        3..=5 => format!("mass {} x3", id - 2),
        6..=8 => format!("mass {} /3", id - 5),
        9 => "stiffen spring 1-2 x3".into(),
        10 => "stiffen spring 2-3 x3".into(),
        11..=18 => {
            let c = id - 11;
            format!("freeze {}{}", if c % 2 == 0 { "x" } else { "y" }, c / 2 + 1)
        }
        _ => panic!("intervention id {id} out of range"),
    }
}

/// State coordinates whose mechanism differs from the observational one
/// under intervention `id`.
pub fn intervention_targets(id: usize) -> Vec<usize> {
    match id {
        0 => vec![],
        // Cutting or stiffening a spring changes both endpoint mechanisms.
        1 | 9 => vec![0, 1, 2, 3],
        2 | 10 => vec![2, 3, 4, 5],
        // Mass scaling changes the particle's own mobility and, through the
        // mass-scaled pair force, its pair partner. Particle 2 has no pair.
        3 | 6 => vec![0, 1, 6, 7],
        4 | 7 => vec![2, 3],
        5 | 8 => vec![4, 5, 6, 7],
        11..=18 => vec![id - 11],
        _ => panic!("intervention id {id} out of range"),
    }
}

/// Advance positions by one overdamped step, in place. Forces are computed
/// once per unordered pair and applied with opposite signs, so reaction
/// forces cancel exactly in floating point.
pub fn step(env: &EnvParams, state: &mut [f64; STATE_DIM], action: [f64; ACTION_DIM]) {
    let mut force = [0.0f64; STATE_DIM];

    for s in &env.springs {
        let dx = state[2 * s.j] - state[2 * s.i];
        let dy = state[2 * s.j + 1] - state[2 * s.i + 1];
        let r = (dx * dx + dy * dy).sqrt().max(R_MIN);
        let scale = s.stiffness * (r - s.rest_len) / r;
        let (fx, fy) = (scale * dx, scale * dy);
        force[2 * s.i] += fx;
        force[2 * s.i + 1] += fy;
        force[2 * s.j] -= fx;
        force[2 * s.j + 1] -= fy;
    }

    for f in &env.pairs {
        let dx = state[2 * f.j] - state[2 * f.i];
        let dy = state[2 * f.j + 1] - state[2 * f.i + 1];
        let r = (dx * dx + dy * dy).sqrt().max(R_MIN);
        let scale = f.strength * env.masses[f.i] * env.masses[f.j] / (r * r * r);
        let (fx, fy) = (scale * dx, scale * dy);
        force[2 * f.i] += fx;
        force[2 * f.i + 1] += fy;
        force[2 * f.j] -= fx;
        force[2 * f.j + 1] -= fy;
    }

    force[2 * (N_PARTICLES - 1)] += ACTION_GAIN * action[0];
    force[2 * (N_PARTICLES - 1) + 1] += ACTION_GAIN * action[1];

    for c in 0..STATE_DIM {
        if env.frozen[c] {
            continue;
        }
        state[c] += DT * force[c] / env.masses[c / 2];
        state[c] = reflect(state[c]);
    }
}

/// Fold a coordinate back into [-B, B] as a perfectly elastic wall would.
/// Inside the box this is the identity, bit for bit; the triangular fold
/// only touches overshoots.
pub fn reflect(x: f64) -> f64 {
    if (-BOX_HALF_WIDTH..=BOX_HALF_WIDTH).contains(&x) {
        return x;
    }
    let span = 4.0 * BOX_HALF_WIDTH;
    let y = (x + BOX_HALF_WIDTH).rem_euclid(span);
    if y < 2.0 * BOX_HALF_WIDTH {
        y - BOX_HALF_WIDTH
    } else {
        3.0 * BOX_HALF_WIDTH - y
    }
}

/// Adjacency of the one-step dynamics: entry (p, c) is 1 when next-state
/// coordinate `c` reads input `p`. Rows 0..8 are state coordinates, rows
/// 8..10 the two action channels (attributed to both coordinates of the
/// actuated particle). A frozen coordinate keeps only itself as parent; it
/// still feeds its neighbours.
pub fn ground_truth_graph(env: &EnvParams) -> Tensor {
    let mut g = Tensor::zeros(&[STATE_DIM + ACTION_DIM, STATE_DIM]);
    for c in 0..STATE_DIM {
        g.set(&[c, c], 1.0);
        if env.frozen[c] {
            continue;
        }
        let p = c / 2;
        g.set(&[2 * p, c], 1.0);
        g.set(&[2 * p + 1, c], 1.0);
        for q in env.partners(p) {
            g.set(&[2 * q, c], 1.0);
            g.set(&[2 * q + 1, c], 1.0);
        }
        if p == N_PARTICLES - 1 {
            g.set(&[STATE_DIM, c], 1.0);
            g.set(&[STATE_DIM + 1, c], 1.0);
        }
    }
    g
}

/// Random observation mixing o = A s with a well-conditioned A.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct Mixing {
    pub a: Tensor,
    pub a_inv: Tensor,
}

impl Mixing {
    pub fn identity() -> Self {
        let mut a = Tensor::zeros(&[STATE_DIM, STATE_DIM]);
        for i in 0..STATE_DIM {
            a.set(&[i, i], 1.0);
        }
        Mixing { a: a.clone(), a_inv: a }
    }

    /// Draw unit-Gaussian entries, rejecting matrices with 2-norm condition
    /// number at or above 1e3.
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        loop {
            let a = Tensor::randn(&[STATE_DIM, STATE_DIM], rng);
            if let Some(cond) = condition_number(&a) {
                if cond < 1e3 {
                    let a_inv = invert(&a);
                    return Mixing { a, a_inv };
                }
            }
        }
    }

    pub fn observe(&self, state: &[f64; STATE_DIM]) -> [f64; STATE_DIM] {
        mat_vec(&self.a, state)
    }

    pub fn unmix(&self, obs: &[f64; STATE_DIM]) -> [f64; STATE_DIM] {
        mat_vec(&self.a_inv, obs)
    }
}

fn mat_vec(m: &Tensor, v: &[f64; STATE_DIM]) -> [f64; STATE_DIM] {
    let mut out = [0.0; STATE_DIM];
    let d = m.data();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &d[i * STATE_DIM..(i + 1) * STATE_DIM];
        *o = crate::tensor::dot(row, v);
    }
    out
}

/// 2-norm condition number via Jacobi eigenvalues of AᵀA. None when the
/// smallest eigenvalue is not positive.
pub fn condition_number(a: &Tensor) -> Option<f64> {
    let n = a.shape()[0];
    assert_eq!(a.shape(), &[n, n], "condition_number: square input required");
    let mut g = vec![0.0; n * n];
    gemm_ata(&mut g, a.data(), n);
    let eig = jacobi_eigenvalues(&mut g, n);
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for &e in &eig {
        lo = lo.min(e);
        hi = hi.max(e);
    }
    if lo <= 0.0 {
        None
    } else {
        Some((hi / lo).sqrt())
    }
}

fn gemm_ata(g: &mut [f64], a: &[f64], n: usize) {
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..n {
                s += a[p * n + i] * a[p * n + j];
            }
            g[i * n + j] = s;
        }
    }
}

/// Cyclic Jacobi on a symmetric matrix, destroying it; returns eigenvalues.
fn jacobi_eigenvalues(m: &mut [f64], n: usize) -> Vec<f64> {
    for _ in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off.sqrt() < 1e-12 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i * n + i]).collect()
}

/// Dense inverse by Gauss-Jordan with partial pivoting. Panics on a pivot
/// below 1e-12; callers only invert condition-checked matrices.
pub fn invert(a: &Tensor) -> Tensor {
    let n = a.shape()[0];
    assert_eq!(a.shape(), &[n, n], "invert: square input required");
    let mut w: Vec<f64> = Vec::with_capacity(n * 2 * n);
    for i in 0..n {
        w.extend_from_slice(&a.data()[i * n..(i + 1) * n]);
        w.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
    }
    let cols = 2 * n;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&r1, &r2| {
                w[r1 * cols + col]
                    .abs()
                    .total_cmp(&w[r2 * cols + col].abs())
            })
            .unwrap();
        assert!(
            w[pivot * cols + col].abs() > 1e-12,
            "invert: singular matrix (pivot column {col})"
        );
        if pivot != col {
            for k in 0..cols {
                w.swap(col * cols + k, pivot * cols + k);
            }
        }
        let diag = w[col * cols + col];
        for k in 0..cols {
            w[col * cols + k] /= diag;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = w[r * cols + col];
            if f == 0.0 {
                continue;
            }
            for k in 0..cols {
                w[r * cols + k] -= f * w[col * cols + k];
            }
        }
    }
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        out.extend_from_slice(&w[i * cols + n..(i + 1) * cols]);
    }
    Tensor::from_vec(&[n, n], out)
}

/// Draw one standard-normal action pair.
pub fn draw_action<R: Rng>(rng: &mut R) -> [f64; ACTION_DIM] {
    [rng.sample(StandardNormal), rng.sample(StandardNormal)]
}
