//! Model definitions: a flat parameter store, dense and per-mechanism
//! layers, and the three world-model variants that share one encoder and
//! decoder architecture.
//!
//! Parameters live in a [`ParamStore`]; models hold ids into it. Binding a
//! store to a tape makes each parameter a differentiable leaf or a frozen
//! constant, which is how adaptation freezes everything but the new
//! mechanism heads.

use rand::Rng;

use crate::structure::sample_mask_st;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Smallest representable log-variance; raw head outputs are clipped here.
pub const LOGVAR_FLOOR: f64 = -3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "param store: duplicate name {name}"
        );
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.tensors)
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Put every parameter on the tape, as a leaf when `trainable` says so
    /// and as a constant otherwise. Constants take no part in backward.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(ParamId) -> bool) -> Bound {
        let vars = self
            .ids()
            .map(|id| {
                let t = self.tensors[id.0].clone();
                if trainable(id) {
                    tape.leaf(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn bind_all(&self, tape: &mut Tape) -> Bound {
        self.bind(tape, |_| true)
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.bind(tape, |_| false)
    }

    /// Mutable views of the parameters picked by `mask`, in id order.
    pub fn tensors_mut_masked(&mut self, mask: &[bool]) -> Vec<&mut Tensor> {
        assert_eq!(mask.len(), self.tensors.len(), "trainability mask length");
        self.tensors
            .iter_mut()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(t, _)| t)
            .collect()
    }
}

/// Tape variables for one binding of a store, indexed by [`ParamId`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

fn xavier<R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::rand_uniform(shape, -limit, limit, rng)
}

// ── dense layers ───────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Linear {
            w: store.add(format!("{prefix}.w"), xavier(&[out_dim, in_dim], in_dim, out_dim, rng)),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[out_dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let h = tape.matmul_nt(x, bound.var(self.w));
        let shape = tape.value(h).shape().to_vec();
        let b = tape.broadcast(bound.var(self.b), &shape);
        tape.add(h, b)
    }
}

/// Dense MLP with tanh between layers and a linear read-out.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "mlp: need at least input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{prefix}.l{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, bound, h);
            if i + 1 < self.layers.len() {
                h = tape.tanh(h);
            }
        }
        h
    }
}

/// MLP head for a diagonal Gaussian: read-out is [mean, logvar] with the
/// log-variance clipped at [`LOGVAR_FLOOR`].
#[derive(Clone, Debug)]
pub struct GaussianMlp {
    pub mlp: Mlp,
    pub out_dim: usize,
}

impl GaussianMlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        GaussianMlp {
            mlp: Mlp::new(store, prefix, &[in_dim, hidden, hidden, 2 * out_dim], rng),
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> (Var, Var) {
        let out = self.mlp.forward(tape, bound, x);
        let mean = tape.slice_last(out, 0, self.out_dim);
        let raw = tape.slice_last(out, self.out_dim, self.out_dim);
        let logvar = tape.max_const(raw, LOGVAR_FLOOR);
        (mean, logvar)
    }
}

#[derive(Clone, Debug)]
pub struct DenseGru {
    wr: ParamId,
    ur: ParamId,
    br: ParamId,
    wu: ParamId,
    uu: ParamId,
    bu: ParamId,
    wc: ParamId,
    uc: ParamId,
    bc: ParamId,
    pub hidden: usize,
}

impl DenseGru {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let mut w = |n: &str, o: usize, i: usize, rng: &mut R| {
            store.add(format!("{prefix}.{n}"), xavier(&[o, i], i, o, rng))
        };
        let (wr, ur) = (w("wr", hidden, in_dim, rng), w("ur", hidden, hidden, rng));
        let (wu, uu) = (w("wu", hidden, in_dim, rng), w("uu", hidden, hidden, rng));
        let (wc, uc) = (w("wc", hidden, in_dim, rng), w("uc", hidden, hidden, rng));
        let mut b = |n: &str| store.add(format!("{prefix}.{n}"), Tensor::zeros(&[hidden]));
        DenseGru {
            wr,
            ur,
            br: b("br"),
            wu,
            uu,
            bu: b("bu"),
            wc,
            uc,
            bc: b("bc"),
            hidden,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, h: Var, x: Var) -> Var {
        let batch = tape.value(h).shape()[0];
        let gate = |tape: &mut Tape, w: ParamId, u: ParamId, b: ParamId, hin: Var| {
            let xs = tape.matmul_nt(x, bound.var(w));
            let hs = tape.matmul_nt(hin, bound.var(u));
            let s = tape.add(xs, hs);
            let bb = tape.broadcast(bound.var(b), &[batch, self.hidden]);
            tape.add(s, bb)
        };
        let r = gate(tape, self.wr, self.ur, self.br, h);
        let r = tape.sigmoid(r);
        let u = gate(tape, self.wu, self.uu, self.bu, h);
        let u = tape.sigmoid(u);
        let rh = tape.mul(r, h);
        let c = gate(tape, self.wc, self.uc, self.bc, rh);
        let c = tape.tanh(c);
        let uh = tape.mul(u, h);
        let one_minus_u = tape.neg(u);
        let one_minus_u = tape.add_scalar(one_minus_u, 1.0);
        let uc2 = tape.mul(one_minus_u, c);
        tape.add(uh, uc2)
    }
}

// ── grouped (per-mechanism) layers ─────────────────────────────────────

#[derive(Clone, Debug)]
pub struct GroupedLinear {
    pub w: ParamId,
    pub b: ParamId,
    pub groups: usize,
    pub out_dim: usize,
}

impl GroupedLinear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        groups: usize,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        GroupedLinear {
            w: store.add(
                format!("{prefix}.w"),
                xavier(&[groups, out_dim, in_dim], in_dim, out_dim, rng),
            ),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[groups, out_dim])),
            groups,
            out_dim,
        }
    }

    /// x: [G, B, in] → [G, B, out], every group with its own weights.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let batch = tape.value(x).shape()[1];
        let h = tape.bmm(x, bound.var(self.w), true);
        let b = tape.reshape(bound.var(self.b), &[self.groups, 1, self.out_dim]);
        let b = tape.broadcast(b, &[self.groups, batch, self.out_dim]);
        tape.add(h, b)
    }
}

#[derive(Clone, Debug)]
pub struct GroupedMlp {
    pub layers: Vec<GroupedLinear>,
}

impl GroupedMlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        groups: usize,
        dims: &[usize],
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "grouped mlp: need input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| GroupedLinear::new(store, &format!("{prefix}.l{i}"), groups, w[0], w[1], rng))
            .collect();
        GroupedMlp { layers }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, bound, h);
            if i + 1 < self.layers.len() {
                h = tape.tanh(h);
            }
        }
        h
    }

    /// New head with the same shapes, seeded from this head's current
    /// values. Used to warm-start adaptation.
    pub fn duplicated(&self, store: &mut ParamStore, prefix: &str) -> GroupedMlp {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| GroupedLinear {
                w: store.add(format!("{prefix}.l{i}.w"), store.get(l.w).clone()),
                b: store.add(format!("{prefix}.l{i}.b"), store.get(l.b).clone()),
                groups: l.groups,
                out_dim: l.out_dim,
            })
            .collect();
        GroupedMlp { layers }
    }
}

#[derive(Clone, Debug)]
pub struct GroupedGru {
    wr: ParamId,
    ur: ParamId,
    br: ParamId,
    wu: ParamId,
    uu: ParamId,
    bu: ParamId,
    wc: ParamId,
    uc: ParamId,
    bc: ParamId,
    pub groups: usize,
    pub hidden: usize,
}

impl GroupedGru {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        groups: usize,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let mut w = |n: &str, o: usize, i: usize, rng: &mut R| {
            store.add(format!("{prefix}.{n}"), xavier(&[groups, o, i], i, o, rng))
        };
        let (wr, ur) = (w("wr", hidden, in_dim, rng), w("ur", hidden, hidden, rng));
        let (wu, uu) = (w("wu", hidden, in_dim, rng), w("uu", hidden, hidden, rng));
        let (wc, uc) = (w("wc", hidden, in_dim, rng), w("uc", hidden, hidden, rng));
        let mut b = |n: &str| store.add(format!("{prefix}.{n}"), Tensor::zeros(&[groups, hidden]));
        GroupedGru {
            wr,
            ur,
            br: b("br"),
            wu,
            uu,
            bu: b("bu"),
            wc,
            uc,
            bc: b("bc"),
            groups,
            hidden,
        }
    }

    /// h: [G, B, H], x: [G, B, in] → [G, B, H].
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, h: Var, x: Var) -> Var {
        let batch = tape.value(h).shape()[1];
        let bshape = [self.groups, batch, self.hidden];
        let gate = |tape: &mut Tape, w: ParamId, u: ParamId, b: ParamId, hin: Var| {
            let xs = tape.bmm(x, bound.var(w), true);
            let hs = tape.bmm(hin, bound.var(u), true);
            let s = tape.add(xs, hs);
            let bb = tape.reshape(bound.var(b), &[self.groups, 1, self.hidden]);
            let bb = tape.broadcast(bb, &bshape);
            tape.add(s, bb)
        };
        let r = gate(tape, self.wr, self.ur, self.br, h);
        let r = tape.sigmoid(r);
        let u = gate(tape, self.wu, self.uu, self.bu, h);
        let u = tape.sigmoid(u);
        let rh = tape.mul(r, h);
        let c = gate(tape, self.wc, self.uc, self.bc, rh);
        let c = tape.tanh(c);
        let uh = tape.mul(u, h);
        let one_minus_u = tape.neg(u);
        let one_minus_u = tape.add_scalar(one_minus_u, 1.0);
        let uc2 = tape.mul(one_minus_u, c);
        tape.add(uh, uc2)
    }
}

// ── model dimensions ───────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub obs: usize,
    pub latent: usize,
    pub action: usize,
    pub hidden: usize,
    pub gru_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            obs: 8,
            latent: 16,
            action: 2,
            hidden: 64,
            gru_hidden: 64,
        }
    }
}

impl ModelDims {
    /// Width of a transition input [z, a].
    pub fn input(&self) -> usize {
        self.latent + self.action
    }
}

// ── variational causal dynamics ────────────────────────────────────────

/// Masks for one transition pass. `graph` gates the [z, a] input per
/// mechanism; `regime` switches a mechanism to its environment head.
/// `None` means structurally unmasked (dense input, observational head).
pub struct VcdMasks {
    pub graph: Option<Var>,
    pub regime: Option<Var>,
}

pub struct VcdPrior {
    pub h_next: Var,
    /// Observational mechanism parameters, [G, B] each.
    pub mean0: Var,
    pub logvar0: Var,
    /// Environment mechanism parameters when a regime head is in play.
    pub mean_k: Option<Var>,
    pub logvar_k: Option<Var>,
}

pub struct VcdModel {
    pub dims: ModelDims,
    pub n_envs: usize,
    pub encoder: GaussianMlp,
    pub decoder: GaussianMlp,
    pub gru: GroupedGru,
    /// One grouped head per environment; index 0 is observational.
    pub heads: Vec<GroupedMlp>,
    /// Edge beliefs over the transition graph, [input, latent].
    pub alpha: ParamId,
    /// Per-environment target beliefs, [n_envs - 1, latent].
    pub beta: ParamId,
}

impl VcdModel {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        dims: ModelDims,
        n_envs: usize,
        rng: &mut R,
    ) -> Self {
        assert!(n_envs >= 1, "vcd: need at least the observational regime");
        let encoder = GaussianMlp::new(store, "encoder", dims.obs, dims.hidden, dims.latent, rng);
        let decoder = GaussianMlp::new(store, "decoder", dims.latent, dims.hidden, dims.obs, rng);
        let gru = GroupedGru::new(store, "gru", dims.latent, dims.input(), dims.gru_hidden, rng);
        let heads = (0..n_envs)
            .map(|k| {
                GroupedMlp::new(
                    store,
                    &format!("head{k}"),
                    dims.latent,
                    &[dims.gru_hidden, dims.hidden, dims.hidden, 2],
                    rng,
                )
            })
            .collect();
        let alpha = store.add("alpha", Tensor::zeros(&[dims.input(), dims.latent]));
        let beta = store.add("beta", Tensor::zeros(&[n_envs - 1, dims.latent]));
        VcdModel {
            dims,
            n_envs,
            encoder,
            decoder,
            gru,
            heads,
            alpha,
            beta,
        }
    }

    pub fn encode(&self, tape: &mut Tape, bound: &Bound, o: Var) -> (Var, Var) {
        self.encoder.forward(tape, bound, o)
    }

    pub fn decode(&self, tape: &mut Tape, bound: &Bound, z: Var) -> (Var, Var) {
        self.decoder.forward(tape, bound, z)
    }

    pub fn init_hidden(&self, tape: &mut Tape, batch: usize) -> Var {
        tape.constant(Tensor::zeros(&[self.dims.latent, batch, self.dims.gru_hidden]))
    }

    /// Sampled graph mask [G, B, input] from the edge beliefs. `noise` is a
    /// constant logistic draw of the same shape, one per trajectory, held
    /// for the whole trajectory.
    pub fn graph_mask(&self, tape: &mut Tape, bound: &Bound, noise: Var) -> Var {
        let shape = tape.value(noise).shape().to_vec();
        let a = tape.transpose2(bound.var(self.alpha));
        let a = tape.reshape(a, &[self.dims.latent, 1, self.dims.input()]);
        let a = tape.broadcast(a, &shape);
        sample_mask_st(tape, a, noise)
    }

    /// Sampled regime mask [G, B] from row `row` of belief matrix `beta`.
    pub fn regime_mask(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        beta: ParamId,
        row: usize,
        noise: Var,
    ) -> Var {
        let shape = tape.value(noise).shape().to_vec();
        let bt = tape.transpose2(bound.var(beta));
        let col = tape.slice_last(bt, row, 1);
        let col = tape.broadcast(col, &shape);
        sample_mask_st(tape, col, noise)
    }

    /// Constant masks from plain tensors: graph [G, input], regime [G].
    pub fn const_masks(
        &self,
        tape: &mut Tape,
        graph: Option<&Tensor>,
        regime: Option<&Tensor>,
        batch: usize,
    ) -> VcdMasks {
        let g = graph.map(|m| {
            assert_eq!(
                m.shape(),
                &[self.dims.latent, self.dims.input()],
                "const graph mask: want [{}, {}], got {:?}",
                self.dims.latent,
                self.dims.input(),
                m.shape()
            );
            let v = tape.constant(m.clone().reshaped(&[self.dims.latent, 1, self.dims.input()]));
            tape.broadcast(v, &[self.dims.latent, batch, self.dims.input()])
        });
        let r = regime.map(|m| {
            assert_eq!(
                m.shape(),
                &[self.dims.latent],
                "const regime mask: want [{}], got {:?}",
                self.dims.latent,
                m.shape()
            );
            let v = tape.constant(m.clone().reshaped(&[self.dims.latent, 1]));
            tape.broadcast(v, &[self.dims.latent, batch])
        });
        VcdMasks {
            graph: g,
            regime: r,
        }
    }

    /// One prior step. `head` picks the environment mechanism head; 0 uses
    /// only the observational head and expects no regime mask.
    pub fn transition(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        head: usize,
        h: Var,
        z: Var,
        a: Var,
        masks: &VcdMasks,
    ) -> VcdPrior {
        assert!(head < self.heads.len(), "vcd: head {head} of {}", self.heads.len());
        let batch = tape.value(z).shape()[0];
        let za = tape.concat_last(z, a);
        let za = tape.reshape(za, &[1, batch, self.dims.input()]);
        let za = tape.broadcast(za, &[self.dims.latent, batch, self.dims.input()]);
        let x = match masks.graph {
            Some(m) => tape.mul(m, za),
            None => za,
        };
        let h_next = self.gru.forward(tape, bound, h, x);
        let (mean0, logvar0) = self.head_gaussian(tape, bound, 0, h_next, batch);
        let (mean_k, logvar_k) = if head == 0 {
            (None, None)
        } else {
            let (m, l) = self.head_gaussian(tape, bound, head, h_next, batch);
            (Some(m), Some(l))
        };
        VcdPrior {
            h_next,
            mean0,
            logvar0,
            mean_k,
            logvar_k,
        }
    }

    fn head_gaussian(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        head: usize,
        h: Var,
        batch: usize,
    ) -> (Var, Var) {
        let out = self.heads[head].forward(tape, bound, h);
        let mean = tape.slice_last(out, 0, 1);
        let mean = tape.reshape(mean, &[self.dims.latent, batch]);
        let raw = tape.slice_last(out, 1, 1);
        let raw = tape.reshape(raw, &[self.dims.latent, batch]);
        let logvar = tape.max_const(raw, LOGVAR_FLOOR);
        (mean, logvar)
    }

    /// Append a fresh environment head warm-started from the observational
    /// one, plus a one-row target belief. Returns (head index, belief id).
    pub fn add_adapted_head(&mut self, store: &mut ParamStore) -> (usize, ParamId) {
        let idx = self.heads.len();
        let head = self.heads[0].duplicated(store, &format!("head{idx}"));
        self.heads.push(head);
        let beta = store.add(
            format!("beta_adapt{idx}"),
            Tensor::zeros(&[1, self.dims.latent]),
        );
        (idx, beta)
    }

    /// Every parameter id the model owns, for trainability masks.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        let mlp = |m: &Mlp, ids: &mut Vec<ParamId>| {
            for l in &m.layers {
                ids.push(l.w);
                ids.push(l.b);
            }
        };
        mlp(&self.encoder.mlp, &mut ids);
        mlp(&self.decoder.mlp, &mut ids);
        let g = &self.gru;
        ids.extend([g.wr, g.ur, g.br, g.wu, g.uu, g.bu, g.wc, g.uc, g.bc]);
        for h in &self.heads {
            for l in &h.layers {
                ids.push(l.w);
                ids.push(l.b);
            }
        }
        ids.push(self.alpha);
        ids.push(self.beta);
        ids
    }

    pub fn head_param_ids(&self, head: usize) -> Vec<ParamId> {
        self.heads[head]
            .layers
            .iter()
            .flat_map(|l| [l.w, l.b])
            .collect()
    }
}

// ── recurrent state-space baselines ────────────────────────────────────

pub struct RssmModel {
    pub dims: ModelDims,
    pub encoder: GaussianMlp,
    pub decoder: GaussianMlp,
    pub gru: DenseGru,
    pub head: GaussianMlp,
}

impl RssmModel {
    pub fn new<R: Rng>(store: &mut ParamStore, dims: ModelDims, rng: &mut R) -> Self {
        RssmModel {
            dims,
            encoder: GaussianMlp::new(store, "encoder", dims.obs, dims.hidden, dims.latent, rng),
            decoder: GaussianMlp::new(store, "decoder", dims.latent, dims.hidden, dims.obs, rng),
            gru: DenseGru::new(store, "gru", dims.input(), dims.gru_hidden, rng),
            head: GaussianMlp::new(store, "head", dims.gru_hidden, dims.hidden, dims.latent, rng),
        }
    }

    pub fn encode(&self, tape: &mut Tape, bound: &Bound, o: Var) -> (Var, Var) {
        self.encoder.forward(tape, bound, o)
    }

    pub fn decode(&self, tape: &mut Tape, bound: &Bound, z: Var) -> (Var, Var) {
        self.decoder.forward(tape, bound, z)
    }

    pub fn init_hidden(&self, tape: &mut Tape, batch: usize) -> Var {
        tape.constant(Tensor::zeros(&[batch, self.dims.gru_hidden]))
    }

    /// One prior step: h' = gru(h, [z, a]); p(z') from the head. Returns
    /// (h_next, mean [B, latent], logvar).
    pub fn transition(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        h: Var,
        z: Var,
        a: Var,
    ) -> (Var, Var, Var) {
        let za = tape.concat_last(z, a);
        let h_next = self.gru.forward(tape, bound, h, za);
        let (mean, logvar) = self.head.forward(tape, bound, h_next);
        (h_next, mean, logvar)
    }

    pub fn transition_param_ids(&self) -> Vec<ParamId> {
        let g = &self.gru;
        let mut ids = vec![g.wr, g.ur, g.br, g.wu, g.uu, g.bu, g.wc, g.uc, g.bc];
        for l in &self.head.mlp.layers {
            ids.push(l.w);
            ids.push(l.b);
        }
        ids
    }
}

/// One dense transition per environment around a shared encoder/decoder.
pub struct MultiRssmModel {
    pub dims: ModelDims,
    pub encoder: GaussianMlp,
    pub decoder: GaussianMlp,
    pub transitions: Vec<(DenseGru, GaussianMlp)>,
}

impl MultiRssmModel {
    pub fn new<R: Rng>(store: &mut ParamStore, dims: ModelDims, n_envs: usize, rng: &mut R) -> Self {
        let encoder = GaussianMlp::new(store, "encoder", dims.obs, dims.hidden, dims.latent, rng);
        let decoder = GaussianMlp::new(store, "decoder", dims.latent, dims.hidden, dims.obs, rng);
        let transitions = (0..n_envs)
            .map(|k| {
                (
                    DenseGru::new(store, &format!("t{k}.gru"), dims.input(), dims.gru_hidden, rng),
                    GaussianMlp::new(
                        store,
                        &format!("t{k}.head"),
                        dims.gru_hidden,
                        dims.hidden,
                        dims.latent,
                        rng,
                    ),
                )
            })
            .collect();
        MultiRssmModel {
            dims,
            encoder,
            decoder,
            transitions,
        }
    }

    pub fn encode(&self, tape: &mut Tape, bound: &Bound, o: Var) -> (Var, Var) {
        self.encoder.forward(tape, bound, o)
    }

    pub fn decode(&self, tape: &mut Tape, bound: &Bound, z: Var) -> (Var, Var) {
        self.decoder.forward(tape, bound, z)
    }

    pub fn init_hidden(&self, tape: &mut Tape, batch: usize) -> Var {
        tape.constant(Tensor::zeros(&[batch, self.dims.gru_hidden]))
    }

    pub fn transition(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        env: usize,
        h: Var,
        z: Var,
        a: Var,
    ) -> (Var, Var, Var) {
        let (gru, head) = &self.transitions[env];
        let za = tape.concat_last(z, a);
        let h_next = gru.forward(tape, bound, h, za);
        let (mean, logvar) = head.forward(tape, bound, h_next);
        (h_next, mean, logvar)
    }

    /// Append a fresh randomly initialised transition; returns its index.
    pub fn add_transition<R: Rng>(&mut self, store: &mut ParamStore, rng: &mut R) -> usize {
        let k = self.transitions.len();
        let gru = DenseGru::new(store, &format!("t{k}.gru"), self.dims.input(), self.dims.gru_hidden, rng);
        let head = GaussianMlp::new(
            store,
            &format!("t{k}.head"),
            self.dims.gru_hidden,
            self.dims.hidden,
            self.dims.latent,
            rng,
        );
        self.transitions.push((gru, head));
        k
    }

    pub fn transition_param_ids(&self, env: usize) -> Vec<ParamId> {
        let (g, head) = &self.transitions[env];
        let mut ids = vec![g.wr, g.ur, g.br, g.wu, g.uu, g.bu, g.wc, g.uc, g.bc];
        for l in &head.mlp.layers {
            ids.push(l.w);
            ids.push(l.b);
        }
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn tiny_dims() -> ModelDims {
        ModelDims {
            obs: 3,
            latent: 4,
            action: 2,
            hidden: 5,
            gru_hidden: 6,
        }
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let model = VcdModel::new(&mut store, tiny_dims(), 3, &mut rng);
        let o = Tensor::randn(&[2, 3], &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let bound = store.bind_all(&mut tape);
            let ov = tape.constant(o.clone());
            let (m, l) = model.encode(&mut tape, &bound, ov);
            (
                tape.value(m).data().to_vec(),
                tape.value(l).data().to_vec(),
            )
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
    }

    #[test]
    fn logvar_is_floored_everywhere() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let model = VcdModel::new(&mut store, tiny_dims(), 2, &mut rng);
        let mut tape = Tape::new();
        let bound = store.bind_all(&mut tape);
        let o = tape.constant(Tensor::filled(&[4, 3], 30.0));
        let (_, lv) = model.encode(&mut tape, &bound, o);
        assert!(tape.value(lv).data().iter().all(|&v| v >= LOGVAR_FLOOR));
        let z = tape.constant(Tensor::filled(&[4, 4], -50.0));
        let (_, dlv) = model.decode(&mut tape, &bound, z);
        assert!(tape.value(dlv).data().iter().all(|&v| v >= LOGVAR_FLOOR));
    }

    #[test]
    fn gru_keeps_origin_fixed_with_zero_input() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let gru = DenseGru::new(&mut store, "g", 3, 5, &mut rng);
        let mut tape = Tape::new();
        let bound = store.bind_all(&mut tape);
        let h = tape.constant(Tensor::zeros(&[2, 5]));
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let h2 = gru.forward(&mut tape, &bound, h, x);
        assert!(tape.value(h2).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grouped_linear_keeps_groups_independent() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let gl = GroupedLinear::new(&mut store, "gl", 3, 4, 2, &mut rng);
        let x = Tensor::randn(&[3, 2, 4], &mut rng);

        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let bound = store.bind_all(&mut tape);
            let xv = tape.constant(x.clone());
            let y = gl.forward(&mut tape, &bound, xv);
            tape.value(y).data().to_vec()
        };
        let before = run(&store);
        // Perturb group 1's weights; groups 0 and 2 must not move.
        let w = store.get_mut(gl.w);
        let slice = 2 * 4;
        for v in &mut w.data_mut()[slice..2 * slice] {
            *v += 1.0;
        }
        let after = run(&store);
        let block = 2 * 2;
        assert_eq!(before[..block], after[..block]);
        assert_ne!(before[block..2 * block], after[block..2 * block]);
        assert_eq!(before[2 * block..], after[2 * block..]);
    }

    #[test]
    fn graph_mask_cuts_input_dependence() {
        let dims = tiny_dims();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let model = VcdModel::new(&mut store, dims, 2, &mut rng);

        // Mechanism 0 may read only latent 0; mechanism 1 reads everything.
        let mut g = Tensor::zeros(&[dims.latent, dims.input()]);
        g.set(&[0, 0], 1.0);
        for j in 0..dims.input() {
            g.set(&[1, j], 1.0);
        }

        let run = |z: Tensor, store: &ParamStore| {
            let mut tape = Tape::new();
            let bound = store.bind_all(&mut tape);
            let masks = model.const_masks(&mut tape, Some(&g), None, 1);
            let h = model.init_hidden(&mut tape, 1);
            let zv = tape.constant(z);
            let av = tape.constant(Tensor::zeros(&[1, dims.action]));
            let out = model.transition(&mut tape, &bound, 0, h, zv, av, &masks);
            tape.value(out.mean0).data().to_vec()
        };
        let z_a = Tensor::from_vec(&[1, 4], vec![0.3, 1.0, -1.0, 0.5]);
        let z_b = Tensor::from_vec(&[1, 4], vec![0.3, -2.0, 7.0, 0.1]);
        let (out_a, out_b) = (run(z_a, &store), run(z_b, &store));
        assert_eq!(out_a[0], out_b[0], "masked mechanism saw a masked input");
        assert_ne!(out_a[1], out_b[1], "dense mechanism ignored its input");
    }

    #[test]
    fn environment_heads_are_local() {
        let dims = tiny_dims();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let model = VcdModel::new(&mut store, dims, 3, &mut rng);
        let z = Tensor::randn(&[2, 4], &mut rng);

        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let bound = store.bind_all(&mut tape);
            let masks = VcdMasks {
                graph: None,
                regime: None,
            };
            let h = model.init_hidden(&mut tape, 2);
            let zv = tape.constant(z.clone());
            let av = tape.constant(Tensor::zeros(&[2, dims.action]));
            let out = model.transition(&mut tape, &bound, 1, h, zv, av, &masks);
            (
                tape.value(out.mean0).data().to_vec(),
                tape.value(out.mean_k.unwrap()).data().to_vec(),
            )
        };
        let before = run(&store);
        for &id in &model.head_param_ids(2) {
            for v in store.get_mut(id).data_mut() {
                *v += 0.7;
            }
        }
        let after = run(&store);
        assert_eq!(before, after, "head 2 leaked into an env-1 transition");
    }

    #[test]
    fn adapted_head_starts_from_observational_weights() {
        let dims = tiny_dims();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let mut model = VcdModel::new(&mut store, dims, 2, &mut rng);
        let (idx, beta) = model.add_adapted_head(&mut store);
        assert_eq!(idx, 2);
        for (a, b) in model
            .head_param_ids(0)
            .iter()
            .zip(model.head_param_ids(idx).iter())
        {
            assert_eq!(store.get(*a), store.get(*b));
        }
        assert!(store.get(beta).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn binding_respects_trainability() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 3, 2, &mut rng);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |id| id == lin.w);
        let x = tape.constant(Tensor::randn(&[4, 3], &mut rng));
        let y = lin.forward(&mut tape, &bound, x);
        let s = tape.sum(y);
        tape.backward(s);
        assert!(tape.grad(bound.var(lin.w)).is_some());
        assert!(tape.grad(bound.var(lin.b)).is_none());
    }

    #[test]
    #[should_panic(expected = "duplicate name")]
    fn store_rejects_duplicate_names() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::zeros(&[1]));
        store.add("p", Tensor::zeros(&[1]));
    }
}
