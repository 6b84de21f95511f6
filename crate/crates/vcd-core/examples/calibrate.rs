//! Desk-scale calibration driver. Trains each variant with periodic
//! parameter snapshots, scores snapshots with the evaluation suite, and
//! spot-checks adaptation, so step budgets can be sized before they are
//! pinned in the acceptance tests.
//!
//! Subcommands:
//!   vcd   <steps> <snap_every> <prefix>
//!   rssm  <steps> <snap_every> <prefix>
//!   multi <steps> <snap_every> <prefix>
//!   more  <variant> <snapshot.json> <from> <until> <snap_every> <prefix>
//!   eval  <vcd.json> <rssm.json> <multi.json>
//!   adapt <vcd.json> <rssm.json> <multi.json> <intervention> <n> <steps>
//!   gap   <vcd.json>

use std::fs::File;
use std::io::{BufReader, BufWriter};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use vcd_core::dataset::{generate, Dataset, GenConfig};
use vcd_core::dataset::{batch_actions, batch_obs};
use vcd_core::eval::{
    disentangle_vcd, graph_mask_from_beliefs, probe_observations, recover_graph, recover_targets,
    rollout_error, DenseRollout, VcdRollout,
};
use vcd_core::gauss;
use vcd_core::models::{ModelDims, MultiRssmModel, ParamStore, RssmModel, VcdModel};
use vcd_core::sim::{ground_truth_graph, intervention_targets, EnvParams};
use vcd_core::structure::binarize;
use vcd_core::tape::Tape;
use vcd_core::tensor::Tensor;
use vcd_core::training::{
    adapt_multi_rssm, adapt_rssm, adapt_vcd, training_env_specs, StepMetrics, TrainConfig,
    Trainer,
};

const OBSERVED: usize = 25;
const CHUNK: usize = 25;

fn save(store: &ParamStore, path: &str) {
    let rows: Vec<(&str, &Tensor)> = store.iter().collect();
    serde_json::to_writer(BufWriter::new(File::create(path).unwrap()), &rows).unwrap();
    println!("saved {path}");
}

fn load(store: &mut ParamStore, path: &str) {
    let rows: Vec<(String, Tensor)> =
        serde_json::from_reader(BufReader::new(File::open(path).unwrap())).unwrap();
    for (name, t) in rows {
        let id = store.id_of(&name).unwrap_or_else(|| panic!("unknown param {name}"));
        *store.get_mut(id) = t;
    }
}

fn fresh_vcd(n_envs: usize) -> (VcdModel, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let model = VcdModel::new(&mut store, ModelDims::default(), n_envs, &mut rng);
    (model, store)
}

fn fresh_rssm() -> (RssmModel, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let model = RssmModel::new(&mut store, ModelDims::default(), &mut rng);
    (model, store)
}

fn fresh_multi(n_envs: usize) -> (MultiRssmModel, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let model = MultiRssmModel::new(&mut store, ModelDims::default(), n_envs, &mut rng);
    (model, store)
}

fn report(m: &StepMetrics) {
    if m.step % 25 == 0 {
        println!(
            "step {:5}  loss {:10.2}  elbo {:10.2}  edges {:6.1}  flags {:5.2}  |g| {:8.2}",
            m.step, m.loss, m.elbo, m.expected_graph_edges, m.expected_regime_flags, m.grad_norm
        );
    }
}

fn train(which: &str, steps: usize, snap_every: usize, prefix: &str, data: &Dataset) {
    let cfg = TrainConfig { steps, seed: 7, ..Default::default() };
    match which {
        "vcd" => {
            let (model, mut store) = fresh_vcd(data.envs.len());
            let specs = training_env_specs(&model, data).unwrap();
            let mut trainer = Trainer::new(&store, vec![true; store.len()], cfg);
            for s in 1..=steps {
                let m = trainer.step_vcd(&model, &mut store, &specs, data.horizon).unwrap();
                report(&m);
                if s % snap_every == 0 || s == steps {
                    save(&store, &format!("{prefix}-{s}.json"));
                }
            }
        }
        "rssm" => {
            let (model, mut store) = fresh_rssm();
            let envs: Vec<_> = data.envs.iter().map(|e| e.train.as_slice()).collect();
            let mut trainer = Trainer::new(&store, vec![true; store.len()], cfg);
            for s in 1..=steps {
                let m = trainer.step_rssm(&model, &mut store, &envs, data.horizon).unwrap();
                report(&m);
                if s % snap_every == 0 || s == steps {
                    save(&store, &format!("{prefix}-{s}.json"));
                }
            }
        }
        "multi" => {
            let (model, mut store) = fresh_multi(data.envs.len());
            let envs: Vec<_> = data
                .envs
                .iter()
                .enumerate()
                .map(|(e, env)| (e, env.train.as_slice()))
                .collect();
            let mut trainer = Trainer::new(&store, vec![true; store.len()], cfg);
            for s in 1..=steps {
                let m = trainer
                    .step_multi_rssm(&model, &mut store, &envs, data.horizon)
                    .unwrap();
                report(&m);
                if s % snap_every == 0 || s == steps {
                    save(&store, &format!("{prefix}-{s}.json"));
                }
            }
        }
        other => panic!("unknown variant {other}"),
    }
}

fn more(which: &str, snap: &str, from: usize, until: usize, snap_every: usize, prefix: &str, data: &Dataset) {
    let cfg = TrainConfig { steps: until, seed: 7, ..Default::default() };
    match which {
        "vcd" => {
            let (model, mut store) = fresh_vcd(data.envs.len());
            load(&mut store, snap);
            let specs = training_env_specs(&model, data).unwrap();
            let mut trainer = Trainer::new(&store, vec![true; store.len()], cfg);
            trainer.step = from;
            while trainer.step < until {
                let m = trainer.step_vcd(&model, &mut store, &specs, data.horizon).unwrap();
                report(&m);
                if (m.step + 1) % snap_every == 0 || m.step + 1 == until {
                    save(&store, &format!("{prefix}-{}.json", m.step + 1));
                }
            }
        }
        "rssm" => {
            let (model, mut store) = fresh_rssm();
            load(&mut store, snap);
            let envs: Vec<_> = data.envs.iter().map(|e| e.train.as_slice()).collect();
            let mut trainer = Trainer::new(&store, vec![true; store.len()], cfg);
            trainer.step = from;
            while trainer.step < until {
                let m = trainer.step_rssm(&model, &mut store, &envs, data.horizon).unwrap();
                report(&m);
                if (m.step + 1) % snap_every == 0 || m.step + 1 == until {
                    save(&store, &format!("{prefix}-{}.json", m.step + 1));
                }
            }
        }
        "multi" => {
            let (model, mut store) = fresh_multi(data.envs.len());
            load(&mut store, snap);
            let envs: Vec<_> = data
                .envs
                .iter()
                .enumerate()
                .map(|(e, env)| (e, env.train.as_slice()))
                .collect();
            let mut trainer = Trainer::new(&store, vec![true; store.len()], cfg);
            trainer.step = from;
            while trainer.step < until {
                let m = trainer
                    .step_multi_rssm(&model, &mut store, &envs, data.horizon)
                    .unwrap();
                report(&m);
                if (m.step + 1) % snap_every == 0 || m.step + 1 == until {
                    save(&store, &format!("{prefix}-{}.json", m.step + 1));
                }
            }
        }
        other => panic!("unknown variant {other}"),
    }
}

/// Per-dimension mean analytic KL to the shared head and to the
/// environment head over validation prefixes, with binarised graph masks
/// and posterior means as the transition input. The sign of the gap
/// drives beta: negative means the environment head already explains the
/// dimension better, so its belief will rise.
fn kl_gap(path: &str, data: &Dataset) {
    let (model, mut store) = fresh_vcd(data.envs.len());
    load(&mut store, path);
    let graph = graph_mask_from_beliefs(store.get(model.alpha));
    let beta = store.get(model.beta).clone();
    let latent = model.dims.latent;
    let d = disentangle_vcd(&model, &store, &probe_observations(data, 200), &data.mixing);
    println!("assignment: {:?}", d.assignment);

    for (e, env) in data.envs.iter().enumerate().skip(1) {
        let n = 20.min(env.val.len());
        let trajs: Vec<&_> = env.val[..n].iter().collect();
        let mut tape = Tape::with_capacity(1 << 16);
        let bound = store.bind_frozen(&mut tape);
        let masks = model.const_masks(&mut tape, Some(&graph), None, n);
        let mut h = model.init_hidden(&mut tape, n);
        let mut z_prev = None;
        let mut kl0_sum = vec![0.0; latent];
        let mut gap_sum = vec![0.0; latent];
        for t in 0..=data.horizon {
            let o = tape.constant(batch_obs(&trajs, t));
            let (qm, qlv) = model.encode(&mut tape, &bound, o);
            if t > 0 {
                let qm_t = tape.transpose2(qm);
                let qlv_t = tape.transpose2(qlv);
                let a = tape.constant(batch_actions(&trajs, t - 1));
                let prior = model.transition(&mut tape, &bound, e, h, z_prev.unwrap(), a, &masks);
                h = prior.h_next;
                let kl0 = gauss::kl_diag(&mut tape, qm_t, qlv_t, prior.mean0, prior.logvar0);
                let klk = gauss::kl_diag(
                    &mut tape,
                    qm_t,
                    qlv_t,
                    prior.mean_k.unwrap(),
                    prior.logvar_k.unwrap(),
                );
                let (v0, vk) = (tape.value(kl0), tape.value(klk));
                for i in 0..latent {
                    for b in 0..n {
                        kl0_sum[i] += v0.at(&[i, b]);
                        gap_sum[i] += vk.at(&[i, b]) - v0.at(&[i, b]);
                    }
                }
            }
            z_prev = Some(qm);
        }
        let norm = (n * data.horizon) as f64;
        let truth = intervention_targets(env.intervention);
        let target_latents: Vec<usize> = truth.iter().map(|&s| d.assignment[s]).collect();
        println!("env {e} (id {:2}), truth latents {target_latents:?}:", env.intervention);
        for i in 0..latent {
            let mark = if target_latents.contains(&i) { "*" } else { " " };
            println!(
                "  dim {i:2}{mark} beta {:7.3}  kl0 {:9.4}  gap {:9.4}",
                beta.at(&[e - 1, i]),
                kl0_sum[i] / norm,
                gap_sum[i] / norm
            );
        }
    }
}

fn eval(paths: &[String], data: &Dataset) {
    let (vcd, mut vstore) = fresh_vcd(data.envs.len());
    let (rssm, mut rstore) = fresh_rssm();
    let (multi, mut mstore) = fresh_multi(data.envs.len());
    load(&mut vstore, &paths[0]);
    load(&mut rstore, &paths[1]);
    load(&mut mstore, &paths[2]);

    let (mut vs, mut rs, mut ms) = (0.0, 0.0, 0.0);
    for (e, env) in data.envs.iter().enumerate() {
        let beta = (e > 0).then(|| (vcd.beta, e - 1));
        let mut vm = VcdRollout::new(&vcd, &vstore, e, beta);
        let v = rollout_error(&mut vm, &env.val, &data.mixing, OBSERVED, CHUNK).mean;
        let mut rm = DenseRollout::rssm(&rssm, &rstore);
        let r = rollout_error(&mut rm, &env.val, &data.mixing, OBSERVED, CHUNK).mean;
        let mut mm = DenseRollout::multi_rssm(&multi, &mstore, e);
        let m = rollout_error(&mut mm, &env.val, &data.mixing, OBSERVED, CHUNK).mean;
        println!("env {e} (id {:2}): vcd {v:9.5}  rssm {r:9.5}  multi {m:9.5}", env.intervention);
        vs += v;
        rs += r;
        ms += m;
    }
    let n = data.envs.len() as f64;
    println!(
        "means: vcd {:.5}  rssm {:.5}  multi {:.5}  vcd/rssm {:.3}  vcd/multi {:.3}",
        vs / n,
        rs / n,
        ms / n,
        vs / rs,
        vs / ms
    );

    let d = disentangle_vcd(&vcd, &vstore, &probe_observations(data, 200), &data.mixing);
    println!("assignment: {:?}", d.assignment);
    let g = recover_graph(vstore.get(vcd.alpha), &d.assignment, &ground_truth_graph(&EnvParams::base()));
    println!(
        "graph: edges {} correct {} missed {} fp {} injective {}",
        g.learned_edges, g.correct, g.missed, g.false_pos, g.injective
    );
    let beta = vstore.get(vcd.beta);
    let flags = binarize(beta);
    let latent = beta.shape()[1];
    let (mut missed, mut fp) = (0, 0);
    for (e, env) in data.envs.iter().enumerate().skip(1) {
        let t = recover_targets(beta, e - 1, &d.assignment, &intervention_targets(env.intervention));
        let row_flags = flags[(e - 1) * latent..e * latent].iter().filter(|&&b| b).count();
        println!(
            "env {e} (id {:2}): latent flags {row_flags}  mapped {:?}  truth {:?}  missed {}  fp {}",
            env.intervention,
            t.mapped_targets,
            intervention_targets(env.intervention),
            t.missed,
            t.false_pos
        );
        missed += t.missed;
        fp += t.false_pos;
    }
    println!("targets total: missed {missed} fp {fp}");
}

fn adapt(paths: &[String], id: usize, n: usize, steps: usize, data: &Dataset) {
    let adata = generate(&GenConfig {
        interventions: vec![id],
        train_per_env: n,
        val_per_env: 100,
        ..Default::default()
    })
    .unwrap();
    let trajs = &adata.envs[0].train[..n];
    let val = &adata.envs[0].val;
    let cfg = TrainConfig { steps, seed: 7, ..Default::default() };
    let quiet = |_: &StepMetrics| {};

    let (mut vcd, mut vstore) = fresh_vcd(data.envs.len());
    load(&mut vstore, &paths[0]);
    let t0 = std::time::Instant::now();
    let a = adapt_vcd(&mut vcd, &mut vstore, trajs, &cfg, quiet).unwrap();
    let mut vm = VcdRollout::new(&vcd, &vstore, a.head, Some((a.beta, 0)));
    let v = rollout_error(&mut vm, val, &adata.mixing, OBSERVED, CHUNK).mean;
    let beta_row = vstore.get(a.beta);
    let targets: Vec<usize> = (0..beta_row.shape()[1])
        .filter(|&j| beta_row.at(&[0, j]) > 0.0)
        .collect();
    let d = disentangle_vcd(&vcd, &vstore, &probe_observations(data, 200), &data.mixing);
    let t = recover_targets(beta_row, 0, &d.assignment, &intervention_targets(id));
    println!(
        "vcd   adapt id {id} n {n}: err {v:9.5}  latent targets {targets:?}  mapped {:?}  ({:.1}s)",
        t.mapped_targets,
        t0.elapsed().as_secs_f64()
    );

    let (rssm, mut rstore) = fresh_rssm();
    load(&mut rstore, &paths[1]);
    adapt_rssm(&rssm, &mut rstore, trajs, &cfg, quiet).unwrap();
    let mut rm = DenseRollout::rssm(&rssm, &rstore);
    let r = rollout_error(&mut rm, val, &adata.mixing, OBSERVED, CHUNK).mean;
    println!("rssm  adapt id {id} n {n}: err {r:9.5}");

    let (mut multi, mut mstore) = fresh_multi(data.envs.len());
    load(&mut mstore, &paths[2]);
    let (env, _) = adapt_multi_rssm(&mut multi, &mut mstore, trajs, &cfg, quiet).unwrap();
    let mut mm = DenseRollout::multi_rssm(&multi, &mstore, env);
    let m = rollout_error(&mut mm, val, &adata.mixing, OBSERVED, CHUNK).mean;
    println!("multi adapt id {id} n {n}: err {m:9.5}");
    println!("ratios: vcd/rssm {:.3}  vcd/multi {:.3}", v / r, v / m);

    // Zero-shot references: the unadapted baselines and the frozen VCD
    // under its observational head.
    let mut vm0 = VcdRollout::new(&vcd, &vstore, 0, None);
    let v0 = rollout_error(&mut vm0, val, &adata.mixing, OBSERVED, CHUNK).mean;
    println!("vcd zero-shot (obs head): {v0:9.5}");
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let data = generate(&GenConfig::default()).unwrap();
    match args[0].as_str() {
        w @ ("vcd" | "rssm" | "multi") => {
            let steps: usize = args[1].parse().unwrap();
            let snap: usize = args[2].parse().unwrap();
            train(w, steps, snap, &args[3], &data);
        }
        "more" => {
            let from: usize = args[3].parse().unwrap();
            let until: usize = args[4].parse().unwrap();
            let snap: usize = args[5].parse().unwrap();
            more(&args[1], &args[2], from, until, snap, &args[6], &data);
        }
        "eval" => eval(&args[1..4], &data),
        "gap" => kl_gap(&args[1], &data),
        "adapt" => {
            let id: usize = args[4].parse().unwrap();
            let n: usize = args[5].parse().unwrap();
            let steps: usize = args[6].parse().unwrap();
            adapt(&args[1..4], id, n, steps, &data);
        }
        other => panic!("unknown subcommand {other}"),
    }
}
