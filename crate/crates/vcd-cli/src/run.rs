//! The four commands: simulate datasets, train the three variants, adapt
//! a trained checkpoint to an unseen environment, and score checkpoints
//! into reports.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use vcd_core::dataset::{generate, Dataset, Trajectory};
use vcd_core::eval::{
    disentangle_map, disentangle_vcd, probe_observations, recover_graph, recover_targets,
    rollout_error, DenseRollout, Disentanglement, GraphRecovery, RolloutModel, TargetRecovery,
    VcdRollout,
};
use vcd_core::models::{
    Bound, ModelDims, MultiRssmModel, ParamId, ParamStore, RssmModel, VcdModel,
};
use vcd_core::sim::{
    ground_truth_graph, intervention_name, intervention_targets, EnvParams, Mixing, STATE_DIM,
};
use vcd_core::structure::binarize;
use vcd_core::tape::{Tape, Var};
use vcd_core::tensor::Tensor;
use vcd_core::training::{
    adapt_multi_rssm, adapt_rssm, adapt_vcd, training_env_specs, StepMetrics, TrainConfig,
    Trainer,
};

use crate::ckpt::{self, AdamState, Checkpoint, CkptHeader, CkptMeta, LoadedModel};
use crate::config::{load_config, RunConfig, Variant};
use crate::datadir::{self, Manifest};
use crate::report::{svg_curves, svg_heat, write_csv, write_json};
use crate::CliError;

/// Keeps parameter initialisation off the trainer's noise stream.
const MODEL_INIT_SALT: u64 = 0x1217;

// ── generate ───────────────────────────────────────────────────────────

#[derive(Args)]
pub struct GenerateArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Config file; explicit flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Environment ids to simulate, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub envs: Option<Vec<usize>>,
    /// Training trajectories per environment.
    #[arg(long)]
    pub n_traj: Option<usize>,
    /// Validation trajectories per environment.
    #[arg(long)]
    pub n_val: Option<usize>,
    /// Steps per trajectory.
    #[arg(long = "T")]
    pub horizon: Option<usize>,
    /// Keep f64 precision instead of rounding i/o through f32.
    #[arg(long)]
    pub no_quantize: bool,
    /// Write into an existing non-empty directory.
    #[arg(long)]
    pub force: bool,
}

pub fn cmd_generate(args: &GenerateArgs, root: &Path) -> Result<(), CliError> {
    let mut cfg = load_config(args.config.as_deref())?;
    let d = &mut cfg.dataset;
    if let Some(s) = args.seed {
        d.seed = s;
    }
    if let Some(e) = &args.envs {
        d.interventions = e.clone();
    }
    if let Some(n) = args.n_traj {
        d.train_per_env = n;
    }
    if let Some(n) = args.n_val {
        d.val_per_env = n;
    }
    if let Some(t) = args.horizon {
        d.horizon = t;
    }
    if args.no_quantize {
        d.quantize = false;
    }

    let dir = root.join(&args.out);
    if dir.exists() && dir.read_dir()?.next().is_some() && !args.force {
        return Err(CliError::Config(format!(
            "{} is not empty; pass --force to overwrite",
            dir.display()
        )));
    }
    let data = generate(&cfg.dataset)?;
    let manifest = datadir::write_dataset(&dir, &data, &cfg.dataset)?;
    for (env, m) in data.envs.iter().zip(&manifest.envs) {
        println!(
            "env {:2} ({}): {} train, {} val",
            m.intervention,
            m.name,
            env.train.len(),
            env.val.len()
        );
    }
    let bytes = fs::read(dir.join("manifest.json"))?;
    println!("manifest sha256 {:x}", Sha256::digest(&bytes));
    Ok(())
}

// ── train ──────────────────────────────────────────────────────────────

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory from `generate`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the checkpoint and metrics log.
    #[arg(long)]
    pub out: PathBuf,
    /// Config file; explicit flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Total optimisation steps, counting any resumed ones.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Trajectories per environment per step.
    #[arg(long)]
    pub batch_per_env: Option<usize>,
    /// Graph-belief sparsity weight.
    #[arg(long = "lambda-g")]
    pub lambda_g: Option<f64>,
    /// Target-belief sparsity weight.
    #[arg(long = "lambda-i")]
    pub lambda_i: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue a previous run from its checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

fn log_step(w: &mut BufWriter<File>, m: &StepMetrics) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, m)?;
    w.write_all(b"\n")?;
    if m.step % 200 == 0 {
        eprintln!("step {:5}  loss {:.3}", m.step, m.loss);
    }
    Ok(())
}

/// Drive the trainer until `until` total steps, streaming NDJSON metrics.
/// Returns the last loss.
fn run_steps(
    model: &LoadedModel,
    store: &mut ParamStore,
    trainer: &mut Trainer,
    data: &Dataset,
    until: usize,
    metrics: &mut BufWriter<File>,
) -> Result<f64, CliError> {
    let mut last = f64::NAN;
    match model {
        LoadedModel::Vcd(m) => {
            let specs = training_env_specs(m, data)?;
            while trainer.step < until {
                let row = trainer.step_vcd(m, store, &specs, data.horizon)?;
                last = row.loss;
                log_step(metrics, &row)?;
            }
        }
        LoadedModel::Rssm(m) => {
            let envs: Vec<&[Trajectory]> = data.envs.iter().map(|e| e.train.as_slice()).collect();
            while trainer.step < until {
                let row = trainer.step_rssm(m, store, &envs, data.horizon)?;
                last = row.loss;
                log_step(metrics, &row)?;
            }
        }
        LoadedModel::Multi(m) => {
            let envs: Vec<(usize, &[Trajectory])> = data
                .envs
                .iter()
                .enumerate()
                .map(|(e, env)| (e, env.train.as_slice()))
                .collect();
            while trainer.step < until {
                let row = trainer.step_multi_rssm(m, store, &envs, data.horizon)?;
                last = row.loss;
                log_step(metrics, &row)?;
            }
        }
    }
    metrics.flush()?;
    Ok(last)
}

fn save_trained(
    out: &Path,
    variant: Variant,
    data: &Dataset,
    config: &RunConfig,
    adapted: Vec<usize>,
    trainer: Option<&Trainer>,
    store: &ParamStore,
    step: usize,
) -> Result<PathBuf, CliError> {
    let meta = CkptMeta {
        variant,
        dims: ModelDims::default(),
        n_envs: data.envs.len(),
        trained_interventions: data.envs.iter().map(|e| e.intervention).collect(),
        adapted_interventions: adapted,
        step,
        rng_word_pos: trainer.map_or(0, |t| t.rng_word_pos()),
        config: config.clone(),
    };
    let adam = trainer.map(|t| {
        let (m, v, steps) = t.opt.state();
        AdamState {
            m,
            v,
            t: steps,
            slot_names: store.ids().map(|id| store.name(id).to_string()).collect(),
        }
    });
    let path = out.join(format!("{variant}.ckpt"));
    ckpt::save(&path, &meta, store, adam)?;
    Ok(path)
}

pub fn cmd_train(args: &TrainArgs, root: &Path) -> Result<(), CliError> {
    let data_dir = root.join(&args.data);
    let manifest = datadir::load_manifest(&data_dir)?;
    let data = datadir::load_dataset(&data_dir)?;
    let out = root.join(&args.out);
    fs::create_dir_all(&out)?;

    if let Some(resume) = &args.resume {
        return resume_train(args, &root.join(resume), &manifest, &data, &out);
    }

    let mut cfg = load_config(args.config.as_deref())?;
    cfg.dataset = manifest.gen_config();
    let t = &mut cfg.train;
    if let Some(v) = args.variant {
        t.variant = v;
    }
    if let Some(s) = args.steps {
        t.steps = s;
    }
    if let Some(x) = args.lr {
        t.lr = x;
    }
    if let Some(b) = args.batch_per_env {
        t.batch_per_env = b;
    }
    if let Some(x) = args.lambda_g {
        t.lambda_graph = x;
    }
    if let Some(x) = args.lambda_i {
        t.lambda_regime = x;
    }
    if let Some(x) = args.grad_clip {
        t.grad_clip = x;
    }
    if let Some(s) = args.seed {
        t.seed = s;
    }
    let core = cfg.train.to_core();
    let variant = cfg.train.variant;

    let mut store = ParamStore::new();
    let mut rng = ChaCha20Rng::seed_from_u64(core.seed ^ MODEL_INIT_SALT);
    let dims = ModelDims::default();
    let model = match variant {
        Variant::Vcd => LoadedModel::Vcd(VcdModel::new(&mut store, dims, data.envs.len(), &mut rng)),
        Variant::Rssm => LoadedModel::Rssm(RssmModel::new(&mut store, dims, &mut rng)),
        Variant::MultiRssm => {
            LoadedModel::Multi(MultiRssmModel::new(&mut store, dims, data.envs.len(), &mut rng))
        }
    };
    let mut trainer = Trainer::new(&store, vec![true; store.len()], core);
    let mut metrics = BufWriter::new(File::create(out.join("metrics.ndjson"))?);
    let last = run_steps(&model, &mut store, &mut trainer, &data, core.steps, &mut metrics)?;
    let path = save_trained(&out, variant, &data, &cfg, vec![], Some(&trainer), &store, trainer.step)?;
    println!(
        "trained {variant} for {} steps: final loss {last:.3}, wrote {}",
        trainer.step,
        path.display()
    );
    Ok(())
}

fn resume_train(
    args: &TrainArgs,
    ckpt_path: &Path,
    manifest: &Manifest,
    data: &Dataset,
    out: &Path,
) -> Result<(), CliError> {
    let c = ckpt::load(ckpt_path)?;
    if let Some(v) = args.variant {
        if v != c.header.variant {
            return Err(CliError::Config(format!(
                "checkpoint holds {}, requested {v}",
                c.header.variant
            )));
        }
    }
    if !c.header.adapted_interventions.is_empty() {
        return Err(CliError::Config("adapted checkpoints cannot be resumed".into()));
    }
    let have = serde_json::to_string(&manifest.gen_config()).map_err(std::io::Error::from)?;
    let want = serde_json::to_string(&c.header.config.dataset).map_err(std::io::Error::from)?;
    if have != want {
        return Err(CliError::Config(
            "dataset differs from the one the checkpoint was trained on".into(),
        ));
    }
    let mut cfg = c.header.config.clone();
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    if cfg.train.steps <= c.header.step {
        return Err(CliError::Config(format!(
            "checkpoint already has {} steps; raise --steps past it",
            c.header.step
        )));
    }
    let mut store = c.store;
    if c.adam_m.len() != store.len() {
        return Err(CliError::Config("checkpoint carries no optimiser state".into()));
    }
    let mut trainer = Trainer::new(&store, vec![true; store.len()], cfg.train.to_core());
    trainer.step = c.header.step;
    trainer.set_rng_word_pos(c.header.rng_word_pos);
    trainer.opt.restore(c.adam_m, c.adam_v, c.header.adam_t);

    let mut metrics = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(out.join("metrics.ndjson"))?,
    );
    let variant = c.header.variant;
    let last = run_steps(&c.model, &mut store, &mut trainer, data, cfg.train.steps, &mut metrics)?;
    let path = save_trained(out, variant, data, &cfg, vec![], Some(&trainer), &store, trainer.step)?;
    println!(
        "resumed {variant} to {} steps: final loss {last:.3}, wrote {}",
        trainer.step,
        path.display()
    );
    Ok(())
}

// ── adapt ──────────────────────────────────────────────────────────────

#[derive(Args)]
pub struct AdaptArgs {
    /// Trained checkpoint to adapt.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory holding the new environment.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the adapted checkpoint and reports.
    #[arg(long)]
    pub out: PathBuf,
    /// Config file replacing the checkpoint's embedded one.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Expected checkpoint variant, rejected on mismatch.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Intervention id of the environment to fit.
    #[arg(long)]
    pub intervention: Option<usize>,
    /// Trajectories taken from that environment's training split.
    #[arg(long)]
    pub n_traj: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Serialize)]
struct TargetReport {
    intervention: usize,
    name: String,
    n_traj: usize,
    steps: usize,
    /// Latent dimensions whose adapted target belief binarises on.
    latent_targets: Vec<usize>,
    assignment: Vec<usize>,
    mapped_targets: Vec<usize>,
    truth_targets: Vec<usize>,
    missed: usize,
    false_pos: usize,
}

pub fn cmd_adapt(args: &AdaptArgs, root: &Path) -> Result<(), CliError> {
    let c = ckpt::load(&root.join(&args.checkpoint))?;
    if let Some(v) = args.variant {
        if v != c.header.variant {
            return Err(CliError::Config(format!(
                "checkpoint holds {}, requested {v}",
                c.header.variant
            )));
        }
    }
    let data_dir = root.join(&args.data);
    let manifest = datadir::load_manifest(&data_dir)?;
    let data = datadir::load_dataset(&data_dir)?;
    let out = root.join(&args.out);
    fs::create_dir_all(&out)?;

    let mut cfg = match &args.config {
        Some(p) => load_config(Some(p))?,
        None => c.header.config.clone(),
    };
    cfg.dataset = manifest.gen_config();
    if let Some(i) = args.intervention {
        cfg.adapt.intervention = i;
    }
    if let Some(n) = args.n_traj {
        cfg.adapt.n_traj = n;
    }
    if let Some(s) = args.steps {
        cfg.adapt.steps = s;
    }
    if let Some(s) = args.seed {
        cfg.adapt.seed = s;
    }
    let a = cfg.adapt.clone();
    let env = data
        .envs
        .iter()
        .find(|e| e.intervention == a.intervention)
        .ok_or_else(|| {
            CliError::Config(format!(
                "dataset has no environment with intervention {}",
                a.intervention
            ))
        })?;
    if a.n_traj == 0 || a.n_traj > env.train.len() {
        return Err(CliError::Config(format!(
            "n_traj {} outside 1..={}",
            a.n_traj,
            env.train.len()
        )));
    }
    let trajs = &env.train[..a.n_traj];
    let acfg = TrainConfig {
        steps: a.steps,
        seed: a.seed,
        ..cfg.train.to_core()
    };

    let variant = c.header.variant;
    let mut adapted_ids = c.header.adapted_interventions.clone();
    adapted_ids.push(a.intervention);
    let total_steps = c.header.step + a.steps;
    let mut store = c.store;
    let mut metrics = BufWriter::new(File::create(out.join("metrics.ndjson"))?);
    let observe = |w: &mut BufWriter<File>, m: &StepMetrics| {
        log_step(w, m).expect("metrics stream");
    };

    let last;
    match c.model {
        LoadedModel::Vcd(mut m) => {
            let fit = adapt_vcd(&mut m, &mut store, trajs, &acfg, |row| observe(&mut metrics, row))?;
            last = *fit.losses.last().unwrap_or(&f64::NAN);
            let beta_row = store.get(fit.beta).clone();
            let latent_targets: Vec<usize> = binarize(&beta_row)
                .iter()
                .enumerate()
                .filter_map(|(j, &on)| on.then_some(j))
                .collect();
            let probes = available_probes(&data).min(cfg.eval.probes);
            if probes == 0 {
                return Err(CliError::Config("dataset has no validation observations".into()));
            }
            let d = disentangle_vcd(&m, &store, &probe_observations(&data, probes), &data.mixing);
            let truth = intervention_targets(a.intervention);
            let rec = recover_targets(&beta_row, 0, &d.assignment, &truth);
            let report = TargetReport {
                intervention: a.intervention,
                name: intervention_name(a.intervention),
                n_traj: a.n_traj,
                steps: a.steps,
                latent_targets,
                assignment: d.assignment,
                mapped_targets: rec.mapped_targets.clone(),
                truth_targets: truth,
                missed: rec.missed,
                false_pos: rec.false_pos,
            };
            write_json(&out.join("targets.json"), &report)?;
            println!(
                "targets (latent {:?}) map to state {:?}, truth {:?}",
                report.latent_targets, report.mapped_targets, report.truth_targets
            );
            let meta = CkptMeta {
                variant,
                dims: m.dims,
                n_envs: c.header.n_envs,
                trained_interventions: c.header.trained_interventions.clone(),
                adapted_interventions: adapted_ids,
                step: total_steps,
                rng_word_pos: 0,
                config: cfg.clone(),
            };
            ckpt::save(&out.join(format!("{variant}.ckpt")), &meta, &store, None)?;
        }
        LoadedModel::Rssm(m) => {
            let losses = adapt_rssm(&m, &mut store, trajs, &acfg, |row| observe(&mut metrics, row))?;
            last = *losses.last().unwrap_or(&f64::NAN);
            let meta = CkptMeta {
                variant,
                dims: m.dims,
                n_envs: c.header.n_envs,
                trained_interventions: c.header.trained_interventions.clone(),
                adapted_interventions: adapted_ids,
                step: total_steps,
                rng_word_pos: 0,
                config: cfg.clone(),
            };
            ckpt::save(&out.join(format!("{variant}.ckpt")), &meta, &store, None)?;
        }
        LoadedModel::Multi(mut m) => {
            let (_, losses) =
                adapt_multi_rssm(&mut m, &mut store, trajs, &acfg, |row| observe(&mut metrics, row))?;
            last = *losses.last().unwrap_or(&f64::NAN);
            let meta = CkptMeta {
                variant,
                dims: m.dims,
                n_envs: c.header.n_envs,
                trained_interventions: c.header.trained_interventions.clone(),
                adapted_interventions: adapted_ids,
                step: total_steps,
                rng_word_pos: 0,
                config: cfg.clone(),
            };
            ckpt::save(&out.join(format!("{variant}.ckpt")), &meta, &store, None)?;
        }
    }
    metrics.flush()?;
    println!(
        "adapted {variant} to intervention {} with {} trajectories: final loss {last:.3}",
        a.intervention, a.n_traj
    );
    Ok(())
}

// ── eval ───────────────────────────────────────────────────────────────

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportKind {
    All,
    Rollout,
    Disentanglement,
    Recovery,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint to score.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory whose validation split is scored.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for reports.
    #[arg(long)]
    pub out: PathBuf,
    /// Config file replacing the checkpoint's embedded one.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Report family to emit.
    #[arg(long, value_enum, default_value = "all")]
    pub report: ReportKind,
    /// Observed timesteps before prediction takes over.
    #[arg(long)]
    pub observed: Option<usize>,
    /// Trajectories scored per forward pass.
    #[arg(long)]
    pub chunk: Option<usize>,
    /// Encoded observations behind the sensitivity matrix.
    #[arg(long)]
    pub probes: Option<usize>,
}

#[derive(Serialize)]
struct RolloutOut {
    variant: Variant,
    observed: usize,
    horizon: usize,
    /// Mean of the per-environment means.
    mean: f64,
    envs: Vec<EnvRollout>,
}

#[derive(Serialize)]
struct EnvRollout {
    env: usize,
    intervention: usize,
    name: String,
    mean: f64,
    per_step: Vec<f64>,
}

#[derive(Serialize)]
struct DisentanglementOut {
    variant: Variant,
    probes: usize,
    assignment: Vec<usize>,
    /// Mean |d state / d latent|, one row per state coordinate.
    matrix: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct RecoveryOut {
    variant: Variant,
    total_slots: usize,
    graph: GraphRecovery,
    targets: Vec<TargetRow>,
}

#[derive(Serialize)]
struct TargetRow {
    intervention: usize,
    name: String,
    truth_targets: Vec<usize>,
    recovery: TargetRecovery,
}

fn available_probes(data: &Dataset) -> usize {
    data.envs
        .iter()
        .flat_map(|e| &e.val)
        .map(|t| t.horizon() + 1)
        .sum()
}

/// Head index and target-belief row for an intervention the checkpoint
/// knows, trained heads first, adapted heads after.
fn vcd_head(
    header: &CkptHeader,
    model: &VcdModel,
    store: &ParamStore,
    intervention: usize,
) -> Result<(usize, Option<(ParamId, usize)>), CliError> {
    if let Some(pos) = header
        .trained_interventions
        .iter()
        .position(|&i| i == intervention)
    {
        return Ok((pos, (pos > 0).then(|| (model.beta, pos - 1))));
    }
    if let Some(j) = header
        .adapted_interventions
        .iter()
        .position(|&i| i == intervention)
    {
        let head = header.n_envs + j;
        let beta = store
            .id_of(&format!("beta_adapt{head}"))
            .expect("adapted head belief");
        return Ok((head, Some((beta, 0))));
    }
    Err(CliError::Config(format!(
        "checkpoint has no head for intervention {intervention}"
    )))
}

fn transition_index(header: &CkptHeader, intervention: usize) -> Result<usize, CliError> {
    if let Some(pos) = header
        .trained_interventions
        .iter()
        .position(|&i| i == intervention)
    {
        return Ok(pos);
    }
    if let Some(j) = header
        .adapted_interventions
        .iter()
        .position(|&i| i == intervention)
    {
        return Ok(header.n_envs + j);
    }
    Err(CliError::Config(format!(
        "checkpoint has no transition for intervention {intervention}"
    )))
}

fn rollout_model_for<'a>(
    c: &'a Checkpoint,
    intervention: usize,
) -> Result<Box<dyn RolloutModel + 'a>, CliError> {
    match &c.model {
        LoadedModel::Vcd(m) => {
            let (head, beta) = vcd_head(&c.header, m, &c.store, intervention)?;
            Ok(Box::new(VcdRollout::new(m, &c.store, head, beta)))
        }
        LoadedModel::Rssm(m) => Ok(Box::new(DenseRollout::rssm(m, &c.store))),
        LoadedModel::Multi(m) => {
            let k = transition_index(&c.header, intervention)?;
            Ok(Box::new(DenseRollout::multi_rssm(m, &c.store, k)))
        }
    }
}

/// Sensitivities through any encoder/decoder pair sharing the Gaussian
/// MLP signature.
fn disentangle_dense<E, D>(
    store: &ParamStore,
    probe_obs: &Tensor,
    mixing: &Mixing,
    encode: E,
    decode: D,
) -> Disentanglement
where
    E: Fn(&mut Tape, &Bound, Var) -> (Var, Var),
    D: Fn(&mut Tape, &Bound, Var) -> (Var, Var),
{
    let z0 = {
        let mut tape = Tape::with_capacity(64);
        let bound = store.bind_frozen(&mut tape);
        let o = tape.constant(probe_obs.clone());
        let (qm, _) = encode(&mut tape, &bound, o);
        tape.value(qm).clone()
    };
    let a_inv = mixing.a_inv.clone();
    disentangle_map(&z0, STATE_DIM, move |tape, z| {
        let bound = store.bind_frozen(tape);
        let (dm, _) = decode(tape, &bound, z);
        let ai = tape.constant(a_inv.clone());
        tape.matmul_nt(dm, ai)
    })
}

pub fn cmd_eval(args: &EvalArgs, root: &Path) -> Result<(), CliError> {
    let c = ckpt::load(&root.join(&args.checkpoint))?;
    let data = datadir::load_dataset(&root.join(&args.data))?;
    let out = root.join(&args.out);
    fs::create_dir_all(&out)?;

    let mut ev = match &args.config {
        Some(p) => load_config(Some(p))?.eval,
        None => c.header.config.eval.clone(),
    };
    if let Some(o) = args.observed {
        ev.observed = Some(o);
    }
    if let Some(x) = args.chunk {
        ev.chunk = x;
    }
    if let Some(p) = args.probes {
        ev.probes = p;
    }
    let observed = ev.observed.unwrap_or(data.horizon / 2);
    if observed == 0 || observed >= data.horizon {
        return Err(CliError::Config(format!(
            "observed {observed} outside 1..{}",
            data.horizon
        )));
    }
    let chunk = ev.chunk.max(1);
    let variant = c.header.variant;
    let want = args.report;
    if want == ReportKind::Recovery && !matches!(c.model, LoadedModel::Vcd(_)) {
        return Err(CliError::Config(format!(
            "recovery reports need a vcd checkpoint, this one holds {variant}"
        )));
    }

    if matches!(want, ReportKind::All | ReportKind::Rollout) {
        let mut envs = Vec::new();
        let mut curves = Vec::new();
        for (e, env) in data.envs.iter().enumerate() {
            let mut model = rollout_model_for(&c, env.intervention)?;
            let rep = rollout_error(model.as_mut(), &env.val, &data.mixing, observed, chunk);
            curves.push((format!("env {}", env.intervention), rep.per_step.clone()));
            envs.push(EnvRollout {
                env: e,
                intervention: env.intervention,
                name: intervention_name(env.intervention),
                mean: rep.mean,
                per_step: rep.per_step,
            });
        }
        let mean = envs.iter().map(|r| r.mean).sum::<f64>() / envs.len() as f64;
        let steps = data.horizon - observed;
        let rows: Vec<Vec<String>> = (0..steps)
            .map(|t| {
                let mut row = vec![(observed + 1 + t).to_string()];
                row.extend(envs.iter().map(|r| r.per_step[t].to_string()));
                row
            })
            .collect();
        let header = std::iter::once("step".to_string())
            .chain(envs.iter().map(|r| format!("env{}", r.intervention)))
            .collect::<Vec<_>>()
            .join(",");
        write_json(&out.join("rollout.json"), &RolloutOut { variant, observed, horizon: data.horizon, mean, envs })?;
        write_csv(&out.join("rollout.csv"), &header, &rows)?;
        svg_curves(
            &out.join("rollout.svg"),
            &format!("{variant}: squared state error per predicted step"),
            &curves,
        )?;
        println!("rollout: mean {mean:.5} over {} envs, observed {observed} of {}", curves.len(), data.horizon);
    }

    let needs_matrix = matches!(want, ReportKind::All | ReportKind::Disentanglement | ReportKind::Recovery);
    let matrix = if needs_matrix {
        let probes = available_probes(&data).min(ev.probes);
        if probes == 0 {
            return Err(CliError::Config("dataset has no validation observations".into()));
        }
        let probe_obs = probe_observations(&data, probes);
        let d = match &c.model {
            LoadedModel::Vcd(m) => disentangle_vcd(m, &c.store, &probe_obs, &data.mixing),
            LoadedModel::Rssm(m) => disentangle_dense(
                &c.store,
                &probe_obs,
                &data.mixing,
                |t, b, o| m.encode(t, b, o),
                |t, b, z| m.decode(t, b, z),
            ),
            LoadedModel::Multi(m) => disentangle_dense(
                &c.store,
                &probe_obs,
                &data.mixing,
                |t, b, o| m.encode(t, b, o),
                |t, b, z| m.decode(t, b, z),
            ),
        };
        Some((d, probes))
    } else {
        None
    };

    if let Some((d, probes)) = &matrix {
        if matches!(want, ReportKind::All | ReportKind::Disentanglement) {
            let latent = d.matrix.shape()[1];
            let rows_nested: Vec<Vec<f64>> = (0..STATE_DIM)
                .map(|i| d.matrix.data()[i * latent..(i + 1) * latent].to_vec())
                .collect();
            write_json(
                &out.join("disentanglement.json"),
                &DisentanglementOut {
                    variant,
                    probes: *probes,
                    assignment: d.assignment.clone(),
                    matrix: rows_nested.clone(),
                },
            )?;
            let header = std::iter::once("state".to_string())
                .chain((0..latent).map(|j| format!("z{j}")))
                .collect::<Vec<_>>()
                .join(",");
            let rows: Vec<Vec<String>> = rows_nested
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    std::iter::once(i.to_string())
                        .chain(r.iter().map(|v| v.to_string()))
                        .collect()
                })
                .collect();
            write_csv(&out.join("disentanglement.csv"), &header, &rows)?;
            svg_heat(
                &out.join("disentanglement.svg"),
                &format!("{variant}: mean |d state / d latent|"),
                &d.matrix,
            )?;
            println!("disentanglement: assignment {:?}", d.assignment);
        }

        if matches!(want, ReportKind::All | ReportKind::Recovery) {
            if let LoadedModel::Vcd(m) = &c.model {
                let alpha = c.store.get(m.alpha);
                let graph = recover_graph(alpha, &d.assignment, &ground_truth_graph(&EnvParams::base()));
                let mut targets = Vec::new();
                for env in &data.envs {
                    if env.intervention == 0 {
                        continue;
                    }
                    let (_, beta) = vcd_head(&c.header, m, &c.store, env.intervention)?;
                    let (beta_id, row) = beta.expect("interventional head has a belief row");
                    let truth = intervention_targets(env.intervention);
                    let rec = recover_targets(c.store.get(beta_id), row, &d.assignment, &truth);
                    targets.push(TargetRow {
                        intervention: env.intervention,
                        name: intervention_name(env.intervention),
                        truth_targets: truth,
                        recovery: rec,
                    });
                }
                let edge_rows = vec![vec![
                    graph.learned_edges.to_string(),
                    alpha.numel().to_string(),
                    graph.correct.to_string(),
                    graph.missed.to_string(),
                    graph.false_pos.to_string(),
                    graph.injective.to_string(),
                ]];
                write_csv(
                    &out.join("recovery.csv"),
                    "learned_edges,total_slots,correct,missed,false_pos,injective",
                    &edge_rows,
                )?;
                let target_rows: Vec<Vec<String>> = targets
                    .iter()
                    .map(|t| {
                        vec![
                            t.intervention.to_string(),
                            t.recovery.latent_flags.to_string(),
                            t.recovery.missed.to_string(),
                            t.recovery.false_pos.to_string(),
                        ]
                    })
                    .collect();
                write_csv(
                    &out.join("recovery_targets.csv"),
                    "intervention,latent_flags,missed,false_pos",
                    &target_rows,
                )?;
                println!(
                    "recovery: {}/{} edges, {} correct, {} missed, {} false positives",
                    graph.learned_edges,
                    alpha.numel(),
                    graph.correct,
                    graph.missed,
                    graph.false_pos
                );
                write_json(
                    &out.join("recovery.json"),
                    &RecoveryOut {
                        variant,
                        total_slots: alpha.numel(),
                        graph,
                        targets,
                    },
                )?;
            }
        }
    }
    Ok(())
}
