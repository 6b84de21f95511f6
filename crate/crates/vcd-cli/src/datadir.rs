//! On-disk dataset: `manifest.json` plus one raw file per environment and
//! split, values little-endian in [trajectory, time, channel] order with
//! all observations ahead of all actions. Quantised datasets store f32,
//! which is exactly what generation produced; unquantised ones store f64.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use vcd_core::dataset::{Dataset, EnvData, GenConfig, Trajectory};
use vcd_core::sim::{condition_number, intervention_name, invert, Mixing, ACTION_DIM, STATE_DIM};
use vcd_core::tensor::Tensor;

use crate::CliError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub horizon: usize,
    pub quantize: bool,
    pub train_per_env: usize,
    pub val_per_env: usize,
    /// Observation mixing A, row-major rows.
    pub mixing_a: Vec<Vec<f64>>,
    pub envs: Vec<ManifestEnv>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEnv {
    pub intervention: usize,
    pub name: String,
    pub train_file: String,
    pub val_file: String,
}

impl Manifest {
    /// The generation config this dataset realises, for config echoes.
    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            seed: self.seed,
            interventions: self.envs.iter().map(|e| e.intervention).collect(),
            train_per_env: self.train_per_env,
            val_per_env: self.val_per_env,
            horizon: self.horizon,
            quantize: self.quantize,
        }
    }
}

fn write_split(path: &Path, trajs: &[Trajectory], quantize: bool) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    for tr in trajs {
        for &x in tr.obs.iter().chain(&tr.actions) {
            if quantize {
                w.write_all(&(x as f32).to_le_bytes())?;
            } else {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_split(
    path: &Path,
    count: usize,
    horizon: usize,
    quantize: bool,
) -> Result<Vec<Trajectory>, CliError> {
    let n_obs = (horizon + 1) * STATE_DIM;
    let n_act = horizon * ACTION_DIM;
    let elem = if quantize { 4 } else { 8 };
    let want = count * (n_obs + n_act) * elem;
    let mut bytes = Vec::with_capacity(want);
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() != want {
        return Err(CliError::Config(format!(
            "{}: {} bytes, manifest implies {want}",
            path.display(),
            bytes.len()
        )));
    }
    let mut values = bytes.chunks_exact(elem).map(|c| {
        if quantize {
            f32::from_le_bytes(c.try_into().unwrap()) as f64
        } else {
            f64::from_le_bytes(c.try_into().unwrap())
        }
    });
    Ok((0..count)
        .map(|_| Trajectory {
            obs: values.by_ref().take(n_obs).collect(),
            actions: values.by_ref().take(n_act).collect(),
        })
        .collect())
}

pub fn write_dataset(dir: &Path, data: &Dataset, cfg: &GenConfig) -> Result<Manifest, CliError> {
    fs::create_dir_all(dir)?;
    let envs = data
        .envs
        .iter()
        .map(|e| ManifestEnv {
            intervention: e.intervention,
            name: intervention_name(e.intervention),
            train_file: format!("env{:02}_train.bin", e.intervention),
            val_file: format!("env{:02}_val.bin", e.intervention),
        })
        .collect::<Vec<_>>();
    for (e, m) in data.envs.iter().zip(&envs) {
        write_split(&dir.join(&m.train_file), &e.train, cfg.quantize)?;
        write_split(&dir.join(&m.val_file), &e.val, cfg.quantize)?;
    }
    let a = &data.mixing.a;
    let manifest = Manifest {
        version: 1,
        seed: cfg.seed,
        horizon: cfg.horizon,
        quantize: cfg.quantize,
        train_per_env: cfg.train_per_env,
        val_per_env: cfg.val_per_env,
        mixing_a: (0..STATE_DIM)
            .map(|i| a.data()[i * STATE_DIM..(i + 1) * STATE_DIM].to_vec())
            .collect(),
        envs,
    };
    let mut w = BufWriter::new(File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut w, &manifest).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest, CliError> {
    let path = dir.join("manifest.json");
    let file = File::open(&path)
        .map_err(|e| CliError::Config(format!("dataset {}: {e}", path.display())))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| CliError::Config(format!("dataset {}: {e}", path.display())))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    let manifest = load_manifest(dir)?;
    let flat: Vec<f64> = manifest.mixing_a.iter().flatten().copied().collect();
    if flat.len() != STATE_DIM * STATE_DIM {
        return Err(CliError::Config(format!(
            "mixing matrix has {} entries, want {}",
            flat.len(),
            STATE_DIM * STATE_DIM
        )));
    }
    let a = Tensor::from_vec(&[STATE_DIM, STATE_DIM], flat);
    match condition_number(&a) {
        Some(c) if c < 1e3 => {}
        _ => return Err(CliError::Config("mixing matrix is ill-conditioned".into())),
    }
    let mixing = Mixing {
        a_inv: invert(&a),
        a,
    };
    let envs = manifest
        .envs
        .iter()
        .map(|m| {
            Ok(EnvData {
                intervention: m.intervention,
                train: read_split(
                    &dir.join(&m.train_file),
                    manifest.train_per_env,
                    manifest.horizon,
                    manifest.quantize,
                )?,
                val: read_split(
                    &dir.join(&m.val_file),
                    manifest.val_per_env,
                    manifest.horizon,
                    manifest.quantize,
                )?,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(Dataset {
        envs,
        mixing,
        horizon: manifest.horizon,
        seed: manifest.seed,
    })
}
