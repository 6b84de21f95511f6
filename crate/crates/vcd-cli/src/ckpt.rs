//! Checkpoint container: fixed magic, a JSON header carrying the exact
//! run config and a tensor table, then raw little-endian f64 data. Round
//! trips are bit-exact, so a resumed run continues the original stream.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use vcd_core::models::{ModelDims, MultiRssmModel, ParamStore, RssmModel, VcdModel};
use vcd_core::tensor::Tensor;

use crate::config::{RunConfig, Variant};
use crate::CliError;

const MAGIC: &[u8; 8] = b"VCDCKPT1";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CkptHeader {
    pub version: u32,
    pub variant: Variant,
    pub dims: ModelDims,
    /// Environment count the model was constructed with.
    pub n_envs: usize,
    /// Intervention ids in head order for vcd and multi-rssm; the rssm
    /// shares one transition and only records them for provenance.
    pub trained_interventions: Vec<usize>,
    /// Interventions fitted after training, in added-head order.
    pub adapted_interventions: Vec<usize>,
    /// Optimisation steps the parameters have absorbed.
    pub step: usize,
    /// Noise stream position of the trainer, for bit-exact resume.
    pub rng_word_pos: u128,
    pub adam_t: u64,
    pub config: RunConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the payload.
    pub offset: usize,
}

pub struct CkptMeta {
    pub variant: Variant,
    pub dims: ModelDims,
    pub n_envs: usize,
    pub trained_interventions: Vec<usize>,
    pub adapted_interventions: Vec<usize>,
    pub step: usize,
    pub rng_word_pos: u128,
    pub config: RunConfig,
}

/// Optimiser slots to persist alongside the parameters.
pub struct AdamState<'a> {
    pub m: &'a [Tensor],
    pub v: &'a [Tensor],
    pub t: u64,
    pub slot_names: Vec<String>,
}

pub fn save(
    path: &Path,
    meta: &CkptMeta,
    store: &ParamStore,
    adam: Option<AdamState<'_>>,
) -> Result<(), CliError> {
    let mut rows: Vec<(String, &Tensor)> = store
        .iter()
        .map(|(name, t)| (name.to_string(), t))
        .collect();
    if let Some(a) = &adam {
        rows.extend(a.slot_names.iter().zip(a.m).map(|(n, t)| (format!("adam.m.{n}"), t)));
        rows.extend(a.slot_names.iter().zip(a.v).map(|(n, t)| (format!("adam.v.{n}"), t)));
    }
    let mut tensors = Vec::with_capacity(rows.len());
    let mut offset = 0;
    for (name, t) in &rows {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
    }
    let header = CkptHeader {
        version: 1,
        variant: meta.variant,
        dims: meta.dims,
        n_envs: meta.n_envs,
        trained_interventions: meta.trained_interventions.clone(),
        adapted_interventions: meta.adapted_interventions.clone(),
        step: meta.step,
        rng_word_pos: meta.rng_word_pos,
        adam_t: adam.as_ref().map_or(0, |a| a.t),
        config: meta.config.clone(),
        tensors,
    };
    let header_json = serde_json::to_vec(&header).map_err(std::io::Error::from)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())?;
    w.write_all(&header_json)?;
    for (_, t) in &rows {
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub enum LoadedModel {
    Vcd(VcdModel),
    Rssm(RssmModel),
    Multi(MultiRssmModel),
}

pub struct Checkpoint {
    pub header: CkptHeader,
    pub model: LoadedModel,
    pub store: ParamStore,
    /// Optimiser slots in saved order, empty when the checkpoint carries none.
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
}

pub fn load(path: &Path) -> Result<Checkpoint, CliError> {
    let bad = |msg: String| CliError::Config(format!("checkpoint {}: {msg}", path.display()));
    let mut r = BufReader::new(
        File::open(path).map_err(|e| bad(e.to_string()))?,
    );
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| bad(e.to_string()))?;
    if &magic != MAGIC {
        return Err(bad("wrong magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|e| bad(e.to_string()))?;
    let mut header_json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header_json).map_err(|e| bad(e.to_string()))?;
    let header: CkptHeader =
        serde_json::from_slice(&header_json).map_err(|e| bad(e.to_string()))?;

    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    let total: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    if raw.len() != total * 8 {
        return Err(bad(format!("{} payload bytes, table implies {}", raw.len(), total * 8)));
    }

    // All parameter values are overwritten below; the init draws are
    // discarded, so any seed reproduces the layout.
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let model = match header.variant {
        Variant::Vcd => {
            let mut m = VcdModel::new(&mut store, header.dims, header.n_envs, &mut rng);
            for _ in &header.adapted_interventions {
                m.add_adapted_head(&mut store);
            }
            LoadedModel::Vcd(m)
        }
        Variant::Rssm => LoadedModel::Rssm(RssmModel::new(&mut store, header.dims, &mut rng)),
        Variant::MultiRssm => {
            let mut m = MultiRssmModel::new(&mut store, header.dims, header.n_envs, &mut rng);
            for _ in &header.adapted_interventions {
                m.add_transition(&mut store, &mut rng);
            }
            LoadedModel::Multi(m)
        }
    };

    let mut filled = vec![false; store.len()];
    let (mut adam_m, mut adam_v) = (Vec::new(), Vec::new());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let data: Vec<f64> = raw[entry.offset * 8..(entry.offset + n) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::from_vec(&entry.shape, data);
        if entry.name.starts_with("adam.m.") {
            adam_m.push(t);
        } else if entry.name.starts_with("adam.v.") {
            adam_v.push(t);
        } else {
            let id = store
                .id_of(&entry.name)
                .ok_or_else(|| bad(format!("{} does not fit a {} layout", entry.name, header.variant)))?;
            if store.get(id).shape() != entry.shape.as_slice() {
                return Err(bad(format!(
                    "{} has shape {:?}, model wants {:?}",
                    entry.name,
                    entry.shape,
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = t;
            filled[id.index()] = true;
        }
    }
    if let Some(id) = store.ids().find(|id| !filled[id.index()]) {
        return Err(bad(format!("missing tensor {}", store.name(id))));
    }
    Ok(Checkpoint {
        header,
        model,
        store,
        adam_m,
        adam_v,
    })
}
