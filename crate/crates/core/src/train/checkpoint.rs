//! Checkpoint directory: `meta.json`, `config.json` (the network the stored
//! parameters belong to), `params.bin` and `optim.bin`. Binary files hold
//! little-endian f32 values concatenated in manifest order; `optim.bin` has
//! all first moments followed by all second moments.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamConfig, AdamState, LrSchedule, TrainState};
use crate::autodiff::{ParamSpec, ParamStore};
use crate::config::{parse_network_config, NetworkConfig};
use crate::error::{Error, Result};
use crate::graph::ModelDims;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config_hash: String,
    pub src_vocab: usize,
    pub trg_vocab: usize,
    pub manifest: Vec<ManifestEntry>,
    pub epoch: usize,
    pub stage: usize,
    pub seed: u64,
    pub updates: u64,
    pub lr: LrSchedule,
    pub best_cv: Option<f64>,
    pub adam: AdamConfig,
    pub adam_t: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub config: NetworkConfig,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn dims(&self) -> ModelDims {
        ModelDims { src_vocab: self.meta.src_vocab, trg_vocab: self.meta.trg_vocab }
    }
}

fn write_f32(buf: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

/// Writes `state` and the network it trains. `manifest` must describe `state.params`.
pub fn save_checkpoint(dir: &Path, state: &TrainState, config: &NetworkConfig, manifest: &[ParamSpec], dims: ModelDims) -> Result<()> {
    state.params.check_manifest(manifest)?;
    fs::create_dir_all(dir)?;
    let mut params = Vec::new();
    let mut optim_m = Vec::new();
    let mut optim_v = Vec::new();
    for spec in manifest {
        let p = state.params.get(&spec.name).expect("checked against manifest");
        write_f32(&mut params, p.data());
        let zeros = vec![0f32; spec.numel()];
        write_f32(&mut optim_m, state.adam.m.get(&spec.name).unwrap_or(&zeros));
        write_f32(&mut optim_v, state.adam.v.get(&spec.name).unwrap_or(&zeros));
    }
    optim_m.extend_from_slice(&optim_v);
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        config_hash: config.hash(),
        src_vocab: dims.src_vocab,
        trg_vocab: dims.trg_vocab,
        manifest: manifest.iter().map(|s| ManifestEntry { name: s.name.clone(), dims: s.dims.clone() }).collect(),
        epoch: state.epoch,
        stage: state.stage,
        seed: state.seed,
        updates: state.updates,
        lr: state.lr.clone(),
        best_cv: state.best_cv,
        adam: state.adam.cfg,
        adam_t: state.adam.t,
    };
    fs::write(dir.join("params.bin"), params)?;
    fs::write(dir.join("optim.bin"), optim_m)?;
    fs::write(dir.join("config.json"), config.to_json_string())?;
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

fn read_f32(bytes: &[u8], at: &mut usize, n: usize) -> Result<Vec<f32>> {
    let end = *at + 4 * n;
    let chunk = bytes
        .get(*at..end)
        .ok_or_else(|| Error::Checkpoint(format!("binary file ends after {} bytes, need {end}", bytes.len())))?;
    *at = end;
    Ok(chunk.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", meta.format_version)));
    }
    let config = parse_network_config(&fs::read_to_string(dir.join("config.json"))?)?;
    if config.hash() != meta.config_hash {
        return Err(Error::Checkpoint("config.json does not match the hash in meta.json".into()));
    }
    let params_bytes = fs::read(dir.join("params.bin"))?;
    let optim_bytes = fs::read(dir.join("optim.bin"))?;
    let total: usize = meta.manifest.iter().map(|e| e.dims.iter().product::<usize>()).sum();
    if params_bytes.len() != 4 * total || optim_bytes.len() != 8 * total {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter values, params.bin has {} bytes and optim.bin {}",
            total,
            params_bytes.len(),
            optim_bytes.len()
        )));
    }
    let mut params = ParamStore::new();
    let mut adam = AdamState::new(meta.adam);
    adam.t = meta.adam_t;
    let (mut pa, mut ma, mut va) = (0, 0, 4 * total);
    for e in &meta.manifest {
        let spec = ParamSpec { name: e.name.clone(), dims: e.dims.clone(), fan: None, bias_offset: None };
        let n = spec.numel();
        params.insert(&e.name, Tensor::from_vec(spec.shape(), read_f32(&params_bytes, &mut pa, n)?)?);
        adam.m.insert(e.name.clone(), read_f32(&optim_bytes, &mut ma, n)?);
        adam.v.insert(e.name.clone(), read_f32(&optim_bytes, &mut va, n)?);
    }
    let state = TrainState {
        params,
        adam,
        lr: meta.lr.clone(),
        epoch: meta.epoch,
        stage: meta.stage,
        seed: meta.seed,
        updates: meta.updates,
        best_cv: meta.best_cv,
    };
    Ok(Checkpoint { meta, config, state })
}
