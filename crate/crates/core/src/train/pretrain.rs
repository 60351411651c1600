//! Layer-wise pretraining: train a shallow encoder, then deepen it one
//! bidirectional pair at a time while keeping the learned parameters.

use std::collections::BTreeMap;

use crate::autodiff::{ParamSpec, ParamStore};
use crate::config::{LayerClass, LayerRef, NetworkConfig, RefKind, Unit};
use crate::error::{Error, Result};
use crate::rng::RngKey;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PretrainSchedule {
    pub start_depth: usize,
    pub epochs_per_stage: usize,
    pub full_depth: usize,
}

impl PretrainSchedule {
    pub fn new(start_depth: usize, epochs_per_stage: usize, full_depth: usize) -> Self {
        PretrainSchedule { start_depth: start_depth.clamp(1, full_depth.max(1)), epochs_per_stage: epochs_per_stage.max(1), full_depth }
    }

    /// A schedule whose only stage is the full model.
    pub fn off(full_depth: usize) -> Self {
        PretrainSchedule { start_depth: full_depth, epochs_per_stage: 1, full_depth }
    }

    /// Encoder depth of every stage, ending at the full depth.
    pub fn depths(&self) -> Vec<usize> {
        (self.start_depth..=self.full_depth).collect()
    }

    pub fn stages(&self) -> usize {
        self.full_depth + 1 - self.start_depth
    }

    pub fn stage_for_epoch(&self, epoch: usize) -> usize {
        (epoch / self.epochs_per_stage).min(self.stages() - 1)
    }
}

/// The encoder as a stack of (forward, backward) LSTM pairs, bottom first.
pub fn encoder_pairs(cfg: &NetworkConfig) -> Result<Vec<(String, String)>> {
    let is_lstm = |name: &str| {
        cfg.layers.get(name).is_some_and(|l| l.class == LayerClass::Rec && matches!(l.unit, Some(Unit::Lstm)))
    };
    let lstms: Vec<&str> = cfg.layers.keys().map(String::as_str).filter(|n| is_lstm(n)).collect();
    let mut levels: Vec<(String, String)> = Vec::new();
    let mut placed = 0;
    let not_stageable = |why: String| Error::Config(format!("encoder cannot be grown layer-wise: {why}"));
    while placed < lstms.len() {
        let below: Vec<&str> = levels.last().map(|(f, b)| vec![f.as_str(), b.as_str()]).unwrap_or_default();
        let level: Vec<&str> = lstms
            .iter()
            .copied()
            .filter(|n| {
                let l = &cfg.layers[*n];
                let lstm_inputs: Vec<&str> = l.from.iter().map(|r| r.name.as_str()).filter(|i| is_lstm(i)).collect();
                if below.is_empty() {
                    lstm_inputs.is_empty()
                } else {
                    !lstm_inputs.is_empty() && lstm_inputs.iter().all(|i| below.contains(i))
                }
            })
            .collect();
        let fw: Vec<&str> = level.iter().copied().filter(|n| cfg.layers[*n].direction == 1).collect();
        let bw: Vec<&str> = level.iter().copied().filter(|n| cfg.layers[*n].direction == -1).collect();
        if fw.len() != 1 || bw.len() != 1 || level.len() != 2 {
            return Err(not_stageable(format!("level {} has {} LSTM layers, expected one per direction", levels.len(), level.len())));
        }
        if !below.is_empty() {
            for n in [fw[0], bw[0]] {
                let from: Vec<&str> = cfg.layers[n].from.iter().map(|r| r.name.as_str()).collect();
                if from != below {
                    return Err(not_stageable(format!("`{n}` does not read exactly the pair below it")));
                }
            }
        }
        levels.push((fw[0].to_string(), bw[0].to_string()));
        placed += 2;
    }
    Ok(levels)
}

/// `full` with the encoder cut to `depth` pairs; whatever read the top pair
/// now reads the new top pair (matched by direction).
pub fn pretrain_stage_config(full: &NetworkConfig, depth: usize) -> Result<NetworkConfig> {
    let pairs = encoder_pairs(full)?;
    if depth == 0 || depth > pairs.len() {
        return Err(Error::Config(format!("encoder depth {depth} outside 1..={}", pairs.len())));
    }
    if depth == pairs.len() {
        return Ok(full.clone());
    }
    let (top_fw, top_bw) = pairs.last().expect("non-empty");
    let (new_fw, new_bw) = &pairs[depth - 1];
    let removed: Vec<&str> = pairs[depth..].iter().flat_map(|(f, b)| [f.as_str(), b.as_str()]).collect();
    let mut rename: BTreeMap<&str, &str> = BTreeMap::new();
    rename.insert(top_fw, new_fw);
    rename.insert(top_bw, new_bw);

    let mut cfg = full.clone();
    cfg.layers.retain(|k, _| !removed.contains(&k.as_str()));
    let fix = |r: &mut LayerRef, top_level: bool| -> Result<()> {
        let reads_top = top_level || r.kind == RefKind::Base;
        if !reads_top {
            return Ok(());
        }
        if let Some(n) = rename.get(r.name.as_str()) {
            r.name = n.to_string();
        } else if removed.contains(&r.name.as_str()) {
            return Err(Error::Config(format!("`{}` is read from outside the encoder stack", r.name)));
        }
        Ok(())
    };
    for layer in cfg.layers.values_mut() {
        for r in layer.from.iter_mut().chain(layer.weights.iter_mut()).chain(layer.base.iter_mut()) {
            fix(r, true)?;
        }
        if let Some(Unit::Subnetwork(sub)) = &mut layer.unit {
            for l in sub.values_mut() {
                for r in l.from.iter_mut().chain(l.weights.iter_mut()).chain(l.base.iter_mut()) {
                    fix(r, false)?;
                }
            }
        }
    }
    Ok(cfg)
}

/// Parameters for `next`: every name already in `prev` is copied unchanged,
/// the rest are freshly initialized from `key`.
pub fn grow_params<T: Scalar>(prev: &ParamStore<T>, next: &[ParamSpec], key: RngKey) -> Result<ParamStore<T>> {
    for name in prev.names() {
        if !next.iter().any(|s| s.name == name) {
            return Err(Error::Checkpoint(format!("parameter `{name}` is missing from the grown model")));
        }
    }
    let mut out = ParamStore::new();
    for spec in next {
        match prev.get(&spec.name) {
            Some(t) if *t.shape() == spec.shape() => out.insert(&spec.name, t.clone()),
            Some(t) => {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` changes shape from {} to {}",
                    spec.name,
                    t.shape(),
                    spec.shape()
                )))
            }
            None => out.insert(&spec.name, spec.init(key)),
        }
    }
    Ok(out)
}
