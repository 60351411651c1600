use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::rng::RngKey;
use crate::tensor::{Axis, Scalar, Shape, Tensor};

/// Name, axes and initialization rule of one trainable tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    /// Glorot fan sizes; `None` for biases.
    pub fan: Option<(usize, usize)>,
    /// Constant added to a slice of a bias (LSTM forget gate).
    #[serde(default)]
    pub bias_offset: Option<(usize, usize, f64)>,
}

impl ParamSpec {
    pub fn shape(&self) -> Shape {
        match self.dims.as_slice() {
            [n] => Shape::new(&[(Axis::Feature, *n)]).expect("positive extent"),
            [k, n] => Shape::new(&[(Axis::Input, *k), (Axis::Feature, *n)]).expect("positive extents"),
            other => panic!("unsupported parameter rank {}", other.len()),
        }
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)) for matrices; zeros plus the
    /// optional gate offset for biases.
    pub fn init<T: Scalar>(&self, key: RngKey) -> Tensor<T> {
        let mut t = Tensor::zeros(self.shape());
        match self.fan {
            Some((fi, fo)) => {
                let r = (6.0 / (fi + fo) as f64).sqrt();
                let mut rng = key.child(&self.name).rng();
                for v in t.data_mut() {
                    *v = T::from_f64(rng.gen_range(-r..r));
                }
            }
            None => {
                if let Some((start, len, value)) = self.bias_offset {
                    for v in &mut t.data_mut()[start..start + len] {
                        *v = T::from_f64(value);
                    }
                }
            }
        }
        t
    }
}

/// Trainable parameters by name; iteration is lexicographic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Arc<Tensor<T>>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    /// Fresh parameters for every entry of `manifest`.
    pub fn initialize(manifest: &[ParamSpec], key: RngKey) -> Self {
        let mut s = ParamStore::new();
        for spec in manifest {
            s.insert(&spec.name, spec.init(key));
        }
        s
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) {
        self.params.insert(name.to_string(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|t| &**t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(Arc::make_mut)
    }

    pub fn shared(&self, name: &str) -> Result<Arc<Tensor<T>>> {
        self.params
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), &**v))
    }

    /// Registers the named parameter on `tape` (once per tape).
    pub fn register(&self, tape: &mut Tape<T>, name: &str) -> Result<NodeId> {
        if let Some(id) = tape.param_id(name) {
            return Ok(id);
        }
        Ok(tape.param(name, self.shared(name)?))
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), Arc::new(v.cast()))).collect() }
    }

    /// Checks names and shapes against a manifest.
    pub fn check_manifest(&self, manifest: &[ParamSpec]) -> Result<()> {
        if manifest.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "manifest lists {} parameters, store holds {}",
                manifest.len(),
                self.params.len()
            )));
        }
        for spec in manifest {
            match self.get(&spec.name) {
                Some(t) if *t.shape() == spec.shape() => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{}` has shape {}, manifest says {}",
                        spec.name,
                        t.shape(),
                        spec.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("parameter `{}` missing", spec.name))),
            }
        }
        Ok(())
    }
}
