//! Named parameter storage, per-tape binding, and the checkpoint format.
//!
//! A checkpoint is a directory with two files:
//!
//! * `manifest.json`: `{"format":"dygenc-checkpoint","version":1,"dtype":"f64",
//!   "tensors":[{"name":..,"group":"base"|"adapter","shape":[..],"offset":..,"len":..}],
//!   "meta":{..}}`. `offset` and `len` count elements, not bytes.
//! * `tensors.bin`: every tensor's elements, concatenated in manifest order,
//!   little-endian IEEE-754 in the manifest's dtype.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor, DTYPE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of the model a tensor belongs to; low-rank adapters are kept
/// apart so they can be swapped without touching the base weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Base,
    Adapter,
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    group: Group,
    tensor: Tensor,
    trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "parameter {name} registered twice");
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(Entry {
            name,
            group,
            tensor,
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Normal(0, std) init.
    pub fn add_normal(&mut self, name: &str, shape: &[usize], std: Float, rng: &mut ChaCha8Rng) -> ParamId {
        let dist = Normal::new(0.0, std as f64).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng) as Float).collect();
        self.add(name, Group::Base, Tensor::new(shape.to_vec(), data).expect("shape matches"))
    }

    /// Uniform(−1/√fan_in, 1/√fan_in) init for a `fan_in × fan_out` weight.
    pub fn add_linear_weight(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound) as Float)
            .collect();
        self.add(name, Group::Base, Tensor::matrix(fan_in, fan_out, data))
    }

    pub fn add_const(&mut self, name: &str, shape: &[usize], value: Float) -> ParamId {
        self.add(name, Group::Base, Tensor::full(shape, value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> Group {
        self.entries[id.0].group
    }

    pub fn set_group(&mut self, id: ParamId, group: Group) {
        self.entries[id.0].group = group;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Total element count, optionally only trainable tensors.
    pub fn count(&self, trainable_only: bool) -> usize {
        self.entries
            .iter()
            .filter(|e| !trainable_only || e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn save(&self, dir: impl AsRef<Path>, meta: &serde_json::Value) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut bytes = Vec::new();
        let mut tensors = Vec::new();
        let mut offset = 0;
        for e in &self.entries {
            for v in e.tensor.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorRecord {
                name: e.name.clone(),
                group: e.group,
                shape: e.tensor.shape().to_vec(),
                offset,
                len: e.tensor.numel(),
            });
            offset += e.tensor.numel();
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            dtype: DTYPE.into(),
            tensors,
            meta: meta.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let m = dir.join("manifest.json");
        fs::write(&m, text).map_err(|e| Error::io(&m, e))?;
        let b = dir.join("tensors.bin");
        fs::write(&b, bytes).map_err(|e| Error::io(&b, e))
    }

    /// Overwrite parameters from a checkpoint. Every tensor in this store must
    /// be present with the same shape; `groups` limits which are read.
    pub fn load_into(&mut self, dir: impl AsRef<Path>, groups: &[Group]) -> Result<serde_json::Value> {
        let (manifest, data) = read_checkpoint(dir.as_ref())?;
        let records: BTreeMap<&str, &TensorRecord> =
            manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        for e in &mut self.entries {
            if !groups.contains(&e.group) {
                continue;
            }
            let rec = records
                .get(e.name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} missing", e.name)))?;
            if rec.shape != e.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    e.name,
                    rec.shape,
                    e.tensor.shape()
                )));
            }
            e.tensor.data_mut().copy_from_slice(&data[rec.offset..rec.offset + rec.len]);
        }
        Ok(manifest.meta)
    }
}

const FORMAT: &str = "dygenc-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    group: Group,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    dtype: String,
    tensors: Vec<TensorRecord>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Read the metadata block of a checkpoint without loading tensors.
pub fn checkpoint_meta(dir: impl AsRef<Path>) -> Result<serde_json::Value> {
    let m = dir.as_ref().join("manifest.json");
    let text = fs::read_to_string(&m).map_err(|e| Error::io(&m, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(manifest.meta)
}

fn read_checkpoint(dir: &Path) -> Result<(Manifest, Vec<Float>)> {
    let m = dir.join("manifest.json");
    let text = fs::read_to_string(&m).map_err(|e| Error::io(&m, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            manifest.format, manifest.version
        )));
    }
    if manifest.dtype != DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint dtype {} does not match build dtype {DTYPE}",
            manifest.dtype
        )));
    }
    let b = dir.join("tensors.bin");
    let bytes = fs::read(&b).map_err(|e| Error::io(&b, e))?;
    let width = std::mem::size_of::<Float>();
    if bytes.len() % width != 0 {
        return Err(Error::Checkpoint("tensors.bin is truncated".into()));
    }
    let data = bytes
        .chunks_exact(width)
        .map(|c| Float::from_le_bytes(c.try_into().expect("chunk width")))
        .collect::<Vec<_>>();
    if let Some(t) = manifest.tensors.iter().find(|t| t.offset + t.len > data.len()) {
        return Err(Error::Checkpoint(format!("tensor {} exceeds tensors.bin", t.name)));
    }
    Ok((manifest, data))
}

/// A tape plus lazily bound parameter leaves.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    /// Training mode enables dropout.
    pub train: bool,
    /// Root for dropout masks; combined with a per-call counter.
    pub seed: u64,
    dropout_calls: u64,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            train: false,
            seed: 0,
            dropout_calls: 0,
        }
    }

    pub fn training(store: &'a ParamStore, seed: u64) -> Self {
        Self {
            train: true,
            seed,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Leaf for a parameter; gradients are tracked iff it is trainable.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self
            .tape
            .leaf(self.store.get(id).clone(), self.store.is_trainable(id));
        self.bound[id.0] = Some(v);
        v
    }

    /// Dropout that is active only in training mode; each call draws a fresh
    /// mask from `(seed, call index)`.
    pub fn dropout(&mut self, x: Var, p: Float) -> Var {
        if !self.train || p <= 0.0 {
            return x;
        }
        self.dropout_calls += 1;
        let seed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(self.dropout_calls);
        self.tape.dropout(x, p, seed)
    }

    /// Gradients of the bound, trainable parameters.
    pub fn param_grads(&self, grads: &mut Grads) -> Vec<(ParamId, Tensor)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                grads.take(v).map(|g| (ParamId(i), g))
            })
            .collect()
    }
}

impl std::ops::Deref for Session<'_> {
    type Target = Tape;

    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl std::ops::DerefMut for Session<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}
