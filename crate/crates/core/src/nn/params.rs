//! Named parameter storage, initialisation and the flat-binary checkpoint format.
//!
//! On disk a parameter set is a little-endian `f32` blob plus a JSON manifest
//! mapping each name to its shape and element offset.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StasError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in `±sqrt(6 / fan_in)`, the He-uniform scheme.
    HeUniform { fan_in: usize },
    /// Uniform in `±1 / sqrt(fan_in)`.
    Uniform { fan_in: usize },
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

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut impl Rng) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Const(v) => Tensor::full(shape, v),
            Init::HeUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
            }
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
            }
        };
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

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Copy with every value rounded through `f32`, i.e. exactly what a
    /// save/load cycle produces.
    pub fn quantized(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.map(|v| v as f32 as f64))
                .collect(),
        }
    }

    /// Overwrite values from `other` for every name both stores share and
    /// whose name starts with `prefix`.
    pub fn copy_from(&mut self, other: &ParamStore, prefix: &str) -> usize {
        let mut copied = 0;
        for (i, name) in self.names.iter().enumerate() {
            if !name.starts_with(prefix) {
                continue;
            }
            if let Some(j) = other.find(name) {
                if other.tensors[j.0].shape() == self.tensors[i].shape() {
                    self.tensors[i] = other.tensors[j.0].clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn to_blob(&self) -> (Vec<u8>, Manifest) {
        let mut bytes = Vec::with_capacity(self.num_scalars() * 4);
        let mut entries = BTreeMap::new();
        let mut offset = 0;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            for &v in t.data() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
            entries.insert(
                name.clone(),
                ManifestEntry {
                    shape: t.shape().to_vec(),
                    offset,
                },
            );
            offset += t.numel();
        }
        (
            bytes,
            Manifest {
                total: offset,
                entries,
            },
        )
    }

    /// Fill this store from a blob; every parameter must be present with
    /// a matching shape.
    pub fn load_blob(&mut self, bytes: &[u8], manifest: &Manifest) -> Result<()> {
        if bytes.len() != manifest.total * 4 {
            return Err(StasError::Format(format!(
                "parameter blob has {} bytes, manifest expects {}",
                bytes.len(),
                manifest.total * 4
            )));
        }
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let entry = manifest
                .entries
                .get(name)
                .ok_or_else(|| StasError::Format(format!("checkpoint lacks parameter {name}")))?;
            if entry.shape != t.shape() {
                return Err(StasError::Format(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    entry.shape,
                    t.shape()
                )));
            }
            let start = entry.offset * 4;
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                let b = &bytes[start + 4 * i..start + 4 * i + 4];
                *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
            }
        }
        Ok(())
    }

    pub fn save(&self, blob_path: &Path, manifest_path: &Path) -> Result<()> {
        let (bytes, manifest) = self.to_blob();
        fs::write(blob_path, bytes)?;
        fs::write(manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(&mut self, blob_path: &Path, manifest_path: &Path) -> Result<()> {
        let bytes = fs::read(blob_path)?;
        let manifest: Manifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
        self.load_blob(&bytes, &manifest)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub shape: Vec<usize>,
    /// Offset in elements (not bytes).
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub total: usize,
    pub entries: BTreeMap<String, ManifestEntry>,
}

/// Per-parameter gradient accumulator aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradBuffer {
    grads: Vec<Option<Tensor>>,
}

impl GradBuffer {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn accumulate(&mut self, grads: &crate::autograd::Gradients) {
        for (id, g) in grads.param_grads() {
            self.add(id, g);
        }
    }

    pub fn add(&mut self, id: ParamId, g: &Tensor) {
        match &mut self.grads[id.0] {
            Some(t) => t.add_assign(g),
            slot => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &GradBuffer) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.grads.iter_mut().flatten() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }
}

/// Adaptive-moment optimiser with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .ids()
            .map(|id| vec![0.0; store.get(id).numel()])
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update; parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for (i, p) in store.get_mut(id).data_mut().iter_mut().enumerate() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    /// Moment buffers as parameter-shaped stores (`adam.m/…`, `adam.v/…`).
    pub fn state_store(&self, store: &ParamStore) -> ParamStore {
        let mut out = ParamStore::new();
        for id in store.ids() {
            let shape = store.get(id).shape();
            out.names.push(format!("adam.m/{}", store.name(id)));
            out.tensors.push(Tensor::new(shape, self.m[id.0].clone()));
            out.names.push(format!("adam.v/{}", store.name(id)));
            out.tensors.push(Tensor::new(shape, self.v[id.0].clone()));
        }
        out
    }
}
