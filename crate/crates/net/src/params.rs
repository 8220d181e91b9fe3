//! Named parameter storage, initialisation helpers, Adam, and checkpoints.
//!
//! Checkpoints are a directory holding `config.json`, `params.json` (the
//! ordered list of parameter names and shapes) and one `.npy` file per
//! parameter named after it. Names are dotted paths such as
//! `hr.enc.0.block.1.vss.0.in_proj.weight`; the order of creation is the
//! order of the list and is a pure function of the network config.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use rsfr_core::array_io;

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("duplicate parameter name {0}")]
    Duplicate(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] array_io::ArrayIoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.grads.push(Tensor::zeros(value.rows, value.cols));
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Leaf node for a parameter in `g`.
    pub fn var(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(id.0, self.values[id.0].clone())
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `scale * dL/dp` for every parameter reached by `grads`.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (pid, g) in grads.params() {
            for (acc, v) in self.grads[pid].data.iter_mut().zip(&g.data) {
                *acc += scale * v;
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().map(|g| g.dot(g)).sum::<f64>().sqrt()
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for (name, v) in self.names.iter().zip(&mut self.values) {
            if name.starts_with(prefix) {
                v.data.iter_mut().for_each(|x| *x = 0.0);
                n += 1;
            }
        }
        n
    }

    /// SHA-256 over names, shapes and the exact bit patterns of the values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            h.update((v.rows as u64).to_le_bytes());
            h.update((v.cols as u64).to_le_bytes());
            for x in &v.data {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, dir: &Path) -> Result<(), ParamError> {
        let entries: Vec<ParamEntry> = self
            .names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| ParamEntry {
                name: n.clone(),
                shape: [v.rows, v.cols],
            })
            .collect();
        std::fs::create_dir_all(dir).map_err(|e| ParamError::Checkpoint(e.to_string()))?;
        let list = serde_json::to_string_pretty(&entries).map_err(|e| ParamError::Checkpoint(e.to_string()))?;
        std::fs::write(dir.join("params.json"), list + "\n").map_err(|e| ParamError::Checkpoint(e.to_string()))?;
        for (n, v) in self.names.iter().zip(&self.values) {
            let arr = Array2::from_shape_vec((v.rows, v.cols), v.data.clone()).expect("consistent shape");
            array_io::write_npy(&dir.join(format!("{n}.npy")), &arr)?;
        }
        Ok(())
    }

    /// Loads values into an already-constructed store with the same layout.
    pub fn load_into(&mut self, dir: &Path) -> Result<(), ParamError> {
        let text = std::fs::read_to_string(dir.join("params.json")).map_err(|e| ParamError::Checkpoint(e.to_string()))?;
        let entries: Vec<ParamEntry> = serde_json::from_str(&text).map_err(|e| ParamError::Checkpoint(e.to_string()))?;
        if entries.len() != self.len() {
            return Err(ParamError::Checkpoint(format!(
                "checkpoint has {} parameters, network has {}",
                entries.len(),
                self.len()
            )));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.name != self.names[i] || e.shape != [self.values[i].rows, self.values[i].cols] {
                return Err(ParamError::Checkpoint(format!(
                    "parameter {i} is {} {:?} in the checkpoint but {} {:?} in the network",
                    e.name,
                    e.shape,
                    self.names[i],
                    self.values[i].shape()
                )));
            }
            let arr: Array2<f64> = array_io::read_npy(&dir.join(format!("{}.npy", e.name)))?;
            self.values[i].data = arr.iter().copied().collect();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: [usize; 2],
}

/// Registers parameters under a dotted prefix.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    /// Runs `f` with `segment` appended to the prefix.
    pub fn scope<T>(&mut self, segment: impl std::fmt::Display, f: impl FnOnce(&mut Init<'_>) -> T) -> T {
        let saved = self.prefix.clone();
        self.prefix = self.name(&segment.to_string());
        let out = f(self);
        self.prefix = saved;
        out
    }

    pub fn add(&mut self, leaf: &str, value: Tensor) -> ParamId {
        let name = self.name(leaf);
        self.store.add(name, value)
    }

    pub fn uniform(&mut self, leaf: &str, rows: usize, cols: usize, bound: f64) -> ParamId {
        let t = Tensor::uniform(rows, cols, bound, self.rng);
        self.add(leaf, t)
    }

    pub fn constant(&mut self, leaf: &str, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(leaf, Tensor::full(rows, cols, v))
    }

    pub fn gen_range(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.gen_range(lo..hi)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.values.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: store.values.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    /// One update from the accumulated gradients; gradients are left as is.
    pub fn update(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, value) in store.values.iter_mut().enumerate() {
            let g = &store.grads[i].data;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..value.data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                value.data[j] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
