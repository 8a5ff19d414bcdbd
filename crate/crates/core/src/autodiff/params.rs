use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::representation::tns;

/// Index of a parameter inside a [`ParamStore`].
///
/// A graph built by [`ParamStore::graph`] registers parameter `i` as its
/// `i`-th leaf, so a `ParamId` doubles as the [`Var`] of that parameter in
/// any such graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn var(self) -> Var {
        Var(self.0)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    params: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    extra: Option<serde_json::Value>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Fresh graph with every parameter registered as a tracked leaf.
    pub fn graph(&self) -> Graph {
        Graph::with_leaves(&self.tensors).0
    }

    /// Per-parameter gradients out of a backward pass over a graph created
    /// by [`ParamStore::graph`].
    pub fn collect_grads(&self, graph: &Graph, grads: &Gradients) -> Vec<Tensor> {
        (0..self.len()).map(|i| grads.wrt(graph, Var(i))).collect()
    }

    /// `p -= lr * g` for every parameter.
    pub fn sgd_step(&mut self, grads: &[Tensor], lr: f64) {
        for (p, g) in self.tensors.iter_mut().zip(grads) {
            p.data_mut().iter_mut().zip(g.data()).for_each(|(p, g)| *p -= lr * g);
        }
    }

    /// Write one TNS1 file per parameter plus `manifest.json`.
    pub fn save_dir(&self, dir: &Path, extra: Option<serde_json::Value>) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut params = BTreeMap::new();
        for (_, name, t) in self.iter() {
            let file = format!("{name}.tns1");
            fs::write(dir.join(&file), tns::encode(t))?;
            params.insert(name.to_string(), file);
        }
        let manifest = Manifest { params, extra };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Overwrite values from a checkpoint directory. Every parameter of
    /// `self` must be present with an identical shape.
    pub fn load_dir(&mut self, dir: &Path) -> Result<Option<serde_json::Value>> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
        if manifest.params.len() != self.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model expects {}",
                manifest.params.len(),
                self.len()
            )));
        }
        for i in 0..self.len() {
            let name = &self.names[i];
            let file = manifest
                .params
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing parameter {name}")))?;
            let t = tns::decode(&fs::read(dir.join(file))?)?;
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::Config(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = t;
        }
        Ok(manifest.extra)
    }
}
