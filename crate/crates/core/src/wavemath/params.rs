use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    /// Metasurface phase angle in radians, kept in `[0, 2π)`.
    Phase,
    BnScale,
    BnShift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    /// Sub-network label used for gradient-norm bookkeeping and bundling.
    pub group: String,
    pub kind: ParamKind,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Param {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Flat, ordered collection of every trainable tensor of a model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, p: Param) -> ParamId {
        debug_assert_eq!(p.rows * p.cols, p.data.len());
        self.params.push(p);
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn ids_in_group(&self, group: &str) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }
}

/// Gradient of a scalar loss with respect to trainable parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.map.get(&id).map(Vec::as_slice)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.map.contains_key(&id)
    }

    pub fn insert(&mut self, id: ParamId, g: Vec<f64>) {
        self.map.insert(id, g);
    }

    pub fn remove(&mut self, id: ParamId) -> Option<Vec<f64>> {
        self.map.remove(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.map.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// L2 norm of all gradients whose parameter belongs to `group`.
    pub fn group_norm(&self, store: &ParamStore, group: &str) -> f64 {
        self.map
            .iter()
            .filter(|(id, _)| store.get(**id).group == group)
            .flat_map(|(_, g)| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// First parameter whose gradient contains a non-finite entry.
    pub fn first_non_finite(&self) -> Option<ParamId> {
        self.map
            .iter()
            .find(|(_, g)| g.iter().any(|v| !v.is_finite()))
            .map(|(id, _)| *id)
    }

    pub fn check_shapes(&self, store: &ParamStore) -> Result<()> {
        for (id, g) in &self.map {
            let p = store.get(*id);
            if p.len() != g.len() {
                return Err(Error::config(format!(
                    "gradient for {} has {} entries, parameter has {}",
                    p.name,
                    g.len(),
                    p.len()
                )));
            }
        }
        Ok(())
    }
}
