//! Named parameter storage and its binding onto a tape.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{uniform, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which side of the meta-learning split a parameter belongs to: the
/// backbone recommender or the meta model (encoder, generator, hypernetwork
/// and route networks).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    Backbone,
    Meta,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Backbone => "backbone",
            Group::Meta => "meta",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: Group,
    /// Frozen entries (pretrained embedding tables) never receive gradients.
    pub trainable: bool,
    pub value: Tensor,
}

/// Ordered collection of named tensors. Names are unique and the set is
/// fixed once a model is built.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: &str,
        group: Group,
        value: Tensor,
        trainable: bool,
    ) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(alloc::format!(
                "duplicate parameter `{name}`"
            )));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            group,
            trainable,
            value,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    /// Weight `[fan_in, fan_out]` drawn from U(-a, a) with
    /// a = sqrt(6 / (fan_in + fan_out)).
    pub fn add_glorot(
        &mut self,
        name: &str,
        group: Group,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> Result<ParamId> {
        let a = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        let values = (0..fan_in * fan_out).map(|_| uniform(rng, -a, a)).collect();
        self.add(name, group, Tensor::matrix(fan_in, fan_out, values)?, true)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    /// Replace a tensor by name, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Config(alloc::format!("unknown parameter `{name}`")))?;
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_param",
                entry.value.shape(),
                value.shape(),
            ));
        }
        entry.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn count(&self, group: Option<Group>) -> usize {
        self.entries
            .iter()
            .filter(|e| group.is_none_or(|g| e.group == g))
            .map(|e| e.value.len())
            .sum()
    }

    /// FNV-1a over names, shapes and the bit patterns of every value.
    pub fn checksum(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for e in &self.entries {
            feed(e.name.as_bytes());
            for &d in e.value.shape() {
                feed(&(d as u64).to_le_bytes());
            }
            for v in e.value.values() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Per-parameter gradients aligned with a [`ParamSet`]. Missing entries are
/// zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            grads: vec![None; params.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn accumulate(&mut self, other: &ParamGrads) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            let Some(t) = theirs else { continue };
            match mine {
                Some(m) => m
                    .values_mut()
                    .iter_mut()
                    .zip(t.values())
                    .for_each(|(a, b)| *a += b),
                None => *mine = Some(t.clone()),
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.values_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.grads.iter().flatten().map(Tensor::squared_norm).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }
}

/// A tape plus lazy bindings from parameters to tape leaves.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ParamSet,
    bound: Vec<Option<Var>>,
    track: Option<Vec<bool>>,
}

impl<'p> Graph<'p> {
    /// Graph that differentiates every trainable parameter.
    pub fn new(params: &'p ParamSet) -> Self {
        let mask = params.entries.iter().map(|e| e.trainable).collect();
        Self::with_mask(params, mask)
    }

    /// Graph that differentiates only parameters whose mask entry is set
    /// (frozen entries stay constant regardless).
    pub fn with_mask(params: &'p ParamSet, mask: Vec<bool>) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            track: Some(mask),
        }
    }

    /// Graph with no gradient tracking at all.
    pub fn inference(params: &'p ParamSet) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            track: None,
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let entry = &self.params.entries[id.0];
        let requires = entry.trainable && self.track.as_ref().is_some_and(|m| m[id.0]);
        let v = self.tape.leaf(entry.value.clone(), requires);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn backward(&mut self, root: Var) -> Result<ParamGrads> {
        let mut grads = self.tape.backward(root)?;
        let mut out = ParamGrads::zeros_like(self.params);
        for (i, bound) in self.bound.iter().enumerate() {
            if let Some(v) = bound {
                out.grads[i] = grads.take(*v);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_stream;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::new();
        p.add("a", Group::Meta, Tensor::scalar(1.0), true).unwrap();
        assert!(p
            .add("a", Group::Backbone, Tensor::scalar(1.0), true)
            .is_err());
    }

    #[test]
    fn glorot_bound_respected() {
        let mut p = ParamSet::new();
        let id = p
            .add_glorot("w", Group::Meta, 10, 6, &mut rng_stream(1, 0))
            .unwrap();
        let a = libm::sqrt(6.0 / 16.0);
        assert!(p.get(id).values().iter().all(|v| v.abs() <= a));
        assert_eq!(p.get(id).shape(), &[10, 6]);
    }

    #[test]
    fn checksum_tracks_values() {
        let mut p = ParamSet::new();
        let id = p
            .add(
                "w",
                Group::Meta,
                Tensor::vector(vec![1.0, 2.0]).unwrap(),
                true,
            )
            .unwrap();
        let before = p.checksum();
        p.get_mut(id).values_mut()[0] = 1.5;
        assert_ne!(before, p.checksum());
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut p = ParamSet::new();
        let a = p
            .add(
                "a",
                Group::Backbone,
                Tensor::vector(vec![1.0, 2.0]).unwrap(),
                false,
            )
            .unwrap();
        let b = p
            .add(
                "b",
                Group::Meta,
                Tensor::vector(vec![3.0, 4.0]).unwrap(),
                true,
            )
            .unwrap();
        let mut g = Graph::new(&p);
        let (va, vb) = (g.param(a), g.param(b));
        let prod = g.tape.mul(va, vb).unwrap();
        let root = g.tape.sum(prod);
        let grads = g.backward(root).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().values(), &[1.0, 2.0]);
    }
}
