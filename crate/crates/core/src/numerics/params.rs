use std::collections::BTreeMap;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::tensor::{Real, Tensor};

/// Named parameter tensors in canonical (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    tensors: BTreeMap<String, Arc<Tensor<T>>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, Arc::new(t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .map(|t| t.as_ref())
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .map(Arc::make_mut)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn shared(&self, name: &str) -> Result<Arc<Tensor<T>>> {
        self.tensors
            .get(name)
            .cloned()
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Places a tensor on the graph; `trainable` leaves receive gradients.
    pub fn bind(&self, g: &mut Graph<T>, name: &str, trainable: bool) -> Result<NodeId> {
        let t = self.shared(name)?;
        Ok(if trainable {
            g.named_leaf(name, t)
        } else {
            g.leaf(t, false)
        })
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.cast::<U>())))
                .collect(),
        }
    }

    /// Moves every tensor whose name starts with `prefix` into a new store.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn merge(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (k, v) in &other.tensors {
            self.insert(k.clone(), v.as_ref().clone())?;
        }
        Ok(())
    }
}

impl ParamStore<f32> {
    /// SHA-256 over names, shapes and little-endian data, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u32).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn checksum_tracks_content() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::zeros(&[2])).unwrap();
        let before = s.checksum();
        assert_eq!(before, s.clone().checksum());
        s.get_mut("a").unwrap().data_mut()[1] = 1.0;
        assert_ne!(before, s.checksum());
    }

    #[test]
    fn copy_on_write_after_bind() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::zeros(&[1])).unwrap();
        let mut g = Graph::<f32>::new();
        let id = s.bind(&mut g, "w", true).unwrap();
        s.get_mut("w").unwrap().data_mut()[0] = 3.0;
        assert_eq!(g.value(id).item(), 0.0);
        assert_eq!(s.get("w").unwrap().item(), 3.0);
    }
}
