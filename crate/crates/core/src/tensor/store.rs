use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

/// Named parameters with a gradient slot each, iterated in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Location of one tensor inside the binary blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    /// Always `"f32-le"`.
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
}

pub const BLOB_DTYPE: &str = "f32-le";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.grads[i])
    }

    /// `(name, value, grad)` in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .zip(&self.grads)
            .map(|((n, v), g)| (n.as_str(), v, g))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor, &Tensor)> {
        self.names
            .iter()
            .zip(self.values.iter_mut())
            .zip(&self.grads)
            .map(|((n, v), g)| (n.as_str(), v, g))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor) -> Result<()> {
        let &i = self.index.get(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        if self.grads[i].shape() != g.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate_grad",
                lhs: self.grads[i].shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        self.grads[i].add_assign(g);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Round every value to the nearest `f32` so the store survives a
    /// save/load cycle unchanged.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            v.data_mut().iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }

    pub fn to_manifest_and_blob(&self) -> (StoreManifest, Vec<u8>) {
        let mut blob = Vec::with_capacity(self.num_scalars() * 4);
        let mut tensors = Vec::with_capacity(self.len());
        for (name, value, _) in self.iter() {
            tensors.push(TensorEntry { name: name.to_string(), shape: value.shape().to_vec(), offset: blob.len() });
            for &x in value.data() {
                blob.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        (StoreManifest { dtype: BLOB_DTYPE.to_string(), tensors }, blob)
    }

    pub fn from_manifest_and_blob(manifest: &StoreManifest, blob: &[u8]) -> Result<Self> {
        if manifest.dtype != BLOB_DTYPE {
            return Err(TensorError::Io(format!("unsupported dtype {:?}", manifest.dtype)));
        }
        let mut store = Self::new();
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            let end = e.offset + n * 4;
            let bytes = blob
                .get(e.offset..end)
                .ok_or_else(|| TensorError::Io(format!("{}: blob too short ({} < {end})", e.name, blob.len())))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            store.insert(&e.name, Tensor::new(&e.shape, data)?)?;
        }
        Ok(store)
    }

    /// Write `manifest` as JSON and the values as a little-endian `f32` blob.
    pub fn save(&self, manifest_path: impl AsRef<Path>, blob_path: impl AsRef<Path>) -> Result<()> {
        let (manifest, blob) = self.to_manifest_and_blob();
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| TensorError::Io(e.to_string()))?;
        fs::write(manifest_path, json).map_err(|e| TensorError::Io(e.to_string()))?;
        fs::write(blob_path, blob).map_err(|e| TensorError::Io(e.to_string()))
    }

    pub fn load(manifest_path: impl AsRef<Path>, blob_path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(manifest_path).map_err(|e| TensorError::Io(e.to_string()))?;
        let manifest: StoreManifest = serde_json::from_str(&text).map_err(|e| TensorError::Io(e.to_string()))?;
        let blob = fs::read(blob_path).map_err(|e| TensorError::Io(e.to_string()))?;
        Self::from_manifest_and_blob(&manifest, &blob)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[1])).unwrap();
        assert_eq!(s.insert("a", Tensor::zeros(&[2])).unwrap_err(), TensorError::DuplicateParam("a".into()));
    }

    #[test]
    fn grad_slots_match_shapes() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2, 3])).unwrap();
        assert_eq!(s.grad("w").unwrap().shape(), &[2, 3]);
        assert!(s.accumulate_grad("w", &Tensor::zeros(&[3, 2])).is_err());
        assert!(s.accumulate_grad("nope", &Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn manifest_offsets_are_bytes() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[2, 2])).unwrap();
        s.insert("b", Tensor::full(&[3], 1.5)).unwrap();
        let (m, blob) = s.to_manifest_and_blob();
        assert_eq!(m.tensors[1].offset, 16);
        assert_eq!(blob.len(), 28);
        assert_eq!(&blob[16..20], &1.5f32.to_le_bytes());
    }

    #[test]
    fn short_blob_is_an_error() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[4])).unwrap();
        let (m, blob) = s.to_manifest_and_blob();
        assert!(ParamStore::from_manifest_and_blob(&m, &blob[..8]).is_err());
    }
}
