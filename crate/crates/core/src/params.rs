//! Named parameter collections and the flat binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   b"FTLABCKP"
//! version  u32       1
//! hlen     u64       length of the header block
//! header   hlen      UTF-8 "key=value\n" lines (model config, provenance, ...)
//! count    u64       number of tensor records
//! record*  count     name_len u32 | name bytes | rank u32 | dims u64 * rank | data f32 * prod(dims)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FTLABCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Ordered map of parameter name to tensor. Iteration follows insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: IndexMap::new(),
        }
    }

    pub(crate) fn from_map(tensors: IndexMap<String, Tensor<T>>) -> Self {
        Self { tensors }
    }

    /// Rejects duplicate names.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(LabError::invalid(format!("duplicate parameter name `{name}`")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    /// Replaces an existing tensor; shape must match.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| LabError::invalid(format!("unknown parameter `{name}`")))?;
        if slot.shape() != tensor.shape() {
            return Err(LabError::shape(
                "param_set",
                format!("{name}: {:?} vs {:?}", slot.shape(), tensor.shape()),
            ));
        }
        *slot = tensor;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    /// Like `get`, with a descriptive error.
    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| LabError::invalid(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// True when both stores hold the same names in the same order with the
    /// same shapes.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    /// Layout comparison across element types.
    pub fn same_layout_as<U: Real>(&self, other: &ParamStore<U>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.same_layout(other)
            && self
                .tensors
                .values()
                .zip(other.tensors.values())
                .all(|(a, b)| a.bit_eq(b))
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Global L2 norm, accumulated in 64-bit.
    pub fn global_norm(&self) -> f64 {
        self.tensors.values().map(Tensor::sum_sq_f64).sum::<f64>().sqrt()
    }
}

impl ParamStore<f32> {
    /// SHA-256 over names, shapes and little-endian data.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// A checkpoint file: key-value header plus named f32 tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointFile {
    pub header: IndexMap<String, String>,
    pub tensors: ParamStore<f32>,
}

impl CheckpointFile {
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let mut header = String::new();
        for (k, v) in &self.header {
            header.push_str(k);
            header.push('=');
            header.push_str(v);
            header.push('\n');
        }
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(header.as_bytes())?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in self.tensors.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        Self::read_from(&mut r)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let fmt = |e: std::io::Error| LabError::Format(format!("truncated checkpoint: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(LabError::Format("bad magic".into()));
        }
        let version = read_u32(r).map_err(fmt)?;
        if version != CHECKPOINT_VERSION {
            return Err(LabError::Format(format!("unsupported version {version}")));
        }
        let hlen = read_u64(r).map_err(fmt)? as usize;
        let mut hbytes = vec![0u8; hlen];
        r.read_exact(&mut hbytes).map_err(fmt)?;
        let htext = String::from_utf8(hbytes)
            .map_err(|_| LabError::Format("header is not UTF-8".into()))?;
        let mut header = IndexMap::new();
        for line in htext.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LabError::Format(format!("bad header line `{line}`")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let count = read_u64(r).map_err(fmt)?;
        let mut tensors = ParamStore::new();
        for _ in 0..count {
            let nlen = read_u32(r).map_err(fmt)? as usize;
            let mut nbytes = vec![0u8; nlen];
            r.read_exact(&mut nbytes).map_err(fmt)?;
            let name = String::from_utf8(nbytes)
                .map_err(|_| LabError::Format("tensor name is not UTF-8".into()))?;
            let rank = read_u32(r).map_err(fmt)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(r).map_err(fmt)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw).map_err(fmt)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors
                .insert(name, Tensor::new(shape, data))
                .map_err(|e| LabError::Format(e.to_string()))?;
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| LabError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(LabError::MissingArtifact(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamStore::<f32>::new();
        p.insert("a", Tensor::zeros(&[1])).unwrap();
        assert!(p.insert("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn layout_matches_documented_bytes() {
        let mut tensors = ParamStore::new();
        tensors
            .insert("w", Tensor::from_slice(&[2], &[1.0f32, -2.0]))
            .unwrap();
        let mut header = IndexMap::new();
        header.insert("k".to_string(), "v".to_string());
        let bytes = CheckpointFile { header, tensors }.to_bytes();
        let mut expected = Vec::new();
        expected.extend_from_slice(b"FTLABCKP");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&4u64.to_le_bytes());
        expected.extend_from_slice(b"k=v\n");
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(b"w");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(CheckpointFile::from_bytes(b"NOTACKPT\x01\x00\x00\x00").is_err());
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_bit_exact(
            entries in prop::collection::vec(
                (prop::collection::vec(1usize..4, 0..3), any::<u32>()),
                0..5,
            )
        ) {
            let mut tensors = ParamStore::new();
            for (i, (shape, seed)) in entries.iter().enumerate() {
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|j| f32::from_bits(seed.wrapping_add(j as u32 * 7919)))
                    .collect();
                tensors.insert(format!("p{i}.weight"), Tensor::new(shape.clone(), data)).unwrap();
            }
            let mut header = IndexMap::new();
            header.insert("provenance".to_string(), "test".to_string());
            let file = CheckpointFile { header, tensors };
            let bytes = file.to_bytes();
            let back = CheckpointFile::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            prop_assert!(back.tensors.same_layout(&file.tensors));
        }
    }
}
