//! Single-file weight checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "PGCK" | u32 version | u64 manifest length | manifest (UTF-8 JSON)
//! u64 tensor count
//! per tensor: u32 name length | name | u8 dtype tag | u32 ndim | u64 dims[ndim] | data
//! ```
//!
//! Tensors are written in the network's parameter visiting order. Buffers such as batch-norm
//! running statistics are included.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneSpec, HeadKind, PrefixNetwork};
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::partition::StagePlan;
use crate::tensor::{DType, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"PGCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: BackboneSpec,
    pub spec_hash: String,
    pub plan: Vec<usize>,
    pub stage_index: usize,
    pub head: HeadKind,
    pub seed: u64,
    pub epoch: usize,
    pub num_classes: usize,
    pub dtype: DType,
}

#[derive(Clone, Debug)]
pub struct StoredTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl StoredTensor {
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let values: Vec<T> = match self.dtype {
            DType::F32 => self.data.chunks_exact(4).map(|b| T::lit(f32::read_le(b) as f64)).collect(),
            DType::F64 => self.data.chunks_exact(8).map(|b| T::lit(f64::read_le(b))).collect(),
        };
        Tensor::from_vec(&self.shape, values)
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<StoredTensor>,
}

impl Checkpoint {
    pub fn from_network<T: Scalar>(net: &PrefixNetwork<T>, epoch: usize) -> Self {
        let spec = net.spec().clone();
        let manifest = Manifest {
            spec_hash: spec.hash(),
            num_classes: spec.num_classes,
            plan: net.plan().sizes().to_vec(),
            stage_index: net.stage(),
            head: net.head_kind(),
            seed: net.seed(),
            epoch,
            dtype: T::DTYPE,
            spec,
        };
        let mut tensors = Vec::new();
        net.visit("", &mut |name, p| {
            let mut data = Vec::with_capacity(p.value.len() * T::DTYPE.size());
            for &v in p.value.data() {
                v.write_le(&mut data);
            }
            tensors.push(StoredTensor {
                name: name.to_string(),
                dtype: T::DTYPE,
                shape: p.value.shape().to_vec(),
                data,
            });
        });
        Checkpoint { manifest, tensors }
    }

    pub fn names(&self) -> Vec<&str> {
        self.tensors.iter().map(|t| t.name.as_str()).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dtype.tag());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.data);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(&mut r, "version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = read_u64(&mut r, "manifest length")? as usize;
        let manifest: Manifest = serde_json::from_slice(take(&mut r, len, "manifest")?)?;
        let count = read_u64(&mut r, "tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r, "name length")? as usize;
            let name = String::from_utf8(take(&mut r, name_len, "name")?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let mut tag = [0u8; 1];
            read_exact(&mut r, &mut tag, "dtype")?;
            let dtype = DType::from_tag(tag[0])
                .ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {} for {name}", tag[0])))?;
            let ndim = read_u32(&mut r, "ndim")? as usize;
            let shape = (0..ndim)
                .map(|_| read_u64(&mut r, "dim").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product::<usize>() * dtype.size();
            let data = take(&mut r, n, &name)?.to_vec();
            tensors.push(StoredTensor { name, dtype, shape, data });
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Checkpoint { manifest, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Checks the manifest against the network a caller is about to build from it.
    pub fn validate_against(&self, spec: &BackboneSpec) -> Result<()> {
        let m = &self.manifest;
        if m.spec_hash != spec.hash() || m.spec != *spec {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint is for {} ({}), requested {} ({})",
                m.spec.name,
                m.spec_hash,
                spec.name,
                spec.hash()
            )));
        }
        Ok(())
    }

    /// Rebuilds the network stored in this checkpoint.
    pub fn to_network<T: Scalar>(&self) -> Result<PrefixNetwork<T>> {
        let m = &self.manifest;
        if m.spec.hash() != m.spec_hash {
            return Err(Error::Checkpoint("manifest spec does not match its hash".into()));
        }
        let plan = StagePlan::from_sizes(&m.plan)?;
        let mut net = PrefixNetwork::<T>::new(&m.spec, &plan, m.stage_index, m.head, m.seed)?;
        let mut stored: std::collections::HashMap<&str, &StoredTensor> =
            self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut problems = Vec::new();
        net.visit_mut("", &mut |name, p| match stored.remove(name) {
            Some(t) if t.shape == p.value.shape() => match t.to_tensor() {
                Ok(v) => p.value = v,
                Err(e) => problems.push(format!("{name}: {e}")),
            },
            Some(t) => problems.push(format!("{name}: shape {:?} vs {:?}", t.shape, p.value.shape())),
            None => problems.push(format!("{name}: missing")),
        });
        let mut extra: Vec<&str> = stored.into_keys().collect();
        extra.sort_unstable();
        problems.extend(extra.into_iter().map(|n| format!("{n}: unexpected")));
        if !problems.is_empty() {
            return Err(Error::CheckpointMismatch(problems.join("; ")));
        }
        Ok(net)
    }

    /// Content hash over tensor names, shapes and bytes (the manifest is excluded).
    pub fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tensors {
            h.update((t.name.len() as u64).to_le_bytes());
            h.update(t.name.as_bytes());
            h.update([t.dtype.tag()]);
            for &d in &t.shape {
                h.update((d as u64).to_le_bytes());
            }
            h.update(&t.data);
        }
        hex::encode(h.finalize())
    }
}

/// Loads a checkpoint written for `spec` and rebuilds its network.
pub fn load_network<T: Scalar>(path: impl AsRef<Path>, spec: &BackboneSpec) -> Result<PrefixNetwork<T>> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.validate_against(spec)?;
    ckpt.to_network()
}

pub fn weights_hash<T: Scalar>(net: &PrefixNetwork<T>) -> String {
    Checkpoint::from_network(net, 0).weights_hash()
}

fn take<'a>(r: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Checkpoint(format!("truncated while reading {what}")));
    }
    let (head, rest) = r.split_at(n);
    *r = rest;
    Ok(head)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8], what: &str) -> Result<()> {
    buf.copy_from_slice(take(r, buf.len(), what)?);
    Ok(())
}

fn read_u32(r: &mut &[u8], what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8], what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{InputShape, Preset};

    fn net(seed: u64) -> PrefixNetwork<f32> {
        let spec = Preset::TinyResNet.spec_with_input(5, InputShape::square(1, 16)).unwrap();
        let plan = StagePlan::new(spec.block_count(), 2).unwrap();
        PrefixNetwork::new(&spec, &plan, 1, HeadKind::Progressive, seed).unwrap()
    }

    #[test]
    fn round_trip_preserves_weights_and_manifest() {
        let a = net(1);
        let ckpt = Checkpoint::from_network(&a, 7);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        assert_eq!(back.manifest, ckpt.manifest);
        assert_eq!(back.weights_hash(), ckpt.weights_hash());
        let b: PrefixNetwork<f32> = back.to_network().unwrap();
        assert_eq!(weights_hash(&b), weights_hash(&a));
        assert_eq!(b.stage(), 1);
    }

    #[test]
    fn header_is_byte_exact() {
        let bytes = Checkpoint::from_network(&net(1), 0).to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"PGCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let manifest: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        assert_eq!(manifest["stage_index"], 1);
        assert_eq!(manifest["num_classes"], 5);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = Checkpoint::from_network(&net(1), 0).to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn spec_mismatch_is_reported() {
        let ckpt = Checkpoint::from_network(&net(1), 0);
        let other = Preset::TinyResNet.spec_with_input(10, InputShape::square(1, 16)).unwrap();
        assert!(matches!(ckpt.validate_against(&other), Err(Error::CheckpointMismatch(_))));
    }

    #[test]
    fn different_seeds_hash_differently() {
        assert_ne!(weights_hash(&net(1)), weights_hash(&net(2)));
    }
}
