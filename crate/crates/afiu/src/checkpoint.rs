//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "AFIUCKP1"
//! u32     metadata length, then that many UTF-8 bytes ("key = value" lines)
//! u32     tensor count
//! per tensor:
//!   u16   name length, then the name bytes
//!   u8    dtype tag (1 = f32 little-endian)
//!   u8    rank, then rank x u32 dims
//!   u64   byte offset into the payload
//! u64     payload length, then the payload (tensor data back to back)
//! ```
//!
//! Tensors are stored in parameter-store order; loading into a model
//! requires the name sets to match exactly.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use thiserror::Error;

use crate::elem::Elem;
use crate::params::ParamStore;

const MAGIC: &[u8; 8] = b"AFIUCKP1";
const DTYPE_F32: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match the model: missing {missing:?}, unexpected {unexpected:?}")]
    NameSetMismatch { missing: Vec<String>, unexpected: Vec<String> },
    #[error("tensor {name}: checkpoint shape {ckpt:?} does not match model shape {model:?}")]
    ShapeMismatch { name: String, ckpt: Vec<usize>, model: Vec<usize> },
}

#[derive(Clone)]
pub struct Checkpoint {
    /// Ordered metadata lines; see [`Checkpoint::meta_get`].
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, ArrayD<f32>)>,
}

impl Checkpoint {
    /// Snapshot every tensor of a store (weights and running statistics).
    pub fn from_store<T: Elem>(store: &ParamStore<T>, meta: Vec<(String, String)>) -> Self {
        let tensors = store
            .iter()
            .map(|(name, entry)| (name.to_string(), entry.value.mapv(|v| v.to_f32())))
            .collect();
        Checkpoint { meta, tensors }
    }

    pub fn meta_get(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    /// Replace every parameter of `store`. The name sets must be equal and
    /// all shapes must agree; nothing is written on error.
    pub fn apply<T: Elem>(&self, store: &mut ParamStore<T>) -> Result<(), CheckpointError> {
        self.check_names(store, None)?;
        for (name, tensor) in &self.tensors {
            store.set(name, tensor.mapv(T::from_f32));
        }
        Ok(())
    }

    /// Replace only the parameters under `prefix` (a partial restore used
    /// for externally pretrained backbones). The checkpoint must contain
    /// exactly the store's `prefix` names.
    pub fn apply_prefix<T: Elem>(
        &self,
        store: &mut ParamStore<T>,
        prefix: &str,
    ) -> Result<(), CheckpointError> {
        self.check_names(store, Some(prefix))?;
        for (name, tensor) in &self.tensors {
            store.set(name, tensor.mapv(T::from_f32));
        }
        Ok(())
    }

    fn check_names<T: Elem>(
        &self,
        store: &ParamStore<T>,
        prefix: Option<&str>,
    ) -> Result<(), CheckpointError> {
        let want: Vec<&str> = store
            .names()
            .filter(|n| prefix.map(|p| n.starts_with(p)).unwrap_or(true))
            .collect();
        let missing: Vec<String> = want
            .iter()
            .filter(|n| self.meta_tensor(n).is_none())
            .map(|n| n.to_string())
            .collect();
        let unexpected: Vec<String> = self
            .names()
            .filter(|n| !want.contains(n))
            .map(|n| n.to_string())
            .collect();
        if !missing.is_empty() || !unexpected.is_empty() {
            return Err(CheckpointError::NameSetMismatch { missing, unexpected });
        }
        for (name, tensor) in &self.tensors {
            let model_shape = store.value(name).shape().to_vec();
            if tensor.shape() != model_shape.as_slice() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    ckpt: tensor.shape().to_vec(),
                    model: model_shape,
                });
            }
        }
        Ok(())
    }

    fn meta_tensor(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let meta_text: String = self
            .meta
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        out.extend_from_slice(&(meta_text.len() as u32).to_le_bytes());
        out.extend_from_slice(meta_text.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, tensor) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(tensor.ndim() as u8);
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += (tensor.len() * 4) as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for (_, tensor) in &self.tensors {
            for &v in tensor.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Cursor { b: &bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(CheckpointError::Corrupt("bad magic".into()));
        }
        let meta_len = r.u32()? as usize;
        let meta_text = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| CheckpointError::Corrupt("metadata is not UTF-8".into()))?;
        let mut meta = Vec::new();
        for line in meta_text.lines() {
            let Some((k, v)) = line.split_once(" = ") else {
                return Err(CheckpointError::Corrupt(format!("bad metadata line: {line}")));
            };
            meta.push((k.to_string(), v.to_string()));
        }
        let count = r.u32()? as usize;
        let mut headers = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(CheckpointError::Corrupt(format!("unsupported dtype {dtype} for {name}")));
            }
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let offset = r.u64()? as usize;
            headers.push((name, shape, offset));
        }
        let payload_len = r.u64()? as usize;
        let payload = r.take(payload_len)?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        let mut tensors = Vec::with_capacity(count);
        for (name, shape, offset) in headers {
            let len: usize = shape.iter().product();
            let end = offset + len * 4;
            if end > payload.len() {
                return Err(CheckpointError::Corrupt(format!("tensor {name} overruns payload")));
            }
            let mut data = Vec::with_capacity(len);
            for chunk in payload[offset..end].chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|e| CheckpointError::Corrupt(format!("tensor {name}: {e}")))?;
            tensors.push((name, arr));
        }
        Ok(Checkpoint { meta, tensors })
    }
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.b.len() {
            return Err(CheckpointError::Corrupt("unexpected end of file".into()));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn sample_store() -> ParamStore<f32> {
        let mut store = ParamStore::new();
        store.register("a.weight", ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, -2.5, 3.25, 0.0]).unwrap(), true);
        store.register("a.bias", ArrayD::from_elem(IxDyn(&[2]), 0.125f32), true);
        store.register("bn.running_mean", ArrayD::zeros(IxDyn(&[2])), false);
        store
    }

    #[test]
    fn round_trip_is_bitwise_exact() {
        let store = sample_store();
        let meta = vec![("stage".to_string(), "scratch".to_string()), ("epochs".to_string(), "0".to_string())];
        let ckpt = Checkpoint::from_store(&store, meta);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.meta, ckpt.meta);
        assert_eq!(loaded.tensors.len(), ckpt.tensors.len());
        for ((n1, t1), (n2, t2)) in loaded.tensors.iter().zip(&ckpt.tensors) {
            assert_eq!(n1, n2);
            assert!(t1.iter().zip(t2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        // Saving the loaded checkpoint reproduces the same file bytes.
        let path2 = dir.path().join("m2.ckpt");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn renamed_tensor_is_reported_by_name() {
        let store = sample_store();
        let mut ckpt = Checkpoint::from_store(&store, vec![]);
        ckpt.tensors[0].0 = "a.weight_renamed".to_string();
        let mut target = sample_store();
        let err = ckpt.apply(&mut target).unwrap_err();
        match err {
            CheckpointError::NameSetMismatch { missing, unexpected } => {
                assert_eq!(missing, vec!["a.weight".to_string()]);
                assert_eq!(unexpected, vec!["a.weight_renamed".to_string()]);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPT").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(CheckpointError::Corrupt(_))));
        let store = sample_store();
        let ckpt = Checkpoint::from_store(&store, vec![]);
        let good = dir.path().join("good.ckpt");
        ckpt.save(&good).unwrap();
        let mut bytes = std::fs::read(&good).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&good, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(&good), Err(CheckpointError::Corrupt(_))));
    }
}
