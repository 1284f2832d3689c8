//! Versioned binary container for checkpoints and the sign bank: a JSON
//! header describing the payload followed by raw little-endian f64 tensors.
//! Round-trips are bit-exact by construction.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ContainerError, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SBTC";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorInfo>,
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

/// An in-memory container: a kind tag, arbitrary JSON metadata, and named
/// tensors in a fixed order.
#[derive(Debug, Clone)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self { kind: kind.into(), meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn take_tensor(&mut self, name: &str, path: &Path) -> Result<Tensor, ContainerError> {
        let idx = self.tensors.iter().position(|(n, _)| n == name).ok_or_else(|| {
            ContainerError::MissingTensor { path: path.display().to_string(), name: name.to_string() }
        })?;
        Ok(self.tensors.remove(idx).1)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorInfo { name: n.clone(), rows: t.rows, cols: t.cols })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = self.tensors.iter().map(|(_, t)| t.data.len() * 8).sum();
        let mut out = Vec::with_capacity(16 + header_bytes.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for (_, t) in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let file = std::fs::File::create(path).map_err(|e| ContainerError::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        w.write_all(&bytes).map_err(|e| ContainerError::io(path, e))?;
        w.flush().map_err(|e| ContainerError::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path, expected_kind: &str) -> Result<Self> {
        let pathstr = path.display().to_string();
        let file = std::fs::File::open(path).map_err(|e| ContainerError::io(path, e))?;
        let mut r = std::io::BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| ContainerError::Truncated(pathstr.clone()))?;
        if &magic != MAGIC {
            return Err(ContainerError::BadMagic(pathstr).into());
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4).map_err(|_| ContainerError::Truncated(pathstr.clone()))?;
        let version = u32::from_le_bytes(buf4);
        if version != VERSION {
            return Err(ContainerError::Version { path: pathstr, found: version, supported: VERSION }
                .into());
        }
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8).map_err(|_| ContainerError::Truncated(pathstr.clone()))?;
        let header_len = u64::from_le_bytes(buf8) as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes).map_err(|_| ContainerError::Truncated(pathstr.clone()))?;
        let header: Header = serde_json::from_slice(&header_bytes).map_err(|e| {
            ContainerError::BadHeader { path: pathstr.clone(), message: e.to_string() }
        })?;
        if header.kind != expected_kind {
            return Err(ContainerError::WrongKind {
                path: pathstr,
                expected: expected_kind.to_string(),
                found: header.kind,
            }
            .into());
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for info in header.tensors {
            let n = info.rows * info.cols;
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes).map_err(|_| ContainerError::Truncated(pathstr.clone()))?;
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((info.name, Tensor::from_vec(info.rows, info.cols, data)));
        }
        Ok(Self { kind: expected_kind.to_string(), meta: header.meta, tensors })
    }
}

/// SHA-256 of a file, as lowercase hex. Used for embedder fingerprints and
/// run-manifest input hashes.
pub fn file_sha256(path: &Path) -> Result<String, ContainerError> {
    let bytes = std::fs::read(path).map_err(|e| ContainerError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("container-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut c = Container::new("test", serde_json::json!({"x": 1}));
        c.push("a", Tensor::from_vec(2, 2, vec![1.5, -0.25, f64::MIN_POSITIVE, 1e300]));
        c.push("b", Tensor::from_vec(1, 3, vec![0.1, 0.2, 0.3]));
        let path = tmp("round.bin");
        c.save(&path).unwrap();
        let loaded = Container::load(&path, "test").unwrap();
        assert_eq!(loaded.tensor("a"), c.tensor("a"));
        assert_eq!(loaded.tensor("b"), c.tensor("b"));
        assert_eq!(loaded.meta, c.meta);
    }

    #[test]
    fn truncated_file_is_detected() {
        let mut c = Container::new("test", serde_json::json!({}));
        c.push("a", Tensor::from_vec(4, 4, vec![1.0; 16]));
        let path = tmp("trunc.bin");
        let mut bytes = c.to_bytes();
        bytes.truncate(bytes.len() - 9);
        std::fs::write(&path, bytes).unwrap();
        let err = Container::load(&path, "test").unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let c = Container::new("bank", serde_json::json!({}));
        let path = tmp("kind.bin");
        c.save(&path).unwrap();
        let err = Container::load(&path, "embedder").unwrap_err();
        assert!(err.to_string().contains("embedder"), "{err}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let path = tmp("magic.bin");
        std::fs::write(&path, b"not a container at all").unwrap();
        let err = Container::load(&path, "test").unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn sha256_is_stable() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
