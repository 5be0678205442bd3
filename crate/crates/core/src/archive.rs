//! Tensor archive: a JSON manifest plus raw little-endian f32 blobs.
//!
//! The manifest maps each tensor name to `{shape, dtype, file, offset}` and
//! records a 64-bit FNV-1a checksum for every blob file. Checksums are
//! verified before any tensor is decoded.

use std::collections::BTreeMap;
use std::fs;
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT: &str = "steerlens-tensors/v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Hex-encoded 64-bit FNV-1a of the whole file.
    pub fnv1a64: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, TensorEntry>,
    pub files: BTreeMap<String, FileEntry>,
}

/// A named tensor held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// In-memory archive contents.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

fn blob_name(manifest_path: &Path) -> String {
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("tensors");
    format!("{stem}.bin")
}

impl TensorArchive {
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        self.tensors.insert(name.into(), Tensor::new(shape, data));
    }

    /// Writes the manifest at `manifest_path` and a single blob beside it.
    pub fn write(&self, manifest_path: &Path) -> Result<Manifest> {
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = blob_name(manifest_path);
        let mut blob = Vec::new();
        let mut tensors = BTreeMap::new();
        for (name, t) in &self.tensors {
            tensors.insert(
                name.clone(),
                TensorEntry {
                    shape: t.shape.clone(),
                    dtype: "f32".into(),
                    file: file.clone(),
                    offset: blob.len() as u64,
                },
            );
            for v in &t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut files = BTreeMap::new();
        files.insert(
            file.clone(),
            FileEntry {
                fnv1a64: format!("{:016x}", fnv1a64(&blob)),
                bytes: blob.len() as u64,
            },
        );
        let blob_path = dir.join(&file);
        fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
        let manifest = Manifest {
            format: FORMAT.into(),
            metadata: self.metadata.clone(),
            tensors,
            files,
        };
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(manifest_path, json).map_err(|e| Error::io(manifest_path, e))?;
        Ok(manifest)
    }

    pub fn read(manifest_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        Self::from_manifest(&manifest, dir)
    }

    pub fn from_manifest(manifest: &Manifest, dir: &Path) -> Result<Self> {
        let mut blobs: BTreeMap<&str, Vec<u8>> = BTreeMap::new();
        for (name, entry) in &manifest.tensors {
            if entry.dtype != "f32" {
                return Err(Error::Load {
                    name: name.clone(),
                    reason: format!("unsupported dtype `{}`", entry.dtype),
                });
            }
            if !blobs.contains_key(entry.file.as_str()) {
                let path: PathBuf = dir.join(&entry.file);
                let bytes = fs::read(&path).map_err(|e| Error::Load {
                    name: name.clone(),
                    reason: format!("missing blob {}: {e}", path.display()),
                })?;
                let expected = manifest.files.get(&entry.file).ok_or_else(|| Error::Load {
                    name: name.clone(),
                    reason: format!("blob {} has no checksum entry", entry.file),
                })?;
                let actual = format!("{:016x}", fnv1a64(&bytes));
                if actual != expected.fnv1a64 {
                    return Err(Error::Load {
                        name: name.clone(),
                        reason: format!(
                            "checksum mismatch for {}: manifest {}, file {actual}",
                            entry.file, expected.fnv1a64
                        ),
                    });
                }
                blobs.insert(entry.file.as_str(), bytes);
            }
        }
        let mut tensors = BTreeMap::new();
        for (name, entry) in &manifest.tensors {
            let bytes = &blobs[entry.file.as_str()];
            let count: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + count * 4;
            if end > bytes.len() {
                return Err(Error::Load {
                    name: name.clone(),
                    reason: format!(
                        "byte range {start}..{end} exceeds blob size {}",
                        bytes.len()
                    ),
                });
            }
            let data: Vec<f32> = bytes[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                return Err(Error::Load {
                    name: name.clone(),
                    reason: format!("non-finite value at element {i}"),
                });
            }
            tensors.insert(name.clone(), Tensor::new(entry.shape.clone(), data));
        }
        Ok(Self {
            metadata: manifest.metadata.clone(),
            tensors,
        })
    }

    /// Removes and returns a tensor, checking its shape.
    pub fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let t = self.tensors.remove(name).ok_or_else(|| Error::Load {
            name: name.into(),
            reason: "missing from manifest".into(),
        })?;
        if t.shape != shape {
            return Err(Error::Shape {
                name: name.into(),
                expected: shape.to_vec(),
                found: t.shape,
            });
        }
        Ok(t.data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorArchive {
        let mut a = TensorArchive::default();
        a.insert("a", vec![2, 2], vec![1.0, -2.0, 3.5, 0.0]);
        a.insert("b", vec![3], vec![0.25, 0.5, 0.75]);
        a.metadata = serde_json::json!({"kind": "test"});
        a
    }

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        sample().write(&path).unwrap();
        assert!(dir.path().join("m.bin").exists());
        assert_eq!(TensorArchive::read(&path).unwrap(), sample());
    }

    #[test]
    fn fnv_reference_values() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn corrupted_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        sample().write(&path).unwrap();
        let blob = dir.path().join("m.bin");
        let mut bytes = fs::read(&blob).unwrap();
        bytes[0] ^= 1;
        fs::write(&blob, bytes).unwrap();
        let err = TensorArchive::read(&path).unwrap_err();
        assert!(err.to_string().contains("checksum mismatch"), "{err}");
    }

    #[test]
    fn missing_blob_names_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        sample().write(&path).unwrap();
        fs::remove_file(dir.path().join("m.bin")).unwrap();
        let err = TensorArchive::read(&path).unwrap_err();
        assert!(matches!(err, Error::Load { ref name, .. } if name == "a"), "{err}");
    }

    #[test]
    fn non_finite_value_names_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let mut a = sample();
        a.insert("c", vec![1], vec![f32::NAN]);
        a.write(&path).unwrap();
        let err = TensorArchive::read(&path).unwrap_err();
        assert!(matches!(err, Error::Load { ref name, .. } if name == "c"), "{err}");
    }
}
