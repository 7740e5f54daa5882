//! Manifest + blob storage for named `f32` tensors.
//!
//! An archive `<name>` is two files: `<name>.json`, a manifest listing every
//! tensor's shape and byte offset plus free-form metadata, and `<name>.bin`,
//! the concatenated little-endian `f32` payloads.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ARCHIVE_FORMAT: &str = "atta-tensor-archive";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Number of `f32` elements.
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// File name of the blob, relative to the manifest.
    pub blob: String,
    pub blob_bytes: u64,
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// `model.json`, `model.bin` or `model` all name the same archive.
pub fn archive_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = base.clone().into_os_string();
    json.push(".json");
    let mut bin = base.into_os_string();
    bin.push(".bin");
    (PathBuf::from(json), PathBuf::from(bin))
}

#[derive(Debug, Default)]
pub struct ArchiveWriter {
    tensors: Vec<TensorEntry>,
    blob: Vec<u8>,
    metadata: serde_json::Value,
}

impl ArchiveWriter {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            tensors: Vec::new(),
            blob: Vec::new(),
            metadata,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: &[f32]) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "tensor {name}: shape {shape:?} vs {} values",
                data.len()
            )));
        }
        self.tensors.push(TensorEntry {
            name,
            shape: shape.to_vec(),
            offset: self.blob.len() as u64,
            len: data.len() as u64,
        });
        for v in data {
            self.blob.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    }

    pub fn manifest(&self, blob_name: &str) -> Manifest {
        Manifest {
            format: ARCHIVE_FORMAT.into(),
            version: ARCHIVE_VERSION,
            blob: blob_name.into(),
            blob_bytes: self.blob.len() as u64,
            metadata: self.metadata.clone(),
            tensors: self.tensors.clone(),
        }
    }

    /// Write both files; each goes to a temporary sibling first and is renamed
    /// into place.
    pub fn write(&self, path: &Path) -> Result<PathBuf> {
        let (json_path, bin_path) = archive_paths(path);
        if let Some(parent) = json_path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let blob_name = bin_path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::InvalidInput(format!("bad archive path {}", path.display())))?
            .to_string();
        let manifest = self.manifest(&blob_name);
        let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::json(&json_path, e))?;
        write_atomic(&bin_path, &self.blob)?;
        write_atomic(&json_path, &json)?;
        Ok(json_path)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct Archive {
    pub manifest: Manifest,
    blob: Vec<u8>,
}

impl Archive {
    pub fn read(path: &Path) -> Result<Self> {
        let (json_path, _) = archive_paths(path);
        let json = fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let manifest: Manifest = serde_json::from_slice(&json).map_err(|e| Error::Format {
            offset: e.column() as u64,
            message: format!("{}: bad manifest: {e}", json_path.display()),
        })?;
        let bin_path = json_path.with_file_name(&manifest.blob);
        let blob = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        Self::from_parts(manifest, blob)
    }

    pub fn from_parts(manifest: Manifest, blob: Vec<u8>) -> Result<Self> {
        if manifest.format != ARCHIVE_FORMAT || manifest.version != ARCHIVE_VERSION {
            return Err(Error::Format {
                offset: 0,
                message: format!(
                    "unsupported archive {} v{}",
                    manifest.format, manifest.version
                ),
            });
        }
        if blob.len() as u64 != manifest.blob_bytes {
            return Err(Error::Format {
                offset: blob.len() as u64,
                message: format!(
                    "blob has {} bytes, manifest declares {}",
                    blob.len(),
                    manifest.blob_bytes
                ),
            });
        }
        for t in &manifest.tensors {
            let end = t.offset + 4 * t.len;
            if end > blob.len() as u64 {
                return Err(Error::Format {
                    offset: t.offset,
                    message: format!(
                        "tensor {} runs past end of blob ({end} > {})",
                        t.name,
                        blob.len()
                    ),
                });
            }
            if t.shape.iter().map(|&d| d as u64).product::<u64>() != t.len {
                return Err(Error::Format {
                    offset: t.offset,
                    message: format!(
                        "tensor {}: shape {:?} disagrees with length {}",
                        t.name, t.shape, t.len
                    ),
                });
            }
        }
        Ok(Self { manifest, blob })
    }

    pub fn metadata(&self) -> &serde_json::Value {
        &self.manifest.metadata
    }

    pub fn entry(&self, name: &str) -> Result<&TensorEntry> {
        self.manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format {
                offset: 0,
                message: format!("missing tensor {name}"),
            })
    }

    pub fn tensor(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let entry = self.entry(name)?;
        let start = entry.offset as usize;
        let end = start + 4 * entry.len as usize;
        let data = self.blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok((entry.shape.clone(), data))
    }

    /// Like [`Archive::tensor`], additionally requiring an exact shape.
    pub fn tensor_with_shape(&self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let entry = self.entry(name)?;
        if entry.shape != shape {
            return Err(Error::Format {
                offset: entry.offset,
                message: format!(
                    "tensor {name}: expected shape {shape:?}, found {:?}",
                    entry.shape
                ),
            });
        }
        Ok(self.tensor(name)?.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_share_a_base() {
        let (j, b) = archive_paths(Path::new("out/model.json"));
        assert_eq!(j, PathBuf::from("out/model.json"));
        assert_eq!(b, PathBuf::from("out/model.bin"));
        let (j, _) = archive_paths(Path::new("out/scene_0001"));
        assert_eq!(j, PathBuf::from("out/scene_0001.json"));
    }

    #[test]
    fn round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        let mut w = ArchiveWriter::new(serde_json::json!({"k": 1}));
        w.add("x", &[2, 2], &[1.0, -2.5, f32::MIN_POSITIVE, 7.0])
            .unwrap();
        w.add("y", &[3], &[0.1, 0.2, 0.3]).unwrap();
        w.write(&path).unwrap();

        let a = Archive::read(&path).unwrap();
        assert_eq!(
            a.tensor("x").unwrap().1,
            vec![1.0, -2.5, f32::MIN_POSITIVE, 7.0]
        );
        assert_eq!(a.metadata()["k"], 1);

        let bin = dir.path().join("a.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
        match Archive::read(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, bytes.len() - 3),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn shape_length_disagreement_is_a_format_error() {
        let mut w = ArchiveWriter::new(serde_json::Value::Null);
        w.add("x", &[4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut manifest = w.manifest("x.bin");
        manifest.tensors[0].shape = vec![5];
        let blob = w.blob.clone();
        assert!(matches!(
            Archive::from_parts(manifest, blob),
            Err(Error::Format { .. })
        ));
    }
}
