//! Manifest + payload container shared by checkpoints, vectors and data.
//!
//! A container is a directory holding `manifest.json` (UTF-8 JSON, keys in
//! declaration order) and `weights.bin` (every array's row-major entries as
//! little-endian `f64`, in the order the manifest lists them). The
//! manifest's `format` key is checked before anything else is parsed.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, LoadError, Result};
use crate::tensor::Matrix;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Envelope<M> {
    format: String,
    content: M,
    arrays: Vec<ArraySpec>,
}

#[derive(Deserialize)]
struct FormatProbe {
    format: String,
}

/// Little-endian bytes of every array, in order.
pub fn payload_bytes<'a>(arrays: impl IntoIterator<Item = &'a Matrix>) -> Vec<u8> {
    let mut out = Vec::new();
    for m in arrays {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp: PathBuf = dir.join(format!(".{file_name}.tmp-{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Serializes a manifest to the exact text written to disk.
pub fn manifest_text<M: Serialize>(format: &str, content: &M, arrays: &[(String, &Matrix)]) -> Result<String> {
    let env = Envelope {
        format: format.to_string(),
        content,
        arrays: arrays
            .iter()
            .map(|(name, m)| ArraySpec {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let mut text =
        serde_json::to_string_pretty(&env).map_err(|e| Error::data(format!("manifest serialization failed: {e}")))?;
    text.push('\n');
    Ok(text)
}

pub fn write_container<M: Serialize>(
    dir: &Path,
    format: &str,
    content: &M,
    arrays: &[(String, &Matrix)],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let text = manifest_text(format, content, arrays)?;
    write_atomic(&dir.join(PAYLOAD_FILE), &payload_bytes(arrays.iter().map(|(_, m)| *m)))?;
    write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
}

/// Reads a container, validating the format string, then the manifest, then
/// the payload length.
pub fn read_container<M: DeserializeOwned>(dir: &Path, format: &str) -> Result<(M, Vec<(ArraySpec, Matrix)>)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let probe: FormatProbe =
        serde_json::from_str(&text).map_err(|e| LoadError::Malformed(format!("{}: {e}", manifest_path.display())))?;
    if probe.format != format {
        return Err(LoadError::VersionMismatch {
            expected: format.to_string(),
            found: probe.format,
        }
        .into());
    }
    let env: Envelope<M> =
        serde_json::from_str(&text).map_err(|e| LoadError::Malformed(format!("{}: {e}", manifest_path.display())))?;

    let payload_path = dir.join(PAYLOAD_FILE);
    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let expected: u64 = env.arrays.iter().map(|a| (a.rows * a.cols * 8) as u64).sum();
    let found = bytes.len() as u64;
    if found < expected {
        return Err(LoadError::Truncated { expected, found }.into());
    }
    if found > expected {
        return Err(LoadError::ManifestMismatch {
            field: "arrays".into(),
            expected: format!("{expected} payload bytes"),
            found: format!("{found} payload bytes"),
        }
        .into());
    }
    let mut arrays = Vec::with_capacity(env.arrays.len());
    let mut offset = 0;
    for spec in env.arrays {
        let n = spec.rows * spec.cols;
        let data = bytes[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        offset += n * 8;
        let m = Matrix::from_vec(spec.rows, spec.cols, data)
            .map_err(|e| LoadError::Malformed(format!("array `{}`: {e}", spec.name)))?;
        arrays.push((spec, m));
    }
    Ok((env.content, arrays))
}

/// Pulls arrays off the front of a decoded payload, checking names and shapes.
pub struct ArrayCursor {
    arrays: std::vec::IntoIter<(ArraySpec, Matrix)>,
}

impl ArrayCursor {
    pub fn new(arrays: Vec<(ArraySpec, Matrix)>) -> Self {
        ArrayCursor {
            arrays: arrays.into_iter(),
        }
    }

    /// Next array, which must be called `name`; `shape` is checked when given
    /// and a disagreement is reported against `field`.
    pub fn take(&mut self, name: &str, shape: Option<(usize, usize)>, field: &str) -> Result<Matrix> {
        let Some((spec, m)) = self.arrays.next() else {
            return Err(LoadError::ManifestMismatch {
                field: "arrays".into(),
                expected: format!("array `{name}`"),
                found: "end of payload".into(),
            }
            .into());
        };
        if spec.name != name {
            return Err(LoadError::ManifestMismatch {
                field: "arrays".into(),
                expected: format!("array `{name}`"),
                found: format!("array `{}`", spec.name),
            }
            .into());
        }
        if let Some(shape) = shape {
            if m.shape() != shape {
                return Err(LoadError::ManifestMismatch {
                    field: field.into(),
                    expected: format!("{name} shaped {shape:?}"),
                    found: format!("{:?}", m.shape()),
                }
                .into());
            }
        }
        Ok(m)
    }

    pub fn finish(mut self) -> Result<()> {
        match self.arrays.next() {
            None => Ok(()),
            Some((spec, _)) => Err(LoadError::ManifestMismatch {
                field: "arrays".into(),
                expected: "end of payload".into(),
                found: format!("extra array `{}`", spec.name),
            }
            .into()),
        }
    }
}
