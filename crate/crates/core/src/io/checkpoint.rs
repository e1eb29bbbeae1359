//! Named-tensor container: fixed header, JSON manifest, little-endian f32
//! payload.
//!
//! Layout: `b"FDCK"`, `u32` format version, `u64` manifest length, the
//! manifest bytes, then the blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{Encoder, EncoderConfig};
use crate::params::Params;
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"FDCK";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub tensors: Vec<TensorEntry>,
    pub blob_length: u64,
    #[serde(default)]
    pub config: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Params,
    /// Free-form echo of the configuration that produced the tensors.
    pub config: Value,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptManifest(msg.into())
}

/// Serializes `tensors` to bytes. Values are stored as f32, so the round
/// trip is bit-exact for tensors that already hold f32-representable values.
pub fn encode(tensors: &Params, config: &Value) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blob = Vec::with_capacity(tensors.numel() * 4);
    for (name, t) in tensors.iter() {
        let offset = blob.len() as u64;
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset,
            length: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        tensors: entries,
        blob_length: blob.len() as u64,
        config: config.clone(),
    };
    let text = serde_json::to_vec(&manifest).map_err(|e| corrupt(e.to_string()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + text.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&blob);
    Ok(out)
}

fn check_layout(m: &Manifest) -> Result<()> {
    let mut cursor = 0u64;
    for e in &m.tensors {
        if e.dtype != "f32" {
            return Err(corrupt(format!("`{}` has unsupported dtype `{}`", e.name, e.dtype)));
        }
        if e.offset != cursor {
            return Err(corrupt(format!(
                "`{}` starts at byte {} but the previous tensor ends at {cursor}",
                e.name, e.offset
            )));
        }
        if e.length != numel(&e.shape) as u64 * 4 {
            return Err(corrupt(format!(
                "`{}` length {} does not match shape {:?}",
                e.name, e.length, e.shape
            )));
        }
        cursor += e.length;
    }
    if cursor != m.blob_length {
        return Err(corrupt(format!(
            "tensors cover {cursor} bytes, blob_length says {}",
            m.blob_length
        )));
    }
    Ok(())
}

/// Parses a container. Nothing is returned unless the whole file checks out.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(corrupt("missing checkpoint header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let text = bytes
        .get(HEADER_LEN..HEADER_LEN.saturating_add(mlen))
        .ok_or_else(|| corrupt("manifest runs past end of file"))?;
    let manifest: Manifest = serde_json::from_slice(text).map_err(|e| corrupt(e.to_string()))?;
    if manifest.format_version != version {
        return Err(corrupt("header and manifest disagree on the format version"));
    }
    check_layout(&manifest)?;
    let blob = &bytes[HEADER_LEN + mlen..];
    let expected = manifest.blob_length as usize;
    if blob.len() < expected {
        return Err(Error::TruncatedBlob {
            expected,
            actual: blob.len(),
        });
    }
    if blob.len() > expected {
        return Err(corrupt(format!(
            "{} trailing bytes after the blob",
            blob.len() - expected
        )));
    }
    let mut tensors = Params::new();
    for e in &manifest.tensors {
        let raw = &blob[e.offset as usize..(e.offset + e.length) as usize];
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        tensors
            .insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)
            .map_err(|err| corrupt(err.to_string()))?;
    }
    Ok(Checkpoint {
        tensors,
        config: manifest.config,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, tensors: &Params, config: &Value) -> Result<()> {
    let bytes = encode(tensors, config)?;
    if let Some(dir) = path.as_ref().parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

/// Writes an encoder with its architecture under the `encoder` config key.
pub fn save_encoder(path: impl AsRef<Path>, enc: &Encoder, extra: Value) -> Result<()> {
    let encoder = serde_json::to_value(&enc.cfg).map_err(|e| Error::Config(e.to_string()))?;
    let config = serde_json::json!({ "encoder": encoder, "run": extra });
    save_checkpoint(path, &enc.params, &config)
}

/// Reads a checkpoint written by [`save_encoder`].
pub fn load_encoder(path: impl AsRef<Path>) -> Result<Encoder> {
    let ck = load_checkpoint(path)?;
    let cfg: EncoderConfig = ck
        .config
        .get("encoder")
        .cloned()
        .ok_or_else(|| corrupt("checkpoint has no encoder config"))
        .and_then(|v| serde_json::from_value(v).map_err(|e| corrupt(e.to_string())))?;
    Encoder::from_params(cfg, ck.tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Params {
        let mut p = Params::new();
        p.insert("a", Tensor::new(vec![2, 3], vec![1.5, -2.0, 0.0, 3.25, -0.0, 7.0]).unwrap())
            .unwrap();
        p.insert("b", Tensor::from_vec(vec![f32::MIN_POSITIVE as f64])).unwrap();
        p.insert("empty", Tensor::zeros(&[0, 4])).unwrap();
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = sample();
        let cfg = serde_json::json!({"k": 1});
        let ck = decode(&encode(&p, &cfg).unwrap()).unwrap();
        assert!(ck.tensors.bit_eq(&p));
        assert_eq!(ck.config, cfg);
    }

    #[test]
    fn distinct_errors() {
        let bytes = encode(&sample(), &Value::Null).unwrap();
        let cut = &bytes[..bytes.len() - 1];
        assert!(matches!(decode(cut), Err(Error::TruncatedBlob { .. })));

        let mut future = bytes.clone();
        future[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode(&future),
            Err(Error::VersionMismatch { found: 2, supported: 1 })
        ));

        let mut garbled = bytes.clone();
        garbled[HEADER_LEN] = b'!';
        assert!(matches!(decode(&garbled), Err(Error::CorruptManifest(_))));

        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::CorruptManifest(_))));
    }

    #[test]
    fn overlapping_entries_are_rejected() {
        let m = Manifest {
            format_version: 1,
            tensors: vec![
                TensorEntry { name: "a".into(), dtype: "f32".into(), shape: vec![2], offset: 0, length: 8 },
                TensorEntry { name: "b".into(), dtype: "f32".into(), shape: vec![1], offset: 4, length: 4 },
            ],
            blob_length: 12,
            config: Value::Null,
        };
        assert!(check_layout(&m).is_err());
    }
}
