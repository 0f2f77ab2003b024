//! Checkpoint file format: one JSON manifest line (names, shapes, byte
//! offsets, config echo) followed by a little-endian f64 blob. Round-trips
//! are bit-exact.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const CHECKPOINT_SCHEMA: &str = "ntssl-checkpoint/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: u64,
    /// Number of f64 values.
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    schema: String,
    encoder: EncoderConfig,
    /// Free-form provenance echo (training config, seeds).
    #[serde(default)]
    provenance: serde_json::Value,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderConfig,
    pub provenance: serde_json::Value,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(encoder: EncoderConfig, params: ParamStore, provenance: serde_json::Value) -> Self {
        Self {
            encoder,
            provenance,
            params,
        }
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);

    let mut entries = Vec::new();
    let mut offset = 0u64;
    for (name, t) in ckpt.params.iter() {
        entries.push(ParamEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += (t.len() * 8) as u64;
    }
    let manifest = Manifest {
        schema: CHECKPOINT_SCHEMA.to_string(),
        encoder: ckpt.encoder.clone(),
        provenance: ckpt.provenance.clone(),
        params: entries,
    };
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    serde_json::to_writer(&mut w, &manifest).map_err(|e| Error::InvalidInput(e.to_string()))?;
    w.write_all(b"\n").map_err(io_err)?;
    for (_, t) in ckpt.params.iter() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);

    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
    }
    let manifest: Manifest = serde_json::from_slice(&line)
        .map_err(|e| Error::MalformedRecord {
            line: 1,
            msg: format!("bad checkpoint manifest: {e}"),
        })?;
    if manifest.schema != CHECKPOINT_SCHEMA {
        return Err(Error::MalformedRecord {
            line: 1,
            msg: format!("unknown checkpoint schema {:?}", manifest.schema),
        });
    }

    let mut blob = Vec::new();
    r.read_to_end(&mut blob)
        .map_err(|e| Error::io(path.display().to_string(), e))?;

    let mut params = ParamStore::new();
    for entry in &manifest.params {
        let start = entry.offset as usize;
        let end = start + entry.len * 8;
        if end > blob.len() {
            return Err(Error::MalformedRecord {
                line: 1,
                msg: format!("blob too short for parameter {}", entry.name),
            });
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk is 8 bytes")))
            .collect();
        let t = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| Error::MalformedRecord {
                line: 1,
                msg: format!("parameter {}: {e}", entry.name),
            })?;
        params.insert(&entry.name, t)?;
    }

    Ok(Checkpoint {
        encoder: manifest.encoder,
        provenance: manifest.provenance,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, EncoderConfig};

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = EncoderConfig {
            d_in: 3,
            d_model: 8,
            num_heads: 2,
            d_ff: 16,
            proj_hidden: 8,
            proj_out: 4,
            tracklet_len: 4,
            ..EncoderConfig::default()
        };
        let params = init_params(&cfg, 77).unwrap();
        let ckpt = Checkpoint::new(
            cfg,
            params,
            serde_json::json!({"seed": 77, "note": "unit"}),
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt, loaded);

        // saving the loaded checkpoint reproduces the file byte for byte
        let path2 = dir.path().join("ckpt2.bin");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn truncated_blob_is_detected() {
        let cfg = EncoderConfig::default();
        let params = init_params(&cfg, 1).unwrap();
        let ckpt = Checkpoint::new(cfg, params, serde_json::Value::Null);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&ckpt, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
