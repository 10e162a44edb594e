//! Model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content                                   |
//! |-------|-------------------------------------------|
//! | 4     | magic `MRCK`                              |
//! | 4     | format version (u32)                      |
//! | 8     | header length `n` (u64)                   |
//! | n     | UTF-8 JSON [`CheckpointHeader`]           |
//! | 4·k   | `k = param_count` parameters as f32       |
//!
//! The header carries the variant, the effective network config, the build
//! seed, the per-network parameter spans and a SHA-256 of the payload.

use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{Model, NetworkConfig, Variant};

pub const MAGIC: &[u8; 4] = b"MRCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub variant: String,
    pub config: NetworkConfig,
    pub seed: u64,
    pub param_count: usize,
    pub encoders: Vec<Range<usize>>,
    pub decoders: Vec<Range<usize>>,
    pub payload_sha256: String,
}

fn header_for(model: &Model, payload: &[u8]) -> Result<CheckpointHeader> {
    Ok(CheckpointHeader {
        version: FORMAT_VERSION,
        variant: model.variant().to_string(),
        config: model.config().clone(),
        seed: model.seed(),
        param_count: model.param_count(),
        encoders: (0..model.encoder_count()).map(|e| model.encoder_span(e)).collect::<Result<_>>()?,
        decoders: (0..model.decoder_count()).map(|r| model.decoder_span(r)).collect::<Result<_>>()?,
        payload_sha256: hex::encode(Sha256::digest(payload)),
    })
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let payload: Vec<u8> = model.params().iter().flat_map(|v| v.to_le_bytes()).collect();
    let header = serde_json::to_vec(&header_for(model, &payload)?).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let bad = |msg: String| Error::Checkpoint(msg);
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| bad(format!("header: {e}")))?;
    let payload = &bytes[header_end..];
    if payload.len() != header.param_count * 4 {
        return Err(bad(format!(
            "payload holds {} bytes, header declares {} parameters",
            payload.len(),
            header.param_count
        )));
    }
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(bad("payload checksum mismatch".into()));
    }
    let variant: Variant = header.variant.parse()?;
    let mut model = Model::build(variant, &header.config, header.seed)?;
    if model.param_count() != header.param_count {
        return Err(bad(format!(
            "config builds {} parameters, checkpoint holds {}",
            model.param_count(),
            header.param_count
        )));
    }
    let expected = header_for(&model, payload)?;
    if expected.encoders != header.encoders || expected.decoders != header.decoders {
        return Err(bad("parameter layout does not match the config".into()));
    }
    let params = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    model.set_params(params)?;
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Reads only the header.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize.saturating_add(n).min(bytes.len());
    serde_json::from_slice(&bytes[16..end]).map_err(|e| Error::Checkpoint(format!("{}: header: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetworkConfig {
        NetworkConfig {
            depth: 2,
            base_channels: 2,
            num_branches: 2,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for v in Variant::ALL {
            let mut model = Model::build(v, &small(), 3).unwrap();
            model.params_mut().iter_mut().enumerate().for_each(|(i, p)| *p += i as f32 * 1e-3);
            let back = from_bytes(&to_bytes(&model).unwrap()).unwrap();
            assert_eq!(back.variant(), v);
            let a: Vec<u32> = model.params().iter().map(|p| p.to_bits()).collect();
            let b: Vec<u32> = back.params().iter().map(|p| p.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let model = Model::build(Variant::Om, &small(), 0).unwrap();
        let bytes = to_bytes(&model).unwrap();
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 1;
        assert!(matches!(from_bytes(&flipped), Err(Error::Checkpoint(_))));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 4]), Err(Error::Checkpoint(_))));
        assert!(matches!(from_bytes(b"nope"), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn encoding_is_deterministic() {
        let model = Model::build(Variant::Omba, &small(), 9).unwrap();
        assert_eq!(to_bytes(&model).unwrap(), to_bytes(&model).unwrap());
    }
}
