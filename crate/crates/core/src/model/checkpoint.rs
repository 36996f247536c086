//! Checkpoint container: magic "GFCK", version, training-stage tag, RNG
//! cursor, a canonical JSON config blob, a named parameter table with exact
//! f32 bit payloads, and a trailing SHA-256 over everything before it.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{FormatError, GfError, Result};
use crate::model::{hex_string, GfModel, ModelConfig};
use crate::numcore::Tensor;

const MAGIC: [u8; 4] = *b"GFCK";
const VERSION: u32 = 1;

/// Everything a checkpoint carries besides the parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    /// Last completed training stage (0..=3).
    pub stage: u32,
    /// Seed cursor for whatever stage runs next.
    pub seed_cursor: u64,
}

pub fn save_checkpoint(model: &GfModel, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = encode(model, meta)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(GfModel, CheckpointMeta)> {
    let bytes = fs::read(path)?;
    decode(&bytes, &path.display().to_string())
}

/// SHA-256 of a checkpoint file's full contents; recorded in exports.
pub fn checkpoint_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex_string(&Sha256::digest(&bytes)))
}

pub fn encode(model: &GfModel, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let config_json = serde_json::to_vec(&model.config)
        .map_err(|e| GfError::input(format!("config serialization failed: {e}")))?;
    let params = model.named_params();

    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&meta.stage.to_le_bytes());
    buf.extend_from_slice(&meta.seed_cursor.to_le_bytes());
    buf.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config_json);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in &params {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

pub fn decode(bytes: &[u8], path: &str) -> Result<(GfModel, CheckpointMeta)> {
    let fail = |kind| GfError::Format {
        path: path.to_string(),
        kind,
    };
    let need = |offset: usize, len: usize| -> Result<()> {
        if offset + len > bytes.len() {
            Err(GfError::Format {
                path: path.to_string(),
                kind: FormatError::Truncated {
                    offset: bytes.len() as u64,
                    needed: (offset + len - bytes.len()) as u64,
                },
            })
        } else {
            Ok(())
        }
    };

    need(0, 4 + 4 + 4 + 8 + 4)?;
    let found: [u8; 4] = bytes[0..4].try_into().unwrap();
    if found != MAGIC {
        return Err(fail(FormatError::BadMagic {
            expected: MAGIC,
            found,
        }));
    }
    if bytes.len() < 32 {
        return Err(fail(FormatError::Truncated {
            offset: bytes.len() as u64,
            needed: 32,
        }));
    }
    let body = &bytes[..bytes.len() - 32];
    let stored = &bytes[bytes.len() - 32..];
    let computed = Sha256::digest(body);
    if stored != computed.as_slice() {
        return Err(fail(FormatError::Checksum {
            stored: hex_string(stored),
            computed: hex_string(&computed),
        }));
    }

    let mut off = 4usize;
    let read_u32 = |off: &mut usize| -> Result<u32> {
        need(*off, 4)?;
        let v = u32::from_le_bytes(bytes[*off..*off + 4].try_into().unwrap());
        *off += 4;
        Ok(v)
    };
    let version = read_u32(&mut off)?;
    if version != VERSION {
        return Err(fail(FormatError::Version(version)));
    }
    let stage = read_u32(&mut off)?;
    need(off, 8)?;
    let seed_cursor = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
    off += 8;
    let config_len = read_u32(&mut off)? as usize;
    need(off, config_len)?;
    let config: ModelConfig = serde_json::from_slice(&bytes[off..off + config_len])
        .map_err(|e| fail(FormatError::Field(format!("config blob: {e}"))))?;
    off += config_len;
    let n_params = read_u32(&mut off)? as usize;

    // build the skeleton, then overwrite parameters by name
    let mut model = GfModel::init(config, 0)?;
    let mut loaded: Vec<(String, Tensor)> = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        need(off, 2)?;
        let name_len = u16::from_le_bytes(bytes[off..off + 2].try_into().unwrap()) as usize;
        off += 2;
        need(off, name_len)?;
        let name = String::from_utf8(bytes[off..off + name_len].to_vec())
            .map_err(|_| fail(FormatError::Field("non-utf8 parameter name".to_string())))?;
        off += name_len;
        need(off, 1)?;
        let ndim = bytes[off] as usize;
        off += 1;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut off)? as usize);
        }
        let numel: usize = shape.iter().product();
        need(off, numel * 4)?;
        let mut data = Vec::with_capacity(numel);
        for k in 0..numel {
            data.push(f32::from_le_bytes(
                bytes[off + 4 * k..off + 4 * k + 4].try_into().unwrap(),
            ));
        }
        off += numel * 4;
        loaded.push((name, Tensor::new(shape, data)?));
    }

    {
        let mut slots = model.named_params_mut();
        if slots.len() != loaded.len() {
            return Err(fail(FormatError::Field(format!(
                "parameter table has {} entries, model expects {}",
                loaded.len(),
                slots.len()
            ))));
        }
        for ((want_name, slot), (name, tensor)) in slots.iter_mut().zip(loaded) {
            if *want_name != name {
                return Err(fail(FormatError::Field(format!(
                    "parameter {name} out of order, expected {want_name}"
                ))));
            }
            if slot.shape() != tensor.shape() {
                return Err(fail(FormatError::Field(format!(
                    "parameter {name} shape {:?} does not match config-derived {:?}",
                    tensor.shape(),
                    slot.shape()
                ))));
            }
            **slot = tensor;
        }
    }

    Ok((model, CheckpointMeta { stage, seed_cursor }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderSel, Trainable};
    use crate::numcore::Tape;
    use crate::rng::stream;
    use tempfile::tempdir;

    fn model() -> GfModel {
        GfModel::init(ModelConfig::desk_default(), 21).unwrap()
    }

    #[test]
    fn save_load_save_is_bit_identical() {
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.gfck");
        let p2 = dir.path().join("b.gfck");
        let m = model();
        let meta = CheckpointMeta {
            stage: 2,
            seed_cursor: 99,
        };
        save_checkpoint(&m, &meta, &p1).unwrap();
        let (back, meta2) = load_checkpoint(&p1).unwrap();
        assert_eq!(meta2, meta);
        save_checkpoint(&back, &meta2, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupted_header_is_bad_magic() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.gfck");
        save_checkpoint(&model(), &CheckpointMeta { stage: 0, seed_cursor: 0 }, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[1] = b'Z';
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(GfError::Format {
                kind: FormatError::BadMagic { .. },
                ..
            })
        ));
    }

    #[test]
    fn flipped_payload_fails_checksum() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("d.gfck");
        save_checkpoint(&model(), &CheckpointMeta { stage: 1, seed_cursor: 5 }, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(GfError::Format {
                kind: FormatError::Checksum { .. },
                ..
            })
        ));
    }

    #[test]
    fn loaded_model_forwards_identically() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("e.gfck");
        let m = model();
        save_checkpoint(&m, &CheckpointMeta { stage: 3, seed_cursor: 7 }, &p).unwrap();
        let (back, _) = load_checkpoint(&p).unwrap();

        let forward = |m: &GfModel| {
            let mut tape = Tape::new();
            let ids = m.stage(&mut tape, Trainable::none());
            let mut rng = stream(1234, "ckpt-fwd", 0);
            let x = tape.constant(Tensor::uniform(vec![1, 3, 16, 16], -1.0, 1.0, &mut rng));
            let (_, ebar) = GfModel::encode(&ids, &mut tape, x, EncoderSel::Global).unwrap();
            tape.value(ebar).data().to_vec()
        };
        let a = forward(&m);
        let b = forward(&back);
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
