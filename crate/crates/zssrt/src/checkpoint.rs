//! `zssrt-ckpt-v1` container: magic line, length-prefixed JSON header, raw
//! little-endian f64 payload, trailing SHA-256 of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use zssrt_core::optim::ParamSet;
use zssrt_core::{FieldConfig, SdmConfig, SdmNetwork, TensorialField};

use crate::error::{read, write_atomic, AppError, Result};

pub const MAGIC: &[u8] = b"zssrt-ckpt-v1\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelTag {
    Field,
    Sdm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in values.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: ModelTag,
    /// Training step at capture (0 when not applicable).
    pub step: usize,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn encode<P: ParamSet + ?Sized>(model: ModelTag, step: usize, config: serde_json::Value, params: &P) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let mut offset = 0;
    for t in params.tensors() {
        tensors.push(TensorEntry { name: t.name, shape: t.shape, offset, len: t.data.len() });
        offset += t.data.len();
        for v in t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header { model, step, config, tensors }).expect("header serializes");
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend(header);
    out.extend(payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

fn decode(path: &Path, bytes: &[u8], want: ModelTag) -> Result<(Header, Vec<f64>)> {
    let bad = |m: &str| AppError::format(path, m);
    if bytes.len() < MAGIC.len() + 8 + 32 || !bytes.starts_with(MAGIC) {
        return Err(bad("not a zssrt-ckpt-v1 file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    let rest = &body[MAGIC.len()..];
    let hlen = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    if rest.len() < 8 + hlen {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&rest[8..8 + hlen]).map_err(|e| AppError::format(path, e))?;
    if header.model != want {
        return Err(bad(&format!("expected a {want:?} checkpoint, found {:?}", header.model)));
    }
    let payload = &rest[8 + hlen..];
    if payload.len() % 8 != 0 {
        return Err(bad("payload is not a whole number of f64 values"));
    }
    let values: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((header, values))
}

fn fill<P: ParamSet + ?Sized>(path: &Path, header: &Header, values: &[f64], params: &mut P) -> Result<()> {
    let mut targets = params.tensors_mut();
    if targets.len() != header.tensors.len() {
        return Err(AppError::format(path, "tensor count does not match model configuration"));
    }
    for (t, e) in targets.iter_mut().zip(&header.tensors) {
        if t.name != e.name || t.data.len() != e.len || e.offset + e.len > values.len() {
            return Err(AppError::format(path, format!("tensor {} does not match model configuration", e.name)));
        }
        t.data.copy_from_slice(&values[e.offset..e.offset + e.len]);
    }
    Ok(())
}

pub fn field_bytes(field: &TensorialField, step: usize) -> Vec<u8> {
    let config = serde_json::to_value(&field.config).expect("config serializes");
    encode(ModelTag::Field, step, config, &field.params)
}

pub fn save_field(path: &Path, field: &TensorialField, step: usize) -> Result<()> {
    write_atomic(path, &field_bytes(field, step))
}

/// Returns the field and its recorded step.
pub fn load_field(path: &Path) -> Result<(TensorialField, usize)> {
    if !path.is_file() {
        return Err(AppError::Missing(path.to_path_buf()));
    }
    let bytes = read(path)?;
    let (header, values) = decode(path, &bytes, ModelTag::Field)?;
    let config: FieldConfig = serde_json::from_value(header.config.clone()).map_err(|e| AppError::format(path, e))?;
    let mut field = TensorialField::init(FieldConfig { init_scale: 0.0, ..config.clone() }, 0)?;
    field.config = config;
    fill(path, &header, &values, &mut field.params)?;
    Ok((field, header.step))
}

pub fn save_sdm(path: &Path, net: &SdmNetwork) -> Result<()> {
    let config = serde_json::to_value(&net.config).expect("config serializes");
    write_atomic(path, &encode(ModelTag::Sdm, 0, config, net))
}

pub fn load_sdm(path: &Path) -> Result<SdmNetwork> {
    if !path.is_file() {
        return Err(AppError::Missing(path.to_path_buf()));
    }
    let bytes = read(path)?;
    let (header, values) = decode(path, &bytes, ModelTag::Sdm)?;
    let config: SdmConfig = serde_json::from_value(header.config.clone()).map_err(|e| AppError::format(path, e))?;
    let mut net = SdmNetwork::init(config, 0)?;
    fill(path, &header, &values, &mut net)?;
    Ok(net)
}
