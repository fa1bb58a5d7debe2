//! Binary model files: magic, format version, a JSON header describing the
//! architecture and tensor shapes, then every tensor as little-endian f64.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{ModelScope, VaeHyperparams, VaeModel};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: [u8; 8] = *b"TWLSTMVA";
pub const MODEL_FORMAT_VERSION: u32 = 1;

const MAX_HEADER: u64 = 1 << 20;

#[derive(Serialize, Deserialize)]
struct Header {
    scope: ModelScope,
    hyperparams: VaeHyperparams,
    tensors: Vec<TensorHeader>,
}

#[derive(Serialize, Deserialize, PartialEq)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

pub fn write_model(model: &VaeModel, mut out: impl Write) -> Result<()> {
    let header = Header {
        scope: model.scope().clone(),
        hyperparams: model.hyperparams().clone(),
        tensors: model
            .layout()
            .tensors
            .iter()
            .map(|t| TensorHeader {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(&MODEL_MAGIC)?;
    out.write_all(&MODEL_FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    let mut buf = Vec::with_capacity(model.param_count() * 8);
    for t in &model.layout().tensors {
        for v in &model.params()[t.offset..t.offset + t.len()] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

pub fn read_model(mut input: impl Read) -> Result<VaeModel> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if magic != MODEL_MAGIC {
        return Err(Error::ModelFormat("not a model file (bad magic)".into()));
    }
    let mut u32b = [0u8; 4];
    input.read_exact(&mut u32b)?;
    let version = u32::from_le_bytes(u32b);
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::ModelFormat(format!(
            "format version {version}, this build reads {MODEL_FORMAT_VERSION}"
        )));
    }
    let mut u64b = [0u8; 8];
    input.read_exact(&mut u64b)?;
    let hlen = u64::from_le_bytes(u64b);
    if hlen > MAX_HEADER {
        return Err(Error::ModelFormat(format!("header of {hlen} bytes")));
    }
    let mut json = vec![0u8; hlen as usize];
    input.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    let model = VaeModel::zeros(header.scope.clone(), header.hyperparams.clone())?;
    let expected: Vec<TensorHeader> = model
        .layout()
        .tensors
        .iter()
        .map(|t| TensorHeader {
            name: t.name.clone(),
            shape: t.shape.clone(),
        })
        .collect();
    if expected != header.tensors {
        return Err(Error::ModelFormat(
            "tensor table does not match the architecture".into(),
        ));
    }
    let mut raw = vec![0u8; model.param_count() * 8];
    input.read_exact(&mut raw).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::ModelFormat("truncated tensor data".into()),
        _ => Error::Io(e),
    })?;
    let mut params = vec![0.0; model.param_count()];
    let mut chunks = raw.chunks_exact(8);
    for t in &model.layout().tensors {
        for slot in &mut params[t.offset..t.offset + t.len()] {
            let c = chunks.next().expect("length checked above");
            *slot = f64::from_le_bytes(c.try_into().expect("8-byte chunk"));
        }
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(Error::ModelFormat(
            "trailing bytes after tensor data".into(),
        ));
    }
    VaeModel::from_parts(header.scope, header.hyperparams, params)
}
