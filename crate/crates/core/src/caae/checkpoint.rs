//! Checkpoint container: `CAAECK01`, a little-endian u32 header length, a
//! JSON header, then every parameter as f64 little-endian in layout order,
//! followed by the Adam first and second moments.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::param_layout;
use super::{CaaeConfig, CaaeError, ModelState, Result};
use crate::autodiff::{AdamState, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CAAECK01";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: CaaeConfig,
    input_scale: f64,
    adam_step: u64,
    adam_lr: f64,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
    params: Vec<NamedShape>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct NamedShape {
    name: String,
    shape: Vec<usize>,
}

pub fn write_checkpoint_to<W: Write>(model: &ModelState, w: &mut W) -> Result<()> {
    let layout = param_layout(&model.config);
    let header = Header {
        config: model.config.clone(),
        input_scale: model.input_scale,
        adam_step: model.adam.step,
        adam_lr: model.adam.lr,
        adam_beta1: model.adam.beta1,
        adam_beta2: model.adam.beta2,
        adam_eps: model.adam.eps,
        params: layout
            .into_iter()
            .zip(&model.params)
            .map(|(spec, p)| NamedShape {
                name: spec.name,
                shape: p.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| CaaeError::Checkpoint(e.to_string()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let arrays = model
        .params
        .iter()
        .map(Tensor::data)
        .chain(model.adam.m.iter().map(Vec::as_slice))
        .chain(model.adam.v.iter().map(Vec::as_slice));
    for arr in arrays {
        let mut buf = Vec::with_capacity(arr.len() * 8);
        for v in arr {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn checkpoint_bytes(model: &ModelState) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_checkpoint_to(model, &mut out)?;
    Ok(out)
}

/// SHA-256 of the serialized checkpoint, hex.
pub fn checkpoint_hash(model: &ModelState) -> Result<String> {
    Ok(hex::encode(Sha256::digest(checkpoint_bytes(model)?)))
}

pub fn write_checkpoint(model: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint_to(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ModelState> {
    read_checkpoint_from(&mut BufReader::new(File::open(path)?))
}

pub fn read_checkpoint_from<R: Read>(r: &mut R) -> Result<ModelState> {
    let bad = |m: String| CaaeError::Checkpoint(m);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("file too short for a checkpoint".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {:?}", String::from_utf8_lossy(&magic))));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(|_| bad("truncated header length".into()))?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(|_| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("header: {e}")))?;
    header.config.validate()?;
    let layout = param_layout(&header.config);
    if layout.len() != header.params.len() {
        return Err(bad(format!("{} arrays listed, config implies {}", header.params.len(), layout.len())));
    }
    for (spec, named) in layout.iter().zip(&header.params) {
        if spec.name != named.name || spec.shape != named.shape {
            return Err(bad(format!("array {} {:?} does not match the config", named.name, named.shape)));
        }
    }
    let mut read_array = |n: usize| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf).map_err(|_| bad("truncated parameter data".into()))?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    };
    let mut params = Vec::with_capacity(layout.len());
    for spec in &layout {
        let n = spec.shape.iter().product();
        params.push(Tensor::new(spec.shape.clone(), read_array(n)?)?);
    }
    let mut m = Vec::with_capacity(layout.len());
    for p in &params {
        m.push(read_array(p.len())?);
    }
    let mut v = Vec::with_capacity(layout.len());
    for p in &params {
        v.push(read_array(p.len())?);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    if params.iter().any(|p| p.data().iter().any(|x| !x.is_finite())) {
        return Err(bad("non-finite parameter".into()));
    }
    Ok(ModelState {
        config: header.config,
        params,
        adam: AdamState {
            lr: header.adam_lr,
            beta1: header.adam_beta1,
            beta2: header.adam_beta2,
            eps: header.adam_eps,
            step: header.adam_step,
            m,
            v,
        },
        input_scale: header.input_scale,
    })
}
