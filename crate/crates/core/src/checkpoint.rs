//! Model checkpoints: a directory with `manifest.json` plus one little-endian
//! `f32` row-major file per parameter, per batch-norm buffer and per Adam moment.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::BnStats;
use crate::error::{Error, Result};
use crate::optim::{AdamState, BlockId, Parameter};
use crate::tensor::{Scalar, Tensor};
use crate::unet::{NormBuffer, UNet, UNetConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    config: UNetConfig,
    adam_step: Option<u64>,
    parameters: Vec<ParamEntry>,
    norms: Vec<NormEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    block_id: BlockId,
    trainable: bool,
    file: String,
    adam_m: Option<String>,
    adam_v: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NormEntry {
    name: String,
    channels: usize,
    block_id: BlockId,
    initialized: bool,
    mean_file: String,
    var_file: String,
}

fn write_f32<T: Scalar>(path: &Path, data: &[T]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32<T: Scalar>(path: &Path, expected: usize) -> Result<Vec<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::format(
            path,
            format!("expected {} bytes, found {}", expected * 4, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect())
}

fn file_stem(name: &str) -> String {
    name.replace(['.', '/'], "_")
}

/// Write `model` (and optionally optimizer moments) into `dir`, creating it.
pub fn save<T: Scalar>(dir: &Path, model: &UNet<T>, adam: Option<&AdamState<T>>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut parameters = Vec::new();
    for (i, p) in model.params().iter().enumerate() {
        let stem = format!("{i:03}_{}", file_stem(&p.name));
        let file = format!("param_{stem}.bin");
        write_f32(&dir.join(&file), p.tensor.data())?;
        let (adam_m, adam_v) = match adam {
            Some(state) => {
                let (m, v) = (format!("adam_m_{stem}.bin"), format!("adam_v_{stem}.bin"));
                write_f32(&dir.join(&m), &state.m[i])?;
                write_f32(&dir.join(&v), &state.v[i])?;
                (Some(m), Some(v))
            }
            None => (None, None),
        };
        parameters.push(ParamEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            block_id: p.block_id,
            trainable: p.trainable,
            file,
            adam_m,
            adam_v,
        });
    }
    let mut norms = Vec::new();
    for (i, n) in model.norms().iter().enumerate() {
        let stem = format!("{i:03}_{}", file_stem(&n.name));
        let (mean_file, var_file) = (format!("bn_mean_{stem}.bin"), format!("bn_var_{stem}.bin"));
        write_f32(&dir.join(&mean_file), &n.stats.mean)?;
        write_f32(&dir.join(&var_file), &n.stats.var)?;
        norms.push(NormEntry {
            name: n.name.clone(),
            channels: n.stats.mean.len(),
            block_id: n.block_id,
            initialized: n.stats.initialized,
            mean_file,
            var_file,
        });
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        config: model.config().clone(),
        adam_step: adam.map(|a| a.step),
        parameters,
        norms,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Load a model and, when the checkpoint carries them, its Adam moments.
pub fn load<T: Scalar>(dir: &Path) -> Result<(UNet<T>, Option<AdamState<T>>)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path,
            found: manifest.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut params = Vec::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for e in &manifest.parameters {
        let n: usize = e.shape.iter().product();
        let data = read_f32(&dir.join(&e.file), n)?;
        let mut p = Parameter::new(e.name.clone(), Tensor::new(&e.shape, data)?, e.block_id);
        p.trainable = e.trainable;
        params.push(p);
        if let (Some(mf), Some(vf)) = (&e.adam_m, &e.adam_v) {
            m.push(read_f32(&dir.join(mf), n)?);
            v.push(read_f32(&dir.join(vf), n)?);
        }
    }
    let mut norms = Vec::new();
    for e in &manifest.norms {
        norms.push(NormBuffer {
            name: e.name.clone(),
            block_id: e.block_id,
            stats: BnStats {
                mean: read_f32(&dir.join(&e.mean_file), e.channels)?,
                var: read_f32(&dir.join(&e.var_file), e.channels)?,
                initialized: e.initialized,
            },
        });
    }
    let adam = match manifest.adam_step {
        Some(step) if m.len() == params.len() => Some(AdamState { step, m, v }),
        Some(_) => return Err(Error::format(&path, "adam_step present but moments missing")),
        None => None,
    };
    let model = UNet::from_parts(manifest.config, params, norms)?;
    Ok((model, adam))
}
