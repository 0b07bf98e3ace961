//! Versioned binary checkpoints: a magic header, the model config echoed as
//! JSON, then the named weight tensors (sorted by name, f64 little-endian).
//! The format is independent of the in-memory scalar type, so f32 models
//! round-trip exactly (f32 -> f64 -> f32 is lossless).

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::net::SpotNet;
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"SPOTNET\0";
const VERSION: u32 = 1;

pub fn save<F: Scalar>(
    path: &Path,
    config: &ModelConfig,
    params: &BTreeMap<String, ArrayD<F>>,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);

    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    let cfg = serde_json::to_vec(config).map_err(|e| Error::json(path, e))?;
    w.write_all(&(cfg.len() as u64).to_le_bytes()).map_err(io_err)?;
    w.write_all(&cfg).map_err(io_err)?;
    w.write_all(&(params.len() as u64).to_le_bytes()).map_err(io_err)?;
    // BTreeMap iterates sorted by name: byte-stable files for equal weights
    for (name, tensor) in params {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u64).to_le_bytes()).map_err(io_err)?;
        w.write_all(nb).map_err(io_err)?;
        w.write_all(&(tensor.ndim() as u64).to_le_bytes()).map_err(io_err)?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
        }
        for v in tensor.iter() {
            w.write_all(&v.f64().to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Checkpoint(format!("{}: truncated while reading {what}", path.display()))
        } else {
            Error::io(path, e)
        }
    })
}

fn read_u64(r: &mut impl Read, path: &Path, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path, what)?;
    Ok(u64::from_le_bytes(b))
}

pub fn load<F: Scalar>(path: &Path) -> Result<(ModelConfig, BTreeMap<String, ArrayD<F>>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, path, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a spotnet checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut vb = [0u8; 4];
    read_exact(&mut r, &mut vb, path, "version")?;
    let version = u32::from_le_bytes(vb);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported checkpoint version {version} (expected {VERSION})",
            path.display()
        )));
    }

    let cfg_len = read_u64(&mut r, path, "config length")? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    read_exact(&mut r, &mut cfg_bytes, path, "config JSON")?;
    let config: ModelConfig =
        serde_json::from_slice(&cfg_bytes).map_err(|e| Error::json(path, e))?;
    config.validate()?;

    let n_tensors = read_u64(&mut r, path, "tensor count")? as usize;
    let mut params = BTreeMap::new();
    for i in 0..n_tensors {
        let name_len = read_u64(&mut r, path, "name length")? as usize;
        if name_len > 4096 {
            return Err(Error::Checkpoint(format!(
                "{}: implausible tensor name length {name_len}",
                path.display()
            )));
        }
        let mut nb = vec![0u8; name_len];
        read_exact(&mut r, &mut nb, path, "tensor name")?;
        let name = String::from_utf8(nb).map_err(|_| {
            Error::Checkpoint(format!("{}: tensor {i} name is not UTF-8", path.display()))
        })?;
        let ndim = read_u64(&mut r, path, "rank")? as usize;
        if ndim > 8 {
            return Err(Error::Checkpoint(format!(
                "{}: tensor {name} has implausible rank {ndim}",
                path.display()
            )));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u64(&mut r, path, "dimension")? as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut vb = [0u8; 8];
        for _ in 0..len {
            read_exact(&mut r, &mut vb, path, "tensor data")?;
            data.push(F::of(f64::from_le_bytes(vb)));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| Error::Checkpoint(format!("{}: {name}: {e}", path.display())))?;
        params.insert(name, arr);
    }
    Ok((config, params))
}

/// Save a model's weights together with its routing config.
pub fn save_model<F: Scalar>(path: &Path, model: &SpotNet<F>) -> Result<()> {
    save(path, &model.config, &model.params)
}

/// Rebuild a model from a checkpoint, verifying the parameter set matches
/// what the embedded config requires.
pub fn load_model<F: Scalar>(path: &Path) -> Result<SpotNet<F>> {
    let (config, params) = load::<F>(path)?;
    let reference = SpotNet::<F>::new(config, 0)?;
    for (name, tensor) in &reference.params {
        match params.get(name) {
            None => {
                return Err(Error::Checkpoint(format!(
                    "{}: missing tensor {name}",
                    path.display()
                )))
            }
            Some(t) if t.shape() != tensor.shape() => {
                return Err(Error::Checkpoint(format!(
                    "{}: tensor {name} has shape {:?}, config requires {:?}",
                    path.display(),
                    t.shape(),
                    tensor.shape()
                )))
            }
            _ => {}
        }
    }
    if params.len() != reference.params.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} tensors, config requires {}",
            path.display(),
            params.len(),
            reference.params.len()
        )));
    }
    Ok(SpotNet { config, params })
}
