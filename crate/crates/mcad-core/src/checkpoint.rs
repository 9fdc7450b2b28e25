//! Versioned binary checkpoint container: config snapshot, epoch counter,
//! optimizer step, RNG seed, and a name-indexed tensor table (parameters
//! plus AdamW moments) in little-endian floats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::nn::ParamStore;
use crate::optim::AdamW;
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 8] = b"MCADCKPT";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),
    #[error("checkpoint holds {found}-byte floats but the run uses {expected}-byte")]
    DtypeMismatch { found: u8, expected: u8 },
    #[error("tensor {name}: expected shape {expected:?}, checkpoint has {found:?}")]
    TensorMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {0} missing from checkpoint")]
    MissingTensor(String),
    #[error("checkpoint has trailing bytes after the tensor table")]
    TrailingBytes,
    #[error("non-finite value in tensor {0}")]
    NonFinite(String),
}

/// In-memory checkpoint contents.
#[derive(Debug)]
pub struct Checkpoint<T> {
    pub config_text: String,
    /// Completed epochs.
    pub epoch: u64,
    pub opt_step: u64,
    pub rng_seed: u64,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Checkpoint<T> {
    /// Capture parameters and optimizer state.
    pub fn capture(
        config_text: String,
        epoch: u64,
        rng_seed: u64,
        ps: &ParamStore<T>,
        opt: &AdamW<T>,
    ) -> Self {
        let mut tensors = Vec::with_capacity(ps.len() * 3);
        for (_, name, t) in ps.iter() {
            tensors.push((name.to_string(), t.clone()));
        }
        let (m, v) = opt.state();
        for ((_, name, _), mt) in ps.iter().zip(m) {
            tensors.push((format!("adamw.m.{name}"), mt.clone()));
        }
        for ((_, name, _), vt) in ps.iter().zip(v) {
            tensors.push((format!("adamw.v.{name}"), vt.clone()));
        }
        Checkpoint {
            config_text,
            epoch,
            opt_step: opt.step_count(),
            rng_seed,
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Write parameters back into a store built from the same config.
    /// Errors name the first mismatching tensor.
    pub fn apply_to_store(&self, ps: &mut ParamStore<T>) -> Result<(), CheckpointError> {
        let ids: Vec<_> = ps.ids().collect();
        for id in ids {
            let name = ps.name(id).to_string();
            let t = self
                .tensor(&name)
                .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
            if t.shape() != ps.get(id).shape() {
                return Err(CheckpointError::TensorMismatch {
                    name,
                    expected: ps.get(id).shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            ps.set(id, t.clone());
        }
        Ok(())
    }

    /// Restore AdamW moments saved alongside the parameters.
    pub fn apply_to_optimizer(
        &self,
        ps: &ParamStore<T>,
        opt: &mut AdamW<T>,
    ) -> Result<(), CheckpointError> {
        let mut m = Vec::with_capacity(ps.len());
        let mut v = Vec::with_capacity(ps.len());
        for (_, name, t) in ps.iter() {
            for (table, prefix) in [(&mut m, "adamw.m."), (&mut v, "adamw.v.")] {
                let key = format!("{prefix}{name}");
                let mt = self
                    .tensor(&key)
                    .ok_or_else(|| CheckpointError::MissingTensor(key.clone()))?;
                if mt.shape() != t.shape() {
                    return Err(CheckpointError::TensorMismatch {
                        name: key,
                        expected: t.shape().to_vec(),
                        found: mt.shape().to_vec(),
                    });
                }
                table.push(mt.clone());
            }
        }
        opt.restore(self.opt_step, m, v);
        Ok(())
    }
}

pub fn save_checkpoint<T: Real>(path: &Path, ckpt: &Checkpoint<T>) -> Result<(), CheckpointError> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    let cfg = ckpt.config_text.as_bytes();
    f.write_all(&(cfg.len() as u32).to_le_bytes())?;
    f.write_all(cfg)?;
    f.write_all(&ckpt.epoch.to_le_bytes())?;
    f.write_all(&ckpt.opt_step.to_le_bytes())?;
    f.write_all(&ckpt.rng_seed.to_le_bytes())?;
    f.write_all(&[T::BYTES as u8])?;
    f.write_all(&(ckpt.tensors.len() as u32).to_le_bytes())?;
    for (name, t) in &ckpt.tensors {
        let nb = name.as_bytes();
        f.write_all(&(nb.len() as u16).to_le_bytes())?;
        f.write_all(nb)?;
        f.write_all(&[t.ndim() as u8])?;
        for &d in t.shape() {
            f.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            match T::BYTES {
                4 => f.write_all(&(v.to_f64() as f32).to_le_bytes())?,
                _ => f.write_all(&v.to_f64().to_le_bytes())?,
            }
        }
    }
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>, CheckpointError> {
    let mut f = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|_| CheckpointError::Truncated("magic".into()))?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut f, "version")?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let cfg_len = read_u32(&mut f, "config length")? as usize;
    let mut cfg = vec![0u8; cfg_len];
    f.read_exact(&mut cfg)
        .map_err(|_| CheckpointError::Truncated("config".into()))?;
    let config_text = String::from_utf8(cfg)
        .map_err(|_| CheckpointError::Truncated("config (not utf8)".into()))?;
    let epoch = read_u64(&mut f, "epoch")?;
    let opt_step = read_u64(&mut f, "optimizer step")?;
    let rng_seed = read_u64(&mut f, "rng seed")?;
    let mut dtype = [0u8; 1];
    f.read_exact(&mut dtype)
        .map_err(|_| CheckpointError::Truncated("dtype".into()))?;
    if dtype[0] as usize != T::BYTES {
        return Err(CheckpointError::DtypeMismatch {
            found: dtype[0],
            expected: T::BYTES as u8,
        });
    }
    let count = read_u32(&mut f, "tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = {
            let mut b = [0u8; 2];
            f.read_exact(&mut b)
                .map_err(|_| CheckpointError::Truncated("tensor name length".into()))?;
            u16::from_le_bytes(b) as usize
        };
        let mut nb = vec![0u8; name_len];
        f.read_exact(&mut nb)
            .map_err(|_| CheckpointError::Truncated("tensor name".into()))?;
        let name = String::from_utf8(nb)
            .map_err(|_| CheckpointError::Truncated("tensor name (not utf8)".into()))?;
        let mut ndim = [0u8; 1];
        f.read_exact(&mut ndim)
            .map_err(|_| CheckpointError::Truncated(name.clone()))?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            shape.push(read_u32(&mut f, &name)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let v = match T::BYTES {
                4 => {
                    let mut b = [0u8; 4];
                    f.read_exact(&mut b)
                        .map_err(|_| CheckpointError::Truncated(name.clone()))?;
                    f32::from_le_bytes(b) as f64
                }
                _ => {
                    let mut b = [0u8; 8];
                    f.read_exact(&mut b)
                        .map_err(|_| CheckpointError::Truncated(name.clone()))?;
                    f64::from_le_bytes(b)
                }
            };
            data.push(T::from_f64(v));
        }
        if !data.iter().all(|v| v.is_finite_val()) {
            return Err(CheckpointError::NonFinite(name));
        }
        tensors.push((name, Tensor::from_vec_unchecked(shape, data)));
    }
    let mut rest = [0u8; 1];
    if f.read(&mut rest)? != 0 {
        return Err(CheckpointError::TrailingBytes);
    }
    Ok(Checkpoint {
        config_text,
        epoch,
        opt_step,
        rng_seed,
        tensors,
    })
}

fn read_u32(f: &mut impl Read, what: &str) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    f.read_exact(&mut b)
        .map_err(|_| CheckpointError::Truncated(what.to_string()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(f: &mut impl Read, what: &str) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    f.read_exact(&mut b)
        .map_err(|_| CheckpointError::Truncated(what.to_string()))?;
    Ok(u64::from_le_bytes(b))
}
