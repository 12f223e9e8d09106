//! Binary checkpoint of a policy.
//!
//! Layout (little-endian): magic `MVPNAVCK`, format version `u32`, the
//! architecture (`descriptor_dim`, `n_actions`, `encoder_units`,
//! `lstm_units` as `u32`, activation and encoder-prev-action flag as `u8`),
//! a length-prefixed UTF-8 metadata string, the tensor count, then per
//! tensor a length-prefixed name, `rows`, `cols` and `rows * cols` `f64`
//! values.

use std::fs;
use std::path::{Path, PathBuf};

use mvpnav_core::policy::{Activation, ParamTensor, PolicyConfig, PolicyParams};
use thiserror::Error;

const MAGIC: &[u8; 8] = b"MVPNAVCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint is malformed: {0}")]
    Malformed(String),
    #[error(
        "checkpoint network expects descriptor_dim={ckpt_dim}, n_actions={ckpt_actions}, \
         but the run has descriptor_dim={run_dim}, n_actions={run_actions}"
    )]
    DimensionMismatch {
        ckpt_dim: usize,
        ckpt_actions: usize,
        run_dim: usize,
        run_actions: usize,
    },
}

/// A policy plus free-form `key=value` metadata lines.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub metadata: String,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .lines()
            .find_map(|l| l.strip_prefix(key)?.strip_prefix('='))
    }

    /// Errors unless the network fits a dataset of `descriptor_dim` and an
    /// action set of `n_actions`.
    pub fn check_compatible(
        &self,
        descriptor_dim: usize,
        n_actions: usize,
    ) -> Result<(), CheckpointError> {
        let c = self.params.config();
        if c.descriptor_dim != descriptor_dim || c.n_actions != n_actions {
            return Err(CheckpointError::DimensionMismatch {
                ckpt_dim: c.descriptor_dim,
                ckpt_actions: c.n_actions,
                run_dim: descriptor_dim,
                run_actions: n_actions,
            });
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let c = ckpt.params.config();
    let mut out = Vec::with_capacity(64 + 8 * ckpt.params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [c.descriptor_dim, c.n_actions, c.encoder_units, c.lstm_units] {
        put_u32(&mut out, v);
    }
    out.push(match c.encoder_activation {
        Activation::Relu => 0,
        Activation::Identity => 1,
    });
    out.push(u8::from(c.prev_action_in_encoder));
    put_u32(&mut out, ckpt.metadata.len());
    out.extend_from_slice(ckpt.metadata.as_bytes());
    put_u32(&mut out, ParamTensor::ALL.len());
    for t in ParamTensor::ALL {
        let name = t.name().as_bytes();
        put_u32(&mut out, name.len());
        out.extend_from_slice(name);
        let (rows, cols) = t.shape(c);
        put_u32(&mut out, rows);
        put_u32(&mut out, cols);
        for v in ckpt.params.tensor(t) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() < n {
            return Err(CheckpointError::Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { buf: bytes };
    if r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()? as u32;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let (descriptor_dim, n_actions, encoder_units, lstm_units) =
        (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let encoder_activation = match r.u8()? {
        0 => Activation::Relu,
        1 => Activation::Identity,
        other => {
            return Err(CheckpointError::Malformed(format!(
                "unknown activation code {other}"
            )))
        }
    };
    let prev_action_in_encoder = match r.u8()? {
        0 => false,
        1 => true,
        other => return Err(CheckpointError::Malformed(format!("bad flag byte {other}"))),
    };
    let config = PolicyConfig {
        descriptor_dim,
        n_actions,
        encoder_units,
        lstm_units,
        encoder_activation,
        prev_action_in_encoder,
    };
    config
        .validate()
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let meta_len = r.u32()?;
    let metadata = String::from_utf8(r.take(meta_len)?.to_vec())
        .map_err(|_| CheckpointError::Malformed("metadata is not UTF-8".into()))?;
    let count = r.u32()?;
    if count != ParamTensor::ALL.len() {
        return Err(CheckpointError::Malformed(format!(
            "expected {} tensors, found {count}",
            ParamTensor::ALL.len()
        )));
    }
    let mut params = PolicyParams::zeros(config);
    for t in ParamTensor::ALL {
        let name_len = r.u32()?;
        let name = r.take(name_len)?;
        if name != t.name().as_bytes() {
            return Err(CheckpointError::Malformed(format!(
                "expected tensor `{}`, found `{}`",
                t.name(),
                String::from_utf8_lossy(name)
            )));
        }
        let (rows, cols) = (r.u32()?, r.u32()?);
        let expected = t.shape(&config);
        if (rows, cols) != expected {
            return Err(CheckpointError::Malformed(format!(
                "tensor `{}` has shape {rows}x{cols}, architecture implies {}x{}",
                t.name(),
                expected.0,
                expected.1
            )));
        }
        for v in params.tensor_mut(t) {
            *v = r.f64()?;
        }
    }
    if !r.buf.is_empty() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            r.buf.len()
        )));
    }
    if !params.is_finite() {
        return Err(CheckpointError::Malformed("non-finite parameter".into()));
    }
    Ok(Checkpoint { params, metadata })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| CheckpointError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, encode(ckpt)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}
