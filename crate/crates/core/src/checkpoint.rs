//! Flat binary checkpoint format.
//!
//! ```text
//! "DSCL"            4 bytes magic
//! version           u32 LE
//! count             u32 LE
//! count × {
//!     name_len      u32 LE
//!     name          UTF-8 bytes
//!     ndim          u32 LE
//!     dims          ndim × u64 LE
//!     payload       Π dims × f64 LE
//! }
//! ```
//!
//! Besides the model parameters a checkpoint carries a few `meta.*` and
//! `norm.*` tensors so that `eval` can rebuild the model and undo label
//! standardization without the original configuration.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::Standardizer;
use crate::error::{DsclError, Result};
use crate::model::{Activation, EncoderConfig, Model, ModelParams, RegressorConfig, RegressorDepth};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DSCL";
pub const VERSION: u32 = 1;

/// An ordered list of named tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(DsclError::Checkpoint("bad magic bytes".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(DsclError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            if name_len > r.len() {
                return Err(DsclError::Checkpoint("truncated name".into()));
            }
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| DsclError::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            if n.checked_mul(8).map_or(true, |bytes| bytes > r.len()) {
                return Err(DsclError::Checkpoint(format!("truncated payload for `{name}`")));
            }
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if !r.is_empty() {
            return Err(DsclError::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| DsclError::Checkpoint("unexpected end of file".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Everything needed to evaluate a trained model on raw data.
#[derive(Clone, Debug, PartialEq)]
pub struct SavedModel {
    pub model: Model,
    pub inputs: Option<Standardizer>,
    pub labels: Option<Standardizer>,
}

impl SavedModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let m = &self.model;
        let mut tensors = vec![
            (
                "meta.encoder_dims".to_string(),
                Tensor::vector(
                    std::iter::once(m.encoder.input_dim)
                        .chain(m.encoder.hidden_dims.iter().copied())
                        .chain(std::iter::once(m.encoder.feature_dim))
                        .map(|d| d as f64)
                        .collect(),
                ),
            ),
            (
                "meta.encoder_activation".to_string(),
                Tensor::vector(vec![match m.encoder.activation {
                    Activation::Relu => 0.0,
                    Activation::Tanh => 1.0,
                }]),
            ),
            (
                "meta.regressor".to_string(),
                Tensor::vector(vec![
                    m.regressor.num_targets as f64,
                    match m.regressor.depth {
                        RegressorDepth::Linear => 0.0,
                        RegressorDepth::TwoLayer => 1.0,
                    },
                    m.regressor.hidden_dim as f64,
                ]),
            ),
        ];
        for (prefix, s) in [("norm.inputs", &self.inputs), ("norm.labels", &self.labels)] {
            if let Some(s) = s {
                tensors.push((format!("{prefix}.mean"), Tensor::vector(s.mean.clone())));
                tensors.push((format!("{prefix}.std"), Tensor::vector(s.std.clone())));
            }
        }
        tensors.extend(m.params.entries().iter().cloned());
        Checkpoint { tensors }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let need = |n: &str| {
            ckpt.get(n)
                .ok_or_else(|| DsclError::Checkpoint(format!("missing tensor `{n}`")))
        };
        let dims: Vec<usize> = need("meta.encoder_dims")?.data().iter().map(|&d| d as usize).collect();
        if dims.len() < 2 {
            return Err(DsclError::Checkpoint("encoder dims too short".into()));
        }
        let activation = if need("meta.encoder_activation")?.item() == 0.0 {
            Activation::Relu
        } else {
            Activation::Tanh
        };
        let reg = need("meta.regressor")?.data().to_vec();
        if reg.len() != 3 {
            return Err(DsclError::Checkpoint("malformed regressor metadata".into()));
        }
        let encoder = EncoderConfig {
            input_dim: dims[0],
            hidden_dims: dims[1..dims.len() - 1].to_vec(),
            feature_dim: dims[dims.len() - 1],
            activation,
        };
        let regressor = RegressorConfig {
            feature_dim: encoder.feature_dim,
            num_targets: reg[0] as usize,
            depth: if reg[1] == 0.0 {
                RegressorDepth::Linear
            } else {
                RegressorDepth::TwoLayer
            },
            hidden_dim: reg[2] as usize,
        };
        let params = ModelParams::from_entries(
            ckpt.tensors
                .iter()
                .filter(|(n, _)| n.starts_with("encoder.") || n.starts_with("regressor."))
                .cloned()
                .collect(),
        );
        let model = Model::from_params(encoder, regressor, params)?;
        let norm = |prefix: &str| -> Option<Standardizer> {
            let mean = ckpt.get(&format!("{prefix}.mean"))?.data().to_vec();
            let std = ckpt.get(&format!("{prefix}.std"))?.data().to_vec();
            Some(Standardizer { mean, std })
        };
        Ok(Self {
            model,
            inputs: norm("norm.inputs"),
            labels: norm("norm.labels"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let c = Checkpoint {
            tensors: vec![("w".into(), Tensor::from_rows(&[[1.5, -2.0]]))],
        };
        let b = c.to_bytes();
        assert_eq!(&b[..4], b"DSCL");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 1);
        assert_eq!(b[16], b'w');
        assert_eq!(b.len(), 4 + 4 + 4 + 4 + 1 + 4 + 16 + 16);
        assert_eq!(f64::from_le_bytes(b[b.len() - 8..].try_into().unwrap()), -2.0);
        assert_eq!(Checkpoint::from_bytes(&b).unwrap(), c);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        assert!(Checkpoint::from_bytes(b"NOPE\x01\0\0\0\0\0\0\0").is_err());
        let c = Checkpoint {
            tensors: vec![("w".into(), Tensor::vector(vec![1.0, 2.0]))],
        };
        let b = c.to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 3]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
