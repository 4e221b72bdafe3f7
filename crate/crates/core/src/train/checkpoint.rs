//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "LCLDENC1"
//! version  u32
//! hlen     u64      byte length of the header
//! header   hlen     UTF-8 JSON (model config, step, temperature, config hash,
//!                   tensor directory)
//! payload           f32 tensors in directory order
//! ```
//!
//! Directory offsets are relative to the start of the payload. Model
//! parameters come first, followed by the optimizer's first and second
//! moments (`adam.m.<name>`, `adam.v.<name>`) when present.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::AdamState;
use crate::encoders::{DualEncoder, ModelConfig};
use crate::error::{ensure, Error, Result};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 8] = b"LCLDENC1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DualEncoder<f32>,
    pub optimizer: Option<AdamState>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_config: ModelConfig,
    step: u64,
    temperature: f32,
    config_hash: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: u64,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of the model configuration's JSON form.
pub fn config_hash(cfg: &ModelConfig) -> Result<String> {
    Ok(hex(&Sha256::digest(serde_json::to_vec(cfg)?)))
}

/// SHA-256 of arbitrary bytes, hex-encoded.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn new(model: DualEncoder<f32>) -> Self {
        Self {
            model,
            optimizer: None,
        }
    }

    pub fn step(&self) -> u64 {
        self.optimizer.as_ref().map_or(0, |o| o.step)
    }

    fn tensors(&self) -> Vec<(String, &Matrix<f32>)> {
        let mut out: Vec<(String, &Matrix<f32>)> = self
            .model
            .named_params()
            .map(|(n, p)| (n.to_string(), p))
            .collect();
        if let Some(opt) = &self.optimizer {
            for (name, m) in self.model.param_names().iter().zip(&opt.m) {
                out.push((format!("adam.m.{name}"), m));
            }
            for (name, v) in self.model.param_names().iter().zip(&opt.v) {
                out.push((format!("adam.v.{name}"), v));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.tensors();
        let mut offset = 0u64;
        let entries = tensors
            .iter()
            .map(|(name, m)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: [m.rows(), m.cols()],
                    offset,
                };
                offset += 4 * m.len() as u64;
                e
            })
            .collect();
        let header = Header {
            model_config: self.model.config().clone(),
            step: self.step(),
            temperature: self.model.temperature(),
            config_hash: config_hash(self.model.config())?,
            tensors: entries,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, m) in &tensors {
            for x in m.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = |what: &str| Error::Format {
            field: "length",
            expected: format!("{what} present"),
            found: format!("file of {} bytes", bytes.len()),
        };
        let magic = bytes.get(..8).ok_or_else(|| truncated("magic"))?;
        if magic != MAGIC {
            return Err(Error::Format {
                field: "magic",
                expected: String::from_utf8_lossy(MAGIC).into_owned(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let version = u32::from_le_bytes(bytes.get(8..12).ok_or_else(|| truncated("version"))?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format {
                field: "version",
                expected: VERSION.to_string(),
                found: version.to_string(),
            });
        }
        let hlen = u64::from_le_bytes(bytes.get(12..20).ok_or_else(|| truncated("header length"))?.try_into().unwrap());
        let hend = 20usize
            .checked_add(usize::try_from(hlen).map_err(|_| truncated("header"))?)
            .ok_or_else(|| truncated("header"))?;
        let header: Header = serde_json::from_slice(bytes.get(20..hend).ok_or_else(|| truncated("header"))?)?;
        let want_hash = config_hash(&header.model_config)?;
        if header.config_hash != want_hash {
            return Err(Error::Format {
                field: "config_hash",
                expected: want_hash,
                found: header.config_hash,
            });
        }
        let payload = &bytes[hend..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected_offset = 0u64;
        for e in &header.tensors {
            ensure!(e.offset == expected_offset, "tensor {} has offset {}, expected {expected_offset}", e.name, e.offset);
            let n = e.shape[0] * e.shape[1];
            let start = e.offset as usize;
            let raw = payload.get(start..start + 4 * n).ok_or_else(|| truncated(&e.name))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name.clone(), Matrix::from_vec(e.shape[0], e.shape[1], data)?));
            expected_offset += 4 * n as u64;
        }
        ensure!(
            payload.len() as u64 == expected_offset,
            "{} trailing payload bytes",
            payload.len() as u64 - expected_offset.min(payload.len() as u64)
        );
        let n_params = tensors.iter().take_while(|(n, _)| !n.starts_with("adam.")).count();
        let rest = tensors.split_off(n_params);
        let model = DualEncoder::from_params(header.model_config, tensors)?;
        let optimizer = if rest.is_empty() {
            ensure!(header.step == 0, "step {} recorded without optimizer state", header.step);
            None
        } else {
            let names = model.param_names();
            ensure!(rest.len() == 2 * names.len(), "optimizer state has {} tensors", rest.len());
            let (m, v) = rest.split_at(names.len());
            let unpack = |part: &[(String, Matrix<f32>)], kind: &str| -> Result<Vec<Matrix<f32>>> {
                part.iter()
                    .zip(names.iter().zip(model.params()))
                    .map(|((n, t), (pn, p))| {
                        ensure!(n == &format!("adam.{kind}.{pn}"), "unexpected tensor {n}");
                        ensure!(t.shape() == p.shape(), "moment {n} has shape {:?}", t.shape());
                        Ok(t.clone())
                    })
                    .collect()
            };
            let m = unpack(m, "m")?;
            let v = unpack(v, "v")?;
            Some(AdamState {
                m,
                v,
                step: header.step,
            })
        };
        ensure!(
            model.temperature() == header.temperature,
            "header temperature disagrees with the temperature tensor"
        );
        Ok(Self { model, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}
