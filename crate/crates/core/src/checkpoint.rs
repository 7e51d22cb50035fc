//! Binary artifact container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"SWFD"
//! version u32
//! hlen    u64            length of the JSON header in bytes
//! header  [u8; hlen]     {"kind": .., "meta": .., "arrays": [{"name", "shape"}]}
//! arrays  f64 LE values, concatenated in header order
//! ```
//!
//! Floats live in the binary section so round trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cae::{CaeParams, CaeSpec, LayerParams};
use crate::error::{Error, Result};
use crate::mtrnn::{Cs0Bank, MtrnnParams, MtrnnSpec};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"SWFD";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

/// A kind tag, a JSON metadata value and named f64 arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.arrays.push((name.into(), tensor));
    }

    pub fn array(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("{} container has no array {name:?}", self.kind)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, t)| ArrayEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let floats: usize = self.arrays.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + floats * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a switchfold artifact (bad magic)".into()));
        }
        let mut word = [0u8; 4];
        read_exact(&mut r, &mut word)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported artifact version {version}")));
        }
        let mut len = [0u8; 8];
        read_exact(&mut r, &mut len)?;
        let hlen = usize::try_from(u64::from_le_bytes(len))
            .map_err(|_| Error::Format("header length overflows".into()))?;
        if hlen > r.len() {
            return Err(Error::Format("truncated artifact header".into()));
        }
        let header: Header = serde_json::from_slice(&r[..hlen])?;
        r = &r[hlen..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for entry in header.arrays {
            let n: usize = entry.shape.iter().product();
            if r.len() < n * 8 {
                return Err(Error::Format(format!("truncated array {:?}", entry.name)));
            }
            let data = r[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            r = &r[n * 8..];
            arrays.push((entry.name, Tensor::new(entry.shape, data)?));
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after last array".into()));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    /// Loads a container and checks its kind tag.
    pub fn load(path: &Path, kind: &str) -> Result<Self> {
        let mut bytes = Vec::new();
        match std::fs::File::open(path) {
            Ok(mut f) => f.read_to_end(&mut bytes)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingArtifact {
                    path: path.to_path_buf(),
                    hint: format!("expected a {kind} artifact"),
                })
            }
            Err(e) => return Err(e.into()),
        };
        let c = Self::from_bytes(&bytes)?;
        if c.kind != kind {
            return Err(Error::Format(format!(
                "{} holds a {} artifact, expected {kind}",
                path.display(),
                c.kind
            )));
        }
        Ok(c)
    }

    pub fn meta_as<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.meta.clone())?)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("truncated artifact".into()))
}

/// Seed, epoch count and final loss recorded alongside trained parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub loss_history: Vec<f64>,
}

pub const MTRNN_KIND: &str = "mtrnn";
pub const CAE_KIND: &str = "cae";

#[derive(Clone, Debug, PartialEq)]
pub struct MtrnnCheckpoint {
    pub spec: MtrnnSpec,
    pub params: MtrnnParams,
    pub bank: Cs0Bank,
    /// File name of the dataset whose normalization this network was trained on.
    pub normalization_ref: String,
    pub training: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
struct MtrnnMeta {
    spec: MtrnnSpec,
    normalization_ref: String,
    training: TrainingMeta,
}

impl MtrnnCheckpoint {
    pub fn to_container(&self) -> Result<Container> {
        let meta = MtrnnMeta {
            spec: self.spec,
            normalization_ref: self.normalization_ref.clone(),
            training: self.training.clone(),
        };
        let mut c = Container::new(MTRNN_KIND, serde_json::to_value(meta)?);
        c.push("weights", self.params.weights.clone());
        c.push("bias", self.params.bias.clone());
        if !self.bank.is_empty() {
            c.push("cs0", Tensor::from_rows(&self.bank.entries)?);
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: MtrnnMeta = c.meta_as()?;
        let params = MtrnnParams {
            weights: c.array("weights")?.clone(),
            bias: c.array("bias")?.clone(),
        };
        params.check(&meta.spec)?;
        let bank = match c.array("cs0") {
            Ok(t) => Cs0Bank {
                entries: (0..t.rows()).map(|i| t.row(i).to_vec()).collect(),
            },
            Err(_) => Cs0Bank::zeros(0, meta.spec.cs_count),
        };
        if bank.entries.iter().any(|e| e.len() != meta.spec.cs_count) {
            return Err(Error::Format("Cs(0) width does not match spec".into()));
        }
        Ok(Self {
            spec: meta.spec,
            params,
            bank,
            normalization_ref: meta.normalization_ref,
            training: meta.training,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path, MTRNN_KIND)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaeCheckpoint {
    pub spec: CaeSpec,
    pub params: CaeParams,
    pub training: TrainingMeta,
    /// Held-out reconstruction MSE measured after training.
    pub holdout_mse: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct CaeMeta {
    spec: CaeSpec,
    training: TrainingMeta,
    holdout_mse: Option<f64>,
}

impl CaeCheckpoint {
    pub fn to_container(&self) -> Result<Container> {
        let meta = CaeMeta {
            spec: self.spec.clone(),
            training: self.training.clone(),
            holdout_mse: self.holdout_mse,
        };
        let mut c = Container::new(CAE_KIND, serde_json::to_value(meta)?);
        for (i, layer) in self.params.layers.iter().enumerate() {
            match layer {
                LayerParams::None => {}
                LayerParams::Conv { weight, bias } => {
                    c.push(format!("{i}.weight"), weight.clone());
                    if let Some(b) = bias {
                        c.push(format!("{i}.bias"), b.clone());
                    }
                }
                LayerParams::Dense { weight, bias } => {
                    c.push(format!("{i}.weight"), weight.clone());
                    c.push(format!("{i}.bias"), bias.clone());
                }
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    c.push(format!("{i}.gamma"), gamma.clone());
                    c.push(format!("{i}.beta"), beta.clone());
                    c.push(format!("{i}.running_mean"), running_mean.clone());
                    c.push(format!("{i}.running_var"), running_var.clone());
                }
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: CaeMeta = c.meta_as()?;
        // Start from a correctly shaped template and overwrite every tensor.
        let mut params = CaeParams::init(&meta.spec, &mut crate::numerics::Rng::new(0))?;
        for (i, layer) in params.layers.iter_mut().enumerate() {
            let get = |name: &str| c.array(&format!("{i}.{name}")).cloned();
            match layer {
                LayerParams::None => {}
                LayerParams::Conv { weight, bias } => {
                    *weight = get("weight")?;
                    if bias.is_some() {
                        *bias = Some(get("bias")?);
                    }
                }
                LayerParams::Dense { weight, bias } => {
                    *weight = get("weight")?;
                    *bias = get("bias")?;
                }
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    *gamma = get("gamma")?;
                    *beta = get("beta")?;
                    *running_mean = get("running_mean")?;
                    *running_var = get("running_var")?;
                }
            }
        }
        params.check(&meta.spec)?;
        Ok(Self {
            spec: meta.spec,
            params,
            training: meta.training,
            holdout_mse: meta.holdout_mse,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path, CAE_KIND)?)
    }
}
