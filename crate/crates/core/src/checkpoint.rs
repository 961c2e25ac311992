//! Named-tensor container.
//!
//! Layout: 8-byte magic, u64 little-endian header length, a JSON header
//! listing `(name, dtype, shape, offset, nbytes)` for every tensor plus a
//! string metadata map, then the raw little-endian tensor bytes. Offsets are
//! relative to the first data byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lora::{AdapterSet, LoraSpec};
use crate::model::{ModelConfig, Site, TensorRef, Transformer};
use crate::Scalar;

pub const MAGIC: &[u8; 8] = b"EMBLAB\0\x01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("tensor {0:?} missing from checkpoint")]
    Missing(String),
    #[error("tensor {name:?} has shape {got:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("checkpoint kind is {got:?}, expected {expected:?}")]
    Kind { expected: String, got: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub records: Vec<TensorRecord>,
    data: Vec<u8>,
}

pub fn encode<T: Scalar>(metadata: &BTreeMap<String, String>, tensors: &[TensorRef<'_, T>]) -> Vec<u8> {
    let mut data = Vec::new();
    let mut records = Vec::with_capacity(tensors.len());
    for t in tensors {
        let offset = data.len() as u64;
        for &v in t.data {
            v.write_le(&mut data);
        }
        records.push(TensorRecord {
            name: t.name.clone(),
            dtype: T::DTYPE.into(),
            shape: t.shape.clone(),
            offset,
            nbytes: data.len() as u64 - offset,
        });
    }
    let header = serde_json::to_vec(&Header {
        metadata: metadata.clone(),
        tensors: records,
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    out
}

impl Checkpoint {
    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let hend = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| CheckpointError::Corrupt("header length past end of file".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..hend])
            .map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
        let data = bytes[hend..].to_vec();
        for r in &header.tensors {
            let width = match r.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                other => return Err(CheckpointError::Corrupt(format!("unknown dtype {other}"))),
            };
            let count: usize = r.shape.iter().product();
            if r.nbytes as usize != count * width
                || (r.offset + r.nbytes) as usize > data.len()
            {
                return Err(CheckpointError::Corrupt(format!(
                    "tensor {} extent does not match its shape",
                    r.name
                )));
            }
        }
        Ok(Self {
            metadata: header.metadata,
            records: header.tensors,
            data,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::decode(&fs::read(path)?)
    }

    pub fn kind(&self) -> &str {
        self.metadata.get("kind").map_or("", String::as_str)
    }

    fn expect_kind(&self, expected: &str) -> Result<(), CheckpointError> {
        if self.kind() != expected {
            return Err(CheckpointError::Kind {
                expected: expected.into(),
                got: self.kind().into(),
            });
        }
        Ok(())
    }

    /// Tensor values converted to `T`.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<(Vec<usize>, Vec<T>), CheckpointError> {
        let r = self
            .records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| CheckpointError::Missing(name.into()))?;
        let raw = &self.data[r.offset as usize..(r.offset + r.nbytes) as usize];
        let values = match r.dtype.as_str() {
            "f32" => raw.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
            _ => raw.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
        };
        Ok((r.shape.clone(), values))
    }

    fn fill<T: Scalar>(&self, name: &str, shape: &[usize], dst: &mut [T]) -> Result<(), CheckpointError> {
        let (got, values) = self.tensor::<T>(name)?;
        if got != shape {
            return Err(CheckpointError::Shape {
                name: name.into(),
                expected: shape.to_vec(),
                got,
            });
        }
        dst.copy_from_slice(&values);
        Ok(())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn model_metadata(config: &ModelConfig) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("kind".to_string(), "model".to_string()),
        (
            "config".to_string(),
            serde_json::to_string(config).expect("config serializes"),
        ),
    ])
}

pub fn encode_model<T: Scalar>(model: &Transformer<T>) -> Vec<u8> {
    encode(&model_metadata(&model.config), &model.tensors())
}

pub fn save_model<T: Scalar>(model: &Transformer<T>, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    write_atomic(path.as_ref(), &encode_model(model))
}

impl Checkpoint {
    pub fn to_model<T: Scalar>(&self) -> Result<Transformer<T>, CheckpointError> {
        self.expect_kind("model")?;
        let cfg = self
            .metadata
            .get("config")
            .ok_or_else(|| CheckpointError::Missing("config metadata".into()))?;
        let config: ModelConfig =
            serde_json::from_str(cfg).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        config
            .validate()
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let mut model = Transformer::<T>::init(&config)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?
            .zeros_like();
        for t in model.tensors_mut() {
            self.fill(&t.name, &t.shape, t.data)?;
        }
        if self.records.len() != model.tensors().len() {
            return Err(CheckpointError::Corrupt("unexpected extra tensors".into()));
        }
        Ok(model)
    }

    pub fn to_adapters<T: Scalar>(
        &self,
        config: &ModelConfig,
    ) -> Result<(LoraSpec, AdapterSet<T>), CheckpointError> {
        self.expect_kind("adapter")?;
        let spec = adapter_spec_from_metadata(&self.metadata)?;
        let mut set = AdapterSet::<T>::zeros(config, &spec);
        for t in set.tensors_mut() {
            self.fill(&t.name, &t.shape, t.data)?;
        }
        Ok((spec, set))
    }
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<Transformer<T>, CheckpointError> {
    Checkpoint::read(path)?.to_model()
}

pub fn adapter_metadata(spec: &LoraSpec, base: Option<&str>) -> BTreeMap<String, String> {
    let sites: Vec<&str> = spec.sites.iter().map(|s| s.name()).collect();
    let mut m = BTreeMap::from([
        ("kind".to_string(), "adapter".to_string()),
        ("rank".to_string(), spec.rank.to_string()),
        ("alpha".to_string(), format!("{:?}", spec.alpha)),
        ("dropout_p".to_string(), format!("{:?}", spec.dropout_p)),
        ("sites".to_string(), sites.join(",")),
    ]);
    if let Some(b) = base {
        m.insert("base".into(), b.into());
    }
    m
}

fn adapter_spec_from_metadata(m: &BTreeMap<String, String>) -> Result<LoraSpec, CheckpointError> {
    let get = |k: &str| {
        m.get(k)
            .ok_or_else(|| CheckpointError::Missing(format!("{k} metadata")))
    };
    let corrupt = |e: String| CheckpointError::Corrupt(e);
    let rank = get("rank")?.parse().map_err(|e| corrupt(format!("rank: {e}")))?;
    let alpha = get("alpha")?.parse().map_err(|e| corrupt(format!("alpha: {e}")))?;
    let dropout_p = get("dropout_p")?
        .parse()
        .map_err(|e| corrupt(format!("dropout_p: {e}")))?;
    let sites = get("sites")?
        .split(',')
        .map(|s| s.parse::<Site>())
        .collect::<Result<_, _>>()
        .map_err(corrupt)?;
    let spec = LoraSpec {
        rank,
        alpha,
        dropout_p,
        sites,
    };
    spec.validate().map_err(|e| corrupt(e.to_string()))?;
    Ok(spec)
}

pub fn save_adapters<T: Scalar>(
    spec: &LoraSpec,
    adapters: &AdapterSet<T>,
    base: Option<&str>,
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    let bytes = encode(&adapter_metadata(spec, base), &adapters.tensors());
    write_atomic(path.as_ref(), &bytes)
}
