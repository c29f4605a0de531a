//! RPCK checkpoint container, run manifests and file hashing.
//!
//! Layout: `b"RPCK"`, `u32` version, `u64` header length, a UTF-8 JSON
//! header, then tensor payloads. Every payload starts on a 64-byte boundary
//! at the absolute offset the header records; all integers and floats are
//! little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

use crate::adapters::{Adapter, AdapterMethod};
use crate::energy::MatrixKind;
use crate::error::{Error, Result};
use crate::lm::{adapter_tensor_name, weight_shapes, AdapterSet, LMConfig, TransformerLM};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"RPCK";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;
const PREAMBLE: usize = 16;

/// A tensor as stored: element type, shape, little-endian bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    dtype: DType,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl RawTensor {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        Self {
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            bytes,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Decodes into `T`, converting between element types if needed.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match self.dtype {
            DType::F32 => self
                .bytes
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => self.bytes.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c))).collect(),
        };
        Tensor::new(&self.shape, data)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub tensors: Vec<TensorEntry>,
    pub meta: Value,
}

/// Named tensors plus free-form JSON metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, RawTensor>,
    pub meta: Value,
}

impl Checkpoint {
    pub fn new(meta: Value) -> Self {
        Self {
            tensors: BTreeMap::new(),
            meta,
        }
    }

    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.insert(name.into(), RawTensor::from_tensor(t));
    }

    pub fn get<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor '{name}'")))?
            .to_tensor()
    }

    /// Total stored scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(RawTensor::numel).sum()
    }

    /// Scalars in tensors whose name starts with `prefix`.
    pub fn scalar_count_with_prefix(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        // Offsets depend on the header length, which depends on the offsets'
        // digits; iterate until the payload start stops moving.
        let mut start = align_up(PREAMBLE);
        let header_json = loop {
            let mut offset = start;
            let mut entries = Vec::with_capacity(self.tensors.len());
            for (name, t) in &self.tensors {
                entries.push(TensorEntry {
                    name: name.clone(),
                    dtype: t.dtype,
                    shape: t.shape.clone(),
                    offset: offset as u64,
                    nbytes: t.bytes.len() as u64,
                });
                offset = align_up(offset + t.bytes.len());
            }
            let json = serde_json::to_vec(&Header {
                tensors: entries,
                meta: self.meta.clone(),
            })?;
            let needed = align_up(PREAMBLE + json.len());
            if needed <= start {
                break json;
            }
            start = needed;
        };

        let mut out = Vec::with_capacity(start + self.tensors.values().map(|t| align_up(t.bytes.len())).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        out.resize(start, 0);
        for t in self.tensors.values() {
            out.extend_from_slice(&t.bytes);
            out.resize(align_up(out.len()), 0);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE {
            return Err(Error::Format(format!("file is {} bytes, shorter than the preamble", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let header_end = (PREAMBLE as u64)
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| Error::Format(format!("header length {header_len} runs past end of file")))?
            as usize;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
            .map_err(|e| Error::Format(format!("header json: {e}")))?;

        let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(header.tensors.len());
        let mut tensors = BTreeMap::new();
        for e in &header.tensors {
            let numel: usize = e.shape.iter().product();
            if e.shape.contains(&0) {
                return Err(Error::Format(format!("tensor '{}' has a zero extent", e.name)));
            }
            if (numel * e.dtype.size()) as u64 != e.nbytes {
                return Err(Error::Format(format!(
                    "tensor '{}': {} bytes recorded for shape {:?} of {}",
                    e.name,
                    e.nbytes,
                    e.shape,
                    e.dtype.name()
                )));
            }
            if e.offset % ALIGN as u64 != 0 || e.offset < header_end as u64 {
                return Err(Error::Format(format!("tensor '{}' has misplaced offset {}", e.name, e.offset)));
            }
            let end = e
                .offset
                .checked_add(e.nbytes)
                .filter(|&end| end <= bytes.len() as u64)
                .ok_or_else(|| Error::Format(format!("tensor '{}' runs past end of file", e.name)))?;
            spans.push((e.offset, end, &e.name));
            let raw = RawTensor {
                dtype: e.dtype,
                shape: e.shape.clone(),
                bytes: bytes[e.offset as usize..end as usize].to_vec(),
            };
            if tensors.insert(e.name.clone(), raw).is_some() {
                return Err(Error::Format(format!("duplicate tensor '{}'", e.name)));
            }
        }
        spans.sort_unstable();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::Format(format!("tensors '{}' and '{}' overlap", w[0].2, w[1].2)));
            }
        }
        Ok(Self {
            tensors,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Provenance written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub tool_version: String,
    /// Command-specific facts worth auditing (e.g. trainable parameter count).
    #[serde(default)]
    pub details: BTreeMap<String, Value>,
    /// Seconds since the Unix epoch; the only non-reproducible field.
    pub created_unix: u64,
}

impl RunManifest {
    pub fn new(command: &str, config: Value, seed: u64) -> Self {
        let config_hash = sha256_hex(config.to_string().as_bytes());
        let created_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            command: command.to_string(),
            config,
            config_hash,
            seed,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            details: BTreeMap::new(),
            created_unix,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let hash = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    pub fn add_output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into().display().to_string());
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// What a checkpoint file holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    /// Base weights, plus adapter tensors when attached.
    Model,
    /// Adapter tensors only.
    Adapter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterMeta {
    pub method: AdapterMethod,
    pub points: Vec<MatrixKind>,
    pub base_fingerprint: String,
}

/// Checkpoint metadata for models and adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub kind: ArtifactKind,
    pub config: LMConfig,
    pub method: String,
    pub step: usize,
    pub seed: u64,
    pub adapter: Option<AdapterMeta>,
    /// Free-form extras (training config, reference checkpoint, optimizer step).
    #[serde(default)]
    pub extra: Value,
}

impl ModelMeta {
    pub fn new<T: Scalar>(model: &TransformerLM<T>, method: &str, step: usize, seed: u64) -> Self {
        Self {
            kind: ArtifactKind::Model,
            config: model.config().clone(),
            method: method.to_string(),
            step,
            seed,
            adapter: model.adapters().map(|a| AdapterMeta {
                method: a.method,
                points: a.points(),
                base_fingerprint: a.base_fingerprint.clone(),
            }),
            extra: Value::Null,
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        serde_json::from_value(c.meta.clone()).map_err(|e| Error::Format(format!("metadata: {e}")))
    }
}

/// Base weights and attached adapter tensors, with `meta` as the header metadata.
pub fn model_checkpoint<T: Scalar>(model: &TransformerLM<T>, meta: &ModelMeta) -> Result<Checkpoint> {
    let mut c = Checkpoint::new(serde_json::to_value(meta)?);
    for (name, t) in model.weights() {
        c.insert(name.clone(), t);
    }
    if let Some(set) = model.adapters() {
        for (name, t) in set.named_tensors() {
            c.insert(name, t);
        }
    }
    Ok(c)
}

/// Adapter tensors only.
pub fn adapter_checkpoint<T: Scalar>(model: &TransformerLM<T>, meta: &ModelMeta) -> Result<Checkpoint> {
    let set = model
        .adapters()
        .ok_or_else(|| Error::Adapter("no adapters attached".into()))?;
    let meta = ModelMeta {
        kind: ArtifactKind::Adapter,
        ..meta.clone()
    };
    let mut c = Checkpoint::new(serde_json::to_value(&meta)?);
    for (name, t) in set.named_tensors() {
        c.insert(name, t);
    }
    Ok(c)
}

fn restore_adapters<T: Scalar>(c: &Checkpoint, cfg: &LMConfig, am: &AdapterMeta) -> Result<AdapterSet<T>> {
    // identity adapters give the expected names and shapes; stored tensors overwrite them
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut slots = BTreeMap::new();
    for layer in 0..cfg.n_layers {
        for &kind in &am.points {
            let (d, n) = cfg.adapted_dims(kind);
            let mut a = Adapter::new(am.method, d, n, &mut rng)?;
            for (tname, slot) in a.named_params_mut() {
                let name = adapter_tensor_name(layer, kind, tname);
                let t: Tensor<T> = c.get(&name)?;
                if t.shape() != slot.shape() {
                    return Err(Error::ArchitectureMismatch(format!(
                        "adapter tensor '{name}' has shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t;
            }
            slots.insert((layer, kind), a);
        }
    }
    Ok(AdapterSet {
        method: am.method,
        slots,
        base_fingerprint: am.base_fingerprint.clone(),
    })
}

/// Rebuilds a model (with any stored adapters attached) from a model checkpoint.
pub fn model_from_checkpoint<T: Scalar>(c: &Checkpoint) -> Result<(TransformerLM<T>, ModelMeta)> {
    let meta = ModelMeta::from_checkpoint(c)?;
    if meta.kind != ArtifactKind::Model {
        return Err(Error::Format("expected a model checkpoint, found an adapter file".into()));
    }
    let mut weights = BTreeMap::new();
    for name in weight_shapes(&meta.config).keys() {
        weights.insert(name.clone(), c.get::<T>(name)?);
    }
    let mut model = TransformerLM::from_weights(meta.config.clone(), weights)?;
    if let Some(am) = &meta.adapter {
        model.set_adapters(restore_adapters(c, &meta.config, am)?)?;
    }
    Ok((model, meta))
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<(TransformerLM<T>, ModelMeta)> {
    model_from_checkpoint(&Checkpoint::load(path)?)
}

/// Attaches adapters stored in an adapter file to `model`.
pub fn attach_adapter_checkpoint<T: Scalar>(model: &mut TransformerLM<T>, c: &Checkpoint) -> Result<ModelMeta> {
    let meta = ModelMeta::from_checkpoint(c)?;
    if meta.kind != ArtifactKind::Adapter {
        return Err(Error::Format("expected an adapter file".into()));
    }
    if !meta.config.same_architecture(model.config()) {
        return Err(Error::ArchitectureMismatch(format!(
            "adapter was trained for {:?}, model is {:?}",
            meta.config,
            model.config()
        )));
    }
    let am = meta
        .adapter
        .as_ref()
        .ok_or_else(|| Error::Format("adapter file without adapter metadata".into()))?;
    model.set_adapters(restore_adapters(c, model.config(), am)?)?;
    Ok(meta)
}
