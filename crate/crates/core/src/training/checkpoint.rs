//! Binary checkpoint container.
//!
//! Layout: magic `MIMF`, format version (u32 LE), header length (u64 LE), a
//! JSON header, then raw little-endian blobs in manifest order. `f32` blobs
//! hold parameter values and quantization scales; `i8` blobs hold quantized
//! weights.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{bail, Result};
use crate::numerics::Tensor;
use crate::quantize::QuantizedLinear;

pub const MAGIC: &[u8; 4] = b"MIMF";
pub const FORMAT_VERSION: u32 = 1;

/// Serializable position of a [`ChaCha8Rng`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte seed, hex encoded.
    pub seed: String,
    pub stream: u64,
    /// Word position as a decimal string (it exceeds JSON's integer range).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        if self.seed.len() != 64 || !self.seed.is_ascii() {
            bail!(Format, "rng seed must be 64 hex digits");
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| crate::Error::Format("bad rng seed hex".into()))?;
        }
        let pos: u128 = self.word_pos.parse().map_err(|_| crate::Error::Format("bad rng word position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    F32,
    I8,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    offset: u64,
    bytes: u64,
    #[serde(default)]
    trainable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: Value,
    vocabulary: Option<BTreeMap<String, usize>>,
    rng: Option<RngState>,
    step: u64,
    extra: Value,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor<f32>,
    pub trainable: bool,
}

/// In-memory form of a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// `"vq"`, `"mim"` or `"trainer"`.
    pub kind: String,
    pub config: Value,
    pub vocabulary: Option<BTreeMap<String, usize>>,
    pub rng: Option<RngState>,
    pub step: u64,
    pub extra: Value,
    pub tensors: Vec<NamedTensor>,
    pub quantized: Vec<(String, QuantizedLinear)>,
}

const INT8_SUFFIX: &str = "#int8";
const SCALES_SUFFIX: &str = "#scales";

impl Checkpoint {
    pub fn new(kind: &str, config: Value) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            config,
            vocabulary: None,
            rng: None,
            step: 0,
            extra: Value::Null,
            tensors: Vec::new(),
            quantized: Vec::new(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut blob: Vec<u8> = Vec::new();
        let push_f32 = |entries: &mut Vec<Entry>, blob: &mut Vec<u8>, name: String, shape: &[usize], data: &[f32], trainable: bool| {
            let offset = blob.len() as u64;
            for v in data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(Entry { name, dtype: Dtype::F32, shape: shape.to_vec(), offset, bytes: blob.len() as u64 - offset, trainable });
        };
        for t in &self.tensors {
            push_f32(&mut entries, &mut blob, t.name.clone(), t.tensor.shape(), t.tensor.data(), t.trainable);
        }
        for (name, q) in &self.quantized {
            let offset = blob.len() as u64;
            blob.extend(q.ints().iter().map(|&v| v as u8));
            entries.push(Entry {
                name: format!("{name}{INT8_SUFFIX}"),
                dtype: Dtype::I8,
                shape: vec![q.rows(), q.cols()],
                offset,
                bytes: blob.len() as u64 - offset,
                trainable: false,
            });
            push_f32(&mut entries, &mut blob, format!("{name}{SCALES_SUFFIX}"), &[q.rows()], q.scales(), false);
        }
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            vocabulary: self.vocabulary.clone(),
            rng: self.rng.clone(),
            step: self.step,
            extra: self.extra.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            bail!(Format, "checkpoint truncated before the header");
        }
        if &bytes[..4] != MAGIC {
            bail!(Format, "bad magic bytes, not a checkpoint");
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            bail!(Format, "checkpoint version {version}, expected {FORMAT_VERSION}");
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        if bytes.len() - 16 < hlen {
            bail!(Format, "checkpoint truncated inside the header");
        }
        let header: Header = serde_json::from_slice(&bytes[16..16 + hlen])
            .map_err(|e| crate::Error::Format(format!("unreadable checkpoint header: {e}")))?;
        let blob = &bytes[16 + hlen..];
        let mut tensors = Vec::new();
        let mut ints: BTreeMap<String, (Vec<usize>, Vec<i8>)> = BTreeMap::new();
        let mut scales: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        let mut expected_end = 0u64;
        for e in &header.tensors {
            let count: usize = e.shape.iter().product();
            let width = match e.dtype {
                Dtype::F32 => 4,
                Dtype::I8 => 1,
            };
            if e.bytes != (count * width) as u64 || e.offset != expected_end {
                bail!(Format, "inconsistent manifest entry for {}", e.name);
            }
            expected_end = e.offset + e.bytes;
            let Some(raw) = blob.get(e.offset as usize..expected_end as usize) else {
                bail!(Format, "checkpoint truncated in blob {}", e.name);
            };
            match e.dtype {
                Dtype::I8 => {
                    let Some(base) = e.name.strip_suffix(INT8_SUFFIX) else { bail!(Format, "int8 blob {} without suffix", e.name) };
                    ints.insert(base.to_string(), (e.shape.clone(), raw.iter().map(|&b| b as i8).collect()));
                }
                Dtype::F32 => {
                    let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                    if let Some(base) = e.name.strip_suffix(SCALES_SUFFIX) {
                        scales.insert(base.to_string(), data);
                    } else {
                        tensors.push(NamedTensor { name: e.name.clone(), tensor: Tensor::new(&e.shape, data)?, trainable: e.trainable });
                    }
                }
            }
        }
        if expected_end as usize != blob.len() {
            bail!(Format, "{} trailing bytes after the last blob", blob.len() - expected_end as usize);
        }
        let mut quantized = Vec::new();
        for (name, (shape, q)) in ints {
            let Some(s) = scales.remove(&name) else { bail!(Format, "missing scales for quantized {name}") };
            if shape.len() != 2 {
                bail!(Format, "quantized {name} is not a matrix");
            }
            quantized.push((name, QuantizedLinear::from_parts(shape[0], shape[1], q, s)?));
        }
        if let Some(name) = scales.keys().next() {
            bail!(Format, "scales for {name} without int8 weights");
        }
        Ok(Checkpoint {
            kind: header.kind,
            config: header.config,
            vocabulary: header.vocabulary,
            rng: header.rng,
            step: header.step,
            extra: header.extra,
            tensors,
            quantized,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn expect_kind(&self, kinds: &[&str]) -> Result<()> {
        if !kinds.contains(&self.kind.as_str()) {
            bail!(Format, "checkpoint holds a {} model, expected one of {:?}", self.kind, kinds);
        }
        Ok(())
    }
}
