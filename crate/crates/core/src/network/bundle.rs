//! Two-file model bundle: a JSON manifest describing the layer list and a
//! binary blob holding the parameter tensors.
//!
//! Blob layout (all integers little-endian):
//!
//! ```text
//! "EQPB" | version: u32 = 1 | tensor count: u32
//! per tensor: name length: u16 | name (UTF-8) | rank: u8 | dims: u32 × rank | f32 × product(dims)
//! CRC-32 (IEEE) of every preceding byte: u32
//! ```
//!
//! Tensors are written in ascending name order so a given network always
//! produces the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use super::{Layer, LayerKind, NetworkError, NetworkSpec};
use crate::tensor::{Padding, PaddingMode, Tensor};

pub const BLOB_MAGIC: &[u8; 4] = b"EQPB";
pub const BLOB_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest at {location}: {detail}")]
    MalformedManifest { location: String, detail: String },
    #[error("unknown layer kind `{kind}` at layers[{layer}]")]
    UnknownLayerKind { layer: usize, kind: String },
    #[error("duplicate tensor `{0}` in blob")]
    DuplicateTensor(String),
    #[error("blob checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("blob does not start with magic `EQPB`")]
    BadMagic,
    #[error("unsupported blob version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed blob at byte {offset}: {detail}")]
    MalformedBlob { offset: usize, detail: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

impl BundleError {
    fn manifest(location: impl Into<String>, detail: impl Into<String>) -> Self {
        BundleError::MalformedManifest {
            location: location.into(),
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    version: u32,
    input_shape: Vec<usize>,
    layers: Vec<LayerRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    kind: String,
    #[serde(default)]
    params: Map<String, Value>,
    #[serde(default)]
    tensors: BTreeMap<String, String>,
}

fn padding_mode_str(mode: PaddingMode) -> &'static str {
    match mode {
        PaddingMode::Zero => "zero",
        PaddingMode::Circular => "circular",
    }
}

fn layer_record(layer: &Layer) -> LayerRecord {
    let params = match layer {
        Layer::Conv {
            stride,
            padding,
            relu,
            ..
        } => json!({
            "stride": stride,
            "padding": padding_mode_str(padding.mode),
            "pad": padding.amount,
            "relu": relu,
        }),
        Layer::BatchNorm { eps, .. } => json!({ "eps": eps }),
        Layer::MaxPool { kernel, stride } => json!({ "kernel": kernel, "stride": stride }),
        Layer::Dense { relu, .. } => json!({ "relu": relu }),
        Layer::Relu | Layer::GlobalAvgPool | Layer::Flatten => json!({}),
    };
    let Value::Object(params) = params else {
        unreachable!("json! object literal")
    };
    LayerRecord {
        kind: layer.kind().as_str().to_string(),
        params,
        tensors: layer
            .tensor_refs()
            .into_iter()
            .map(|(role, name)| (role.to_string(), name.to_string()))
            .collect(),
    }
}

/// Typed access to one layer record's `params` and `tensors`, consuming keys
/// so leftovers can be rejected.
struct RecordReader {
    index: usize,
    params: Map<String, Value>,
    tensors: BTreeMap<String, String>,
}

impl RecordReader {
    fn location(&self, field: &str) -> String {
        format!("layers[{}].{field}", self.index)
    }

    fn usize(&mut self, key: &str, default: Option<usize>) -> Result<usize, BundleError> {
        match self.params.remove(key) {
            Some(v) => v.as_u64().map(|n| n as usize).ok_or_else(|| {
                BundleError::manifest(
                    self.location(&format!("params.{key}")),
                    "expected a non-negative integer",
                )
            }),
            None => default.ok_or_else(|| {
                BundleError::manifest(self.location("params"), format!("missing `{key}`"))
            }),
        }
    }

    fn bool(&mut self, key: &str) -> Result<bool, BundleError> {
        match self.params.remove(key) {
            Some(v) => v.as_bool().ok_or_else(|| {
                BundleError::manifest(
                    self.location(&format!("params.{key}")),
                    "expected a boolean",
                )
            }),
            None => Ok(false),
        }
    }

    fn f64(&mut self, key: &str, default: f64) -> Result<f64, BundleError> {
        match self.params.remove(key) {
            Some(v) => v.as_f64().ok_or_else(|| {
                BundleError::manifest(self.location(&format!("params.{key}")), "expected a number")
            }),
            None => Ok(default),
        }
    }

    fn padding_mode(&mut self) -> Result<PaddingMode, BundleError> {
        match self.params.remove("padding") {
            None => Ok(PaddingMode::Zero),
            Some(Value::String(s)) if s == "zero" => Ok(PaddingMode::Zero),
            Some(Value::String(s)) if s == "circular" => Ok(PaddingMode::Circular),
            Some(other) => Err(BundleError::manifest(
                self.location("params.padding"),
                format!("expected \"zero\" or \"circular\", got {other}"),
            )),
        }
    }

    fn tensor(&mut self, role: &str) -> Result<String, BundleError> {
        self.tensors.remove(role).ok_or_else(|| {
            BundleError::manifest(
                self.location("tensors"),
                format!("missing `{role}` reference"),
            )
        })
    }

    fn finish(self) -> Result<(), BundleError> {
        if let Some(key) = self.params.keys().next() {
            return Err(BundleError::manifest(
                self.location("params"),
                format!("unknown parameter `{key}`"),
            ));
        }
        if let Some(role) = self.tensors.keys().next() {
            return Err(BundleError::manifest(
                self.location("tensors"),
                format!("unknown tensor role `{role}`"),
            ));
        }
        Ok(())
    }
}

fn parse_layer(index: usize, record: LayerRecord) -> Result<Layer, BundleError> {
    let kind: LayerKind = record
        .kind
        .parse()
        .map_err(|kind| BundleError::UnknownLayerKind { layer: index, kind })?;
    let mut r = RecordReader {
        index,
        params: record.params,
        tensors: record.tensors,
    };
    let layer = match kind {
        LayerKind::Conv => {
            let mode = r.padding_mode()?;
            Layer::Conv {
                weight: r.tensor("weight")?,
                bias: r.tensor("bias")?,
                stride: r.usize("stride", Some(1))?,
                padding: Padding {
                    mode,
                    amount: r.usize("pad", Some(0))?,
                },
                relu: r.bool("relu")?,
            }
        }
        LayerKind::Relu => Layer::Relu,
        LayerKind::BatchNorm => Layer::BatchNorm {
            gamma: r.tensor("gamma")?,
            beta: r.tensor("beta")?,
            mean: r.tensor("running_mean")?,
            var: r.tensor("running_var")?,
            eps: r.f64("eps", 1e-5)?,
        },
        LayerKind::MaxPool => {
            let kernel = r.usize("kernel", None)?;
            Layer::MaxPool {
                kernel,
                stride: r.usize("stride", Some(kernel))?,
            }
        }
        LayerKind::GlobalAvgPool => Layer::GlobalAvgPool,
        LayerKind::Flatten => Layer::Flatten,
        LayerKind::Dense => Layer::Dense {
            weight: r.tensor("weight")?,
            bias: r.tensor("bias")?,
            relu: r.bool("relu")?,
        },
    };
    r.finish()?;
    Ok(layer)
}

pub fn manifest_to_string(net: &NetworkSpec) -> String {
    let manifest = ManifestFile {
        version: MANIFEST_VERSION,
        input_shape: net.input_shape().to_vec(),
        layers: net.layers().iter().map(layer_record).collect(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    text
}

/// Parse a manifest into `(input_shape, layers)`.
pub fn manifest_from_str(text: &str) -> Result<(Vec<usize>, Vec<Layer>), BundleError> {
    let manifest: ManifestFile = serde_json::from_str(text).map_err(|e| {
        BundleError::manifest(
            format!("line {}, column {}", e.line(), e.column()),
            e.to_string(),
        )
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(BundleError::manifest(
            "version",
            format!("unsupported manifest version {}", manifest.version),
        ));
    }
    let layers = manifest
        .layers
        .into_iter()
        .enumerate()
        .map(|(i, rec)| parse_layer(i, rec))
        .collect::<Result<_, _>>()?;
    Ok((manifest.input_shape, layers))
}

pub fn encode_blob(params: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.rank() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], BundleError> {
        if self.bytes.len() - self.pos < n {
            return Err(BundleError::MalformedBlob {
                offset: self.pos,
                detail: format!("unexpected end of data reading {what}"),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8, BundleError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, BundleError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, BundleError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Decode a blob, verifying the checksum before anything else.
pub fn decode_blob(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>, BundleError> {
    if bytes.len() < 4 {
        return Err(BundleError::ChecksumMismatch {
            stored: 0,
            computed: crc32fast::hash(bytes),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(BundleError::ChecksumMismatch { stored, computed });
    }

    let mut cur = Cursor {
        bytes: body,
        pos: 0,
    };
    if cur.take(4, "magic").ok() != Some(BLOB_MAGIC.as_slice()) {
        return Err(BundleError::BadMagic);
    }
    let version = cur.u32("version")?;
    if version != BLOB_VERSION {
        return Err(BundleError::UnsupportedVersion(version));
    }
    let count = cur.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let start = cur.pos;
        let name_len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|e| BundleError::MalformedBlob {
                offset: start + 2,
                detail: format!("tensor name is not UTF-8: {e}"),
            })?
            .to_string();
        let rank = cur.u8("rank")? as usize;
        let dims = (0..rank)
            .map(|_| cur.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let count: usize = dims.iter().product();
        let payload = cur.take(count * 4, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let tensor = Tensor::new(dims, data).map_err(|e| BundleError::MalformedBlob {
            offset: start,
            detail: format!("tensor `{name}`: {e}"),
        })?;
        if tensors.insert(name.clone(), tensor).is_some() {
            return Err(BundleError::DuplicateTensor(name));
        }
    }
    if cur.pos != body.len() {
        return Err(BundleError::MalformedBlob {
            offset: cur.pos,
            detail: "trailing bytes after last tensor".into(),
        });
    }
    Ok(tensors)
}

fn read(path: &Path) -> Result<Vec<u8>, BundleError> {
    fs::read(path).map_err(|source| BundleError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), BundleError> {
    fs::write(path, bytes).map_err(|source| BundleError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Load and fully validate a bundle. Parameters are promoted from `f32`.
pub fn load_bundle(
    manifest_path: impl AsRef<Path>,
    blob_path: impl AsRef<Path>,
) -> Result<NetworkSpec, BundleError> {
    let manifest_path = manifest_path.as_ref();
    let text = String::from_utf8(read(manifest_path)?)
        .map_err(|e| BundleError::manifest(manifest_path.display().to_string(), e.to_string()))?;
    let (input_shape, layers) = manifest_from_str(&text)?;
    let mut blob = decode_blob(&read(blob_path.as_ref())?)?;
    // Unreferenced tensors in the blob are dropped; the manifest is authoritative.
    let mut params = BTreeMap::new();
    for (_, name) in layers.iter().flat_map(|l| l.tensor_refs()) {
        if params.contains_key(name) {
            continue;
        }
        let tensor = blob
            .remove(name)
            .ok_or_else(|| NetworkError::MissingTensor(name.to_string()))?;
        params.insert(name.to_string(), tensor);
    }
    Ok(NetworkSpec::new(input_shape, layers, params)?)
}

/// Write `net` as a manifest plus blob. Output bytes depend only on `net`.
pub fn save_bundle(
    net: &NetworkSpec,
    manifest_path: impl AsRef<Path>,
    blob_path: impl AsRef<Path>,
) -> Result<(), BundleError> {
    write(manifest_path.as_ref(), manifest_to_string(net).as_bytes())?;
    write(blob_path.as_ref(), &encode_blob(net.params()))
}
