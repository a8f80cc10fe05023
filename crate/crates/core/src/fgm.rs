//! The FGM model container.
//!
//! Layout: a UTF-8 JSON header describing the layer list, then the 8-byte magic
//! `FGCAMv01`, then the little-endian `f32` weight blobs concatenated in header
//! order. Every blob entry in the header records its shape, byte offset (relative
//! to the first byte after the magic), byte length and IEEE CRC-32.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    validate_model, BatchNormParams, Conv2dParams, LayerKind, LayerSpec, LinearParams, ModelGraph,
    PoolParams, Preprocessing,
};
use crate::tensor::Tensor;

pub const FGM_MAGIC: &[u8; 8] = b"FGCAMv01";
const FORMAT_NAME: &str = "fgm";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    input_shape: Vec<usize>,
    class_count: usize,
    preprocessing: PreprocessingHeader,
    layers: Vec<LayerHeader>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PreprocessingHeader {
    mean: Vec<f32>,
    std: Vec<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerHeader {
    name: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eps: Option<f32>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    blobs: BTreeMap<String, BlobRef>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlobRef {
    shape: Vec<usize>,
    offset: usize,
    length: usize,
    crc32: u32,
}

/// Read, checksum and validate an FGM file.
pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    let model = read_fgm(path)?;
    ensure_valid(&model)?;
    Ok(model)
}

/// Turn validation findings into a load error.
pub fn ensure_valid(model: &ModelGraph) -> Result<()> {
    match validate_model(model).into_iter().next() {
        None => Ok(()),
        Some(finding) => Err(match finding.layer {
            Some(layer) => Error::FgmShape {
                layer,
                detail: finding.rule,
            },
            None => Error::InvalidModel(finding.rule),
        }),
    }
}

/// Parse an FGM file and verify blob checksums and per-layer parameter shapes,
/// without graph-level validation.
pub fn read_fgm(path: impl AsRef<Path>) -> Result<ModelGraph> {
    decode_fgm(&std::fs::read(path)?)
}

pub fn decode_fgm(bytes: &[u8]) -> Result<ModelGraph> {
    let mut stream = serde_json::Deserializer::from_slice(bytes).into_iter::<Header>();
    let header = match stream.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => return Err(Error::FgmHeader(e.to_string())),
        None => return Err(Error::FgmHeader("empty file".into())),
    };
    let end = stream.byte_offset();
    if bytes.get(end..end + FGM_MAGIC.len()) != Some(FGM_MAGIC.as_slice()) {
        return Err(Error::FgmHeader(format!(
            "expected magic {:?} at byte {end}",
            String::from_utf8_lossy(FGM_MAGIC)
        )));
    }
    if header.format != FORMAT_NAME || header.version != FORMAT_VERSION {
        return Err(Error::FgmHeader(format!(
            "unsupported format {:?} version {}",
            header.format, header.version
        )));
    }
    let blob_region = &bytes[end + FGM_MAGIC.len()..];

    let input_shape: [usize; 3] = header.input_shape.as_slice().try_into().map_err(|_| {
        Error::FgmHeader(format!(
            "input_shape must be [C, H, W], got {:?}",
            header.input_shape
        ))
    })?;
    let layers = header
        .layers
        .iter()
        .map(|l| decode_layer(l, blob_region))
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelGraph::new(
        layers,
        input_shape,
        header.class_count,
        Preprocessing {
            mean: header.preprocessing.mean,
            std: header.preprocessing.std,
        },
    ))
}

fn decode_layer(header: &LayerHeader, region: &[u8]) -> Result<LayerSpec> {
    let name = header.name.as_str();
    let blob = |key: &str, rank: Option<usize>| -> Result<Tensor> {
        let entry = header
            .blobs
            .get(key)
            .ok_or_else(|| Error::FgmHeader(format!("layer `{name}` is missing blob `{key}`")))?;
        read_blob(name, key, entry, rank, region)
    };
    let vector = |key: &str| -> Result<Vec<f32>> { Ok(blob(key, Some(1))?.into_data()) };
    let pair = |value: Option<[usize; 2]>, what: &str| -> Result<(usize, usize)> {
        value
            .map(|[a, b]| (a, b))
            .ok_or_else(|| Error::FgmHeader(format!("layer `{name}` is missing `{what}`")))
    };

    let kind = match header.kind.as_str() {
        "conv2d" => {
            let weight = blob("weight", Some(4))?;
            let bias = vector("bias")?;
            if bias.len() != weight.shape()[0] {
                return Err(Error::FgmShape {
                    layer: name.into(),
                    detail: format!(
                        "bias length {} for weights {:?}",
                        bias.len(),
                        weight.shape()
                    ),
                });
            }
            LayerKind::Conv2d(Conv2dParams {
                weight,
                bias,
                stride: header.stride.map_or((1, 1), |[a, b]| (a, b)),
                padding: header.padding.map_or((0, 0), |[a, b]| (a, b)),
            })
        }
        "batchnorm2d" => {
            let p = BatchNormParams {
                gamma: vector("gamma")?,
                beta: vector("beta")?,
                running_mean: vector("running_mean")?,
                running_var: vector("running_var")?,
                eps: header.eps.unwrap_or(1e-5),
            };
            let c = p.gamma.len();
            if [p.beta.len(), p.running_mean.len(), p.running_var.len()]
                .iter()
                .any(|&l| l != c)
            {
                return Err(Error::FgmShape {
                    layer: name.into(),
                    detail: "batchnorm vectors differ in length".into(),
                });
            }
            LayerKind::BatchNorm2d(p)
        }
        "relu" => LayerKind::Relu,
        "maxpool2d" | "avgpool2d" => {
            let kernel = pair(header.kernel, "kernel")?;
            let p = PoolParams {
                kernel,
                stride: header.stride.map_or(kernel, |[a, b]| (a, b)),
            };
            if header.kind == "maxpool2d" {
                LayerKind::MaxPool2d(p)
            } else {
                LayerKind::AvgPool2d(p)
            }
        }
        "flatten" => LayerKind::Flatten,
        "linear" => {
            let weight = blob("weight", Some(2))?;
            let bias = vector("bias")?;
            if bias.len() != weight.shape()[0] {
                return Err(Error::FgmShape {
                    layer: name.into(),
                    detail: format!(
                        "bias length {} for weights {:?}",
                        bias.len(),
                        weight.shape()
                    ),
                });
            }
            LayerKind::Linear(LinearParams { weight, bias })
        }
        other => {
            return Err(Error::FgmHeader(format!(
                "layer `{name}` has unknown kind `{other}`"
            )))
        }
    };
    Ok(LayerSpec::new(name, kind))
}

fn read_blob(
    layer: &str,
    key: &str,
    entry: &BlobRef,
    rank: Option<usize>,
    region: &[u8],
) -> Result<Tensor> {
    let label = format!("{layer}.{key}");
    if let Some(r) = rank {
        if entry.shape.len() != r {
            return Err(Error::FgmShape {
                layer: layer.into(),
                detail: format!("blob `{key}` must be rank {r}, declared {:?}", entry.shape),
            });
        }
    }
    let count: usize = entry.shape.iter().product();
    if entry.shape.contains(&0) || entry.length != count * 4 {
        return Err(Error::FgmShape {
            layer: layer.into(),
            detail: format!(
                "blob `{key}` declares shape {:?} but {} bytes",
                entry.shape, entry.length
            ),
        });
    }
    let raw = entry
        .offset
        .checked_add(entry.length)
        .and_then(|end| region.get(entry.offset..end))
        .ok_or_else(|| Error::FgmChecksum {
            blob: label.clone(),
            detail: format!(
                "bytes {}..{} lie beyond the {}-byte blob region (truncated file?)",
                entry.offset,
                entry.offset + entry.length,
                region.len()
            ),
        })?;
    let crc = crc32fast::hash(raw);
    if crc != entry.crc32 {
        return Err(Error::FgmChecksum {
            blob: label,
            detail: format!("expected crc32 {:#010x}, computed {crc:#010x}", entry.crc32),
        });
    }
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(entry.shape.clone(), data)
}

/// Serialize a graph to FGM bytes.
pub fn encode_fgm(model: &ModelGraph) -> Result<Vec<u8>> {
    let mut blobs = Vec::new();
    let mut push = |t: &[f32], shape: Vec<usize>| -> BlobRef {
        let offset = blobs.len();
        for v in t {
            blobs.extend_from_slice(&v.to_le_bytes());
        }
        BlobRef {
            shape,
            offset,
            length: t.len() * 4,
            crc32: crc32fast::hash(&blobs[offset..]),
        }
    };
    let mut layers = Vec::with_capacity(model.layers().len());
    for layer in model.layers() {
        let mut h = LayerHeader {
            name: layer.name.clone(),
            kind: layer.kind.tag().to_string(),
            stride: None,
            padding: None,
            kernel: None,
            eps: None,
            blobs: BTreeMap::new(),
        };
        match &layer.kind {
            LayerKind::Conv2d(p) => {
                h.stride = Some([p.stride.0, p.stride.1]);
                h.padding = Some([p.padding.0, p.padding.1]);
                h.blobs.insert(
                    "weight".into(),
                    push(p.weight.data(), p.weight.shape().to_vec()),
                );
                h.blobs
                    .insert("bias".into(), push(&p.bias, vec![p.bias.len()]));
            }
            LayerKind::BatchNorm2d(p) => {
                h.eps = Some(p.eps);
                for (key, v) in [
                    ("gamma", &p.gamma),
                    ("beta", &p.beta),
                    ("running_mean", &p.running_mean),
                    ("running_var", &p.running_var),
                ] {
                    h.blobs.insert(key.into(), push(v, vec![v.len()]));
                }
            }
            LayerKind::MaxPool2d(p) | LayerKind::AvgPool2d(p) => {
                h.kernel = Some([p.kernel.0, p.kernel.1]);
                h.stride = Some([p.stride.0, p.stride.1]);
            }
            LayerKind::Linear(p) => {
                h.blobs.insert(
                    "weight".into(),
                    push(p.weight.data(), p.weight.shape().to_vec()),
                );
                h.blobs
                    .insert("bias".into(), push(&p.bias, vec![p.bias.len()]));
            }
            LayerKind::Relu | LayerKind::Flatten => {}
        }
        layers.push(h);
    }
    let header = Header {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        input_shape: model.input_shape().to_vec(),
        class_count: model.class_count(),
        preprocessing: PreprocessingHeader {
            mean: model.preprocessing().mean.clone(),
            std: model.preprocessing().std.clone(),
        },
        layers,
    };
    let mut out = serde_json::to_vec_pretty(&header)?;
    out.extend_from_slice(FGM_MAGIC);
    out.extend_from_slice(&blobs);
    Ok(out)
}

pub fn write_fgm(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_fgm(model)?)?;
    Ok(())
}
