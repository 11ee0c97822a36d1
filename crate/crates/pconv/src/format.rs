//! The `.pconv` model container.
//!
//! | offset      | size | field                                        |
//! |-------------|------|----------------------------------------------|
//! | 0           | 8    | magic `PCONVMDL`                             |
//! | 8           | 4    | format version, u32 LE (currently 1)         |
//! | 12          | 8    | manifest length `m` in bytes, u64 LE         |
//! | 20          | m    | manifest, UTF-8 JSON                         |
//! | 20 + m      | 8    | blob length `b` in bytes, u64 LE             |
//! | 28 + m      | b    | blob, f32 LE values in logical order         |
//!
//! Every tensor in the manifest names a `{offset, count}` span of the blob
//! (byte offset, number of f32 values). Pruned layers store only the
//! retained weights, filter-major and channel-minor, mask positions ascending.

use std::path::Path;

use pconv_core::model::{
    validate_model, ConvLayer, ConvWeights, DenseLayer, Layer, ModelGraph, PrunedConvLayer, Shape3, PRUNED,
};
use pconv_core::scp::PatternSet;
use pconv_core::tensor::{ConvSpec, DenseConvLayer};
use serde::{Deserialize, Serialize};

use crate::error::{read_file, write_file, Error, Result};

pub const MAGIC: &[u8; 8] = b"PCONVMDL";
pub const VERSION: u32 = 1;
const HEADER: u64 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Span {
    offset: u64,
    count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum LayerEntry {
    Conv {
        stride: usize,
        padding: usize,
        kernel: [usize; 2],
        filters: usize,
        channels: usize,
        weights: Span,
        bias: Span,
    },
    PrunedConv {
        stride: usize,
        padding: usize,
        filters: usize,
        channels: usize,
        patterns: Vec<u16>,
        balanced: bool,
        /// `filters x channels`, 255 marks a pruned kernel.
        pattern_ids: Vec<u8>,
        weights: Span,
        bias: Span,
    },
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
        weights: Span,
        bias: Span,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    /// `[channels, height, width]` of one sample.
    input: [usize; 3],
    layers: Vec<LayerEntry>,
}

struct BlobWriter(Vec<u8>);

impl BlobWriter {
    fn push(&mut self, values: &[f32]) -> Span {
        let span = Span { offset: self.0.len() as u64, count: values.len() as u64 };
        for v in values {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
        span
    }
}

/// Manifest bytes and weight blob for a valid model.
pub fn serialize_model(model: &ModelGraph) -> Result<(Vec<u8>, Vec<u8>)> {
    if let Some(v) = validate_model(model).first() {
        return Err(pconv_core::Error::Validation(format!("refusing to serialize: {v}")).into());
    }
    let mut blob = BlobWriter(Vec::new());
    let layers = model
        .layers
        .iter()
        .map(|layer| match layer {
            Layer::Conv(ConvLayer { spec, weights: ConvWeights::Dense(d) }) => LayerEntry::Conv {
                stride: spec.stride,
                padding: spec.padding,
                kernel: [spec.kernel_h, spec.kernel_w],
                filters: d.filters(),
                channels: d.channels(),
                weights: blob.push(d.weights()),
                bias: blob.push(d.bias()),
            },
            Layer::Conv(ConvLayer { spec, weights: ConvWeights::Pruned(p) }) => LayerEntry::PrunedConv {
                stride: spec.stride,
                padding: spec.padding,
                filters: p.filters(),
                channels: p.channels(),
                patterns: p.patterns().encodings(),
                balanced: p.balanced(),
                pattern_ids: p.pattern_ids().to_vec(),
                weights: blob.push(p.weights()),
                bias: blob.push(p.bias()),
            },
            Layer::Relu => LayerEntry::Relu,
            Layer::MaxPool { size, stride } => LayerEntry::MaxPool { size: *size, stride: *stride },
            Layer::Dense(d) => LayerEntry::Dense {
                inputs: d.inputs,
                outputs: d.outputs,
                weights: blob.push(&d.weights),
                bias: blob.push(&d.bias),
            },
        })
        .collect();
    let manifest = Manifest {
        format: "pconv".into(),
        version: VERSION,
        input: [model.input.c, model.input.h, model.input.w],
        layers,
    };
    Ok((serde_json::to_vec(&manifest).expect("manifest serializes"), blob.0))
}

struct BlobReader<'a> {
    blob: &'a [u8],
    /// Absolute file position of `blob[0]`, for error messages.
    base: u64,
    /// End of the furthest span read so far.
    used: u64,
}

impl BlobReader<'_> {
    fn take(&mut self, span: Span, expected: usize, what: &str) -> Result<Vec<f32>> {
        if span.count != expected as u64 {
            return Err(Error::format(
                self.base + span.offset,
                format!("length mismatch for {what}: expected {expected} values, manifest declares {}", span.count),
            ));
        }
        let end = span.count.checked_mul(4).and_then(|n| n.checked_add(span.offset));
        match end {
            Some(end) if span.offset.is_multiple_of(4) && end <= self.blob.len() as u64 => {
                self.used = self.used.max(end);
                Ok(self.blob[span.offset as usize..end as usize]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                    .collect())
            }
            _ => Err(Error::format(
                self.base + span.offset,
                format!(
                    "length mismatch for {what}: span needs bytes {}..{} but the blob holds {} bytes",
                    span.offset,
                    end.map_or_else(|| "overflow".to_string(), |e| e.to_string()),
                    self.blob.len()
                ),
            )),
        }
    }
}

fn conv_spec(stride: usize, padding: usize, kh: usize, kw: usize) -> Result<ConvSpec> {
    Ok(ConvSpec::new(stride, padding, kh, kw)?)
}

fn decode(manifest_bytes: &[u8], blob: &[u8], manifest_at: u64, blob_at: u64) -> Result<ModelGraph> {
    let manifest: Manifest = serde_json::from_slice(manifest_bytes).map_err(|e| {
        // serde_json reports line/column; the manifest is single-line when written by us.
        Error::format(manifest_at, format!("manifest is not valid: {e}"))
    })?;
    if manifest.format != "pconv" {
        return Err(Error::format(
            manifest_at,
            format!("manifest format is {:?}, expected \"pconv\"", manifest.format),
        ));
    }
    if manifest.version != VERSION {
        return Err(Error::format(
            manifest_at,
            format!("manifest version mismatch: expected {VERSION}, found {}", manifest.version),
        ));
    }
    let mut reader = BlobReader { blob, base: blob_at, used: 0 };
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, entry) in manifest.layers.into_iter().enumerate() {
        layers.push(match entry {
            LayerEntry::Conv { stride, padding, kernel: [kh, kw], filters, channels, weights, bias } => {
                let w = reader.take(weights, filters * channels * kh * kw, &format!("layer {i} weights"))?;
                let b = reader.take(bias, filters, &format!("layer {i} bias"))?;
                Layer::Conv(ConvLayer {
                    spec: conv_spec(stride, padding, kh, kw)?,
                    weights: ConvWeights::Dense(DenseConvLayer::new(filters, channels, kh, kw, w, b)?),
                })
            }
            LayerEntry::PrunedConv { stride, padding, filters, channels, patterns, balanced, pattern_ids, weights, bias } => {
                let set = PatternSet::new(&patterns)?;
                if pattern_ids.len() != filters * channels {
                    return Err(Error::format(
                        manifest_at,
                        format!("layer {i}: expected {} pattern ids, found {}", filters * channels, pattern_ids.len()),
                    ));
                }
                if let Some(k) = pattern_ids.iter().position(|&id| id != PRUNED && usize::from(id) >= set.len()) {
                    return Err(pconv_core::Error::Validation(format!(
                        "manifest at byte {manifest_at}: layer {i} filter {} channel {}: pattern id {} out of range for a set of {}",
                        k / channels,
                        k % channels,
                        pattern_ids[k],
                        set.len()
                    ))
                    .into());
                }
                let retained = pattern_ids.iter().filter(|&&id| id != PRUNED).count();
                let w = reader.take(weights, retained * set.nonzeros(), &format!("layer {i} weights"))?;
                let b = reader.take(bias, filters, &format!("layer {i} bias"))?;
                Layer::Conv(ConvLayer {
                    spec: conv_spec(stride, padding, 3, 3)?,
                    weights: ConvWeights::Pruned(PrunedConvLayer::new(
                        filters,
                        channels,
                        set,
                        pattern_ids,
                        w,
                        b,
                        balanced,
                    )?),
                })
            }
            LayerEntry::Relu => Layer::Relu,
            LayerEntry::MaxPool { size, stride } => Layer::MaxPool { size, stride },
            LayerEntry::Dense { inputs, outputs, weights, bias } => Layer::Dense(DenseLayer {
                inputs,
                outputs,
                weights: reader.take(weights, inputs * outputs, &format!("layer {i} weights"))?,
                bias: reader.take(bias, outputs, &format!("layer {i} bias"))?,
            }),
        });
    }
    if reader.used != blob.len() as u64 {
        return Err(Error::format(
            blob_at + reader.used,
            format!("length mismatch: manifest accounts for {} blob bytes, blob holds {}", reader.used, blob.len()),
        ));
    }
    let [c, h, w] = manifest.input;
    let model = ModelGraph::new(Shape3::new(c, h, w), layers)?;
    if let Some(v) = validate_model(&model).first() {
        return Err(pconv_core::Error::Validation(v.to_string()).into());
    }
    Ok(model)
}

/// Inverse of [`serialize_model`].
pub fn deserialize_model(manifest: &[u8], blob: &[u8]) -> Result<ModelGraph> {
    decode(manifest, blob, 0, 0)
}

pub fn encode_container(model: &ModelGraph) -> Result<Vec<u8>> {
    let (manifest, blob) = serialize_model(model)?;
    let mut out = Vec::with_capacity(28 + manifest.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(&blob);
    Ok(out)
}

fn read_u64(bytes: &[u8], at: u64, what: &str) -> Result<u64> {
    let field = usize::try_from(at).ok().and_then(|a| bytes.get(a..a.checked_add(8)?)).ok_or_else(|| {
        Error::format(
            at,
            format!(
                "file ends before the {what} field (8 bytes, {} available)",
                bytes.len().saturating_sub(at as usize)
            ),
        )
    })?;
    Ok(u64::from_le_bytes(field.try_into().expect("8 bytes")))
}

pub fn decode_container(bytes: &[u8]) -> Result<ModelGraph> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::format(0, "missing PCONVMDL magic"));
    }
    let version = bytes
        .get(8..12)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(8, "file ends before the version field"))?;
    if version != VERSION {
        return Err(Error::format(8, format!("version mismatch: expected {VERSION}, found {version}")));
    }
    let m = read_u64(bytes, 12, "manifest length")?;
    let manifest_end = HEADER.checked_add(m).filter(|&e| e <= bytes.len() as u64).ok_or_else(|| {
        Error::format(
            12,
            format!("length mismatch: manifest length is {m} bytes, only {} follow", bytes.len() as u64 - HEADER),
        )
    })?;
    let b = read_u64(bytes, manifest_end, "blob length")?;
    let blob_at = manifest_end + 8;
    let actual = bytes.len() as u64 - blob_at;
    if b != actual {
        return Err(Error::format(
            manifest_end,
            format!("length mismatch: blob length field says {b} bytes, file holds {actual}"),
        ));
    }
    decode(&bytes[HEADER as usize..manifest_end as usize], &bytes[blob_at as usize..], HEADER, blob_at)
}

pub fn write_model(path: &Path, model: &ModelGraph) -> Result<()> {
    write_file(path, &encode_container(model)?)
}

pub fn read_model(path: &Path) -> Result<ModelGraph> {
    decode_container(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pconv_core::prune::{magnitude_prune, KeepRatio, PruneConfig};
    use pconv_core::train::toy_cnn;

    fn pruned_toy() -> ModelGraph {
        let config = PruneConfig { keep_ratio: KeepRatio::new(1, 2).unwrap(), ..PruneConfig::default() };
        magnitude_prune(&toy_cnn(3), &config).unwrap()
    }

    #[test]
    fn container_round_trip_is_bitwise() {
        for model in [toy_cnn(1), pruned_toy()] {
            let bytes = encode_container(&model).unwrap();
            assert_eq!(&bytes[..8], MAGIC);
            let back = decode_container(&bytes).unwrap();
            assert_eq!(back, model);
            assert_eq!(encode_container(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn truncated_blob_names_expected_and_actual() {
        let mut bytes = encode_container(&pruned_toy()).unwrap();
        bytes.truncate(bytes.len() - 4);
        let err = decode_container(&bytes).unwrap_err();
        let Error::Format { offset, message } = &err else { panic!("{err}") };
        let m = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        assert_eq!(*offset, HEADER + m);
        let b = u64::from_le_bytes(bytes[(HEADER + m) as usize..][..8].try_into().unwrap());
        assert!(message.contains(&format!("says {b} bytes, file holds {}", b - 4)), "{message}");
    }

    #[test]
    fn short_blob_with_consistent_header_is_a_length_mismatch() {
        let (manifest, mut blob) = serialize_model(&pruned_toy()).unwrap();
        blob.truncate(blob.len() - 40);
        let err = deserialize_model(&manifest, &blob).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        assert!(err.to_string().contains("length mismatch"), "{err}");
    }

    #[test]
    fn version_mismatch_points_at_the_version_field() {
        let mut bytes = encode_container(&toy_cnn(0)).unwrap();
        bytes[8] = 2;
        let err = decode_container(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 8, .. }), "{err}");
        assert!(err.to_string().contains("expected 1, found 2"));
    }

    #[test]
    fn out_of_range_pattern_id_is_a_validation_error() {
        let (manifest, blob) = serialize_model(&pruned_toy()).unwrap();
        let mut json: serde_json::Value = serde_json::from_slice(&manifest).unwrap();
        let ids = json["layers"][0]["pattern_ids"].as_array_mut().unwrap();
        let k = ids.iter().position(|v| v != 255).unwrap();
        ids[k] = 4.into();
        let err = deserialize_model(&serde_json::to_vec(&json).unwrap(), &blob).unwrap_err();
        assert!(matches!(err, Error::Core(pconv_core::Error::Validation(_))), "{err}");
        assert!(err.to_string().contains("pattern id 4 out of range"), "{err}");
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(decode_container(b"").is_err());
        assert!(decode_container(b"PCONVMDL\x01\0\0\0").is_err());
        let mut bytes = encode_container(&toy_cnn(0)).unwrap();
        bytes[HEADER as usize] = b'[';
        assert!(matches!(decode_container(&bytes), Err(Error::Format { offset: HEADER, .. })));
    }
}
