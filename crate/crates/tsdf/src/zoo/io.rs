//! Model file format: magic "TSDM", version, a JSON descriptor naming the
//! model kind and layer stack, then raw little-endian f32 tensor payloads.
//! Loading is bit-exact with saving and rejects malformed files with the
//! byte offset of the problem.

use super::{DetectorModel, ExtractorModel, GeneratorModel, LayerDesc, ZooError};
use crate::numerics::Tensor;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MODEL_MAGIC: [u8; 4] = *b"TSDM";
pub const FORMAT_VERSION: u16 = 1;

/// Dimension sanity cap: no toy tensor axis is anywhere near this.
const MAX_DIM: u32 = 1 << 20;
const MAX_RANK: u8 = 4;
const MAX_DESCRIPTOR_LEN: u32 = 1 << 20;

/// Any model the zoo can persist.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Extractor(ExtractorModel),
    Generator(GeneratorModel),
    Detector(DetectorModel),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum Descriptor {
    Extractor {
        layers: Vec<LayerDesc>,
        feature_shape: [usize; 3],
    },
    Generator {
        encoder: Vec<LayerDesc>,
        decoder: Vec<LayerDesc>,
        attr_count: usize,
        attr_code_size: usize,
    },
    Detector {
        backbone: Vec<LayerDesc>,
        stride: usize,
        tap_layers: Vec<usize>,
    },
}

impl Model {
    fn descriptor(&self) -> Descriptor {
        match self {
            Model::Extractor(m) => Descriptor::Extractor {
                layers: m.layers.clone(),
                feature_shape: m.feature_shape,
            },
            Model::Generator(m) => Descriptor::Generator {
                encoder: m.encoder.clone(),
                decoder: m.decoder.clone(),
                attr_count: m.attr_count(),
                attr_code_size: m.attr_code_size,
            },
            Model::Detector(m) => Descriptor::Detector {
                backbone: m.backbone.clone(),
                stride: m.stride,
                tap_layers: m.tap_layers.clone(),
            },
        }
    }

    /// Parameter tensors in serialization order.
    fn tensors(&self) -> Vec<&Tensor> {
        match self {
            Model::Extractor(m) => m.params.iter().collect(),
            Model::Generator(m) => {
                let mut out: Vec<&Tensor> = m.enc_params.iter().collect();
                out.extend(m.dec_params.iter());
                out.push(&m.attr_embed);
                out
            }
            Model::Detector(m) => {
                let mut out: Vec<&Tensor> = m.backbone_params.iter().collect();
                out.extend([
                    &m.score_head.0,
                    &m.score_head.1,
                    &m.box_head.0,
                    &m.box_head.1,
                ]);
                out
            }
        }
    }
}

/// Write `model` to `path`. Same model bits in, same file bytes out.
pub fn save_model(model: &Model, path: &Path) -> Result<(), ZooError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MODEL_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let descriptor = serde_json::to_string(&model.descriptor())
        .map_err(|e| ZooError::Descriptor(e.to_string()))?;
    let dlen = u32::try_from(descriptor.len())
        .map_err(|_| ZooError::Descriptor("descriptor too large".into()))?;
    w.write_all(&dlen.to_le_bytes())?;
    w.write_all(descriptor.as_bytes())?;
    for t in model.tensors() {
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| ZooError::Descriptor("tensor rank exceeds format".into()))?;
        w.write_all(&[rank])?;
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| ZooError::Descriptor("tensor dim exceeds format".into()))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reader that remembers how far it has consumed, so parse errors can say
/// where the file went wrong.
struct TrackedReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> TrackedReader<R> {
    fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    fn fail(&self, what: impl Into<String>) -> ZooError {
        ZooError::Format {
            offset: self.offset,
            what: what.into(),
        }
    }

    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<(), ZooError> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                self.fail(format!("file truncated while reading {what}"))
            } else {
                ZooError::Io(e)
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u8(&mut self, what: &str) -> Result<u8, ZooError> {
        let mut b = [0u8; 1];
        self.read_exact(&mut b, what)?;
        Ok(b[0])
    }

    fn read_u16(&mut self, what: &str) -> Result<u16, ZooError> {
        let mut b = [0u8; 2];
        self.read_exact(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn read_u32(&mut self, what: &str) -> Result<u32, ZooError> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_tensor(&mut self, expect_shape: Option<&[usize]>) -> Result<Tensor, ZooError> {
        let rank = self.read_u8("tensor rank")?;
        if rank == 0 || rank > MAX_RANK {
            return Err(self.fail(format!("tensor rank {rank} out of range 1..={MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let d = self.read_u32("tensor dim")?;
            if d == 0 || d > MAX_DIM {
                return Err(self.fail(format!("tensor dim {d} out of range 1..={MAX_DIM}")));
            }
            shape.push(d as usize);
        }
        if let Some(expect) = expect_shape {
            if shape != expect {
                return Err(self.fail(format!(
                    "tensor shape {shape:?} does not match descriptor, expected {expect:?}"
                )));
            }
        }
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        self.read_exact(&mut bytes, "tensor payload")?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Tensor::from_vec(shape, data).expect("length matches shape by construction"))
    }
}

/// Expected parameter shapes for one layer stack, in (weight, bias) pairs.
fn conv_shapes(layers: &[LayerDesc]) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for l in layers {
        if let LayerDesc::Conv { in_ch, out_ch, k, .. } = *l {
            out.push(vec![out_ch, in_ch, k, k]);
            out.push(vec![out_ch]);
        }
    }
    out
}

/// Read a model from `path`, verifying magic, version, descriptor
/// consistency, and that no trailing bytes follow the last tensor.
pub fn load_model(path: &Path) -> Result<Model, ZooError> {
    let mut r = TrackedReader::new(BufReader::new(File::open(path)?));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic, "magic")?;
    if magic != MODEL_MAGIC {
        return Err(ZooError::Format {
            offset: 0,
            what: format!("bad magic {magic:?}, expected {MODEL_MAGIC:?}"),
        });
    }
    let version = r.read_u16("version")?;
    if version != FORMAT_VERSION {
        return Err(ZooError::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let dlen = r.read_u32("descriptor length")?;
    if dlen > MAX_DESCRIPTOR_LEN {
        return Err(r.fail(format!("descriptor length {dlen} exceeds cap")));
    }
    let mut dbytes = vec![0u8; dlen as usize];
    r.read_exact(&mut dbytes, "descriptor")?;
    let descriptor_offset = r.offset - dlen as u64;
    let descriptor: Descriptor = serde_json::from_slice(&dbytes).map_err(|e| ZooError::Format {
        offset: descriptor_offset,
        what: format!("descriptor is not valid JSON for a known model kind: {e}"),
    })?;

    let model = match descriptor {
        Descriptor::Extractor {
            layers,
            feature_shape,
        } => {
            let mut params = Vec::new();
            for shape in conv_shapes(&layers) {
                params.push(r.read_tensor(Some(&shape))?);
            }
            Model::Extractor(ExtractorModel {
                layers,
                params,
                feature_shape,
            })
        }
        Descriptor::Generator {
            encoder,
            decoder,
            attr_count,
            attr_code_size,
        } => {
            let mut enc_params = Vec::new();
            for shape in conv_shapes(&encoder) {
                enc_params.push(r.read_tensor(Some(&shape))?);
            }
            let mut dec_params = Vec::new();
            for shape in conv_shapes(&decoder) {
                dec_params.push(r.read_tensor(Some(&shape))?);
            }
            let attr_embed = r.read_tensor(Some(&[attr_count, attr_code_size]))?;
            Model::Generator(GeneratorModel {
                encoder,
                decoder,
                enc_params,
                dec_params,
                attr_embed,
                attr_code_size,
            })
        }
        Descriptor::Detector {
            backbone,
            stride,
            tap_layers,
        } => {
            if stride == 0 {
                return Err(r.fail("detector stride must be positive"));
            }
            if let Some(&bad) = tap_layers.iter().find(|&&t| t >= backbone.len()) {
                return Err(r.fail(format!(
                    "tap layer {bad} out of range for a {}-layer backbone",
                    backbone.len()
                )));
            }
            let trunk_ch = backbone
                .iter()
                .rev()
                .find_map(|l| match l {
                    LayerDesc::Conv { out_ch, .. } => Some(*out_ch),
                    _ => None,
                })
                .ok_or_else(|| r.fail("detector backbone has no conv layer"))?;
            let mut backbone_params = Vec::new();
            for shape in conv_shapes(&backbone) {
                backbone_params.push(r.read_tensor(Some(&shape))?);
            }
            let score_w = r.read_tensor(Some(&[1, trunk_ch, 1, 1]))?;
            let score_b = r.read_tensor(Some(&[1]))?;
            let box_w = r.read_tensor(Some(&[4, trunk_ch, 1, 1]))?;
            let box_b = r.read_tensor(Some(&[4]))?;
            Model::Detector(DetectorModel {
                backbone,
                backbone_params,
                score_head: (score_w, score_b),
                box_head: (box_w, box_b),
                stride,
                tap_layers,
            })
        }
    };

    let mut trailing = [0u8; 1];
    match r.inner.read(&mut trailing)? {
        0 => Ok(model),
        _ => Err(ZooError::Format {
            offset: r.offset,
            what: "trailing bytes after last tensor".into(),
        }),
    }
}
