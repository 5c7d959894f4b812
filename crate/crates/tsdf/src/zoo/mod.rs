//! Toy victim models: feature extractors, a face generator, and anchor-grid
//! face detectors, all small conv nets over 64x64 RGB in [0,1]. They stand
//! in for the deepfake tooling an attacker would run on scraped images.

mod io;
mod train;

pub use io::{load_model, save_model, Model, FORMAT_VERSION, MODEL_MAGIC};
pub(crate) use train::fit_generator;
#[cfg(test)]
pub(crate) use train::fresh_generator;
pub use train::{
    detector_backbone_layers, evaluate_models, extractor_layers, generator_decoder_layers,
    generator_encoder_layers, train_toy_models, train_toy_models_unchecked, ModelEvaluation,
    ModelSet, TrainConfig, DETECTOR_F1_GATE, DETECTOR_STRIDE, DETECTOR_TAPS, GATE_IOU,
    GATE_SCORE_THRESHOLD, GENERATOR_PSNR_GATE,
};

use crate::numerics::{NodeId, NumericsError, Tape, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ZooError {
    #[error("numerics failure: {0}")]
    Numerics(#[from] NumericsError),
    #[error("dataset is empty or smaller than the holdout split")]
    DatasetTooSmall,
    #[error("{model}: {metric} gate not reached, achieved {achieved:.4} < required {required:.4}")]
    GateNotReached {
        model: String,
        metric: &'static str,
        achieved: f32,
        required: f32,
    },
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file parse error at byte {offset}: {what}")]
    Format { offset: u64, what: String },
    #[error("unsupported model file version {found} (supported: {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },
    #[error("descriptor does not match payload: {0}")]
    Descriptor(String),
}

/// One feed-forward layer of a toy net.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerDesc {
    Conv {
        in_ch: usize,
        out_ch: usize,
        k: usize,
        pad: usize,
    },
    Relu,
    Sigmoid,
    AvgPool {
        k: usize,
    },
    MaxPool {
        k: usize,
    },
    Upsample {
        factor: usize,
    },
    /// Rearrange each factor-by-factor block into channels. Downsamples
    /// without averaging, so fine detail survives to the deeper layers.
    SpaceToDepth {
        factor: usize,
    },
}

impl LayerDesc {
    /// Number of parameter tensors this layer owns (weight + bias for conv).
    pub fn param_count(&self) -> usize {
        match self {
            LayerDesc::Conv { .. } => 2,
            _ => 0,
        }
    }
}

/// Total parameter tensors for a layer stack.
pub fn stack_param_count(layers: &[LayerDesc]) -> usize {
    layers.iter().map(|l| l.param_count()).sum()
}

/// Insert parameter tensors into a tape, as leaves when `trainable`.
pub fn insert_params(tape: &mut Tape, params: &[Tensor], trainable: bool) -> Vec<NodeId> {
    params
        .iter()
        .map(|p| {
            if trainable {
                tape.leaf(p.clone())
            } else {
                tape.constant(p.clone())
            }
        })
        .collect()
}

/// Run a layer stack on the tape. `param_nodes` must hold the stack's conv
/// parameters in order; `taps` lists layer indices whose activation to
/// capture.
pub fn forward_stack(
    tape: &mut Tape,
    mut x: NodeId,
    layers: &[LayerDesc],
    param_nodes: &[NodeId],
    taps: &[usize],
) -> Result<(NodeId, Vec<NodeId>), NumericsError> {
    let mut p = 0usize;
    let mut captured = Vec::new();
    for (li, layer) in layers.iter().enumerate() {
        x = match *layer {
            LayerDesc::Conv { pad, .. } => {
                let w = param_nodes[p];
                let b = param_nodes[p + 1];
                p += 2;
                tape.conv2d(x, w, b, pad)?
            }
            LayerDesc::Relu => tape.relu(x)?,
            LayerDesc::Sigmoid => tape.sigmoid(x)?,
            LayerDesc::AvgPool { k } => tape.avg_pool(x, k)?,
            LayerDesc::MaxPool { k } => tape.max_pool(x, k)?,
            LayerDesc::Upsample { factor } => tape.upsample_nearest(x, factor)?,
            LayerDesc::SpaceToDepth { factor } => tape.space_to_depth(x, factor)?,
        };
        if taps.contains(&li) {
            captured.push(x);
        }
    }
    Ok((x, captured))
}

// ── extractor ──

/// Encoder trained on the same data distribution as the generator; its
/// feature map is what the interruption stage attacks.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorModel {
    pub layers: Vec<LayerDesc>,
    pub params: Vec<Tensor>,
    pub feature_shape: [usize; 3],
}

impl ExtractorModel {
    /// Feature map of `image` with the model's parameters held constant.
    pub fn features(&self, tape: &mut Tape, image: NodeId) -> Result<NodeId, NumericsError> {
        let nodes = insert_params(tape, &self.params, false);
        let (out, _) = forward_stack(tape, image, &self.layers, &nodes, &[])?;
        debug_assert_eq!(tape.value(out).shape(), self.feature_shape);
        Ok(out)
    }

    /// Feature map of a plain image tensor.
    pub fn features_of(&self, image: &Tensor) -> Result<Tensor, NumericsError> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let f = self.features(&mut tape, x)?;
        Ok(tape.value(f).clone())
    }
}

// ── generator ──

/// Encoder-decoder face editor with a per-attribute bottleneck bias; the
/// stand-in for a deepfake generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    pub encoder: Vec<LayerDesc>,
    pub decoder: Vec<LayerDesc>,
    pub enc_params: Vec<Tensor>,
    pub dec_params: Vec<Tensor>,
    /// One bottleneck bias row per attribute, shape (attrs, code size).
    pub attr_embed: Tensor,
    pub attr_code_size: usize,
}

impl GeneratorModel {
    pub fn attr_count(&self) -> usize {
        self.attr_embed.shape()[0]
    }

    /// Build the full forward pass on a tape. `trainable` also makes the
    /// parameters leaves, returned in order (encoder, decoder, embedding).
    pub fn forward(
        &self,
        tape: &mut Tape,
        image: NodeId,
        attr: usize,
        trainable: bool,
    ) -> Result<(NodeId, Vec<NodeId>), NumericsError> {
        assert!(attr < self.attr_count(), "attribute {attr} out of range");
        let enc_nodes = insert_params(tape, &self.enc_params, trainable);
        let dec_nodes = insert_params(tape, &self.dec_params, trainable);
        let embed = if trainable {
            tape.leaf(self.attr_embed.clone())
        } else {
            tape.constant(self.attr_embed.clone())
        };
        let (bottleneck, _) = forward_stack(tape, image, &self.encoder, &enc_nodes, &[])?;
        let c = self.attr_code_size;
        let row = tape.gather(embed, (attr * c..(attr + 1) * c).collect())?;
        let (_, bh, bw) = tape.value(bottleneck).chw();
        let bias = tape.broadcast_channel(row, bh, bw)?;
        let biased = tape.add(bottleneck, bias)?;
        let (out, _) = forward_stack(tape, biased, &self.decoder, &dec_nodes, &[])?;
        let mut params = enc_nodes;
        params.extend(dec_nodes);
        params.push(embed);
        Ok((out, params))
    }

    /// Generate from a plain image tensor.
    pub fn generate(&self, image: &Tensor, attr: usize) -> Result<Tensor, NumericsError> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let (out, _) = self.forward(&mut tape, x, attr, false)?;
        Ok(tape.value(out).clone())
    }
}

// ── detector ──

/// Axis-aligned box in pixel corner coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPx {
    pub x_min: f32,
    pub y_min: f32,
    pub x_max: f32,
    pub y_max: f32,
}

impl BoxPx {
    pub fn area(&self) -> f32 {
        (self.x_max - self.x_min).max(0.0) * (self.y_max - self.y_min).max(0.0)
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    /// Intersection over union; 0 when the union is empty.
    pub fn iou(&self, other: &BoxPx) -> f32 {
        let ix = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let iy = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// One scored detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub score: f32,
    pub bbox: BoxPx,
}

/// Grid face detector: conv backbone, sigmoid score head (1 channel) and
/// box head (4 channels: center offset x/y, width, height) on a G x G grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub backbone: Vec<LayerDesc>,
    pub backbone_params: Vec<Tensor>,
    /// 1x1 conv weight and bias producing the score channel.
    pub score_head: (Tensor, Tensor),
    /// 1x1 conv weight and bias producing the four box channels.
    pub box_head: (Tensor, Tensor),
    pub stride: usize,
    /// Backbone layer indices whose activations feed feature fusion.
    pub tap_layers: Vec<usize>,
}

/// Tape nodes of one detector forward pass.
pub struct DetectorForward {
    /// Post-sigmoid score map, shape (1, G, G).
    pub score_map: NodeId,
    /// Raw box parameter map, shape (4, G, G).
    pub box_map: NodeId,
    /// Activations at the detector's tap layers.
    pub taps: Vec<NodeId>,
}

impl DetectorModel {
    /// Build the detector forward pass; parameters are leaves when
    /// `trainable`, and returned after the forward struct.
    pub fn forward(
        &self,
        tape: &mut Tape,
        image: NodeId,
        trainable: bool,
    ) -> Result<(DetectorForward, Vec<NodeId>), NumericsError> {
        let bb_nodes = insert_params(tape, &self.backbone_params, trainable);
        let mk = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let sw = mk(tape, &self.score_head.0);
        let sb = mk(tape, &self.score_head.1);
        let bw = mk(tape, &self.box_head.0);
        let bb = mk(tape, &self.box_head.1);
        let (trunk, taps) = forward_stack(tape, image, &self.backbone, &bb_nodes, &self.tap_layers)?;
        let score_raw = tape.conv2d(trunk, sw, sb, 0)?;
        let score_map = tape.sigmoid(score_raw)?;
        let box_map = tape.conv2d(trunk, bw, bb, 0)?;
        let mut params = bb_nodes;
        params.extend([sw, sb, bw, bb]);
        Ok((
            DetectorForward {
                score_map,
                box_map,
                taps,
            },
            params,
        ))
    }

    /// Score and box maps plus tap activations for a plain image tensor.
    pub fn maps_of(&self, image: &Tensor) -> Result<(Tensor, Tensor, Vec<Tensor>), NumericsError> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let (fwd, _) = self.forward(&mut tape, x, false)?;
        let taps = fwd.taps.iter().map(|&t| tape.value(t).clone()).collect();
        Ok((
            tape.value(fwd.score_map).clone(),
            tape.value(fwd.box_map).clone(),
            taps,
        ))
    }
}

/// IoU threshold used for suppression everywhere in the crate.
pub const NMS_IOU: f32 = 0.5;

/// Greedy non-maximum suppression: keep by descending score, drop any box
/// overlapping a kept box at IoU >= `iou_threshold`. Ties keep input order.
pub fn nms(mut detections: Vec<Detection>, iou_threshold: f32) -> Vec<Detection> {
    detections.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    let mut kept: Vec<Detection> = Vec::new();
    for d in detections {
        if kept.iter().all(|k| k.bbox.iou(&d.bbox) < iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

/// Decode score/box maps into detections above `threshold`, boxes clipped
/// to the image square, then NMS. Returns (kept cell index, detection)
/// sorted by descending score.
pub fn decode_maps(
    score_map: &Tensor,
    box_map: &Tensor,
    stride: usize,
    threshold: f32,
) -> Vec<(usize, Detection)> {
    let (_, gh, gw) = score_map.chw();
    let cells = gh * gw;
    let img = (gh * stride) as f32;
    let scores = score_map.data();
    let boxes = box_map.data();
    let sig = |v: f32| 1.0 / (1.0 + (-v).exp());
    let mut raw: Vec<(usize, Detection)> = Vec::new();
    for gy in 0..gh {
        for gx in 0..gw {
            let i = gy * gw + gx;
            let s = scores[i];
            if s < threshold {
                continue;
            }
            let cx = (gx as f32 + sig(boxes[i])) * stride as f32;
            let cy = (gy as f32 + sig(boxes[cells + i])) * stride as f32;
            let w = sig(boxes[2 * cells + i]) * img;
            let h = sig(boxes[3 * cells + i]) * img;
            let bbox = BoxPx {
                x_min: (cx - w / 2.0).clamp(0.0, img),
                y_min: (cy - h / 2.0).clamp(0.0, img),
                x_max: (cx + w / 2.0).clamp(0.0, img),
                y_max: (cy + h / 2.0).clamp(0.0, img),
            };
            raw.push((i, Detection { score: s, bbox }));
        }
    }
    raw.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap_or(std::cmp::Ordering::Equal));
    let mut kept: Vec<(usize, Detection)> = Vec::new();
    for (i, d) in raw {
        if kept.iter().all(|(_, k)| k.bbox.iou(&d.bbox) < NMS_IOU) {
            kept.push((i, d));
        }
    }
    kept
}

/// Run a detector on an image and decode its detections.
pub fn decode_detections(
    detector: &DetectorModel,
    image: &Tensor,
    threshold: f32,
) -> Result<Vec<Detection>, NumericsError> {
    let (score_map, box_map, _) = detector.maps_of(image)?;
    Ok(decode_maps(&score_map, &box_map, detector.stride, threshold)
        .into_iter()
        .map(|(_, d)| d)
        .collect())
}
