//! Training for the toy zoo: extractors as autoencoder encoders, the
//! generator as an attribute-conditioned reconstructor, detectors on a
//! score/box grid. Per-image Adam steps, bitwise-deterministic per seed.

use super::{
    decode_detections, DetectorModel, ExtractorModel, GeneratorModel, LayerDesc, ZooError,
};
use crate::harness::SyntheticSample;
use crate::metrics::{detection_f1, psnr};
use crate::numerics::Tensor;
use crate::rng::{SeedStream, Stream};
use crate::zoo::{forward_stack, insert_params, stack_param_count};

/// Pixels per detector grid cell on a 64x64 input (8x8 grid).
pub const DETECTOR_STRIDE: usize = 8;
/// Backbone layers whose activations feed cross-detector fusion.
pub const DETECTOR_TAPS: [usize; 2] = [7, 10];
/// Held-out reconstruction quality the generator must reach.
pub const GENERATOR_PSNR_GATE: f32 = 25.0;
/// Held-out detection quality each detector must reach.
pub const DETECTOR_F1_GATE: f32 = 0.95;
/// Score threshold used when evaluating the detector gate.
pub const GATE_SCORE_THRESHOLD: f32 = 0.5;
/// IoU threshold used when evaluating the detector gate.
pub const GATE_IOU: f32 = 0.5;
/// Training target for the positive score cell. Kept below 1 so the
/// trained logits settle in sigmoid's responsive range instead of
/// saturating, which would flatten every score gradient downstream.
pub const POSITIVE_SCORE_TARGET: f32 = 0.9;

pub fn extractor_layers() -> Vec<LayerDesc> {
    vec![
        LayerDesc::Conv { in_ch: 3, out_ch: 8, k: 3, pad: 1 },
        LayerDesc::Relu,
        LayerDesc::AvgPool { k: 2 },
        LayerDesc::Conv { in_ch: 8, out_ch: 16, k: 3, pad: 1 },
        LayerDesc::Relu,
        LayerDesc::AvgPool { k: 2 },
        LayerDesc::Conv { in_ch: 16, out_ch: 16, k: 3, pad: 1 },
    ]
}

/// Mirror decoder used only while training extractors.
fn extractor_decoder_layers() -> Vec<LayerDesc> {
    vec![
        LayerDesc::Conv { in_ch: 16, out_ch: 16, k: 3, pad: 1 },
        LayerDesc::Relu,
        LayerDesc::Upsample { factor: 2 },
        LayerDesc::Conv { in_ch: 16, out_ch: 8, k: 3, pad: 1 },
        LayerDesc::Relu,
        LayerDesc::Upsample { factor: 2 },
        LayerDesc::Conv { in_ch: 8, out_ch: 3, k: 3, pad: 1 },
        LayerDesc::Sigmoid,
    ]
}

pub fn generator_encoder_layers() -> Vec<LayerDesc> {
    vec![
        LayerDesc::Conv { in_ch: 3, out_ch: 8, k: 3, pad: 1 },
        LayerDesc::Relu,
        LayerDesc::AvgPool { k: 2 },
        LayerDesc::Conv { in_ch: 8, out_ch: 16, k: 3, pad: 1 },
        LayerDesc::Relu,
        LayerDesc::AvgPool { k: 2 },
        LayerDesc::Conv { in_ch: 16, out_ch: 16, k: 3, pad: 1 },
        LayerDesc::Relu,
    ]
}

pub fn generator_decoder_layers() -> Vec<LayerDesc> {
    vec![
        LayerDesc::Conv { in_ch: 16, out_ch: 16, k: 3, pad: 1 },
        LayerDesc::Relu,
        LayerDesc::Upsample { factor: 2 },
        LayerDesc::Conv { in_ch: 16, out_ch: 8, k: 3, pad: 1 },
        LayerDesc::Relu,
        LayerDesc::Upsample { factor: 2 },
        LayerDesc::Conv { in_ch: 8, out_ch: 3, k: 3, pad: 1 },
        LayerDesc::Sigmoid,
    ]
}

pub fn detector_backbone_layers() -> Vec<LayerDesc> {
    vec![
        LayerDesc::Conv { in_ch: 3, out_ch: 8, k: 3, pad: 1 },
        LayerDesc::Relu,
        LayerDesc::AvgPool { k: 2 },
        LayerDesc::Conv { in_ch: 8, out_ch: 16, k: 3, pad: 1 },
        LayerDesc::Relu,
        LayerDesc::AvgPool { k: 2 },
        LayerDesc::Conv { in_ch: 16, out_ch: 16, k: 3, pad: 1 },
        LayerDesc::Relu,
        LayerDesc::AvgPool { k: 2 },
        LayerDesc::Conv { in_ch: 16, out_ch: 32, k: 3, pad: 1 },
        LayerDesc::Relu,
    ]
}

/// Epoch and subset budgets for each model family.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub extractor_count: usize,
    pub detector_count: usize,
    /// Training images per model family (clipped to the train split).
    pub extractor_images: usize,
    pub generator_images: usize,
    pub detector_images: usize,
    pub extractor_epochs: usize,
    pub generator_epochs: usize,
    pub detector_epochs: usize,
    pub extractor_lr: f32,
    pub generator_lr: f32,
    pub detector_lr: f32,
    /// Trailing samples held out of training for the quality gates.
    pub holdout: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            extractor_count: 2,
            detector_count: 2,
            extractor_images: 192,
            generator_images: 320,
            detector_images: 384,
            extractor_epochs: 4,
            generator_epochs: 10,
            detector_epochs: 12,
            extractor_lr: 2e-3,
            generator_lr: 2e-3,
            detector_lr: 2e-3,
            holdout: 64,
        }
    }
}

/// The trained victim models.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSet {
    pub extractors: Vec<ExtractorModel>,
    pub generator: GeneratorModel,
    pub detectors: Vec<DetectorModel>,
}

/// Holdout measurements backing the training quality gates.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelEvaluation {
    /// Mean reconstruction PSNR of the generator over the holdout split.
    pub generator_psnr: f32,
    /// Mean per-image detection F1 of each detector over the holdout split.
    pub detector_f1: Vec<f32>,
}

impl ModelEvaluation {
    /// Error for the first model below its gate, if any.
    pub fn enforce(&self) -> Result<(), ZooError> {
        if self.generator_psnr < GENERATOR_PSNR_GATE {
            return Err(ZooError::GateNotReached {
                model: "generator".into(),
                metric: "psnr",
                achieved: self.generator_psnr,
                required: GENERATOR_PSNR_GATE,
            });
        }
        for (di, &f1) in self.detector_f1.iter().enumerate() {
            if f1 < DETECTOR_F1_GATE {
                return Err(ZooError::GateNotReached {
                    model: format!("detector_{di}"),
                    metric: "f1",
                    achieved: f1,
                    required: DETECTOR_F1_GATE,
                });
            }
        }
        Ok(())
    }
}

/// Holdout-split quality measurements for a model set.
pub fn evaluate_models(
    models: &ModelSet,
    holdout: &[SyntheticSample],
) -> Result<ModelEvaluation, ZooError> {
    if holdout.is_empty() {
        return Err(ZooError::DatasetTooSmall);
    }
    let mut psnr_sum = 0.0f32;
    for s in holdout {
        let out = models.generator.generate(&s.image, s.attribute_label)?;
        psnr_sum += psnr(&out, &s.image).expect("same shape by construction");
    }
    let generator_psnr = psnr_sum / holdout.len() as f32;
    let mut detector_f1 = Vec::with_capacity(models.detectors.len());
    for det in &models.detectors {
        let mut f1_sum = 0.0f32;
        for s in holdout {
            let dets = decode_detections(det, &s.image, GATE_SCORE_THRESHOLD)?;
            f1_sum += detection_f1(&dets, &[s.face_box], GATE_IOU);
        }
        detector_f1.push(f1_sum / holdout.len() as f32);
    }
    Ok(ModelEvaluation {
        generator_psnr,
        detector_f1,
    })
}

fn he_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut SeedStream) -> Tensor {
    let limit = (6.0 / fan_in as f32).sqrt();
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.uniform_in(-limit, limit)).collect())
        .expect("length matches shape by construction")
}

/// Freshly initialized, untrained generator. Consumes encoder then decoder
/// parameters from `init`.
pub(crate) fn fresh_generator(init: &mut SeedStream) -> GeneratorModel {
    GeneratorModel {
        encoder: generator_encoder_layers(),
        decoder: generator_decoder_layers(),
        enc_params: init_stack(&generator_encoder_layers(), init),
        dec_params: init_stack(&generator_decoder_layers(), init),
        attr_embed: Tensor::zeros(vec![crate::harness::ATTRIBUTE_COUNT, 16]),
        attr_code_size: 16,
    }
}

/// Weight and zero bias for each conv, in layer order.
fn init_stack(layers: &[LayerDesc], rng: &mut SeedStream) -> Vec<Tensor> {
    let mut params = Vec::with_capacity(stack_param_count(layers));
    for l in layers {
        if let LayerDesc::Conv { in_ch, out_ch, k, .. } = *l {
            params.push(he_uniform(vec![out_ch, in_ch, k, k], in_ch * k * k, rng));
            params.push(Tensor::zeros(vec![out_ch]));
        }
    }
    params
}

/// Adam state; first and second moment tensors per parameter tensor.
pub(crate) struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

const ADAM_BETA1: f32 = 0.9;
const ADAM_BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

impl Adam {
    pub(crate) fn new(params: &[Tensor]) -> Self {
        let zeros =
            || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect::<Vec<_>>();
        Adam { m: zeros(), v: zeros(), t: 0 }
    }

    pub(crate) fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f32) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v))
        {
            for (((pv, &gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Shuffled index schedule for one epoch.
fn epoch_order(n: usize, rng: &mut SeedStream) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    idx
}

fn train_extractor(
    train: &[SyntheticSample],
    cfg: &TrainConfig,
    params: Vec<Tensor>,
    shuffle_rng: &mut SeedStream,
) -> Result<ExtractorModel, ZooError> {
    let enc_layers = extractor_layers();
    let dec_layers = extractor_decoder_layers();
    let enc_n = stack_param_count(&enc_layers);
    let mut params = params;
    let subset = cfg.extractor_images.min(train.len());
    let mut opt = Adam::new(&params);
    for _ in 0..cfg.extractor_epochs {
        for i in epoch_order(subset, shuffle_rng) {
            let image = &train[i].image;
            let (_, grads) = crate::numerics::evaluate_with_gradients(|tape| {
                let x = tape.constant(image.clone());
                let nodes = insert_params(tape, &params, true);
                let (code, _) = forward_stack(tape, x, &enc_layers, &nodes[..enc_n], &[])?;
                let (recon, _) = forward_stack(tape, code, &dec_layers, &nodes[enc_n..], &[])?;
                let loss = tape.mse(recon, x)?;
                Ok((loss, nodes))
            })?;
            opt.step(&mut params, &grads, cfg.extractor_lr);
        }
    }
    params.truncate(enc_n);
    Ok(ExtractorModel {
        layers: enc_layers,
        params,
        feature_shape: [16, 16, 16],
    })
}

/// Reconstruction training shared by initial generator training and the
/// attacker's fine-tuning: per-image MSE steps under Adam.
pub(crate) fn fit_generator(
    model: GeneratorModel,
    items: &[(&Tensor, usize)],
    epochs: usize,
    lr: f32,
    shuffle_rng: &mut SeedStream,
) -> Result<GeneratorModel, ZooError> {
    let mut model = model;
    let enc_n = model.enc_params.len();
    let dec_n = model.dec_params.len();
    let mut opt: Option<Adam> = None;
    for _ in 0..epochs {
        for i in epoch_order(items.len(), shuffle_rng) {
            let (image, attr) = items[i];
            let (_, grads) = crate::numerics::evaluate_with_gradients(|tape| {
                let x = tape.constant(image.clone());
                let (out, params) = model.forward(tape, x, attr, true)?;
                let loss = tape.mse(out, x)?;
                Ok((loss, params))
            })?;
            let mut flat: Vec<Tensor> = Vec::with_capacity(enc_n + dec_n + 1);
            flat.extend(model.enc_params.drain(..));
            flat.extend(model.dec_params.drain(..));
            flat.push(std::mem::replace(&mut model.attr_embed, Tensor::zeros(vec![1])));
            opt.get_or_insert_with(|| Adam::new(&flat)).step(&mut flat, &grads, lr);
            model.attr_embed = flat.pop().expect("embedding pushed above");
            model.dec_params = flat.split_off(enc_n);
            model.enc_params = flat;
        }
    }
    Ok(model)
}

fn train_generator(
    train: &[SyntheticSample],
    cfg: &TrainConfig,
    model: GeneratorModel,
    shuffle_rng: &mut SeedStream,
) -> Result<GeneratorModel, ZooError> {
    let subset = cfg.generator_images.min(train.len());
    let items: Vec<(&Tensor, usize)> =
        train[..subset].iter().map(|s| (&s.image, s.attribute_label)).collect();
    fit_generator(model, &items, cfg.generator_epochs, cfg.generator_lr, shuffle_rng)
}

/// Grid-cell regression targets for a face box, in sigmoid space.
fn detector_targets(sample: &SyntheticSample) -> (usize, [f32; 4]) {
    let grid = crate::harness::IMAGE_SIDE / DETECTOR_STRIDE;
    let (cx, cy) = sample.face_box.center();
    let gx = ((cx / DETECTOR_STRIDE as f32) as usize).min(grid - 1);
    let gy = ((cy / DETECTOR_STRIDE as f32) as usize).min(grid - 1);
    let cell = gy * grid + gx;
    let img = crate::harness::IMAGE_SIDE as f32;
    let tx = cx / DETECTOR_STRIDE as f32 - gx as f32;
    let ty = cy / DETECTOR_STRIDE as f32 - gy as f32;
    let tw = (sample.face_box.x_max - sample.face_box.x_min) / img;
    let th = (sample.face_box.y_max - sample.face_box.y_min) / img;
    (cell, [tx, ty, tw, th])
}

fn train_detector(
    train: &[SyntheticSample],
    cfg: &TrainConfig,
    model: DetectorModel,
    shuffle_rng: &mut SeedStream,
) -> Result<DetectorModel, ZooError> {
    let mut model = model;
    let grid = crate::harness::IMAGE_SIDE / DETECTOR_STRIDE;
    let cells = grid * grid;
    let subset = cfg.detector_images.min(train.len());
    let bb_n = model.backbone_params.len();
    let mut opt: Option<Adam> = None;
    for _ in 0..cfg.detector_epochs {
        for i in epoch_order(subset, shuffle_rng) {
            let sample = &train[i];
            let (cell, box_t) = detector_targets(sample);
            let mut score_target = Tensor::zeros(vec![1, grid, grid]);
            score_target.data_mut()[cell] = POSITIVE_SCORE_TARGET;
            let (_, grads) = crate::numerics::evaluate_with_gradients(|tape| {
                let x = tape.constant(sample.image.clone());
                let (fwd, params) = model.forward(tape, x, true)?;
                let target = tape.constant(score_target.clone());
                let score_loss = tape.mse(fwd.score_map, target)?;
                // Extra weight on the positive cell so one hot cell is not
                // drowned out by the 63 background cells.
                let s_pos = tape.gather(fwd.score_map, vec![cell])?;
                let miss = tape.add_scalar(s_pos, -POSITIVE_SCORE_TARGET)?;
                let sq = tape.mul(miss, miss)?;
                let pos_loss = tape.mean_all(sq)?;
                let box_sig = tape.sigmoid(fwd.box_map)?;
                let picked = tape.gather(
                    box_sig,
                    vec![cell, cells + cell, 2 * cells + cell, 3 * cells + cell],
                )?;
                let want = tape.constant(Tensor::from_vec(vec![4], box_t.to_vec())?);
                let box_loss = tape.mse(picked, want)?;
                let weighted_pos = tape.mul_scalar(pos_loss, 0.5)?;
                let partial = tape.add(score_loss, weighted_pos)?;
                let loss = tape.add(partial, box_loss)?;
                Ok((loss, params))
            })?;
            let mut flat: Vec<Tensor> = Vec::with_capacity(bb_n + 4);
            flat.extend(model.backbone_params.drain(..));
            flat.push(std::mem::replace(&mut model.score_head.0, Tensor::zeros(vec![1])));
            flat.push(std::mem::replace(&mut model.score_head.1, Tensor::zeros(vec![1])));
            flat.push(std::mem::replace(&mut model.box_head.0, Tensor::zeros(vec![1])));
            flat.push(std::mem::replace(&mut model.box_head.1, Tensor::zeros(vec![1])));
            opt.get_or_insert_with(|| Adam::new(&flat)).step(&mut flat, &grads, cfg.detector_lr);
            model.box_head.1 = flat.pop().expect("pushed above");
            model.box_head.0 = flat.pop().expect("pushed above");
            model.score_head.1 = flat.pop().expect("pushed above");
            model.score_head.0 = flat.pop().expect("pushed above");
            model.backbone_params = flat;
        }
    }
    Ok(model)
}

/// Train the full zoo on `dataset`, holding out the trailing
/// `cfg.holdout` samples for the quality gates. Model initialization
/// consumes one random stream in a fixed order, so the same seed always
/// produces bitwise-identical models.
pub fn train_toy_models(
    dataset: &[SyntheticSample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ModelSet, ZooError> {
    let (models, eval) = train_toy_models_unchecked(dataset, cfg, seed)?;
    eval.enforce()?;
    Ok(models)
}

/// [`train_toy_models`] without enforcing the quality gates; returns the
/// holdout evaluation alongside the models so callers can report it.
pub fn train_toy_models_unchecked(
    dataset: &[SyntheticSample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelSet, ModelEvaluation), ZooError> {
    if dataset.is_empty() || dataset.len() <= cfg.holdout {
        return Err(ZooError::DatasetTooSmall);
    }
    let (train, holdout) = dataset.split_at(dataset.len() - cfg.holdout);

    // All initial parameters come from one stream in a fixed order
    // (extractors, generator, detectors) regardless of training order.
    let mut init = SeedStream::new(seed, Stream::ModelInit);
    let ext_inits: Vec<Vec<Tensor>> = (0..cfg.extractor_count)
        .map(|_| {
            let mut p = init_stack(&extractor_layers(), &mut init);
            p.extend(init_stack(&extractor_decoder_layers(), &mut init));
            p
        })
        .collect();
    let gen_init = fresh_generator(&mut init);
    let det_inits: Vec<DetectorModel> = (0..cfg.detector_count)
        .map(|_| {
            let backbone_params = init_stack(&detector_backbone_layers(), &mut init);
            let score_w = he_uniform(vec![1, 32, 1, 1], 32, &mut init);
            // Bias the score head negative so an untrained detector stays
            // quiet instead of firing on every cell.
            let score_b = Tensor::from_vec(vec![1], vec![-2.0]).expect("static shape");
            let box_w = he_uniform(vec![4, 32, 1, 1], 32, &mut init);
            let box_b = Tensor::zeros(vec![4]);
            DetectorModel {
                backbone: detector_backbone_layers(),
                backbone_params,
                score_head: (score_w, score_b),
                box_head: (box_w, box_b),
                stride: DETECTOR_STRIDE,
                tap_layers: DETECTOR_TAPS.to_vec(),
            }
        })
        .collect();

    // Each model owns an offset shuffle stream, so its schedule does not
    // depend on how many siblings trained before it.
    let mut ordinal = 0u64;
    let mut next_shuffle = || {
        let s = SeedStream::new(seed.wrapping_add(ordinal), Stream::TrainShuffle);
        ordinal += 1;
        s
    };

    let mut extractors = Vec::with_capacity(cfg.extractor_count);
    for p in ext_inits {
        let mut rng = next_shuffle();
        extractors.push(train_extractor(train, cfg, p, &mut rng)?);
    }
    let mut rng = next_shuffle();
    let generator = train_generator(train, cfg, gen_init, &mut rng)?;
    let mut detectors = Vec::with_capacity(cfg.detector_count);
    for d in det_inits {
        let mut rng = next_shuffle();
        detectors.push(train_detector(train, cfg, d, &mut rng)?);
    }

    let models = ModelSet {
        extractors,
        generator,
        detectors,
    };
    let eval = evaluate_models(&models, holdout)?;
    Ok((models, eval))
}
