//! Stage two: a poisoning perturbation crafted inside the low-intensity
//! mask by gradient descent. The objective pushes fused detector features
//! toward the negated clean features and suppresses decoded detections, so
//! detectors fine-tuned on protected crops degrade while clean accuracy is
//! untouched.

use crate::numerics::{evaluate_with_gradients, kernels, NodeId, NumericsError, Tape, Tensor};
use crate::rng::{SeedStream, Stream};
use crate::runtime::map_ordered;
use crate::zoo::{decode_maps, DetectorForward, DetectorModel};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PoisonError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("numerics failure: {0}")]
    Numerics(#[from] NumericsError),
    #[error("crafting aborted at iteration {iteration}: {source}")]
    Aborted {
        iteration: usize,
        source: NumericsError,
    },
}

/// Hyperparameters of the poisoning stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PoisonConfig {
    /// Descent step size.
    pub eta: f32,
    /// Margin added to the negated clean features inside the mask.
    pub nu: f32,
    /// L-infinity budget shared with the disruption stage.
    pub epsilon: f32,
    /// Per-detector mixing weights; must sum to one.
    pub fusion_weights: Vec<f32>,
    /// Per-tap-layer weights in the feature loss.
    pub layer_weights: Vec<f32>,
    pub iterations: usize,
    /// Mask decay rate; steeper values concentrate the poison where the
    /// disruption pattern is weakest.
    pub beta: f32,
    /// Mask support threshold on |W0|; zero disables poisoning entirely.
    pub tau: f32,
    /// Decode threshold while crafting, deliberately below the evaluation
    /// threshold so score gradients survive as detections fade.
    pub score_threshold: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PoisonConfig {
    fn default() -> Self {
        Self {
            eta: 0.001,
            nu: 1.0,
            epsilon: 0.05,
            fusion_weights: vec![0.5, 0.5],
            layer_weights: vec![0.5, 0.5],
            iterations: 20,
            beta: 5.0,
            tau: 0.3,
            score_threshold: 0.1,
            batch_size: 96,
            seed: 0,
        }
    }
}

impl PoisonConfig {
    pub fn validate(&self) -> Result<(), PoisonError> {
        let fail = |what: &str| Err(PoisonError::Precondition(what.into()));
        if !(self.eta > 0.0) {
            return fail("eta must be positive");
        }
        if !self.nu.is_finite() {
            return fail("nu must be finite");
        }
        if !(self.epsilon > 0.0) {
            return fail("epsilon must be positive");
        }
        if self.fusion_weights.is_empty() {
            return fail("fusion weights must not be empty");
        }
        let sum: f32 = self.fusion_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-4 {
            return fail("fusion weights must sum to one");
        }
        if self.layer_weights.is_empty() || self.layer_weights.iter().any(|w| !(*w >= 0.0)) {
            return fail("layer weights must be nonnegative");
        }
        if self.iterations < 1 {
            return fail("iterations must be at least 1");
        }
        if !(self.beta >= 0.0) {
            return fail("beta must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return fail("tau must lie in [0, 1]");
        }
        if !(self.score_threshold > 0.0 && self.score_threshold < 1.0) {
            return fail("score threshold must lie in (0, 1)");
        }
        if self.batch_size < 1 {
            return fail("batch size must be at least 1");
        }
        Ok(())
    }
}

/// Detector features blended across the ensemble, one tensor per tap layer
/// at the first detector's tap shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeatures {
    pub layers: Vec<Tensor>,
}

fn check_ensemble(detectors: &[DetectorModel], cfg: &PoisonConfig) -> Result<(), PoisonError> {
    if detectors.is_empty() {
        return Err(PoisonError::Precondition("detector list must not be empty".into()));
    }
    let taps = detectors[0].tap_layers.len();
    if let Some(d) = detectors.iter().find(|d| d.tap_layers.len() != taps) {
        return Err(PoisonError::Precondition(format!(
            "detector tap counts differ: {} vs {}",
            taps,
            d.tap_layers.len()
        )));
    }
    if cfg.fusion_weights.len() != detectors.len() {
        return Err(PoisonError::Precondition(format!(
            "{} fusion weights for {} detectors",
            cfg.fusion_weights.len(),
            detectors.len()
        )));
    }
    if cfg.layer_weights.len() != taps {
        return Err(PoisonError::Precondition(format!(
            "{} layer weights for {} tap layers",
            cfg.layer_weights.len(),
            taps
        )));
    }
    Ok(())
}

/// Blend tap activations across detectors on the tape: each detector's map
/// is resampled to the first detector's tap shape, then summed with the
/// fusion weights.
fn fuse_taps(
    tape: &mut Tape,
    forwards: &[DetectorForward],
    weights: &[f32],
) -> Result<Vec<NodeId>, PoisonError> {
    let layer_count = forwards[0].taps.len();
    let ref_shapes: Vec<(usize, usize, usize)> = forwards[0]
        .taps
        .iter()
        .map(|&t| tape.value(t).chw())
        .collect();
    let mut fused = Vec::with_capacity(layer_count);
    for layer in 0..layer_count {
        let (rc, rh, rw) = ref_shapes[layer];
        let mut acc: Option<NodeId> = None;
        for (fwd, &alpha) in forwards.iter().zip(weights) {
            let tap = fwd.taps[layer];
            let (c, h, w) = tape.value(tap).chw();
            if c != rc {
                return Err(PoisonError::Precondition(format!(
                    "tap layer {layer} channel mismatch: {c} vs {rc}"
                )));
            }
            let aligned = if (h, w) == (rh, rw) {
                tap
            } else {
                tape.resize_bilinear(tap, rh, rw)?
            };
            let weighted = tape.mul_scalar(aligned, alpha)?;
            acc = Some(match acc {
                Some(prev) => tape.add(prev, weighted)?,
                None => weighted,
            });
        }
        fused.push(acc.expect("ensemble checked non-empty"));
    }
    Ok(fused)
}

/// Fused features plus raw score/box maps for an image outside any
/// gradient computation.
fn forward_values(
    image: &Tensor,
    detectors: &[DetectorModel],
    weights: &[f32],
) -> Result<(Vec<Tensor>, Vec<(Tensor, Tensor)>), PoisonError> {
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let mut forwards = Vec::with_capacity(detectors.len());
    for det in detectors {
        let (fwd, _) = det.forward(&mut tape, x, false)?;
        forwards.push(fwd);
    }
    let fused = fuse_taps(&mut tape, &forwards, weights)?;
    let layers = fused.iter().map(|&n| tape.value(n).clone()).collect();
    let maps = forwards
        .iter()
        .map(|f| (tape.value(f.score_map).clone(), tape.value(f.box_map).clone()))
        .collect();
    Ok((layers, maps))
}

/// Blend each detector's tap activations into one feature stack per layer.
pub fn fuse_detector_features(
    image: &Tensor,
    detectors: &[DetectorModel],
    cfg: &PoisonConfig,
) -> Result<FusedFeatures, PoisonError> {
    cfg.validate()?;
    check_ensemble(detectors, cfg)?;
    let (layers, _) = forward_values(image, detectors, &cfg.fusion_weights)?;
    Ok(FusedFeatures { layers })
}

/// Carry the pixel-space mask into a feature shape: collapse channels to
/// their mean, area-average onto the tap grid, then broadcast back over the
/// feature channels. Falls back to bilinear resampling when the spatial
/// ratio is not an integer.
pub fn mask_to_feature_space(mask: &Tensor, (c, h, w): (usize, usize, usize)) -> Tensor {
    let (mc, mh, mw) = mask.chw();
    let plane = mh * mw;
    let mut mean = vec![0.0f32; plane];
    for ch in 0..mc {
        for (m, &v) in mean.iter_mut().zip(&mask.data()[ch * plane..(ch + 1) * plane]) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= mc as f32;
    }
    let mut grid = vec![0.0f32; h * w];
    if mh % h == 0 && mw % w == 0 && mh / h == mw / w {
        kernels::avg_pool(&mean, (1, mh, mw), mh / h, &mut grid);
    } else {
        kernels::resize_bilinear(&mean, (1, mh, mw), (h, w), &mut grid);
    }
    let mut data = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        data.extend_from_slice(&grid);
    }
    Tensor::from_vec(vec![c, h, w], data).expect("length matches shape by construction")
}

/// Distance of the perturbed fused features from the poisoning target
/// -clean + nu * mask, as a weighted sum of squares over tap layers.
pub fn poison_feature_loss(
    fused_pert: &FusedFeatures,
    fused_clean: &FusedFeatures,
    mask_feats: &[Tensor],
    cfg: &PoisonConfig,
) -> Result<f32, PoisonError> {
    let layers = fused_pert.layers.len();
    if fused_clean.layers.len() != layers || mask_feats.len() != layers {
        return Err(PoisonError::Precondition(format!(
            "layer counts differ: {} perturbed, {} clean, {} masks",
            layers,
            fused_clean.layers.len(),
            mask_feats.len()
        )));
    }
    if cfg.layer_weights.len() != layers {
        return Err(PoisonError::Precondition(format!(
            "{} layer weights for {} layers",
            cfg.layer_weights.len(),
            layers
        )));
    }
    let mut total = 0.0f64;
    for (l, weight) in cfg.layer_weights.iter().enumerate() {
        let pert = &fused_pert.layers[l];
        let clean = &fused_clean.layers[l];
        let mask = &mask_feats[l];
        if pert.shape() != clean.shape() || pert.shape() != mask.shape() {
            return Err(PoisonError::Precondition(format!(
                "layer {l} shapes differ: {:?} vs {:?} vs {:?}",
                pert.shape(),
                clean.shape(),
                mask.shape()
            )));
        }
        let mut acc = 0.0f64;
        for ((&p, &c), &m) in pert.data().iter().zip(clean.data()).zip(mask.data()) {
            let d = p as f64 - (-(c as f64) + cfg.nu as f64 * m as f64);
            acc += d * d;
        }
        total += *weight as f64 * acc;
    }
    Ok(total as f32)
}

/// Suppression pressure on decoded detections: mean of squared score plus
/// the L1 distance from the box corners to the box's own center, measured
/// in image-side units so both terms live on the same O(1) scale. With
/// pixel units the box distance is tens of units against a score of at
/// most one, and descent spends the whole budget shrinking boxes while
/// the scores, the only thing the crop gate reads, never move. An empty
/// set scores zero; the attack already succeeded there.
pub fn poison_output_loss(detections: &[crate::zoo::Detection], image_side: f32) -> f32 {
    if detections.is_empty() {
        return 0.0;
    }
    let side = image_side as f64;
    let total: f64 = detections
        .iter()
        .map(|d| {
            let b = d.bbox;
            let cx = 0.5 * (b.x_min as f64 + b.x_max as f64);
            let cy = 0.5 * (b.y_min as f64 + b.y_max as f64);
            let l1 = (b.x_min as f64 - cx).abs()
                + (b.y_min as f64 - cy).abs()
                + (b.x_max as f64 - cx).abs()
                + (b.y_max as f64 - cy).abs();
            (d.score as f64) * (d.score as f64) + l1 / side
        })
        .sum();
    (total / detections.len() as f64) as f32
}

/// Per-layer poisoning targets -clean + nu * mask for one image.
fn target_features(clean: &[Tensor], mask_feats: &[Tensor], nu: f32) -> Vec<Tensor> {
    clean
        .iter()
        .zip(mask_feats)
        .map(|(c, m)| {
            let data = c
                .data()
                .iter()
                .zip(m.data())
                .map(|(&cv, &mv)| -cv + nu * mv)
                .collect();
            Tensor::from_vec(c.shape().to_vec(), data).expect("shapes match")
        })
        .collect()
}

/// Tape forward of the perturbed image through every detector plus the
/// fused tap stacks.
fn forward_fused_nodes(
    tape: &mut Tape,
    base: &Tensor,
    delta: NodeId,
    detectors: &[DetectorModel],
    weights: &[f32],
) -> Result<(Vec<DetectorForward>, Vec<NodeId>), NumericsError> {
    let b = tape.constant(base.clone());
    let x_hat = tape.add(b, delta)?;
    let mut forwards = Vec::with_capacity(detectors.len());
    for det in detectors {
        let (fwd, _) = det.forward(tape, x_hat, false)?;
        forwards.push(fwd);
    }
    let fused = match fuse_taps(tape, &forwards, weights) {
        Ok(f) => f,
        Err(PoisonError::Numerics(e)) => return Err(e),
        Err(e) => {
            return Err(NumericsError::InvalidArg {
                op: "poison objective",
                what: e.to_string(),
            })
        }
    };
    Ok((forwards, fused))
}

/// Decode the current maps of every detector and keep the surviving cell
/// indices. This is the per-step detection selection.
fn current_cells(
    tape: &Tape,
    detectors: &[DetectorModel],
    forwards: &[DetectorForward],
    threshold: f32,
) -> Vec<Vec<usize>> {
    detectors
        .iter()
        .zip(forwards)
        .map(|(det, fwd)| {
            decode_maps(tape.value(fwd.score_map), tape.value(fwd.box_map), det.stride, threshold)
                .into_iter()
                .map(|(cell, _)| cell)
                .collect()
        })
        .collect()
}

/// Combine the feature and output terms for one image at a fixed detection
/// selection; scores and box corners stay differentiable through the heads.
fn assemble_objective(
    tape: &mut Tape,
    detectors: &[DetectorModel],
    forwards: &[DetectorForward],
    fused: &[NodeId],
    targets: &[Tensor],
    selections: &[Vec<usize>],
    cfg: &PoisonConfig,
) -> Result<NodeId, NumericsError> {
    let mut j: Option<NodeId> = None;
    for ((&f, target), &weight) in fused.iter().zip(targets).zip(&cfg.layer_weights) {
        let t = tape.constant(target.clone());
        let diff = tape.sub(f, t)?;
        let sq = tape.mul(diff, diff)?;
        let sum = tape.sum_all(sq)?;
        let term = tape.mul_scalar(sum, weight)?;
        j = Some(match j {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let mut j = j.expect("ensemble checked non-empty");
    let mut terms: Vec<NodeId> = Vec::new();
    for ((det, fwd), cells_kept) in detectors.iter().zip(forwards).zip(selections) {
        let (_, gh, gw) = tape.value(fwd.score_map).chw();
        let cells = gh * gw;
        let img = (gh * det.stride) as f32;
        let stride = det.stride as f32;
        for &cell in cells_kept {
            let gx = (cell % gw) as f32;
            let gy = (cell / gw) as f32;
            let s = tape.gather(fwd.score_map, vec![cell])?;
            let s2 = tape.mul(s, s)?;
            let raw_x = tape.gather(fwd.box_map, vec![cell])?;
            let raw_y = tape.gather(fwd.box_map, vec![cells + cell])?;
            let raw_w = tape.gather(fwd.box_map, vec![2 * cells + cell])?;
            let raw_h = tape.gather(fwd.box_map, vec![3 * cells + cell])?;
            let sx = tape.sigmoid(raw_x)?;
            let sy = tape.sigmoid(raw_y)?;
            let sw = tape.sigmoid(raw_w)?;
            let sh = tape.sigmoid(raw_h)?;
            let cx0 = tape.mul_scalar(sx, stride)?;
            let cx = tape.add_scalar(cx0, gx * stride)?;
            let cy0 = tape.mul_scalar(sy, stride)?;
            let cy = tape.add_scalar(cy0, gy * stride)?;
            let half_w = tape.mul_scalar(sw, 0.5 * img)?;
            let half_h = tape.mul_scalar(sh, 0.5 * img)?;
            let x_min_raw = tape.sub(cx, half_w)?;
            let x_max_raw = tape.add(cx, half_w)?;
            let y_min_raw = tape.sub(cy, half_h)?;
            let y_max_raw = tape.add(cy, half_h)?;
            let x_min = tape.clamp(x_min_raw, 0.0, img)?;
            let x_max = tape.clamp(x_max_raw, 0.0, img)?;
            let y_min = tape.clamp(y_min_raw, 0.0, img)?;
            let y_max = tape.clamp(y_max_raw, 0.0, img)?;
            let span_x = tape.sub(x_max, x_min)?;
            let span_y = tape.sub(y_max, y_min)?;
            let span = tape.add(span_x, span_y)?;
            // Same image-side normalization as poison_output_loss, keeping
            // the box pull from drowning the score gradient.
            let span_n = tape.mul_scalar(span, 1.0 / img)?;
            terms.push(tape.add(s2, span_n)?);
        }
    }
    if !terms.is_empty() {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = tape.add(acc, t)?;
        }
        let mean = tape.mul_scalar(acc, 1.0 / terms.len() as f32)?;
        j = tape.add(j, mean)?;
    }
    Ok(j)
}

/// Build the combined objective for one image on the tape, selecting
/// detections from the current map values.
fn objective_node(
    tape: &mut Tape,
    base: &Tensor,
    delta: NodeId,
    detectors: &[DetectorModel],
    targets: &[Tensor],
    cfg: &PoisonConfig,
) -> Result<NodeId, NumericsError> {
    let (forwards, fused) = forward_fused_nodes(tape, base, delta, detectors, &cfg.fusion_weights)?;
    let selections = current_cells(tape, detectors, &forwards, cfg.score_threshold);
    assemble_objective(tape, detectors, &forwards, &fused, targets, &selections, cfg)
}

/// Cells each detector currently selects on an image, in decode order.
/// This is the detection set one crafting step holds fixed.
pub fn select_poison_cells(
    image: &Tensor,
    detectors: &[DetectorModel],
    threshold: f32,
) -> Result<Vec<Vec<usize>>, PoisonError> {
    let mut cells = Vec::with_capacity(detectors.len());
    for det in detectors {
        let (score_map, box_map, _) = det.maps_of(image)?;
        cells.push(
            decode_maps(&score_map, &box_map, det.stride, threshold)
                .into_iter()
                .map(|(cell, _)| cell)
                .collect(),
        );
    }
    Ok(cells)
}

/// Objective value and gradient of one crafting step: J at `base + delta`
/// against the clean image, with the detection selection pinned to
/// `selections`. This is exactly the function a descent step
/// differentiates, so its gradient admits a finite-difference check.
pub fn poison_step_objective(
    base: &Tensor,
    delta: &Tensor,
    image_clean: &Tensor,
    detectors: &[DetectorModel],
    mask: &Tensor,
    selections: &[Vec<usize>],
    cfg: &PoisonConfig,
) -> Result<(f32, Tensor), PoisonError> {
    cfg.validate()?;
    check_ensemble(detectors, cfg)?;
    if selections.len() != detectors.len() {
        return Err(PoisonError::Precondition(format!(
            "{} selections for {} detectors",
            selections.len(),
            detectors.len()
        )));
    }
    let (clean_layers, _) = forward_values(image_clean, detectors, &cfg.fusion_weights)?;
    let mask_feats: Vec<Tensor> = clean_layers
        .iter()
        .map(|l| mask_to_feature_space(mask, l.chw()))
        .collect();
    let targets = target_features(&clean_layers, &mask_feats, cfg.nu);
    let (value, mut grads) = evaluate_with_gradients(|tape| {
        let d = tape.leaf(delta.clone());
        let (forwards, fused) =
            forward_fused_nodes(tape, base, d, detectors, &cfg.fusion_weights)?;
        let j = assemble_objective(tape, detectors, &forwards, &fused, &targets, selections, cfg)?;
        Ok((j, vec![d]))
    })?;
    Ok((value, grads.remove(0)))
}

/// Combined objective J for one perturbed image against its clean twin.
/// The crafting loop minimizes this value.
pub fn poison_total_objective(
    image_pert: &Tensor,
    image_clean: &Tensor,
    detectors: &[DetectorModel],
    mask: &Tensor,
    cfg: &PoisonConfig,
) -> Result<f32, PoisonError> {
    cfg.validate()?;
    check_ensemble(detectors, cfg)?;
    if image_pert.shape() != image_clean.shape() {
        return Err(PoisonError::Precondition(format!(
            "image shapes differ: {:?} vs {:?}",
            image_pert.shape(),
            image_clean.shape()
        )));
    }
    let (clean_layers, _) = forward_values(image_clean, detectors, &cfg.fusion_weights)?;
    let mask_feats: Vec<Tensor> = clean_layers
        .iter()
        .map(|l| mask_to_feature_space(mask, l.chw()))
        .collect();
    let targets = target_features(&clean_layers, &mask_feats, cfg.nu);
    let mut tape = Tape::new();
    let zero = tape.constant(Tensor::zeros(image_pert.shape().to_vec()));
    let j = objective_node(&mut tape, image_pert, zero, detectors, &targets, cfg)?;
    Ok(tape.value(j).data()[0])
}

/// One descent step as seen by an observer. The two magnitude fields track
/// the crafting invariants: the budget bound on delta and the absence of
/// mass outside the mask support.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoisonRecord {
    pub iteration: usize,
    pub batch_objective: f32,
    pub delta_max_abs: f32,
    pub off_support_max_abs: f32,
}

/// Crafting result: the poison plus the pool objective before and after,
/// so callers can verify the descent moved the objective.
#[derive(Debug, Clone, PartialEq)]
pub struct PoisonOutcome {
    pub delta: Tensor,
    pub initial_objective: f32,
    pub final_objective: f32,
}

/// Craft the poisoning perturbation inside the mask over the image batch.
pub fn craft_poison(
    images: &[Tensor],
    w0: &Tensor,
    detectors: &[DetectorModel],
    mask: &Tensor,
    cfg: &PoisonConfig,
) -> Result<PoisonOutcome, PoisonError> {
    craft_poison_observed(images, w0, detectors, mask, cfg, &mut |_| {})
}

/// [`craft_poison`] with a per-iteration observer. An all-zero mask skips
/// the loop entirely; delta stays exactly zero and no records are emitted.
pub fn craft_poison_observed(
    images: &[Tensor],
    w0: &Tensor,
    detectors: &[DetectorModel],
    mask: &Tensor,
    cfg: &PoisonConfig,
    observer: &mut dyn FnMut(PoisonRecord),
) -> Result<PoisonOutcome, PoisonError> {
    cfg.validate()?;
    check_ensemble(detectors, cfg)?;
    if images.is_empty() {
        return Err(PoisonError::Precondition("image batch must not be empty".into()));
    }
    let shape = w0.shape().to_vec();
    if mask.shape() != shape.as_slice() {
        return Err(PoisonError::Precondition(format!(
            "mask shape {:?} does not match perturbation shape {:?}",
            mask.shape(),
            shape
        )));
    }
    if let Some(img) = images.iter().find(|i| i.shape() != shape.as_slice()) {
        return Err(PoisonError::Precondition(format!(
            "image shape {:?} does not match perturbation shape {:?}",
            img.shape(),
            shape
        )));
    }
    let bases: Vec<Tensor> = images
        .iter()
        .map(|x| {
            let data = x.data().iter().zip(w0.data()).map(|(&a, &b)| a + b).collect();
            Tensor::from_vec(shape.clone(), data).expect("shapes match")
        })
        .collect();
    let cleans = map_ordered(images.len(), |i| {
        forward_values(&images[i], detectors, &cfg.fusion_weights).map(|(layers, _)| layers)
    });
    let mut targets = Vec::with_capacity(images.len());
    let mut mask_feats: Option<Vec<Tensor>> = None;
    for clean in cleans {
        let layers = clean?;
        let feats = mask_feats.get_or_insert_with(|| {
            layers.iter().map(|l| mask_to_feature_space(mask, l.chw())).collect()
        });
        targets.push(target_features(&layers, feats, cfg.nu));
    }
    let mut delta = Tensor::zeros(shape.clone());
    let initial_objective = pool_objective(&bases, &delta, detectors, &targets, cfg)?;
    if mask.data().iter().all(|&m| m == 0.0) {
        return Ok(PoisonOutcome {
            delta,
            initial_objective,
            final_objective: initial_objective,
        });
    }
    let mut rng = SeedStream::new(cfg.seed, Stream::PoisonBatch);
    let mut order: Vec<usize> = (0..images.len()).collect();
    for t in 0..cfg.iterations {
        rng.shuffle(&mut order);
        let batch = &order[..cfg.batch_size.min(order.len())];
        let results = map_ordered(batch.len(), |bi| -> Result<(f32, Tensor), NumericsError> {
            let i = batch[bi];
            let (obj, grads) = evaluate_with_gradients(|tape| {
                let d = tape.leaf(delta.clone());
                let j = objective_node(tape, &bases[i], d, detectors, &targets[i], cfg)?;
                Ok((j, vec![d]))
            })?;
            Ok((obj, grads.into_iter().next().expect("one gradient requested")))
        });
        let mut batch_objective = 0.0f32;
        let mut grad = Tensor::zeros(shape.clone());
        for r in results {
            let (o, g) = r.map_err(|source| PoisonError::Aborted { iteration: t, source })?;
            batch_objective += o;
            for (a, &b) in grad.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        let scale = 1.0 / batch.len() as f32;
        batch_objective *= scale;
        if !batch_objective.is_finite() {
            return Err(PoisonError::Aborted {
                iteration: t,
                source: NumericsError::NonFinite {
                    op: "poison batch objective",
                    node: 0,
                },
            });
        }
        // Descent step, clip into the budget, then attenuate by the mask,
        // in exactly that order: the mask multiply lands last so support
        // confinement survives the clip.
        let mut delta_max_abs = 0.0f32;
        let mut off_support_max_abs = 0.0f32;
        for ((dv, &gv), &mv) in delta.data_mut().iter_mut().zip(grad.data()).zip(mask.data()) {
            let stepped = *dv - cfg.eta * gv * scale;
            *dv = stepped.clamp(-cfg.epsilon, cfg.epsilon) * mv;
            let a = dv.abs();
            delta_max_abs = delta_max_abs.max(a);
            if mv == 0.0 {
                off_support_max_abs = off_support_max_abs.max(a);
            }
        }
        observer(PoisonRecord {
            iteration: t,
            batch_objective,
            delta_max_abs,
            off_support_max_abs,
        });
    }
    let final_objective = pool_objective(&bases, &delta, detectors, &targets, cfg)?;
    Ok(PoisonOutcome {
        delta,
        initial_objective,
        final_objective,
    })
}

/// Mean objective over the whole batch at a fixed delta.
fn pool_objective(
    bases: &[Tensor],
    delta: &Tensor,
    detectors: &[DetectorModel],
    targets: &[Vec<Tensor>],
    cfg: &PoisonConfig,
) -> Result<f32, PoisonError> {
    let values = map_ordered(bases.len(), |i| -> Result<f32, NumericsError> {
        let mut tape = Tape::new();
        let d = tape.constant(delta.clone());
        let j = objective_node(&mut tape, &bases[i], d, detectors, &targets[i], cfg)?;
        Ok(tape.value(j).data()[0])
    });
    let mut total = 0.0f64;
    for v in values {
        total += v? as f64;
    }
    Ok((total / bases.len() as f64) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{decode_detections, BoxPx, Detection, LayerDesc};

    /// Detector whose convs have zero weights and a fixed bias, so every
    /// tap is constant and the score map sits at sigmoid(score_bias).
    fn const_detector(tap_bias: f32, score_bias: f32) -> DetectorModel {
        let backbone = vec![LayerDesc::Conv { in_ch: 3, out_ch: 2, k: 1, pad: 0 }];
        DetectorModel {
            backbone,
            backbone_params: vec![Tensor::zeros(vec![2, 3, 1, 1]), Tensor::full(vec![2], tap_bias)],
            score_head: (Tensor::zeros(vec![1, 2, 1, 1]), Tensor::full(vec![1], score_bias)),
            box_head: (Tensor::zeros(vec![4, 2, 1, 1]), Tensor::zeros(vec![4])),
            stride: 1,
            tap_layers: vec![0],
        }
    }

    /// Same constant construction with the trunk pooled to one cell, so a
    /// positive score bias yields exactly one detection.
    fn pooled_const_detector(tap_bias: f32, score_bias: f32) -> DetectorModel {
        let backbone = vec![
            LayerDesc::Conv { in_ch: 3, out_ch: 2, k: 1, pad: 0 },
            LayerDesc::AvgPool { k: 4 },
        ];
        DetectorModel {
            backbone,
            backbone_params: vec![Tensor::zeros(vec![2, 3, 1, 1]), Tensor::full(vec![2], tap_bias)],
            score_head: (Tensor::zeros(vec![1, 2, 1, 1]), Tensor::full(vec![1], score_bias)),
            box_head: (Tensor::zeros(vec![4, 2, 1, 1]), Tensor::zeros(vec![4])),
            stride: 4,
            tap_layers: vec![0],
        }
    }

    /// Small trainable-shape detector with random weights over 8x8 images.
    fn random_detector(seed: u64, score_bias: f32) -> DetectorModel {
        let mut rng = SeedStream::new(seed, Stream::ModelInit);
        let mut t = |shape: Vec<usize>, lim: f32| {
            let n: usize = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| rng.uniform_in(-lim, lim)).collect()).unwrap()
        };
        let backbone = vec![
            LayerDesc::Conv { in_ch: 3, out_ch: 4, k: 3, pad: 1 },
            LayerDesc::Relu,
            LayerDesc::AvgPool { k: 2 },
            LayerDesc::Conv { in_ch: 4, out_ch: 4, k: 3, pad: 1 },
        ];
        let backbone_params = vec![
            t(vec![4, 3, 3, 3], 0.4),
            t(vec![4], 0.1),
            t(vec![4, 4, 3, 3], 0.4),
            t(vec![4], 0.1),
        ];
        DetectorModel {
            backbone,
            backbone_params,
            score_head: (t(vec![1, 4, 1, 1], 0.4), Tensor::full(vec![1], score_bias)),
            box_head: (t(vec![4, 4, 1, 1], 0.4), Tensor::zeros(vec![4])),
            stride: 2,
            tap_layers: vec![0, 3],
        }
    }

    fn image(side: usize, seed: u64) -> Tensor {
        let mut rng = SeedStream::new(seed, Stream::SynthData);
        let n = 3 * side * side;
        Tensor::from_vec(vec![3, side, side], (0..n).map(|_| rng.uniform()).collect()).unwrap()
    }

    fn cfg_for(detectors: usize, layers: usize) -> PoisonConfig {
        PoisonConfig {
            fusion_weights: vec![1.0 / detectors as f32; detectors],
            layer_weights: vec![1.0 / layers as f32; layers],
            ..PoisonConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        PoisonConfig::default().validate().unwrap();
    }

    #[test]
    fn config_rejects_bad_values() {
        let base = PoisonConfig::default();
        let bad = [
            PoisonConfig { eta: 0.0, ..base.clone() },
            PoisonConfig { fusion_weights: vec![0.5, 0.6], ..base.clone() },
            PoisonConfig { fusion_weights: vec![], ..base.clone() },
            PoisonConfig { layer_weights: vec![-0.1, 0.5], ..base.clone() },
            PoisonConfig { iterations: 0, ..base.clone() },
            PoisonConfig { tau: 1.5, ..base.clone() },
            PoisonConfig { score_threshold: 0.0, ..base.clone() },
            PoisonConfig { batch_size: 0, ..base.clone() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "accepted {cfg:?}");
        }
    }

    #[test]
    fn single_detector_fusion_is_identity() {
        let det = random_detector(3, 0.0);
        let img = image(8, 1);
        let mut cfg = cfg_for(1, 2);
        cfg.fusion_weights = vec![1.0];
        let fused = fuse_detector_features(&img, &[det.clone()], &cfg).unwrap();
        let (_, _, taps) = det.maps_of(&img).unwrap();
        assert_eq!(fused.layers.len(), taps.len());
        for (f, t) in fused.layers.iter().zip(&taps) {
            for (a, b) in f.data().iter().zip(t.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identical_detectors_fuse_to_the_shared_features() {
        let det = random_detector(5, 0.0);
        let img = image(8, 2);
        let cfg = cfg_for(2, 2);
        let fused = fuse_detector_features(&img, &[det.clone(), det.clone()], &cfg).unwrap();
        let (_, _, taps) = det.maps_of(&img).unwrap();
        for (f, t) in fused.layers.iter().zip(&taps) {
            for (a, b) in f.data().iter().zip(t.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_detectors_fuse_to_the_weighted_mean() {
        let a = const_detector(1.0, -5.0);
        let b = const_detector(3.0, -5.0);
        let mut cfg = cfg_for(2, 1);
        cfg.fusion_weights = vec![0.25, 0.75];
        let fused = fuse_detector_features(&image(4, 3), &[a, b], &cfg).unwrap();
        assert_eq!(fused.layers.len(), 1);
        for &v in fused.layers[0].data() {
            assert!((v - 2.5).abs() < 1e-6, "got {v}");
        }
    }

    #[test]
    fn fusion_resamples_smaller_taps_onto_the_first_shape() {
        let a = const_detector(2.0, -5.0);
        let mut b = const_detector(4.0, -5.0);
        b.backbone.push(LayerDesc::AvgPool { k: 2 });
        b.tap_layers = vec![1];
        b.stride = 2;
        let cfg = cfg_for(2, 1);
        let fused = fuse_detector_features(&image(4, 4), &[a, b], &cfg).unwrap();
        assert_eq!(fused.layers[0].chw(), (2, 4, 4));
        for &v in fused.layers[0].data() {
            assert!((v - 3.0).abs() < 1e-6, "got {v}");
        }
    }

    #[test]
    fn fusion_rejects_tap_count_mismatch() {
        let a = random_detector(6, 0.0);
        let mut b = random_detector(7, 0.0);
        b.tap_layers = vec![0];
        let cfg = cfg_for(2, 2);
        let err = fuse_detector_features(&image(8, 5), &[a, b], &cfg).unwrap_err();
        assert!(matches!(err, PoisonError::Precondition(_)), "{err}");
    }

    #[test]
    fn mask_transfer_block_averages_and_broadcasts() {
        // Left half one, right half zero; 4x4 -> 2x2 keeps the halves.
        let mut data = vec![0.0f32; 3 * 16];
        for ch in 0..3 {
            for y in 0..4 {
                for x in 0..2 {
                    data[ch * 16 + y * 4 + x] = 1.0;
                }
            }
        }
        let mask = Tensor::from_vec(vec![3, 4, 4], data).unwrap();
        let feat = mask_to_feature_space(&mask, (2, 2, 2));
        assert_eq!(feat.chw(), (2, 2, 2));
        for ch in 0..2 {
            let base = ch * 4;
            assert_eq!(&feat.data()[base..base + 4], &[1.0, 0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn mask_transfer_is_identity_at_equal_shape() {
        let mask = image(4, 6);
        let feat = mask_to_feature_space(&mask, (1, 4, 4));
        let mean: Vec<f32> = (0..16)
            .map(|i| (mask.data()[i] + mask.data()[16 + i] + mask.data()[32 + i]) / 3.0)
            .collect();
        for (a, b) in feat.data().iter().zip(&mean) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn feature_loss_is_zero_at_the_target() {
        let clean = FusedFeatures {
            layers: vec![Tensor::from_vec(vec![1, 2, 2], vec![0.5, -0.25, 1.0, 0.0]).unwrap()],
        };
        let mask = vec![Tensor::full(vec![1, 2, 2], 0.5)];
        let cfg = PoisonConfig {
            nu: 2.0,
            layer_weights: vec![1.0],
            fusion_weights: vec![1.0],
            ..PoisonConfig::default()
        };
        let pert = FusedFeatures {
            layers: vec![Tensor::from_vec(
                vec![1, 2, 2],
                clean.layers[0].data().iter().map(|&c| -c + 2.0 * 0.5).collect(),
            )
            .unwrap()],
        };
        let loss = poison_feature_loss(&pert, &clean, &mask, &cfg).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn feature_loss_doubles_the_clean_feature_without_margin() {
        // nu = 0 and pert == clean leaves a residual of 2 * clean per cell.
        let clean = FusedFeatures {
            layers: vec![Tensor::full(vec![2, 2, 2], 1.5)],
        };
        let mask = vec![Tensor::zeros(vec![2, 2, 2])];
        let cfg = PoisonConfig {
            nu: 0.0,
            layer_weights: vec![0.5],
            fusion_weights: vec![1.0],
            ..PoisonConfig::default()
        };
        let loss = poison_feature_loss(&clean, &clean, &mask, &cfg).unwrap();
        // 0.5 * 8 cells * (2 * 1.5)^2
        assert!((loss - 36.0).abs() < 1e-5, "got {loss}");
    }

    #[test]
    fn feature_loss_vanishes_under_zero_layer_weights() {
        let f = FusedFeatures {
            layers: vec![Tensor::full(vec![1, 2, 2], 3.0)],
        };
        let cfg = PoisonConfig {
            layer_weights: vec![0.0],
            fusion_weights: vec![1.0],
            ..PoisonConfig::default()
        };
        let mask = vec![Tensor::zeros(vec![1, 2, 2])];
        assert_eq!(poison_feature_loss(&f, &f, &mask, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn feature_loss_matches_the_oracle() {
        let mut rng = SeedStream::new(9, Stream::SynthData);
        let mut mk = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect() };
        let shapes = [(2usize, 3usize, 3usize), (4, 2, 2)];
        let pert: Vec<Vec<f32>> = shapes.iter().map(|&(c, h, w)| mk(c * h * w)).collect();
        let clean: Vec<Vec<f32>> = shapes.iter().map(|&(c, h, w)| mk(c * h * w)).collect();
        let masks: Vec<Vec<f32>> = shapes.iter().map(|&(c, h, w)| mk(c * h * w)).collect();
        let cfg = PoisonConfig {
            nu: 0.7,
            layer_weights: vec![0.3, 0.7],
            fusion_weights: vec![1.0],
            ..PoisonConfig::default()
        };
        let wrap = |vals: &[Vec<f32>]| FusedFeatures {
            layers: vals
                .iter()
                .zip(&shapes)
                .map(|(v, &(c, h, w))| Tensor::from_vec(vec![c, h, w], v.clone()).unwrap())
                .collect(),
        };
        let mask_t: Vec<Tensor> = masks
            .iter()
            .zip(&shapes)
            .map(|(v, &(c, h, w))| Tensor::from_vec(vec![c, h, w], v.clone()).unwrap())
            .collect();
        let got = poison_feature_loss(&wrap(&pert), &wrap(&clean), &mask_t, &cfg).unwrap();
        let to64 = |vals: &[Vec<f32>]| -> Vec<Vec<f64>> {
            vals.iter().map(|v| v.iter().map(|&x| x as f64).collect()).collect()
        };
        let want = tsdf_oracle::net::feature_loss(
            &to64(&pert),
            &to64(&clean),
            &to64(&masks),
            &[0.3, 0.7],
            0.7,
        );
        assert!((got as f64 - want).abs() < 1e-4 * want.abs().max(1.0), "{got} vs {want}");
    }

    #[test]
    fn output_loss_of_no_detections_is_zero() {
        assert_eq!(poison_output_loss(&[], 64.0), 0.0);
    }

    #[test]
    fn output_loss_of_a_degenerate_box_is_the_squared_score() {
        let d = Detection {
            score: 1.0,
            bbox: BoxPx { x_min: 5.0, y_min: 5.0, x_max: 5.0, y_max: 5.0 },
        };
        assert!((poison_output_loss(&[d], 64.0) - 1.0).abs() < 1e-7);
    }

    #[test]
    fn output_loss_adds_the_corner_distance() {
        let d = Detection {
            score: 0.5,
            bbox: BoxPx { x_min: 10.0, y_min: 10.0, x_max: 20.0, y_max: 20.0 },
        };
        // 0.25 + (|10-15| + |10-15| + |20-15| + |20-15|) / 64
        assert!((poison_output_loss(&[d], 64.0) - 0.5625).abs() < 1e-6);
    }

    #[test]
    fn output_loss_matches_the_oracle() {
        let mut rng = SeedStream::new(11, Stream::SynthData);
        let dets: Vec<Detection> = (0..8)
            .map(|_| {
                let x = rng.uniform_in(0.0, 40.0);
                let y = rng.uniform_in(0.0, 40.0);
                Detection {
                    score: rng.uniform(),
                    bbox: BoxPx {
                        x_min: x,
                        y_min: y,
                        x_max: x + rng.uniform_in(0.0, 20.0),
                        y_max: y + rng.uniform_in(0.0, 20.0),
                    },
                }
            })
            .collect();
        let oracle_boxes: Vec<tsdf_oracle::net::OracleBox> = dets
            .iter()
            .map(|d| tsdf_oracle::net::OracleBox {
                score: d.score as f64,
                x_min: d.bbox.x_min as f64,
                y_min: d.bbox.y_min as f64,
                x_max: d.bbox.x_max as f64,
                y_max: d.bbox.y_max as f64,
            })
            .collect();
        let got = poison_output_loss(&dets, 64.0) as f64;
        let want = tsdf_oracle::net::output_loss(&oracle_boxes, 64.0);
        assert!((got - want).abs() < 1e-4, "{got} vs {want}");
    }

    #[test]
    fn objective_is_positive_for_a_working_detector() {
        let det = pooled_const_detector(1.0, 2.0);
        let img = image(4, 12);
        let mut cfg = cfg_for(1, 1);
        cfg.fusion_weights = vec![1.0];
        cfg.layer_weights = vec![1.0];
        let mask = Tensor::zeros(vec![3, 4, 4]);
        let j = poison_total_objective(&img, &img, &[det], &mask, &cfg).unwrap();
        assert!(j > 0.0, "got {j}");
    }

    #[test]
    fn objective_is_zero_without_detections_or_layer_weights() {
        let det = pooled_const_detector(1.0, -5.0);
        let img = image(4, 13);
        let mut cfg = cfg_for(1, 1);
        cfg.layer_weights = vec![0.0];
        let mask = Tensor::zeros(vec![3, 4, 4]);
        let j = poison_total_objective(&img, &img, &[det], &mask, &cfg).unwrap();
        assert_eq!(j, 0.0);
    }

    #[test]
    fn objective_matches_hand_evaluation_on_constant_features() {
        // Constant tap c = 1.0 over (2,4,4); pert == clean, all-ones mask,
        // nu = 1: residual per cell is 2c - 1 = 1, so L_feat = 32. The
        // pooled cell fires at sigmoid(2) with a centered box of span 4.
        let det = pooled_const_detector(1.0, 2.0);
        let img = image(4, 14);
        let mut cfg = cfg_for(1, 1);
        cfg.nu = 1.0;
        let mask = Tensor::full(vec![3, 4, 4], 1.0);
        let j = poison_total_objective(&img, &img, &[det.clone()], &mask, &cfg).unwrap();
        let s = 1.0 / (1.0 + (-2.0f64).exp());
        // Box span is 4px on a 4px image, so the normalized L1 is 1.
        let want = 32.0 + (s * s + 1.0);
        assert!((j as f64 - want).abs() < 1e-4, "{j} vs {want}");
        // The decoded detection agrees with the on-tape output term.
        let found = decode_detections(&det, &img, cfg.score_threshold).unwrap();
        assert_eq!(found.len(), 1);
        assert!((poison_output_loss(&found, 4.0) as f64 - (s * s + 1.0)).abs() < 1e-4);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let det = random_detector(21, 0.5);
        let img = image(8, 22);
        let mut cfg = cfg_for(1, 2);
        cfg.fusion_weights = vec![1.0];
        let mask = Tensor::full(vec![3, 8, 8], 1.0);
        let delta0 = {
            let mut rng = SeedStream::new(23, Stream::PerturbInit);
            Tensor::from_vec(vec![3, 8, 8], (0..192).map(|_| rng.uniform_in(-0.02, 0.02)).collect())
                .unwrap()
        };
        let dets = [det];
        // Pin the detection selection at delta0; the step objective is only
        // differentiable with the selection held fixed.
        let x_hat = {
            let data = img.data().iter().zip(delta0.data()).map(|(&a, &b)| a + b).collect();
            Tensor::from_vec(vec![3, 8, 8], data).unwrap()
        };
        let cells = select_poison_cells(&x_hat, &dets, cfg.score_threshold).unwrap();
        assert!(!cells[0].is_empty(), "setup produced no detections");
        let (_, grad) =
            poison_step_objective(&img, &delta0, &img, &dets, &mask, &cells, &cfg).unwrap();
        let value_at = |delta: &Tensor| -> f32 {
            poison_step_objective(&img, delta, &img, &dets, &mask, &cells, &cfg).unwrap().0
        };
        // Probe the largest-magnitude coordinates so the signal dominates
        // single-precision forward noise.
        let mut order: Vec<usize> = (0..grad.data().len()).collect();
        order.sort_by(|&a, &b| {
            grad.data()[b].abs().partial_cmp(&grad.data()[a].abs()).unwrap()
        });
        let h = 2e-3;
        for &idx in &order[..4] {
            let mut plus = delta0.clone();
            plus.data_mut()[idx] += h;
            let mut minus = delta0.clone();
            minus.data_mut()[idx] -= h;
            let fd = (value_at(&plus) as f64 - value_at(&minus) as f64) / (2.0 * h as f64);
            let an = grad.data()[idx] as f64;
            let denom = an.abs().max(fd.abs()).max(1e-3);
            assert!((an - fd).abs() / denom < 3e-2, "idx {idx}: {an} vs {fd}");
        }
    }

    #[test]
    fn craft_rejects_mismatched_shapes() {
        let det = random_detector(31, 0.0);
        let imgs = [image(8, 32)];
        let w0 = Tensor::zeros(vec![3, 8, 8]);
        let mask = Tensor::zeros(vec![3, 4, 4]);
        let mut cfg = cfg_for(1, 2);
        cfg.fusion_weights = vec![1.0];
        let err = craft_poison(&imgs, &w0, &[det], &mask, &cfg).unwrap_err();
        assert!(matches!(err, PoisonError::Precondition(_)), "{err}");
    }

    #[test]
    fn all_zero_mask_leaves_delta_exactly_zero() {
        let det = random_detector(33, 0.5);
        let imgs: Vec<Tensor> = (0..3).map(|i| image(8, 40 + i)).collect();
        let w0 = Tensor::full(vec![3, 8, 8], 0.01);
        let mask = Tensor::zeros(vec![3, 8, 8]);
        let mut cfg = cfg_for(1, 2);
        cfg.fusion_weights = vec![1.0];
        let mut records = 0;
        let out = craft_poison_observed(&imgs, &w0, &[det], &mask, &cfg, &mut |_| records += 1)
            .unwrap();
        assert_eq!(records, 0);
        assert!(out.delta.data().iter().all(|&v| v.to_bits() == 0.0f32.to_bits()));
        assert_eq!(out.initial_objective, out.final_objective);
    }

    #[test]
    fn crafted_delta_respects_mask_support_and_budget() {
        let det = random_detector(35, 0.5);
        let imgs: Vec<Tensor> = (0..4).map(|i| image(8, 50 + i)).collect();
        let w0 = Tensor::full(vec![3, 8, 8], 0.01);
        // Mask the first half of the tensor only.
        let mut mask_data = vec![0.0f32; 192];
        for v in mask_data.iter_mut().take(96) {
            *v = 0.8;
        }
        let mask = Tensor::from_vec(vec![3, 8, 8], mask_data).unwrap();
        let mut cfg = cfg_for(1, 2);
        cfg.fusion_weights = vec![1.0];
        cfg.eta = 0.05;
        cfg.iterations = 6;
        cfg.batch_size = 2;
        let mut seen = Vec::new();
        let out = craft_poison_observed(&imgs, &w0, &[det], &mask, &cfg, &mut |r| seen.push(r))
            .unwrap();
        assert_eq!(seen.len(), 6);
        for (t, r) in seen.iter().enumerate() {
            assert_eq!(r.iteration, t);
            assert!(r.delta_max_abs <= cfg.epsilon);
            assert_eq!(r.off_support_max_abs, 0.0);
        }
        for (i, &v) in out.delta.data().iter().enumerate() {
            assert!(v.abs() <= cfg.epsilon);
            if i >= 96 {
                assert_eq!(v, 0.0, "leaked outside the mask at {i}");
            }
        }
        assert!(out.delta.data().iter().any(|&v| v != 0.0), "delta never moved");
    }

    #[test]
    fn crafting_descends_on_a_random_detector() {
        let dets = [random_detector(37, 0.5), random_detector(38, 0.5)];
        let imgs: Vec<Tensor> = (0..4).map(|i| image(8, 60 + i)).collect();
        let w0 = Tensor::full(vec![3, 8, 8], 0.005);
        let mask = Tensor::full(vec![3, 8, 8], 1.0);
        let mut cfg = cfg_for(2, 2);
        cfg.eta = 0.01;
        cfg.iterations = 10;
        cfg.batch_size = 4;
        let out = craft_poison(&imgs, &w0, &dets, &mask, &cfg).unwrap();
        assert!(
            out.final_objective <= out.initial_objective,
            "{} -> {}",
            out.initial_objective,
            out.final_objective
        );
    }

    #[test]
    fn crafting_is_deterministic_per_seed() {
        let dets = [random_detector(41, 0.5)];
        let imgs: Vec<Tensor> = (0..3).map(|i| image(8, 70 + i)).collect();
        let w0 = Tensor::full(vec![3, 8, 8], 0.01);
        let mask = Tensor::full(vec![3, 8, 8], 0.7);
        let mut cfg = cfg_for(1, 2);
        cfg.fusion_weights = vec![1.0];
        cfg.iterations = 4;
        cfg.batch_size = 2;
        let a = craft_poison(&imgs, &w0, &dets, &mask, &cfg).unwrap();
        let b = craft_poison(&imgs, &w0, &dets, &mask, &cfg).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.delta), bits(&b.delta));
        let mut other = cfg.clone();
        other.seed = 1;
        let c = craft_poison(&imgs, &w0, &dets, &mask, &other).unwrap();
        assert_ne!(bits(&a.delta), bits(&c.delta), "seed had no effect");
    }
}
