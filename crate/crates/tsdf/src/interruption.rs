//! Stage one: a universal disruption pattern crafted by projected gradient
//! ascent. The objective amplifies local, global, and structural feature
//! discrepancies across an extractor ensemble, so that generators consuming
//! the protected image produce visibly broken output.

use crate::numerics::{
    evaluate_with_gradients, project_linf, NodeId, NumericsError, Tape, Tensor,
};
use crate::rng::{SeedStream, Stream};
use crate::runtime::map_ordered;
use crate::zoo::ExtractorModel;
use thiserror::Error;

/// Cap on the amplifier exponent; keeps exp() in f32 range no matter how
/// far the optimizer pushes the discrepancies.
pub const EXPONENT_CAP: f32 = 30.0;

#[derive(Debug, Error)]
pub enum InterruptionError {
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

/// Hyperparameters of the disruption stage.
#[derive(Debug, Clone, PartialEq)]
pub struct InterruptionConfig {
    /// L-infinity budget for the perturbation.
    pub epsilon: f32,
    /// Ascent step size.
    pub gamma: f32,
    /// Weight of the enhanced-feature term against the plain MSE term.
    pub lambda: f32,
    /// Amplification coefficient on the discrepancy sum.
    pub alpha: f32,
    /// Amplifier temperature; the exponent is the weighted discrepancy
    /// norm divided by this.
    pub sigma: f32,
    /// Stability constant guarding divisions by a zero deviation.
    pub z: f32,
    /// Mixing weights for the local, global, and structural components.
    pub weights: [f32; 3],
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for InterruptionConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            gamma: 0.001,
            lambda: 0.1,
            alpha: 255.0,
            sigma: 16.0,
            z: 1e-8,
            weights: [1.0 / 3.0; 3],
            iterations: 50,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl InterruptionConfig {
    pub fn validate(&self) -> Result<(), InterruptionError> {
        let fail = |what: &str| Err(InterruptionError::Precondition(what.into()));
        if !(self.epsilon > 0.0) {
            return fail("epsilon must be positive");
        }
        if self.iterations < 1 {
            return fail("iterations must be at least 1");
        }
        if self.weights.iter().any(|&w| w < 0.0) {
            return fail("discrepancy weights must be nonnegative");
        }
        if !(self.sigma > 0.0) {
            return fail("sigma must be positive");
        }
        if !(self.z > 0.0) {
            return fail("z must be positive");
        }
        if self.batch_size < 1 {
            return fail("batch size must be at least 1");
        }
        Ok(())
    }
}

/// The three feature-difference components the objective amplifies.
#[derive(Debug, Clone, PartialEq)]
pub struct Discrepancies {
    /// Standardized element-wise difference, feature-shaped.
    pub local: Tensor,
    /// Mean shift per channel scaled by the clean deviation, shape (C).
    pub global: Tensor,
    /// Attention-weighted standardized difference, feature-shaped.
    pub structural: Tensor,
}

pub(crate) struct DiscrepancyNodes {
    pub local: NodeId,
    pub global: NodeId,
    pub structural: NodeId,
}

/// Per-channel standardization: (F - mean) / (std + z), dividing each
/// feature map by its own spatial deviation.
pub(crate) fn normalize_node(tape: &mut Tape, f: NodeId, z: f32) -> Result<NodeId, NumericsError> {
    let (_, h, w) = tape.value(f).chw();
    let mean = tape.mean_channels(f)?;
    let mean_b = tape.broadcast_channel(mean, h, w)?;
    let centered = tape.sub(f, mean_b)?;
    let std = tape.std_channels(f)?;
    let shifted = tape.add_scalar(std, z)?;
    let inv = tape.recip(shifted)?;
    let inv_b = tape.broadcast_channel(inv, h, w)?;
    tape.mul(centered, inv_b)
}

/// Spatial attention: softmax over positions of the channel-mean map,
/// multiplied back onto the input.
pub(crate) fn attention_node(tape: &mut Tape, f: NodeId) -> Result<NodeId, NumericsError> {
    let (c, _, _) = tape.value(f).chw();
    // Channel mean per position as a constant-weight 1x1 convolution.
    let mean_w = tape.constant(Tensor::full(vec![1, c, 1, 1], 1.0 / c as f32));
    let zero1 = tape.constant(Tensor::zeros(vec![1]));
    let mean_map = tape.conv2d(f, mean_w, zero1, 0)?;
    let attention = tape.spatial_softmax(mean_map)?;
    // Replicate the single-channel map across channels, again as a 1x1 conv.
    let rep_w = tape.constant(Tensor::full(vec![c, 1, 1, 1], 1.0));
    let zero_c = tape.constant(Tensor::zeros(vec![c]));
    let replicated = tape.conv2d(attention, rep_w, zero_c, 0)?;
    tape.mul(f, replicated)
}

pub(crate) fn discrepancy_nodes(
    tape: &mut Tape,
    feat_pert: NodeId,
    feat_clean: NodeId,
    z: f32,
) -> Result<DiscrepancyNodes, NumericsError> {
    if tape.value(feat_pert).shape() != tape.value(feat_clean).shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "discrepancies",
            lhs: tape.value(feat_pert).shape().to_vec(),
            rhs: tape.value(feat_clean).shape().to_vec(),
        });
    }
    let norm_p = normalize_node(tape, feat_pert, z)?;
    let norm_c = normalize_node(tape, feat_clean, z)?;
    let local = tape.sub(norm_p, norm_c)?;

    let mean_p = tape.mean_channels(feat_pert)?;
    let mean_c = tape.mean_channels(feat_clean)?;
    let shift = tape.sub(mean_p, mean_c)?;
    let std_c = tape.std_channels(feat_clean)?;
    let scale = tape.add_scalar(std_c, z)?;
    let inv = tape.recip(scale)?;
    let global = tape.mul(shift, inv)?;

    let att_p = attention_node(tape, norm_p)?;
    let att_c = attention_node(tape, norm_c)?;
    let structural = tape.sub(att_p, att_c)?;
    Ok(DiscrepancyNodes {
        local,
        global,
        structural,
    })
}

/// Value-level discrepancy computation between two feature maps.
pub fn compute_discrepancies(
    feat_pert: &Tensor,
    feat_clean: &Tensor,
    z: f32,
) -> Result<Discrepancies, NumericsError> {
    let mut tape = Tape::new();
    let p = tape.constant(feat_pert.clone());
    let c = tape.constant(feat_clean.clone());
    let d = discrepancy_nodes(&mut tape, p, c, z)?;
    Ok(Discrepancies {
        local: tape.value(d.local).clone(),
        global: tape.value(d.global).clone(),
        structural: tape.value(d.structural).clone(),
    })
}

/// Per-channel enhancement strength: sigmoid of the mean absolute
/// discrepancy, so channels that already diverge get amplified harder.
pub(crate) fn adaptive_weight_nodes(
    tape: &mut Tape,
    d: &DiscrepancyNodes,
) -> Result<NodeId, NumericsError> {
    let la = tape.abs(d.local)?;
    let lm = tape.mean_channels(la)?;
    let ga = tape.abs(d.global)?;
    let sa = tape.abs(d.structural)?;
    let sm = tape.mean_channels(sa)?;
    let s1 = tape.add(lm, ga)?;
    let s2 = tape.add(s1, sm)?;
    let scaled = tape.mul_scalar(s2, 1.0 / 3.0)?;
    tape.sigmoid(scaled)
}

/// Value-level adaptive weights, shape (C), each in (0,1).
pub fn adaptive_weights(delta: &Discrepancies) -> Result<Tensor, NumericsError> {
    let mut tape = Tape::new();
    let d = DiscrepancyNodes {
        local: tape.constant(delta.local.clone()),
        global: tape.constant(delta.global.clone()),
        structural: tape.constant(delta.structural.clone()),
    };
    let w = adaptive_weight_nodes(&mut tape, &d)?;
    Ok(tape.value(w).clone())
}

/// F_enh: the perturbed features plus an exponentially amplified mix of the
/// three discrepancy components. The exponent is the L2 norm of all
/// weight-scaled components over sigma, capped at [`EXPONENT_CAP`].
pub(crate) fn enhance_nodes(
    tape: &mut Tape,
    feat_pert: NodeId,
    d: &DiscrepancyNodes,
    weights: NodeId,
    cfg: &InterruptionConfig,
) -> Result<NodeId, NumericsError> {
    let (c, h, w) = tape.value(feat_pert).chw();
    let wb = tape.broadcast_channel(weights, h, w)?;
    let wl = tape.mul(d.local, wb)?;
    let wg = tape.mul(d.global, weights)?;
    let ws = tape.mul(d.structural, wb)?;
    let all = tape.concat(&[wl, wg, ws])?;
    let norm = tape.l2_norm(all)?;
    let exponent = tape.mul_scalar(norm, 1.0 / cfg.sigma)?;
    let capped = tape.clamp(exponent, 0.0, EXPONENT_CAP)?;
    let amp = tape.exp(capped)?;

    let gb = tape.broadcast_channel(d.global, h, w)?;
    let t1 = tape.mul_scalar(d.local, cfg.weights[0])?;
    let t2 = tape.mul_scalar(gb, cfg.weights[1])?;
    let t3 = tape.mul_scalar(d.structural, cfg.weights[2])?;
    let s1 = tape.add(t1, t2)?;
    let mix = tape.add(s1, t3)?;

    let amp_c = tape.gather(amp, vec![0; c])?;
    let amp_b = tape.broadcast_channel(amp_c, h, w)?;
    let scaled_amp = tape.mul_scalar(amp_b, cfg.alpha)?;
    let boost = tape.mul(scaled_amp, mix)?;
    tape.add(feat_pert, boost)
}

/// Value-level feature enhancement.
pub fn enhance_features(
    feat_pert: &Tensor,
    delta: &Discrepancies,
    weights: &Tensor,
    cfg: &InterruptionConfig,
) -> Result<Tensor, NumericsError> {
    let mut tape = Tape::new();
    let p = tape.constant(feat_pert.clone());
    let d = DiscrepancyNodes {
        local: tape.constant(delta.local.clone()),
        global: tape.constant(delta.global.clone()),
        structural: tape.constant(delta.structural.clone()),
    };
    let w = tape.constant(weights.clone());
    let out = enhance_nodes(&mut tape, p, &d, w, cfg)?;
    Ok(tape.value(out).clone())
}

/// One image's loss: for each extractor, lambda-weighted MSE of the
/// enhanced features to the clean features plus plain feature MSE, summed
/// over the ensemble.
pub(crate) fn image_loss_node(
    tape: &mut Tape,
    image: &Tensor,
    w: NodeId,
    extractors: &[ExtractorModel],
    clean_features: &[Tensor],
    cfg: &InterruptionConfig,
) -> Result<NodeId, NumericsError> {
    let x = tape.constant(image.clone());
    let xhat = tape.add(x, w)?;
    let mut enh_sum: Option<NodeId> = None;
    let mut mse_sum: Option<NodeId> = None;
    for (ext, clean) in extractors.iter().zip(clean_features) {
        let fp = ext.features(tape, xhat)?;
        let fc = tape.constant(clean.clone());
        let d = discrepancy_nodes(tape, fp, fc, cfg.z)?;
        let wts = adaptive_weight_nodes(tape, &d)?;
        let fe = enhance_nodes(tape, fp, &d, wts, cfg)?;
        let e = tape.mse(fe, fc)?;
        let m = tape.mse(fp, fc)?;
        enh_sum = Some(match enh_sum {
            None => e,
            Some(s) => tape.add(s, e)?,
        });
        mse_sum = Some(match mse_sum {
            None => m,
            Some(s) => tape.add(s, m)?,
        });
    }
    let enh = enh_sum.expect("extractor list checked nonempty by callers");
    let mse = mse_sum.expect("extractor list checked nonempty by callers");
    let weighted = tape.mul_scalar(enh, cfg.lambda)?;
    tape.add(weighted, mse)
}

fn check_inputs(
    images: &[Tensor],
    extractors: &[ExtractorModel],
) -> Result<(), InterruptionError> {
    if extractors.is_empty() {
        return Err(InterruptionError::Precondition(
            "extractor list is empty".into(),
        ));
    }
    if images.is_empty() {
        return Err(InterruptionError::Precondition("image pool is empty".into()));
    }
    if images.iter().any(|i| i.shape() != images[0].shape()) {
        return Err(InterruptionError::Precondition(
            "images in the pool have differing shapes".into(),
        ));
    }
    Ok(())
}

fn pool_loss(
    images: &[Tensor],
    w: &Tensor,
    extractors: &[ExtractorModel],
    cleans: &[Vec<Tensor>],
    cfg: &InterruptionConfig,
) -> Result<f32, InterruptionError> {
    let losses = map_ordered(images.len(), |i| -> Result<f32, NumericsError> {
        let mut tape = Tape::new();
        let wn = tape.constant(w.clone());
        let loss = image_loss_node(&mut tape, &images[i], wn, extractors, &cleans[i], cfg)?;
        Ok(tape.value(loss).item())
    });
    let mut sum = 0.0f32;
    for l in losses {
        sum += l?;
    }
    Ok(sum / images.len() as f32)
}

/// Mean loss over an image batch for a fixed perturbation.
pub fn interruption_loss(
    images: &[Tensor],
    w: &Tensor,
    extractors: &[ExtractorModel],
    cfg: &InterruptionConfig,
) -> Result<f32, InterruptionError> {
    check_inputs(images, extractors)?;
    let cleans = clean_feature_cache(images, extractors)?;
    pool_loss(images, w, extractors, &cleans, cfg)
}

fn clean_feature_cache(
    images: &[Tensor],
    extractors: &[ExtractorModel],
) -> Result<Vec<Vec<Tensor>>, InterruptionError> {
    let rows = map_ordered(images.len(), |i| -> Result<Vec<Tensor>, NumericsError> {
        extractors.iter().map(|e| e.features_of(&images[i])).collect()
    });
    let mut out = Vec::with_capacity(images.len());
    for r in rows {
        out.push(r?);
    }
    Ok(out)
}

/// One optimizer step as seen by an observer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CraftRecord {
    pub iteration: usize,
    pub batch_loss: f32,
    /// L-infinity norm of the perturbation after this step's projection.
    pub w_max_abs: f32,
}

/// Crafting result: the perturbation plus the pool loss before and after,
/// so callers can verify the ascent moved the objective.
#[derive(Debug, Clone, PartialEq)]
pub struct InterruptionOutcome {
    pub w: Tensor,
    pub initial_loss: f32,
    pub final_loss: f32,
}

/// Craft the universal perturbation over the image pool.
pub fn craft_interruption(
    images: &[Tensor],
    extractors: &[ExtractorModel],
    cfg: &InterruptionConfig,
) -> Result<InterruptionOutcome, InterruptionError> {
    craft_interruption_observed(images, extractors, cfg, &mut |_| {})
}

/// [`craft_interruption`] with a per-iteration observer.
pub fn craft_interruption_observed(
    images: &[Tensor],
    extractors: &[ExtractorModel],
    cfg: &InterruptionConfig,
    observer: &mut dyn FnMut(CraftRecord),
) -> Result<InterruptionOutcome, InterruptionError> {
    cfg.validate()?;
    check_inputs(images, extractors)?;
    let mut rng = SeedStream::new(cfg.seed, Stream::PerturbInit);
    let shape = images[0].shape().to_vec();
    let n: usize = shape.iter().product();
    let lim = cfg.epsilon / 10.0;
    let w0 = Tensor::from_vec(shape, (0..n).map(|_| rng.uniform_in(-lim, lim)).collect())
        .expect("length matches shape by construction");
    craft_from(w0, images, extractors, cfg, observer)
}

fn craft_from(
    mut w: Tensor,
    images: &[Tensor],
    extractors: &[ExtractorModel],
    cfg: &InterruptionConfig,
    observer: &mut dyn FnMut(CraftRecord),
) -> Result<InterruptionOutcome, InterruptionError> {
    let cleans = clean_feature_cache(images, extractors)?;
    let initial_loss = pool_loss(images, &w, extractors, &cleans, cfg)?;
    let mut batch_rng = SeedStream::new(cfg.seed, Stream::BatchSample);
    let mut indices: Vec<usize> = (0..images.len()).collect();
    for t in 0..cfg.iterations {
        batch_rng.shuffle(&mut indices);
        let batch = &indices[..cfg.batch_size.min(indices.len())];
        let results = map_ordered(batch.len(), |bi| -> Result<(f32, Tensor), NumericsError> {
            let i = batch[bi];
            let (loss, grads) = evaluate_with_gradients(|tape| {
                let wn = tape.leaf(w.clone());
                let loss = image_loss_node(tape, &images[i], wn, extractors, &cleans[i], cfg)?;
                Ok((loss, vec![wn]))
            })?;
            Ok((loss, grads.into_iter().next().expect("one gradient requested")))
        });
        let mut batch_loss = 0.0f32;
        let mut grad = Tensor::zeros(w.shape().to_vec());
        for r in results {
            let (l, g) = r.map_err(|source| InterruptionError::Aborted {
                iteration: t,
                source,
            })?;
            batch_loss += l;
            for (a, &b) in grad.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        let scale = 1.0 / batch.len() as f32;
        batch_loss *= scale;
        // Ascent step, then projection back into the L-infinity ball.
        for (wv, gv) in w.data_mut().iter_mut().zip(grad.data()) {
            *wv += cfg.gamma * gv * scale;
        }
        w = project_linf(&w, cfg.epsilon)?;
        observer(CraftRecord {
            iteration: t,
            batch_loss,
            w_max_abs: w.data().iter().fold(0.0f32, |m, v| m.max(v.abs())),
        });
    }
    let final_loss = pool_loss(images, &w, extractors, &cleans, cfg)?;
    Ok(InterruptionOutcome {
        w,
        initial_loss,
        final_loss,
    })
}
