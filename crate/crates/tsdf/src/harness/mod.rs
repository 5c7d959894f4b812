//! Experiment harness: synthetic data, the attacker's scrape-and-retrain
//! pipeline, and the persistence experiment comparing protection schemes.

mod synth;

pub use synth::{synth_dataset, SyntheticSample, ATTRIBUTE_COUNT, IMAGE_SIDE};

use crate::fusion::{
    apply_perturbation, combine_perturbations, compute_poison_mask, FusionError, TsdfConfig,
};
use crate::interruption::{craft_interruption, InterruptionError};
use crate::metrics::{frechet_toy, ssim, MetricsError};
use crate::numerics::{kernels, NumericsError, Tensor};
use crate::poisoning::{craft_poison, PoisonError};
use crate::runtime::map_ordered;
use crate::rng::{SeedStream, Stream};
use crate::zoo::{
    decode_detections, fit_generator, train_toy_models, DetectorModel, ExtractorModel,
    GeneratorModel, ModelSet, TrainConfig, ZooError,
};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

/// Detections below this score are useless to the attacker.
pub const CROP_SCORE_THRESHOLD: f32 = 0.5;
/// Fractional margin added around the best box before cropping.
pub const CROP_EXPANSION: f32 = 0.10;
/// Attacker fine-tuning rate, gentler than initial training.
const RETRAIN_LR: f32 = 1e-3;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Precondition(String),
    /// Every published image evaded detection, so there is nothing to
    /// retrain on. For the defender this is the success case.
    #[error("no usable crops: no detection scored at least {CROP_SCORE_THRESHOLD}")]
    NoCrops,
    #[error(transparent)]
    Zoo(#[from] ZooError),
    #[error(transparent)]
    Interruption(#[from] InterruptionError),
    #[error(transparent)]
    Poison(#[from] PoisonError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Protection scheme applied to the published images in one experiment arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    /// No perturbation; the attacker sees the originals.
    Clean,
    /// Uniform noise at the same L-infinity budget, the unoptimized control.
    Noise,
    /// Disruption pattern alone (poison threshold zero).
    InterruptionOnly,
    /// The full two-stage perturbation.
    Tsdf,
}

impl Condition {
    /// Experiment order; the position doubles as the per-condition seed offset.
    pub const ALL: [Condition; 4] =
        [Condition::Clean, Condition::Noise, Condition::InterruptionOnly, Condition::Tsdf];

    pub fn label(self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::Noise => "noise",
            Condition::InterruptionOnly => "interruption-only",
            Condition::Tsdf => "tsdf",
        }
    }
}

/// One arm of the persistence experiment, before and after the attacker
/// retrains on whatever crops the protected images still yielded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct PersistenceReport {
    pub condition: Condition,
    /// Fraction of published images whose face the attacker could crop.
    pub crop_yield: f32,
    /// Mean SSIM between forgeries of protected and of clean inputs.
    pub ssim_before: f32,
    /// The same similarity after fine-tuning on the attacker's crops.
    pub ssim_after: f32,
    /// Toy Frechet distance between the two forgery batches.
    pub frechet_before: f32,
    pub frechet_after: f32,
}

/// CSV rendering of the reports, one row per condition.
pub fn persistence_csv(reports: &[PersistenceReport]) -> String {
    let mut out =
        String::from("condition,crop-yield,ssim-before,ssim-after,frechet-before,frechet-after\n");
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.condition.label(),
            r.crop_yield,
            r.ssim_before,
            r.ssim_after,
            r.frechet_before,
            r.frechet_after
        )
        .expect("string writes cannot fail");
    }
    out
}

/// Simulate the attacker's data collection: detect faces in the published
/// images, crop the best box per image with a [`CROP_EXPANSION`] margin, and
/// resize each crop to the training resolution. Returns the crops and the
/// yield, the fraction of images that produced one.
pub fn attacker_prepare_data(
    images: &[Tensor],
    detector: &DetectorModel,
) -> Result<(Vec<Tensor>, f32), HarnessError> {
    if images.is_empty() {
        return Err(HarnessError::Precondition("no images to scrape".into()));
    }
    let crops: Vec<Result<Option<Tensor>, HarnessError>> = map_ordered(images.len(), |i| {
        let image = &images[i];
        if image.shape() != [3, IMAGE_SIDE, IMAGE_SIDE] {
            return Err(HarnessError::Precondition(format!(
                "image {i} has shape {:?}, expected [3, {IMAGE_SIDE}, {IMAGE_SIDE}]",
                image.shape()
            )));
        }
        let detections = decode_detections(detector, image, CROP_SCORE_THRESHOLD)?;
        // Detections arrive sorted by score, so the first is the keeper.
        match detections.first() {
            Some(best) => Ok(Some(crop_resized(image, &best.bbox))),
            None => Ok(None),
        }
    });
    let mut kept = Vec::new();
    for crop in crops {
        if let Some(c) = crop? {
            kept.push(c);
        }
    }
    let yield_frac = kept.len() as f32 / images.len() as f32;
    Ok((kept, yield_frac))
}

/// Integer pixel window for a detection box grown by [`CROP_EXPANSION`] and
/// clamped to the frame. Never empty, even for degenerate boxes.
fn crop_window(bbox: &crate::zoo::BoxPx) -> (usize, usize, usize, usize) {
    let side = IMAGE_SIDE as f32;
    let (cx, cy) = bbox.center();
    let hw = (bbox.x_max - bbox.x_min) * 0.5 * (1.0 + CROP_EXPANSION);
    let hh = (bbox.y_max - bbox.y_min) * 0.5 * (1.0 + CROP_EXPANSION);
    let x0 = ((cx - hw).max(0.0).floor() as usize).min(IMAGE_SIDE - 1);
    let y0 = ((cy - hh).max(0.0).floor() as usize).min(IMAGE_SIDE - 1);
    let x1 = ((cx + hw).min(side).ceil() as usize).clamp(x0 + 1, IMAGE_SIDE);
    let y1 = ((cy + hh).min(side).ceil() as usize).clamp(y0 + 1, IMAGE_SIDE);
    (x0, y0, x1, y1)
}

fn crop_resized(image: &Tensor, bbox: &crate::zoo::BoxPx) -> Tensor {
    let (x0, y0, x1, y1) = crop_window(bbox);
    let (cw, ch) = (x1 - x0, y1 - y0);
    let mut patch = vec![0.0f32; 3 * ch * cw];
    let data = image.data();
    for c in 0..3 {
        for y in 0..ch {
            let src = c * IMAGE_SIDE * IMAGE_SIDE + (y0 + y) * IMAGE_SIDE + x0;
            let dst = c * ch * cw + y * cw;
            patch[dst..dst + cw].copy_from_slice(&data[src..src + cw]);
        }
    }
    let mut resized = vec![0.0f32; 3 * IMAGE_SIDE * IMAGE_SIDE];
    kernels::resize_bilinear(&patch, (3, ch, cw), (IMAGE_SIDE, IMAGE_SIDE), &mut resized);
    Tensor::from_vec(vec![3, IMAGE_SIDE, IMAGE_SIDE], resized)
        .expect("length matches shape by construction")
}

/// Fine-tune a copy of the generator on the attacker's crops; the input
/// model is never modified. Crops carry no attribute labels, so the
/// attacker assigns them round-robin.
pub fn retrain_generator(
    generator: &GeneratorModel,
    crops: &[Tensor],
    epochs: usize,
    seed: u64,
) -> Result<GeneratorModel, HarnessError> {
    if epochs == 0 {
        return Err(HarnessError::Precondition("retraining epochs must be at least 1".into()));
    }
    if crops.is_empty() {
        return Err(HarnessError::NoCrops);
    }
    for (i, crop) in crops.iter().enumerate() {
        if crop.shape() != [3, IMAGE_SIDE, IMAGE_SIDE] {
            return Err(HarnessError::Precondition(format!(
                "crop {i} has shape {:?}, expected [3, {IMAGE_SIDE}, {IMAGE_SIDE}]",
                crop.shape()
            )));
        }
    }
    let items: Vec<(&Tensor, usize)> =
        crops.iter().enumerate().map(|(i, c)| (c, i % ATTRIBUTE_COUNT)).collect();
    let mut rng = SeedStream::new(seed, Stream::TrainShuffle);
    Ok(fit_generator(generator.clone(), &items, epochs, RETRAIN_LR, &mut rng)?)
}

/// Sizing and schedule for one full persistence run.
#[derive(Debug, Clone, PartialEq)]
pub struct PersistenceConfig {
    /// Synthetic pool size; victim models train on it minus the holdout.
    pub dataset: usize,
    pub train: TrainConfig,
    pub tsdf: TsdfConfig,
    /// Images the defender publishes (a dataset prefix); both crafting and
    /// the attacker's scrape run over these.
    pub published: usize,
    /// Trailing images reserved for the forgery similarity metrics.
    pub eval_images: usize,
    /// Attacker fine-tuning epochs over the crops.
    pub retrain_epochs: usize,
}

impl Default for PersistenceConfig {
    fn default() -> Self {
        Self {
            dataset: 576,
            train: TrainConfig::default(),
            tsdf: TsdfConfig::default(),
            published: 96,
            eval_images: 48,
            retrain_epochs: 2,
        }
    }
}

impl PersistenceConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.tsdf.validate()?;
        if self.published == 0 {
            return Err(HarnessError::Precondition("published image count must be >= 1".into()));
        }
        if self.eval_images < 2 {
            return Err(HarnessError::Precondition(
                "eval split needs >= 2 images for the distribution metric".into(),
            ));
        }
        if self.published + self.eval_images > self.dataset {
            return Err(HarnessError::Precondition(format!(
                "published ({}) plus eval ({}) images exceed the dataset ({})",
                self.published, self.eval_images, self.dataset
            )));
        }
        if self.retrain_epochs == 0 {
            return Err(HarnessError::Precondition("retraining epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Run the full experiment from scratch: synthesize data, train the victim
/// models, craft the perturbations, then measure every condition.
pub fn run_persistence_experiment(
    cfg: &PersistenceConfig,
    seed: u64,
) -> Result<Vec<PersistenceReport>, HarnessError> {
    cfg.validate()?;
    let dataset = synth_dataset(cfg.dataset, seed);
    let models = train_toy_models(&dataset, &cfg.train, seed)?;
    run_persistence_with_models(&models, &dataset, cfg, seed)
}

/// [`run_persistence_experiment`] over already-trained models and an
/// existing dataset, for callers that reuse both across runs.
pub fn run_persistence_with_models(
    models: &ModelSet,
    dataset: &[SyntheticSample],
    cfg: &PersistenceConfig,
    seed: u64,
) -> Result<Vec<PersistenceReport>, HarnessError> {
    cfg.validate()?;
    if dataset.len() < cfg.published + cfg.eval_images {
        return Err(HarnessError::Precondition(format!(
            "dataset has {} samples, need at least {}",
            dataset.len(),
            cfg.published + cfg.eval_images
        )));
    }
    if models.detectors.is_empty() || models.extractors.is_empty() {
        return Err(HarnessError::Precondition("model set is missing extractors or detectors".into()));
    }

    let published: Vec<Tensor> = dataset[..cfg.published].iter().map(|s| s.image.clone()).collect();

    // Stage one runs once; the interruption-only arm deploys the pattern
    // as-is (a zero poison threshold leaves stage one untouched) and the
    // full arm layers the poison on top of the same pattern.
    let stage_one = craft_interruption(&published, &models.extractors, &cfg.tsdf.interruption)?;
    let w0 = stage_one.w;
    let eps = cfg.tsdf.interruption.epsilon;
    let mask = compute_poison_mask(&w0, cfg.tsdf.poison.tau, cfg.tsdf.poison.beta);
    let poison = craft_poison(&published, &w0, &models.detectors, &mask.values, &cfg.tsdf.poison)?;
    let delta_tsdf = combine_perturbations(&w0, &poison.delta, eps)?;
    let zero = Tensor::zeros(w0.shape().to_vec());
    let delta_interruption = combine_perturbations(&w0, &zero, eps)?;

    let eval = &dataset[dataset.len() - cfg.eval_images..];
    let mut reports = Vec::with_capacity(Condition::ALL.len());
    for (index, condition) in Condition::ALL.into_iter().enumerate() {
        let delta = match condition {
            Condition::Clean => None,
            Condition::Noise => {
                let mut rng = SeedStream::new(seed, Stream::Condition(index as u64));
                Some(uniform_noise(w0.shape(), eps, &mut rng))
            }
            Condition::InterruptionOnly => Some(delta_interruption.clone()),
            Condition::Tsdf => Some(delta_tsdf.clone()),
        };
        reports.push(run_condition(
            models,
            &published,
            eval,
            delta.as_ref(),
            condition,
            cfg.retrain_epochs,
            seed.wrapping_add(index as u64),
        )?);
    }
    Ok(reports)
}

/// One universal noise pattern within the budget, the fair control for a
/// single shared perturbation.
fn uniform_noise(shape: &[usize], epsilon: f32, rng: &mut SeedStream) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.uniform_in(-epsilon, epsilon)).collect())
        .expect("length matches shape by construction")
}

fn run_condition(
    models: &ModelSet,
    published: &[Tensor],
    eval: &[SyntheticSample],
    delta: Option<&Tensor>,
    condition: Condition,
    retrain_epochs: usize,
    retrain_seed: u64,
) -> Result<PersistenceReport, HarnessError> {
    let protected: Vec<Tensor> = published
        .iter()
        .map(|img| protect(img, delta))
        .collect::<Result<_, _>>()?;
    let (crops, crop_yield) = attacker_prepare_data(&protected, &models.detectors[0])?;
    let tuned = if crops.is_empty() {
        None
    } else {
        Some(retrain_generator(&models.generator, &crops, retrain_epochs, retrain_seed)?)
    };

    let (ssim_before, frechet_before) =
        forgery_similarity(&models.generator, &models.extractors[0], eval, delta)?;
    let (ssim_after, frechet_after) = match &tuned {
        Some(g) => forgery_similarity(g, &models.extractors[0], eval, delta)?,
        // No crops means no adaptation; the attack is frozen where it was.
        None => (ssim_before, frechet_before),
    };
    Ok(PersistenceReport {
        condition,
        crop_yield,
        ssim_before,
        ssim_after,
        frechet_before,
        frechet_after,
    })
}

fn protect(image: &Tensor, delta: Option<&Tensor>) -> Result<Tensor, HarnessError> {
    Ok(match delta {
        Some(d) => apply_perturbation(image, d)?,
        None => image.clone(),
    })
}

/// How close forgeries of protected inputs stay to forgeries of the clean
/// originals: mean SSIM over the eval split, plus the toy Frechet distance
/// between the extractor features of the two forgery batches.
fn forgery_similarity(
    generator: &GeneratorModel,
    extractor: &ExtractorModel,
    eval: &[SyntheticSample],
    delta: Option<&Tensor>,
) -> Result<(f32, f32), HarnessError> {
    struct Pair {
        ssim: f32,
        feat_protected: Tensor,
        feat_clean: Tensor,
    }
    let pairs: Vec<Result<Pair, HarnessError>> = map_ordered(eval.len(), |i| {
        let s = &eval[i];
        let perturbed = protect(&s.image, delta)?;
        let forged_protected = generator.generate(&perturbed, s.attribute_label)?;
        let forged_clean = generator.generate(&s.image, s.attribute_label)?;
        Ok(Pair {
            ssim: ssim(&forged_protected, &forged_clean)?,
            feat_protected: extractor.features_of(&forged_protected)?,
            feat_clean: extractor.features_of(&forged_clean)?,
        })
    });
    let mut ssim_sum = 0.0f32;
    let mut feats_protected = Vec::with_capacity(eval.len());
    let mut feats_clean = Vec::with_capacity(eval.len());
    for pair in pairs {
        let p = pair?;
        ssim_sum += p.ssim;
        feats_protected.push(p.feat_protected);
        feats_clean.push(p.feat_clean);
    }
    let mean_ssim = ssim_sum / eval.len() as f32;
    let frechet = frechet_toy(&feats_protected, &feats_clean)?;
    Ok((mean_ssim, frechet))
}
