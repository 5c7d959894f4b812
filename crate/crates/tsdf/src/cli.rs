//! Command-line surface tying the pipeline together: dataset synthesis,
//! model training, perturbation crafting, protection, evaluation, the
//! retraining simulation, and the poison-threshold sweep.

use crate::fusion::{
    apply_perturbation, combine_perturbations, compute_poison_mask, craft_tsdf_summarized,
    load_perturbation, save_perturbation, TsdfConfig,
};
use crate::harness::{
    persistence_csv, run_persistence_experiment, run_persistence_with_models, synth_dataset,
    HarnessError, PersistenceConfig, SyntheticSample, IMAGE_SIDE,
};
use crate::interruption::{craft_interruption, InterruptionConfig};
use crate::metrics::{
    detection_f1, frechet_toy, l2mask, psnr, srmask, ssim, MetricReport, SRMASK_SUCCESS,
};
use crate::numerics::Tensor;
use crate::poisoning::{craft_poison, PoisonConfig};
use crate::rng::{SeedStream, Stream};
use crate::runtime::map_ordered;
use crate::zoo::{
    decode_detections, load_model, save_model, train_toy_models_unchecked, BoxPx, DetectorModel,
    ExtractorModel, GeneratorModel, Model, ModelSet, TrainConfig, GATE_IOU, GATE_SCORE_THRESHOLD,
};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Full run configuration: one flat document covering both crafting stages,
/// the experiment sizing, and the file locations. Unknown keys are rejected
/// and absent keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Shared L-infinity budget for both stages.
    pub epsilon: f32,
    /// Master seed; every random stream in a run derives from it.
    pub seed: u64,

    /// Disruption ascent step size.
    pub gamma: f32,
    /// Weight of the enhanced-feature term against the plain MSE term.
    pub lambda: f32,
    /// Amplification coefficient on the discrepancy sum.
    pub alpha: f32,
    /// Amplifier temperature.
    pub sigma: f32,
    /// Stability constant for near-zero deviations.
    pub z: f32,
    /// Mixing weights for the three discrepancy components.
    pub weights: [f32; 3],
    pub iterations_interruption: usize,
    pub batch_interruption: usize,

    /// Poison descent step size.
    pub eta: f32,
    /// Separation coefficient in the poison feature target.
    pub nu: f32,
    /// Cross-detector feature fusion weights.
    pub fusion_weights: Vec<f32>,
    /// Per-tap weights inside the poison feature loss.
    pub layer_weights: Vec<f32>,
    pub iterations_poison: usize,
    /// Mask decay rate.
    pub beta: f32,
    /// Mask magnitude threshold.
    pub tau: f32,
    /// Detection score floor while crafting the poison.
    pub score_threshold: f32,
    pub batch_poison: usize,

    /// Thresholds evaluated by the sweep command.
    pub taus: Vec<f32>,

    /// Synthetic pool size for synthesis and the self-contained simulation.
    pub dataset_size: usize,
    /// Defender-published prefix of the dataset; crafting pool and scrape
    /// target.
    pub published: usize,
    /// Trailing images reserved for evaluation.
    pub eval_images: usize,
    /// Attacker fine-tuning epochs in the simulation.
    pub retrain_epochs: usize,

    pub dataset_dir: Option<PathBuf>,
    pub models_dir: Option<PathBuf>,
    /// Crafted perturbation file, for the commands that consume one.
    pub perturbation: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let i = InterruptionConfig::default();
        let p = PoisonConfig::default();
        Self {
            epsilon: i.epsilon,
            seed: 0,
            gamma: i.gamma,
            lambda: i.lambda,
            alpha: i.alpha,
            sigma: i.sigma,
            z: i.z,
            weights: i.weights,
            iterations_interruption: i.iterations,
            batch_interruption: i.batch_size,
            eta: p.eta,
            nu: p.nu,
            fusion_weights: p.fusion_weights,
            layer_weights: p.layer_weights,
            iterations_poison: p.iterations,
            beta: p.beta,
            tau: p.tau,
            score_threshold: p.score_threshold,
            batch_poison: p.batch_size,
            taus: vec![0.0, 0.2, 0.3, 0.4, 0.5],
            dataset_size: 576,
            published: 96,
            eval_images: 48,
            retrain_epochs: 2,
            dataset_dir: None,
            models_dir: None,
            perturbation: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    /// Both stage configurations under the shared budget and seed.
    pub fn tsdf(&self) -> TsdfConfig {
        TsdfConfig {
            interruption: InterruptionConfig {
                epsilon: self.epsilon,
                gamma: self.gamma,
                lambda: self.lambda,
                alpha: self.alpha,
                sigma: self.sigma,
                z: self.z,
                weights: self.weights,
                iterations: self.iterations_interruption,
                batch_size: self.batch_interruption,
                seed: self.seed,
            },
            poison: PoisonConfig {
                eta: self.eta,
                nu: self.nu,
                epsilon: self.epsilon,
                fusion_weights: self.fusion_weights.clone(),
                layer_weights: self.layer_weights.clone(),
                iterations: self.iterations_poison,
                beta: self.beta,
                tau: self.tau,
                score_threshold: self.score_threshold,
                batch_size: self.batch_poison,
                seed: self.seed,
            },
        }
    }

    /// Experiment sizing for the retraining simulation.
    pub fn persistence(&self) -> PersistenceConfig {
        PersistenceConfig {
            dataset: self.dataset_size,
            train: TrainConfig::default(),
            tsdf: self.tsdf(),
            published: self.published,
            eval_images: self.eval_images,
            retrain_epochs: self.retrain_epochs,
        }
    }

    /// Check every field against its module's declared range. Whether the
    /// published and eval splits fit a dataset is checked against the real
    /// dataset by the command that loads one.
    pub fn validate(&self) -> Result<()> {
        self.tsdf().validate()?;
        if self.taus.is_empty() {
            bail!("taus must list at least one threshold");
        }
        for &t in &self.taus {
            if !(0.0..=1.0).contains(&t) {
                bail!("taus entry {t} out of range [0, 1]");
            }
        }
        if self.dataset_size == 0 || self.published == 0 || self.eval_images == 0 {
            bail!("dataset_size, published, and eval_images must all be positive");
        }
        if self.retrain_epochs == 0 {
            bail!("retrain_epochs must be at least 1");
        }
        Ok(())
    }
}

/// Read and fully validate a run configuration file.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: RunConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Parser)]
#[command(name = "tsdf", version, about = "Two-stage protection for published face images")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate a labeled synthetic face dataset
    SynthData(CommonArgs),
    /// Train the victim models on a dataset and save them
    TrainModels(CommonArgs),
    /// Craft the two-stage perturbation against saved models
    Craft(CommonArgs),
    /// Apply a crafted perturbation to every dataset image
    Protect(CommonArgs),
    /// Forgery-disruption metrics for a crafted perturbation
    EvalInterruption(CommonArgs),
    /// Detector metrics on clean versus protected images
    EvalPoisoning(CommonArgs),
    /// Attacker scrape-and-retrain simulation across conditions
    SimulateRetrain(CommonArgs),
    /// Evaluate a list of poison thresholds on one disruption pattern
    SweepTau(CommonArgs),
}

/// Flags shared by every subcommand; each overrides its config field.
#[derive(Debug, Args)]
struct CommonArgs {
    /// Run configuration file (JSON)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override
    #[arg(long)]
    out: Option<PathBuf>,
    /// Poison threshold override
    #[arg(long)]
    tau: Option<f32>,
    /// Budget override for both stages
    #[arg(long)]
    epsilon: Option<f32>,
    /// Disruption iteration count override
    #[arg(long)]
    iters_int: Option<usize>,
    /// Poison iteration count override
    #[arg(long)]
    iters_poi: Option<usize>,
}

impl CommonArgs {
    /// Config from file (or defaults) with flag overrides applied, then
    /// re-validated so a flag cannot smuggle in an out-of-range value.
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => parse_config(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = Some(out.clone());
        }
        if let Some(tau) = self.tau {
            cfg.tau = tau;
        }
        if let Some(epsilon) = self.epsilon {
            cfg.epsilon = epsilon;
        }
        if let Some(n) = self.iters_int {
            cfg.iterations_interruption = n;
        }
        if let Some(n) = self.iters_poi {
            cfg.iterations_poison = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parse `args` and run the selected command. `--help` and `--version`
/// print and succeed; every other failure is an error for `main` to format.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(anyhow!(e.to_string())),
    };
    match &cli.command {
        Cmd::SynthData(a) => cmd_synth_data(&a.resolve()?),
        Cmd::TrainModels(a) => cmd_train_models(&a.resolve()?),
        Cmd::Craft(a) => cmd_craft(&a.resolve()?),
        Cmd::Protect(a) => cmd_protect(&a.resolve()?),
        Cmd::EvalInterruption(a) => cmd_eval_interruption(&a.resolve()?),
        Cmd::EvalPoisoning(a) => cmd_eval_poisoning(&a.resolve()?),
        Cmd::SimulateRetrain(a) => cmd_simulate_retrain(&a.resolve()?),
        Cmd::SweepTau(a) => cmd_sweep_tau(&a.resolve()?),
    }
}

// ── file layout ──

const META_FILE: &str = "meta.json";
const IMAGES_DIR: &str = "images";
const MASKS_DIR: &str = "masks";
const PROTECTED_DIR: &str = "protected";
const PERTURBATION_FILE: &str = "perturbation.tsdp";
const CRAFT_REPORT: &str = "craft.json";
const TRAIN_REPORT: &str = "evaluation.json";
const INTERRUPTION_REPORT: &str = "interruption_report.json";
const POISONING_REPORT: &str = "poisoning_report.json";
const PERSISTENCE_JSON: &str = "persistence.json";
const PERSISTENCE_CSV: &str = "persistence.csv";
const SWEEP_JSON: &str = "tau_sweep.json";
const SWEEP_CSV: &str = "tau_sweep.csv";
const GENERATOR_FILE: &str = "generator.tsdm";

fn extractor_file(i: usize) -> String {
    format!("extractor_{i}.tsdm")
}

fn detector_file(i: usize) -> String {
    format!("detector_{i}.tsdm")
}

fn sample_file(i: usize) -> String {
    format!("{i:04}.png")
}

fn require(path: &Option<PathBuf>, what: &str, field: &str) -> Result<PathBuf> {
    path.clone().ok_or_else(|| anyhow!("no {what}: set {field} in the config or pass --out"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

// ── image and dataset files ──

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save_png_rgb(path: &Path, t: &Tensor) -> Result<()> {
    let (c, h, w) = t.chw();
    if c != 3 {
        bail!("expected 3 channels, got {c}");
    }
    let data = t.data();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([quantize(data[i]), quantize(data[h * w + i]), quantize(data[2 * h * w + i])])
    });
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

fn load_png_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for ch in 0..3 {
            data[ch * h * w + i] = px.0[ch] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(vec![3, h, w], data)?)
}

fn save_png_mask(path: &Path, t: &Tensor) -> Result<()> {
    let (c, h, w) = t.chw();
    if c != 1 {
        bail!("expected 1 channel, got {c}");
    }
    let data = t.data();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if data[y as usize * w + x as usize] >= 0.5 { 255 } else { 0 }])
    });
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

fn load_png_mask(path: &Path) -> Result<Tensor> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; h * w];
    for (x, y, px) in img.enumerate_pixels() {
        data[y as usize * w + x as usize] = if px.0[0] >= 128 { 1.0 } else { 0.0 };
    }
    Ok(Tensor::from_vec(vec![1, h, w], data)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    count: usize,
    seed: u64,
    samples: Vec<SampleMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleMeta {
    face_box: [f32; 4],
    attribute: usize,
}

fn save_dataset(dir: &Path, dataset: &[SyntheticSample], seed: u64) -> Result<()> {
    fs::create_dir_all(dir.join(IMAGES_DIR))?;
    fs::create_dir_all(dir.join(MASKS_DIR))?;
    for (i, s) in dataset.iter().enumerate() {
        save_png_rgb(&dir.join(IMAGES_DIR).join(sample_file(i)), &s.image)?;
        save_png_mask(&dir.join(MASKS_DIR).join(sample_file(i)), &s.face_mask)?;
    }
    let meta = DatasetMeta {
        count: dataset.len(),
        seed,
        samples: dataset
            .iter()
            .map(|s| SampleMeta {
                face_box: [s.face_box.x_min, s.face_box.y_min, s.face_box.x_max, s.face_box.y_max],
                attribute: s.attribute_label,
            })
            .collect(),
    };
    write_json(&dir.join(META_FILE), &meta)
}

fn load_dataset(dir: &Path) -> Result<Vec<SyntheticSample>> {
    let meta_path = dir.join(META_FILE);
    let text =
        fs::read_to_string(&meta_path).with_context(|| format!("reading {}", meta_path.display()))?;
    let meta: DatasetMeta =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", meta_path.display()))?;
    if meta.samples.len() != meta.count {
        bail!("{}: count {} does not match {} samples", meta_path.display(), meta.count, meta.samples.len());
    }
    let mut dataset = Vec::with_capacity(meta.count);
    for (i, m) in meta.samples.iter().enumerate() {
        let image = load_png_rgb(&dir.join(IMAGES_DIR).join(sample_file(i)))?;
        let face_mask = load_png_mask(&dir.join(MASKS_DIR).join(sample_file(i)))?;
        if image.shape() != [3, IMAGE_SIDE, IMAGE_SIDE] {
            bail!("image {i} has shape {:?}, expected 3x{IMAGE_SIDE}x{IMAGE_SIDE}", image.shape());
        }
        dataset.push(SyntheticSample {
            image,
            face_box: BoxPx {
                x_min: m.face_box[0],
                y_min: m.face_box[1],
                x_max: m.face_box[2],
                y_max: m.face_box[3],
            },
            face_mask,
            attribute_label: m.attribute,
        });
    }
    Ok(dataset)
}

// ── model files ──

fn save_models(dir: &Path, models: &ModelSet) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, e) in models.extractors.iter().enumerate() {
        save_model(&Model::Extractor(e.clone()), &dir.join(extractor_file(i)))?;
    }
    save_model(&Model::Generator(models.generator.clone()), &dir.join(GENERATOR_FILE))?;
    for (i, d) in models.detectors.iter().enumerate() {
        save_model(&Model::Detector(d.clone()), &dir.join(detector_file(i)))?;
    }
    Ok(())
}

fn load_models(dir: &Path) -> Result<ModelSet> {
    fn load_family<M>(
        dir: &Path,
        name: impl Fn(usize) -> String,
        pick: impl Fn(Model) -> Option<M>,
        what: &str,
    ) -> Result<Vec<M>> {
        let mut out = Vec::new();
        loop {
            let path = dir.join(name(out.len()));
            if !path.exists() {
                break;
            }
            let model = load_model(&path)?;
            out.push(pick(model).ok_or_else(|| {
                anyhow!("{} holds the wrong model kind for {what}", path.display())
            })?);
        }
        if out.is_empty() {
            bail!("no {what} files found in {}", dir.display());
        }
        Ok(out)
    }

    let extractors: Vec<ExtractorModel> = load_family(
        dir,
        extractor_file,
        |m| match m {
            Model::Extractor(e) => Some(e),
            _ => None,
        },
        "extractor",
    )?;
    let detectors: Vec<DetectorModel> = load_family(
        dir,
        detector_file,
        |m| match m {
            Model::Detector(d) => Some(d),
            _ => None,
        },
        "detector",
    )?;
    let generator_path = dir.join(GENERATOR_FILE);
    let generator: GeneratorModel = match load_model(&generator_path)
        .with_context(|| format!("loading {}", generator_path.display()))?
    {
        Model::Generator(g) => g,
        _ => bail!("{} holds the wrong model kind for generator", generator_path.display()),
    };
    Ok(ModelSet { extractors, generator, detectors })
}

// ── evaluation ──

/// Pool metrics for one protection setting over `samples`: mean masked
/// distortion and its success rate, imperceptibility PSNR, forged-output
/// SSIM, mean detector F1 on the protected images, and the feature-space
/// distance between the forged batches.
pub fn evaluate_condition(
    models: &ModelSet,
    samples: &[SyntheticSample],
    delta: Option<&Tensor>,
    condition: &str,
) -> Result<MetricReport, HarnessError> {
    if samples.is_empty() {
        return Err(HarnessError::Precondition("no samples to evaluate".into()));
    }
    if models.detectors.is_empty() || models.extractors.is_empty() {
        return Err(HarnessError::Precondition("model set is missing extractors or detectors".into()));
    }
    struct Row {
        psnr: f32,
        ssim: f32,
        l2: f32,
        f1: f32,
        feat_protected: Tensor,
        feat_clean: Tensor,
    }
    let rows: Vec<Result<Row, HarnessError>> = map_ordered(samples.len(), |i| {
        let s = &samples[i];
        let protected = match delta {
            Some(d) => apply_perturbation(&s.image, d)?,
            None => s.image.clone(),
        };
        let forged_protected = models.generator.generate(&protected, s.attribute_label)?;
        let forged_clean = models.generator.generate(&s.image, s.attribute_label)?;
        let mut f1 = 0.0f32;
        for det in &models.detectors {
            let found = decode_detections(det, &protected, GATE_SCORE_THRESHOLD)?;
            f1 += detection_f1(&found, &[s.face_box], GATE_IOU);
        }
        Ok(Row {
            psnr: psnr(&protected, &s.image)?,
            ssim: ssim(&forged_protected, &forged_clean)?,
            l2: l2mask(&forged_protected, &forged_clean, &s.face_box)?,
            f1: f1 / models.detectors.len() as f32,
            feat_protected: models.extractors[0].features_of(&forged_protected)?,
            feat_clean: models.extractors[0].features_of(&forged_clean)?,
        })
    });
    let n = samples.len() as f32;
    let mut psnr_sum = 0.0f32;
    let mut ssim_sum = 0.0f32;
    let mut f1_sum = 0.0f32;
    let mut l2_values = Vec::with_capacity(samples.len());
    let mut feats_protected = Vec::with_capacity(samples.len());
    let mut feats_clean = Vec::with_capacity(samples.len());
    for row in rows {
        let r = row?;
        psnr_sum += r.psnr;
        ssim_sum += r.ssim;
        f1_sum += r.f1;
        l2_values.push(r.l2);
        feats_protected.push(r.feat_protected);
        feats_clean.push(r.feat_clean);
    }
    Ok(MetricReport {
        l2mask: l2_values.iter().sum::<f32>() / n,
        srmask: srmask(&l2_values, SRMASK_SUCCESS)?,
        psnr: psnr_sum / n,
        ssim: ssim_sum / n,
        f1: f1_sum / n,
        frechet: frechet_toy(&feats_protected, &feats_clean)?,
        condition: condition.to_string(),
    })
}

/// One threshold's worth of the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TauRow {
    pub tau: f32,
    pub l2mask: f32,
    pub srmask: f32,
    pub psnr: f32,
    pub ssim: f32,
    pub f1: f32,
    pub frechet: f32,
}

/// Craft one disruption pattern, then rebuild the poison at each threshold
/// and evaluate the combined perturbation. Shares the pattern across rows
/// so the sweep isolates the threshold's effect.
pub fn sweep_tau(
    taus: &[f32],
    models: &ModelSet,
    dataset: &[SyntheticSample],
    cfg: &TsdfConfig,
    published: usize,
    eval_images: usize,
) -> Result<Vec<TauRow>, HarnessError> {
    cfg.validate()?;
    if taus.is_empty() {
        return Err(HarnessError::Precondition("taus must list at least one threshold".into()));
    }
    for &t in taus {
        if !(0.0..=1.0).contains(&t) {
            return Err(HarnessError::Precondition(format!("taus entry {t} out of range [0, 1]")));
        }
    }
    if published == 0 || published + eval_images > dataset.len() || eval_images == 0 {
        return Err(HarnessError::Precondition(format!(
            "published ({published}) plus eval ({eval_images}) images must fit the dataset ({})",
            dataset.len()
        )));
    }
    let pool: Vec<Tensor> = dataset[..published].iter().map(|s| s.image.clone()).collect();
    let eval = &dataset[dataset.len() - eval_images..];
    let stage_one = craft_interruption(&pool, &models.extractors, &cfg.interruption)?;
    let mut rows = Vec::with_capacity(taus.len());
    for &tau in taus {
        let mask = compute_poison_mask(&stage_one.w, tau, cfg.poison.beta);
        let poison_cfg = PoisonConfig { tau, ..cfg.poison.clone() };
        let poison = craft_poison(&pool, &stage_one.w, &models.detectors, &mask.values, &poison_cfg)?;
        let delta = combine_perturbations(&stage_one.w, &poison.delta, cfg.interruption.epsilon)?;
        let report = evaluate_condition(models, eval, Some(&delta), &format!("tau-{tau}"))?;
        rows.push(TauRow {
            tau,
            l2mask: report.l2mask,
            srmask: report.srmask,
            psnr: report.psnr,
            ssim: report.ssim,
            f1: report.f1,
            frechet: report.frechet,
        });
    }
    Ok(rows)
}

fn sweep_csv(rows: &[TauRow]) -> String {
    let mut out = String::from("tau,l2mask,srmask,psnr,ssim,f1,frechet\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.tau, r.l2mask, r.srmask, r.psnr, r.ssim, r.f1, r.frechet
        )
        .expect("string writes cannot fail");
    }
    out
}

// ── commands ──

fn cmd_synth_data(cfg: &RunConfig) -> Result<()> {
    let out = require(&cfg.out_dir, "output directory", "out_dir")?;
    let dataset = synth_dataset(cfg.dataset_size, cfg.seed);
    save_dataset(&out, &dataset, cfg.seed)?;
    println!("wrote {} samples to {}", dataset.len(), out.display());
    Ok(())
}

fn cmd_train_models(cfg: &RunConfig) -> Result<()> {
    let dataset_dir = require(&cfg.dataset_dir, "dataset directory", "dataset_dir")?;
    let out = require(&cfg.out_dir, "output directory", "out_dir")?;
    let dataset = load_dataset(&dataset_dir)?;
    let (models, eval) = train_toy_models_unchecked(&dataset, &TrainConfig::default(), cfg.seed)?;
    eval.enforce()?;
    fs::create_dir_all(&out)?;
    save_models(&out, &models)?;
    #[derive(Serialize)]
    #[serde(rename_all = "kebab-case")]
    struct TrainReport {
        generator_psnr: f32,
        detector_f1: Vec<f32>,
    }
    write_json(
        &out.join(TRAIN_REPORT),
        &TrainReport { generator_psnr: eval.generator_psnr, detector_f1: eval.detector_f1 },
    )?;
    println!(
        "trained {} extractors, 1 generator, {} detectors into {}",
        models.extractors.len(),
        models.detectors.len(),
        out.display()
    );
    Ok(())
}

fn published_pool(cfg: &RunConfig, dataset: &[SyntheticSample]) -> Result<Vec<Tensor>> {
    if dataset.len() < cfg.published {
        bail!("dataset has {} images but published is {}", dataset.len(), cfg.published);
    }
    Ok(dataset[..cfg.published].iter().map(|s| s.image.clone()).collect())
}

fn eval_split<'d>(cfg: &RunConfig, dataset: &'d [SyntheticSample]) -> Result<&'d [SyntheticSample]> {
    if dataset.len() < cfg.eval_images {
        bail!("dataset has {} images but eval_images is {}", dataset.len(), cfg.eval_images);
    }
    Ok(&dataset[dataset.len() - cfg.eval_images..])
}

fn cmd_craft(cfg: &RunConfig) -> Result<()> {
    let models_dir = require(&cfg.models_dir, "models directory", "models_dir")?;
    let dataset_dir = require(&cfg.dataset_dir, "dataset directory", "dataset_dir")?;
    let out = require(&cfg.out_dir, "output directory", "out_dir")?;
    let models = load_models(&models_dir)?;
    let dataset = load_dataset(&dataset_dir)?;
    let pool = published_pool(cfg, &dataset)?;
    let (perturbation, summary) = craft_tsdf_summarized(
        &pool,
        &models.extractors,
        &models.detectors,
        &cfg.tsdf(),
        &mut |_| {},
        &mut |_| {},
    )?;
    fs::create_dir_all(&out)?;
    save_perturbation(&perturbation, &out.join(PERTURBATION_FILE))?;
    write_json(&out.join(CRAFT_REPORT), &summary)?;
    println!("crafted perturbation over {} images into {}", pool.len(), out.display());
    Ok(())
}

fn cmd_protect(cfg: &RunConfig) -> Result<()> {
    let dataset_dir = require(&cfg.dataset_dir, "dataset directory", "dataset_dir")?;
    let perturbation_path = require(&cfg.perturbation, "perturbation file", "perturbation")?;
    let out = require(&cfg.out_dir, "output directory", "out_dir")?;
    let dataset = load_dataset(&dataset_dir)?;
    let perturbation = load_perturbation(&perturbation_path)?;
    let dir = out.join(PROTECTED_DIR);
    fs::create_dir_all(&dir)?;
    for (i, s) in dataset.iter().enumerate() {
        let protected = apply_perturbation(&s.image, &perturbation.delta_final)?;
        save_png_rgb(&dir.join(sample_file(i)), &protected)?;
    }
    println!("protected {} images into {}", dataset.len(), dir.display());
    Ok(())
}

fn cmd_eval_interruption(cfg: &RunConfig) -> Result<()> {
    let models_dir = require(&cfg.models_dir, "models directory", "models_dir")?;
    let dataset_dir = require(&cfg.dataset_dir, "dataset directory", "dataset_dir")?;
    let perturbation_path = require(&cfg.perturbation, "perturbation file", "perturbation")?;
    let out = require(&cfg.out_dir, "output directory", "out_dir")?;
    let models = load_models(&models_dir)?;
    let dataset = load_dataset(&dataset_dir)?;
    let eval = eval_split(cfg, &dataset)?;
    let perturbation = load_perturbation(&perturbation_path)?;
    let mut rng = SeedStream::new(cfg.seed, Stream::NoiseBaseline);
    let shape = perturbation.delta_final.shape().to_vec();
    let n: usize = shape.iter().product();
    let noise = Tensor::from_vec(
        shape,
        (0..n).map(|_| rng.uniform_in(-perturbation.epsilon, perturbation.epsilon)).collect(),
    )
    .expect("length matches shape by construction");
    let rows = vec![
        evaluate_condition(&models, eval, Some(&perturbation.delta_final), "tsdf")?,
        evaluate_condition(&models, eval, Some(&noise), "noise")?,
    ];
    fs::create_dir_all(&out)?;
    write_json(&out.join(INTERRUPTION_REPORT), &rows)?;
    println!("wrote {}", out.join(INTERRUPTION_REPORT).display());
    Ok(())
}

fn cmd_eval_poisoning(cfg: &RunConfig) -> Result<()> {
    let models_dir = require(&cfg.models_dir, "models directory", "models_dir")?;
    let dataset_dir = require(&cfg.dataset_dir, "dataset directory", "dataset_dir")?;
    let perturbation_path = require(&cfg.perturbation, "perturbation file", "perturbation")?;
    let out = require(&cfg.out_dir, "output directory", "out_dir")?;
    let models = load_models(&models_dir)?;
    let dataset = load_dataset(&dataset_dir)?;
    let eval = eval_split(cfg, &dataset)?;
    let perturbation = load_perturbation(&perturbation_path)?;
    let rows = vec![
        evaluate_condition(&models, eval, None, "clean")?,
        evaluate_condition(&models, eval, Some(&perturbation.delta_final), "tsdf")?,
    ];
    fs::create_dir_all(&out)?;
    write_json(&out.join(POISONING_REPORT), &rows)?;
    println!("wrote {}", out.join(POISONING_REPORT).display());
    Ok(())
}

fn cmd_simulate_retrain(cfg: &RunConfig) -> Result<()> {
    let out = require(&cfg.out_dir, "output directory", "out_dir")?;
    let reports = match &cfg.models_dir {
        Some(models_dir) => {
            let dataset_dir = require(&cfg.dataset_dir, "dataset directory", "dataset_dir")?;
            let models = load_models(models_dir)?;
            let dataset = load_dataset(&dataset_dir)?;
            run_persistence_with_models(&models, &dataset, &cfg.persistence(), cfg.seed)?
        }
        None => run_persistence_experiment(&cfg.persistence(), cfg.seed)?,
    };
    fs::create_dir_all(&out)?;
    write_json(&out.join(PERSISTENCE_JSON), &reports)?;
    fs::write(out.join(PERSISTENCE_CSV), persistence_csv(&reports))?;
    println!("wrote {} condition reports to {}", reports.len(), out.display());
    Ok(())
}

fn cmd_sweep_tau(cfg: &RunConfig) -> Result<()> {
    let models_dir = require(&cfg.models_dir, "models directory", "models_dir")?;
    let dataset_dir = require(&cfg.dataset_dir, "dataset directory", "dataset_dir")?;
    let out = require(&cfg.out_dir, "output directory", "out_dir")?;
    let models = load_models(&models_dir)?;
    let dataset = load_dataset(&dataset_dir)?;
    let rows =
        sweep_tau(&cfg.taus, &models, &dataset, &cfg.tsdf(), cfg.published, cfg.eval_images)?;
    fs::create_dir_all(&out)?;
    write_json(&out.join(SWEEP_JSON), &rows)?;
    fs::write(out.join(SWEEP_CSV), sweep_csv(&rows))?;
    println!("wrote {} threshold rows to {}", rows.len(), out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("config.json");
        fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn empty_config_takes_all_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(&write_config(dir.path(), "{}")).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.epsilon, 0.05);
        assert_eq!(cfg.gamma, 0.001);
        assert_eq!(cfg.lambda, 0.1);
        assert_eq!(cfg.tau, 0.3);
        assert_eq!(cfg.iterations_interruption, 50);
        assert_eq!(cfg.iterations_poison, 20);
    }

    #[test]
    fn out_of_range_tau_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let err = parse_config(&write_config(dir.path(), r#"{"tau": 1.5}"#)).unwrap_err();
        assert!(format!("{err:#}").contains("tau"), "{err:#}");
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let err = parse_config(&write_config(dir.path(), r#"{"tauu": 0.1}"#)).unwrap_err();
        assert!(format!("{err:#}").contains("tauu"), "{err:#}");
    }

    #[test]
    fn malformed_json_reports_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let err = parse_config(&write_config(dir.path(), "{\n  \"tau\": oops\n}")).unwrap_err();
        assert!(format!("{err:#}").contains("line 2"), "{err:#}");
    }

    #[test]
    fn config_round_trips_through_serialization() {
        let mut cfg = RunConfig::default();
        cfg.epsilon = 0.05;
        cfg.tau = 0.25;
        cfg.out_dir = Some(PathBuf::from("/tmp/run"));
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn missing_config_file_is_an_error() {
        let err = parse_config(Path::new("/nonexistent/config.json")).unwrap_err();
        assert!(format!("{err:#}").contains("config.json"), "{err:#}");
    }

    #[test]
    fn flags_override_config_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), r#"{"tau": 0.3, "seed": 5}"#);
        let args = CommonArgs {
            config: Some(path),
            seed: Some(9),
            out: Some(PathBuf::from("/tmp/x")),
            tau: Some(0.1),
            epsilon: None,
            iters_int: Some(3),
            iters_poi: None,
        };
        let cfg = args.resolve().unwrap();
        assert_eq!(cfg.tau, 0.1);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.out_dir, Some(PathBuf::from("/tmp/x")));
        assert_eq!(cfg.iterations_interruption, 3);
        assert_eq!(cfg.iterations_poison, 20);
    }

    #[test]
    fn flag_values_are_validated_too() {
        let args = CommonArgs {
            config: None,
            seed: None,
            out: None,
            tau: Some(2.0),
            epsilon: None,
            iters_int: None,
            iters_poi: None,
        };
        let err = args.resolve().unwrap_err();
        assert!(format!("{err:#}").contains("tau"), "{err:#}");
    }

    #[test]
    fn help_prints_and_succeeds() {
        assert!(run(["tsdf", "--help"]).is_ok());
        assert!(run(["tsdf", "craft", "--help"]).is_ok());
    }

    #[test]
    fn unknown_subcommand_fails() {
        assert!(run(["tsdf", "frobnicate"]).is_err());
    }

    #[test]
    fn missing_required_paths_fail_clearly() {
        let err = run(["tsdf", "synth-data"]).unwrap_err();
        assert!(format!("{err:#}").contains("out"), "{err:#}");
        let err = run(["tsdf", "craft", "--out", "/tmp/x"]).unwrap_err();
        assert!(format!("{err:#}").contains("models_dir"), "{err:#}");
    }

    #[test]
    fn dataset_survives_the_disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = synth_dataset(3, 42);
        save_dataset(dir.path(), &dataset, 42).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), dataset.len());
        for (a, b) in back.iter().zip(&dataset) {
            assert_eq!(a.face_box, b.face_box);
            assert_eq!(a.attribute_label, b.attribute_label);
            assert_eq!(a.face_mask.data(), b.face_mask.data());
            let max_err = a
                .image
                .data()
                .iter()
                .zip(b.image.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max);
            assert!(max_err <= 0.5 / 255.0 + 1e-6, "quantization error {max_err}");
        }
    }

    #[test]
    fn synth_data_command_writes_bit_identical_datasets() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let run_into = |dir: &Path| {
            let cfg = write_config(
                dir,
                &format!(r#"{{"dataset_size": 2, "out_dir": "{}"}}"#, dir.join("data").display()),
            );
            run(["tsdf".into(), "synth-data".into(), "--config".into(), cfg.display().to_string()])
                .unwrap();
        };
        run_into(a.path());
        run_into(b.path());
        for rel in ["meta.json", "images/0000.png", "masks/0001.png"] {
            let x = fs::read(a.path().join("data").join(rel)).unwrap();
            let y = fs::read(b.path().join("data").join(rel)).unwrap();
            assert_eq!(x, y, "{rel} differs between identical runs");
        }
    }

    #[test]
    fn sweep_rejects_bad_thresholds() {
        let models_missing = sweep_tau(
            &[],
            &ModelSet { extractors: vec![], generator: test_generator(), detectors: vec![] },
            &[],
            &TsdfConfig::default(),
            1,
            1,
        );
        assert!(models_missing.is_err());
    }

    fn test_generator() -> GeneratorModel {
        crate::zoo::fresh_generator(&mut SeedStream::new(1, Stream::ModelInit))
    }

    #[test]
    fn metric_report_keys_are_flat_and_fixed() {
        let report = MetricReport {
            l2mask: 0.1,
            srmask: 0.5,
            psnr: 30.0,
            ssim: 0.9,
            f1: 1.0,
            frechet: 0.0,
            condition: "clean".into(),
        };
        let json = serde_json::to_string(&report).unwrap();
        for key in ["l2mask", "srmask", "psnr", "ssim", "f1", "frechet", "condition"] {
            assert!(json.contains(&format!("\"{key}\"")), "{json}");
        }
    }

    #[test]
    fn tau_row_csv_matches_header() {
        let rows = vec![TauRow {
            tau: 0.3,
            l2mask: 0.1,
            srmask: 1.0,
            psnr: 30.0,
            ssim: 0.5,
            f1: 0.8,
            frechet: 2.0,
        }];
        let csv = sweep_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "tau,l2mask,srmask,psnr,ssim,f1,frechet");
        assert_eq!(lines.next().unwrap(), "0.3,0.1,1,30,0.5,0.8,2");
    }
}
