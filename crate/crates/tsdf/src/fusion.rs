//! Intensity separation and end-to-end orchestration: the disruption
//! pattern claims the high-intensity regions, the poison lives in an
//! exponentially attenuated mask over the rest, and a final clip merges
//! both into one budget-bounded perturbation.

use crate::interruption::{
    craft_interruption_observed, CraftRecord, InterruptionConfig, InterruptionError,
};
use crate::numerics::{clip_range, NumericsError, Tensor};
use crate::poisoning::{craft_poison_observed, PoisonConfig, PoisonError, PoisonRecord};
use crate::zoo::{DetectorModel, ExtractorModel};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("numerics failure: {0}")]
    Numerics(#[from] NumericsError),
    #[error("disruption stage failed: {0}")]
    Interruption(#[from] InterruptionError),
    #[error("poisoning stage failed: {0}")]
    Poison(#[from] PoisonError),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed perturbation file at byte {offset}: {what}")]
    Format { offset: u64, what: String },
    #[error("unsupported perturbation format version {found}, expected {supported}")]
    UnsupportedVersion { found: u16, supported: u16 },
}

pub const PERTURBATION_MAGIC: [u8; 4] = *b"TSDP";
pub const PERTURBATION_VERSION: u16 = 1;

/// Dimension sanity cap; matches the model file format.
const MAX_DIM: u32 = 1 << 20;

/// Where the poison is allowed to live: full strength where the disruption
/// pattern is silent, decaying toward its loud regions, zero at and above
/// the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct PoisonMask {
    pub values: Tensor,
}

/// Mask the poisoning stage writes under: exp(-beta * |w0|) wherever
/// |w0| < tau, zero elsewhere. The threshold is strict, so tau = 0 yields
/// an empty mask and disables poisoning.
pub fn compute_poison_mask(w0: &Tensor, tau: f32, beta: f32) -> PoisonMask {
    assert!(tau >= 0.0, "tau must be nonnegative, got {tau}");
    assert!(beta >= 0.0, "beta must be nonnegative, got {beta}");
    let data = w0
        .data()
        .iter()
        .map(|&v| {
            let a = v.abs();
            if a < tau {
                (-beta * a).exp()
            } else {
                0.0
            }
        })
        .collect();
    PoisonMask {
        values: Tensor::from_vec(w0.shape().to_vec(), data)
            .expect("length matches shape by construction"),
    }
}

/// Merge the two stages into the deliverable perturbation: the elementwise
/// sum clipped back into the budget.
pub fn combine_perturbations(
    w0: &Tensor,
    delta: &Tensor,
    epsilon: f32,
) -> Result<Tensor, FusionError> {
    if w0.shape() != delta.shape() {
        return Err(FusionError::Precondition(format!(
            "perturbation shapes differ: {:?} vs {:?}",
            w0.shape(),
            delta.shape()
        )));
    }
    let sum: Vec<f32> = w0.data().iter().zip(delta.data()).map(|(&a, &b)| a + b).collect();
    let t = Tensor::from_vec(w0.shape().to_vec(), sum).expect("shapes match");
    Ok(clip_range(&t, -epsilon, epsilon)?)
}

/// Protect an image: add the perturbation and clamp back to valid pixels.
pub fn apply_perturbation(image: &Tensor, delta_final: &Tensor) -> Result<Tensor, FusionError> {
    if image.shape() != delta_final.shape() {
        return Err(FusionError::Precondition(format!(
            "image shape {:?} does not match perturbation shape {:?}",
            image.shape(),
            delta_final.shape()
        )));
    }
    let sum: Vec<f32> =
        image.data().iter().zip(delta_final.data()).map(|(&a, &b)| a + b).collect();
    let t = Tensor::from_vec(image.shape().to_vec(), sum).expect("shapes match");
    Ok(clip_range(&t, 0.0, 1.0)?)
}

/// Both crafting stages under one roof. The budgets must agree; tau and
/// beta live on the poisoning side.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TsdfConfig {
    pub interruption: InterruptionConfig,
    pub poison: PoisonConfig,
}

impl TsdfConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        self.interruption.validate()?;
        self.poison.validate()?;
        if self.interruption.epsilon != self.poison.epsilon {
            return Err(FusionError::Precondition(format!(
                "stage budgets differ: {} vs {}",
                self.interruption.epsilon, self.poison.epsilon
            )));
        }
        Ok(())
    }
}

/// The finished two-stage perturbation and its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct TsdfPerturbation {
    /// Disruption pattern from stage one.
    pub w0: Tensor,
    /// Poison from stage two, confined to the mask.
    pub delta_poison: Tensor,
    /// Deployable perturbation: clip(w0 + delta_poison) within the budget.
    pub delta_final: Tensor,
    /// The shared L-infinity budget both stages were crafted under.
    pub epsilon: f32,
}

/// Run both stages end to end: craft the disruption pattern, derive the
/// mask from it, craft the poison inside the mask, combine.
pub fn craft_tsdf(
    images: &[Tensor],
    extractors: &[ExtractorModel],
    detectors: &[DetectorModel],
    cfg: &TsdfConfig,
) -> Result<TsdfPerturbation, FusionError> {
    craft_tsdf_observed(images, extractors, detectors, cfg, &mut |_| {}, &mut |_| {})
}

/// [`craft_tsdf`] reporting each stage's optimizer steps to observers.
pub fn craft_tsdf_observed(
    images: &[Tensor],
    extractors: &[ExtractorModel],
    detectors: &[DetectorModel],
    cfg: &TsdfConfig,
    interruption_observer: &mut dyn FnMut(CraftRecord),
    poison_observer: &mut dyn FnMut(PoisonRecord),
) -> Result<TsdfPerturbation, FusionError> {
    craft_tsdf_summarized(images, extractors, detectors, cfg, interruption_observer, poison_observer)
        .map(|(p, _)| p)
}

/// Objective movement of both stages, for run reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct CraftSummary {
    pub interruption_initial_loss: f32,
    pub interruption_final_loss: f32,
    pub poison_initial_objective: f32,
    pub poison_final_objective: f32,
}

/// [`craft_tsdf_observed`] also returning each stage's pool objective
/// before and after its optimization.
pub fn craft_tsdf_summarized(
    images: &[Tensor],
    extractors: &[ExtractorModel],
    detectors: &[DetectorModel],
    cfg: &TsdfConfig,
    interruption_observer: &mut dyn FnMut(CraftRecord),
    poison_observer: &mut dyn FnMut(PoisonRecord),
) -> Result<(TsdfPerturbation, CraftSummary), FusionError> {
    cfg.validate()?;
    let epsilon = cfg.interruption.epsilon;
    let disruption =
        craft_interruption_observed(images, extractors, &cfg.interruption, interruption_observer)?;
    let mask = compute_poison_mask(&disruption.w, cfg.poison.tau, cfg.poison.beta);
    let poison = craft_poison_observed(
        images,
        &disruption.w,
        detectors,
        &mask.values,
        &cfg.poison,
        poison_observer,
    )?;
    let delta_final = combine_perturbations(&disruption.w, &poison.delta, epsilon)?;
    let summary = CraftSummary {
        interruption_initial_loss: disruption.initial_loss,
        interruption_final_loss: disruption.final_loss,
        poison_initial_objective: poison.initial_objective,
        poison_final_objective: poison.final_objective,
    };
    let perturbation = TsdfPerturbation {
        w0: disruption.w,
        delta_poison: poison.delta,
        delta_final,
        epsilon,
    };
    Ok((perturbation, summary))
}

/// Write the perturbation to `path`. Same struct in, same bytes out.
pub fn save_perturbation(p: &TsdfPerturbation, path: &Path) -> Result<(), FusionError> {
    let (c, h, w) = p.w0.chw();
    if p.delta_poison.shape() != p.w0.shape() || p.delta_final.shape() != p.w0.shape() {
        return Err(FusionError::Precondition(format!(
            "component shapes differ: {:?}, {:?}, {:?}",
            p.w0.shape(),
            p.delta_poison.shape(),
            p.delta_final.shape()
        )));
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&PERTURBATION_MAGIC)?;
    out.write_all(&PERTURBATION_VERSION.to_le_bytes())?;
    out.write_all(&p.epsilon.to_le_bytes())?;
    for d in [c, h, w] {
        let d = u32::try_from(d)
            .map_err(|_| FusionError::Precondition("dimension exceeds format".into()))?;
        out.write_all(&d.to_le_bytes())?;
    }
    for t in [&p.w0, &p.delta_poison, &p.delta_final] {
        for &v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

struct TrackedReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> TrackedReader<R> {
    fn fail(&self, what: impl Into<String>) -> FusionError {
        FusionError::Format {
            offset: self.offset,
            what: what.into(),
        }
    }

    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<(), FusionError> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                self.fail(format!("file truncated while reading {what}"))
            } else {
                FusionError::Io(e)
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32(&mut self, what: &str) -> Result<u32, FusionError> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_f32(&mut self, what: &str) -> Result<f32, FusionError> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(f32::from_le_bytes(b))
    }
}

/// Read a perturbation written by [`save_perturbation`], verifying the
/// stored invariants: matching shapes, the budget bound, and that the
/// final component really is the clipped sum of the other two.
pub fn load_perturbation(path: &Path) -> Result<TsdfPerturbation, FusionError> {
    let mut r = TrackedReader {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic, "magic")?;
    if magic != PERTURBATION_MAGIC {
        return Err(FusionError::Format {
            offset: 0,
            what: format!("bad magic {magic:02x?}"),
        });
    }
    let mut vb = [0u8; 2];
    r.read_exact(&mut vb, "format version")?;
    let version = u16::from_le_bytes(vb);
    if version != PERTURBATION_VERSION {
        return Err(FusionError::UnsupportedVersion {
            found: version,
            supported: PERTURBATION_VERSION,
        });
    }
    let epsilon = r.read_f32("epsilon")?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(r.fail(format!("epsilon {epsilon} out of range")));
    }
    let mut dims = [0usize; 3];
    for (d, what) in dims.iter_mut().zip(["channel count", "height", "width"]) {
        let v = r.read_u32(what)?;
        if v == 0 || v > MAX_DIM {
            return Err(r.fail(format!("{what} {v} out of range 1..={MAX_DIM}")));
        }
        *d = v as usize;
    }
    let n = dims[0] * dims[1] * dims[2];
    let read_payload = |r: &mut TrackedReader<_>, what: &str| -> Result<Tensor, FusionError> {
        let mut data = vec![0.0f32; n];
        let mut buf = [0u8; 4];
        for v in &mut data {
            r.read_exact(&mut buf, what)?;
            *v = f32::from_le_bytes(buf);
            if !v.is_finite() {
                return Err(r.fail(format!("non-finite value in {what}")));
            }
        }
        Ok(Tensor::from_vec(dims.to_vec(), data).expect("length matches dims"))
    };
    let w0 = read_payload(&mut r, "disruption payload")?;
    let delta_poison = read_payload(&mut r, "poison payload")?;
    let delta_final = read_payload(&mut r, "combined payload")?;
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing)? != 0 {
        return Err(r.fail("trailing bytes after payloads"));
    }
    if delta_final.data().iter().any(|v| v.abs() > epsilon) {
        return Err(r.fail("combined payload exceeds the stored budget"));
    }
    let recombined = combine_perturbations(&w0, &delta_poison, epsilon)?;
    if recombined.data().iter().zip(delta_final.data()).any(|(a, b)| a != b) {
        return Err(r.fail("combined payload is not the clipped sum of its parts"));
    }
    Ok(TsdfPerturbation {
        w0,
        delta_poison,
        delta_final,
        epsilon,
    })
}
