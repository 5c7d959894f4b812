//! Evaluation metrics: masked L2 disruption strength, success rate over a
//! pool, PSNR, windowed SSIM, detection F1, and a diagonal-covariance
//! Frechet distance over toy features. All pure functions over tensors.

use crate::numerics::Tensor;
use crate::zoo::{BoxPx, Detection};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("face box covers no whole pixel: {0:?}")]
    EmptyBox(BoxPx),
    #[error("empty value list")]
    EmptyList,
    #[error("threshold must be positive, got {0}")]
    BadThreshold(f32),
    #[error("image {h}x{w} smaller than the {win}x{win} window")]
    ImageTooSmall { h: usize, w: usize, win: usize },
    #[error("batch needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("feature length mismatch within batch: {lhs} vs {rhs}")]
    FeatureLength { lhs: usize, rhs: usize },
}

/// Default success threshold on the masked distortion: an image counts as
/// successfully disrupted when its l2mask value strictly exceeds this.
pub const SRMASK_SUCCESS: f32 = 0.05;

/// One evaluation row, serialized with these exact key names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub l2mask: f32,
    pub srmask: f32,
    pub psnr: f32,
    pub ssim: f32,
    pub f1: f32,
    pub frechet: f32,
    pub condition: String,
}

/// Integer pixel ranges covered by a float box, clipped to the image.
fn pixel_range(
    face_box: &BoxPx,
    h: usize,
    w: usize,
) -> Result<(std::ops::Range<usize>, std::ops::Range<usize>), MetricsError> {
    let x0 = face_box.x_min.max(0.0).floor() as usize;
    let y0 = face_box.y_min.max(0.0).floor() as usize;
    let x1 = (face_box.x_max.ceil().max(0.0) as usize).min(w);
    let y1 = (face_box.y_max.ceil().max(0.0) as usize).min(h);
    if x0 >= x1 || y0 >= y1 {
        return Err(MetricsError::EmptyBox(*face_box));
    }
    Ok((y0..y1, x0..x1))
}

/// Masked MSE: mean over in-box pixels of the per-pixel channel-mean
/// squared difference. Higher means the outputs diverge more on the face.
pub fn l2mask(a: &Tensor, b: &Tensor, face_box: &BoxPx) -> Result<f32, MetricsError> {
    if a.shape() != b.shape() {
        return Err(MetricsError::ShapeMismatch {
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (c, h, w) = a.chw();
    let (ys, xs) = pixel_range(face_box, h, w)?;
    let mut total = 0.0f64;
    let mut pixels = 0usize;
    for y in ys {
        for x in xs.clone() {
            let mut px = 0.0f64;
            for ch in 0..c {
                let i = ch * h * w + y * w + x;
                let d = (a.data()[i] - b.data()[i]) as f64;
                px += d * d;
            }
            total += px / c as f64;
            pixels += 1;
        }
    }
    Ok((total / pixels as f64) as f32)
}

/// Fraction of disruption values strictly above `threshold`.
pub fn srmask(values: &[f32], threshold: f32) -> Result<f32, MetricsError> {
    if threshold <= 0.0 {
        return Err(MetricsError::BadThreshold(threshold));
    }
    if values.is_empty() {
        return Err(MetricsError::EmptyList);
    }
    let hits = values.iter().filter(|&&v| v > threshold).count();
    Ok(hits as f32 / values.len() as f32)
}

/// Peak signal-to-noise ratio in dB for [0,1] images, capped at 99 dB for
/// (near-)identical inputs so reports stay finite.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f32, MetricsError> {
    if a.shape() != b.shape() {
        return Err(MetricsError::ShapeMismatch {
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64;
    if mse < 1e-10 {
        return Ok(99.0);
    }
    Ok((10.0 * (1.0 / mse).log10()) as f32)
}

const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn grayscale(t: &Tensor) -> Vec<f64> {
    let (c, h, w) = t.chw();
    assert_eq!(c, 3, "ssim expects RGB input");
    let d = t.data();
    (0..h * w)
        .map(|i| 0.299 * d[i] as f64 + 0.587 * d[h * w + i] as f64 + 0.114 * d[2 * h * w + i] as f64)
        .collect()
}

/// Mean structural similarity over 8x8 sliding windows (stride 1) of the
/// grayscale conversions, population statistics.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f32, MetricsError> {
    if a.shape() != b.shape() {
        return Err(MetricsError::ShapeMismatch {
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (_, h, w) = a.chw();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricsError::ImageTooSmall {
            h,
            w,
            win: SSIM_WINDOW,
        });
    }
    let ga = grayscale(a);
    let gb = grayscale(b);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0f64;
    let mut windows = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let i = (y0 + dy) * w + x0 + dx;
                    let (va, vb) = (ga[i], gb[i]);
                    sa += va;
                    sb += vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sab += va * vb;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            windows += 1;
        }
    }
    Ok((total / windows as f64) as f32)
}

/// F1 of greedy one-to-one matching: predictions by descending score claim
/// the best unmatched ground-truth box at IoU >= `iou_threshold`.
pub fn detection_f1(predictions: &[Detection], truth: &[BoxPx], iou_threshold: f32) -> f32 {
    assert!(
        iou_threshold > 0.0 && iou_threshold <= 1.0,
        "iou threshold must be in (0, 1]"
    );
    if predictions.is_empty() && truth.is_empty() {
        return 1.0;
    }
    if predictions.is_empty() || truth.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&i, &j| {
        predictions[j]
            .score
            .partial_cmp(&predictions[i].score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut claimed = vec![false; truth.len()];
    let mut tp = 0usize;
    for &pi in &order {
        let mut best: Option<(usize, f32)> = None;
        for (ti, t) in truth.iter().enumerate() {
            if claimed[ti] {
                continue;
            }
            let iou = predictions[pi].bbox.iou(t);
            if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((ti, iou));
            }
        }
        if let Some((ti, _)) = best {
            claimed[ti] = true;
            tp += 1;
        }
    }
    let precision = tp as f32 / predictions.len() as f32;
    let recall = tp as f32 / truth.len() as f32;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Frechet distance between two feature batches under a diagonal-covariance
/// approximation: squared mean distance plus per-dimension
/// `va + vb - 2*sqrt(va*vb)`. A cheap stand-in for inception-based FID.
pub fn frechet_toy(features_a: &[Tensor], features_b: &[Tensor]) -> Result<f32, MetricsError> {
    for batch in [features_a, features_b] {
        if batch.len() < 2 {
            return Err(MetricsError::BatchTooSmall(batch.len()));
        }
    }
    let dim = features_a[0].numel();
    for t in features_a.iter().chain(features_b) {
        if t.numel() != dim {
            return Err(MetricsError::FeatureLength {
                lhs: dim,
                rhs: t.numel(),
            });
        }
    }
    let stats = |batch: &[Tensor]| -> (Vec<f64>, Vec<f64>) {
        let n = batch.len() as f64;
        let mut mean = vec![0.0f64; dim];
        for t in batch {
            for (m, &v) in mean.iter_mut().zip(t.data()) {
                *m += v as f64;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0f64; dim];
        for t in batch {
            for ((v, &x), &m) in var.iter_mut().zip(t.data()).zip(&mean) {
                let d = x as f64 - m;
                *v += d * d;
            }
        }
        for v in &mut var {
            *v /= n;
        }
        (mean, var)
    };
    let (ma, va) = stats(features_a);
    let (mb, vb) = stats(features_b);
    let mean_term: f64 = ma
        .iter()
        .zip(&mb)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    let cov_term: f64 = va
        .iter()
        .zip(&vb)
        .map(|(&x, &y)| x + y - 2.0 * (x * y).sqrt())
        .sum();
    Ok((mean_term + cov_term) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{SeedStream, Stream};

    fn image(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Tensor {
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(c, y, x));
                }
            }
        }
        Tensor::from_vec(vec![3, h, w], data).unwrap()
    }

    fn full_box() -> BoxPx {
        BoxPx { x_min: 0.0, y_min: 0.0, x_max: 16.0, y_max: 16.0 }
    }

    #[test]
    fn l2mask_identical_is_zero() {
        let a = image(16, 16, |_, y, x| (y + x) as f32 / 32.0);
        assert_eq!(l2mask(&a, &a, &full_box()).unwrap(), 0.0);
    }

    #[test]
    fn l2mask_half_difference_is_quarter() {
        let a = image(16, 16, |_, _, _| 0.2);
        let b = image(16, 16, |_, _, _| 0.7);
        let v = l2mask(&a, &b, &full_box()).unwrap();
        assert!((v - 0.25).abs() < 1e-6, "got {v}");
    }

    #[test]
    fn l2mask_ignores_out_of_box_difference() {
        let a = image(16, 16, |_, _, _| 0.5);
        let mut b = a.clone();
        // Perturb only the right half; box covers the left half.
        let (_, h, w) = b.chw();
        for c in 0..3 {
            for y in 0..h {
                for x in 8..w {
                    b.data_mut()[c * h * w + y * w + x] = 1.0;
                }
            }
        }
        let left = BoxPx { x_min: 0.0, y_min: 0.0, x_max: 8.0, y_max: 16.0 };
        assert_eq!(l2mask(&a, &b, &left).unwrap(), 0.0);
    }

    #[test]
    fn l2mask_empty_box_errors() {
        let a = image(16, 16, |_, _, _| 0.5);
        let degenerate = BoxPx { x_min: 5.0, y_min: 5.0, x_max: 5.0, y_max: 9.0 };
        assert!(matches!(
            l2mask(&a, &a, &degenerate),
            Err(MetricsError::EmptyBox(_))
        ));
    }

    #[test]
    fn srmask_counts_strict_exceedance() {
        assert_eq!(srmask(&[0.06, 0.04], 0.05).unwrap(), 0.5);
        assert_eq!(srmask(&[0.0, 0.0], 0.05).unwrap(), 0.0);
        assert_eq!(srmask(&[0.9, 0.8], 0.05).unwrap(), 1.0);
        // A value exactly at the threshold does not count.
        assert_eq!(srmask(&[0.05], 0.05).unwrap(), 0.0);
    }

    #[test]
    fn srmask_rejects_bad_inputs() {
        assert!(matches!(srmask(&[], 0.05), Err(MetricsError::EmptyList)));
        assert!(matches!(
            srmask(&[0.1], 0.0),
            Err(MetricsError::BadThreshold(_))
        ));
    }

    #[test]
    fn srmask_monotone_in_threshold() {
        let mut rng = SeedStream::new(3, Stream::SynthData);
        let values: Vec<f32> = (0..64).map(|_| rng.uniform()).collect();
        let mut prev = 1.0f32;
        for i in 1..=20 {
            let t = i as f32 * 0.05;
            let v = srmask(&values, t).unwrap();
            assert!(v <= prev, "srmask rose from {prev} to {v} at threshold {t}");
            prev = v;
        }
    }

    #[test]
    fn psnr_examples() {
        let a = image(8, 8, |_, _, _| 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b = image(8, 8, |_, _, _| 0.6);
        let v = psnr(&a, &b).unwrap();
        // MSE 0.01 -> 20 dB.
        assert!((v - 20.0).abs() < 1e-4, "got {v}");
        let c = image(8, 8, |_, _, _| 1.5);
        assert!((psnr(&a, &c).unwrap() - 0.0).abs() < 1e-4);
    }

    #[test]
    fn psnr_shape_mismatch_errors() {
        let a = image(8, 8, |_, _, _| 0.5);
        let b = image(8, 9, |_, _, _| 0.5);
        assert!(matches!(psnr(&a, &b), Err(MetricsError::ShapeMismatch { .. })));
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = image(16, 16, |c, y, x| ((c + y + x) % 7) as f32 / 7.0);
        let v = ssim(&a, &a).unwrap();
        assert!((v - 1.0).abs() < 1e-6, "got {v}");
    }

    #[test]
    fn ssim_is_symmetric() {
        let mut rng = SeedStream::new(11, Stream::SynthData);
        let a = image(12, 12, |_, _, _| rng.uniform());
        let b = image(12, 12, |_, _, _| rng.uniform());
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-6);
    }

    #[test]
    fn ssim_constant_images_match_single_window_formula() {
        let a = image(8, 8, |_, _, _| 0.5);
        let b = image(8, 8, |_, _, _| 0.6);
        // Zero variance: SSIM = (2*ma*mb + C1) / (ma^2 + mb^2 + C1)
        // with both luminances equal to the constant value.
        let expected = ((2.0 * 0.5 * 0.6 + SSIM_C1) * SSIM_C2)
            / ((0.25 + 0.36 + SSIM_C1) * SSIM_C2);
        let v = ssim(&a, &b).unwrap();
        assert!((v as f64 - expected).abs() < 1e-6, "got {v}, want {expected}");
    }

    #[test]
    fn ssim_small_image_errors() {
        let a = image(4, 4, |_, _, _| 0.5);
        assert!(matches!(ssim(&a, &a), Err(MetricsError::ImageTooSmall { .. })));
    }

    #[test]
    fn ssim_bounded() {
        let mut rng = SeedStream::new(5, Stream::SynthData);
        for _ in 0..10 {
            let a = image(10, 10, |_, _, _| rng.uniform());
            let b = image(10, 10, |_, _, _| rng.uniform());
            let v = ssim(&a, &b).unwrap();
            assert!((-1.0..=1.0).contains(&v), "ssim {v} out of range");
        }
    }

    fn boxed(x: f32, y: f32, s: f32) -> BoxPx {
        BoxPx { x_min: x, y_min: y, x_max: x + s, y_max: y + s }
    }

    #[test]
    fn f1_perfect_match_is_one() {
        let truth = vec![boxed(0.0, 0.0, 10.0), boxed(30.0, 30.0, 10.0)];
        let preds = vec![
            Detection { score: 0.9, bbox: truth[0] },
            Detection { score: 0.8, bbox: truth[1] },
        ];
        assert_eq!(detection_f1(&preds, &truth, 0.5), 1.0);
    }

    #[test]
    fn f1_empty_cases() {
        assert_eq!(detection_f1(&[], &[], 0.5), 1.0);
        assert_eq!(detection_f1(&[], &[boxed(0.0, 0.0, 10.0)], 0.5), 0.0);
        let preds = vec![Detection { score: 0.9, bbox: boxed(0.0, 0.0, 10.0) }];
        assert_eq!(detection_f1(&preds, &[], 0.5), 0.0);
    }

    #[test]
    fn f1_one_tp_one_fp_is_two_thirds() {
        let truth = vec![boxed(0.0, 0.0, 10.0)];
        let preds = vec![
            Detection { score: 0.9, bbox: truth[0] },
            Detection { score: 0.8, bbox: boxed(40.0, 40.0, 10.0) },
        ];
        let v = detection_f1(&preds, &truth, 0.5);
        assert!((v - 2.0 / 3.0).abs() < 1e-6, "got {v}");
    }

    #[test]
    fn f1_one_to_one_matching() {
        // Two predictions on the same truth box: only one can claim it.
        let truth = vec![boxed(0.0, 0.0, 10.0)];
        let preds = vec![
            Detection { score: 0.9, bbox: truth[0] },
            Detection { score: 0.8, bbox: truth[0] },
        ];
        let v = detection_f1(&preds, &truth, 0.5);
        assert!((v - 2.0 / 3.0).abs() < 1e-6, "got {v}");
    }

    #[test]
    fn f1_permutation_invariant() {
        let truth = vec![boxed(0.0, 0.0, 10.0), boxed(30.0, 0.0, 10.0), boxed(0.0, 30.0, 10.0)];
        let preds = vec![
            Detection { score: 0.9, bbox: truth[1] },
            Detection { score: 0.7, bbox: truth[0] },
            Detection { score: 0.5, bbox: boxed(45.0, 45.0, 8.0) },
        ];
        let base = detection_f1(&preds, &truth, 0.5);
        let mut preds_rev = preds.clone();
        preds_rev.reverse();
        let mut truth_rev = truth.clone();
        truth_rev.reverse();
        assert_eq!(detection_f1(&preds_rev, &truth, 0.5), base);
        assert_eq!(detection_f1(&preds, &truth_rev, 0.5), base);
    }

    fn feature_batch(seed: u64, n: usize, dim: usize, shift: f32) -> Vec<Tensor> {
        let mut rng = SeedStream::new(seed, Stream::SynthData);
        (0..n)
            .map(|_| {
                Tensor::from_vec(
                    vec![dim],
                    (0..dim).map(|_| rng.uniform() + shift).collect(),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn frechet_identical_batches_is_zero() {
        let a = feature_batch(1, 8, 6, 0.0);
        let v = frechet_toy(&a, &a).unwrap();
        assert!(v.abs() < 1e-9, "got {v}");
    }

    #[test]
    fn frechet_mean_shift_closed_form() {
        // Same draws, shifted by 0.3 in every dimension: variances agree,
        // so the distance is dim * shift^2.
        let a = feature_batch(2, 16, 5, 0.0);
        let b: Vec<Tensor> = a
            .iter()
            .map(|t| {
                Tensor::from_vec(
                    t.shape().to_vec(),
                    t.data().iter().map(|&v| v + 0.3).collect(),
                )
                .unwrap()
            })
            .collect();
        let v = frechet_toy(&a, &b).unwrap();
        let want = 5.0 * 0.3 * 0.3;
        assert!((v - want).abs() < 1e-3, "got {v}, want {want}");
    }

    #[test]
    fn frechet_symmetric_and_nonnegative() {
        let a = feature_batch(3, 8, 4, 0.0);
        let b = feature_batch(4, 8, 4, 0.2);
        let ab = frechet_toy(&a, &b).unwrap();
        let ba = frechet_toy(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-6);
        assert!(ab >= 0.0);
    }

    #[test]
    fn frechet_rejects_small_batches() {
        let a = feature_batch(5, 1, 4, 0.0);
        let b = feature_batch(6, 8, 4, 0.0);
        assert!(matches!(
            frechet_toy(&a, &b),
            Err(MetricsError::BatchTooSmall(1))
        ));
    }

    #[test]
    fn report_json_uses_fixed_keys() {
        let report = MetricReport {
            l2mask: 0.1,
            srmask: 0.5,
            psnr: 30.0,
            ssim: 0.9,
            f1: 0.95,
            frechet: 1.5,
            condition: "clean".into(),
        };
        let json = serde_json::to_string(&report).unwrap();
        for key in ["l2mask", "srmask", "psnr", "ssim", "f1", "frechet", "condition"] {
            assert!(json.contains(&format!("\"{key}\"")), "missing {key} in {json}");
        }
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
