//! Procedural face-like images: a skin-tone ellipse with eye blobs and a
//! mouth bar over a textured gradient background. Crude on purpose; the
//! models only need a learnable, detectable face distribution.

use crate::numerics::Tensor;
use crate::rng::{SeedStream, Stream};
use crate::zoo::BoxPx;

pub const IMAGE_SIDE: usize = 64;
pub const ATTRIBUTE_COUNT: usize = 4;

/// One labeled training image.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// RGB image, shape (3, 64, 64), values in [0,1].
    pub image: Tensor,
    /// Ground-truth face bounding box in pixels.
    pub face_box: BoxPx,
    /// Binary face-region mask, shape (1, 64, 64).
    pub face_mask: Tensor,
    /// Attribute label in 0..ATTRIBUTE_COUNT.
    pub attribute_label: usize,
}

/// Generate `count` samples, bitwise-deterministic per seed.
pub fn synth_dataset(count: usize, seed: u64) -> Vec<SyntheticSample> {
    assert!(count >= 1, "dataset size must be at least 1");
    let mut rng = SeedStream::new(seed, Stream::SynthData);
    (0..count).map(|_| sample(&mut rng)).collect()
}

fn sample(rng: &mut SeedStream) -> SyntheticSample {
    let s = IMAGE_SIDE;
    let sf = s as f32;

    // Background: per-channel linear gradient plus fine per-pixel texture.
    let bg_base = [
        rng.uniform_in(0.2, 0.8),
        rng.uniform_in(0.2, 0.8),
        rng.uniform_in(0.2, 0.8),
    ];
    let grad_x = [
        rng.uniform_in(-0.2, 0.2),
        rng.uniform_in(-0.2, 0.2),
        rng.uniform_in(-0.2, 0.2),
    ];
    let grad_y = [
        rng.uniform_in(-0.2, 0.2),
        rng.uniform_in(-0.2, 0.2),
        rng.uniform_in(-0.2, 0.2),
    ];

    // Face geometry: center and semi-axes keep the box inside the frame
    // with margin, and its area well above the 64 px^2 floor.
    let cx = rng.uniform_in(24.0, 40.0);
    let cy = rng.uniform_in(24.0, 40.0);
    let ax = rng.uniform_in(10.0, 16.0);
    let ay = rng.uniform_in(12.0, 18.0);

    // Skin tone: warm triple with red >= green >= blue.
    let skin_r = rng.uniform_in(0.55, 0.85);
    let skin_g = (skin_r - rng.uniform_in(0.10, 0.25)).max(0.05);
    let skin_b = (skin_g - rng.uniform_in(0.05, 0.20)).max(0.05);
    let skin = [skin_r, skin_g, skin_b];

    let eye_v = rng.uniform_in(0.05, 0.25);
    let eye = [eye_v, eye_v, (eye_v + 0.1).min(0.35)];
    let eye_r = (0.16 * ax).max(1.5);
    let eye_dx = 0.45 * ax;
    let eye_dy = 0.25 * ay;

    let mouth_r = rng.uniform_in(0.4, 0.7);
    let mouth = [mouth_r, 0.35 * mouth_r, 0.35 * mouth_r];
    let mouth_hw = 0.45 * ax;
    let mouth_hh = (0.08 * ay).max(1.0);
    let mouth_cy = cy + 0.45 * ay;

    let attribute_label = rng.below(ATTRIBUTE_COUNT);

    let mut image = Tensor::zeros(vec![3, s, s]);
    let mut mask = Tensor::zeros(vec![1, s, s]);

    // Texture drawn in a fixed pass so the draw count per sample is
    // constant regardless of geometry.
    let texture: Vec<f32> = (0..3 * s * s)
        .map(|_| rng.uniform_in(-0.02, 0.02))
        .collect();

    // Linear fade over the normalized ellipse distance keeps edges soft.
    let fade = |d: f32, inner: f32, outer: f32| ((outer - d) / (outer - inner)).clamp(0.0, 1.0);

    for y in 0..s {
        for x in 0..s {
            let (xf, yf) = (x as f32 + 0.5, y as f32 + 0.5);
            let i = y * s + x;

            let face_d = ((xf - cx) / ax).powi(2) + ((yf - cy) / ay).powi(2);
            let face_a = fade(face_d, 0.85, 1.15);
            if face_d <= 1.0 {
                mask.data_mut()[i] = 1.0;
            }

            let eye_l = (((xf - (cx - eye_dx)) / eye_r).powi(2)
                + ((yf - (cy - eye_dy)) / eye_r).powi(2))
            .min(((xf - (cx + eye_dx)) / eye_r).powi(2) + ((yf - (cy - eye_dy)) / eye_r).powi(2));
            let eye_a = fade(eye_l, 0.6, 1.4);

            let mouth_d = ((xf - cx) / mouth_hw).powi(2) + ((yf - mouth_cy) / mouth_hh).powi(2);
            let mouth_a = fade(mouth_d, 0.6, 1.4);

            for c in 0..3 {
                let bg = bg_base[c]
                    + grad_x[c] * (xf / sf - 0.5)
                    + grad_y[c] * (yf / sf - 0.5)
                    + texture[c * s * s + i];
                let mut v = face_a * skin[c] + (1.0 - face_a) * bg;
                v = eye_a * face_a * eye[c] + (1.0 - eye_a * face_a) * v;
                v = mouth_a * face_a * mouth[c] + (1.0 - mouth_a * face_a) * v;
                image.data_mut()[c * s * s + i] = v.clamp(0.0, 1.0);
            }
        }
    }

    let face_box = BoxPx {
        x_min: cx - ax,
        y_min: cy - ay,
        x_max: cx + ax,
        y_max: cy + ay,
    };
    debug_assert!(face_box.area() >= 64.0);
    debug_assert!(face_box.x_min >= 0.0 && face_box.x_max <= sf);
    debug_assert!(face_box.y_min >= 0.0 && face_box.y_max <= sf);

    SyntheticSample {
        image,
        face_box,
        face_mask: mask,
        attribute_label,
    }
}
