//! f64 forward evaluation of small conv nets, plus the detector head math
//! needed to reproduce the poisoning objective. Layouts match the main
//! crate: (C, H, W) row-major activations, (Cout, Cin, K, K) conv weights.

/// One feed-forward layer.
#[derive(Debug, Clone, Copy)]
pub enum Layer {
    /// Stride-1 convolution with symmetric zero padding.
    Conv {
        cin: usize,
        cout: usize,
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
    UpsampleNearest {
        f: usize,
    },
    SpaceToDepth {
        f: usize,
    },
}

pub fn conv2d(
    input: &[f64],
    (ci, h, w): (usize, usize, usize),
    weight: &[f64],
    bias: &[f64],
    co: usize,
    k: usize,
    pad: usize,
) -> (Vec<f64>, (usize, usize, usize)) {
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = bias[o];
                for c in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y + ky) as isize - pad as isize;
                            let ix = (x + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += input[c * h * w + iy as usize * w + ix as usize]
                                * weight[((o * ci + c) * k + ky) * k + kx];
                        }
                    }
                }
                out[(o * oh + y) * ow + x] = acc;
            }
        }
    }
    (out, (co, oh, ow))
}

pub fn avg_pool(input: &[f64], (c, h, w): (usize, usize, usize), k: usize) -> (Vec<f64>, (usize, usize, usize)) {
    let (oh, ow) = (h / k, w / k);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        acc += input[ch * h * w + (y * k + ky) * w + (x * k + kx)];
                    }
                }
                out[(ch * oh + y) * ow + x] = acc / (k * k) as f64;
            }
        }
    }
    (out, (c, oh, ow))
}

pub fn max_pool(input: &[f64], (c, h, w): (usize, usize, usize), k: usize) -> (Vec<f64>, (usize, usize, usize)) {
    let (oh, ow) = (h / k, w / k);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for ky in 0..k {
                    for kx in 0..k {
                        best = best.max(input[ch * h * w + (y * k + ky) * w + (x * k + kx)]);
                    }
                }
                out[(ch * oh + y) * ow + x] = best;
            }
        }
    }
    (out, (c, oh, ow))
}

pub fn upsample_nearest(input: &[f64], (c, h, w): (usize, usize, usize), f: usize) -> (Vec<f64>, (usize, usize, usize)) {
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[(ch * oh + y) * ow + x] = input[ch * h * w + (y / f) * w + (x / f)];
            }
        }
    }
    (out, (c, oh, ow))
}

/// Space-to-depth rearrangement: each f-by-f block becomes f*f consecutive
/// channels, matching the main crate's layout.
pub fn space_to_depth(input: &[f64], (c, h, w): (usize, usize, usize), f: usize) -> (Vec<f64>, (usize, usize, usize)) {
    let (oh, ow) = (h / f, w / f);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for fy in 0..f {
            for fx in 0..f {
                let oc = (ch * f + fy) * f + fx;
                for y in 0..oh {
                    for x in 0..ow {
                        out[(oc * oh + y) * ow + x] =
                            input[ch * h * w + (y * f + fy) * w + (x * f + fx)];
                    }
                }
            }
        }
    }
    (out, (c * f * f, oh, ow))
}

/// Bilinear resize with half-pixel centers, matching the main crate's
/// sampling convention.
pub fn resize_bilinear(
    input: &[f64],
    (c, h, w): (usize, usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                (i0, (i0 + 1).min(n_in - 1), src - i0 as f64)
            })
            .collect()
    };
    let ys = axis(h, oh);
    let xs = axis(w, ow);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = input[ch * h * w + y0 * w + x0] * (1.0 - fx)
                    + input[ch * h * w + y0 * w + x1] * fx;
                let bot = input[ch * h * w + y1 * w + x0] * (1.0 - fx)
                    + input[ch * h * w + y1 * w + x1] * fx;
                out[(ch * oh + y) * ow + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// A small net: layers plus conv parameters (weight, bias) in layer order.
pub struct Net {
    pub layers: Vec<Layer>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Net {
    /// Forward pass. Returns the output, its shape, and the smallest
    /// absolute pre-activation seen at any Relu (the kink margin; +inf if
    /// no Relu ran). Callers reject finite-difference test points whose
    /// margin is within a few steps of zero.
    pub fn forward(&self, input: &[f64], shape: (usize, usize, usize)) -> (Vec<f64>, (usize, usize, usize), f64) {
        let mut x = input.to_vec();
        let mut s = shape;
        let mut conv_i = 0;
        let mut margin = f64::INFINITY;
        for layer in &self.layers {
            match *layer {
                Layer::Conv { cin, cout, k, pad } => {
                    assert_eq!(cin, s.0);
                    let (out, os) = conv2d(&x, s, &self.weights[conv_i], &self.biases[conv_i], cout, k, pad);
                    conv_i += 1;
                    x = out;
                    s = os;
                }
                Layer::Relu => {
                    for v in &x {
                        margin = margin.min(v.abs());
                    }
                    for v in &mut x {
                        *v = v.max(0.0);
                    }
                }
                Layer::Sigmoid => {
                    for v in &mut x {
                        *v = 1.0 / (1.0 + (-*v).exp());
                    }
                }
                Layer::AvgPool { k } => {
                    let (out, os) = avg_pool(&x, s, k);
                    x = out;
                    s = os;
                }
                Layer::MaxPool { k } => {
                    let (out, os) = max_pool(&x, s, k);
                    x = out;
                    s = os;
                }
                Layer::UpsampleNearest { f } => {
                    let (out, os) = upsample_nearest(&x, s, f);
                    x = out;
                    s = os;
                }
                Layer::SpaceToDepth { f } => {
                    let (out, os) = space_to_depth(&x, s, f);
                    x = out;
                    s = os;
                }
            }
        }
        (x, s, margin)
    }

    /// Forward pass that also captures activations after the given layer
    /// indices (tap points).
    pub fn forward_with_taps(
        &self,
        input: &[f64],
        shape: (usize, usize, usize),
        taps: &[usize],
    ) -> (Vec<f64>, (usize, usize, usize), Vec<(Vec<f64>, (usize, usize, usize))>, f64) {
        let mut x = input.to_vec();
        let mut s = shape;
        let mut conv_i = 0;
        let mut margin = f64::INFINITY;
        let mut captured = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::Conv { cin, cout, k, pad } => {
                    assert_eq!(cin, s.0);
                    let (out, os) = conv2d(&x, s, &self.weights[conv_i], &self.biases[conv_i], cout, k, pad);
                    conv_i += 1;
                    x = out;
                    s = os;
                }
                Layer::Relu => {
                    for v in &x {
                        margin = margin.min(v.abs());
                    }
                    for v in &mut x {
                        *v = v.max(0.0);
                    }
                }
                Layer::Sigmoid => {
                    for v in &mut x {
                        *v = 1.0 / (1.0 + (-*v).exp());
                    }
                }
                Layer::AvgPool { k } => {
                    let (out, os) = avg_pool(&x, s, k);
                    x = out;
                    s = os;
                }
                Layer::MaxPool { k } => {
                    let (out, os) = max_pool(&x, s, k);
                    x = out;
                    s = os;
                }
                Layer::UpsampleNearest { f } => {
                    let (out, os) = upsample_nearest(&x, s, f);
                    x = out;
                    s = os;
                }
            }
            if taps.contains(&li) {
                captured.push((x.clone(), s));
            }
        }
        (x, s, captured, margin)
    }
}

/// Decoded box with score, in pixel corner coordinates.
#[derive(Debug, Clone, Copy)]
pub struct OracleBox {
    pub score: f64,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

/// Decode grid heads into boxes: cell (gy, gx) with raw score already
/// sigmoided, box params sigmoided then scaled. `img` is the square image
/// side in pixels, `stride` the cell size.
pub fn decode_boxes(
    score_map: &[f64],
    box_map: &[f64],
    grid: usize,
    stride: f64,
    img: f64,
    threshold: f64,
) -> Vec<(usize, OracleBox)> {
    let cells = grid * grid;
    let mut out = Vec::new();
    for gy in 0..grid {
        for gx in 0..grid {
            let i = gy * grid + gx;
            let s = score_map[i];
            if s < threshold {
                continue;
            }
            let tx = box_map[i];
            let ty = box_map[cells + i];
            let tw = box_map[2 * cells + i];
            let th = box_map[3 * cells + i];
            let cx = (gx as f64 + sig(tx)) * stride;
            let cy = (gy as f64 + sig(ty)) * stride;
            let w = sig(tw) * img;
            let h = sig(th) * img;
            out.push((
                i,
                OracleBox {
                    score: s,
                    x_min: (cx - w / 2.0).clamp(0.0, img),
                    y_min: (cy - h / 2.0).clamp(0.0, img),
                    x_max: (cx + w / 2.0).clamp(0.0, img),
                    y_max: (cy + h / 2.0).clamp(0.0, img),
                },
            ));
        }
    }
    out
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn iou(a: &OracleBox, b: &OracleBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    let area_a = (a.x_max - a.x_min).max(0.0) * (a.y_max - a.y_min).max(0.0);
    let area_b = (b.x_max - b.x_min).max(0.0) * (b.y_max - b.y_min).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy score-descending NMS keeping boxes whose IoU with every kept box
/// is below the threshold. Returns indices into the input list.
pub fn nms_keep(boxes: &[(usize, OracleBox)], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].1.score.partial_cmp(&boxes[a].1.score).unwrap());
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&j| iou(&boxes[i].1, &boxes[j].1) < iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

/// Output-suppression loss over decoded boxes: mean of score^2 plus the L1
/// distance from the box corners to the box's own center point, the latter
/// divided by the image side so both terms share one scale.
pub fn output_loss(boxes: &[OracleBox], image_side: f64) -> f64 {
    if boxes.is_empty() {
        return 0.0;
    }
    let total: f64 = boxes
        .iter()
        .map(|b| {
            let cx = (b.x_min + b.x_max) / 2.0;
            let cy = (b.y_min + b.y_max) / 2.0;
            let l1 = (b.x_min - cx).abs()
                + (b.y_min - cy).abs()
                + (b.x_max - cx).abs()
                + (b.y_max - cy).abs();
            b.score * b.score + l1 / image_side
        })
        .sum();
    total / boxes.len() as f64
}

/// Squared-distance feature loss toward the negated clean feature plus a
/// mask-scaled margin: sum over layers of w_l * ||fused_l - (-clean_l + nu *
/// mask_l)||^2 (sum of squares).
pub fn feature_loss(
    fused_pert: &[Vec<f64>],
    fused_clean: &[Vec<f64>],
    masks: &[Vec<f64>],
    layer_weights: &[f64],
    nu: f64,
) -> f64 {
    let mut total = 0.0;
    for (l, w) in layer_weights.iter().enumerate() {
        let mut acc = 0.0;
        for i in 0..fused_pert[l].len() {
            let target = -fused_clean[l][i] + nu * masks[l][i];
            let d = fused_pert[l][i] - target;
            acc += d * d;
        }
        total += w * acc;
    }
    total
}
