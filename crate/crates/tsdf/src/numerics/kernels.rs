//! Dense kernels behind the tape's structured ops. All layouts are
//! row-major; rank-3 data is (C, H, W), conv weights are (Cout, Cin, K, K).

/// For one kernel offset, the overlap between an output row and an input
/// row: output columns [x0, x1) pair with input columns starting at xi.
/// Empty (x0 >= x1) when the offset pushes the window fully outside.
#[inline]
fn col_overlap(kx: usize, pad: usize, w: usize, ow: usize) -> (usize, usize, usize) {
    let x0 = pad.saturating_sub(kx);
    let x1 = ow.min((w + pad).saturating_sub(kx)).max(x0);
    (x0, x1, x0 + kx - pad.min(x0 + kx))
}

/// 2-D convolution, stride 1, symmetric zero padding `pad`. Accumulates
/// one kernel tap at a time over whole rows, which keeps the inner loop a
/// contiguous multiply-add the compiler can vectorize.
pub fn conv2d(
    input: &[f32],
    (ci, h, w): (usize, usize, usize),
    weight: &[f32],
    bias: &[f32],
    co: usize,
    k: usize,
    pad: usize,
    out: &mut [f32],
) {
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    debug_assert_eq!(out.len(), co * oh * ow);
    for o in 0..co {
        out[o * oh * ow..(o + 1) * oh * ow].fill(bias[o]);
    }
    for o in 0..co {
        let w_base = o * ci * k * k;
        let out_base = o * oh * ow;
        for c in 0..ci {
            let in_base = c * h * w;
            let wc_base = w_base + c * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[wc_base + ky * k + kx];
                    let (x0, x1, xi) = col_overlap(kx, pad, w, ow);
                    if x0 >= x1 {
                        continue;
                    }
                    let n = x1 - x0;
                    for y in 0..oh {
                        let iy = y + ky;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        let irow = in_base + (iy - pad) * w + xi;
                        let orow = out_base + y * ow + x0;
                        let (src, dst) = (&input[irow..irow + n], &mut out[orow..orow + n]);
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of [`conv2d`] with respect to input, weight, and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &[f32],
    (ci, h, w): (usize, usize, usize),
    weight: &[f32],
    co: usize,
    k: usize,
    pad: usize,
    d_out: &[f32],
    d_input: &mut [f32],
    d_weight: &mut [f32],
    d_bias: &mut [f32],
) {
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    for o in 0..co {
        let row = &d_out[o * oh * ow..(o + 1) * oh * ow];
        d_bias[o] += row.iter().fold(0.0f32, |a, &g| a + g);
    }
    for o in 0..co {
        let w_base = o * ci * k * k;
        let out_base = o * oh * ow;
        for c in 0..ci {
            let in_base = c * h * w;
            let wc_base = w_base + c * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wi = wc_base + ky * k + kx;
                    let wv = weight[wi];
                    let (x0, x1, xi) = col_overlap(kx, pad, w, ow);
                    if x0 >= x1 {
                        continue;
                    }
                    let n = x1 - x0;
                    let mut wg = 0.0f32;
                    for y in 0..oh {
                        let iy = y + ky;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        let irow = in_base + (iy - pad) * w + xi;
                        let orow = out_base + y * ow + x0;
                        let gs = &d_out[orow..orow + n];
                        let di = &mut d_input[irow..irow + n];
                        for (d, &g) in di.iter_mut().zip(gs) {
                            *d += wv * g;
                        }
                        let ins = &input[irow..irow + n];
                        wg += gs.iter().zip(ins).fold(0.0f32, |a, (&g, &v)| a + g * v);
                    }
                    d_weight[wi] += wg;
                }
            }
        }
    }
}

/// k-by-k average pooling with stride k. Trailing rows/cols that do not fill
/// a window are not allowed; callers keep H and W divisible by k.
pub fn avg_pool(input: &[f32], (c, h, w): (usize, usize, usize), k: usize, out: &mut [f32]) {
    let oh = h / k;
    let ow = w / k;
    let inv = 1.0 / (k * k) as f32;
    for ch in 0..c {
        let in_base = ch * h * w;
        let out_base = ch * oh * ow;
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0f32;
                for ky in 0..k {
                    let row = in_base + (y * k + ky) * w + x * k;
                    for kx in 0..k {
                        acc += input[row + kx];
                    }
                }
                out[out_base + y * ow + x] = acc * inv;
            }
        }
    }
}

pub fn avg_pool_backward(
    (c, h, w): (usize, usize, usize),
    k: usize,
    d_out: &[f32],
    d_input: &mut [f32],
) {
    let oh = h / k;
    let ow = w / k;
    let inv = 1.0 / (k * k) as f32;
    for ch in 0..c {
        let in_base = ch * h * w;
        let out_base = ch * oh * ow;
        for y in 0..oh {
            for x in 0..ow {
                let g = d_out[out_base + y * ow + x] * inv;
                for ky in 0..k {
                    let row = in_base + (y * k + ky) * w + x * k;
                    for kx in 0..k {
                        d_input[row + kx] += g;
                    }
                }
            }
        }
    }
}

/// k-by-k max pooling with stride k; records the flat argmax per window
/// (first maximum wins) for the backward pass.
pub fn max_pool(
    input: &[f32],
    (c, h, w): (usize, usize, usize),
    k: usize,
    out: &mut [f32],
    argmax: &mut [usize],
) {
    let oh = h / k;
    let ow = w / k;
    for ch in 0..c {
        let in_base = ch * h * w;
        let out_base = ch * oh * ow;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_at = 0usize;
                for ky in 0..k {
                    let row = in_base + (y * k + ky) * w + x * k;
                    for kx in 0..k {
                        let v = input[row + kx];
                        if v > best {
                            best = v;
                            best_at = row + kx;
                        }
                    }
                }
                out[out_base + y * ow + x] = best;
                argmax[out_base + y * ow + x] = best_at;
            }
        }
    }
}

pub fn max_pool_backward(d_out: &[f32], argmax: &[usize], d_input: &mut [f32]) {
    for (g, &at) in d_out.iter().zip(argmax) {
        d_input[at] += g;
    }
}

/// Nearest-neighbour upsampling by integer factor f.
pub fn upsample_nearest(input: &[f32], (c, h, w): (usize, usize, usize), f: usize, out: &mut [f32]) {
    let oh = h * f;
    let ow = w * f;
    for ch in 0..c {
        let in_base = ch * h * w;
        let out_base = ch * oh * ow;
        for y in 0..oh {
            let row = in_base + (y / f) * w;
            let orow = out_base + y * ow;
            for x in 0..ow {
                out[orow + x] = input[row + x / f];
            }
        }
    }
}

pub fn upsample_nearest_backward(
    (c, h, w): (usize, usize, usize),
    f: usize,
    d_out: &[f32],
    d_input: &mut [f32],
) {
    let oh = h * f;
    let ow = w * f;
    for ch in 0..c {
        let in_base = ch * h * w;
        let out_base = ch * oh * ow;
        for y in 0..oh {
            let row = in_base + (y / f) * w;
            let orow = out_base + y * ow;
            for x in 0..ow {
                d_input[row + x / f] += d_out[orow + x];
            }
        }
    }
}

/// Space-to-depth rearrangement: each f-by-f spatial block becomes f*f
/// consecutive output channels. A pure permutation, so every input value
/// reaches the next layer unchanged; downsampling this way keeps detail
/// that window averaging would wash out.
pub fn space_to_depth(input: &[f32], (c, h, w): (usize, usize, usize), f: usize, out: &mut [f32]) {
    let oh = h / f;
    let ow = w / f;
    for ch in 0..c {
        for fy in 0..f {
            for fx in 0..f {
                let out_base = ((ch * f + fy) * f + fx) * oh * ow;
                for y in 0..oh {
                    let row = ch * h * w + (y * f + fy) * w + fx;
                    let orow = out_base + y * ow;
                    for x in 0..ow {
                        out[orow + x] = input[row + x * f];
                    }
                }
            }
        }
    }
}

pub fn space_to_depth_backward(
    (c, h, w): (usize, usize, usize),
    f: usize,
    d_out: &[f32],
    d_input: &mut [f32],
) {
    let oh = h / f;
    let ow = w / f;
    for ch in 0..c {
        for fy in 0..f {
            for fx in 0..f {
                let out_base = ((ch * f + fy) * f + fx) * oh * ow;
                for y in 0..oh {
                    let row = ch * h * w + (y * f + fy) * w + fx;
                    let orow = out_base + y * ow;
                    for x in 0..ow {
                        d_input[row + x * f] += d_out[orow + x];
                    }
                }
            }
        }
    }
}

/// Sample positions and corner weights for bilinear resize with half-pixel
/// centers: src = (dst + 0.5) * in/out - 0.5, clamped to the edge.
pub fn bilinear_axis(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    let scale = n_in as f32 / n_out as f32;
    (0..n_out)
        .map(|o| {
            let src = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f32);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f32)
        })
        .collect()
}

/// Bilinear resize of each channel of (C, H, W) to (C, OH, OW).
pub fn resize_bilinear(
    input: &[f32],
    (c, h, w): (usize, usize, usize),
    (oh, ow): (usize, usize),
    out: &mut [f32],
) {
    let ys = bilinear_axis(h, oh);
    let xs = bilinear_axis(w, ow);
    for ch in 0..c {
        let in_base = ch * h * w;
        let out_base = ch * oh * ow;
        for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
            let r0 = in_base + y0 * w;
            let r1 = in_base + y1 * w;
            let orow = out_base + y * ow;
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = input[r0 + x0] * (1.0 - fx) + input[r0 + x1] * fx;
                let bot = input[r1 + x0] * (1.0 - fx) + input[r1 + x1] * fx;
                out[orow + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
}

pub fn resize_bilinear_backward(
    (c, h, w): (usize, usize, usize),
    (oh, ow): (usize, usize),
    d_out: &[f32],
    d_input: &mut [f32],
) {
    let ys = bilinear_axis(h, oh);
    let xs = bilinear_axis(w, ow);
    for ch in 0..c {
        let in_base = ch * h * w;
        let out_base = ch * oh * ow;
        for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
            let r0 = in_base + y0 * w;
            let r1 = in_base + y1 * w;
            let orow = out_base + y * ow;
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let g = d_out[orow + x];
                d_input[r0 + x0] += g * (1.0 - fx) * (1.0 - fy);
                d_input[r0 + x1] += g * fx * (1.0 - fy);
                d_input[r1 + x0] += g * (1.0 - fx) * fy;
                d_input[r1 + x1] += g * fx * fy;
            }
        }
    }
}
