//! Plain f64 reference math for checking the tsdf crate's gradients and
//! hand-derived values. Everything here is written directly from the
//! formulas, shares no code with the main crate, and stays slow and simple
//! on purpose.

pub mod net;

/// Elementwise sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean squared error between equal-length slices.
pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

/// Per-channel statistics of a (C, H, W) map: (mean, population std).
pub fn channel_stats(x: &[f64], c: usize, hw: usize) -> Vec<(f64, f64)> {
    (0..c)
        .map(|ch| {
            let row = &x[ch * hw..(ch + 1) * hw];
            let mean = row.iter().sum::<f64>() / hw as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            (mean, var.sqrt())
        })
        .collect()
}

/// Per-channel standardization (x - mean) / (std + z).
pub fn normalize_channels(x: &[f64], c: usize, hw: usize, z: f64) -> Vec<f64> {
    let stats = channel_stats(x, c, hw);
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let (mean, std) = stats[ch];
        for i in 0..hw {
            out[ch * hw + i] = (x[ch * hw + i] - mean) / (std + z);
        }
    }
    out
}

/// Spatial attention: softmax over positions of the channel-mean map,
/// multiplied back onto every channel of the input.
pub fn spatial_attention(x: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut mean_map = vec![0.0; hw];
    for ch in 0..c {
        for i in 0..hw {
            mean_map[i] += x[ch * hw + i];
        }
    }
    for v in &mut mean_map {
        *v /= c as f64;
    }
    let max = mean_map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = mean_map.iter().map(|v| (v - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|e| e / denom).collect();
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for i in 0..hw {
            out[ch * hw + i] = x[ch * hw + i] * weights[i];
        }
    }
    out
}

/// The three feature discrepancies between a perturbed and a clean feature
/// map. Returns (local (C*H*W), global (C), structural (C*H*W)).
pub fn discrepancies(
    feat_pert: &[f64],
    feat_clean: &[f64],
    c: usize,
    hw: usize,
    z: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let norm_p = normalize_channels(feat_pert, c, hw, z);
    let norm_c = normalize_channels(feat_clean, c, hw, z);
    let local: Vec<f64> = norm_p.iter().zip(&norm_c).map(|(a, b)| a - b).collect();
    let stats_p = channel_stats(feat_pert, c, hw);
    let stats_c = channel_stats(feat_clean, c, hw);
    let global: Vec<f64> = (0..c)
        .map(|ch| (stats_p[ch].0 - stats_c[ch].0) / (stats_c[ch].1 + z))
        .collect();
    let att_p = spatial_attention(&norm_p, c, hw);
    let att_c = spatial_attention(&norm_c, c, hw);
    let structural: Vec<f64> = att_p.iter().zip(&att_c).map(|(a, b)| a - b).collect();
    (local, global, structural)
}

/// Per-channel adaptive weights: sigmoid of the mean absolute discrepancy,
/// averaging the three components equally.
pub fn adaptive_weights(
    local: &[f64],
    global: &[f64],
    structural: &[f64],
    c: usize,
    hw: usize,
) -> Vec<f64> {
    (0..c)
        .map(|ch| {
            let l = local[ch * hw..(ch + 1) * hw]
                .iter()
                .map(|v| v.abs())
                .sum::<f64>()
                / hw as f64;
            let g = global[ch].abs();
            let s = structural[ch * hw..(ch + 1) * hw]
                .iter()
                .map(|v| v.abs())
                .sum::<f64>()
                / hw as f64;
            sigmoid((l + g + s) / 3.0)
        })
        .collect()
}

/// Config knobs of the feature-enhancement term.
#[derive(Debug, Clone, Copy)]
pub struct EnhanceParams {
    pub alpha: f64,
    pub sigma: f64,
    pub z: f64,
    pub weights: [f64; 3],
    pub exponent_cap: f64,
}

/// Enhanced feature map F_enh for one extractor.
pub fn enhance(
    feat_pert: &[f64],
    feat_clean: &[f64],
    c: usize,
    hw: usize,
    p: &EnhanceParams,
) -> Vec<f64> {
    let (local, global, structural) = discrepancies(feat_pert, feat_clean, c, hw, p.z);
    let w_hat = adaptive_weights(&local, &global, &structural, c, hw);
    let mut sq = 0.0;
    for ch in 0..c {
        for i in 0..hw {
            let wl = w_hat[ch] * local[ch * hw + i];
            let ws = w_hat[ch] * structural[ch * hw + i];
            sq += wl * wl + ws * ws;
        }
        let wg = w_hat[ch] * global[ch];
        sq += wg * wg;
    }
    let amp = p.alpha * (sq.sqrt() / p.sigma).min(p.exponent_cap).exp();
    let [w1, w2, w3] = p.weights;
    (0..c * hw)
        .map(|i| {
            let ch = i / hw;
            let mix = w1 * local[i] + w2 * global[ch] + w3 * structural[i];
            feat_pert[i] + amp * mix
        })
        .collect()
}

/// Interruption loss for one image over a set of extractor features:
/// lambda * sum_i MSE(F_enh_i, clean_i) + sum_i MSE(pert_i, clean_i).
pub fn interruption_loss(
    feats: &[(Vec<f64>, Vec<f64>, usize, usize)],
    lambda: f64,
    p: &EnhanceParams,
) -> f64 {
    let mut l_enh = 0.0;
    let mut l_mse = 0.0;
    for (pert, clean, c, hw) in feats {
        let enh = enhance(pert, clean, *c, *hw, p);
        l_enh += mse(&enh, clean);
        l_mse += mse(pert, clean);
    }
    lambda * l_enh + l_mse
}
