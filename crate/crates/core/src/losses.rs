//! Training losses with hand-derived gradients, evaluated in f64.
//!
//! Matrices are flat row-major slices; `n` is the number of columns (points).

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::geometry::{dist2, Point3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClickWeightConfig {
    pub w_max: f64,
    pub w_min: f64,
    pub tau_d: f64,
    /// Decay to `w_min` exactly at `tau_d` instead of jumping there.
    #[serde(default)]
    pub continuous: bool,
}

impl Default for ClickWeightConfig {
    fn default() -> Self {
        Self { w_max: 2.0, w_min: 1.0, tau_d: 0.5, continuous: false }
    }
}

impl ClickWeightConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_max >= self.w_min && self.w_min > 0.0) {
            return input_err("click weights need w_max ≥ w_min > 0");
        }
        if !(self.tau_d > 0.0 && self.tau_d <= 1.0) {
            return input_err("tau_d must lie in (0, 1]");
        }
        Ok(())
    }

    /// Weight at normalized distance `d` from the nearest click.
    pub fn weight(&self, d: f64) -> f64 {
        if self.continuous {
            let t = (d / self.tau_d).min(1.0);
            self.w_max - (self.w_max - self.w_min) * t
        } else if d < self.tau_d {
            self.w_max - (self.w_max - self.w_min) * d
        } else {
            self.w_min
        }
    }
}

/// Per-point weights from the distance to the nearest click, divided by `normalizer`
/// (the scene bounding-box diagonal).
pub fn click_weights(
    positions: &[Point3],
    clicks: &[Point3],
    cfg: &ClickWeightConfig,
    normalizer: f64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if clicks.is_empty() {
        return input_err("click weights need at least one click");
    }
    if !(normalizer > 0.0) || !normalizer.is_finite() {
        return input_err("distance normalizer must be positive");
    }
    Ok(positions
        .iter()
        .map(|p| {
            let d2 = clicks.iter().map(|c| dist2(p, c)).fold(f32::INFINITY, f32::min);
            cfg.weight((d2 as f64).sqrt() / normalizer)
        })
        .collect())
}

/// A scalar loss and its gradient with respect to the loss's direct input.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_shapes(len: usize, n: usize, others: &[(&str, usize)]) -> Result<usize> {
    if n == 0 || !len.is_multiple_of(n) || len == 0 {
        return input_err(format!("{len} values do not form rows of {n} points"));
    }
    for (name, l) in others {
        if *l != len {
            return input_err(format!("{name} has {l} values, expected {len}"));
        }
    }
    Ok(len / n)
}

fn check_binary(targets: &[f64]) -> Result<()> {
    if targets.iter().any(|t| *t != 0.0 && *t != 1.0) {
        return input_err("targets must be 0 or 1");
    }
    Ok(())
}

/// `log σ(z)`, stable for large |z|.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Weighted binary focal loss, averaged over points and then objects.
pub fn focal_loss(
    logits: &[f64],
    targets: &[f64],
    weights: &[f64],
    n: usize,
    gamma: f64,
    alpha: f64,
) -> Result<LossValue> {
    let m = check_shapes(logits.len(), n, &[("targets", targets.len()), ("weights", weights.len())])?;
    check_binary(targets)?;
    let scale = 1.0 / (m * n) as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for i in 0..logits.len() {
        let (sign, alpha_t) = if targets[i] == 1.0 { (1.0, alpha) } else { (-1.0, 1.0 - alpha) };
        let z = sign * logits[i];
        let q = sigmoid(z);
        let log_q = log_sigmoid(z);
        let one_minus = sigmoid(-z);
        let modulator = if gamma == 0.0 { 1.0 } else { one_minus.powf(gamma) };
        let w = weights[i] * scale;
        value += w * -alpha_t * modulator * log_q;
        // d/dz of −α_t (1−q)^γ log q = α_t (1−q)^γ (γ q log q − (1−q))
        let dz = alpha_t * modulator * (gamma * q * log_q - one_minus);
        grad[i] = w * sign * dz;
    }
    Ok(LossValue { value, grad })
}

/// Weighted soft Dice loss averaged over objects.
pub fn dice_loss(probs: &[f64], targets: &[f64], weights: &[f64], n: usize, smooth: f64) -> Result<LossValue> {
    let m = check_shapes(probs.len(), n, &[("targets", targets.len()), ("weights", weights.len())])?;
    check_binary(targets)?;
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return input_err("dice probabilities must lie in [0, 1]");
    }
    let mut value = 0.0;
    let mut grad = vec![0.0; probs.len()];
    for obj in 0..m {
        let r = obj * n..(obj + 1) * n;
        let (p, t, w) = (&probs[r.clone()], &targets[r.clone()], &weights[r.clone()]);
        let inter: f64 = (0..n).map(|i| w[i] * p[i] * t[i]).sum();
        let den: f64 = (0..n).map(|i| w[i] * p[i] + w[i] * t[i]).sum::<f64>() + smooth;
        let num = 2.0 * inter + smooth;
        value += (1.0 - num / den) / m as f64;
        for i in 0..n {
            let d = -(2.0 * w[i] * t[i] * den - num * w[i]) / (den * den);
            grad[r.start + i] = d / m as f64;
        }
    }
    Ok(LossValue { value, grad })
}

/// Focal + Dice on every non-pad click-slot mask (`M·P` rows), averaged over slots.
/// Slot `j` of object `m` is row `m·P + j` and is compared with object `m`'s target.
#[allow(clippy::too_many_arguments)]
pub fn aux_loss(
    aux_logits: &[f64],
    targets: &[f64],
    weights: &[f64],
    n: usize,
    slots: usize,
    pad: &[bool],
    gamma: f64,
    alpha: f64,
    smooth: f64,
) -> Result<LossValue> {
    let m = check_shapes(targets.len(), n, &[("weights", weights.len())])?;
    if aux_logits.len() != m * slots * n || pad.len() != m * slots {
        return input_err("auxiliary logits must have one row per object slot");
    }
    let mut grad = vec![0.0; aux_logits.len()];
    let valid: Vec<usize> = (0..m * slots).filter(|&r| !pad[r]).collect();
    if valid.is_empty() {
        return Ok(LossValue { value: 0.0, grad });
    }
    let k = valid.len() as f64;
    let mut value = 0.0;
    for &row in &valid {
        let obj = row / slots;
        let z = &aux_logits[row * n..(row + 1) * n];
        let t = &targets[obj * n..(obj + 1) * n];
        let w = &weights[obj * n..(obj + 1) * n];
        let f = focal_loss(z, t, w, n, gamma, alpha)?;
        let p: Vec<f64> = z.iter().map(|v| sigmoid(*v)).collect();
        let d = dice_loss(&p, t, w, n, smooth)?;
        value += (f.value + d.value) / k;
        for i in 0..n {
            let dp = d.grad[i] * p[i] * (1.0 - p[i]);
            grad[row * n + i] = (f.grad[i] + dp) / k;
        }
    }
    Ok(LossValue { value, grad })
}

/// IoU of two binary masks; two empty masks have IoU 1.
pub fn binary_iou(a: impl Iterator<Item = bool>, b: impl Iterator<Item = bool>) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// IoU targets `IoU(probs > tau, gt)` per object.
pub fn iou_targets(mask_probs: &[f64], gt: &[f64], n: usize, tau: f64) -> Result<Vec<f64>> {
    let m = check_shapes(mask_probs.len(), n, &[("gt masks", gt.len())])?;
    check_binary(gt)?;
    Ok((0..m)
        .map(|obj| {
            let r = obj * n..(obj + 1) * n;
            binary_iou(mask_probs[r.clone()].iter().map(|p| *p > tau), gt[r].iter().map(|t| *t == 1.0))
        })
        .collect())
}

/// Mean squared error between predicted scores and the IoU of the binarized masks.
/// The gradient is with respect to the scores only.
pub fn score_loss(scores: &[f64], mask_probs: &[f64], gt: &[f64], n: usize, tau: f64) -> Result<LossValue> {
    if !(tau > 0.0 && tau < 1.0) {
        return input_err("binarization threshold must lie in (0, 1)");
    }
    let targets = iou_targets(mask_probs, gt, n, tau)?;
    if targets.len() != scores.len() {
        return input_err("one score per object expected");
    }
    let m = scores.len() as f64;
    let value = scores.iter().zip(&targets).map(|(s, t)| (s - t) * (s - t)).sum::<f64>() / m;
    let grad = scores.iter().zip(&targets).map(|(s, t)| 2.0 * (s - t) / m).collect();
    Ok(LossValue { value, grad })
}

/// Largest tolerated deviation from unit norm for text-loss inputs.
pub const NORM_TOLERANCE: f64 = 1e-4;

fn check_unit_rows(data: &[f64], dim: usize, what: &str) -> Result<()> {
    for (r, row) in data.chunks_exact(dim).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return input_err(format!("{what} row {r} has norm {norm}, expected 1"));
        }
    }
    Ok(())
}

/// Focal loss over the softmax of cosine similarities between predicted
/// embeddings (`M×dim`) and vocabulary embeddings (`C×dim`), divided by `temperature`.
/// The gradient is with respect to the predicted embeddings.
pub fn text_loss(
    embeddings: &[f64],
    vocab: &[f64],
    labels: &[usize],
    dim: usize,
    gamma: f64,
    temperature: f64,
) -> Result<LossValue> {
    let m = check_shapes(embeddings.len(), dim, &[])?;
    let c = check_shapes(vocab.len(), dim, &[])?;
    if labels.len() != m || labels.iter().any(|l| *l >= c) {
        return input_err("every embedding needs a label below the vocabulary size");
    }
    if !(temperature > 0.0) {
        return input_err("temperature must be positive");
    }
    check_unit_rows(embeddings, dim, "embedding")?;
    check_unit_rows(vocab, dim, "vocabulary")?;
    let mut value = 0.0;
    let mut grad = vec![0.0; embeddings.len()];
    for i in 0..m {
        let e = &embeddings[i * dim..(i + 1) * dim];
        let z: Vec<f64> = (0..c)
            .map(|k| e.iter().zip(&vocab[k * dim..(k + 1) * dim]).map(|(a, b)| a * b).sum::<f64>() / temperature)
            .collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let probs: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
        let y = labels[i];
        let log_p = z[y] - lse;
        let p = probs[y];
        let one_minus = (1.0 - p).max(0.0);
        let modulator = if gamma == 0.0 { 1.0 } else { one_minus.powf(gamma) };
        value += -modulator * log_p / m as f64;
        // dL/dp, then through the softmax: dp/dz_k = p (δ_ky − p_k)
        let dmod = if gamma == 0.0 { 0.0 } else { gamma * one_minus.powf(gamma - 1.0) };
        let dl_dp = dmod * log_p - modulator / p;
        for k in 0..c {
            let delta = if k == y { 1.0 } else { 0.0 };
            let dz = dl_dp * p * (delta - probs[k]) / m as f64;
            let row = &vocab[k * dim..(k + 1) * dim];
            for d in 0..dim {
                grad[i * dim + d] += dz * row[d] / temperature;
            }
        }
    }
    Ok(LossValue { value, grad })
}

/// All loss terms of one step and their unit-weight sum.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub focal: f64,
    pub dice: f64,
    pub aux: f64,
    pub score: f64,
    pub text: f64,
    pub total: f64,
}

pub fn total_loss(focal: f64, dice: f64, aux: f64, score: f64, text: f64) -> LossReport {
    LossReport { focal, dice, aux, score, text, total: focal + dice + aux + score + text }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub click_weight: ClickWeightConfig,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_smooth: f64,
    /// Binarization threshold of the IoU target for the score head.
    pub score_tau: f64,
    pub text_gamma: f64,
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            click_weight: ClickWeightConfig::default(),
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            dice_smooth: 1.0,
            score_tau: 0.5,
            text_gamma: 2.0,
            temperature: 0.07,
        }
    }
}
