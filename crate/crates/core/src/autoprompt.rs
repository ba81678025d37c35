//! Automatic whole-scene segmentation from coarse-to-fine voxel prompts.

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::geometry::{voxel_downsample, Point3};
use crate::losses::binary_iou;
use crate::model::SnapModel;
use crate::pcdata::{DomainId, PerDomain};
use crate::promptenc::PromptSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoPromptConfig {
    /// Voxel size of the first iteration, in meters.
    pub v0: PerDomain<f32>,
    pub k_max: usize,
    pub tau_s: f32,
    pub tau_nms: f64,
    /// Largest number of prompts decoded in one model call.
    pub batch_limit: usize,
}

impl Default for AutoPromptConfig {
    fn default() -> Self {
        Self {
            v0: PerDomain { indoor: 1.6, outdoor: 8.0, aerial: 12.0 },
            k_max: 4,
            tau_s: 0.5,
            tau_nms: 0.6,
            batch_limit: 64,
        }
    }
}

impl AutoPromptConfig {
    pub fn validate(&self) -> Result<()> {
        for d in DomainId::ALL {
            let v = *self.v0.get(d);
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("v0 for {d} must be positive")));
            }
        }
        if self.k_max == 0 || self.batch_limit == 0 {
            return Err(Error::Config("k_max and batch_limit must be at least 1".into()));
        }
        if !(self.tau_s > 0.0 && self.tau_s < 1.0) || !(self.tau_nms > 0.0 && self.tau_nms < 1.0) {
            return Err(Error::Config("thresholds must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Voxel size used at iteration `k`.
    pub fn voxel_size(&self, domain: DomainId, k: usize) -> f32 {
        self.v0.get(domain) / 2f32.powi(k as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub iteration: usize,
    pub point_index: usize,
    pub point: Point3,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResult {
    pub masks: Vec<Vec<bool>>,
    pub scores: Vec<f32>,
    pub clip_embeddings: Vec<Vec<f32>>,
    pub provenance: Vec<Provenance>,
    /// Prompts decoded at each iteration.
    pub prompts_per_iteration: Vec<usize>,
}

impl SegmentationResult {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn prompts_issued(&self) -> usize {
        self.prompts_per_iteration.iter().sum()
    }

    /// Keeps the masks at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            masks: indices.iter().map(|&i| self.masks[i].clone()).collect(),
            scores: indices.iter().map(|&i| self.scores[i]).collect(),
            clip_embeddings: indices.iter().map(|&i| self.clip_embeddings[i].clone()).collect(),
            provenance: indices.iter().map(|&i| self.provenance[i]).collect(),
            prompts_per_iteration: self.prompts_per_iteration.clone(),
        }
    }

    /// Union of all masks over `n` points.
    pub fn coverage(&self, n: usize) -> Vec<bool> {
        let mut c = vec![false; n];
        for m in &self.masks {
            for (ci, mi) in c.iter_mut().zip(m) {
                *ci |= *mi;
            }
        }
        c
    }
}

/// Greedy non-maximum suppression. Returns kept indices in keep order.
pub fn nms(masks: &[Vec<bool>], scores: &[f32], tau_nms: f64) -> Result<Vec<usize>> {
    if masks.len() != scores.len() {
        return input_err("one score per mask expected");
    }
    let mut order: Vec<usize> = (0..masks.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let ok = kept
            .iter()
            .all(|&j| binary_iou(masks[i].iter().copied(), masks[j].iter().copied()) <= tau_nms);
        if ok {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Number of prompts a single uniform grid at the finest iteration's voxel size
/// would issue over the whole scene.
pub fn uniform_grid_prompt_count(positions: &[Point3], domain: DomainId, cfg: &AutoPromptConfig) -> Result<usize> {
    cfg.validate()?;
    Ok(voxel_downsample(positions, cfg.voxel_size(domain, cfg.k_max - 1))?.len())
}

/// Segments everything in a scene without user prompts.
///
/// Iteration `k` voxelizes the still-uncovered points at `v0 / 2^k` and prompts
/// the model with one click per voxel representative. Masks scoring at least
/// `tau_s` are kept and added to the coverage; NMS runs once after the loop.
pub fn generate_auto_masks(
    model: &SnapModel,
    positions: &[Point3],
    domain: DomainId,
    scene_id: &str,
    cfg: &AutoPromptConfig,
) -> Result<SegmentationResult> {
    cfg.validate()?;
    let features = model.encode_scene(positions, domain, scene_id)?;
    let n = positions.len();
    let mut covered = vec![false; n];
    let mut all = SegmentationResult::default();
    for k in 0..cfg.k_max {
        let uncovered: Vec<usize> = (0..n).filter(|&i| !covered[i]).collect();
        if uncovered.is_empty() {
            all.prompts_per_iteration.push(0);
            continue;
        }
        let pts: Vec<Point3> = uncovered.iter().map(|&i| positions[i]).collect();
        let vox = voxel_downsample(&pts, cfg.voxel_size(domain, k))?;
        let clicks: Vec<usize> = vox.representative_indices.iter().map(|&r| uncovered[r]).collect();
        all.prompts_per_iteration.push(clicks.len());
        log::debug!("auto prompts: iteration {k}, {} uncovered points, {} prompts", uncovered.len(), clicks.len());
        for chunk in clicks.chunks(cfg.batch_limit) {
            let prompts = PromptSet::single_clicks(&chunk.iter().map(|&i| positions[i]).collect::<Vec<_>>());
            let pred = model.predict_with_features(&features, &prompts)?;
            for (m, &click) in chunk.iter().enumerate() {
                if pred.scores[m] < cfg.tau_s {
                    continue;
                }
                let mask = pred.binary_mask(m, 0.5);
                for (c, b) in covered.iter_mut().zip(&mask) {
                    *c |= *b;
                }
                all.masks.push(mask);
                all.scores.push(pred.scores[m]);
                all.clip_embeddings.push(pred.clip_embeddings.row(m).to_vec());
                all.provenance.push(Provenance { iteration: k, point_index: click, point: positions[click] });
            }
        }
    }
    let keep = nms(&all.masks, &all.scores, cfg.tau_nms)?;
    Ok(all.select(&keep))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn voxel_schedule() {
        let cfg = AutoPromptConfig { v0: PerDomain { indoor: 4.0, outdoor: 8.0, aerial: 12.0 }, ..Default::default() };
        assert_eq!(cfg.voxel_size(DomainId::Indoor, 2), 1.0);
        assert_eq!(cfg.voxel_size(DomainId::Outdoor, 0), 8.0);
        assert!(AutoPromptConfig { k_max: 0, ..Default::default() }.validate().is_err());
        assert!(AutoPromptConfig { tau_s: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn nms_cases() {
        let a = vec![true, true, false, false];
        let b = vec![false, false, true, true];
        assert_eq!(nms(&[a.clone(), a.clone()], &[0.8, 0.9], 0.6).unwrap(), vec![1]);
        assert_eq!(nms(&[a.clone(), b.clone()], &[0.8, 0.9], 0.6).unwrap(), vec![1, 0]);
        assert_eq!(nms(&[a.clone(), a], &[0.7, 0.7], 0.6).unwrap(), vec![0]);
    }

    /// Quadratic reference: repeatedly take the best remaining mask and drop
    /// everything overlapping it above the threshold.
    fn nms_reference(masks: &[Vec<bool>], scores: &[f32], tau: f64) -> Vec<usize> {
        let mut alive: Vec<bool> = vec![true; masks.len()];
        let mut out = Vec::new();
        loop {
            let mut best: Option<usize> = None;
            for i in 0..masks.len() {
                if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                    best = Some(i);
                }
            }
            let Some(b) = best else { break };
            out.push(b);
            alive[b] = false;
            for i in 0..masks.len() {
                let inter = (0..masks[i].len()).filter(|&p| masks[i][p] && masks[b][p]).count();
                let union = (0..masks[i].len()).filter(|&p| masks[i][p] || masks[b][p]).count();
                let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
                if iou > tau {
                    alive[i] = false;
                }
            }
        }
        out
    }

    proptest! {
        #[test]
        fn nms_matches_reference(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 30;
            let base: Vec<Vec<bool>> = (0..5).map(|_| (0..n).map(|_| rng.random_bool(0.4)).collect()).collect();
            let masks: Vec<Vec<bool>> = (0..20)
                .map(|_| {
                    let b = &base[rng.random_range(0..5)];
                    b.iter().map(|v| if rng.random_bool(0.1) { !v } else { *v }).collect()
                })
                .collect();
            let scores: Vec<f32> = (0..20).map(|_| (rng.random_range(0..50) as f32) / 50.0).collect();
            let kept = nms(&masks, &scores, 0.6).unwrap();
            prop_assert_eq!(&kept, &nms_reference(&masks, &scores, 0.6));
            for (x, &i) in kept.iter().enumerate() {
                for &j in &kept[..x] {
                    prop_assert!(binary_iou(masks[i].iter().copied(), masks[j].iter().copied()) <= 0.6);
                }
            }
        }
    }
}
