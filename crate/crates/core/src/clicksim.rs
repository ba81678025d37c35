//! Simulated positive clicks for training and interactive evaluation.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::geometry::Point3;
use crate::losses::binary_iou;
use crate::model::SnapModel;
use crate::pcdata::SceneSample;
use crate::promptenc::PromptSet;

/// `k` indices drawn uniformly from the positives of `gt_mask`, without
/// replacement unless `k` exceeds the number of positives.
pub fn sample_initial_clicks<R: Rng + ?Sized>(gt_mask: &[bool], k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k == 0 {
        return input_err("at least one click must be requested");
    }
    let positives: Vec<usize> = (0..gt_mask.len()).filter(|&i| gt_mask[i]).collect();
    if positives.is_empty() {
        return input_err("cannot click on an empty mask");
    }
    if k <= positives.len() {
        Ok(index::sample(rng, positives.len(), k).into_iter().map(|i| positives[i]).collect())
    } else {
        Ok((0..k).map(|_| positives[rng.random_range(0..positives.len())]).collect())
    }
}

/// A uniform click on the unsegmented part of the object, `gt ∧ ¬pred`.
pub fn sample_refinement_click<R: Rng + ?Sized>(gt_mask: &[bool], pred_mask: &[bool], rng: &mut R) -> Result<Option<usize>> {
    if gt_mask.len() != pred_mask.len() {
        return input_err(format!("mask lengths differ: {} vs {}", gt_mask.len(), pred_mask.len()));
    }
    let missed: Vec<usize> = (0..gt_mask.len()).filter(|&i| gt_mask[i] && !pred_mask[i]).collect();
    if missed.is_empty() {
        return Ok(None);
    }
    Ok(Some(missed[rng.random_range(0..missed.len())]))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClickStrategy {
    /// All `k` clicks sampled up front from the object.
    Random,
    /// One refinement click per round on the previous prediction's misses.
    Iterative,
}

impl std::str::FromStr for ClickStrategy {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "iterative" => Ok(Self::Iterative),
            other => input_err(format!("unknown click strategy {other:?}")),
        }
    }
}

/// IoU after 1..=budget clicks for one ground-truth instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectTrajectory {
    pub instance_id: i32,
    pub ious: Vec<f64>,
    /// Clicked point indices in issue order (final round for the random strategy).
    pub clicks: Vec<usize>,
}

/// Binarization threshold for evaluated masks.
pub const EVAL_THRESHOLD: f32 = 0.5;

fn object_rng(seed: u64, instance_id: i32) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (instance_id as u32 as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Runs the click protocol on every labeled instance of `scene`.
///
/// Scene features are computed once; all objects of a round share one decoder
/// call. Each object's clicks come from its own rng stream derived from `seed`.
pub fn simulate_interaction(
    model: &SnapModel,
    scene: &SceneSample,
    budget: usize,
    strategy: ClickStrategy,
    seed: u64,
) -> Result<Vec<ObjectTrajectory>> {
    if budget == 0 {
        return input_err("click budget must be at least 1");
    }
    scene.validate()?;
    let instances = scene.instances();
    if instances.is_empty() {
        return Ok(Vec::new());
    }
    let features = model.encode_scene(&scene.positions, scene.domain, &scene.scene_id)?;
    let ids: Vec<i32> = instances.keys().copied().collect();
    let gts: Vec<Vec<bool>> = ids.iter().map(|id| scene.instance_mask(*id)).collect();
    let pos = |idx: &[usize]| -> Vec<Point3> { idx.iter().map(|&i| scene.positions[i]).collect() };
    let mut out: Vec<ObjectTrajectory> =
        ids.iter().map(|&id| ObjectTrajectory { instance_id: id, ious: Vec::with_capacity(budget), clicks: Vec::new() }).collect();

    match strategy {
        ClickStrategy::Random => {
            for k in 1..=budget {
                let clicks: Vec<Vec<usize>> = ids
                    .iter()
                    .zip(&gts)
                    .map(|(id, gt)| sample_initial_clicks(gt, k, &mut object_rng(seed, *id)))
                    .collect::<Result<_>>()?;
                let prompts = PromptSet::new(clicks.iter().map(|c| pos(c)).collect());
                let pred = model.predict_with_features(&features, &prompts)?;
                for (m, traj) in out.iter_mut().enumerate() {
                    let mask = pred.binary_mask(m, EVAL_THRESHOLD);
                    traj.ious.push(binary_iou(mask.into_iter(), gts[m].iter().copied()));
                    traj.clicks = clicks[m].clone();
                }
            }
        }
        ClickStrategy::Iterative => {
            let mut rngs: Vec<ChaCha8Rng> = ids.iter().map(|id| object_rng(seed, *id)).collect();
            let mut clicks: Vec<Vec<usize>> = gts
                .iter()
                .zip(rngs.iter_mut())
                .map(|(gt, rng)| sample_initial_clicks(gt, 1, rng))
                .collect::<Result<_>>()?;
            for round in 0..budget {
                let prompts = PromptSet::new(clicks.iter().map(|c| pos(c)).collect());
                let pred = model.predict_with_features(&features, &prompts)?;
                for m in 0..ids.len() {
                    let mask = pred.binary_mask(m, EVAL_THRESHOLD);
                    out[m].ious.push(binary_iou(mask.iter().copied(), gts[m].iter().copied()));
                    if round + 1 < budget {
                        if let Some(c) = sample_refinement_click(&gts[m], &mask, &mut rngs[m])? {
                            clicks[m].push(c);
                        }
                    }
                }
            }
            for (traj, c) in out.iter_mut().zip(clicks) {
                traj.clicks = c;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn single_positive_is_forced() {
        let mut mask = vec![false; 10];
        mask[6] = true;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_initial_clicks(&mask, 1, &mut rng).unwrap(), vec![6]);
        assert_eq!(sample_initial_clicks(&mask, 3, &mut rng).unwrap(), vec![6, 6, 6]);
        assert!(sample_initial_clicks(&[false; 4], 1, &mut rng).is_err());
        assert!(sample_initial_clicks(&mask, 0, &mut rng).is_err());
    }

    #[test]
    fn initial_clicks_are_reproducible_and_distinct() {
        let mask = vec![true; 100];
        let a = sample_initial_clicks(&mask, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_initial_clicks(&mask, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let mut s = a.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 3);
    }

    #[test]
    fn initial_clicks_are_uniform() {
        // χ² goodness of fit over 20 positives, 10⁵ draws; 36.19 is the 0.99 quantile for 19 dof
        let mut mask = vec![false; 50];
        for i in (0..50).step_by(5) {
            mask[i] = true;
            mask[i + 2] = true;
        }
        let positives: Vec<usize> = (0..50).filter(|&i| mask[i]).collect();
        let mut counts = vec![0f64; 50];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let draws = 100_000;
        for _ in 0..draws {
            counts[sample_initial_clicks(&mask, 1, &mut rng).unwrap()[0]] += 1.0;
        }
        let expected = draws as f64 / positives.len() as f64;
        let chi2: f64 = positives.iter().map(|&i| (counts[i] - expected).powi(2) / expected).sum();
        assert!(chi2 < 36.19, "chi2 {chi2}");
        assert!((0..50).filter(|i| !mask[*i]).all(|i| counts[i] == 0.0));
    }

    #[test]
    fn refinement_cases() {
        let gt = vec![true, true, false, true];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_refinement_click(&gt, &gt, &mut rng).unwrap(), None);
        let none = vec![false; 4];
        let a = sample_refinement_click(&gt, &none, &mut ChaCha8Rng::seed_from_u64(4)).unwrap().unwrap();
        let b = sample_initial_clicks(&gt, 1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap()[0];
        assert!(gt[a] && gt[b]);
        assert!(sample_refinement_click(&gt, &[true], &mut rng).is_err());
    }

    #[test]
    fn refinement_predicate_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10_000 {
            let n = rng.random_range(1..20);
            let gt: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            let pred: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            match sample_refinement_click(&gt, &pred, &mut rng).unwrap() {
                Some(i) => assert!(gt[i] && !pred[i]),
                None => assert!((0..n).all(|i| !gt[i] || pred[i])),
            }
        }
    }

    proptest! {
        #[test]
        fn clicks_land_on_object(bits in proptest::collection::vec(any::<bool>(), 1..64), k in 1usize..12, seed in any::<u64>()) {
            prop_assume!(bits.iter().any(|b| *b));
            let c = sample_initial_clicks(&bits, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(c.len(), k);
            prop_assert!(c.iter().all(|&i| bits[i]));
        }
    }
}
