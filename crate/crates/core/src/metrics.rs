//! Evaluation metrics: mask IoU, IoU@k, panoptic quality and average precision.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::pcdata::UNLABELED;

pub fn mask_iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return input_err(format!("mask lengths differ: {} vs {}", a.len(), b.len()));
    }
    Ok(crate::losses::binary_iou(a.iter().copied(), b.iter().copied()))
}

/// Mean over objects of the IoU after `k` clicks, for each `k`.
pub fn iou_at_k(trajectories: &[Vec<f64>], ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    if trajectories.is_empty() {
        return input_err("no trajectories to average");
    }
    let mut out = BTreeMap::new();
    for &k in ks {
        if k == 0 {
            return input_err("click counts start at 1");
        }
        let mut sum = 0.0;
        for t in trajectories {
            if t.len() < k {
                return input_err(format!("trajectory of length {} has no entry for k={k}", t.len()));
            }
            sum += t[k - 1];
        }
        out.insert(k, sum / trajectories.len() as f64);
    }
    Ok(out)
}

/// Per-point instance and class labels; `-1` marks unlabeled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanopticLabels {
    pub instance: Vec<i32>,
    pub class: Vec<i32>,
}

impl PanopticLabels {
    pub fn new(instance: Vec<i32>, class: Vec<i32>) -> Result<Self> {
        if instance.len() != class.len() {
            return input_err("instance and class labels differ in length");
        }
        Ok(Self { instance, class })
    }

    pub fn len(&self) -> usize {
        self.instance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instance.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPanoptic {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub iou_sum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanopticReport {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub pq_things: Option<f64>,
    pub pq_stuff: Option<f64>,
    pub per_class: BTreeMap<i32, ClassPanoptic>,
}

/// Segments keyed by (class, instance); points without an instance form one
/// segment per class.
fn segments(labels: &PanopticLabels, class_agnostic: bool) -> BTreeMap<(i32, i32), Vec<usize>> {
    let mut out: BTreeMap<(i32, i32), Vec<usize>> = BTreeMap::new();
    for i in 0..labels.len() {
        let c = labels.class[i];
        if c == UNLABELED {
            continue;
        }
        let c = if class_agnostic { 0 } else { c };
        out.entry((c, labels.instance[i].max(UNLABELED))).or_default().push(i);
    }
    out
}

fn sorted_overlap(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Panoptic quality with per-class matching at IoU > 0.5.
///
/// Ground-truth points with class `-1` are void: a prediction overlapping void
/// for more than half its points is not counted as a false positive. With
/// `class_agnostic` every labeled class collapses into class 0.
pub fn panoptic_quality(
    pred: &PanopticLabels,
    gt: &PanopticLabels,
    things: &BTreeSet<i32>,
    stuff: &BTreeSet<i32>,
    class_agnostic: bool,
) -> Result<PanopticReport> {
    if pred.len() != gt.len() || pred.instance.len() != pred.class.len() || gt.instance.len() != gt.class.len() {
        return input_err("prediction and ground truth cover different point counts");
    }
    let void: Vec<bool> = gt.class.iter().map(|c| *c == UNLABELED).collect();
    let pred_seg = segments(pred, class_agnostic);
    let gt_seg = segments(gt, class_agnostic);
    let classes: BTreeSet<i32> = pred_seg.keys().chain(gt_seg.keys()).map(|k| k.0).collect();

    let mut per_class = BTreeMap::new();
    for &c in &classes {
        let ps: Vec<&Vec<usize>> = pred_seg.range((c, i32::MIN)..=(c, i32::MAX)).map(|(_, v)| v).collect();
        let gs: Vec<&Vec<usize>> = gt_seg.range((c, i32::MIN)..=(c, i32::MAX)).map(|(_, v)| v).collect();
        let mut pred_matched = vec![false; ps.len()];
        let mut gt_matched = vec![false; gs.len()];
        let (mut tp, mut iou_sum) = (0usize, 0.0f64);
        for (pi, p) in ps.iter().enumerate() {
            for (gi, g) in gs.iter().enumerate() {
                if gt_matched[gi] {
                    continue;
                }
                let inter = sorted_overlap(p, g);
                if inter == 0 {
                    continue;
                }
                let iou = inter as f64 / (p.len() + g.len() - inter) as f64;
                if iou > 0.5 {
                    pred_matched[pi] = true;
                    gt_matched[gi] = true;
                    tp += 1;
                    iou_sum += iou;
                    break;
                }
            }
        }
        let fp = ps
            .iter()
            .enumerate()
            .filter(|(pi, p)| {
                let in_void = p.iter().filter(|&&i| void[i]).count();
                !pred_matched[*pi] && 2 * in_void <= p.len()
            })
            .count();
        let fn_ = gt_matched.iter().filter(|m| !**m).count();
        let den = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
        if den == 0.0 {
            continue;
        }
        let sq = if tp > 0 { iou_sum / tp as f64 } else { 0.0 };
        let rq = tp as f64 / den;
        per_class.insert(c, ClassPanoptic { pq: sq * rq, sq, rq, tp, fp, fn_, iou_sum });
    }

    let mean = |f: &dyn Fn(&ClassPanoptic) -> f64, keep: &dyn Fn(i32) -> bool| -> Option<f64> {
        let vals: Vec<f64> = per_class.iter().filter(|(c, _)| keep(**c)).map(|(_, s)| f(s)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let all = |_: i32| true;
    Ok(PanopticReport {
        pq: mean(&|s| s.pq, &all).unwrap_or(0.0),
        sq: mean(&|s| s.sq, &all).unwrap_or(0.0),
        rq: mean(&|s| s.rq, &all).unwrap_or(0.0),
        pq_things: if class_agnostic { None } else { mean(&|s| s.pq, &|c| things.contains(&c)) },
        pq_stuff: if class_agnostic { None } else { mean(&|s| s.pq, &|c| stuff.contains(&c)) },
        per_class,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredMask {
    pub mask: Vec<bool>,
    pub score: f64,
    pub class: i32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtInstance {
    pub mask: Vec<bool>,
    pub class: i32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub ap: f64,
    pub ap50: f64,
    pub ap25: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap25: f64,
    pub per_class: BTreeMap<i32, ClassAp>,
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn ap_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// 101-point interpolated AP of one class at one IoU threshold, or `None` when
/// the class has no ground truth.
pub fn class_ap_at(preds: &[&ScoredMask], gts: &[&GtInstance], threshold: f64) -> Result<Option<f64>> {
    if gts.is_empty() {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut used = vec![false; gts.len()];
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for (rank, &pi) in order.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if used[gi] {
                continue;
            }
            let iou = mask_iou(&preds[pi].mask, &g.mask)?;
            if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            used[gi] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / gts.len() as f64);
    }
    let mut area = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let p = (0..precision.len()).filter(|&i| recall[i] >= level).map(|i| precision[i]).fold(0.0, f64::max);
        area += p;
    }
    Ok(Some(area / 101.0))
}

/// AP averaged over [`ap_thresholds`], AP50 and AP25, each a mean over classes
/// with ground truth.
pub fn average_precision(preds: &[ScoredMask], gts: &[GtInstance]) -> Result<ApReport> {
    let n = gts.first().map(|g| g.mask.len()).or_else(|| preds.first().map(|p| p.mask.len()));
    if let Some(n) = n {
        if preds.iter().any(|p| p.mask.len() != n) || gts.iter().any(|g| g.mask.len() != n) {
            return input_err("all masks must cover the same points");
        }
    }
    if preds.iter().any(|p| !p.score.is_finite()) {
        return input_err("prediction scores must be finite");
    }
    let classes: BTreeSet<i32> = gts.iter().map(|g| g.class).collect();
    let thresholds = ap_thresholds();
    let mut per_class = BTreeMap::new();
    for c in classes {
        let p: Vec<&ScoredMask> = preds.iter().filter(|p| p.class == c).collect();
        let g: Vec<&GtInstance> = gts.iter().filter(|g| g.class == c).collect();
        let mut ap = 0.0;
        for t in &thresholds {
            ap += class_ap_at(&p, &g, *t)?.unwrap_or(0.0);
        }
        per_class.insert(
            c,
            ClassAp {
                ap: ap / thresholds.len() as f64,
                ap50: class_ap_at(&p, &g, 0.5)?.unwrap_or(0.0),
                ap25: class_ap_at(&p, &g, 0.25)?.unwrap_or(0.0),
            },
        );
    }
    let mean = |f: fn(&ClassAp) -> f64| {
        if per_class.is_empty() {
            0.0
        } else {
            per_class.values().map(f).sum::<f64>() / per_class.len() as f64
        }
    };
    Ok(ApReport { ap: mean(|c| c.ap), ap50: mean(|c| c.ap50), ap25: mean(|c| c.ap25), per_class })
}
