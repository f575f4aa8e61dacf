//! Detection evaluation: greedy IoU matching, precision/recall curves and
//! all-points interpolated average precision.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{iou, Detection};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| f64::from(50 + 5 * i) / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub iou_threshold: f64,
    pub class_id: u32,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAp {
    pub iou_threshold: f64,
    /// Mean AP over classes.
    pub ap: f64,
    pub per_class: BTreeMap<u32, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap_per_threshold: Vec<ThresholdAp>,
    /// mAP at IoU 0.5, when that threshold was evaluated.
    pub map50: Option<f64>,
    /// Mean over the ten thresholds 0.50:0.05:0.95, when all were evaluated.
    pub map5095: Option<f64>,
    pub pr_curves: Vec<PrCurve>,
}

/// True positive flags for `preds` (already in rank order) at `threshold`.
/// Each prediction takes the unmatched same-image ground truth of highest
/// IoU, lowest index on ties.
fn match_greedy(preds: &[&Detection], gts: &[&Detection], threshold: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    preds
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] || g.image_id != p.image_id {
                    continue;
                }
                let v = iou(&p.bbox, &g.bbox);
                if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
            }
            best.is_some()
        })
        .collect()
}

/// Cumulative precision and recall after each ranked prediction.
fn pr_points(tp: &[bool], n_gt: usize) -> (Vec<f64>, Vec<f64>) {
    let mut hits = 0usize;
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(if n_gt == 0 { 0.0 } else { hits as f64 / n_gt as f64 });
    }
    (precision, recall)
}

/// All-points interpolated AP: the precision envelope `max_{j >= k} P_j`
/// summed at each true positive `k`, divided by the ground-truth count.
fn average_precision(tp: &[bool], precision: &[f64], n_gt: usize) -> f64 {
    let mut envelope = precision.to_vec();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut sum = 0.0;
    for (p, &hit) in envelope.iter().zip(tp) {
        if hit {
            sum += p;
        }
    }
    sum / n_gt as f64
}

/// Evaluates `preds` against `gts` at each IoU threshold, per class.
/// A class with no ground truth scores 0 if it has predictions and 1 if it
/// has none; with no detections at all, class 0 is scored that way.
pub fn eval_detections(preds: &[Detection], gts: &[Detection], iou_thresholds: &[f64]) -> Result<EvalReport> {
    if iou_thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::invalid("IoU thresholds must lie in [0, 1]"));
    }
    let mut classes: BTreeSet<u32> = preds.iter().chain(gts).map(|d| d.class_id).collect();
    if classes.is_empty() {
        classes.insert(0);
    }
    let mut ap_per_threshold = Vec::with_capacity(iou_thresholds.len());
    let mut pr_curves = Vec::new();
    for &t in iou_thresholds {
        let mut per_class = BTreeMap::new();
        for &c in &classes {
            let mut cp: Vec<&Detection> = preds.iter().filter(|d| d.class_id == c).collect();
            cp.sort_by(|a, b| b.score().total_cmp(&a.score()));
            let cg: Vec<&Detection> = gts.iter().filter(|d| d.class_id == c).collect();
            let tp = match_greedy(&cp, &cg, t);
            let (precision, recall) = pr_points(&tp, cg.len());
            let ap = if cg.is_empty() {
                if cp.is_empty() {
                    log::info!("class {c} has neither predictions nor ground truth; AP set to 1");
                    1.0
                } else {
                    0.0
                }
            } else {
                average_precision(&tp, &precision, cg.len())
            };
            per_class.insert(c, ap);
            pr_curves.push(PrCurve {
                iou_threshold: t,
                class_id: c,
                precision,
                recall,
            });
        }
        let ap = per_class.values().sum::<f64>() / per_class.len() as f64;
        ap_per_threshold.push(ThresholdAp {
            iou_threshold: t,
            ap,
            per_class,
        });
    }
    let at = |target: f64| {
        ap_per_threshold
            .iter()
            .find(|a| (a.iou_threshold - target).abs() < 1e-9)
            .map(|a| a.ap)
    };
    let map50 = at(0.5);
    let map5095 = coco_thresholds()
        .into_iter()
        .map(at)
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64);
    Ok(EvalReport {
        ap_per_threshold,
        map50,
        map5095,
        pr_curves,
    })
}
