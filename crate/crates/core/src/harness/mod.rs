//! Evaluation, synthetic data, threshold simulation, configuration and the
//! command-line front end.

pub mod cli;
pub mod config;
pub mod eval;
pub mod simulate;
pub mod synth;

pub use config::{PipelineConfig, ScorerKind};
pub use eval::{coco_thresholds, eval_detections, EvalReport};
pub use simulate::simulate_threshold;
pub use synth::{synth_scene, Scene, SynthParams};

use crate::geom::{iou, Detection};

/// Confidence filter followed by per-image, per-class greedy NMS.
/// Output keeps descending score order, ties by input index.
pub fn nms(dets: &[Detection], iou_threshold: f64, conf_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<&Detection> = dets.iter().filter(|d| d.score() >= conf_threshold).collect();
    order.sort_by(|a, b| b.score().total_cmp(&a.score()));
    let mut kept: Vec<&Detection> = Vec::new();
    for d in order {
        let suppressed = kept
            .iter()
            .any(|k| k.image_id == d.image_id && k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept.into_iter().cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::BBox;

    #[test]
    fn nms_suppresses_overlaps_and_low_scores() {
        let d = |x: f64, s: f64| Detection::new("a", BBox::new(x, 0.0, x + 10.0, 10.0).unwrap(), s, 0).unwrap();
        let dets = [d(0.0, 0.8), d(1.0, 0.9), d(30.0, 0.5), d(60.0, 0.2)];
        let kept = nms(&dets, 0.5, 0.25);
        let xs: Vec<f64> = kept.iter().map(|k| k.bbox.x1()).collect();
        assert_eq!(xs, vec![1.0, 30.0]);
    }
}
