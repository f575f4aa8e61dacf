use proptest::prelude::*;

use wakeda_core::harness::{eval_detections, nms, synth_scene, SynthParams};
use wakeda_core::membank::{calibrate, prescreen, CalibConfig, MemEntry, MemoryBank};
use wakeda_core::mixer::{merge_labels, quadrant_confidences, select_region};
use wakeda_core::{BBox, Detection, Tensor};

fn featmap() -> Tensor {
    Tensor::new(vec![3, 8, 8], (0..192).map(|i| f64::from((i * 37) % 11) / 10.0 - 0.5).collect()).unwrap()
}

#[test]
fn synth_calibrate_mix_eval() {
    let params = SynthParams::default();
    let scene = synth_scene(42, (128, 128), 3, &params).unwrap();
    let mut candidates: Vec<Detection> = scene.gts.iter().map(|g| g.with_score(0.85).unwrap()).collect();
    // a duplicate and a spurious low-confidence box
    candidates.push(scene.gts[0].with_score(0.6).unwrap());
    candidates.push(Detection::new("synth-42", BBox::new(2.0, 2.0, 14.0, 14.0).unwrap(), 0.1, 0).unwrap());

    let kept = nms(&candidates, 0.5, 0.25);
    assert_eq!(kept.len(), 3);

    let cfg = CalibConfig::default();
    let bank = MemoryBank::new(cfg.capacity).unwrap();
    let tau = 0.3;
    let out = calibrate(&prescreen(&kept, tau), &featmap(), &scene.image, &bank, tau, &cfg, 0).unwrap();
    assert_eq!(out.accepted.len(), 3);
    assert_eq!(out.bank.len(), 3);

    let report = eval_detections(&out.accepted, &scene.gts, &[0.5, 0.75]).unwrap();
    assert_eq!(report.map50, Some(1.0));

    let q = quadrant_confidences(&out.accepted, (128, 128)).unwrap();
    let rm = select_region(&q, (128, 128)).unwrap();
    let merged = merge_labels(&out.accepted, &[], &rm);
    let region = rm.rect();
    assert!(merged.iter().all(|d| d.bbox.clip_to(&region) == Some(d.bbox)));
}

fn bank_with(confs: &[f64]) -> MemoryBank {
    let entries = confs
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let f = vec![1.0 + i as f64 * 0.1, -0.5, 0.3 * i as f64];
            MemEntry::new(f, c, BBox::new(20.0 * i as f64, 0.0, 20.0 * i as f64 + 4.0, 4.0).unwrap(), "old", 0).unwrap()
        })
        .collect();
    MemoryBank::from_entries(32, entries).unwrap()
}

proptest! {
    // with mu * delta >= eta_adj, raising c_z raises c' at least as fast as the
    // dispersion term can raise the threshold
    #[test]
    fn acceptance_monotone_in_score(
        confs in proptest::collection::vec(0.0..=1.0f64, 0..6),
        lo in 0.0..=1.0f64,
        bump in 0.0..=1.0f64,
        tau in 0.0..0.9f64,
    ) {
        let scene = synth_scene(7, (64, 64), 1, &SynthParams::default()).unwrap();
        let cfg = CalibConfig { delta: 0.8, mu: 0.7, eta_adj: 0.5, ..CalibConfig::default() };
        let bank = bank_with(&confs);
        let gt = &scene.gts[0];
        let hi = (lo + bump).min(1.0);
        let run = |s: f64| {
            let d = gt.with_score(s).unwrap();
            calibrate(&[d], &featmap(), &scene.image, &bank, tau, &cfg, 1).unwrap().accepted.len()
        };
        prop_assert!(run(hi) >= run(lo));
    }
}
