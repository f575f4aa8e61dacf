//! Confidence-driven quadrant mixing and combined-label construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{BBox, Detection};
use crate::ops::logistic;
use crate::tensor::Tensor;

/// Smallest cropped box area kept by [`merge_labels`].
pub const MIN_BOX_AREA: f64 = 1.0;

/// Quadrant index (row-major TL, TR, BL, BR) containing `(x, y)` when the
/// image is split at `(split_x, split_y)`.
fn quadrant_of(x: f64, y: f64, split_x: f64, split_y: f64) -> usize {
    usize::from(x >= split_x) + 2 * usize::from(y >= split_y)
}

fn check_size(w: usize, h: usize) -> Result<()> {
    if w < 2 || h < 2 {
        return Err(Error::invalid(format!("image must be at least 2x2, got {w}x{h}")));
    }
    Ok(())
}

/// Mean detection score per quadrant, assigning each box by its center.
/// Empty quadrants score 0.
pub fn quadrant_confidences(dets: &[Detection], image_size: (usize, usize)) -> Result<[f64; 4]> {
    let (w, h) = image_size;
    check_size(w, h)?;
    let (sx, sy) = ((w / 2) as f64, (h / 2) as f64);
    let mut sums = [0.0; 4];
    let mut counts = [0usize; 4];
    for d in dets {
        let (cx, cy) = d.bbox.center();
        let q = quadrant_of(cx, cy, sx, sy);
        sums[q] += d.score();
        counts[q] += 1;
    }
    let mut out = [0.0; 4];
    for q in 0..4 {
        if counts[q] > 0 {
            out[q] = sums[q] / counts[q] as f64;
        }
    }
    Ok(out)
}

/// Selected target quadrant and its pixel indicator.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    region_id: usize,
    rows: (usize, usize),
    cols: (usize, usize),
    mask: Tensor,
}

impl RegionMask {
    pub fn new(region_id: usize, image_size: (usize, usize)) -> Result<Self> {
        let (w, h) = image_size;
        check_size(w, h)?;
        if region_id > 3 {
            return Err(Error::invalid(format!("region id must be 0..=3, got {region_id}")));
        }
        let (sx, sy) = (w / 2, h / 2);
        let cols = if region_id.is_multiple_of(2) { (0, sx) } else { (sx, w) };
        let rows = if region_id < 2 { (0, sy) } else { (sy, h) };
        let mask = Tensor::from_fn2(h, w, |r, c| {
            f64::from(u8::from((rows.0..rows.1).contains(&r) && (cols.0..cols.1).contains(&c)))
        })?;
        Ok(Self {
            region_id,
            rows,
            cols,
            mask,
        })
    }

    pub fn region_id(&self) -> usize {
        self.region_id
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    /// `(W, H)` of the image this mask was built for.
    pub fn image_size(&self) -> (usize, usize) {
        let (h, w) = self.mask.shape2().expect("mask is rank 2");
        (w, h)
    }

    /// Region rectangle in pixel coordinates.
    pub fn rect(&self) -> BBox {
        BBox::new(self.cols.0 as f64, self.rows.0 as f64, self.cols.1 as f64, self.rows.1 as f64)
            .expect("quadrants are non-empty")
    }

    fn contains_pixel(&self, r: usize, c: usize) -> bool {
        (self.rows.0..self.rows.1).contains(&r) && (self.cols.0..self.cols.1).contains(&c)
    }
}

/// Highest-scoring quadrant, lowest index on ties.
pub fn select_region(scores: &[f64; 4], image_size: (usize, usize)) -> Result<RegionMask> {
    let mut best = 0;
    for q in 1..4 {
        if scores[q] > scores[best] {
            best = q;
        }
    }
    RegionMask::new(best, image_size)
}

/// Pastes the selected target region into the source image. Accepts
/// `[H, W]` or `[C, H, W]` tensors; every pixel is copied from exactly one
/// input.
pub fn mix_images(x_s: &Tensor, x_t: &Tensor, rm: &RegionMask) -> Result<Tensor> {
    x_s.same_dims(x_t, "mixed images")?;
    let (w, h) = rm.image_size();
    let plane = match x_s.rank() {
        2 | 3 if x_s.dims()[x_s.rank() - 2..] == [h, w] => h * w,
        _ => {
            return Err(Error::shape(format!(
                "images {:?} do not match a {h}x{w} region mask",
                x_s.dims()
            )))
        }
    };
    let data = x_s
        .data()
        .iter()
        .zip(x_t.data())
        .enumerate()
        .map(|(i, (&s, &t))| {
            let p = i % plane;
            if rm.contains_pixel(p / w, p % w) {
                t
            } else {
                s
            }
        })
        .collect();
    Tensor::new(x_s.dims().to_vec(), data)
}

fn keep(b: BBox) -> Option<BBox> {
    (b.area() >= MIN_BOX_AREA).then_some(b)
}

/// Crops a source box away from the region: the largest of the four
/// half-plane pieces lying outside the region rectangle.
fn crop_outside(b: &BBox, region: &BBox) -> Option<BBox> {
    if b.intersection_area(region) == 0.0 {
        return Some(*b);
    }
    let pieces = [
        BBox::new(b.x1(), b.y1(), b.x2().min(region.x1()), b.y2()),
        BBox::new(b.x1().max(region.x2()), b.y1(), b.x2(), b.y2()),
        BBox::new(b.x1(), b.y1(), b.x2(), b.y2().min(region.y1())),
        BBox::new(b.x1(), b.y1().max(region.y2()), b.x2(), b.y2()),
    ];
    let mut best: Option<BBox> = None;
    for p in pieces.into_iter().flatten() {
        if best.is_none_or(|q| p.area() > q.area()) {
            best = Some(p);
        }
    }
    best
}

/// Combined labels for a mixed image: target pseudo-labels clipped to the
/// region and source predictions clipped away from it. Boxes whose cropped
/// area falls below [`MIN_BOX_AREA`] are dropped.
pub fn merge_labels(target_pls: &[Detection], source_preds: &[Detection], rm: &RegionMask) -> Vec<Detection> {
    let region = rm.rect();
    let from_target = target_pls
        .iter()
        .filter_map(|d| d.bbox.clip_to(&region).and_then(keep).map(|b| d.with_box(b)));
    let from_source = source_preds
        .iter()
        .filter_map(|d| crop_outside(&d.bbox, &region).and_then(keep).map(|b| d.with_box(b)));
    from_target.chain(from_source).collect()
}

/// Mean soft-threshold weight `logistic(kappa * (c - c_th))`; 0 for no input.
pub fn dynamic_alpha(confs: &[f64], c_th: f64, kappa: f64) -> f64 {
    if confs.is_empty() {
        return 0.0;
    }
    confs.iter().map(|c| logistic(kappa * (c - c_th))).sum::<f64>() / confs.len() as f64
}

pub fn total_loss(l_det: f64, l_cons: f64, alpha: f64) -> f64 {
    l_det + alpha * l_cons
}

/// One line of the mixed-sample manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixRecord {
    pub source_image: String,
    pub target_image: String,
    pub region_id: usize,
    pub alpha: f64,
    pub merged_labels: Vec<Detection>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det_at(cx: f64, cy: f64, score: f64) -> Detection {
        Detection::new("t", bx(cx - 1.0, cy - 1.0, cx + 1.0, cy + 1.0), score, 0).unwrap()
    }

    #[test]
    fn quadrant_confidence_examples() {
        let size = (100, 80);
        let q = quadrant_confidences(&[det_at(10.0, 10.0, 0.7)], size).unwrap();
        assert_eq!(q, [0.7, 0.0, 0.0, 0.0]);
        let dets = [
            det_at(10.0, 10.0, 0.1),
            det_at(60.0, 10.0, 0.2),
            det_at(10.0, 60.0, 0.3),
            det_at(60.0, 60.0, 0.4),
        ];
        assert_eq!(quadrant_confidences(&dets, size).unwrap(), [0.1, 0.2, 0.3, 0.4]);
        let q = quadrant_confidences(&[det_at(5.0, 5.0, 0.2), det_at(20.0, 30.0, 0.6)], size).unwrap();
        assert!((q[0] - 0.4).abs() < 1e-15);
        // centers on the split line go to the lower/right quadrant
        let q = quadrant_confidences(&[det_at(50.0, 40.0, 0.5)], size).unwrap();
        assert_eq!(q, [0.0, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn select_region_examples() {
        let size = (8, 8);
        assert_eq!(select_region(&[0.0, 0.0, 0.0, 1.0], size).unwrap().region_id(), 3);
        assert_eq!(select_region(&[0.2; 4], size).unwrap().region_id(), 0);
        assert_eq!(select_region(&[0.3, 0.5, 0.5, 0.1], size).unwrap().region_id(), 1);
    }

    #[test]
    fn mask_counts_follow_split() {
        let (w, h) = (7, 5);
        let expect = [3 * 2, 4 * 2, 3 * 3, 4 * 3];
        for (id, n) in expect.into_iter().enumerate() {
            let rm = RegionMask::new(id, (w, h)).unwrap();
            assert_eq!(rm.mask().data().iter().sum::<f64>(), n as f64);
        }
        assert!(RegionMask::new(4, (w, h)).is_err());
    }

    #[test]
    fn mix_examples() {
        let xs = Tensor::from_fn2(4, 6, |r, c| (r * 6 + c) as f64).unwrap();
        let xt = xs.map(|v| -v - 0.5).unwrap();
        let rm = RegionMask::new(0, (6, 4)).unwrap();
        let m = mix_images(&xs, &xt, &rm).unwrap();
        for r in 0..4 {
            for c in 0..6 {
                let want = if r < 2 && c < 3 { xt.at2(r, c) } else { xs.at2(r, c) };
                assert_eq!(m.at2(r, c).to_bits(), want.to_bits());
            }
        }
        let bad = Tensor::zeros(&[4, 5]).unwrap();
        assert!(mix_images(&bad, &bad, &rm).is_err());
        assert!(mix_images(&xs, &bad, &rm).is_err());
    }

    #[test]
    fn mix_multichannel() {
        let xs = Tensor::new(vec![2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        let xt = Tensor::new(vec![2, 2, 2], (10..18).map(f64::from).collect()).unwrap();
        let rm = RegionMask::new(3, (2, 2)).unwrap();
        let m = mix_images(&xs, &xt, &rm).unwrap();
        assert_eq!(m.data(), &[0.0, 1.0, 2.0, 13.0, 4.0, 5.0, 6.0, 17.0]);
    }

    #[test]
    fn merge_examples() {
        let rm = RegionMask::new(0, (512, 512)).unwrap();
        let t_in = Detection::new("t", bx(10.0, 10.0, 50.0, 50.0), 0.8, 0).unwrap();
        let s_out = Detection::new("s", bx(300.0, 300.0, 350.0, 340.0), 0.6, 0).unwrap();
        let merged = merge_labels(std::slice::from_ref(&t_in), std::slice::from_ref(&s_out), &rm);
        assert_eq!(merged, vec![t_in, s_out]);

        let t_far = Detection::new("t", bx(300.0, 10.0, 320.0, 30.0), 0.8, 0).unwrap();
        assert!(merge_labels(&[t_far], &[], &rm).is_empty());

        let t_straddle = Detection::new("t", bx(250.0, 10.0, 270.0, 30.0), 0.8, 0).unwrap();
        let merged = merge_labels(&[t_straddle], &[], &rm);
        assert_eq!(merged[0].bbox, bx(250.0, 10.0, 256.0, 30.0));

        let s_straddle = Detection::new("s", bx(250.0, 10.0, 270.0, 30.0), 0.8, 0).unwrap();
        let merged = merge_labels(&[], &[s_straddle], &rm);
        assert_eq!(merged[0].bbox, bx(256.0, 10.0, 270.0, 30.0));

        let sliver = Detection::new("t", bx(255.5, 10.0, 258.0, 10.5), 0.8, 0).unwrap();
        assert!(merge_labels(&[sliver], &[], &rm).is_empty());
    }

    #[test]
    fn alpha_and_loss_examples() {
        assert_eq!(dynamic_alpha(&[0.5, 0.5], 0.5, 10.0), 0.5);
        assert!((dynamic_alpha(&[0.6], 0.5, 10.0) - 0.73105857863).abs() < 1e-9);
        assert_eq!(dynamic_alpha(&[], 0.5, 10.0), 0.0);
        assert_eq!(total_loss(1.5, 3.0, 0.0), 1.5);
        assert_eq!(total_loss(1.0, 2.0, 0.5), 2.0);
    }

    #[test]
    fn alpha_approaches_step_fraction() {
        let confs = [0.1, 0.5, 0.7, 0.9];
        assert!((dynamic_alpha(&confs, 0.5, 1e6) - 2.5 / 4.0).abs() < 1e-12);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..60.0f64, 0.0..60.0f64, 0.5..30.0f64, 0.5..30.0f64)
            .prop_map(|(x, y, w, h)| bx(x, y, (x + w).min(64.0), (y + h).min(64.0)))
    }

    proptest! {
        #[test]
        fn merged_labels_respect_region(
            id in 0usize..4,
            targets in proptest::collection::vec(arb_box(), 0..8),
            sources in proptest::collection::vec(arb_box(), 0..8),
        ) {
            let rm = RegionMask::new(id, (64, 64)).unwrap();
            let region = rm.rect();
            let wrap = |tag: &str, bs: &[BBox]| -> Vec<Detection> {
                bs.iter().map(|b| Detection::new(tag, *b, 0.5, 0).unwrap()).collect()
            };
            let t = wrap("t", &targets);
            let merged = merge_labels(&t, &wrap("s", &sources), &rm);
            for d in &merged {
                prop_assert!(d.bbox.area() >= MIN_BOX_AREA);
                if d.image_id == "t" {
                    prop_assert!(d.bbox.x1() >= region.x1() && d.bbox.x2() <= region.x2());
                    prop_assert!(d.bbox.y1() >= region.y1() && d.bbox.y2() <= region.y2());
                } else {
                    prop_assert_eq!(d.bbox.intersection_area(&region), 0.0);
                }
            }
        }

        #[test]
        fn alpha_monotone_and_bounded(
            confs in proptest::collection::vec(0.0..=1.0f64, 1..10),
            i in 0usize..10,
            bump in 0.0..1.0f64,
        ) {
            let a = dynamic_alpha(&confs, 0.5, 10.0);
            prop_assert!((0.0..=1.0).contains(&a));
            let mut up = confs.clone();
            let i = i % up.len();
            up[i] = (up[i] + bump).min(1.0);
            prop_assert!(dynamic_alpha(&up, 0.5, 10.0) >= a);
        }

        #[test]
        fn select_region_affine_invariant(
            s in proptest::array::uniform4(0.0..1.0f64),
            a in 0.1..10.0f64,
            b in -5.0..5.0f64,
        ) {
            let t = s.map(|v| a * v + b);
            let id = select_region(&s, (8, 8)).unwrap().region_id();
            // exact ties can be broken by rounding; skip near-ties
            let mut sorted = s;
            sorted.sort_by(f64::total_cmp);
            prop_assume!(sorted[3] - sorted[2] > 1e-9);
            prop_assert_eq!(id, select_region(&t, (8, 8)).unwrap().region_id());
        }
    }
}
