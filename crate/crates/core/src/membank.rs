//! Feature-confidence memory bank and geometry-aware pseudo-label calibration.
//!
//! A candidate's confidence is blended with the confidences of its nearest
//! memory-bank neighbors, then with a structure-tensor score that rewards
//! elongated linear patterns under the box. The candidate survives when the
//! refined confidence clears a global EMA threshold raised by the local
//! disagreement among its neighbors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{check_unit, iou, BBox, Detection};
use crate::ops::{logistic, softmax_weights};
use crate::simfilter::extract_embedding;
use crate::tensor::Tensor;

/// IoU above which a new record replaces a stored one from the same image.
pub const REPLACE_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemEntry {
    pub feature: Vec<f64>,
    confidence: f64,
    pub bbox: BBox,
    pub image_id: String,
    pub epoch: u32,
}

impl MemEntry {
    pub fn new(feature: Vec<f64>, confidence: f64, bbox: BBox, image_id: impl Into<String>, epoch: u32) -> Result<Self> {
        check_unit(confidence, "confidence")?;
        if feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("memory features must be finite"));
        }
        Ok(Self {
            feature,
            confidence,
            bbox,
            image_id: image_id.into(),
            epoch,
        })
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }
}

/// Bounded store of past instances. Entries are kept in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    entries: Vec<MemEntry>,
    capacity: usize,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("bank capacity must be positive"));
        }
        Ok(Self {
            entries: Vec::new(),
            capacity,
        })
    }

    /// Bank holding `entries` (in order), evicting down to `capacity`.
    pub fn from_entries(capacity: usize, entries: Vec<MemEntry>) -> Result<Self> {
        let mut bank = Self::new(capacity)?;
        bank.update(entries)?;
        Ok(bank)
    }

    pub fn entries(&self) -> &[MemEntry] {
        &self.entries
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.entries.first().map(|e| e.feature.len())
    }

    /// Merges new records. A record whose best same-image IoU exceeds
    /// [`REPLACE_IOU`] supersedes every stored same-image record above that
    /// overlap; otherwise it is inserted. Over capacity, the oldest epoch
    /// is evicted first, earliest-inserted first within an epoch.
    pub fn update(&mut self, new: Vec<MemEntry>) -> Result<()> {
        let mut dim = self.feature_dim();
        for e in &new {
            match dim {
                Some(d) if d != e.feature.len() => {
                    return Err(Error::shape(format!(
                        "bank features have dim {d}, new entry has {}",
                        e.feature.len()
                    )))
                }
                None => dim = Some(e.feature.len()),
                _ => {}
            }
        }
        for entry in new {
            self.entries
                .retain(|old| old.image_id != entry.image_id || iou(&old.bbox, &entry.bbox) <= REPLACE_IOU);
            self.entries.push(entry);
        }
        while self.entries.len() > self.capacity {
            let oldest = self.entries.iter().map(|e| e.epoch).min().expect("non-empty");
            let pos = self.entries.iter().position(|e| e.epoch == oldest).expect("present");
            self.entries.remove(pos);
        }
        Ok(())
    }

    /// Functional form of [`MemoryBank::update`].
    pub fn updated(&self, new: Vec<MemEntry>) -> Result<Self> {
        let mut next = self.clone();
        next.update(new)?;
        Ok(next)
    }
}

/// Exponential parameter averaging `m * theta_prime + (1 - m) * theta`.
pub fn momentum_update(theta_prime: &[f64], theta: &[f64], m: f64) -> Result<Vec<f64>> {
    if theta_prime.len() != theta.len() {
        return Err(Error::shape(format!("dims {} vs {}", theta_prime.len(), theta.len())));
    }
    if !(0.0..1.0).contains(&m) {
        return Err(Error::invalid(format!("momentum must lie in [0, 1), got {m}")));
    }
    Ok(theta_prime.iter().zip(theta).map(|(p, t)| m * p + (1.0 - m) * t).collect())
}

/// Keeps detections with `score >= tau_k`.
pub fn prescreen(dets: &[Detection], tau_k: f64) -> Vec<Detection> {
    dets.iter().filter(|d| d.score() >= tau_k).cloned().collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Top-`k` bank entries by cosine similarity to `f_z` (ties by entry index)
/// and their temperature-softmax voting weights.
pub fn knn_weights(f_z: &[f64], bank: &MemoryBank, k: usize, gamma: f64) -> Result<(Vec<usize>, Vec<f64>)> {
    if bank.is_empty() {
        return Err(Error::invalid("neighbor search in an empty bank"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if let Some(d) = bank.feature_dim() {
        if d != f_z.len() {
            return Err(Error::shape(format!("query dim {} vs bank dim {d}", f_z.len())));
        }
    }
    let sims: Vec<f64> = bank.entries.iter().map(|e| cosine(f_z, &e.feature)).collect();
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order.truncate(k.min(sims.len()));
    let top: Vec<f64> = order.iter().map(|&i| sims[i]).collect();
    let weights = softmax_weights(&top, gamma)?;
    Ok((order, weights))
}

/// Weighted neighbor confidence `sum w_j c_j`.
pub fn neighbor_conf(weights: &[f64], confs: &[f64]) -> Result<f64> {
    if weights.len() != confs.len() {
        return Err(Error::shape(format!("{} weights vs {} confidences", weights.len(), confs.len())));
    }
    Ok(weights.iter().zip(confs).map(|(w, c)| w * c).sum())
}

/// `delta * c_z + (1 - delta) * c_neighbor`.
pub fn fuse_conf(c_z: f64, c_neighbor: f64, delta: f64) -> Result<f64> {
    check_unit(delta, "delta")?;
    Ok(delta * c_z + (1.0 - delta) * c_neighbor)
}

/// Symmetric 2x2 structure tensor `[[xx, xy], [xy, yy]]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StructureTensor {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl StructureTensor {
    /// Eigenvalues `(l1, l2)` with `l1 >= l2`.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let half_tr = 0.5 * (self.xx + self.yy);
        let disc = (0.25 * (self.xx - self.yy).powi(2) + self.xy * self.xy).sqrt();
        (half_tr + disc, half_tr - disc)
    }
}

/// Image gradients: central differences inside, one-sided at the borders.
fn gradients(patch: &Tensor) -> Result<(Vec<f64>, Vec<f64>, usize, usize)> {
    let (h, w) = patch.shape2()?;
    if h < 2 || w < 2 {
        return Err(Error::shape(format!("gradients need at least 2x2, got {h}x{w}")));
    }
    let diff = |lo: f64, hi: f64, span: usize| (hi - lo) / span as f64;
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (c0, c1) = (c.saturating_sub(1), (c + 1).min(w - 1));
            let (r0, r1) = (r.saturating_sub(1), (r + 1).min(h - 1));
            gx[r * w + c] = diff(patch.at2(r, c0), patch.at2(r, c1), c1 - c0);
            gy[r * w + c] = diff(patch.at2(r0, c), patch.at2(r1, c), r1 - r0);
        }
    }
    Ok((gx, gy, h, w))
}

fn window_tensor(gx: &[f64], gy: &[f64], w: usize, r0: usize, c0: usize, wh: usize, ww: usize) -> StructureTensor {
    let mut j = StructureTensor::default();
    for r in r0..r0 + wh {
        for c in c0..c0 + ww {
            let (x, y) = (gx[r * w + c], gy[r * w + c]);
            j.xx += x * x;
            j.xy += x * y;
            j.yy += y * y;
        }
    }
    j
}

/// Structure tensor summed over the whole patch.
pub fn structure_tensor(patch: &Tensor) -> Result<StructureTensor> {
    let (h, w) = patch.shape2()?;
    if h < 3 || w < 3 {
        return Err(Error::shape(format!("structure tensor needs at least 3x3, got {h}x{w}")));
    }
    let (gx, gy, h, w) = gradients(patch)?;
    Ok(window_tensor(&gx, &gy, w, 0, 0, h, w))
}

/// `(l1 - l2) / (l1 + l2)`, 0 for a vanishing tensor.
pub fn anisotropy(j: &StructureTensor) -> f64 {
    let (l1, l2) = j.eigenvalues();
    let l2 = l2.max(0.0);
    if l1 + l2 < 1e-12 {
        return 0.0;
    }
    ((l1 - l2) / (l1 + l2)).clamp(0.0, 1.0)
}

/// Which vesselness expression to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VesselnessForm {
    /// `(1 - exp(-R_B^2 / 2 beta^2)) * exp(-S^2 / 2 c^2)`.
    #[default]
    Verbatim,
    /// Conventional Frangi `exp(-R_B^2 / 2 beta^2) * (1 - exp(-S^2 / 2 c^2))`.
    Frangi,
}

/// Eigenvalue-ratio vesselness with `R_B = |l2| / |l1|` and
/// `S = sqrt(l1^2 + l2^2)`; 0 when `l1 < 1e-12`.
pub fn vesselness(j: &StructureTensor, beta: f64, c_v: f64, form: VesselnessForm) -> Result<f64> {
    if !(beta > 0.0) || !(c_v > 0.0) {
        return Err(Error::invalid(format!("beta and c must be positive, got {beta}, {c_v}")));
    }
    let (l1, l2) = j.eigenvalues();
    if l1 < 1e-12 {
        return Ok(0.0);
    }
    let rb = l2.abs() / l1.abs();
    let s2 = l1 * l1 + l2 * l2;
    let blob = (-rb * rb / (2.0 * beta * beta)).exp();
    let structure = (-s2 / (2.0 * c_v * c_v)).exp();
    Ok(match form {
        VesselnessForm::Verbatim => (1.0 - blob) * structure,
        VesselnessForm::Frangi => blob * (1.0 - structure),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryParams {
    pub window: usize,
    pub gamma1: f64,
    pub gamma2: f64,
    pub beta: f64,
    /// Structureness scale; `None` uses half the largest `S` over the windows.
    pub c_v: Option<f64>,
    pub form: VesselnessForm,
}

impl Default for GeometryParams {
    fn default() -> Self {
        Self {
            window: 5,
            gamma1: 0.5,
            gamma2: 0.5,
            beta: 0.5,
            c_v: None,
            form: VesselnessForm::Verbatim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryScore {
    pub mean_anisotropy: f64,
    pub mean_vesselness: f64,
    pub c_g: f64,
}

/// Window-averaged anisotropy and vesselness over every `window x window`
/// placement (stride 1) in `patch`, combined as `gamma1 * C + gamma2 * V`.
/// Gradients are taken once over the full patch.
pub fn geometry_factor(patch: &Tensor, p: &GeometryParams) -> Result<GeometryScore> {
    let (h, w) = patch.shape2()?;
    if p.window < 3 || p.window.is_multiple_of(2) {
        return Err(Error::invalid(format!("window must be odd and >= 3, got {}", p.window)));
    }
    if h < p.window || w < p.window {
        return Err(Error::shape(format!("patch {h}x{w} smaller than window {}", p.window)));
    }
    let (gx, gy, _, _) = gradients(patch)?;
    let mut tensors = Vec::with_capacity((h - p.window + 1) * (w - p.window + 1));
    for r in 0..=h - p.window {
        for c in 0..=w - p.window {
            tensors.push(window_tensor(&gx, &gy, w, r, c, p.window, p.window));
        }
    }
    let n = tensors.len() as f64;
    let mean_anisotropy = tensors.iter().map(anisotropy).sum::<f64>() / n;
    let max_s = tensors
        .iter()
        .map(|j| {
            let (l1, l2) = j.eigenvalues();
            (l1 * l1 + l2 * l2).sqrt()
        })
        .fold(0.0, f64::max);
    let c_v = p.c_v.unwrap_or(0.5 * max_s);
    let mean_vesselness = if c_v > 0.0 {
        let mut acc = 0.0;
        for j in &tensors {
            acc += vesselness(j, p.beta, c_v, p.form)?;
        }
        acc / n
    } else {
        0.0
    };
    Ok(GeometryScore {
        mean_anisotropy,
        mean_vesselness,
        c_g: p.gamma1 * mean_anisotropy + p.gamma2 * mean_vesselness,
    })
}

/// `mu * c_f + (1 - mu) * logistic(c_g)`.
pub fn refined_conf(c_f: f64, c_g: f64, mu: f64) -> Result<f64> {
    check_unit(mu, "mu")?;
    check_unit(c_f, "fused confidence")?;
    Ok(mu * c_f + (1.0 - mu) * logistic(c_g))
}

/// EMA threshold update from per-batch maximum scores. An empty batch list
/// leaves the threshold unchanged.
pub fn global_threshold(tau_prev: f64, batch_max_scores: &[f64], lambda: f64) -> Result<f64> {
    check_unit(lambda, "lambda")?;
    if batch_max_scores.is_empty() {
        return Ok(tau_prev);
    }
    let mean = batch_max_scores.iter().sum::<f64>() / batch_max_scores.len() as f64;
    Ok(lambda * tau_prev + (1.0 - lambda) * mean)
}

/// Mean absolute confidence gap to the neighbors; 0 without neighbors.
pub fn dispersion(c_i: f64, neighbor_confs: &[f64]) -> f64 {
    if neighbor_confs.is_empty() {
        return 0.0;
    }
    neighbor_confs.iter().map(|c| (c_i - c).abs()).sum::<f64>() / neighbor_confs.len() as f64
}

/// `tau_k + eta_adj * delta_i`, clamped to `[0, 1]`.
pub fn instance_threshold(tau_k: f64, delta_i: f64, eta_adj: f64) -> f64 {
    (tau_k + eta_adj * delta_i).clamp(0.0, 1.0)
}

/// Calibration hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibConfig {
    pub k: usize,
    pub gamma: f64,
    pub delta: f64,
    pub mu: f64,
    pub lambda: f64,
    pub tau0: f64,
    pub eta_adj: f64,
    pub momentum: f64,
    pub capacity: usize,
    pub geometry: GeometryParams,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            k: 5,
            gamma: 10.0,
            delta: 0.7,
            mu: 0.7,
            lambda: 0.9,
            tau0: 0.05,
            eta_adj: 0.5,
            momentum: 0.999,
            capacity: 2048,
            geometry: GeometryParams::default(),
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if self.capacity == 0 {
            return Err(Error::invalid("capacity must be positive"));
        }
        check_unit(self.delta, "delta")?;
        check_unit(self.mu, "mu")?;
        check_unit(self.lambda, "lambda")?;
        check_unit(self.tau0, "tau0")?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if !(self.eta_adj >= 0.0) {
            return Err(Error::invalid("eta_adj must be non-negative"));
        }
        if !self.gamma.is_finite() {
            return Err(Error::invalid("gamma must be finite"));
        }
        let g = &self.geometry;
        if g.window < 3 || g.window.is_multiple_of(2) {
            return Err(Error::invalid("geometry window must be odd and >= 3"));
        }
        if !(g.beta > 0.0) || g.c_v.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::invalid("vesselness beta and c must be positive"));
        }
        Ok(())
    }
}

/// Per-detection intermediate values of one calibration pass.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibTrace {
    pub c_z: f64,
    pub c_neighbor: Option<f64>,
    pub c_f: f64,
    pub c_g: f64,
    pub refined: f64,
    pub dispersion: f64,
    pub threshold: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct CalibOutcome {
    pub accepted: Vec<Detection>,
    pub rejected_count: usize,
    pub bank: MemoryBank,
    pub traces: Vec<CalibTrace>,
}

/// Image rows/cols under `bbox`, grown around the box center to at least
/// `min_side` pixels per side and clipped to the image.
fn patch_under_box(image: &Tensor, bbox: &BBox, min_side: usize) -> Result<Tensor> {
    let (h, w) = image.shape2()?;
    if h < min_side || w < min_side {
        return Err(Error::shape(format!("image {h}x{w} smaller than window {min_side}")));
    }
    let span = |lo: f64, hi: f64, size: usize| {
        let mut a = lo.floor().max(0.0) as usize;
        let mut b = (hi.ceil().max(0.0) as usize).min(size);
        a = a.min(size.saturating_sub(1));
        if b <= a {
            b = a + 1;
        }
        if b - a < min_side {
            let center = (a + b) / 2;
            a = center.saturating_sub(min_side / 2);
            b = a + min_side;
            if b > size {
                b = size;
                a = size - min_side;
            }
        }
        (a, b)
    };
    let (r0, r1) = span(bbox.y1(), bbox.y2(), h);
    let (c0, c1) = span(bbox.x1(), bbox.x2(), w);
    image.crop2(r0, r1, c0, c1)
}

/// Calibrates one image's candidate detections against a snapshot of the
/// bank. `image` is `[H, W]` or `[C, H, W]` (channels averaged for the
/// geometry term); `featmap` is `[C, Hf, Wf]`. Accepted detections carry the
/// refined confidence, and the returned bank has them merged in at `epoch`.
pub fn calibrate(
    dets: &[Detection],
    featmap: &Tensor,
    image: &Tensor,
    bank: &MemoryBank,
    tau_k: f64,
    cfg: &CalibConfig,
    epoch: u32,
) -> Result<CalibOutcome> {
    cfg.validate()?;
    let plane = image.to_plane()?;
    let (h, w) = plane.shape2()?;
    let mut accepted = Vec::new();
    let mut traces = Vec::with_capacity(dets.len());
    let mut fresh = Vec::new();
    for det in dets {
        let c_z = det.score();
        let feature = extract_embedding(featmap, &det.bbox, (w, h))?;
        let (c_neighbor, c_f, disp) = if bank.is_empty() {
            (None, c_z, 0.0)
        } else {
            let (idx, weights) = knn_weights(&feature, bank, cfg.k, cfg.gamma)?;
            let confs: Vec<f64> = idx.iter().map(|&i| bank.entries[i].confidence).collect();
            let nb = neighbor_conf(&weights, &confs)?;
            (Some(nb), fuse_conf(c_z, nb, cfg.delta)?, dispersion(c_z, &confs))
        };
        let patch = patch_under_box(&plane, &det.bbox, cfg.geometry.window)?;
        let c_g = geometry_factor(&patch, &cfg.geometry)?.c_g;
        let refined = refined_conf(c_f.clamp(0.0, 1.0), c_g, cfg.mu)?;
        let threshold = instance_threshold(tau_k, disp, cfg.eta_adj);
        let ok = refined >= threshold;
        traces.push(CalibTrace {
            c_z,
            c_neighbor,
            c_f,
            c_g,
            refined,
            dispersion: disp,
            threshold,
            accepted: ok,
        });
        if ok {
            let out = det.with_score(refined.clamp(0.0, 1.0))?;
            fresh.push(MemEntry::new(feature, out.score(), out.bbox, out.image_id.clone(), epoch)?);
            accepted.push(out);
        }
    }
    let rejected_count = dets.len() - accepted.len();
    let bank = bank.updated(fresh)?;
    Ok(CalibOutcome {
        accepted,
        rejected_count,
        bank,
        traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn entry(img: &str, b: BBox, conf: f64, epoch: u32) -> MemEntry {
        MemEntry::new(vec![1.0, 0.0], conf, b, img, epoch).unwrap()
    }

    fn det(score: f64) -> Detection {
        Detection::new("i", bx(0.0, 0.0, 1.0, 1.0), score, 0).unwrap()
    }

    #[test]
    fn momentum_examples() {
        assert_eq!(momentum_update(&[5.0, 6.0], &[1.0, 2.0], 0.0).unwrap(), vec![1.0, 2.0]);
        assert_eq!(momentum_update(&[3.0], &[3.0], 0.999).unwrap(), vec![3.0]);
        let v = momentum_update(&[0.0], &[1.0], 0.9).unwrap()[0];
        assert!((v - 0.1).abs() < 1e-15);
        assert!(momentum_update(&[0.0], &[1.0, 2.0], 0.5).is_err());
        assert!(momentum_update(&[0.0], &[1.0], 1.0).is_err());
    }

    #[test]
    fn prescreen_examples() {
        let d = [det(0.2), det(0.5), det(0.9)];
        assert_eq!(prescreen(&d, 0.5).len(), 2);
        assert_eq!(prescreen(&d[1..2], 0.5).len(), 1);
        assert!(prescreen(&d, 0.95).is_empty());
    }

    #[test]
    fn bank_update_examples() {
        let mut bank = MemoryBank::new(4).unwrap();
        bank.update(vec![entry("a", bx(0.0, 0.0, 2.0, 2.0), 0.6, 0)]).unwrap();
        assert_eq!(bank.len(), 1);

        bank.update(vec![entry("a", bx(0.0, 0.0, 2.0, 2.0), 0.9, 1)]).unwrap();
        assert_eq!(bank.len(), 1);
        assert_eq!(bank.entries()[0].confidence(), 0.9);

        // IoU 1/3 -> inserted
        bank.update(vec![entry("a", bx(1.0, 0.0, 3.0, 2.0), 0.4, 1)]).unwrap();
        assert_eq!(bank.len(), 2);

        // same box, other image -> inserted
        bank.update(vec![entry("b", bx(0.0, 0.0, 2.0, 2.0), 0.4, 1)]).unwrap();
        assert_eq!(bank.len(), 3);

        let wrong_dim = MemEntry::new(vec![1.0], 0.5, bx(5.0, 5.0, 6.0, 6.0), "a", 2).unwrap();
        assert!(bank.update(vec![wrong_dim]).is_err());
    }

    #[test]
    fn bank_replace_boundary_is_strict() {
        // [0,0,3,1] vs [1,0,4,1]: inter 2, union 4 -> IoU exactly 0.5
        let mut bank = MemoryBank::new(8).unwrap();
        bank.update(vec![entry("a", bx(0.0, 0.0, 3.0, 1.0), 0.5, 0)]).unwrap();
        bank.update(vec![entry("a", bx(1.0, 0.0, 4.0, 1.0), 0.5, 0)]).unwrap();
        assert_eq!(bank.len(), 2);
    }

    #[test]
    fn bank_evicts_oldest_epoch_fifo() {
        let mut bank = MemoryBank::new(2).unwrap();
        bank.update(vec![
            entry("a", bx(0.0, 0.0, 1.0, 1.0), 0.5, 3),
            entry("a", bx(10.0, 0.0, 11.0, 1.0), 0.5, 1),
            entry("a", bx(20.0, 0.0, 21.0, 1.0), 0.5, 1),
        ])
        .unwrap();
        let xs: Vec<f64> = bank.entries().iter().map(|e| e.bbox.x1()).collect();
        assert_eq!(xs, vec![0.0, 20.0]);
    }

    #[test]
    fn knn_examples() {
        let bank = MemoryBank::from_entries(
            10,
            vec![
                MemEntry::new(vec![1.0, 0.0], 0.9, bx(0.0, 0.0, 1.0, 1.0), "a", 0).unwrap(),
                MemEntry::new(vec![0.0, 1.0], 0.1, bx(5.0, 0.0, 6.0, 1.0), "a", 0).unwrap(),
                MemEntry::new(vec![1.0, 1.0], 0.5, bx(9.0, 0.0, 10.0, 1.0), "a", 0).unwrap(),
            ],
        )
        .unwrap();
        let (idx, w) = knn_weights(&[2.0, 0.1], &bank, 1, 10.0).unwrap();
        assert_eq!((idx, w), (vec![0], vec![1.0]));

        // equal similarity to entries 0 and 1; ties by index
        let (idx, w) = knn_weights(&[1.0, 1.0], &bank, 3, 0.0).unwrap();
        assert_eq!(idx, vec![2, 0, 1]);
        assert_eq!(w, vec![1.0 / 3.0; 3]);
        let (_, w) = knn_weights(&[1.0, 1.0], &bank, 2, 5.0).unwrap();
        assert!((w[0] - w[1]).abs() > 0.0);
        let (idx, w) = knn_weights(&[0.0, 0.0], &bank, 2, 5.0).unwrap();
        assert_eq!((idx, w), (vec![0, 1], vec![0.5, 0.5]));
        assert!(knn_weights(&[1.0], &bank, 2, 1.0).is_err());
        assert!(knn_weights(&[1.0, 0.0], &MemoryBank::new(1).unwrap(), 2, 1.0).is_err());
    }

    #[test]
    fn neighbor_and_fuse_examples() {
        assert!((neighbor_conf(&[0.25; 4], &[0.1, 0.2, 0.3, 0.4]).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(neighbor_conf(&[1.0, 0.0], &[0.3, 0.9]).unwrap(), 0.3);
        assert!((neighbor_conf(&[0.75, 0.25], &[0.8, 0.4]).unwrap() - 0.7).abs() < 1e-15);
        assert!(neighbor_conf(&[1.0], &[0.3, 0.9]).is_err());

        assert_eq!(fuse_conf(0.6, 0.2, 1.0).unwrap(), 0.6);
        assert_eq!(fuse_conf(0.6, 0.2, 0.0).unwrap(), 0.2);
        assert_eq!(fuse_conf(0.6, 0.4, 0.5).unwrap(), 0.5);
        assert!(fuse_conf(0.6, 0.4, 1.5).is_err());
    }

    #[test]
    fn structure_tensor_examples() {
        let flat = Tensor::filled(&[5, 6], 3.0).unwrap();
        assert_eq!(structure_tensor(&flat).unwrap(), StructureTensor::default());
        let ramp = Tensor::from_fn2(4, 7, |_, c| c as f64).unwrap();
        let j = structure_tensor(&ramp).unwrap();
        assert_eq!(j, StructureTensor { xx: 28.0, xy: 0.0, yy: 0.0 });
        assert!(structure_tensor(&Tensor::filled(&[2, 5], 0.0).unwrap()).is_err());
    }

    #[test]
    fn anisotropy_and_vesselness_examples() {
        let diag = |a: f64, b: f64| StructureTensor { xx: a, xy: 0.0, yy: b };
        assert_eq!(anisotropy(&diag(2.0, 2.0)), 0.0);
        assert_eq!(anisotropy(&diag(4.0, 0.0)), 1.0);
        assert_eq!(anisotropy(&diag(3.0, 1.0)), 0.5);
        assert_eq!(anisotropy(&diag(0.0, 0.0)), 0.0);

        let v = VesselnessForm::Verbatim;
        assert_eq!(vesselness(&diag(0.0, 0.0), 0.5, 1.0, v).unwrap(), 0.0);
        assert_eq!(vesselness(&diag(1.0, 0.0), 0.5, 1.0, v).unwrap(), 0.0);
        let expect = (1.0 - (-2.0f64).exp()) * (-1.0f64).exp();
        assert!((vesselness(&diag(1.0, 1.0), 0.5, 1.0, v).unwrap() - expect).abs() < 1e-15);
        assert!(vesselness(&diag(1.0, 1.0), 0.0, 1.0, v).is_err());
        assert!(vesselness(&diag(1.0, 1.0), 0.5, -1.0, v).is_err());

        let f = vesselness(&diag(1.0, 0.0), 0.5, 1.0, VesselnessForm::Frangi).unwrap();
        assert!((f - (1.0 - (-0.5f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn geometry_factor_examples() {
        let p = GeometryParams::default();
        let flat = Tensor::filled(&[9, 9], 1.0).unwrap();
        let g = geometry_factor(&flat, &p).unwrap();
        assert_eq!((g.mean_anisotropy, g.mean_vesselness, g.c_g), (0.0, 0.0, 0.0));

        let ridge = Tensor::from_fn2(15, 15, |r, c| (-((r as f64 - c as f64).powi(2)) / 8.0).exp()).unwrap();
        let no_v = GeometryParams { gamma2: 0.0, ..p };
        let g = geometry_factor(&ridge, &no_v).unwrap();
        assert_eq!(g.c_g, 0.5 * g.mean_anisotropy);
        assert!(g.mean_anisotropy > 0.9);

        assert!(geometry_factor(&Tensor::filled(&[4, 9], 1.0).unwrap(), &p).is_err());
        let even = GeometryParams { window: 4, ..p };
        assert!(geometry_factor(&flat, &even).is_err());
    }

    #[test]
    fn quarter_turn_preserves_geometry() {
        let img = Tensor::from_fn2(10, 12, |r, c| ((r * 7 + c * 13) % 11) as f64 + 0.1 * (r * c) as f64).unwrap();
        let rot = Tensor::from_fn2(12, 10, |r, c| img.at2(c, 11 - r)).unwrap();
        let (a, b) = (structure_tensor(&img).unwrap(), structure_tensor(&rot).unwrap());
        assert!((anisotropy(&a) - anisotropy(&b)).abs() < 1e-12);
        let (va, vb) = (
            vesselness(&a, 0.5, 50.0, VesselnessForm::Verbatim).unwrap(),
            vesselness(&b, 0.5, 50.0, VesselnessForm::Verbatim).unwrap(),
        );
        assert!((va - vb).abs() < 1e-12);
    }

    #[test]
    fn refined_threshold_dispersion_examples() {
        assert_eq!(refined_conf(0.8, 3.0, 1.0).unwrap(), 0.8);
        assert_eq!(refined_conf(0.8, 0.0, 0.0).unwrap(), 0.5);
        assert!((refined_conf(0.8, 0.0, 0.5).unwrap() - 0.65).abs() < 1e-15);
        assert!(refined_conf(0.8, 0.0, 1.5).is_err());

        assert_eq!(global_threshold(0.3, &[0.9, 0.1], 1.0).unwrap(), 0.3);
        assert!((global_threshold(0.05, &[0.5, 0.5], 0.9).unwrap() - 0.095).abs() < 1e-15);
        assert_eq!(global_threshold(0.3, &[], 0.9).unwrap(), 0.3);

        assert_eq!(dispersion(0.4, &[0.4, 0.4]), 0.0);
        assert!((dispersion(0.5, &[0.3, 0.7]) - 0.2).abs() < 1e-15);
        assert_eq!(dispersion(0.5, &[0.7, 0.3]), dispersion(0.5, &[0.3, 0.7]));
        assert_eq!(dispersion(0.5, &[]), 0.0);

        assert_eq!(instance_threshold(0.4, 0.0, 0.5), 0.4);
        assert!((instance_threshold(0.4, 0.2, 0.5) - 0.5).abs() < 1e-15);
        assert_eq!(instance_threshold(0.9, 0.8, 0.5), 1.0);
    }

    #[test]
    fn ema_converges_geometrically() {
        let (mut tau, v, lambda) = (0.05, 0.5, 0.9);
        for k in 1..=30 {
            tau = global_threshold(tau, &[v, v, v], lambda).unwrap();
            let gap = (tau - v).abs();
            assert!((gap - lambda.powi(k) * 0.45).abs() < 1e-14);
        }
    }

    fn ridge_scene() -> (Tensor, Tensor) {
        let image = Tensor::from_fn2(32, 32, |r, c| {
            let d = r as f64 - 0.5 * c as f64 - 8.0;
            1.0 + 4.0 * (-(d * d) / 4.0).exp()
        })
        .unwrap();
        let feat = Tensor::from_fn2(8, 8, |r, c| (r + c) as f64 / 14.0)
            .unwrap()
            .reshape(vec![1, 8, 8])
            .unwrap();
        (image, feat)
    }

    #[test]
    fn calibrate_empty_bank_falls_back_to_raw_score() {
        let (image, feat) = ridge_scene();
        let d = Detection::new("s", bx(4.0, 6.0, 28.0, 26.0), 0.9, 0).unwrap();
        let cfg = CalibConfig::default();
        let bank = MemoryBank::new(16).unwrap();
        let out = calibrate(std::slice::from_ref(&d), &feat, &image, &bank, 0.05, &cfg, 0).unwrap();
        assert_eq!(out.accepted.len(), 1);
        let patch = image.crop2(6, 26, 4, 28).unwrap();
        let cg = geometry_factor(&patch, &cfg.geometry).unwrap().c_g;
        let expect = 0.7 * 0.9 + 0.3 * logistic(cg);
        assert!((out.accepted[0].score() - expect).abs() < 1e-15);
        assert_eq!(out.bank.len(), 1);
        assert_eq!(out.bank.entries()[0].confidence(), out.accepted[0].score());

        let again = calibrate(&[d], &feat, &image, &bank, 0.05, &cfg, 0).unwrap();
        assert_eq!(again.accepted, out.accepted);
        assert_eq!(again.bank, out.bank);
    }

    #[test]
    fn calibrate_rejects_below_threshold() {
        let (image, feat) = ridge_scene();
        let d = Detection::new("s", bx(4.0, 6.0, 28.0, 26.0), 0.1, 0).unwrap();
        let bank = MemoryBank::new(16).unwrap();
        let out = calibrate(&[d], &feat, &image, &bank, 0.95, &CalibConfig::default(), 0).unwrap();
        assert!(out.accepted.is_empty());
        assert_eq!(out.rejected_count, 1);
        assert!(out.bank.is_empty());
    }

    #[test]
    fn calibrate_small_box_uses_window_sized_patch() {
        let (image, feat) = ridge_scene();
        let d = Detection::new("s", bx(30.5, 30.5, 31.5, 31.5), 0.9, 0).unwrap();
        let out = calibrate(&[d], &feat, &image, &MemoryBank::new(4).unwrap(), 0.0, &CalibConfig::default(), 0);
        assert!(out.is_ok());
    }

    proptest! {
        #[test]
        fn bank_invariants_hold(
            ops in proptest::collection::vec((0u8..3, 0.0..20.0f64, 0.0..20.0f64, 1.0..8.0f64, 1.0..8.0f64, 0u32..5), 1..60),
            cap in 1usize..12,
        ) {
            let mut bank = MemoryBank::new(cap).unwrap();
            for (img, x, y, w, h, ep) in ops {
                let e = MemEntry::new(vec![x, y], 0.5, bx(x, y, x + w, y + h), format!("{img}"), ep).unwrap();
                bank.update(vec![e]).unwrap();
                prop_assert!(bank.len() <= cap);
                let es = bank.entries();
                for i in 0..es.len() {
                    for j in i + 1..es.len() {
                        if es[i].image_id == es[j].image_id {
                            prop_assert!(iou(&es[i].bbox, &es[j].bbox) <= REPLACE_IOU);
                        }
                    }
                }
            }
        }

        #[test]
        fn knn_weights_are_probabilities_and_scale_free(
            feats in proptest::collection::vec(proptest::collection::vec(-1.0..1.0f64, 3), 1..10),
            q in proptest::collection::vec(-1.0..1.0f64, 3),
            k in 1usize..6,
            scale in 0.1..10.0f64,
        ) {
            let entries = feats.into_iter().enumerate().map(|(i, f)| {
                MemEntry::new(f, 0.5, bx(10.0 * i as f64, 0.0, 10.0 * i as f64 + 1.0, 1.0), "a", 0).unwrap()
            }).collect();
            let bank = MemoryBank::from_entries(64, entries).unwrap();
            let (idx, w) = knn_weights(&q, &bank, k, 10.0).unwrap();
            prop_assert_eq!(idx.len(), k.min(bank.len()));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let qs: Vec<f64> = q.iter().map(|v| v * scale).collect();
            let (idx2, w2) = knn_weights(&qs, &bank, k, 10.0).unwrap();
            prop_assert_eq!(&idx, &idx2);
            for (a, b) in w.iter().zip(&w2) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn fused_and_refined_stay_in_unit_interval(
            cz in 0.0..=1.0f64, cn in 0.0..=1.0f64, delta in 0.0..=1.0f64,
            cg in -20.0..20.0f64, mu in 0.0..=1.0f64,
        ) {
            let cf = fuse_conf(cz, cn, delta).unwrap();
            prop_assert!((0.0..=1.0).contains(&cf));
            let r = refined_conf(cf, cg, mu).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
        }

        #[test]
        fn ema_stays_between_previous_and_mean(
            tau in 0.0..=1.0f64,
            maxima in proptest::collection::vec(0.0..=1.0f64, 1..10),
            lambda in 0.0..=1.0f64,
        ) {
            let next = global_threshold(tau, &maxima, lambda).unwrap();
            let mean = maxima.iter().sum::<f64>() / maxima.len() as f64;
            prop_assert!(next >= tau.min(mean) - 1e-15 && next <= tau.max(mean) + 1e-15);
        }
    }
}
