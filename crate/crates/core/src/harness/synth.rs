//! Seeded synthetic SAR-like scenes: unit-mean exponential speckle with
//! bright oriented Gaussian ridges standing in for wakes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{BBox, Detection};
use crate::tensor::Tensor;

/// Smallest accepted scene side.
pub const MIN_SIDE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    /// Peak ridge intensity added on top of the speckle.
    pub amplitude: f64,
    /// Gaussian cross-section standard deviation in pixels.
    pub sigma: f64,
    pub min_length: f64,
    pub max_length: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            amplitude: 4.0,
            sigma: 1.5,
            min_length: 24.0,
            max_length: 40.0,
        }
    }
}

impl SynthParams {
    /// Nominal ridge width, taken as the `±2 sigma` extent.
    pub fn width(&self) -> f64 {
        4.0 * self.sigma
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude >= 0.0 && self.sigma > 0.0) {
            return Err(Error::invalid("synth amplitude must be >= 0 and sigma > 0"));
        }
        if !(self.min_length >= 4.0 * self.width() && self.max_length >= self.min_length) {
            return Err(Error::invalid(format!(
                "ridge lengths must satisfy 4 * width ({}) <= min_length <= max_length",
                4.0 * self.width()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Tensor,
    pub gts: Vec<Detection>,
}

struct Ridge {
    cx: f64,
    cy: f64,
    dx: f64,
    dy: f64,
    half_len: f64,
}

impl Ridge {
    /// Unit-peak intensity at pixel center `(x, y)`; the ends taper with the
    /// same Gaussian as the cross-section.
    fn intensity(&self, x: f64, y: f64, sigma: f64) -> f64 {
        let (rx, ry) = (x - self.cx, y - self.cy);
        let along = rx * self.dx + ry * self.dy;
        let across = -rx * self.dy + ry * self.dx;
        let beyond = (along.abs() - self.half_len).max(0.0);
        (-(across * across + beyond * beyond) / (2.0 * sigma * sigma)).exp()
    }

    fn bbox(&self, pad: f64, w: usize, h: usize) -> Result<BBox> {
        let ex = (self.half_len * self.dx).abs() + pad;
        let ey = (self.half_len * self.dy).abs() + pad;
        BBox::new(
            (self.cx - ex).max(0.0),
            (self.cy - ey).max(0.0),
            (self.cx + ex).min(w as f64),
            (self.cy + ey).min(h as f64),
        )
    }
}

/// Generates a `(W, H)` scene with `n_wakes` ridges, fully determined by
/// `seed`. Ground-truth boxes enclose each ridge out to `2 sigma` and lie
/// inside the image.
pub fn synth_scene(seed: u64, size: (usize, usize), n_wakes: usize, params: &SynthParams) -> Result<Scene> {
    params.validate()?;
    let (w, h) = size;
    if w < MIN_SIDE || h < MIN_SIDE {
        return Err(Error::invalid(format!("scene must be at least {MIN_SIDE}x{MIN_SIDE}, got {w}x{h}")));
    }
    let pad = 2.0 * params.sigma;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ridges = Vec::with_capacity(n_wakes);
    for _ in 0..n_wakes {
        let len = if params.max_length > params.min_length {
            rng.random_range(params.min_length..=params.max_length)
        } else {
            params.min_length
        };
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let (dy, dx) = theta.sin_cos();
        let half_len = 0.5 * len;
        let mx = (half_len * dx).abs() + pad;
        let my = (half_len * dy).abs() + pad;
        if 2.0 * mx >= w as f64 || 2.0 * my >= h as f64 {
            return Err(Error::invalid("ridge does not fit inside the scene"));
        }
        let cx = rng.random_range(mx..w as f64 - mx);
        let cy = rng.random_range(my..h as f64 - my);
        ridges.push(Ridge { cx, cy, dx, dy, half_len });
    }
    let speckle: Vec<f64> = (0..w * h).map(|_| Exp1.sample(&mut rng)).collect();
    let image = Tensor::from_fn2(h, w, |r, c| {
        let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
        let ridge: f64 = ridges.iter().map(|rd| rd.intensity(x, y, params.sigma)).sum();
        speckle[r * w + c] + params.amplitude * ridge
    })?;
    let image_id = format!("synth-{seed}");
    let gts = ridges
        .iter()
        .map(|rd| Detection::new(image_id.clone(), rd.bbox(pad, w, h)?, 1.0, 0))
        .collect::<Result<_>>()?;
    Ok(Scene { image, gts })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let p = SynthParams::default();
        let a = synth_scene(5, (64, 80), 3, &p).unwrap();
        let b = synth_scene(5, (64, 80), 3, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.image.dims(), &[80, 64]);
        let c = synth_scene(6, (64, 80), 3, &p).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn no_wakes_gives_empty_gt_and_unit_mean_speckle() {
        let s = synth_scene(1, (128, 128), 0, &SynthParams::default()).unwrap();
        assert!(s.gts.is_empty());
        let mean = s.image.data().iter().sum::<f64>() / s.image.len() as f64;
        assert!((mean - 1.0).abs() < 0.05, "{mean}");
        assert!(s.image.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn boxes_inside_and_cover_ridge_peak() {
        let p = SynthParams::default();
        for seed in 0..50 {
            let s = synth_scene(seed, (96, 64), 4, &p).unwrap();
            assert_eq!(s.gts.len(), 4);
            for g in &s.gts {
                let b = g.bbox;
                assert!(b.x1() >= 0.0 && b.y1() >= 0.0 && b.x2() <= 96.0 && b.y2() <= 64.0);
                assert!(b.width().max(b.height()) >= p.min_length);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = SynthParams::default();
        assert!(synth_scene(0, (32, 64), 1, &p).is_err());
        let short = SynthParams { min_length: 10.0, ..p };
        assert!(synth_scene(0, (64, 64), 1, &short).is_err());
    }
}
