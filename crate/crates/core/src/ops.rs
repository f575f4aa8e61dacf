//! Small numeric building blocks shared across the pipeline.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard sigmoid `1 / (1 + e^-z)`, evaluated without overflow for large `|z|`.
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Temperature softmax `exp(gamma * v_i) / sum_j exp(gamma * v_j)`.
pub fn softmax_weights(v: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::invalid("softmax over an empty vector"));
    }
    if !gamma.is_finite() || v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("softmax inputs must be finite"));
    }
    let logits: Vec<f64> = v.iter().map(|x| gamma * x).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Bilinear kernel `max(0, 1 - |a - b|)`.
#[inline]
fn tent(a: f64, b: f64) -> f64 {
    (1.0 - (a - b).abs()).max(0.0)
}

/// Maps a normalized coordinate in `[-1, 1]` onto pixel-center units, where
/// -1 is the first pixel center and +1 the last.
#[inline]
fn denormalize(u: f64, size: usize) -> f64 {
    if size == 1 {
        0.0
    } else {
        (u + 1.0) * 0.5 * (size - 1) as f64
    }
}

/// Samples `x` (`[C, H, W]`) at normalized `(x, y)` points with the bilinear
/// tent kernel over the four surrounding grid nodes. Nodes outside the grid
/// read as zero. Returns `[C, N]`.
pub fn bilinear_sample(x: &Tensor, points: &[(f64, f64)]) -> Result<Tensor> {
    let (c, h, w) = x.shape3()?;
    if points.is_empty() {
        return Err(Error::invalid("no sample points"));
    }
    if points.iter().any(|(u, v)| !u.is_finite() || !v.is_finite()) {
        return Err(Error::invalid("sample points must be finite"));
    }
    let n = points.len();
    let mut out = vec![0.0; c * n];
    for (k, &(u, v)) in points.iter().enumerate() {
        let px = denormalize(u, w);
        let py = denormalize(v, h);
        let x0 = px.floor();
        let y0 = py.floor();
        for ry in [y0, y0 + 1.0] {
            for rx in [x0, x0 + 1.0] {
                let wgt = tent(px, rx) * tent(py, ry);
                if wgt == 0.0 || rx < 0.0 || ry < 0.0 || rx >= w as f64 || ry >= h as f64 {
                    continue;
                }
                let (ix, iy) = (rx as usize, ry as usize);
                for ch in 0..c {
                    out[ch * n + k] += wgt * x.at3(ch, iy, ix);
                }
            }
        }
    }
    Tensor::new(vec![c, n], out)
}

/// Channel-wise soft-thresholding `sign(z) * max(|z| - tau_c, 0)`; the
/// channel axis is the leading dimension.
pub fn soft_threshold(z: &Tensor, tau: &[f64]) -> Result<Tensor> {
    let channels = z.dims()[0];
    if tau.len() != channels {
        return Err(Error::shape(format!(
            "{} thresholds for {channels} channels",
            tau.len()
        )));
    }
    if let Some(t) = tau.iter().find(|t| !(**t >= 0.0) || !t.is_finite()) {
        return Err(Error::invalid(format!("threshold must be non-negative, got {t}")));
    }
    let per = z.len() / channels;
    let data = z
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v.signum() * (v.abs() - tau[i / per]).max(0.0))
        .collect();
    Tensor::new(z.dims().to_vec(), data)
}

/// Scaled dot-product attention: each output row is the softmax-weighted
/// average of the rows of `v`, with logits `q k^T / sqrt(d)`.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (n, d) = q.shape2()?;
    let (m, dk) = k.shape2()?;
    let (mv, dv) = v.shape2()?;
    if d != dk {
        return Err(Error::shape(format!("query dim {d} vs key dim {dk}")));
    }
    if m != mv {
        return Err(Error::shape(format!("{m} keys vs {mv} values")));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Vec::with_capacity(n * dv);
    for i in 0..n {
        let logits: Vec<f64> = (0..m)
            .map(|j| (0..d).map(|t| q.at2(i, t) * k.at2(j, t)).sum::<f64>() * scale)
            .collect();
        let w = softmax_weights(&logits, 1.0)?;
        for t in 0..dv {
            out.push((0..m).map(|j| w[j] * v.at2(j, t)).sum());
        }
    }
    Tensor::new(vec![n, dv], out)
}
