//! Frequency-domain machinery for style transfer: centered spectra, polar
//! spectral profiles, the spectral preservation / cyclic consistency losses,
//! the frequency selection split of feature maps, and loss assembly from
//! externally supplied generator and discriminator outputs.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::logistic;
use crate::tensor::Tensor;

/// Polar binning layout for spectral profiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileConfig {
    pub n_radial: usize,
    pub n_angular: usize,
    /// Normalized radius separating the low band from the high band.
    pub rho_c: f64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            n_radial: 16,
            n_angular: 16,
            rho_c: 0.25,
        }
    }
}

impl ProfileConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_radial == 0 || self.n_angular == 0 {
            return Err(Error::invalid("profile bin counts must be positive"));
        }
        if !(self.rho_c > 0.0 && self.rho_c < 1.0) {
            return Err(Error::invalid(format!("rho_c must lie in (0, 1), got {}", self.rho_c)));
        }
        Ok(())
    }
}

/// Low-band radial and high-band angular energy histograms of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralProfile {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

/// Unitary 2-D DFT with DC moved to `(H/2, W/2)`, returned row-major.
fn centered_spectrum(img: &Tensor) -> Result<(usize, usize, Vec<Complex<f64>>)> {
    let (h, w) = img.shape2()?;
    if h < 2 || w < 2 {
        return Err(Error::shape(format!("spectrum needs at least 2x2, got {h}x{w}")));
    }
    let mut buf: Vec<Complex<f64>> = img.data().iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = buf[r * w + c];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            buf[r * w + c] = col[r];
        }
    }
    let norm = 1.0 / ((h * w) as f64).sqrt();
    let mut shifted = vec![Complex::new(0.0, 0.0); h * w];
    for r in 0..h {
        for c in 0..w {
            shifted[((r + h / 2) % h) * w + (c + w / 2) % w] = buf[r * w + c] * norm;
        }
    }
    Ok((h, w, shifted))
}

/// Magnitude of the unitary 2-D DFT with the DC term at the array center.
pub fn fft2_centered_magnitude(img: &Tensor) -> Result<Tensor> {
    let (h, w, spec) = centered_spectrum(img)?;
    Tensor::new(vec![h, w], spec.iter().map(|z| z.norm()).collect())
}

/// Bins the squared spectrum magnitude on polar coordinates. Bins with
/// normalized radius below `rho_c` feed the radial low-band histogram; the
/// rest feed the angular high-band histogram with angles folded modulo pi.
///
/// Radius is measured in cycles per sample and normalized by the largest
/// radius present on the grid, so it spans `[0, 1]`.
pub fn polar_profiles(img: &Tensor, cfg: &ProfileConfig) -> Result<SpectralProfile> {
    cfg.validate()?;
    let (h, w, spec) = centered_spectrum(img)?;
    let (ch, cw) = ((h / 2) as f64, (w / 2) as f64);
    let r_max = ((cw / w as f64).powi(2) + (ch / h as f64).powi(2)).sqrt();
    let mut low = vec![0.0; cfg.n_radial];
    let mut high = vec![0.0; cfg.n_angular];
    for r in 0..h {
        let fy = (r as f64 - ch) / h as f64;
        for c in 0..w {
            let fx = (c as f64 - cw) / w as f64;
            let energy = spec[r * w + c].norm_sqr();
            let rho = (fx * fx + fy * fy).sqrt() / r_max;
            if rho < cfg.rho_c {
                let bin = ((rho / cfg.rho_c) * cfg.n_radial as f64) as usize;
                low[bin.min(cfg.n_radial - 1)] += energy;
            } else {
                let angle = fy.atan2(fx).rem_euclid(PI);
                let bin = (angle / PI * cfg.n_angular as f64) as usize;
                high[bin.min(cfg.n_angular - 1)] += energy;
            }
        }
    }
    Ok(SpectralProfile { low, high })
}

/// `1 - cos(u, v)`, defined as 0 when either vector is all zeros.
pub fn dir_cos_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape(format!("lengths {} vs {}", u.len(), v.len())));
    }
    if u == v {
        return Ok(0.0);
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((1.0 - dot / (nu * nv)).clamp(0.0, 2.0))
}

/// Spectral distance between two already-extracted profiles.
pub fn profile_loss(a: &SpectralProfile, b: &SpectralProfile, lambda_h: f64) -> Result<f64> {
    if a.low.len() != b.low.len() {
        return Err(Error::shape("low-band profile lengths differ"));
    }
    let low: f64 = a.low.iter().zip(&b.low).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(low + lambda_h * dir_cos_distance(&a.high, &b.high)?)
}

/// Spectral preservation loss for one input/output pair: squared L2 between
/// low-band radial profiles plus `lambda_h` times the directional cosine
/// distance between high-band angular profiles.
pub fn spl(x: &Tensor, y: &Tensor, lambda_h: f64, cfg: &ProfileConfig) -> Result<f64> {
    x.same_dims(y, "spl")?;
    profile_loss(&polar_profiles(x, cfg)?, &polar_profiles(y, cfg)?, lambda_h)
}

/// Mean [`spl`] over pairs, summed in index order.
pub fn spl_mean(pairs: &[(Tensor, Tensor)], lambda_h: f64, cfg: &ProfileConfig) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs"));
    }
    let mut total = 0.0;
    for (x, y) in pairs {
        total += spl(x, y, lambda_h, cfg)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Cyclic spectral consistency: the preservation loss of each domain's
/// image against its round-trip reconstruction, summed over both domains.
pub fn cscl(
    xs: &Tensor,
    xs_cyc: &Tensor,
    xt: &Tensor,
    xt_cyc: &Tensor,
    lambda_h: f64,
    cfg: &ProfileConfig,
) -> Result<f64> {
    Ok(spl(xs, xs_cyc, lambda_h, cfg)? + spl(xt, xt_cyc, lambda_h, cfg)?)
}

/// Mean absolute elementwise difference.
pub fn cycle_l1(x: &Tensor, x_cyc: &Tensor) -> Result<f64> {
    x.same_dims(x_cyc, "cycle_l1")?;
    let sum: f64 = x.data().iter().zip(x_cyc.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / x.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GanLosses {
    pub generator: f64,
    pub discriminator: f64,
}

/// Least-squares adversarial losses from discriminator scores on real and
/// generated samples.
pub fn lsgan_losses(scores_real: &[f64], scores_fake: &[f64]) -> Result<GanLosses> {
    if scores_real.is_empty() || scores_fake.is_empty() {
        return Err(Error::invalid("adversarial losses need non-empty score vectors"));
    }
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&s| f(s)).sum::<f64>() / v.len() as f64;
    let generator = mean(scores_fake, &|s| (s - 1.0) * (s - 1.0));
    let discriminator = mean(scores_real, &|s| (s - 1.0) * (s - 1.0)) + mean(scores_fake, &|s| s * s);
    Ok(GanLosses {
        generator,
        discriminator,
    })
}

/// The loss components of the style-transfer objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WakeGanTerms {
    pub spl_source: f64,
    pub spl_target: f64,
    pub gan_source_to_target: f64,
    pub gan_target_to_source: f64,
    pub cscl: f64,
    pub cycle: f64,
}

/// Sum of all terms with `lambda_cyc` weighting the pixel cycle loss.
pub fn wakegan_total(terms: &WakeGanTerms, lambda_cyc: f64) -> f64 {
    terms.spl_source
        + terms.spl_target
        + terms.gan_source_to_target
        + terms.gan_target_to_source
        + terms.cscl
        + lambda_cyc * terms.cycle
}

const BN_EPS: f64 = 1e-5;

/// Parameters of the frequency selection unit.
#[derive(Debug, Clone, PartialEq)]
pub struct FsuWeights {
    groups: usize,
    kernel: usize,
    /// `[C, 3, 3]` depthwise kernels.
    depthwise: Tensor,
    /// `[g, C/g, C/g]` within-group 1x1 mixing matrices.
    pointwise: Tensor,
    bn_scale: Vec<f64>,
    bn_shift: Vec<f64>,
}

impl FsuWeights {
    pub fn new(
        groups: usize,
        kernel: usize,
        depthwise: Tensor,
        pointwise: Tensor,
        bn_scale: Vec<f64>,
        bn_shift: Vec<f64>,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::invalid(format!("kernel size must be odd, got {kernel}")));
        }
        let (c, kh, kw) = depthwise.shape3()?;
        if (kh, kw) != (3, 3) {
            return Err(Error::shape("depthwise kernels must be 3x3"));
        }
        if groups == 0 || c % groups != 0 {
            return Err(Error::invalid(format!("{groups} groups do not divide {c} channels")));
        }
        let cg = c / groups;
        if pointwise.dims() != [groups, cg, cg] {
            return Err(Error::shape(format!(
                "pointwise weights must be [{groups}, {cg}, {cg}], got {:?}",
                pointwise.dims()
            )));
        }
        if bn_scale.len() != groups || bn_shift.len() != groups {
            return Err(Error::shape("one batch-norm scale/shift per group"));
        }
        Ok(Self {
            groups,
            kernel,
            depthwise,
            pointwise,
            bn_scale,
            bn_shift,
        })
    }

    pub fn channels(&self) -> usize {
        self.depthwise.dims()[0]
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }
}

/// Zero-padded "same" cross-correlation of one `h x w` plane with a square
/// odd kernel.
fn correlate_same(plane: &[f64], h: usize, w: usize, kernel: &[f64], k: usize) -> Vec<f64> {
    let half = (k / 2) as isize;
    let mut out = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let mut acc = 0.0;
            for i in 0..k as isize {
                let rr = r + i - half;
                if rr < 0 || rr >= h as isize {
                    continue;
                }
                for j in 0..k as isize {
                    let cc = c + j - half;
                    if cc < 0 || cc >= w as isize {
                        continue;
                    }
                    acc += kernel[(i * k as isize + j) as usize] * plane[(rr * w as isize + cc) as usize];
                }
            }
            out[(r * w as isize + c) as usize] = acc;
        }
    }
    out
}

/// Adaptive average pooling of an `h x w` plane to `k x k`.
fn adaptive_avg_pool(plane: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * k];
    for i in 0..k {
        let (r0, r1) = (i * h / k, ((i + 1) * h).div_ceil(k));
        for j in 0..k {
            let (c0, c1) = (j * w / k, ((j + 1) * w).div_ceil(k));
            let mut acc = 0.0;
            for r in r0..r1 {
                for c in c0..c1 {
                    acc += plane[r * w + c];
                }
            }
            out[i * k + j] = acc / ((r1 - r0) * (c1 - c0)) as f64;
        }
    }
    out
}

/// Per-group low-pass kernels `W_LP` (each `k*k`, non-negative, summing to 1).
pub fn fsu_lowpass_kernels(f: &Tensor, w: &FsuWeights) -> Result<Vec<Vec<f64>>> {
    let (c, h, wd) = f.shape3()?;
    if c != w.channels() {
        return Err(Error::shape(format!(
            "feature map has {c} channels, weights expect {}",
            w.channels()
        )));
    }
    let plane = h * wd;
    let cg = c / w.groups;
    let data = f.data();
    let mut kernels = Vec::with_capacity(w.groups);
    for g in 0..w.groups {
        // weight prototype: sigmoid(depthwise 3x3)
        let proto: Vec<Vec<f64>> = (0..cg)
            .map(|i| {
                let ch = g * cg + i;
                let k3 = &w.depthwise.data()[ch * 9..ch * 9 + 9];
                correlate_same(&data[ch * plane..(ch + 1) * plane], h, wd, k3, 3)
                    .into_iter()
                    .map(logistic)
                    .collect()
            })
            .collect();
        // gate with sigmoid of the within-group 1x1 mixing
        let mix = &w.pointwise.data()[g * cg * cg..(g + 1) * cg * cg];
        let mut gated = vec![0.0; cg * plane];
        for o in 0..cg {
            for p in 0..plane {
                let m: f64 = (0..cg).map(|i| mix[o * cg + i] * proto[i][p]).sum();
                gated[o * plane + p] = proto[o][p] * logistic(m);
            }
        }
        // batch norm over the group's full extent with per-call statistics
        let n = gated.len() as f64;
        let mean = gated.iter().sum::<f64>() / n;
        let var = gated.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + BN_EPS).sqrt();
        let (scale, shift) = (w.bn_scale[g], w.bn_shift[g]);
        let mut pooled_src = vec![0.0; plane];
        for o in 0..cg {
            for p in 0..plane {
                pooled_src[p] += (gated[o * plane + p] - mean) * inv * scale + shift;
            }
        }
        pooled_src.iter_mut().for_each(|v| *v /= cg as f64);
        let pooled = adaptive_avg_pool(&pooled_src, h, wd, w.kernel);
        kernels.push(crate::ops::softmax_weights(&pooled, 1.0)?);
    }
    Ok(kernels)
}

/// Filters every channel of `f` with its group's low-pass kernel and the
/// complementary `delta - W_LP` high-pass kernel. Linear in `f`.
pub fn fsu_filter(f: &Tensor, kernels: &[Vec<f64>], kernel: usize) -> Result<(Tensor, Tensor)> {
    let (c, h, wd) = f.shape3()?;
    if kernels.is_empty() || c % kernels.len() != 0 {
        return Err(Error::invalid(format!("{} kernels for {c} channels", kernels.len())));
    }
    if kernels.iter().any(|k| k.len() != kernel * kernel) {
        return Err(Error::shape(format!("kernels must hold {kernel}x{kernel} entries")));
    }
    let plane = h * wd;
    let cg = c / kernels.len();
    let k = kernel;
    let mut low = Vec::with_capacity(c * plane);
    let mut high = Vec::with_capacity(c * plane);
    for ch in 0..c {
        let lp = &kernels[ch / cg];
        let mut hp: Vec<f64> = lp.iter().map(|v| -v).collect();
        hp[(k / 2) * k + k / 2] += 1.0;
        let src = &f.data()[ch * plane..(ch + 1) * plane];
        low.extend(correlate_same(src, h, wd, lp, k));
        high.extend(correlate_same(src, h, wd, &hp, k));
    }
    Ok((
        Tensor::new(f.dims().to_vec(), low)?,
        Tensor::new(f.dims().to_vec(), high)?,
    ))
}

/// Splits `f` (`[C, H, W]`) into low- and high-frequency parts. Each group
/// gets one input-dependent low-pass kernel `W_LP`; the low part is
/// `W_LP * F` and the high part `(delta - W_LP) * F`, both zero-padded.
pub fn fsu_decompose(f: &Tensor, w: &FsuWeights) -> Result<(Tensor, Tensor)> {
    let kernels = fsu_lowpass_kernels(f, w)?;
    fsu_filter(f, &kernels, w.kernel)
}
