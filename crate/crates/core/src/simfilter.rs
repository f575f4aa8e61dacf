//! Similarity-guided source filtering.
//!
//! Source instances are scored by how unlikely they are under a model fitted
//! to target-domain instance embeddings, and the most target-like fraction is
//! kept. Three models are available: a mean prototype, K-means centers, and a
//! Gaussian mixture fitted by EM. A PCA projection and a histogram overlap
//! rate serve as a 2-D diagnostic of how well the two domains coincide.

use log::debug;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::BBox;
use crate::tensor::Tensor;

fn check_dims(embs: &[Vec<f64>]) -> Result<usize> {
    let first = embs.first().ok_or_else(|| Error::invalid("no embeddings"))?;
    let d = first.len();
    if d == 0 {
        return Err(Error::invalid("zero-dimensional embeddings"));
    }
    if let Some(bad) = embs.iter().find(|e| e.len() != d) {
        return Err(Error::shape(format!("embedding dims {d} vs {}", bad.len())));
    }
    Ok(d)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Arithmetic mean, accumulated in input order.
fn mean_of<'a>(rows: impl Iterator<Item = &'a Vec<f64>>, d: usize) -> Vec<f64> {
    let mut acc = vec![0.0; d];
    let mut n = 0usize;
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
        n += 1;
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    acc
}

/// Average-pools the feature cells whose centers fall inside `bbox` after
/// mapping it from image pixels (`image_size = (W, H)`) onto the
/// `[C, Hf, Wf]` feature grid. When no center falls inside, the cell under
/// the box center is used.
pub fn extract_embedding(featmap: &Tensor, bbox: &BBox, image_size: (usize, usize)) -> Result<Vec<f64>> {
    let (c, hf, wf) = featmap.shape3()?;
    let (iw, ih) = image_size;
    if iw == 0 || ih == 0 {
        return Err(Error::invalid("image size must be positive"));
    }
    if bbox.x2() <= 0.0 || bbox.y2() <= 0.0 || bbox.x1() >= iw as f64 || bbox.y1() >= ih as f64 {
        return Err(Error::invalid(format!(
            "box {:?} lies outside the {iw}x{ih} image",
            bbox.to_array()
        )));
    }
    let sx = wf as f64 / iw as f64;
    let sy = hf as f64 / ih as f64;
    let (x1, x2) = (bbox.x1() * sx, bbox.x2() * sx);
    let (y1, y2) = (bbox.y1() * sy, bbox.y2() * sy);
    let inside = |lo: f64, hi: f64, i: usize| {
        let center = i as f64 + 0.5;
        lo <= center && center < hi
    };
    let rows: Vec<usize> = (0..hf).filter(|&r| inside(y1, y2, r)).collect();
    let cols: Vec<usize> = (0..wf).filter(|&q| inside(x1, x2, q)).collect();
    let (rows, cols) = if rows.is_empty() || cols.is_empty() {
        let cr = ((0.5 * (y1 + y2)).floor().max(0.0) as usize).min(hf - 1);
        let cc = ((0.5 * (x1 + x2)).floor().max(0.0) as usize).min(wf - 1);
        (vec![cr], vec![cc])
    } else {
        (rows, cols)
    };
    let count = (rows.len() * cols.len()) as f64;
    Ok((0..c)
        .map(|ch| {
            let mut acc = 0.0;
            for &r in &rows {
                for &q in &cols {
                    acc += featmap.at3(ch, r, q);
                }
            }
            acc / count
        })
        .collect())
}

/// Mean embedding.
pub fn fit_prototype(embs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let d = check_dims(embs)?;
    Ok(mean_of(embs.iter(), d))
}

/// Squared Euclidean distance.
pub fn l2_distance(emb: &[f64], proto: &[f64]) -> Result<f64> {
    if emb.len() != proto.len() {
        return Err(Error::shape(format!("dims {} vs {}", emb.len(), proto.len())));
    }
    Ok(sq_dist(emb, proto))
}

/// Index of the nearest center (lowest index on ties) and its squared distance.
fn nearest(emb: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = sq_dist(emb, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// k-means++ seeding: the first center uniformly, the rest with probability
/// proportional to squared distance from the nearest chosen center.
fn kmeans_plus_plus(embs: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = embs.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = embs.iter().map(|e| sq_dist(e, &embs[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // every point coincides with a chosen center
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (dist, e) in d2.iter_mut().zip(embs) {
            *dist = dist.min(sq_dist(e, &embs[next]));
        }
    }
    chosen.into_iter().map(|i| embs[i].clone()).collect()
}

/// Lloyd's algorithm from a seeded k-means++ start. Clusters that lose all
/// members are moved onto the point farthest from its assigned center.
pub fn fit_kmeans(embs: &[Vec<f64>], k: usize, iters: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let d = check_dims(embs)?;
    if k == 0 || k > embs.len() {
        return Err(Error::invalid(format!("k = {k} with {} embeddings", embs.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeans_plus_plus(embs, k, &mut rng);
    let mut assign: Vec<usize> = vec![usize::MAX; embs.len()];
    for _ in 0..iters {
        let mut changed = false;
        for (a, e) in assign.iter_mut().zip(embs) {
            let (j, _) = nearest(e, &centers);
            changed |= *a != j;
            *a = j;
        }
        let mut next: Vec<Vec<f64>> = (0..k)
            .map(|j| {
                let members = embs.iter().zip(&assign).filter(|(_, &a)| a == j).map(|(e, _)| e);
                mean_of(members, d)
            })
            .collect();
        for j in 0..k {
            if assign.iter().all(|&a| a != j) {
                let far = (0..embs.len())
                    .max_by(|&a, &b| {
                        let da = sq_dist(&embs[a], &centers[assign[a]]);
                        let db = sq_dist(&embs[b], &centers[assign[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .unwrap_or(0);
                next[j] = embs[far].clone();
                assign[far] = j;
                changed = true;
            }
        }
        centers = next;
        if !changed {
            break;
        }
    }
    Ok(centers)
}

/// Squared distance to the nearest center.
pub fn kmeans_distance(emb: &[f64], centers: &[Vec<f64>]) -> Result<f64> {
    if centers.is_empty() {
        return Err(Error::invalid("no cluster centers"));
    }
    if let Some(c) = centers.iter().find(|c| c.len() != emb.len()) {
        return Err(Error::shape(format!("dims {} vs {}", emb.len(), c.len())));
    }
    Ok(nearest(emb, centers).1)
}

/// One mixture component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Row-major `d x d` covariance.
    pub cov: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub components: Vec<GmmComponent>,
}

/// EM output: the model and the per-iteration log-likelihood trace.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: GmmModel,
    /// `log_likelihood[t]` is the data log-likelihood under the parameters
    /// after `t` M-steps; entry 0 is the K-means initialization.
    pub log_likelihood: Vec<f64>,
    /// `floored[t]` is true when the M-step producing parameters `t` had to
    /// clamp at least one covariance eigenvalue.
    pub floored: Vec<bool>,
}

/// Cached per-component terms for log-density evaluation.
struct Prepared {
    log_weight: f64,
    mean: DVector<f64>,
    chol_l: DMatrix<f64>,
    log_norm: f64,
}

fn prepare(model: &GmmModel) -> Result<Vec<Prepared>> {
    model
        .components
        .iter()
        .map(|c| {
            let d = c.mean.len();
            let cov = DMatrix::from_row_slice(d, d, &c.cov);
            let chol = cov
                .cholesky()
                .ok_or_else(|| Error::Invariant("covariance is not positive definite".into()))?;
            let l = chol.l();
            let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
            Ok(Prepared {
                log_weight: c.weight.ln(),
                mean: DVector::from_column_slice(&c.mean),
                chol_l: l,
                log_norm: -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det),
            })
        })
        .collect()
}

/// `log(alpha_m) + log N(x; mu_m, Sigma_m)` for every component.
fn component_log_terms(x: &DVector<f64>, prep: &[Prepared]) -> Vec<f64> {
    prep.iter()
        .map(|p| {
            let diff = x - &p.mean;
            let z = p
                .chol_l
                .solve_lower_triangular(&diff)
                .expect("cholesky factor has a positive diagonal");
            p.log_weight + p.log_norm - 0.5 * z.norm_squared()
        })
        .collect()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl GmmModel {
    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, |c| c.mean.len())
    }

    /// Log of the mixture density at `x`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::shape(format!("dims {} vs {}", x.len(), self.dim())));
        }
        let prep = prepare(self)?;
        Ok(log_sum_exp(&component_log_terms(&DVector::from_column_slice(x), &prep)))
    }

    pub fn log_likelihood(&self, data: &[Vec<f64>]) -> Result<f64> {
        let prep = prepare(self)?;
        Ok(data
            .iter()
            .map(|x| log_sum_exp(&component_log_terms(&DVector::from_column_slice(x), &prep)))
            .sum())
    }
}

/// Clamps eigenvalues of a symmetric matrix at `floor`. Returns whether any
/// eigenvalue was raised.
fn floor_eigenvalues(m: DMatrix<f64>, floor: f64) -> (DMatrix<f64>, bool) {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return (sym, false);
    }
    let clamped = eig.eigenvalues.map(|l| l.max(floor));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    ((&rebuilt + rebuilt.transpose()) * 0.5, true)
}

/// Weighted mean/covariance M-step for one component. Clamping the scatter
/// matrix eigenvalues at the floor is the exact constrained maximizer, so EM
/// stays monotone.
fn m_step_component(data: &[Vec<f64>], resp: &[f64], floor: f64) -> Option<(f64, Vec<f64>, DMatrix<f64>, bool)> {
    let d = data[0].len();
    let nk: f64 = resp.iter().sum();
    if nk <= 0.0 {
        return None;
    }
    let mut mean = vec![0.0; d];
    for (x, &r) in data.iter().zip(resp) {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += r * v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= nk);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for (x, &r) in data.iter().zip(resp) {
        let diff = DVector::from_iterator(d, x.iter().zip(&mean).map(|(a, b)| a - b));
        cov += (&diff * diff.transpose()) * r;
    }
    cov /= nk;
    let (cov, floored) = floor_eigenvalues(cov, floor);
    Some((nk, mean, cov, floored))
}

fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let d = m.nrows();
    (0..d).flat_map(|r| (0..d).map(move |c| m[(r, c)])).collect()
}

/// Fits an `m`-component full-covariance Gaussian mixture by EM, starting
/// from K-means clusters. Covariance eigenvalues are clamped at `eps_floor`.
pub fn fit_gmm(embs: &[Vec<f64>], m: usize, iters: usize, eps_floor: f64, seed: u64) -> Result<GmmFit> {
    let d = check_dims(embs)?;
    if m == 0 || m > embs.len() {
        return Err(Error::invalid(format!("m = {m} with {} embeddings", embs.len())));
    }
    if !(eps_floor > 0.0) {
        return Err(Error::invalid("eps_floor must be positive"));
    }
    let n = embs.len();
    let centers = fit_kmeans(embs, m, 50, seed)?;
    let hard: Vec<usize> = embs.iter().map(|e| nearest(e, &centers).0).collect();

    let mut components = Vec::with_capacity(m);
    let mut init_floored = false;
    for (j, center) in centers.iter().enumerate() {
        let resp: Vec<f64> = hard.iter().map(|&a| if a == j { 1.0 } else { 0.0 }).collect();
        match m_step_component(embs, &resp, eps_floor) {
            Some((nk, mean, cov, fl)) => {
                init_floored |= fl;
                components.push(GmmComponent { weight: nk / n as f64, mean, cov: to_row_major(&cov) });
            }
            None => {
                // empty cluster: a tiny component at its center
                let mut cov = vec![0.0; d * d];
                (0..d).for_each(|i| cov[i * d + i] = eps_floor);
                components.push(GmmComponent { weight: 0.0, mean: center.clone(), cov });
            }
        }
    }
    normalize_weights(&mut components);
    let mut model = GmmModel { components };
    let mut trace = vec![model.log_likelihood(embs)?];
    let mut floored = vec![init_floored];

    for it in 0..iters {
        let prep = prepare(&model)?;
        let mut resp = vec![vec![0.0; n]; m];
        for (i, x) in embs.iter().enumerate() {
            let terms = component_log_terms(&DVector::from_column_slice(x), &prep);
            let lse = log_sum_exp(&terms);
            for (j, t) in terms.iter().enumerate() {
                resp[j][i] = (t - lse).exp();
            }
        }
        let mut any_floor = false;
        let mut next = Vec::with_capacity(m);
        for (j, r) in resp.iter().enumerate() {
            match m_step_component(embs, r, eps_floor) {
                Some((nk, mean, cov, fl)) => {
                    any_floor |= fl;
                    next.push(GmmComponent { weight: nk / n as f64, mean, cov: to_row_major(&cov) });
                }
                None => next.push(GmmComponent { weight: 0.0, ..model.components[j].clone() }),
            }
        }
        normalize_weights(&mut next);
        model = GmmModel { components: next };
        let ll = model.log_likelihood(embs)?;
        if any_floor {
            debug!("EM iteration {it}: covariance eigenvalues clamped at {eps_floor}");
        }
        let prev = *trace.last().unwrap();
        trace.push(ll);
        floored.push(any_floor);
        if (ll - prev).abs() <= 1e-12 * prev.abs().max(1.0) {
            break;
        }
    }
    Ok(GmmFit { model, log_likelihood: trace, floored })
}

fn normalize_weights(components: &mut [GmmComponent]) {
    let total: f64 = components.iter().map(|c| c.weight).sum();
    components.iter_mut().for_each(|c| c.weight /= total);
}

/// Density floor below which the reciprocal is capped.
const MIN_DENSITY: f64 = 1e-300;
const MAX_DISTANCE: f64 = 1e300;

/// Reciprocal of the mixture density, capped at `1e300`.
pub fn gmm_distance(emb: &[f64], gmm: &GmmModel) -> Result<f64> {
    let log_p = gmm.log_density(emb)?;
    if log_p < MIN_DENSITY.ln() {
        return Ok(MAX_DISTANCE);
    }
    Ok((-log_p).exp())
}

/// Target-distribution model used to score source instances.
#[derive(Debug, Clone)]
pub enum Scorer {
    Prototype(Vec<f64>),
    KMeans(Vec<Vec<f64>>),
    Gmm(GmmModel),
}

impl Scorer {
    pub fn distance(&self, emb: &[f64]) -> Result<f64> {
        match self {
            Scorer::Prototype(p) => l2_distance(emb, p),
            Scorer::KMeans(c) => kmeans_distance(emb, c),
            Scorer::Gmm(g) => gmm_distance(emb, g),
        }
    }

    /// Scores every embedding, keeping its position as the instance index.
    pub fn score_all(&self, embs: &[Vec<f64>]) -> Result<Vec<ScoredInstance>> {
        embs.iter()
            .enumerate()
            .map(|(index, e)| {
                Ok(ScoredInstance {
                    index,
                    embedding: e.clone(),
                    distance: self.distance(e)?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredInstance {
    pub index: usize,
    pub embedding: Vec<f64>,
    pub distance: f64,
}

/// Keeps the `floor(eta * N)` instances with the smallest distance, ties
/// broken by ascending index. Returns their indices in that order.
pub fn select_similar(scored: &[ScoredInstance], eta: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::invalid(format!("eta must lie in [0, 1], got {eta}")));
    }
    let mut order: Vec<&ScoredInstance> = scored.iter().collect();
    order.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index)));
    // small slack absorbs representation error in eta (2/3 * 3 etc.)
    let keep = ((eta * scored.len() as f64) + 1e-9).floor() as usize;
    Ok(order.into_iter().take(keep.min(scored.len())).map(|s| s.index).collect())
}

/// Projects embeddings onto their two leading principal axes. Axes are
/// ordered by descending variance; each is signed so its largest-magnitude
/// coordinate is positive.
pub fn pca2_project(embs: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let d = check_dims(embs)?;
    if embs.len() < 2 {
        return Err(Error::invalid("PCA needs at least two points"));
    }
    if d < 2 {
        return Err(Error::invalid("PCA to 2-D needs at least two dimensions"));
    }
    let mean = mean_of(embs.iter(), d);
    let n = embs.len();
    let centered = DMatrix::from_fn(n, d, |i, j| embs[i][j] - mean[j]);
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axes: Vec<DVector<f64>> = order[..2]
        .iter()
        .map(|&j| {
            let v = eig.eigenvectors.column(j).into_owned();
            let lead = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            if lead < 0.0 {
                -v
            } else {
                v
            }
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            let row = centered.row(i);
            [row.dot(&axes[0].transpose()), row.dot(&axes[1].transpose())]
        })
        .collect())
}

/// Overlap `sum min(p, q)` of two normalized 2-D histograms on a shared
/// `grid_n x grid_n` grid spanning the joint bounding box.
pub fn density_overlap(a: &[[f64; 2]], b: &[[f64; 2]], grid_n: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("density overlap needs two non-empty point sets"));
    }
    if grid_n == 0 {
        return Err(Error::invalid("grid size must be positive"));
    }
    let all = a.iter().chain(b);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in all {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let cell = |v: f64, k: usize| -> usize {
        let span = hi[k] - lo[k];
        if span <= 0.0 {
            return 0;
        }
        (((v - lo[k]) / span * grid_n as f64) as usize).min(grid_n - 1)
    };
    let hist = |pts: &[[f64; 2]]| {
        let mut h = vec![0.0; grid_n * grid_n];
        for p in pts {
            h[cell(p[1], 1) * grid_n + cell(p[0], 0)] += 1.0;
        }
        let n = pts.len() as f64;
        h.iter_mut().for_each(|v| *v /= n);
        h
    };
    let (ha, hb) = (hist(a), hist(b));
    Ok(ha.iter().zip(&hb).map(|(p, q)| p.min(*q)).sum::<f64>().min(1.0))
}
