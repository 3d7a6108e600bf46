//! Virtual-outlier synthesis in logit space.
//!
//! Per-pixel logit vectors are collected into fixed-capacity per-class FIFO
//! queues. From the queue contents we fit one Gaussian per class with a
//! shared covariance (class means, pooled within-class scatter), draw
//! candidates from each class Gaussian, and keep the lowest-density ones as
//! virtual outliers. Those vectors then overwrite a seeded subset of real
//! pixel logits to form the synthetic map the uncertainty loss is computed on.

use std::collections::VecDeque;

use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::MaskMap;
use crate::rng::rng_for;
use crate::segmenter::LogitMap;

pub const INITIAL_RIDGE: f64 = 1e-4;
pub const MAX_RIDGE_DOUBLINGS: usize = 10;
pub const DEFAULT_QUEUE_CAPACITY: usize = 5_000;

/// FIFO of logit vectors for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassQueue {
    class: usize,
    capacity: usize,
    entries: VecDeque<Vec<f64>>,
}

impl ClassQueue {
    pub fn new(class: usize, capacity: usize) -> Self {
        Self {
            class,
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn class(&self) -> usize {
        self.class
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

    /// Appends `v`, evicting the oldest entry when full.
    pub fn push(&mut self, v: Vec<f64>) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(v);
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.iter().map(Vec::as_slice)
    }
}

/// One queue per class, all holding vectors of the same dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassQueues {
    dim: usize,
    queues: Vec<ClassQueue>,
}

impl ClassQueues {
    pub fn new(classes: usize, dim: usize, capacity: usize) -> Self {
        Self {
            dim,
            queues: (0..classes).map(|k| ClassQueue::new(k, capacity)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn queues(&self) -> &[ClassQueue] {
        &self.queues
    }

    pub fn push(&mut self, class: usize, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Shape(format!(
                "queue vectors have dimension {}, got {}",
                self.dim,
                v.len()
            )));
        }
        let q = self
            .queues
            .get_mut(class)
            .ok_or_else(|| Error::Range(format!("no queue for class {class}")))?;
        q.push(v);
        Ok(())
    }

    /// Samples up to `n_per_image` distinct pixels (seeded, uniform) and
    /// pushes each pixel's logit vector onto the queue of its true class.
    /// Returns the number of pixels enqueued.
    pub fn enqueue_pixels(
        &mut self,
        logits: &LogitMap,
        target: &MaskMap,
        n_per_image: usize,
        seed: u64,
    ) -> Result<usize> {
        if logits.height() != target.height() || logits.width() != target.width() {
            return Err(Error::Shape("logits and target differ in size".into()));
        }
        if logits.k() != self.dim {
            return Err(Error::Shape(format!(
                "logit dimension {} but queues hold {}",
                logits.k(),
                self.dim
            )));
        }
        if n_per_image == 0 {
            return Err(Error::Config("pixels per image must be at least 1".into()));
        }
        let pixels = target.labels().len();
        let n = n_per_image.min(pixels);
        let mut rng = rng_for(seed, &[]);
        for p in index::sample(&mut rng, pixels, n) {
            let class = usize::from(target.labels()[p]);
            self.push(class, logits.pixel(p).to_vec())?;
        }
        Ok(n)
    }

    /// Whether every class holds more than `dim` entries.
    pub fn ready(&self) -> bool {
        self.queues.iter().all(|q| q.len() > self.dim)
    }
}

fn cholesky(a: &[f64], m: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..=i {
            let mut s = a[i * m + j];
            for t in 0..j {
                s -= l[i * m + t] * l[j * m + t];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * m + i] = s.sqrt();
            } else {
                l[i * m + j] = s / l[j * m + j];
            }
        }
    }
    Some(l)
}

/// Class-conditional Gaussians sharing one covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianModel {
    dim: usize,
    means: Vec<Vec<f64>>,
    /// Pooled within-class covariance, row-major `dim x dim`.
    cov: Vec<f64>,
    /// Lower Cholesky factor of `cov + ridge * I`.
    chol: Vec<f64>,
    ridge: f64,
}

impl GaussianModel {
    /// Builds a model from explicit means and covariance, ridging until the
    /// covariance factorizes.
    pub fn from_parts(means: Vec<Vec<f64>>, cov: Vec<f64>) -> Result<Self> {
        let dim = means.first().map_or(0, Vec::len);
        if dim < 2 || means.iter().any(|m| m.len() != dim) || cov.len() != dim * dim {
            return Err(Error::Shape(format!(
                "means/covariance shapes inconsistent (dim {dim})"
            )));
        }
        let mut ridge = INITIAL_RIDGE;
        for attempt in 0..=MAX_RIDGE_DOUBLINGS {
            let mut a = cov.clone();
            for i in 0..dim {
                a[i * dim + i] += ridge;
            }
            if let Some(chol) = cholesky(&a, dim) {
                return Ok(Self {
                    dim,
                    means,
                    cov,
                    chol,
                    ridge,
                });
            }
            if attempt < MAX_RIDGE_DOUBLINGS {
                ridge *= 2.0;
            }
        }
        Err(Error::Factorization {
            attempts: MAX_RIDGE_DOUBLINGS,
            ridge,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.means.len()
    }

    pub fn mean(&self, class: usize) -> &[f64] {
        &self.means[class]
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn covariance(&self) -> &[f64] {
        &self.cov
    }

    pub fn cholesky_factor(&self) -> &[f64] {
        &self.chol
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// Log-density of `v` under class `class`, using `cov + ridge * I`.
    pub fn log_density(&self, class: usize, v: &[f64]) -> f64 {
        let m = self.dim;
        let mu = &self.means[class];
        // Forward substitution: L y = v - mu.
        let mut y = vec![0.0; m];
        let mut maha = 0.0;
        let mut log_det = 0.0;
        for i in 0..m {
            let mut s = v[i] - mu[i];
            for t in 0..i {
                s -= self.chol[i * m + t] * y[t];
            }
            y[i] = s / self.chol[i * m + i];
            maha += y[i] * y[i];
            log_det += 2.0 * self.chol[i * m + i].ln();
        }
        -0.5 * (m as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + maha)
    }

    pub fn density(&self, class: usize, v: &[f64]) -> f64 {
        self.log_density(class, v).exp()
    }

    /// `count` i.i.d. draws `mean + L z` for one class, with their densities.
    pub fn sample_candidates(&self, class: usize, count: usize, seed: u64) -> Candidates {
        let m = self.dim;
        let mu = &self.means[class];
        let mut rng = rng_for(seed, &[class as u64]);
        let mut points = Vec::with_capacity(count * m);
        let mut densities = Vec::with_capacity(count);
        let mut z = vec![0.0; m];
        for _ in 0..count {
            for zi in &mut z {
                *zi = StandardNormal.sample(&mut rng);
            }
            let start = points.len();
            for i in 0..m {
                let mut s = mu[i];
                for t in 0..=i {
                    s += self.chol[i * m + t] * z[t];
                }
                points.push(s);
            }
            densities.push(self.density(class, &points[start..]));
        }
        Candidates {
            dim: m,
            points,
            densities,
        }
    }
}

/// Class means and pooled within-class covariance (divided by the total
/// entry count) of the queue contents. Every queue must be nonempty.
pub fn pooled_moments(queues: &ClassQueues) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let m = queues.dim;
    if let Some(q) = queues.queues.iter().find(|q| q.is_empty()) {
        return Err(Error::NotReady {
            class: q.class,
            have: 0,
            need: 1,
        });
    }
    let means: Vec<Vec<f64>> = queues
        .queues
        .iter()
        .map(|q| {
            let mut mu = vec![0.0; m];
            for v in q.iter() {
                for (a, b) in mu.iter_mut().zip(v) {
                    *a += b;
                }
            }
            let n = q.len() as f64;
            mu.iter_mut().for_each(|a| *a /= n);
            mu
        })
        .collect();
    let total: usize = queues.queues.iter().map(ClassQueue::len).sum();
    let mut cov = vec![0.0; m * m];
    let mut d = vec![0.0; m];
    for (q, mu) in queues.queues.iter().zip(&means) {
        for v in q.iter() {
            for i in 0..m {
                d[i] = v[i] - mu[i];
            }
            for i in 0..m {
                for j in i..m {
                    cov[i * m + j] += d[i] * d[j];
                }
            }
        }
    }
    for i in 0..m {
        for j in i..m {
            let s = cov[i * m + j] / total as f64;
            cov[i * m + j] = s;
            cov[j * m + i] = s;
        }
    }
    Ok((means, cov))
}

/// Fits the shared-covariance model once every class queue holds more than
/// `dim` entries; otherwise reports which class is short.
pub fn estimate(queues: &ClassQueues) -> Result<GaussianModel> {
    let m = queues.dim;
    for q in &queues.queues {
        if q.len() <= m {
            return Err(Error::NotReady {
                class: q.class,
                have: q.len(),
                need: m + 1,
            });
        }
    }
    let (means, cov) = pooled_moments(queues)?;
    GaussianModel::from_parts(means, cov)
}

/// Flat candidate draws for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidates {
    pub dim: usize,
    pub points: Vec<f64>,
    pub densities: Vec<f64>,
}

impl Candidates {
    pub fn len(&self) -> usize {
        self.densities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.densities.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }
}

/// Indices of the `count` smallest densities, ordered by (density, index).
pub fn select_lowest(densities: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..densities.len()).collect();
    order.sort_by(|&a, &b| densities[a].total_cmp(&densities[b]).then(a.cmp(&b)));
    order.truncate(count);
    order
}

/// Low-likelihood draws for one class. `epsilon` is the largest selected
/// density, so every selected point lies in the sublevel set at `epsilon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierBatch {
    pub class: usize,
    pub vectors: Vec<Vec<f64>>,
    pub densities: Vec<f64>,
    pub epsilon: f64,
}

pub fn sample_outliers(
    model: &GaussianModel,
    class: usize,
    sample_size: usize,
    selection_count: usize,
    seed: u64,
) -> Result<OutlierBatch> {
    if class >= model.classes() {
        return Err(Error::Range(format!("model has no class {class}")));
    }
    if selection_count == 0 || selection_count > sample_size {
        return Err(Error::Config(format!(
            "selection count {selection_count} must lie in 1..={sample_size}"
        )));
    }
    let cand = model.sample_candidates(class, sample_size, seed);
    let picked = select_lowest(&cand.densities, selection_count);
    let densities: Vec<f64> = picked.iter().map(|&i| cand.densities[i]).collect();
    Ok(OutlierBatch {
        class,
        vectors: picked.iter().map(|&i| cand.point(i).to_vec()).collect(),
        epsilon: *densities.last().expect("selection is nonempty"),
        densities,
    })
}

/// Which pixels of a logit map are overwritten, and with what.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Substitution {
    /// (pixel index, replacement vector), sorted by pixel.
    pub entries: Vec<(usize, Vec<f64>)>,
}

impl Substitution {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn apply(&self, logits: &LogitMap) -> LogitMap {
        let mut out = logits.clone();
        for (p, v) in &self.entries {
            out.pixel_mut(*p).copy_from_slice(v);
        }
        out
    }

    /// Per-pixel flag: true where the logits were replaced.
    pub fn replaced(&self, pixels: usize) -> Vec<bool> {
        let mut flags = vec![false; pixels];
        for (p, _) in &self.entries {
            flags[*p] = true;
        }
        flags
    }
}

/// Chooses `round(fraction * n_k)` pixels of each class `k` (at least one
/// when `fraction > 0` and the class is present) and assigns them the
/// class's outlier vectors in order, cycling when the batch runs out.
/// Classes whose batch slot is `None` are left untouched.
pub fn plan_substitution(
    target: &MaskMap,
    batches: &[Option<OutlierBatch>],
    fraction: f64,
    seed: u64,
) -> Result<Substitution> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!(
            "substitution fraction {fraction} outside [0, 1]"
        )));
    }
    let mut entries = Vec::new();
    if fraction == 0.0 {
        return Ok(Substitution { entries });
    }
    for (class, batch) in batches.iter().enumerate() {
        let Some(batch) = batch else { continue };
        let pixels: Vec<usize> = target
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, &l)| usize::from(l) == class)
            .map(|(i, _)| i)
            .collect();
        if pixels.is_empty() {
            continue;
        }
        if batch.vectors.is_empty() {
            return Err(Error::Empty(format!(
                "class {class} is present but its outlier batch is empty"
            )));
        }
        let count = ((fraction * pixels.len() as f64).round() as usize).clamp(1, pixels.len());
        let mut rng = rng_for(seed, &[class as u64]);
        for (n, pick) in index::sample(&mut rng, pixels.len(), count).into_iter().enumerate() {
            entries.push((pixels[pick], batch.vectors[n % batch.vectors.len()].clone()));
        }
    }
    entries.sort_by_key(|(p, _)| *p);
    Ok(Substitution { entries })
}

/// Copy of `logits` with a seeded subset of pixels replaced by outliers.
pub fn build_synthetic_map(
    logits: &LogitMap,
    target: &MaskMap,
    batches: &[Option<OutlierBatch>],
    fraction: f64,
    seed: u64,
) -> Result<LogitMap> {
    Ok(plan_substitution(target, batches, fraction, seed)?.apply(logits))
}
