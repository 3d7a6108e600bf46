//! Brute-force oracles shared by the integration tests. Each one is written
//! from the definition, independently of the library code it checks.

#![allow(dead_code)]

use outlierseg_core::imaging::{Image, MaskMap};
use outlierseg_core::rng::rng_for;
use rand::Rng;

pub fn random_image(h: usize, w: usize, channels: usize, seed: u64) -> Image {
    let mut rng = rng_for(seed, &[0xbeef]);
    Image::new(h, w, channels, (0..h * w * channels).map(|_| rng.random::<f64>()).collect()).unwrap()
}

/// Random binary mask: independent pixels, a filled rectangle, or empty.
pub fn random_mask(h: usize, w: usize, rng: &mut impl Rng) -> MaskMap {
    match rng.random_range(0..10) {
        0 => MaskMap::zeros(h, w),
        1..=4 => {
            let density = rng.random_range(0.05..0.95);
            let bits: Vec<bool> = (0..h * w).map(|_| rng.random_bool(density)).collect();
            MaskMap::from_fn(h, w, |r, c| bits[r * w + c])
        }
        _ => {
            let (r0, c0) = (rng.random_range(0..h), rng.random_range(0..w));
            let (r1, c1) = (rng.random_range(r0..h), rng.random_range(c0..w));
            MaskMap::from_fn(h, w, |r, c| (r0..=r1).contains(&r) && (c0..=c1).contains(&c))
        }
    }
}

/// (tp, fp, fn) by direct counting.
pub fn brute_counts(pred: &MaskMap, gt: &MaskMap) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for r in 0..gt.height() {
        for c in 0..gt.width() {
            let (p, g) = (pred.get(r, c) != 0, gt.get(r, c) != 0);
            tp += usize::from(p && g);
            fp += usize::from(p && !g);
            fn_ += usize::from(!p && g);
        }
    }
    (tp, fp, fn_)
}

fn brute_boundary(m: &MaskMap) -> Vec<(i64, i64)> {
    let (h, w) = (m.height() as i64, m.width() as i64);
    let fg = |r: i64, c: i64| r >= 0 && c >= 0 && r < h && c < w && m.get(r as usize, c as usize) != 0;
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            // Outside the image counts as background.
            if fg(r, c) && [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)].iter().any(|&(a, b)| !fg(a, b)) {
                out.push((r, c));
            }
        }
    }
    out
}

/// All-pairs pooled boundary distances, 95th percentile by nearest rank.
pub fn brute_hd95(pred: &MaskMap, gt: &MaskMap) -> Option<f64> {
    let (a, b) = (brute_boundary(pred), brute_boundary(gt));
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let nearest = |p: &(i64, i64), set: &[(i64, i64)]| {
        set.iter()
            .map(|q| (((p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)) as f64).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let mut pool: Vec<f64> = a.iter().map(|p| nearest(p, &b)).chain(b.iter().map(|p| nearest(p, &a))).collect();
    pool.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let n = pool.len();
    let rank = (95 * n).div_ceil(100);
    Some(pool[rank - 1])
}

/// Per-class means and the pooled covariance (divided by the total count),
/// two-pass, from plain lists of vectors.
pub fn brute_moments(classes: &[Vec<Vec<f64>>], dim: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let means: Vec<Vec<f64>> = classes
        .iter()
        .map(|vs| {
            (0..dim)
                .map(|d| vs.iter().map(|v| v[d]).sum::<f64>() / vs.len() as f64)
                .collect()
        })
        .collect();
    let total: usize = classes.iter().map(Vec::len).sum();
    let mut cov = vec![0.0; dim * dim];
    for (vs, mu) in classes.iter().zip(&means) {
        for v in vs {
            for i in 0..dim {
                for j in 0..dim {
                    cov[i * dim + j] += (v[i] - mu[i]) * (v[j] - mu[j]);
                }
            }
        }
    }
    cov.iter_mut().for_each(|x| *x /= total as f64);
    (means, cov)
}
