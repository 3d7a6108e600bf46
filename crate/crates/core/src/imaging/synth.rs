//! Synthetic irregular-cell images: star-shaped bodies with radial jitter and
//! elongated neurite-like spurs, rendered on a flat background, then corrupted
//! with Gaussian noise and a box blur.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Image, MaskMap};
use crate::error::{Error, Result};
use crate::rng::rng_for;

const MIN_IMAGE_SIZE: usize = 16;
const BACKGROUND: f64 = 0.2;
const PLACEMENT_ATTEMPTS: usize = 200;
/// Minimum pixel-center separation between the bounding discs of two cells.
const PLACEMENT_GAP: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub cell_count_range: (usize, usize),
    pub protrusion_count_range: (usize, usize),
    pub noise_sigma: f64,
    pub blur_radius: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            cell_count_range: (2, 4),
            protrusion_count_range: (0, 3),
            noise_sigma: 0.08,
            blur_radius: 1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < MIN_IMAGE_SIZE {
            return Err(Error::Config(format!(
                "image_size {} is below the {MIN_IMAGE_SIZE} px needed for one cell",
                self.image_size
            )));
        }
        let (cmin, cmax) = self.cell_count_range;
        let (pmin, pmax) = self.protrusion_count_range;
        if cmin > cmax || pmin > pmax {
            return Err(Error::Config("range minimum exceeds maximum".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spur {
    pub angle: f64,
    pub length: f64,
    pub half_width: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub center: (f64, f64),
    /// Polygon vertices in absolute (row, col) coordinates, ordered by angle.
    pub vertices: Vec<(f64, f64)>,
    pub spurs: Vec<Spur>,
    pub intensity: f64,
    pub bounding_radius: f64,
}

impl Cell {
    fn contains(&self, y: f64, x: f64) -> bool {
        point_in_polygon(&self.vertices, y, x)
            || self.spurs.iter().any(|s| {
                let end = (
                    self.center.0 + s.length * s.angle.sin(),
                    self.center.1 + s.length * s.angle.cos(),
                );
                segment_distance((y, x), self.center, end) <= s.half_width
            })
    }
}

/// Geometry behind one generated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthLayout {
    pub cells: Vec<Cell>,
    /// True when every cell's bounding disc is separated from every other's,
    /// in which case the mask has exactly one component per cell.
    pub disjoint: bool,
}

impl SynthLayout {
    /// Index of the topmost cell covering each pixel.
    pub fn owner_map(&self, size: usize) -> Vec<Option<usize>> {
        let mut owners = vec![None; size * size];
        for (i, cell) in self.cells.iter().enumerate() {
            let (r0, r1, c0, c1) = bbox(cell, size);
            for r in r0..r1 {
                for c in c0..c1 {
                    if cell.contains(r as f64, c as f64) {
                        owners[r * size + c] = Some(i);
                    }
                }
            }
        }
        owners
    }
}

fn bbox(cell: &Cell, size: usize) -> (usize, usize, usize, usize) {
    let lo = |v: f64| (v - cell.bounding_radius).floor().max(0.0) as usize;
    let hi = |v: f64| ((v + cell.bounding_radius).ceil() as usize + 1).min(size);
    (
        lo(cell.center.0),
        hi(cell.center.0),
        lo(cell.center.1),
        hi(cell.center.1),
    )
}

fn point_in_polygon(poly: &[(f64, f64)], y: f64, x: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (yi, xi) = poly[i];
        let (yj, xj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dy + (p.1 - a.1) * dx) / len2).clamp(0.0, 1.0)
    };
    let (qy, qx) = (a.0 + t * dy, a.1 + t * dx);
    ((p.0 - qy).powi(2) + (p.1 - qx).powi(2)).sqrt()
}

fn random_cell<R: Rng>(rng: &mut R, cfg: &SynthConfig) -> Cell {
    let size = cfg.image_size as f64;
    let radius = rng.random_range(0.06..0.12) * size;
    let n_vertices = rng.random_range(12..=20);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut offsets = Vec::with_capacity(n_vertices);
    for i in 0..n_vertices {
        let angle = phase + std::f64::consts::TAU * i as f64 / n_vertices as f64;
        let r = radius * (1.0 + rng.random_range(-0.25..0.25));
        offsets.push((angle, r));
    }
    let (pmin, pmax) = cfg.protrusion_count_range;
    let n_spurs = rng.random_range(pmin..=pmax);
    let spurs: Vec<Spur> = (0..n_spurs)
        .map(|_| Spur {
            angle: rng.random_range(0.0..std::f64::consts::TAU),
            length: radius * rng.random_range(1.4..2.0),
            half_width: rng.random_range(1.2..1.8),
        })
        .collect();
    let body = offsets.iter().map(|&(_, r)| r).fold(0.0, f64::max);
    let reach = spurs
        .iter()
        .map(|s| s.length + s.half_width)
        .fold(body, f64::max);
    let intensity = rng.random_range(0.55..0.9);
    Cell {
        center: (0.0, 0.0),
        vertices: offsets
            .into_iter()
            .map(|(a, r)| (r * a.sin(), r * a.cos()))
            .collect(),
        spurs,
        intensity,
        bounding_radius: reach + 1.0,
    }
}

fn layout<R: Rng>(rng: &mut R, cfg: &SynthConfig) -> SynthLayout {
    let (cmin, cmax) = cfg.cell_count_range;
    let n_cells = rng.random_range(cmin..=cmax);
    let size = cfg.image_size as f64;
    let mut cells: Vec<Cell> = Vec::with_capacity(n_cells);
    let mut disjoint = true;
    for _ in 0..n_cells {
        let mut cell = random_cell(rng, cfg);
        let mut placed = None;
        let mut last = (0.0, 0.0);
        for _ in 0..PLACEMENT_ATTEMPTS {
            let c = (rng.random_range(0.0..size), rng.random_range(0.0..size));
            last = c;
            let clear = cells.iter().all(|o| {
                let d = ((o.center.0 - c.0).powi(2) + (o.center.1 - c.1).powi(2)).sqrt();
                d >= o.bounding_radius + cell.bounding_radius + PLACEMENT_GAP
            });
            if clear {
                placed = Some(c);
                break;
            }
        }
        let center = placed.unwrap_or_else(|| {
            disjoint = false;
            last
        });
        cell.center = center;
        for v in &mut cell.vertices {
            v.0 += center.0;
            v.1 += center.1;
        }
        cells.push(cell);
    }
    SynthLayout { cells, disjoint }
}

fn box_blur(data: &[f64], size: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return data.to_vec();
    }
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for a in 0..size {
            for b in 0..size {
                let lo = b.saturating_sub(radius);
                let hi = (b + radius).min(size - 1);
                let sum: f64 = (lo..=hi)
                    .map(|t| {
                        if horizontal {
                            src[a * size + t]
                        } else {
                            src[t * size + a]
                        }
                    })
                    .sum();
                let idx = if horizontal { a * size + b } else { b * size + a };
                out[idx] = sum / (hi - lo + 1) as f64;
            }
        }
        out
    };
    let h = pass(data, true);
    pass(&h, false)
}

/// Renders sample `index` of the dataset described by `cfg`.
pub fn render_sample(cfg: &SynthConfig, index: usize) -> Result<(Image, MaskMap, SynthLayout)> {
    cfg.validate()?;
    let size = cfg.image_size;
    let mut rng = rng_for(cfg.seed, &[index as u64]);
    let layout = layout(&mut rng, cfg);
    let owners = layout.owner_map(size);

    let mut intensity: Vec<f64> = owners
        .iter()
        .map(|o| o.map_or(BACKGROUND, |i| layout.cells[i].intensity))
        .collect();
    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma)
            .map_err(|e| Error::Config(format!("noise_sigma: {e}")))?;
        for v in &mut intensity {
            *v += noise.sample(&mut rng);
        }
    }
    let data = box_blur(&intensity, size, cfg.blur_radius)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    let image = Image::new(size, size, 1, data)?;
    let labels = owners.iter().map(|o| u8::from(o.is_some())).collect();
    let mask = MaskMap::new(size, size, labels)?;
    Ok((image, mask, layout))
}

/// Generates `n` deterministic (image, mask) pairs; sample `i` depends only
/// on `cfg` and `i`.
pub fn generate_synthetic_dataset(cfg: &SynthConfig, n: usize) -> Result<Vec<(Image, MaskMap)>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    (0..n)
        .map(|i| render_sample(cfg, i).map(|(img, mask, _)| (img, mask)))
        .collect()
}
