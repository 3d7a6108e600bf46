//! Square patch planning, patch extraction for augmentation, maskless-patch
//! pruning, train/test splitting, and average-pooled stitching of per-tile
//! probabilities.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{save_image, save_mask, Image, MaskMap};
use crate::rng::rng_for;

/// Overlap ratio used when cutting training patches.
pub const TRAIN_OVERLAP: f64 = 0.35;
/// Patch side used at inference.
pub const INFER_PATCH: usize = 224;
/// Overlap margin, in pixels, between neighbouring inference tiles.
pub const INFER_MARGIN: usize = 56;
/// Patch sides used for augmentation.
pub const AUGMENT_SIZES: [usize; 5] = [224, 448, 1000, 1500, 2000];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TileRect {
    pub row0: usize,
    pub col0: usize,
    pub size: usize,
}

impl TileRect {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row0 && row < self.row0 + self.size && col >= self.col0 && col < self.col0 + self.size
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilePlan {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub rects: Vec<TileRect>,
}

/// Starts along one axis: `0, stride, 2*stride, ...`, with the first start
/// past `extent - patch` clamped to it and enumeration stopping there.
pub fn axis_starts(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = extent - patch;
    let mut starts = Vec::new();
    let mut s = 0;
    loop {
        if s >= last {
            starts.push(last);
            break;
        }
        starts.push(s);
        s += stride;
    }
    starts
}

pub fn plan_tiles(height: usize, width: usize, patch: usize, stride: usize) -> Result<TilePlan> {
    if patch > height.min(width) {
        return Err(Error::Tiling(format!(
            "patch {patch} exceeds {height}x{width} image"
        )));
    }
    if stride == 0 || stride > patch {
        return Err(Error::Tiling(format!(
            "stride {stride} must lie in 1..={patch}"
        )));
    }
    let rows = axis_starts(height, patch, stride);
    let cols = axis_starts(width, patch, stride);
    let rects = rows
        .iter()
        .flat_map(|&row0| {
            cols.iter().map(move |&col0| TileRect {
                row0,
                col0,
                size: patch,
            })
        })
        .collect();
    Ok(TilePlan {
        image_height: height,
        image_width: width,
        patch_size: patch,
        stride,
        rects,
    })
}

/// Stride for a given overlap ratio, rounded down (never below 1).
pub fn overlap_stride(patch: usize, overlap: f64) -> usize {
    ((patch as f64 * (1.0 - overlap)).floor() as usize).max(1)
}

/// Stride leaving `margin` pixels shared by neighbouring tiles.
pub fn margin_stride(patch: usize, margin: usize) -> usize {
    patch.saturating_sub(margin).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PatchOrigin {
    Tile(TileRect),
    /// The full, undivided source image.
    Whole,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub source: String,
    pub origin: PatchOrigin,
    pub image: Image,
    pub mask: MaskMap,
}

impl Patch {
    pub fn has_foreground(&self) -> bool {
        self.mask.labels().iter().any(|&l| l != 0)
    }

    /// `<source>_<row0>_<col0>_<size>.png`, or `<source>_whole.png`.
    pub fn file_name(&self) -> String {
        match self.origin {
            PatchOrigin::Tile(r) => format!("{}_{}_{}_{}.png", self.source, r.row0, r.col0, r.size),
            PatchOrigin::Whole => format!("{}_whole.png", self.source),
        }
    }
}

/// Cuts overlapping patches of every size that fits, then appends the whole
/// image. Sizes larger than the image are skipped.
pub fn extract_patches(
    source: &str,
    image: &Image,
    mask: &MaskMap,
    sizes: &[usize],
    overlap: f64,
) -> Result<Vec<Patch>> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap {overlap} outside [0, 1)")));
    }
    if sizes.is_empty() {
        return Err(Error::Config("no patch sizes given".into()));
    }
    if image.height() != mask.height() || image.width() != mask.width() {
        return Err(Error::Shape(format!("image and mask of {source} differ in size")));
    }
    let mut out = Vec::new();
    for &size in sizes {
        if size == 0 || size > image.height().min(image.width()) {
            continue;
        }
        let plan = plan_tiles(
            image.height(),
            image.width(),
            size,
            overlap_stride(size, overlap),
        )?;
        for rect in plan.rects {
            out.push(Patch {
                source: source.to_string(),
                origin: PatchOrigin::Tile(rect),
                image: image.crop(&rect)?,
                mask: mask.crop(&rect)?,
            });
        }
    }
    out.push(Patch {
        source: source.to_string(),
        origin: PatchOrigin::Whole,
        image: image.clone(),
        mask: mask.clone(),
    });
    Ok(out)
}

/// Keeps patches containing at least one foreground pixel, in order.
pub fn prune_maskless(patches: Vec<Patch>) -> Vec<Patch> {
    patches.into_iter().filter(Patch::has_foreground).collect()
}

/// Seeded shuffle, then the first `round(fraction * n)` items go to train.
pub fn split_dataset<T>(items: Vec<T>, train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.is_empty() {
        return Err(Error::Empty("cannot split an empty dataset".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let n_train = (train_fraction * items.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut rng_for(seed, &[]));
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(slots.len() - n_train);
    for (rank, idx) in order.into_iter().enumerate() {
        let item = slots[idx].take().expect("each index drawn once");
        if rank < n_train {
            train.push(item);
        } else {
            test.push(item);
        }
    }
    Ok((train, test))
}

/// Per-pixel class probabilities, row-major, `k` values per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    k: usize,
    probs: Vec<f64>,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, k: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != height * width * k {
            return Err(Error::Shape(format!(
                "{height}x{width}x{k} probability map needs {} values, got {}",
                height * width * k,
                probs.len()
            )));
        }
        for px in probs.chunks_exact(k) {
            let sum: f64 = px.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || px.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Range(format!("invalid probability vector {px:?}")));
            }
        }
        Ok(Self {
            height,
            width,
            k,
            probs,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.k;
        &self.probs[start..start + self.k]
    }

    /// Most probable class per pixel; ties go to the lowest class index.
    pub fn argmax(&self) -> MaskMap {
        let labels = self
            .probs
            .chunks_exact(self.k)
            .map(|px| {
                let mut best = 0;
                for (c, &p) in px.iter().enumerate().skip(1) {
                    if p > px[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        MaskMap::new(self.height, self.width, labels).expect("shape preserved")
    }

    /// Window `rows x cols` starting at `(row0, col0)`.
    pub fn crop(&self, row0: usize, col0: usize, rows: usize, cols: usize) -> ProbMap {
        let mut probs = Vec::with_capacity(rows * cols * self.k);
        for r in row0..row0 + rows {
            let start = (r * self.width + col0) * self.k;
            probs.extend_from_slice(&self.probs[start..start + cols * self.k]);
        }
        ProbMap {
            height: rows,
            width: cols,
            k: self.k,
            probs,
        }
    }
}

/// Average-pools overlapping tile predictions into one map. Tiles are reduced
/// in sorted rect order, so the result does not depend on input order.
pub fn stitch(tiles: &[(TileRect, ProbMap)], height: usize, width: usize, k: usize) -> Result<ProbMap> {
    let mut order: Vec<usize> = (0..tiles.len()).collect();
    order.sort_by_key(|&i| tiles[i].0);

    let mut sums = vec![0.0; height * width * k];
    let mut counts = vec![0u32; height * width];
    for i in order {
        let (rect, pm) = &tiles[i];
        if rect.row0 + rect.size > height || rect.col0 + rect.size > width {
            return Err(Error::Tiling(format!(
                "tile {rect:?} exceeds {height}x{width} image"
            )));
        }
        if pm.height != rect.size || pm.width != rect.size || pm.k != k {
            return Err(Error::Shape(format!(
                "tile {rect:?} carries a {}x{}x{} map",
                pm.height, pm.width, pm.k
            )));
        }
        for r in 0..rect.size {
            let dst_row = (rect.row0 + r) * width + rect.col0;
            let src = &pm.probs[r * rect.size * k..(r + 1) * rect.size * k];
            let dst = &mut sums[dst_row * k..(dst_row + rect.size) * k];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
            for c in &mut counts[dst_row..dst_row + rect.size] {
                *c += 1;
            }
        }
    }
    if let Some(p) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Coverage {
            row: p / width,
            col: p % width,
        });
    }
    for (px, &n) in sums.chunks_exact_mut(k).zip(&counts) {
        let n = f64::from(n);
        for v in px {
            *v /= n;
        }
    }
    Ok(ProbMap {
        height,
        width,
        k,
        probs: sums,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One line of a patch manifest (line-delimited JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub source: String,
    /// `None` for whole-image items.
    pub rect: Option<TileRect>,
    pub height: usize,
    pub width: usize,
    pub split: Split,
    pub image: PathBuf,
    pub mask: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Writes `images/` and `masks/` PNG pairs plus `manifest.jsonl` under `dir`.
pub fn materialize(dir: &Path, train: &[Patch], test: &[Patch]) -> Result<Vec<ManifestRecord>> {
    for sub in ["images", "masks"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut records = Vec::with_capacity(train.len() + test.len());
    let tagged = train
        .iter()
        .map(|p| (p, Split::Train))
        .chain(test.iter().map(|p| (p, Split::Test)));
    for (patch, split) in tagged {
        let name = patch.file_name();
        let image = PathBuf::from("images").join(&name);
        let mask = PathBuf::from("masks").join(&name);
        save_image(&patch.image, dir.join(&image))?;
        save_mask(&patch.mask, dir.join(&mask), 2)?;
        records.push(ManifestRecord {
            source: patch.source.clone(),
            rect: match patch.origin {
                PatchOrigin::Tile(r) => Some(r),
                PatchOrigin::Whole => None,
            },
            height: patch.image.height(),
            width: patch.image.width(),
            split,
            image,
            mask,
        });
    }
    write_manifest(&dir.join(MANIFEST_FILE), &records)?;
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for rec in records {
        let line = serde_json::to_string(rec).expect("manifest records serialize");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", i + 1),
        })?;
        records.push(rec);
    }
    Ok(records)
}
