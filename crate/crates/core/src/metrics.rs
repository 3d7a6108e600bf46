//! Binary segmentation metrics: DSC, IoU, Hausdorff distance and its 95th
//! percentile, plus image-level IoU threshold pass rates and their mean.
//!
//! Conventions: boundaries use 4-connectivity (a foreground pixel touching
//! background or the image edge), distances are Euclidean between pixel
//! centers, and the percentile uses the nearest-rank method.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::MaskMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn confusion(pred: &MaskMap, gt: &MaskMap) -> Result<ConfusionCounts> {
    if !pred.same_shape(gt) {
        return Err(Error::Shape(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

impl ConfusionCounts {
    /// Percent; two empty masks agree perfectly.
    pub fn dsc(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            100.0
        } else {
            100.0 * (2 * self.tp) as f64 / den as f64
        }
    }

    pub fn iou(&self) -> f64 {
        let den = self.tp + self.fp + self.fn_;
        if den == 0 {
            100.0
        } else {
            100.0 * self.tp as f64 / den as f64
        }
    }
}

pub fn dsc(pred: &MaskMap, gt: &MaskMap) -> Result<f64> {
    Ok(confusion(pred, gt)?.dsc())
}

pub fn iou(pred: &MaskMap, gt: &MaskMap) -> Result<f64> {
    Ok(confusion(pred, gt)?.iou())
}

/// Foreground pixels with a background 4-neighbour or on the image edge.
pub fn boundary(mask: &MaskMap) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.is_foreground(r, c) {
                continue;
            }
            let edge = r == 0 || c == 0 || r + 1 == h || c + 1 == w;
            if edge
                || !mask.is_foreground(r - 1, c)
                || !mask.is_foreground(r + 1, c)
                || !mask.is_foreground(r, c - 1)
                || !mask.is_foreground(r, c + 1)
            {
                out.push((r, c));
            }
        }
    }
    out
}

const FAR: f64 = f64::INFINITY;

/// 1-D squared distance transform of sampled function `f` (lower envelope
/// of parabolas). Entries of `f` equal to `FAR` are not sites.
fn dt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let sites: Vec<usize> = (0..n).filter(|&q| f[q] < FAR).collect();
    if sites.is_empty() {
        out.fill(FAR);
        return;
    }
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    for &q in &sites {
        let qf = q as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let pf = p as f64;
                    let s = ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf);
                    if s <= *z.last().expect("z tracks v") {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while j + 1 < v.len() && z[j + 1] < qf {
            j += 1;
        }
        let d = qf - v[j] as f64;
        *o = d * d + f[v[j]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest site.
fn squared_distance_field(h: usize, w: usize, sites: &[(usize, usize)]) -> Vec<f64> {
    let mut grid = vec![FAR; h * w];
    for &(r, c) in sites {
        grid[r * w + c] = 0.0;
    }
    let mut col_in = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            col_in[r] = grid[r * w + c];
        }
        dt_1d(&col_in, &mut col_out);
        for r in 0..h {
            grid[r * w + c] = col_out[r];
        }
    }
    let mut row_out = vec![0.0; w];
    for r in 0..h {
        dt_1d(&grid[r * w..(r + 1) * w], &mut row_out);
        grid[r * w..(r + 1) * w].copy_from_slice(&row_out);
    }
    grid
}

/// Pooled directed boundary distances (both directions), sorted ascending.
/// `None` when either mask has no foreground.
pub fn boundary_distances(pred: &MaskMap, gt: &MaskMap) -> Result<Option<Vec<f64>>> {
    if !pred.same_shape(gt) {
        return Err(Error::Shape("prediction and ground truth differ in size".into()));
    }
    let (bx, by) = (boundary(pred), boundary(gt));
    if bx.is_empty() || by.is_empty() {
        return Ok(None);
    }
    let (h, w) = (pred.height(), pred.width());
    let to_y = squared_distance_field(h, w, &by);
    let to_x = squared_distance_field(h, w, &bx);
    let mut pool: Vec<f64> = bx
        .iter()
        .map(|&(r, c)| to_y[r * w + c].sqrt())
        .chain(by.iter().map(|&(r, c)| to_x[r * w + c].sqrt()))
        .collect();
    pool.sort_by(f64::total_cmp);
    Ok(Some(pool))
}

/// Nearest-rank percentile of an ascending, nonempty list: the element at
/// one-based rank `ceil(percent * n / 100)`.
pub fn nearest_rank(sorted: &[f64], percent: usize) -> f64 {
    let n = sorted.len();
    let rank = (percent * n).div_ceil(100).clamp(1, n);
    sorted[rank - 1]
}

/// 95th-percentile boundary distance in pixels; `None` if either mask is
/// empty (the image is then skipped from HD95 aggregation).
pub fn hd95(pred: &MaskMap, gt: &MaskMap) -> Result<Option<f64>> {
    Ok(boundary_distances(pred, gt)?.map(|pool| nearest_rank(&pool, 95)))
}

/// Exact (maximum) Hausdorff distance between the two boundaries.
pub fn hausdorff(pred: &MaskMap, gt: &MaskMap) -> Result<Option<f64>> {
    Ok(boundary_distances(pred, gt)?.and_then(|pool| pool.last().copied()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub dsc: f64,
    pub hd95: Option<f64>,
    pub iou: f64,
}

pub fn evaluate_pair(id: impl Into<String>, pred: &MaskMap, gt: &MaskMap) -> Result<ImageRecord> {
    let c = confusion(pred, gt)?;
    Ok(ImageRecord {
        id: id.into(),
        dsc: c.dsc(),
        hd95: hd95(pred, gt)?,
        iou: c.iou(),
    })
}

pub const DEFAULT_IOU_THRESHOLDS: [f64; 3] = [0.5, 0.75, 0.9];

/// Thresholds 0.50, 0.55, ..., 0.95.
pub fn map_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Percent of records whose IoU reaches `100 * t`.
fn pass_rate(records: &[ImageRecord], t: f64) -> f64 {
    // Absorb representation error in 100*t (e.g. 100*0.55).
    let cut = 100.0 * t - 1e-9;
    let hits = records.iter().filter(|r| r.iou >= cut).count();
    100.0 * hits as f64 / records.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<ImageRecord>,
    pub mean_dsc: f64,
    /// Mean over images where HD95 is defined; `None` if there are none.
    pub mean_hd95: Option<f64>,
    pub hd95_skipped: usize,
    pub mean_iou: f64,
    /// `(threshold, percent of images with IoU >= threshold)`.
    pub iou_at: Vec<(f64, f64)>,
    pub map: f64,
}

impl EvalReport {
    pub fn iou_at(&self, t: f64) -> Option<f64> {
        self.iou_at
            .iter()
            .find(|(x, _)| (x - t).abs() < 1e-12)
            .map(|&(_, v)| v)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("id,dsc,hd95,iou\n");
        for r in &self.records {
            let hd = r.hd95.map_or_else(|| "SKIP".to_string(), |v| v.to_string());
            out.push_str(&format!("{},{},{},{}\n", r.id, r.dsc, hd, r.iou));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(&mut f, self).expect("report serializes");
        writeln!(f).map_err(|e| Error::io(path, e))
    }
}

pub fn aggregate(records: Vec<ImageRecord>, thresholds: &[f64]) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Empty("no images to aggregate".into()));
    }
    let n = records.len() as f64;
    let mean_dsc = records.iter().map(|r| r.dsc).sum::<f64>() / n;
    let mean_iou = records.iter().map(|r| r.iou).sum::<f64>() / n;
    let hds: Vec<f64> = records.iter().filter_map(|r| r.hd95).collect();
    let mean_hd95 = (!hds.is_empty()).then(|| hds.iter().sum::<f64>() / hds.len() as f64);
    let iou_at = thresholds.iter().map(|&t| (t, pass_rate(&records, t))).collect();
    let map_t = map_thresholds();
    let map = map_t.iter().map(|&t| pass_rate(&records, t)).sum::<f64>() / map_t.len() as f64;
    Ok(EvalReport {
        hd95_skipped: records.len() - hds.len(),
        records,
        mean_dsc,
        mean_hd95,
        mean_iou,
        iou_at,
        map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, fg: &[(usize, usize)]) -> MaskMap {
        MaskMap::from_fn(h, w, |r, c| fg.contains(&(r, c)))
    }

    #[test]
    fn confusion_example() {
        let pred = mask(1, 3, &[(0, 0), (0, 1)]);
        let gt = mask(1, 3, &[(0, 1), (0, 2)]);
        let c = confusion(&pred, &gt).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 1, fn_: 1 });
        assert_eq!(c.dsc(), 50.0);
        assert!((c.iou() - 100.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn identical_and_empty() {
        let gt = mask(4, 4, &[(1, 1), (1, 2), (2, 2)]);
        let c = confusion(&gt, &gt).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        assert_eq!(c.dsc(), 100.0);
        assert_eq!(hd95(&gt, &gt).unwrap(), Some(0.0));

        let empty = MaskMap::zeros(4, 4);
        let c = confusion(&empty, &gt).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 0, fp: 0, fn_: 3 });
        assert_eq!(c.dsc(), 0.0);
        assert_eq!(dsc(&empty, &empty).unwrap(), 100.0);
        assert_eq!(iou(&empty, &empty).unwrap(), 100.0);
        assert_eq!(hd95(&empty, &gt).unwrap(), None);
    }

    #[test]
    fn disjoint_iou_zero() {
        let a = mask(3, 3, &[(0, 0)]);
        let b = mask(3, 3, &[(2, 2)]);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn single_pixel_hd95() {
        let x = mask(5, 5, &[(0, 0)]);
        let y = mask(5, 5, &[(3, 4)]);
        let pool = boundary_distances(&x, &y).unwrap().unwrap();
        assert_eq!(pool, vec![5.0, 5.0]);
        assert_eq!(hd95(&x, &y).unwrap(), Some(5.0));
    }

    #[test]
    fn nearest_rank_positions() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 95), 19.0);
        assert_eq!(nearest_rank(&v[..1], 95), 1.0);
        assert_eq!(nearest_rank(&v[..10], 95), 10.0);
        assert_eq!(nearest_rank(&v, 100), 20.0);
    }

    #[test]
    fn interior_pixels_are_not_boundary() {
        let m = MaskMap::from_fn(5, 5, |r, c| (1..4).contains(&r) && (1..4).contains(&c));
        let b = boundary(&m);
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(2, 2)));
    }

    #[test]
    fn shape_mismatch() {
        assert!(confusion(&MaskMap::zeros(2, 2), &MaskMap::zeros(2, 3)).is_err());
    }

    fn rec(iou: f64) -> ImageRecord {
        ImageRecord {
            id: "x".into(),
            dsc: 2.0 * iou / (100.0 + iou) * 100.0,
            hd95: Some(1.0),
            iou,
        }
    }

    #[test]
    fn aggregate_thresholds() {
        let r = aggregate(vec![rec(80.0)], &DEFAULT_IOU_THRESHOLDS).unwrap();
        assert_eq!(r.iou_at(0.5), Some(100.0));
        assert_eq!(r.iou_at(0.75), Some(100.0));
        assert_eq!(r.iou_at(0.9), Some(0.0));
        // Thresholds 0.50..=0.80 pass: 7 of 10.
        assert!((r.map - 70.0).abs() < 1e-12);

        let two = aggregate(vec![rec(60.0), rec(40.0)], &DEFAULT_IOU_THRESHOLDS).unwrap();
        assert_eq!(two.iou_at(0.5), Some(50.0));

        let perfect = aggregate(vec![rec(100.0), rec(100.0)], &DEFAULT_IOU_THRESHOLDS).unwrap();
        assert_eq!(perfect.map, 100.0);

        assert!(matches!(aggregate(vec![], &[0.5]), Err(Error::Empty(_))));
    }

    #[test]
    fn boundary_threshold_is_inclusive() {
        let r = aggregate(vec![rec(55.0)], &[0.55]).unwrap();
        assert_eq!(r.iou_at(0.55), Some(100.0));
    }

    #[test]
    fn skipped_hd95_counted() {
        let mut a = rec(50.0);
        a.hd95 = None;
        let r = aggregate(vec![a, rec(70.0)], &DEFAULT_IOU_THRESHOLDS).unwrap();
        assert_eq!(r.hd95_skipped, 1);
        assert_eq!(r.mean_hd95, Some(1.0));
    }

    #[test]
    fn csv_marks_skips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        let mut a = rec(50.0);
        a.hd95 = None;
        aggregate(vec![a], &DEFAULT_IOU_THRESHOLDS).unwrap().write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("id,dsc,hd95,iou\n"));
        assert!(text.contains(",SKIP,"));
    }
}
