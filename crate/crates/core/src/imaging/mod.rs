//! Image and mask containers, 8-bit codecs, the synthetic cell generator and
//! mask overlays.

mod codec;
mod overlay;
mod synth;

pub use codec::{load_image, load_mask, load_mask_with, save_image, save_mask};
pub use overlay::{overlay, save_overlay, OVERLAY_BLEND};
pub use synth::{generate_synthetic_dataset, render_sample, SynthConfig, SynthLayout};

use crate::error::{Error, Result};
use crate::tiling::TileRect;

/// Row-major, channel-interleaved intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Range(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    /// Channel-planar copy (`C x H x W`), the layout the convolution kernels use.
    pub fn to_planar(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * self.channels];
        for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * plane + i] = v;
            }
        }
        out
    }

    pub fn crop(&self, rect: &TileRect) -> Result<Image> {
        check_rect(rect, self.height, self.width)?;
        let mut data = Vec::with_capacity(rect.size * rect.size * self.channels);
        for r in rect.row0..rect.row0 + rect.size {
            let start = (r * self.width + rect.col0) * self.channels;
            data.extend_from_slice(&self.data[start..start + rect.size * self.channels]);
        }
        Ok(Image {
            height: rect.size,
            width: rect.size,
            channels: self.channels,
            data,
        })
    }

    /// Grows the image to at least `height x width` by replicating the last
    /// row and column. Never shrinks.
    pub fn pad_edge(&self, height: usize, width: usize) -> Image {
        let h = height.max(self.height);
        let w = width.max(self.width);
        let mut data = Vec::with_capacity(h * w * self.channels);
        for r in 0..h {
            let sr = r.min(self.height - 1);
            for c in 0..w {
                let sc = c.min(self.width - 1);
                let base = (sr * self.width + sc) * self.channels;
                data.extend_from_slice(&self.data[base..base + self.channels]);
            }
        }
        Image {
            height: h,
            width: w,
            channels: self.channels,
            data,
        }
    }
}

/// Row-major class labels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl MaskMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} mask needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    /// Builds a binary mask from a foreground predicate over `(row, col)`.
    pub fn from_fn(height: usize, width: usize, mut fg: impl FnMut(usize, usize) -> bool) -> Self {
        let mut labels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                labels.push(u8::from(fg(r, c)));
            }
        }
        Self {
            height,
            width,
            labels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    #[inline]
    pub fn is_foreground(&self, row: usize, col: usize) -> bool {
        self.get(row, col) != 0
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    pub fn same_shape(&self, other: &MaskMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Checks every label is below `classes`.
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| usize::from(l) >= classes) {
            Some(l) => Err(Error::Range(format!(
                "label {l} not below class count {classes}"
            ))),
            None => Ok(()),
        }
    }

    pub fn crop(&self, rect: &TileRect) -> Result<MaskMap> {
        check_rect(rect, self.height, self.width)?;
        let mut labels = Vec::with_capacity(rect.size * rect.size);
        for r in rect.row0..rect.row0 + rect.size {
            let start = r * self.width + rect.col0;
            labels.extend_from_slice(&self.labels[start..start + rect.size]);
        }
        Ok(MaskMap {
            height: rect.size,
            width: rect.size,
            labels,
        })
    }
}

fn check_rect(rect: &TileRect, height: usize, width: usize) -> Result<()> {
    if rect.row0 + rect.size > height || rect.col0 + rect.size > width {
        return Err(Error::Shape(format!(
            "rect {rect:?} exceeds {height}x{width} extent"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(Image::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Image::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(matches!(
            Image::new(1, 1, 1, vec![1.5]),
            Err(Error::Range(_))
        ));
        assert!(MaskMap::new(2, 3, vec![0; 5]).is_err());
    }

    #[test]
    fn crop_and_planar_layout() {
        let data: Vec<f64> = (0..16).map(|v| v as f64 / 15.0).collect();
        let img = Image::new(4, 4, 1, data).unwrap();
        let c = img
            .crop(&TileRect {
                row0: 1,
                col0: 2,
                size: 2,
            })
            .unwrap();
        assert_eq!(c.data(), &[6.0 / 15.0, 7.0 / 15.0, 10.0 / 15.0, 11.0 / 15.0]);

        let rgb = Image::new(1, 2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(rgb.to_planar(), vec![0.1, 0.4, 0.2, 0.5, 0.3, 0.6]);
    }

    #[test]
    fn edge_padding_replicates_border() {
        let img = Image::new(1, 2, 1, vec![0.25, 0.75]).unwrap();
        let p = img.pad_edge(3, 3);
        assert_eq!(p.height(), 3);
        assert_eq!(p.width(), 3);
        assert_eq!(p.data(), &[0.25, 0.75, 0.75, 0.25, 0.75, 0.75, 0.25, 0.75, 0.75]);
    }

    #[test]
    fn mask_validation() {
        let m = MaskMap::new(1, 3, vec![0, 1, 2]).unwrap();
        assert!(m.validate(3).is_ok());
        assert!(matches!(m.validate(2), Err(Error::Range(_))));
        assert_eq!(m.foreground_count(), 2);
    }
}
