use std::path::Path;

use super::codec::{quantize, write_8bit};
use super::{Image, MaskMap};
use crate::error::{Error, Result};

pub const OVERLAY_BLEND: f64 = 0.5;

const RED: [f64; 3] = [1.0, 0.0, 0.0];

/// RGB rendering of `image` with foreground pixels alpha-blended toward red.
pub fn overlay(image: &Image, mask: &MaskMap) -> Result<Image> {
    if image.height() != mask.height() || image.width() != mask.width() {
        return Err(Error::Shape(format!(
            "image is {}x{}, mask is {}x{}",
            image.height(),
            image.width(),
            mask.height(),
            mask.width()
        )));
    }
    let mut data = Vec::with_capacity(image.height() * image.width() * 3);
    for r in 0..image.height() {
        for c in 0..image.width() {
            let fg = mask.is_foreground(r, c);
            for ch in 0..3 {
                let base = if image.channels() == 1 {
                    image.get(r, c, 0)
                } else {
                    image.get(r, c, ch)
                };
                data.push(if fg {
                    (1.0 - OVERLAY_BLEND) * base + OVERLAY_BLEND * RED[ch]
                } else {
                    base
                });
            }
        }
    }
    Image::new(image.height(), image.width(), 3, data)
}

/// Writes the overlay as an 8-bit RGB PNG.
pub fn save_overlay(image: &Image, mask: &MaskMap, path: impl AsRef<Path>) -> Result<()> {
    let rgb = overlay(image, mask)?;
    let bytes: Vec<u8> = rgb.data().iter().map(|&v| quantize(v)).collect();
    write_8bit(path.as_ref(), rgb.width(), rgb.height(), 3, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::load_image;

    #[test]
    fn empty_mask_is_identity() {
        let img = Image::new(2, 2, 1, vec![0.0, 0.2, 0.4, 1.0]).unwrap();
        let out = overlay(&img, &MaskMap::zeros(2, 2)).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                for ch in 0..3 {
                    assert_eq!(out.get(r, c, ch), img.get(r, c, 0));
                }
            }
        }
    }

    #[test]
    fn full_mask_on_white() {
        let img = Image::filled(3, 3, 3, 1.0).unwrap();
        let mask = MaskMap::from_fn(3, 3, |_, _| true);
        let out = overlay(&img, &mask).unwrap();
        for px in out.data().chunks(3) {
            assert_eq!(px, &[1.0, 0.5, 0.5]);
        }
    }

    #[test]
    fn counts_blended_pixels_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ov.png");
        let img = Image::filled(4, 4, 1, 0.4).unwrap();
        let mut mask = MaskMap::zeros(4, 4);
        mask.labels_mut()[5] = 1;
        mask.labels_mut()[10] = 1;
        save_overlay(&img, &mask, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.channels(), 3);
        let changed = back
            .data()
            .chunks(3)
            .filter(|px| px[0] != px[1] || px[1] != px[2])
            .count();
        assert_eq!(changed, 2);
    }

    #[test]
    fn shape_mismatch() {
        let img = Image::filled(2, 2, 1, 0.0).unwrap();
        assert!(matches!(
            overlay(&img, &MaskMap::zeros(2, 3)),
            Err(Error::Shape(_))
        ));
    }
}
