use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageReader};

use super::{Image, MaskMap};
use crate::error::{Error, Result};

fn decode(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn unsupported(path: &Path, img: &DynamicImage) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        reason: format!(
            "unsupported pixel format {:?}; expected 8-bit gray or RGB",
            img.color()
        ),
    }
}

/// Reads an 8-bit gray or RGB PNG/PGM/PPM, scaling intensities by 1/255.
/// Sixteen-bit and alpha images are rejected.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let img = decode(path)?;
    let (h, w) = (img.height() as usize, img.width() as usize);
    let (channels, raw) = match img {
        DynamicImage::ImageLuma8(buf) => (1, buf.into_raw()),
        DynamicImage::ImageRgb8(buf) => (3, buf.into_raw()),
        other => return Err(unsupported(path, &other)),
    };
    let data = raw.into_iter().map(|b| f64::from(b) / 255.0).collect();
    Image::new(h, w, channels, data)
}

/// Loads a single-channel mask. For two classes any nonzero pixel becomes
/// foreground; otherwise raw values are labels and must be below `classes`.
pub fn load_mask(path: impl AsRef<Path>, classes: usize) -> Result<MaskMap> {
    load_mask_with(path, classes, classes == 2)
}

pub fn load_mask_with(path: impl AsRef<Path>, classes: usize, binarize: bool) -> Result<MaskMap> {
    let path = path.as_ref();
    let img = decode(path)?;
    let (h, w) = (img.height() as usize, img.width() as usize);
    let raw = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw(),
        other => return Err(unsupported(path, &other)),
    };
    let labels = if binarize {
        raw.into_iter().map(|v| u8::from(v != 0)).collect()
    } else {
        if let Some(v) = raw.iter().find(|&&v| usize::from(v) >= classes) {
            return Err(Error::Range(format!(
                "{}: mask value {v} not below class count {classes}",
                path.display()
            )));
        }
        raw
    };
    MaskMap::new(h, w, labels)
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub(crate) fn write_8bit(
    path: &Path,
    width: usize,
    height: usize,
    channels: usize,
    bytes: &[u8],
) -> Result<()> {
    let color = match channels {
        1 => ExtendedColorType::L8,
        3 => ExtendedColorType::Rgb8,
        _ => unreachable!("images have 1 or 3 channels"),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let out = BufWriter::new(file);
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let (w, h) = (width as u32, height as u32);
    let res = match ext.as_deref() {
        Some("pgm") | Some("ppm") | Some("pnm") => {
            let subtype = if channels == 1 {
                PnmSubtype::Graymap(SampleEncoding::Binary)
            } else {
                PnmSubtype::Pixmap(SampleEncoding::Binary)
            };
            PnmEncoder::new(out)
                .with_subtype(subtype)
                .write_image(bytes, w, h, color)
        }
        Some("png") => image::codecs::png::PngEncoder::new(out).write_image(bytes, w, h, color),
        _ => {
            return Err(Error::Encode {
                path: path.to_path_buf(),
                reason: "extension must be .png, .pgm or .ppm".into(),
            })
        }
    };
    res.map_err(|e| Error::Encode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes an image as 8-bit PNG or binary PNM, chosen by extension.
pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = image.data().iter().map(|&v| quantize(v)).collect();
    write_8bit(
        path.as_ref(),
        image.width(),
        image.height(),
        image.channels(),
        &bytes,
    )
}

/// Writes a mask as an 8-bit single-channel image. Binary masks are stored
/// as 0/255, multi-class masks as raw label values.
pub fn save_mask(mask: &MaskMap, path: impl AsRef<Path>, classes: usize) -> Result<()> {
    let bytes: Vec<u8> = if classes == 2 {
        mask.labels().iter().map(|&l| if l != 0 { 255 } else { 0 }).collect()
    } else {
        mask.labels().to_vec()
    };
    write_8bit(path.as_ref(), mask.width(), mask.height(), 1, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_pgm(path: &Path, w: usize, h: usize, maxval: u32, body: &[u8]) {
        let mut bytes = format!("P5\n{w} {h}\n{maxval}\n").into_bytes();
        bytes.extend_from_slice(body);
        std::fs::write(path, bytes).unwrap();
    }

    #[test]
    fn pgm_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        write_pgm(&p, 2, 2, 255, &[0, 255, 128, 64]);
        let img = load_image(&p).unwrap();
        assert_eq!(img.channels(), 1);
        assert_eq!(img.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn sixteen_bit_is_rejected_naming_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("deep.pgm");
        write_pgm(&p, 1, 1, 65535, &[0x12, 0x34]);
        let err = load_image(&p).unwrap_err();
        assert!(matches!(err, Error::Decode { .. }));
        assert!(err.to_string().contains("deep.pgm"));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            load_image("/nonexistent/x.png"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn rgb_png_shape() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgb.png");
        let data: Vec<f64> = (0..224 * 224 * 3).map(|i| (i % 256) as f64 / 255.0).collect();
        let img = Image::new(224, 224, 3, data).unwrap();
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.channels(), 3);
        assert_eq!(back.data().len(), 224 * 224 * 3);
        assert_eq!(back, img);
    }

    #[test]
    fn mask_binarization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        write_8bit(&p, 4, 1, 1, &[0, 255, 2, 0]).unwrap();
        let m = load_mask(&p, 2).unwrap();
        assert_eq!(m.labels(), &[0, 1, 1, 0]);

        let strict = load_mask_with(&p, 2, false).unwrap_err();
        assert!(matches!(strict, Error::Range(_)));

        let z = dir.path().join("z.png");
        write_8bit(&z, 3, 2, 1, &[0; 6]).unwrap();
        assert_eq!(load_mask(&z, 2).unwrap().foreground_count(), 0);
    }

    #[test]
    fn multiclass_mask_keeps_raw_labels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m3.png");
        let m = MaskMap::new(1, 3, vec![0, 1, 2]).unwrap();
        save_mask(&m, &p, 3).unwrap();
        assert_eq!(load_mask(&p, 3).unwrap(), m);
    }

    #[test]
    fn rgb_mask_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgb.png");
        write_8bit(&p, 1, 1, 3, &[1, 2, 3]).unwrap();
        assert!(matches!(load_mask(&p, 2), Err(Error::Decode { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn codec_round_trip(
            h in 1usize..12,
            w in 1usize..12,
            rgb in any::<bool>(),
            pgm in any::<bool>(),
            seed in any::<u64>(),
        ) {
            let channels = if rgb { 3 } else { 1 };
            let mut s = seed;
            let bytes: Vec<u8> = (0..h * w * channels)
                .map(|_| { s = crate::rng::derive_seed(s, &[]); (s >> 56) as u8 })
                .collect();
            let dir = tempfile::tempdir().unwrap();
            let ext = match (pgm, rgb) { (true, true) => "ppm", (true, false) => "pgm", _ => "png" };
            let p = dir.path().join(format!("img.{ext}"));
            write_8bit(&p, w, h, channels, &bytes).unwrap();
            let first = load_image(&p).unwrap();
            save_image(&first, &p).unwrap();
            let second = load_image(&p).unwrap();
            prop_assert_eq!(&first, &second);

            let mask = MaskMap::new(h, w, bytes[..h * w].iter().map(|b| b & 1).collect()).unwrap();
            let mp = dir.path().join("mask.png");
            save_mask(&mask, &mp, 2).unwrap();
            prop_assert_eq!(load_mask(&mp, 2).unwrap(), mask);
        }
    }
}
