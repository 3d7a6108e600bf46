use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imaging::{load_image, load_mask, save_image, save_mask, Image, MaskMap};
use crate::tiling::{read_manifest, Split, MANIFEST_FILE};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub mask: MaskMap,
}

/// An ordered set of image/mask pairs. Order is significant: it fixes the
/// reduction order of training and the row order of evaluation reports.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "pgm", "ppm", "pnm"];

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        for s in &samples {
            if s.image.height() != s.mask.height() || s.image.width() != s.mask.width() {
                return Err(Error::Shape(format!(
                    "{}: image is {}x{}, mask is {}x{}",
                    s.id,
                    s.image.height(),
                    s.image.width(),
                    s.mask.height(),
                    s.mask.width()
                )));
            }
        }
        Ok(Self { samples })
    }

    pub fn from_pairs(pairs: Vec<(Image, MaskMap)>, prefix: &str) -> Result<Self> {
        Self::new(
            pairs
                .into_iter()
                .enumerate()
                .map(|(i, (image, mask))| Sample {
                    id: format!("{prefix}{i:04}"),
                    image,
                    mask,
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channels(&self) -> Option<usize> {
        self.samples.first().map(|s| s.image.channels())
    }

    /// Loads either a patch directory with a manifest (optionally filtered
    /// to one split), a manifest file directly, or a plain directory with
    /// matching `images/` and `masks/` file names.
    pub fn load(path: &Path, classes: usize, split: Option<Split>) -> Result<Self> {
        let manifest = if path.is_file() {
            Some(path.to_path_buf())
        } else {
            let m = path.join(MANIFEST_FILE);
            m.is_file().then_some(m)
        };
        let ds = match manifest {
            Some(m) => Self::load_manifest(&m, classes, split)?,
            None => Self::load_dir(path, classes)?,
        };
        if ds.is_empty() {
            return Err(Error::Empty(format!("no samples under {}", path.display())));
        }
        Ok(ds)
    }

    fn load_manifest(path: &Path, classes: usize, split: Option<Split>) -> Result<Self> {
        let root = path.parent().unwrap_or(Path::new("."));
        let mut samples = Vec::new();
        for rec in read_manifest(path)? {
            if split.is_some_and(|s| s != rec.split) {
                continue;
            }
            let image = load_image(root.join(&rec.image))?;
            let mask = load_mask(root.join(&rec.mask), classes)?;
            let id = rec
                .image
                .file_stem()
                .map_or_else(|| rec.source.clone(), |s| s.to_string_lossy().into_owned());
            samples.push(Sample { id, image, mask });
        }
        Self::new(samples)
    }

    fn load_dir(dir: &Path, classes: usize) -> Result<Self> {
        let images = dir.join("images");
        let masks = dir.join("masks");
        let mut files: Vec<PathBuf> = std::fs::read_dir(&images)
            .map_err(|e| Error::io(&images, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect();
        files.sort();
        let mut samples = Vec::with_capacity(files.len());
        for file in files {
            let stem = file
                .file_stem()
                .expect("listed files have names")
                .to_string_lossy()
                .into_owned();
            let mask_path = IMAGE_EXTENSIONS
                .iter()
                .map(|ext| masks.join(format!("{stem}.{ext}")))
                .find(|p| p.is_file())
                .ok_or_else(|| Error::Decode {
                    path: file.clone(),
                    reason: "no mask with the same name under masks/".into(),
                })?;
            samples.push(Sample {
                image: load_image(&file)?,
                mask: load_mask(&mask_path, classes)?,
                id: stem,
            });
        }
        Self::new(samples)
    }

    /// Writes `images/<id>.png` and `masks/<id>.png`.
    pub fn save_dir(&self, dir: &Path, classes: usize) -> Result<()> {
        for sub in ["images", "masks"] {
            std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        for s in &self.samples {
            save_image(&s.image, dir.join("images").join(format!("{}.png", s.id)))?;
            save_mask(&s.mask, dir.join("masks").join(format!("{}.png", s.id)), classes)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{generate_synthetic_dataset, SynthConfig};

    fn small() -> Dataset {
        let cfg = SynthConfig {
            image_size: 24,
            ..SynthConfig::default()
        };
        Dataset::from_pairs(generate_synthetic_dataset(&cfg, 3).unwrap(), "s").unwrap()
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small();
        ds.save_dir(dir.path(), 2).unwrap();
        let back = Dataset::load(dir.path(), 2, None).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.samples[1].id, "s0001");
        assert_eq!(back.samples[1].mask, ds.samples[1].mask);
    }

    #[test]
    fn missing_mask_and_empty_dir() {
        let dir = tempfile::tempdir().unwrap();
        small().save_dir(dir.path(), 2).unwrap();
        std::fs::remove_file(dir.path().join("masks/s0002.png")).unwrap();
        assert!(Dataset::load(dir.path(), 2, None).is_err());

        let empty = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(empty.path().join("images")).unwrap();
        assert!(matches!(
            Dataset::load(empty.path(), 2, None),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let s = Sample {
            id: "x".into(),
            image: Image::filled(4, 4, 1, 0.0).unwrap(),
            mask: MaskMap::zeros(4, 5),
        };
        assert!(Dataset::new(vec![s]).is_err());
    }
}
