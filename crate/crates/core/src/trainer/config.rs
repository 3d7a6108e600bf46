use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossSpec;
use crate::outlier::DEFAULT_QUEUE_CAPACITY;
use crate::segmenter::OptimHyper;
use crate::tiling::{INFER_MARGIN, INFER_PATCH};

/// Flat training configuration. Loss weights and optimizer settings live at
/// the top level of the TOML file alongside everything else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Defaults to `floor(0.75 * epochs)` when unset.
    pub sampling_start_epoch: Option<usize>,
    /// Patches per optimizer step.
    pub batch_size: usize,
    pub pixels_per_image: usize,
    pub sample_size: usize,
    pub selection_count: usize,
    pub substitution_fraction: f64,
    pub queue_capacity: usize,
    /// Master switch for the outlier path.
    pub outliers: bool,
    /// Synthesize outliers for class 0 too, or only for foreground classes.
    pub outlier_background: bool,
    pub classes: usize,
    #[serde(flatten)]
    pub loss: LossSpec,
    #[serde(flatten)]
    pub optim: OptimHyper,
    pub seed: u64,
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub infer_patch: usize,
    pub infer_margin: usize,
    /// Write per-epoch Gaussian statistics to `gaussian.csv` in `out_dir`.
    pub gaussian_log: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            sampling_start_epoch: None,
            batch_size: 8,
            pixels_per_image: 1_000,
            sample_size: 100_000,
            selection_count: 10_000,
            substitution_fraction: 0.1,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            outliers: true,
            outlier_background: true,
            classes: 2,
            loss: LossSpec::default(),
            optim: OptimHyper::default(),
            seed: 0,
            train_data: None,
            val_data: None,
            out_dir: None,
            infer_patch: INFER_PATCH,
            infer_margin: INFER_MARGIN,
            gaussian_log: false,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn sampling_start(&self) -> usize {
        self.sampling_start_epoch.unwrap_or(self.epochs * 3 / 4)
    }

    /// Whether outlier synthesis can ever run. A zero `beta` disables the
    /// whole path, queues included.
    pub fn synthesis_enabled(&self) -> bool {
        self.outliers && self.loss.beta != 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return cfg_err("epochs must be at least 1".into());
        }
        if self.sampling_start() > self.epochs {
            return cfg_err(format!(
                "sampling_start_epoch {} exceeds epochs {}",
                self.sampling_start(),
                self.epochs
            ));
        }
        if self.batch_size == 0 || self.pixels_per_image == 0 || self.queue_capacity == 0 {
            return cfg_err("batch_size, pixels_per_image and queue_capacity must be >= 1".into());
        }
        if self.selection_count == 0 || self.selection_count > self.sample_size {
            return cfg_err(format!(
                "selection_count {} must lie in 1..={}",
                self.selection_count, self.sample_size
            ));
        }
        if !(0.0..=1.0).contains(&self.substitution_fraction) {
            return cfg_err(format!(
                "substitution_fraction {} outside [0, 1]",
                self.substitution_fraction
            ));
        }
        if self.classes < 2 || self.classes > 256 {
            return cfg_err(format!("classes must lie in 2..=256, got {}", self.classes));
        }
        if self.infer_patch == 0 || self.infer_margin >= self.infer_patch {
            return cfg_err("infer_margin must be smaller than infer_patch".into());
        }
        self.loss.validate()?;
        self.optim.validate()
    }
}
