//! Semantic segmentation training with virtual outliers: pixel logits are
//! modelled by class-conditional Gaussians, low-density samples are drawn
//! from them and fed back as an uncertainty penalty.

pub mod error;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod outlier;
pub mod rng;
pub mod segmenter;
pub mod tiling;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
pub use imaging::{Image, MaskMap};
pub use losses::{LossReport, LossSpec, Strategy};
pub use metrics::{EvalReport, ImageRecord};
pub use outlier::{ClassQueues, GaussianModel, OutlierBatch};
pub use segmenter::{Checkpoint, LogitMap, NetSpec, SegmenterParams};
pub use tiling::{ProbMap, TilePlan, TileRect};
pub use trainer::{Dataset, RunLog, TrainConfig, Trainer};
