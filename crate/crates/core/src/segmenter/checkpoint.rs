//! Self-describing checkpoints: one line of JSON header, then a payload of
//! little-endian `f64`s (parameters, velocity, then queued logit vectors
//! oldest first, queue by queue).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NetSpec, OptimHyper, OptimState, SegmenterParams};
use crate::error::{Error, Result};
use crate::outlier::ClassQueues;

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT_TAG: &str = "outlierseg-checkpoint";

/// Everything needed to resume training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: SegmenterParams,
    pub optim: OptimState,
    pub queues: Option<ClassQueues>,
    /// Completed epochs.
    pub epoch: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct QueueHeader {
    class: usize,
    capacity: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    spec: NetSpec,
    hyper: OptimHyper,
    param_count: usize,
    step: u64,
    optim_epoch: usize,
    epoch: usize,
    queue_dim: Option<usize>,
    queues: Vec<QueueHeader>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format: FORMAT_TAG.into(),
            version: self.params.version,
            spec: self.params.spec.clone(),
            hyper: self.optim.hyper,
            param_count: self.params.values.len(),
            step: self.optim.step,
            optim_epoch: self.optim.epoch,
            epoch: self.epoch,
            queue_dim: self.queues.as_ref().map(ClassQueues::dim),
            queues: self
                .queues
                .iter()
                .flat_map(|qs| qs.queues())
                .map(|q| QueueHeader {
                    class: q.class(),
                    capacity: q.capacity(),
                    len: q.len(),
                })
                .collect(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        let floats = self
            .params
            .values
            .iter()
            .chain(&self.optim.velocity)
            .chain(
                self.queues
                    .iter()
                    .flat_map(|qs| qs.queues())
                    .flat_map(|q| q.iter())
                    .flatten(),
            );
        for v in floats {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing header line".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| bad(format!("corrupted header: {e}")))?;
        if header.format != FORMAT_TAG {
            return Err(bad(format!("not a checkpoint (format {:?})", header.format)));
        }
        if header.version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "version {} unsupported (expected {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        header.spec.validate()?;
        if header.spec.param_count() != header.param_count {
            return Err(bad("parameter count disagrees with layer spec".into()));
        }
        let dim = header.queue_dim.unwrap_or(0);
        let queued: usize = header.queues.iter().map(|q| q.len * dim).sum();
        let expected = 2 * header.param_count + queued;
        let payload = &bytes[nl + 1..];
        if payload.len() != expected * 8 {
            return Err(bad(format!(
                "payload holds {} bytes, expected {}",
                payload.len(),
                expected * 8
            )));
        }
        let mut floats = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let values: Vec<f64> = floats.by_ref().take(header.param_count).collect();
        let velocity: Vec<f64> = floats.by_ref().take(header.param_count).collect();

        let queues = match header.queue_dim {
            None => None,
            Some(dim) => {
                let capacity = header.queues.first().map_or(0, |q| q.capacity);
                let mut qs = ClassQueues::new(header.queues.len(), dim, capacity);
                for q in &header.queues {
                    if q.capacity != capacity || q.len > capacity {
                        return Err(bad("inconsistent queue capacities".into()));
                    }
                    for _ in 0..q.len {
                        qs.push(q.class, floats.by_ref().take(dim).collect())?;
                    }
                }
                Some(qs)
            }
        };

        let params = SegmenterParams {
            spec: header.spec,
            values,
            version: header.version,
        };
        params.validate()?;
        header.hyper.validate()?;
        Ok(Self {
            params,
            optim: OptimState {
                velocity,
                hyper: header.hyper,
                step: header.step,
                epoch: header.optim_epoch,
            },
            queues,
            epoch: header.epoch,
        })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
