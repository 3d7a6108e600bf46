//! Training schedule: warmup on the segmentation loss, then online class
//! statistics, outlier sampling and the uncertainty penalty. Also tiled
//! inference and evaluation of trained parameters.

mod config;
mod data;
mod infer;
mod log;

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

pub use config::TrainConfig;
pub use data::{Dataset, Sample};
pub use infer::{evaluate, infer};
pub use log::{EpochRow, GaussianRow, RunLog, StepRow, LOSS_CSV_HEADER};

use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::outlier::{estimate, plan_substitution, sample_outliers, ClassQueues, GaussianModel, OutlierBatch};
use crate::rng::{derive_seed, rng_for};
use crate::segmenter::{
    objective_grad, save_checkpoint, sgd_step, Checkpoint, NetSpec, OptimState, Segmenter, SegmenterParams,
};

const TAG_SHUFFLE: u64 = 1;
const TAG_ENQUEUE: u64 = 2;
const TAG_SAMPLE: u64 = 3;
const TAG_SUBSTITUTE: u64 = 4;

/// Owns parameters, optimizer state and class queues for one run. Every
/// random draw is keyed by `(seed, epoch, step, item)`, so a run resumed
/// from an epoch checkpoint continues bit-identically.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    train: &'a Dataset,
    val: Option<&'a Dataset>,
    params: SegmenterParams,
    optim: OptimState,
    queues: Option<ClassQueues>,
    epoch: usize,
    log: RunLog,
}

fn check_data(cfg: &TrainConfig, train: &Dataset, val: Option<&Dataset>) -> Result<usize> {
    let channels = train
        .channels()
        .ok_or_else(|| Error::Empty("training dataset has no samples".into()))?;
    for s in train.samples.iter().chain(val.iter().flat_map(|v| &v.samples)) {
        if s.image.channels() != channels {
            return Err(Error::Shape(format!(
                "{} has {} channels, expected {channels}",
                s.id,
                s.image.channels()
            )));
        }
        s.mask.validate(cfg.classes)?;
    }
    Ok(channels)
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, train: &'a Dataset, val: Option<&'a Dataset>) -> Result<Self> {
        cfg.validate()?;
        let channels = check_data(&cfg, train, val)?;
        let params = SegmenterParams::init(NetSpec::reference(channels, cfg.classes), cfg.seed)?;
        let optim = OptimState::new(params.values.len(), cfg.optim)?;
        let queues = cfg
            .synthesis_enabled()
            .then(|| ClassQueues::new(cfg.classes, cfg.classes, cfg.queue_capacity));
        Ok(Self {
            cfg,
            train,
            val,
            params,
            optim,
            queues,
            epoch: 0,
            log: RunLog::default(),
        })
    }

    /// Continues from a checkpoint written by a run with the same config.
    pub fn resume(
        cfg: TrainConfig,
        train: &'a Dataset,
        val: Option<&'a Dataset>,
        checkpoint: Checkpoint,
    ) -> Result<Self> {
        let mut t = Self::new(cfg, train, val)?;
        if checkpoint.params.spec != t.params.spec {
            return Err(Error::Checkpoint("layer spec does not match the dataset".into()));
        }
        if checkpoint.queues.is_some() != t.queues.is_some() {
            return Err(Error::Checkpoint(
                "checkpoint queue state does not match the outlier settings".into(),
            ));
        }
        if checkpoint.epoch > t.cfg.epochs {
            return Err(Error::Checkpoint(format!(
                "checkpoint is at epoch {}, past the configured {}",
                checkpoint.epoch, t.cfg.epochs
            )));
        }
        t.params = checkpoint.params;
        t.optim = checkpoint.optim;
        t.optim.hyper = t.cfg.optim;
        t.queues = checkpoint.queues;
        t.epoch = checkpoint.epoch;
        Ok(t)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn params(&self) -> &SegmenterParams {
        &self.params
    }

    pub fn queues(&self) -> Option<&ClassQueues> {
        self.queues.as_ref()
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            optim: self.optim.clone(),
            queues: self.queues.clone(),
            epoch: self.epoch,
        }
    }

    fn synthesis_active(&self) -> bool {
        self.cfg.synthesis_enabled() && self.epoch >= self.cfg.sampling_start()
    }

    fn draw_batches(&self, model: &GaussianModel, step: usize) -> Result<Vec<Option<OutlierBatch>>> {
        (0..self.cfg.classes)
            .map(|k| {
                if k == 0 && !self.cfg.outlier_background {
                    return Ok(None);
                }
                let seed = derive_seed(self.cfg.seed, &[TAG_SAMPLE, self.epoch as u64, step as u64, k as u64]);
                sample_outliers(model, k, self.cfg.sample_size, self.cfg.selection_count, seed).map(Some)
            })
            .collect()
    }

    pub fn run_epoch(&mut self) -> Result<()> {
        let started = Instant::now();
        let e = self.epoch;
        let active = self.synthesis_active();
        self.optim.epoch = e;

        let mut model = match &self.queues {
            Some(q) if active && q.ready() => Some(estimate(q)?),
            _ => None,
        };
        let mut epsilons = vec![None; self.cfg.classes];
        let mut synthesis_steps = 0;

        let samples = &self.train.samples;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng_for(self.cfg.seed, &[TAG_SHUFFLE, e as u64]));

        for (step, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let forward = chunk
                .par_iter()
                .map(|&i| self.params.forward_with_tape(&samples[i].image))
                .collect::<Result<Vec<_>>>()?;

            let mut subs = vec![None; chunk.len()];
            if active {
                let queues = self.queues.as_mut().expect("queues exist while synthesis is enabled");
                for (&i, (logits, _)) in chunk.iter().zip(&forward) {
                    let seed = derive_seed(self.cfg.seed, &[TAG_ENQUEUE, e as u64, step as u64, i as u64]);
                    queues.enqueue_pixels(logits, &samples[i].mask, self.cfg.pixels_per_image, seed)?;
                }
                if model.is_none() && queues.ready() {
                    model = Some(estimate(queues)?);
                }
                if let Some(m) = &model {
                    let batches = self.draw_batches(m, step)?;
                    for (k, b) in batches.iter().enumerate() {
                        if let Some(b) = b {
                            epsilons[k] = Some(b.epsilon);
                        }
                    }
                    for (slot, &i) in subs.iter_mut().zip(chunk) {
                        let seed = derive_seed(self.cfg.seed, &[TAG_SUBSTITUTE, e as u64, step as u64, i as u64]);
                        *slot = Some(plan_substitution(
                            &samples[i].mask,
                            &batches,
                            self.cfg.substitution_fraction,
                            seed,
                        )?);
                    }
                    synthesis_steps += 1;
                }
            }

            let results = chunk
                .par_iter()
                .zip(&forward)
                .zip(&subs)
                .map(|((&i, (logits, tape)), sub)| {
                    let (report, grad_logits) = objective_grad(logits, &samples[i].mask, &self.cfg.loss, sub.as_ref())?;
                    Ok((report, self.params.backward(tape, &grad_logits)))
                })
                .collect::<Result<Vec<_>>>()?;

            let scale = 1.0 / results.len() as f64;
            let mut grad = vec![0.0; self.params.values.len()];
            for (_, g) in &results {
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            grad.iter_mut().for_each(|g| *g *= scale);
            let reports: Vec<LossReport> = results.iter().map(|(r, _)| *r).collect();
            let lr = self.optim.lr();
            sgd_step(&mut self.optim, &mut self.params.values, &grad)?;
            self.log.push_step(StepRow {
                epoch: e,
                step,
                lr,
                report: LossReport::mean(&reports).expect("batches are nonempty"),
            });
        }

        if let Some(m) = &model {
            for (class, eps) in epsilons.into_iter().enumerate() {
                self.log.gaussians.push(GaussianRow {
                    epoch: e,
                    class,
                    mean: m.mean(class).to_vec(),
                    cov: m.covariance().to_vec(),
                    epsilon: eps,
                });
            }
        }

        self.epoch = e + 1;
        self.optim.epoch = self.epoch;
        let eval = match self.val {
            Some(v) => Some(evaluate(&self.params, v, self.cfg.infer_patch, self.cfg.infer_margin)?),
            None => None,
        };
        self.log.epochs.push(EpochRow {
            epoch: e,
            seconds: started.elapsed().as_secs_f64(),
            synthesis_steps,
            queues_ready: self.queues.as_ref().is_some_and(ClassQueues::ready),
            eval,
        });
        Ok(())
    }

    /// Trains up to (not including) `epoch`, writing
    /// `epoch-NNNN.ckpt` into `checkpoint_dir` after each epoch if given.
    pub fn run_until(&mut self, epoch: usize, checkpoint_dir: Option<&Path>) -> Result<()> {
        let end = epoch.min(self.cfg.epochs);
        while self.epoch < end {
            self.run_epoch()?;
            if let Some(dir) = checkpoint_dir {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                save_checkpoint(&self.checkpoint(), dir.join(format!("epoch-{:04}.ckpt", self.epoch)))?;
            }
        }
        Ok(())
    }

    pub fn finish(mut self) -> (Checkpoint, RunLog) {
        let attempted = self
            .log
            .epochs
            .iter()
            .any(|r| self.cfg.synthesis_enabled() && r.epoch >= self.cfg.sampling_start());
        let synthesized: usize = self.log.epochs.iter().map(|r| r.synthesis_steps).sum();
        if attempted && synthesized == 0 {
            self.log.warnings.push(
                "class queues never filled; no outliers were synthesized (baseline-only run)".into(),
            );
        }
        (self.checkpoint(), self.log)
    }
}

/// Full run from freshly initialized parameters.
pub fn train(cfg: &TrainConfig, train: &Dataset, val: Option<&Dataset>) -> Result<(Checkpoint, RunLog)> {
    let mut t = Trainer::new(cfg.clone(), train, val)?;
    let dir = cfg.out_dir.as_deref();
    t.run_until(cfg.epochs, dir)?;
    Ok(t.finish())
}
