use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::metrics::EvalReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub epoch: usize,
    /// Step index within the epoch.
    pub step: usize,
    pub lr: f64,
    /// Mean over the batch.
    pub report: LossReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub seconds: f64,
    pub synthesis_steps: usize,
    pub queues_ready: bool,
    pub eval: Option<EvalReport>,
}

/// Fitted class statistics at the end of an epoch, with the density
/// threshold of the last outlier batch drawn for the class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianRow {
    pub epoch: usize,
    pub class: usize,
    pub mean: Vec<f64>,
    /// Row-major shared covariance.
    pub cov: Vec<f64>,
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub steps: Vec<StepRow>,
    pub epochs: Vec<EpochRow>,
    pub gaussians: Vec<GaussianRow>,
    pub warnings: Vec<String>,
}

pub const LOSS_CSV_HEADER: &str =
    "epoch,step,lr,ce,dice,ce_out,dice_out,combined,strategy,uncertainty_active";

impl RunLog {
    pub fn push_step(&mut self, row: StepRow) {
        if let Some(last) = self.steps.last() {
            assert!(
                (row.epoch, row.step) > (last.epoch, last.step),
                "step rows must increase"
            );
        }
        self.steps.push(row);
    }

    pub fn extend(&mut self, other: RunLog) {
        for row in other.steps {
            self.push_step(row);
        }
        self.epochs.extend(other.epochs);
        self.gaussians.extend(other.gaussians);
        self.warnings.extend(other.warnings);
    }

    pub fn loss_csv(&self) -> String {
        let mut out = String::from(LOSS_CSV_HEADER);
        out.push('\n');
        for row in &self.steps {
            let r = &row.report;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                row.epoch,
                row.step,
                row.lr,
                r.ce,
                r.dice,
                r.ce_out,
                r.dice_out,
                r.combined,
                r.strategy,
                r.uncertainty_active
            )
            .expect("writing to a string");
        }
        out
    }

    pub fn gaussian_csv(&self) -> String {
        let dim = self.gaussians.first().map_or(0, |g| g.mean.len());
        let mut out = String::from("epoch,class");
        for i in 0..dim {
            write!(out, ",mu_{i}").expect("writing to a string");
        }
        for i in 0..dim {
            for j in 0..dim {
                write!(out, ",sigma_{i}{j}").expect("writing to a string");
            }
        }
        out.push_str(",epsilon\n");
        for g in &self.gaussians {
            write!(out, "{},{}", g.epoch, g.class).expect("writing to a string");
            for v in g.mean.iter().chain(&g.cov) {
                write!(out, ",{v}").expect("writing to a string");
            }
            match g.epsilon {
                Some(e) => writeln!(out, ",{e}"),
                None => writeln!(out, ","),
            }
            .expect("writing to a string");
        }
        out
    }

    pub fn write_loss_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.loss_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn write_gaussian_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.gaussian_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("run log serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{combine, LossComponents, LossSpec};

    fn row(epoch: usize, step: usize) -> StepRow {
        let spec = LossSpec::default();
        let c = LossComponents::real(0.5, 0.25);
        StepRow {
            epoch,
            step,
            lr: 0.01,
            report: LossReport::new(&c, &combine(&c, &spec).unwrap(), &spec),
        }
    }

    #[test]
    fn csv_has_one_line_per_step() {
        let mut log = RunLog::default();
        log.push_step(row(0, 0));
        log.push_step(row(0, 1));
        log.push_step(row(1, 0));
        let csv = log.loss_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], LOSS_CSV_HEADER);
        assert_eq!(lines[3], "1,0,0.01,0.5,0.25,0,0,0.375,balance,false");
    }

    #[test]
    #[should_panic(expected = "increase")]
    fn out_of_order_rows_panic() {
        let mut log = RunLog::default();
        log.push_step(row(1, 0));
        log.push_step(row(0, 3));
    }

    #[test]
    fn gaussian_csv_layout() {
        let log = RunLog {
            gaussians: vec![GaussianRow {
                epoch: 3,
                class: 1,
                mean: vec![0.5, -0.5],
                cov: vec![1.0, 0.0, 0.0, 2.0],
                epsilon: Some(0.01),
            }],
            ..RunLog::default()
        };
        let csv = log.gaussian_csv();
        assert_eq!(
            csv,
            "epoch,class,mu_0,mu_1,sigma_00,sigma_01,sigma_10,sigma_11,epsilon\n3,1,0.5,-0.5,1,0,0,2,0.01\n"
        );
    }
}
