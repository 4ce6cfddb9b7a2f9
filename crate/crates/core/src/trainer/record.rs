use std::io::Write;

use super::state::PassCounter;
use crate::error::Result;
use crate::evalkit::MetricReport;

pub const METRICS_HEADER: &str =
    "epoch,split,loss,r_at_1,r_at_5,r_at_10,r_at_50,rmean,rsubset_at_1,gap,lr,seconds,adv_steps,rand_steps";

/// Metrics for one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    /// One-based.
    pub epoch: usize,
    /// Mean loss of the update-driving pass over the epoch's steps.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub train: Option<MetricReport>,
    pub val: Option<MetricReport>,
    pub gap: Option<f64>,
    pub lr: f64,
    /// Wall-clock spent on training steps, evaluation excluded.
    pub seconds: f64,
    pub adv_steps: u64,
    pub rand_steps: u64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn metric_fields(r: Option<&MetricReport>) -> String {
    let get = |k| r.and_then(|r| r.recall(k));
    format!(
        "{},{},{},{},{},{}",
        opt(get(1)),
        opt(get(5)),
        opt(get(10)),
        opt(get(50)),
        opt(r.map(|r| r.rmean)),
        opt(r.and_then(|r| r.recall_subset(1)))
    )
}

impl EpochRow {
    /// Writes the `train` row and, when evaluated, the `val` row.
    pub fn write_csv<W: Write>(&self, out: &mut W, with_seconds: bool) -> Result<()> {
        let seconds = if with_seconds { self.seconds.to_string() } else { String::new() };
        writeln!(
            out,
            "{},train,{},{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            metric_fields(self.train.as_ref()),
            opt(self.gap),
            self.lr,
            seconds,
            self.adv_steps,
            self.rand_steps
        )?;
        if self.val.is_some() {
            writeln!(
                out,
                "{},val,{},{},{},,,,",
                self.epoch,
                opt(self.val_loss),
                metric_fields(self.val.as_ref()),
                opt(self.gap)
            )?;
        }
        Ok(())
    }
}

/// Per-epoch history of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<EpochRow>,
    /// Epoch of the highest validation Rmean; ties keep the earliest.
    pub best_epoch: Option<usize>,
    pub passes: PassCounter,
}

impl RunRecord {
    pub fn new(config_hash: String, seed: u64) -> Self {
        RunRecord {
            config_hash,
            seed,
            rows: Vec::new(),
            best_epoch: None,
            passes: PassCounter::default(),
        }
    }

    pub fn row(&self, epoch: usize) -> Option<&EpochRow> {
        self.rows.iter().find(|r| r.epoch == epoch)
    }

    pub fn best_row(&self) -> Option<&EpochRow> {
        self.best_epoch.and_then(|e| self.row(e))
    }

    pub fn best_val_rmean(&self) -> Option<f64> {
        self.best_row().and_then(|r| r.val.as_ref()).map(|v| v.rmean)
    }

    pub fn gap_at_best(&self) -> Option<f64> {
        self.best_row().and_then(|r| r.gap)
    }

    pub fn final_val_rmean(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.val.as_ref()).map(|v| v.rmean)
    }

    /// Mean training seconds per epoch.
    pub fn seconds_per_epoch(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.seconds).sum::<f64>() / self.rows.len() as f64
    }

    /// Mean training seconds over epochs whose steps were all perturbed or all plain.
    pub fn seconds_per_epoch_where(&self, perturbed: bool) -> Option<f64> {
        let sel: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| (r.adv_steps + r.rand_steps > 0) == perturbed)
            .map(|r| r.seconds)
            .collect();
        (!sel.is_empty()).then(|| sel.iter().sum::<f64>() / sel.len() as f64)
    }
}
