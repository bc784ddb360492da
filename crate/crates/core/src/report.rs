//! Fit reports and progress callbacks shared by all fitters.

use serde::{Deserialize, Serialize};

use crate::params::GmmParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    BatchEm,
    MinibatchEm,
    Sgd,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::BatchEm => "batch-em",
            Method::MinibatchEm => "minibatch-em",
            Method::Sgd => "sgd",
        }
    }
}

/// One row of the training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean training log-likelihood, nats per point.
    pub train_ll: f64,
    /// Cumulative seconds spent in the fit loop, excluding metric evaluation.
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub method: Method,
    pub config: serde_json::Value,
    pub initial_train_ll: f64,
    pub epochs: Vec<EpochRecord>,
    pub final_train_ll: Option<f64>,
    pub final_val_ll: Option<f64>,
    pub checkpoint: Option<String>,
    /// Number of parameter updates performed.
    pub iterations: usize,
    /// Size of the last minibatch of each epoch when it is smaller than the configured size.
    pub ragged_final_batch: Option<usize>,
    /// Set when the fit stopped early on a numerical failure.
    pub error: Option<String>,
}

impl FitReport {
    pub fn new(method: Method, config: serde_json::Value, initial_train_ll: f64) -> Self {
        Self {
            method,
            config,
            initial_train_ll,
            epochs: Vec::new(),
            final_train_ll: None,
            final_val_ll: None,
            checkpoint: None,
            iterations: 0,
            ragged_final_batch: None,
            error: None,
        }
    }

    /// The report with every wall-clock field zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.epochs.iter_mut().for_each(|e| e.wall_clock_s = 0.0);
        r
    }

    /// Seconds per epoch, from successive cumulative wall-clock readings.
    pub fn epoch_durations(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.epochs
            .iter()
            .map(|e| {
                let d = e.wall_clock_s - prev;
                prev = e.wall_clock_s;
                d
            })
            .collect()
    }
}

/// Final parameters plus the training record.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: GmmParams,
    pub report: FitReport,
}

/// Receives progress from a running fit.
pub trait FitObserver {
    fn on_epoch(&mut self, _record: &EpochRecord, _params: &GmmParams) {}
}

impl FitObserver for () {}

/// Observer that keeps every epoch record, so a partial curve survives a failed fit.
#[derive(Debug, Default, Clone)]
pub struct EpochLog {
    pub records: Vec<EpochRecord>,
}

impl FitObserver for EpochLog {
    fn on_epoch(&mut self, record: &EpochRecord, _params: &GmmParams) {
        self.records.push(record.clone());
    }
}

/// Piecewise-constant schedule over 0-based epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    /// `(first epoch, value)`, sorted by epoch; the first breakpoint must be at epoch 0.
    pub breakpoints: Vec<(usize, f64)>,
}

impl Schedule {
    pub fn constant(value: f64) -> Self {
        Self {
            breakpoints: vec![(0, value)],
        }
    }

    /// `value` until `at`, then `value / factor`.
    pub fn drop_at(value: f64, at: usize, factor: f64) -> Self {
        Self {
            breakpoints: vec![(0, value), (at, value / factor)],
        }
    }

    pub fn value_at(&self, epoch: usize) -> f64 {
        self.breakpoints
            .iter()
            .take_while(|(start, _)| *start <= epoch)
            .last()
            .map_or(self.breakpoints[0].1, |(_, v)| *v)
    }

    pub(crate) fn is_valid(&self) -> bool {
        !self.breakpoints.is_empty()
            && self.breakpoints[0].0 == 0
            && self.breakpoints.windows(2).all(|w| w[0].0 < w[1].0)
    }

    pub(crate) fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.breakpoints.iter().map(|(_, v)| *v)
    }
}
