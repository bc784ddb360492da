//! Batch EM and minibatch (online) EM.

mod update;

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use update::{
    accumulate, adjust, m_step_adjust, m_step_naive, m_step_stable, minibatch_stats, recentre, regularise,
    MinibatchStats, PointPosterior, SuffStatAccumulator, MASS_FLOOR_FRACTION,
};

use crate::error::{Result, XdError};
use crate::likelihood;
use crate::params::{GmmParams, NoisyPoint};
use crate::report::{EpochRecord, FitObserver, FitReport, FitResult, Method, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmMode {
    Batch,
    Minibatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub mode: EmMode,
    pub minibatch_size: usize,
    /// Step size λ per epoch; ignored in batch mode.
    pub step_size: Schedule,
    pub epochs: usize,
    /// Added to every covariance diagonal after each M-step.
    pub reg_w: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            mode: EmMode::Minibatch,
            minibatch_size: 500,
            step_size: Schedule::drop_at(1e-2, 10, 2.0),
            epochs: 20,
            reg_w: 1e-3,
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn batch(epochs: usize) -> Self {
        Self {
            mode: EmMode::Batch,
            epochs,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.minibatch_size == 0 {
            return Err(XdError::InvalidConfig("minibatch size must be at least 1".into()));
        }
        if !self.step_size.is_valid() {
            return Err(XdError::InvalidConfig(
                "step-size schedule must start at epoch 0 with increasing breakpoints".into(),
            ));
        }
        if self.step_size.values().any(|l| !(l > 0.0 && l <= 1.0)) {
            return Err(XdError::InvalidConfig("step size must lie in (0, 1]".into()));
        }
        if !(self.reg_w >= 0.0) || !self.reg_w.is_finite() {
            return Err(XdError::InvalidConfig("reg_w must be non-negative".into()));
        }
        Ok(())
    }
}

fn at_iteration(err: XdError, iteration: usize) -> XdError {
    match err {
        XdError::DegenerateComponent {
            component,
            mass,
            floor,
            ..
        } => XdError::DegenerateComponent {
            component,
            iteration,
            mass,
            floor,
        },
        other => other,
    }
}

/// One full-data EM iteration: E-step over every point, direct normalisation, then
/// `reg_w · I` on each covariance.
pub fn batch_em_step(p: &GmmParams, data: &[NoisyPoint], reg_w: f64) -> Result<GmmParams> {
    let refs: Vec<&NoisyPoint> = data.iter().collect();
    let stats = minibatch_stats(p, &refs, 0)?;
    Ok(regularise(&m_step_naive(&stats.sums, data.len() as f64)?, reg_w))
}

/// Fits by batch EM or online EM, according to `cfg.mode`.
///
/// In minibatch mode the data are reshuffled every epoch (seeded) and each minibatch
/// updates the running statistics with step λ. A final short minibatch has its statistics
/// scaled up to the configured size, so `Σ q̂ = M` keeps the weights normalised; the
/// report records its size. The running statistics track the unregularised model;
/// `reg_w · I` is added to the covariances used for the E-step and returned to the caller.
pub fn fit_em(
    data: &[NoisyPoint],
    init: &GmmParams,
    cfg: &EmConfig,
    observer: &mut dyn FitObserver,
) -> Result<FitResult> {
    cfg.validate()?;
    init.validate()?;
    if data.is_empty() {
        return Err(XdError::InvalidConfig("cannot fit an empty dataset".into()));
    }
    let method = match cfg.mode {
        EmMode::Batch => Method::BatchEm,
        EmMode::Minibatch => Method::MinibatchEm,
    };
    let initial = likelihood::mean_log_likelihood(init, data)?;
    let mut report = FitReport::new(method, serde_json::to_value(cfg)?, initial);
    let mut params = init.clone();
    let mut elapsed = Duration::ZERO;
    let n = data.len();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let batch_size = cfg.minibatch_size as f64;
    let mut acc = SuffStatAccumulator::from_params(&params, batch_size);
    let mut unregularised = params.clone();

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        match cfg.mode {
            EmMode::Batch => {
                params = batch_em_step(&params, data, cfg.reg_w)
                    .map_err(|e| at_iteration(e, report.iterations))?;
                report.iterations += 1;
            }
            EmMode::Minibatch => {
                let step = cfg.step_size.value_at(epoch);
                order.shuffle(&mut rng);
                for chunk in order.chunks(cfg.minibatch_size) {
                    let batch: Vec<&NoisyPoint> = chunk.iter().map(|&i| &data[i]).collect();
                    let mut stats = minibatch_stats(&params, &batch, 0).map_err(|e| match e {
                        XdError::ConvolvedNotPositiveDefinite { point, component } => {
                            XdError::ConvolvedNotPositiveDefinite {
                                point: chunk[point],
                                component,
                            }
                        }
                        other => other,
                    })?;
                    if chunk.len() < cfg.minibatch_size {
                        stats.scale(batch_size / chunk.len() as f64);
                        report.ragged_final_batch = Some(chunk.len());
                    }
                    let (next, next_acc) = m_step_stable(&acc, &unregularised, &stats, step, batch_size)
                        .map_err(|e| at_iteration(e, report.iterations))?;
                    params = regularise(&next, cfg.reg_w);
                    unregularised = next;
                    acc = next_acc;
                    report.iterations += 1;
                }
            }
        }
        elapsed += start.elapsed();
        let record = EpochRecord {
            epoch: epoch + 1,
            train_ll: likelihood::mean_log_likelihood(&params, data)?,
            wall_clock_s: elapsed.as_secs_f64(),
        };
        observer.on_epoch(&record, &params);
        report.epochs.push(record);
    }
    report.final_train_ll = Some(report.epochs.last().map_or(initial, |e| e.train_ll));
    Ok(FitResult { params, report })
}
