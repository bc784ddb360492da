//! Direct minimisation of the negative log-likelihood with Adam.

mod adam;
mod loss;

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, adam_update, AdamHyper, AdamState};
pub use loss::{loss, loss_grad, trace_penalty};

use crate::error::{Result, XdError};
use crate::likelihood;
use crate::params::{constrain, unconstrain, GmmParams, NoisyPoint, UnconstrainedParams};
use crate::report::{EpochRecord, FitObserver, FitReport, FitResult, Method, Schedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub minibatch_size: usize,
    pub epochs: usize,
    /// Learning rate per epoch.
    pub lr: Schedule,
    pub adam: AdamHyper,
    /// Weight of the `Σ w / tr(V_j)` penalty.
    pub reg_w: f64,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            minibatch_size: 500,
            epochs: 20,
            lr: Schedule::drop_at(1e-2, 10, 10.0),
            adam: AdamHyper::default(),
            reg_w: 1e-3,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.minibatch_size == 0 {
            return Err(XdError::InvalidConfig("minibatch size must be at least 1".into()));
        }
        if !self.lr.is_valid() {
            return Err(XdError::InvalidConfig(
                "learning-rate schedule must start at epoch 0 with increasing breakpoints".into(),
            ));
        }
        if self.lr.values().any(|l| !(l >= 0.0 && l.is_finite())) {
            return Err(XdError::InvalidConfig("learning rate must be finite and non-negative".into()));
        }
        let AdamHyper { beta1, beta2, eps } = self.adam;
        if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
            return Err(XdError::InvalidConfig("Adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
        }
        if !(self.reg_w >= 0.0) || !self.reg_w.is_finite() {
            return Err(XdError::InvalidConfig("reg_w must be non-negative".into()));
        }
        Ok(())
    }
}

fn all_finite(u: &UnconstrainedParams) -> bool {
    u.to_flat().iter().all(|v| v.is_finite())
}

/// Fits by minibatch Adam on the unconstrained parameters.
///
/// Fails with [`XdError::NonFinite`] as soon as a loss, gradient or parameter stops being
/// finite. The iteration counter in the error is the number of completed updates.
pub fn fit_sgd(
    data: &[NoisyPoint],
    init: &GmmParams,
    cfg: &SgdConfig,
    observer: &mut dyn FitObserver,
) -> Result<FitResult> {
    cfg.validate()?;
    init.validate()?;
    if data.is_empty() {
        return Err(XdError::InvalidConfig("cannot fit an empty dataset".into()));
    }
    let initial = likelihood::mean_log_likelihood(init, data)?;
    let mut report = FitReport::new(Method::Sgd, serde_json::to_value(cfg)?, initial);
    let mut u = unconstrain(init)?;
    let mut state = AdamState::for_params(&u);
    let mut params = init.clone();
    let mut elapsed = Duration::ZERO;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cfg.lr.value_at(epoch);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.minibatch_size) {
            let batch: Vec<&NoisyPoint> = chunk.iter().map(|&i| &data[i]).collect();
            let (value, grad) = loss_grad(&u, &batch, cfg.reg_w).map_err(|e| match e {
                XdError::ConvolvedNotPositiveDefinite { point, component } => {
                    XdError::ConvolvedNotPositiveDefinite {
                        point: chunk[point],
                        component,
                    }
                }
                other => other,
            })?;
            if !value.is_finite() || !all_finite(&grad) {
                return Err(XdError::NonFinite {
                    iteration: report.iterations,
                });
            }
            u = adam_step(&u, &grad, &mut state, lr, &cfg.adam);
            if !all_finite(&u) {
                return Err(XdError::NonFinite {
                    iteration: report.iterations,
                });
            }
            if chunk.len() < cfg.minibatch_size {
                report.ragged_final_batch = Some(chunk.len());
            }
            report.iterations += 1;
        }
        params = constrain(&u);
        elapsed += start.elapsed();
        params.validate()?;
        let train_ll = likelihood::mean_log_likelihood(&params, data)?;
        if !train_ll.is_finite() {
            return Err(XdError::NonFinite {
                iteration: report.iterations,
            });
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            train_ll,
            wall_clock_s: elapsed.as_secs_f64(),
        };
        observer.on_epoch(&record, &params);
        report.epochs.push(record);
    }
    report.final_train_ll = Some(report.epochs.last().map_or(initial, |e| e.train_ll));
    Ok(FitResult { params, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Preset};
    use crate::params::Projection;
    use crate::report::EpochLog;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn blobs(n: usize, seed: u64) -> Vec<NoisyPoint> {
        let p = Preset::ThreeBlobs;
        generate_synthetic(&p.truth(), &p.noise(), &Projection::Identity, n, seed)
            .unwrap()
            .0
            .points
    }

    /// Central differences on every flat coordinate.
    fn numeric_grad(u: &UnconstrainedParams, batch: &[&NoisyPoint], reg_w: f64) -> Vec<f64> {
        let flat = u.to_flat();
        let h = 1e-6;
        (0..flat.len())
            .map(|i| {
                let mut plus = flat.clone();
                let mut minus = flat.clone();
                plus[i] += h;
                minus[i] -= h;
                let f = |v: &[f64]| loss(&UnconstrainedParams::from_flat(u.k(), u.dim(), v), batch, reg_w).unwrap();
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_grad_close(analytic: &[f64], numeric: &[f64]) {
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let tol = 1e-5 * (1.0 + n.abs());
            assert!((a - n).abs() < tol, "coordinate {i}: analytic {a}, numeric {n}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences_full_noise() {
        let data = blobs(30, 4);
        let refs: Vec<&NoisyPoint> = data.iter().collect();
        let mut u = unconstrain(&Preset::ThreeBlobs.truth()).unwrap();
        u.means[1][2] += 0.7;
        u.chol_lower[2][(2, 0)] -= 0.3;
        u.chol_logdiag[0][1] += 0.2;
        let (_, g) = loss_grad(&u, &refs, 0.05).unwrap();
        assert_grad_close(&g.to_flat(), &numeric_grad(&u, &refs, 0.05));
    }

    #[test]
    fn gradient_matches_finite_differences_with_projection() {
        let r = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, 0.0, 0.0, -1.0, 2.0]);
        let noise = DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.3]);
        let pts: Vec<NoisyPoint> = [[0.3, -1.0], [2.0, 1.0], [-1.5, 0.2], [0.0, 4.0]]
            .iter()
            .map(|x| NoisyPoint::new(DVector::from_row_slice(x), noise.clone(), Projection::Matrix(r.clone())).unwrap())
            .collect();
        let refs: Vec<&NoisyPoint> = pts.iter().collect();
        let mut u = UnconstrainedParams::zeros(2, 3);
        u.logits[0] = 0.4;
        u.means[0] = DVector::from_vec(vec![0.5, -0.5, 0.1]);
        u.means[1] = DVector::from_vec(vec![-1.0, 0.3, 1.2]);
        u.chol_lower[1][(2, 1)] = 0.6;
        u.chol_lower[0][(1, 0)] = -0.2;
        u.chol_logdiag[1] = DVector::from_vec(vec![-0.3, 0.2, 0.1]);
        let (_, g) = loss_grad(&u, &refs, 0.01).unwrap();
        assert_grad_close(&g.to_flat(), &numeric_grad(&u, &refs, 0.01));
    }

    #[test]
    fn zero_learning_rate_keeps_initial_parameters() {
        let data = blobs(120, 2);
        let init = Preset::ThreeBlobs.truth();
        let cfg = SgdConfig {
            minibatch_size: 50,
            epochs: 3,
            lr: Schedule::constant(0.0),
            ..SgdConfig::default()
        };
        let fit = fit_sgd(&data, &init, &cfg, &mut ()).unwrap();
        assert_eq!(fit.report.iterations, 9);
        assert_eq!(fit.report.ragged_final_batch, Some(20));
        for j in 0..3 {
            assert!((fit.params.alpha[j] - init.alpha[j]).abs() < 1e-12);
            assert!((&fit.params.means[j] - &init.means[j]).amax() < 1e-12);
            assert!((&fit.params.covs[j] - &init.covs[j]).amax() < 1e-12);
        }
    }

    #[test]
    fn training_improves_likelihood_and_is_seeded() {
        let data = blobs(600, 5);
        let init = crate::init::kmeans_init_dataset(
            &crate::data::Dataset::new(crate::data::Schema::numbered(3), data.clone()).unwrap(),
            &crate::init::KMeansConfig::new(3, 1),
        )
        .unwrap();
        let cfg = SgdConfig {
            minibatch_size: 100,
            epochs: 6,
            lr: Schedule::constant(0.05),
            ..SgdConfig::default()
        };
        let mut log = EpochLog::default();
        let a = fit_sgd(&data, &init, &cfg, &mut log).unwrap();
        assert_eq!(log.records.len(), 6);
        assert!(a.report.final_train_ll.unwrap() > a.report.initial_train_ll);
        let b = fit_sgd(&data, &init, &cfg, &mut ()).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.report.without_timing(), b.report.without_timing());
    }

    #[test]
    fn non_finite_data_is_reported() {
        let mut data = blobs(20, 1);
        data[3].x[0] = f64::INFINITY;
        let cfg = SgdConfig {
            minibatch_size: 10,
            ..SgdConfig::default()
        };
        match fit_sgd(&data, &Preset::ThreeBlobs.truth(), &cfg, &mut ()) {
            Err(XdError::NonFinite { iteration }) => assert!(iteration < 2),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = SgdConfig::default();
        cfg.lr = Schedule::constant(-1.0);
        assert!(cfg.validate().is_err());
        let mut cfg = SgdConfig::default();
        cfg.adam.beta2 = 1.0;
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn gradient_matches_finite_differences_random(
            flat in prop::collection::vec(-1.5f64..1.5, 2 * (1 + 2 + 1 + 2)),
            xs in prop::collection::vec(-3.0f64..3.0, 10),
            reg_w in 0.0f64..0.1,
        ) {
            let u = UnconstrainedParams::from_flat(2, 2, &flat);
            let noise = DMatrix::from_row_slice(2, 2, &[0.2, 0.05, 0.05, 0.3]);
            let pts: Vec<NoisyPoint> = xs
                .chunks(2)
                .map(|x| NoisyPoint::new(DVector::from_row_slice(x), noise.clone(), Projection::Identity).unwrap())
                .collect();
            let refs: Vec<&NoisyPoint> = pts.iter().collect();
            let (_, g) = loss_grad(&u, &refs, reg_w).unwrap();
            let numeric = numeric_grad(&u, &refs, reg_w);
            for (a, n) in g.to_flat().iter().zip(&numeric) {
                prop_assert!((a - n).abs() < 1e-5 * (1.0 + n.abs()), "{a} vs {n}");
            }
        }
    }
}
