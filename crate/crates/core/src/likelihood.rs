//! Log-likelihood of the deconvolved mixture and the per-point posterior statistics used
//! by the E-step.
//!
//! Under component `j` an observation is distributed as `N(R m_j, T_j)` with
//! `T_j = R V_j Rᵀ + S`. Every density is evaluated through a Cholesky factor of `T_j`;
//! responsibilities are formed in log space.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Result, XdError};
use crate::linalg::{self, LN_2PI};
use crate::params::{GmmParams, NoisyPoint};

/// Posterior of the latent vector of one observation, per component.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentPosterior {
    /// Responsibilities `r_j`, summing to one.
    pub resp: Vec<f64>,
    /// Conditional means `b_j`.
    pub cond_means: Vec<DVector<f64>>,
    /// Conditional covariances `B_j`.
    pub cond_covs: Vec<DMatrix<f64>>,
    /// `log p(x)` under the full mixture.
    pub log_density: f64,
}

/// `T = R V Rᵀ + S`.
pub fn convolved_cov(v: &DMatrix<f64>, point: &NoisyPoint) -> DMatrix<f64> {
    point.convolved_cov(v)
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn check_dims(p: &GmmParams, point: &NoisyPoint, index: usize) -> Result<()> {
    if point.latent_dim() != p.dim() {
        return Err(XdError::Dimension(format!(
            "point {index} has latent dimension {} but the model has dimension {}",
            point.latent_dim(),
            p.dim()
        )));
    }
    Ok(())
}

/// Log-density of every component at one point: `log α_j + log N(x | R m_j, T_j)`.
fn weighted_log_densities(p: &GmmParams, point: &NoisyPoint, index: usize) -> Result<Vec<f64>> {
    check_dims(p, point, index)?;
    let n_obs = point.obs_dim() as f64;
    (0..p.k())
        .map(|j| {
            let t = point.convolved_cov(&p.covs[j]);
            let chol = linalg::cholesky_with_jitter(t).ok_or(
                XdError::ConvolvedNotPositiveDefinite {
                    point: index,
                    component: j,
                },
            )?;
            let delta = &point.x - point.project_mean(&p.means[j]);
            let maha = delta.dot(&chol.solve(&delta));
            Ok(p.alpha[j].ln() - 0.5 * (n_obs * LN_2PI + linalg::chol_logdet(&chol) + maha))
        })
        .collect()
}

/// `log p(x_i)` for a single point. `index` is only used in error reports.
pub fn point_log_density(p: &GmmParams, point: &NoisyPoint, index: usize) -> Result<f64> {
    Ok(log_sum_exp(&weighted_log_densities(p, point, index)?))
}

/// Per-point log-densities, in data order.
pub fn point_log_densities(p: &GmmParams, data: &[NoisyPoint]) -> Result<Vec<f64>> {
    data.par_iter()
        .enumerate()
        .map(|(i, point)| point_log_density(p, point, i))
        .collect()
}

/// Total log-likelihood `Σ_i log Σ_j α_j N(x_i | R_i m_j, T_ij)`.
///
/// Points are evaluated in parallel; the reduction is a serial sum in data order, so the
/// result does not depend on the thread count.
pub fn log_likelihood(p: &GmmParams, data: &[NoisyPoint]) -> Result<f64> {
    Ok(point_log_densities(p, data)?.iter().sum())
}

/// Log-likelihood per point (nats/point).
pub fn mean_log_likelihood(p: &GmmParams, data: &[NoisyPoint]) -> Result<f64> {
    if data.is_empty() {
        return Err(XdError::InvalidConfig("cannot evaluate an empty dataset".into()));
    }
    Ok(log_likelihood(p, data)? / data.len() as f64)
}

/// E-step quantities for one observation; `index` is only used in error reports.
pub fn e_step_at(p: &GmmParams, point: &NoisyPoint, index: usize) -> Result<ComponentPosterior> {
    check_dims(p, point, index)?;
    let k = p.k();
    let n_obs = point.obs_dim() as f64;
    let mut logw = Vec::with_capacity(k);
    let mut cond_means = Vec::with_capacity(k);
    let mut cond_covs = Vec::with_capacity(k);
    for j in 0..k {
        let v = &p.covs[j];
        let t = point.convolved_cov(v);
        let chol = linalg::cholesky_with_jitter(t).ok_or(XdError::ConvolvedNotPositiveDefinite {
            point: index,
            component: j,
        })?;
        let delta = &point.x - point.project_mean(&p.means[j]);
        let t_inv_delta = chol.solve(&delta);
        logw.push(
            p.alpha[j].ln()
                - 0.5 * (n_obs * LN_2PI + linalg::chol_logdet(&chol) + delta.dot(&t_inv_delta)),
        );
        // V Rᵀ T⁻¹ (x - R m) and V - V Rᵀ T⁻¹ R V
        let vrt = point.cov_times_rt(v);
        cond_means.push(&p.means[j] + &vrt * t_inv_delta);
        let t_inv_rv = chol.solve(&vrt.transpose());
        let mut b = v - &vrt * t_inv_rv;
        linalg::symmetrize(&mut b);
        cond_covs.push(b);
    }
    let log_density = log_sum_exp(&logw);
    let resp = logw.iter().map(|l| (l - log_density).exp()).collect();
    Ok(ComponentPosterior {
        resp,
        cond_means,
        cond_covs,
        log_density,
    })
}

pub fn e_step(p: &GmmParams, point: &NoisyPoint) -> Result<ComponentPosterior> {
    e_step_at(p, point, 0)
}

/// E-step over a slice of points; `offset` is added to indices in error reports.
pub fn e_step_all(p: &GmmParams, data: &[NoisyPoint], offset: usize) -> Result<Vec<ComponentPosterior>> {
    data.par_iter()
        .enumerate()
        .map(|(i, point)| e_step_at(p, point, offset + i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Projection;
    use proptest::prelude::*;

    fn scalar_model(alpha: &[f64], means: &[f64], vars: &[f64]) -> GmmParams {
        GmmParams::new(
            alpha.to_vec(),
            means.iter().map(|&m| DVector::from_element(1, m)).collect(),
            vars.iter().map(|&v| DMatrix::from_element(1, 1, v)).collect(),
        )
        .unwrap()
    }

    fn scalar_point(x: f64, s: f64) -> NoisyPoint {
        NoisyPoint::new(
            DVector::from_element(1, x),
            DMatrix::from_element(1, 1, s),
            Projection::Identity,
        )
        .unwrap()
    }

    #[test]
    fn convolved_cov_examples() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        let exact = NoisyPoint::exact(DVector::zeros(2));
        assert_eq!(convolved_cov(&i2, &exact), i2);
        let noisy = NoisyPoint::new(DVector::zeros(2), i2.clone(), Projection::Identity).unwrap();
        assert_eq!(convolved_cov(&i2, &noisy), &i2 * 2.0);
        let projected = NoisyPoint::new(
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 3.0),
            Projection::Matrix(DMatrix::from_row_slice(1, 2, &[1.0, 0.0])),
        )
        .unwrap();
        assert_eq!(convolved_cov(&i2, &projected), DMatrix::from_element(1, 1, 4.0));
    }

    #[test]
    fn log_likelihood_examples() {
        let p = scalar_model(&[1.0], &[0.0], &[1.0]);
        let ll = log_likelihood(&p, &[scalar_point(0.0, 0.0)]).unwrap();
        assert!((ll + 0.918_938_533_204_672_7).abs() < 1e-12);
        let ll = log_likelihood(&p, &[scalar_point(0.0, 1.0)]).unwrap();
        assert!((ll + 1.265_512_123_484_645_4).abs() < 1e-12);
        let p = scalar_model(&[0.5, 0.5], &[-1.0, 1.0], &[1.0, 1.0]);
        let ll = log_likelihood(&p, &[scalar_point(0.0, 0.0)]).unwrap();
        // both components contribute exp(-1/2)/sqrt(2π)
        assert!((ll + 1.418_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn symmetric_components_split_evenly() {
        let p = scalar_model(&[0.5, 0.5], &[-2.0, 2.0], &[1.5, 1.5]);
        let post = e_step(&p, &scalar_point(0.0, 0.3)).unwrap();
        assert!((post.resp[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn noiseless_posterior_collapses_to_observation() {
        let p = GmmParams::new(
            vec![0.3, 0.7],
            vec![DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![-1.0, 0.0])],
            vec![
                DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
                DMatrix::identity(2, 2),
            ],
        )
        .unwrap();
        let x = DVector::from_vec(vec![0.4, -0.3]);
        let post = e_step(&p, &NoisyPoint::exact(x.clone())).unwrap();
        for j in 0..2 {
            assert!((&post.cond_means[j] - &x).amax() < 1e-12);
            assert!(post.cond_covs[j].amax() < 1e-12);
        }
    }

    #[test]
    fn huge_noise_returns_prior() {
        let p = scalar_model(&[0.3, 0.7], &[0.0, 0.5], &[1.0, 1.0]);
        let post = e_step(&p, &scalar_point(0.7, 1e12)).unwrap();
        for j in 0..2 {
            assert!((post.resp[j] - p.alpha[j]).abs() < 1e-6);
            assert!((post.cond_means[j][0] - p.means[j][0]).abs() < 1e-6);
            assert!((post.cond_covs[j][(0, 0)] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rank_deficient_noise_gets_jitter() {
        // V and S both singular along the same direction
        let p = GmmParams {
            alpha: vec![1.0],
            means: vec![DVector::zeros(2)],
            covs: vec![DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 + 1e-15])],
        };
        let pt = NoisyPoint::exact(DVector::from_vec(vec![0.1, 0.1]));
        assert!(log_likelihood(&p, &[pt]).is_ok());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = scalar_model(&[1.0], &[0.0], &[1.0]);
        let pt = NoisyPoint::exact(DVector::zeros(2));
        assert!(matches!(log_likelihood(&p, &[pt]), Err(XdError::Dimension(_))));
    }

    #[test]
    fn log_sum_exp_handles_far_components() {
        assert!((log_sum_exp(&[-1000.0, -1000.0]) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    proptest! {
        #[test]
        fn permutation_invariance(
            raw in prop::collection::vec(0.1f64..1.0, 3),
            mu in prop::collection::vec(-3.0f64..3.0, 6),
            x in prop::collection::vec(-3.0f64..3.0, 2),
            s in 0.0f64..2.0,
        ) {
            let total: f64 = raw.iter().sum();
            let p = GmmParams::new(
                raw.iter().map(|w| w / total).collect(),
                mu.chunks(2).map(|c| DVector::from_row_slice(c)).collect(),
                (0..3).map(|j| DMatrix::identity(2, 2) * (0.5 + j as f64)).collect(),
            ).unwrap();
            let pt = NoisyPoint::new(
                DVector::from_vec(x),
                DMatrix::identity(2, 2) * s,
                Projection::Identity,
            ).unwrap();
            let order = [2usize, 0, 1];
            let q = p.permuted(&order);
            let a = e_step(&p, &pt).unwrap();
            let b = e_step(&q, &pt).unwrap();
            prop_assert!((a.log_density - b.log_density).abs() < 1e-12);
            for (new, &old) in order.iter().enumerate() {
                prop_assert!((a.resp[old] - b.resp[new]).abs() < 1e-14);
                prop_assert_eq!(&a.cond_means[old], &b.cond_means[new]);
                prop_assert_eq!(&a.cond_covs[old], &b.cond_covs[new]);
            }
            let total: f64 = a.resp.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(a.resp.iter().all(|&r| (0.0..=1.0).contains(&r)));
        }
    }
}
