//! Minibatch loss and its analytic gradient in unconstrained coordinates.
//!
//! For point `i` and component `j`, with `δ = x - R m_j` and `T = R L Lᵀ Rᵀ + S`:
//!
//! - `∂ℓ/∂m_j = Rᵀ T⁻¹ δ`
//! - `∂ℓ/∂V_j = Rᵀ G R`, `G = ½ (T⁻¹ δ δᵀ T⁻¹ - T⁻¹)`
//! - `∂ℓ/∂L_j = 2 (∂ℓ/∂V_j) L_j`, and the log-diagonal picks up a factor `L_qq`
//! - `∂(-log p)/∂z_k = α_k - r_k`
//!
//! Covariance gradients are summed over the minibatch before the chain rule to `L`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Result, XdError};
use crate::likelihood::{check_dims, log_sum_exp};
use crate::linalg::{self, LN_2PI};
use crate::params::{constrain, GmmParams, NoisyPoint, Projection, UnconstrainedParams, LOGDIAG_CLAMP};

/// `Σ_j w / tr(V_j)`.
pub fn trace_penalty(p: &GmmParams, reg_w: f64) -> f64 {
    p.covs.iter().map(|v| reg_w / v.trace()).sum()
}

/// `-(1/M) Σ_i log p(x_i) + Σ_j w / tr(V_j)`.
pub fn loss(u: &UnconstrainedParams, batch: &[&NoisyPoint], reg_w: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(XdError::InvalidConfig("empty minibatch".into()));
    }
    let p = constrain(u);
    let logs: Vec<f64> = batch
        .par_iter()
        .enumerate()
        .map(|(i, pt)| crate::likelihood::point_log_density(&p, pt, i))
        .collect::<Result<_>>()?;
    Ok(-logs.iter().sum::<f64>() / batch.len() as f64 + trace_penalty(&p, reg_w))
}

/// Gradient contributions of one point, before averaging.
struct PointGrad {
    log_density: f64,
    /// `r_k - α_k`, to be negated.
    logits: Vec<f64>,
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
}

fn point_grad(p: &GmmParams, pt: &NoisyPoint, index: usize) -> Result<PointGrad> {
    check_dims(p, pt, index)?;
    let k = p.k();
    let n_obs = pt.obs_dim() as f64;
    let mut logw = Vec::with_capacity(k);
    let mut mean_dirs = Vec::with_capacity(k);
    let mut cov_dirs = Vec::with_capacity(k);
    for j in 0..k {
        let t = pt.convolved_cov(&p.covs[j]);
        let chol = linalg::cholesky_with_jitter(t).ok_or(XdError::ConvolvedNotPositiveDefinite {
            point: index,
            component: j,
        })?;
        let delta = &pt.x - pt.project_mean(&p.means[j]);
        let a = chol.solve(&delta);
        logw.push(p.alpha[j].ln() - 0.5 * (n_obs * LN_2PI + linalg::chol_logdet(&chol) + delta.dot(&a)));
        let g = (&a * a.transpose() - chol.inverse()) * 0.5;
        match &pt.projection {
            Projection::Identity => {
                mean_dirs.push(a);
                cov_dirs.push(g);
            }
            Projection::Matrix(r) => {
                mean_dirs.push(r.transpose() * a);
                cov_dirs.push(r.transpose() * g * r);
            }
        }
    }
    let log_density = log_sum_exp(&logw);
    let resp: Vec<f64> = logw.iter().map(|l| (l - log_density).exp()).collect();
    Ok(PointGrad {
        log_density,
        logits: (0..k).map(|j| resp[j] - p.alpha[j]).collect(),
        means: mean_dirs.into_iter().zip(&resp).map(|(m, r)| m * *r).collect(),
        covs: cov_dirs.into_iter().zip(&resp).map(|(c, r)| c * *r).collect(),
    })
}

/// Loss and exact gradient with respect to every unconstrained coordinate.
pub fn loss_grad(u: &UnconstrainedParams, batch: &[&NoisyPoint], reg_w: f64) -> Result<(f64, UnconstrainedParams)> {
    if batch.is_empty() {
        return Err(XdError::InvalidConfig("empty minibatch".into()));
    }
    let (k, d) = (u.k(), u.dim());
    let p = constrain(u);
    let factors = u.cholesky_factors();
    let per_point: Vec<PointGrad> = batch
        .par_iter()
        .enumerate()
        .map(|(i, pt)| point_grad(&p, pt, i))
        .collect::<Result<_>>()?;

    let scale = 1.0 / batch.len() as f64;
    let mut log_sum = 0.0;
    let mut g_logits = DVector::zeros(k);
    let mut g_means = vec![DVector::zeros(d); k];
    let mut g_covs = vec![DMatrix::zeros(d, d); k];
    for pg in &per_point {
        log_sum += pg.log_density;
        for j in 0..k {
            g_logits[j] += pg.logits[j];
            g_means[j] += &pg.means[j];
            g_covs[j] += &pg.covs[j];
        }
    }

    let mut grad = UnconstrainedParams::zeros(k, d);
    grad.logits = -g_logits * scale;
    for j in 0..k {
        grad.means[j] = -&g_means[j] * scale;
        // dLoss/dV: likelihood part plus the trace penalty -w / tr(V)² · I
        let tr = p.covs[j].trace();
        let mut g_v = -&g_covs[j] * scale;
        for a in 0..d {
            g_v[(a, a)] -= reg_w / (tr * tr);
        }
        let g_l = (&g_v + g_v.transpose()) * &factors[j];
        for a in 0..d {
            for b in 0..a {
                grad.chol_lower[j][(a, b)] = g_l[(a, b)];
            }
            let raw = u.chol_logdiag[j][a];
            grad.chol_logdiag[j][a] = if raw.abs() > LOGDIAG_CLAMP {
                0.0
            } else {
                g_l[(a, a)] * factors[j][(a, a)]
            };
        }
    }
    let value = -log_sum * scale + trace_penalty(&p, reg_w);
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::unconstrain;

    fn scalar_point(x: f64) -> NoisyPoint {
        NoisyPoint::exact(DVector::from_element(1, x))
    }

    #[test]
    fn standard_normal_loss() {
        let u = UnconstrainedParams::zeros(1, 1);
        let pt = scalar_point(0.0);
        let l = loss(&u, &[&pt], 0.0).unwrap();
        assert!((l - 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn penalty_on_identity_covariances() {
        let (k, d) = (3, 2);
        let u = UnconstrainedParams::zeros(k, d);
        let p = constrain(&u);
        let pen = trace_penalty(&p, 1e-3);
        assert!((pen - k as f64 * 1e-3 / d as f64).abs() < 1e-15);
        let pt = NoisyPoint::exact(DVector::zeros(d));
        let with = loss(&u, &[&pt], 1e-3).unwrap();
        let without = loss(&u, &[&pt], 0.0).unwrap();
        assert!((with - without - pen).abs() < 1e-15);
    }

    #[test]
    fn loss_matches_likelihood_module() {
        let p = crate::data::Preset::ThreeBlobs.truth();
        let u = unconstrain(&p).unwrap();
        let (ds, _) = crate::data::generate_synthetic(
            &p,
            &crate::data::Preset::ThreeBlobs.noise(),
            &Projection::Identity,
            40,
            1,
        )
        .unwrap();
        let refs: Vec<&NoisyPoint> = ds.points.iter().collect();
        let reg_w = 0.05;
        let expected = -crate::likelihood::mean_log_likelihood(&constrain(&u), &ds.points).unwrap()
            + trace_penalty(&constrain(&u), reg_w);
        let got = loss(&u, &refs, reg_w).unwrap();
        assert!((got - expected).abs() < 1e-12 * expected.abs());
        let (via_grad, _) = loss_grad(&u, &refs, reg_w).unwrap();
        assert!((via_grad - got).abs() < 1e-12 * got.abs());
    }

    #[test]
    fn mean_gradient_vanishes_at_observation() {
        let x = DVector::from_vec(vec![0.3, -1.2]);
        let mut u = UnconstrainedParams::zeros(1, 2);
        u.means[0] = x.clone();
        u.chol_lower[0][(1, 0)] = 0.4;
        let pt = NoisyPoint::exact(x);
        let (_, g) = loss_grad(&u, &[&pt], 0.0).unwrap();
        assert!(g.means[0].amax() < 1e-15);
    }

    #[test]
    fn logit_gradient_sums_to_zero() {
        let mut u = UnconstrainedParams::zeros(3, 1);
        u.logits = DVector::from_vec(vec![0.2, -1.0, 0.7]);
        u.means = vec![DVector::from_element(1, -1.0), DVector::zeros(1), DVector::from_element(1, 2.0)];
        let pts: Vec<NoisyPoint> = [0.1, 1.5, -2.0].iter().map(|&x| scalar_point(x)).collect();
        let refs: Vec<&NoisyPoint> = pts.iter().collect();
        let (_, g) = loss_grad(&u, &refs, 0.0).unwrap();
        assert!(g.logits.sum().abs() < 1e-15);
    }

    #[test]
    fn clamped_logdiag_has_zero_gradient() {
        let mut u = UnconstrainedParams::zeros(1, 1);
        u.chol_logdiag[0][0] = 31.0;
        let pt = scalar_point(0.5);
        let (_, g) = loss_grad(&u, &[&pt], 0.0).unwrap();
        assert_eq!(g.chol_logdiag[0][0], 0.0);
    }

    #[test]
    fn penalty_is_monotone_in_reg_w() {
        let u = UnconstrainedParams::zeros(2, 2);
        let pt = NoisyPoint::exact(DVector::from_vec(vec![1.0, 1.0]));
        let mut last = f64::NEG_INFINITY;
        for w in [0.0, 1e-4, 1e-3, 0.1, 1.0] {
            let l = loss(&u, &[&pt], w).unwrap();
            assert!(l >= last);
            last = l;
        }
    }
}
