//! Sufficient-statistic bookkeeping and the M-step variants for online EM.
//!
//! Everything here is generic over the scalar type so the covariance update can be
//! exercised in single precision, where the direct `Ŝ/q̂ - m mᵀ` form loses most of its
//! digits once means are large relative to the component widths.

use nalgebra::{DMatrix, DVector, RealField};
use rayon::prelude::*;

use crate::error::{Result, XdError};
use crate::likelihood::{self, ComponentPosterior};
use crate::linalg::symmetrize;
use crate::params::{GmmParams, NoisyPoint};

/// Fraction of the minibatch size below which a component's responsibility mass counts
/// as collapsed.
pub const MASS_FLOOR_FRACTION: f64 = 1e-8;

/// Per-component sums `q_j`, `s_j`, `S_j`, either for one minibatch or as running
/// estimates over the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SuffStatAccumulator<T: RealField + Copy = f64> {
    pub q_hat: Vec<T>,
    pub s_hat: Vec<DVector<T>>,
    pub ss_hat: Vec<DMatrix<T>>,
}

impl<T: RealField + Copy> SuffStatAccumulator<T> {
    pub fn zeros(k: usize, d: usize) -> Self {
        Self {
            q_hat: vec![T::zero(); k],
            s_hat: vec![DVector::zeros(d); k],
            ss_hat: vec![DMatrix::zeros(d, d); k],
        }
    }

    /// Statistics a minibatch of size `batch_size` would produce if it matched `p` exactly:
    /// `q̂ = α M`, `ŝ = q̂ m`, `Ŝ = q̂ (V + m mᵀ)`.
    pub fn from_params(p: &GmmParams<T>, batch_size: T) -> Self {
        let q_hat: Vec<T> = p.alpha.iter().map(|&a| a * batch_size).collect();
        let s_hat = (0..p.k()).map(|j| &p.means[j] * q_hat[j]).collect();
        let ss_hat = (0..p.k())
            .map(|j| (&p.covs[j] + &p.means[j] * p.means[j].transpose()) * q_hat[j])
            .collect();
        Self {
            q_hat,
            s_hat,
            ss_hat,
        }
    }

    pub fn k(&self) -> usize {
        self.q_hat.len()
    }

    pub fn total_mass(&self) -> T {
        self.q_hat.iter().fold(T::zero(), |acc, &q| acc + q)
    }
}

/// E-step output of one point, stored in the scalar type of the update.
#[derive(Debug, Clone, PartialEq)]
pub struct PointPosterior<T: RealField + Copy = f64> {
    pub resp: Vec<T>,
    pub cond_means: Vec<DVector<T>>,
    pub cond_covs: Vec<DMatrix<T>>,
}

impl From<ComponentPosterior> for PointPosterior<f64> {
    fn from(p: ComponentPosterior) -> Self {
        Self {
            resp: p.resp,
            cond_means: p.cond_means,
            cond_covs: p.cond_covs,
        }
    }
}

/// Minibatch sums together with the per-point posteriors they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct MinibatchStats<T: RealField + Copy = f64> {
    pub sums: SuffStatAccumulator<T>,
    pub points: Vec<PointPosterior<T>>,
}

impl<T: RealField + Copy> MinibatchStats<T> {
    /// `q_j = Σ r_ij`, `s_j = Σ r_ij b_ij`, `S_j = Σ r_ij (b_ij b_ijᵀ + B_ij)`, summed in
    /// point order.
    pub fn from_points(points: Vec<PointPosterior<T>>) -> Self {
        let k = points.first().map_or(0, |p| p.resp.len());
        let d = points
            .first()
            .and_then(|p| p.cond_means.first())
            .map_or(0, |b| b.len());
        let mut sums = SuffStatAccumulator::zeros(k, d);
        for pt in &points {
            for j in 0..k {
                let r = pt.resp[j];
                let b = &pt.cond_means[j];
                sums.q_hat[j] += r;
                sums.s_hat[j] += b * r;
                sums.ss_hat[j] += (b * b.transpose() + &pt.cond_covs[j]) * r;
            }
        }
        Self { sums, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Multiplies every responsibility (and hence every sum) by `factor`.
    pub fn scale(&mut self, factor: T) {
        for pt in &mut self.points {
            pt.resp.iter_mut().for_each(|r| *r *= factor);
        }
        for j in 0..self.sums.k() {
            self.sums.q_hat[j] *= factor;
            self.sums.s_hat[j] *= factor;
            self.sums.ss_hat[j] *= factor;
        }
    }

    /// Responsibility-weighted moments of the conditional means for component `j`:
    /// `(q_b, m_b, V_b)` with `m_b = Σ r b / q_b` and
    /// `V_b = Σ r [(b - m_b)(b - m_b)ᵀ + B] / q_b`. Two passes, so `V_b` is formed from
    /// centred quantities only.
    pub fn component_moments(&self, j: usize) -> (T, DVector<T>, DMatrix<T>) {
        let q_b = self.sums.q_hat[j];
        let d = self.sums.s_hat[j].len();
        if q_b <= T::zero() {
            return (T::zero(), DVector::zeros(d), DMatrix::zeros(d, d));
        }
        let m_b = &self.sums.s_hat[j] / q_b;
        let mut v_b = DMatrix::zeros(d, d);
        for pt in &self.points {
            let r = pt.resp[j];
            let c = &pt.cond_means[j] - &m_b;
            v_b += (&c * c.transpose() + &pt.cond_covs[j]) * r;
        }
        v_b /= q_b;
        (q_b, m_b, v_b)
    }
}

impl MinibatchStats<f64> {
    /// Single-precision copy, with the sums recomputed in `f32`.
    pub fn to_f32(&self) -> MinibatchStats<f32> {
        MinibatchStats::from_points(
            self.points
                .iter()
                .map(|p| PointPosterior {
                    resp: p.resp.iter().map(|&r| r as f32).collect(),
                    cond_means: p.cond_means.iter().map(|b| b.map(|v| v as f32)).collect(),
                    cond_covs: p.cond_covs.iter().map(|b| b.map(|v| v as f32)).collect(),
                })
                .collect(),
        )
    }
}

/// Runs the E-step on every point of a minibatch and sums the sufficient statistics.
///
/// `offset` is the index of the first point in the dataset, used in error reports.
pub fn minibatch_stats(p: &GmmParams, batch: &[&NoisyPoint], offset: usize) -> Result<MinibatchStats> {
    if batch.is_empty() {
        return Err(XdError::InvalidConfig("empty minibatch".into()));
    }
    let posts: Vec<PointPosterior> = batch
        .par_iter()
        .enumerate()
        .map(|(i, pt)| likelihood::e_step_at(p, pt, offset + i).map(PointPosterior::from))
        .collect::<Result<_>>()?;
    Ok(MinibatchStats::from_points(posts))
}

/// `φ̂ ← (1 - λ) φ̂ + λ φ` for every statistic.
pub fn accumulate<T: RealField + Copy>(
    acc: &SuffStatAccumulator<T>,
    batch: &SuffStatAccumulator<T>,
    step: T,
) -> SuffStatAccumulator<T> {
    let keep = T::one() - step;
    SuffStatAccumulator {
        q_hat: acc
            .q_hat
            .iter()
            .zip(&batch.q_hat)
            .map(|(&a, &b)| a * keep + b * step)
            .collect(),
        s_hat: acc
            .s_hat
            .iter()
            .zip(&batch.s_hat)
            .map(|(a, b)| a * keep + b * step)
            .collect(),
        ss_hat: acc
            .ss_hat
            .iter()
            .zip(&batch.ss_hat)
            .map(|(a, b)| a * keep + b * step)
            .collect(),
    }
}

fn check_mass<T: RealField + Copy>(q: T, batch_size: T, component: usize) -> Result<()> {
    let floor = batch_size * T::from_subset(&MASS_FLOOR_FRACTION);
    if q > floor {
        Ok(())
    } else {
        Err(XdError::DegenerateComponent {
            component,
            iteration: 0,
            mass: q.to_subset().unwrap_or(f64::NAN),
            floor: floor.to_subset().unwrap_or(f64::NAN),
        })
    }
}

/// Direct normalisation `α = q̂/M`, `m = ŝ/q̂`, `V = Ŝ/q̂ - m mᵀ`.
///
/// Suffers catastrophic cancellation in `V` when the means are large compared with the
/// component widths; kept for batch EM and as a reference for [`m_step_stable`].
pub fn m_step_naive<T: RealField + Copy>(
    acc: &SuffStatAccumulator<T>,
    batch_size: T,
) -> Result<GmmParams<T>> {
    let k = acc.k();
    let mut p = GmmParams {
        alpha: Vec::with_capacity(k),
        means: Vec::with_capacity(k),
        covs: Vec::with_capacity(k),
    };
    for j in 0..k {
        let q = acc.q_hat[j];
        check_mass(q, batch_size, j)?;
        let m = &acc.s_hat[j] / q;
        let mut v = &acc.ss_hat[j] / q - &m * m.transpose();
        symmetrize(&mut v);
        p.alpha.push(q / batch_size);
        p.means.push(m);
        p.covs.push(v);
    }
    Ok(p)
}

/// `s (V + c cᵀ) - d dᵀ`: recentres the scaled covariance `V` (about `c`) onto `d`.
///
/// Evaluated as `sV + ½(c' - d)(c' + d)ᵀ + ½(c' + d)(c' - d)ᵀ` with `c' = √s c`, which is
/// exactly `sV + s c cᵀ - d dᵀ` without ever forming the two large outer products.
pub fn adjust<T: RealField + Copy>(v: &DMatrix<T>, s: T, c: &DVector<T>, d: &DVector<T>) -> DMatrix<T> {
    let half = T::from_subset(&0.5);
    let cs = c * s.sqrt();
    let minus = &cs - d;
    let plus = &cs + d;
    let cross = &minus * plus.transpose();
    let mut out = v * s + (&cross + cross.transpose()) * half;
    symmetrize(&mut out);
    out
}

/// `s (V + (c - d)(c - d)ᵀ)`: the same recentring as [`adjust`] up to terms linear in
/// `d` that cancel when the weighted contributions being combined average to `d`.
pub fn recentre<T: RealField + Copy>(v: &DMatrix<T>, s: T, c: &DVector<T>, d: &DVector<T>) -> DMatrix<T> {
    let diff = c - d;
    let mut out = (v + &diff * diff.transpose()) * s;
    symmetrize(&mut out);
    out
}

/// Online M-step with the covariance update computed from centred quantities.
///
/// `prev` are the (unregularised) parameters the accumulator `acc_prev` corresponds to.
/// Weights and means come from the accumulated `q̂`, `ŝ`; the covariance is combined from
/// the previous covariance and the minibatch covariance `V_b`, each recentred onto the new
/// mean, so no step subtracts two quantities of size `|m|²`. The returned accumulator stores
/// `Ŝ = q̂ (V + m mᵀ)` for the returned `V`. Regularisation is applied separately with
/// [`regularise`] so that it never feeds back into the running statistics.
pub fn m_step_stable<T: RealField + Copy>(
    acc_prev: &SuffStatAccumulator<T>,
    prev: &GmmParams<T>,
    batch: &MinibatchStats<T>,
    step: T,
    batch_size: T,
) -> Result<(GmmParams<T>, SuffStatAccumulator<T>)> {
    let k = acc_prev.k();
    let mut acc = accumulate(acc_prev, &batch.sums, step);
    let keep = T::one() - step;
    let mut p = GmmParams {
        alpha: Vec::with_capacity(k),
        means: Vec::with_capacity(k),
        covs: Vec::with_capacity(k),
    };
    for j in 0..k {
        let q_t = acc.q_hat[j];
        check_mass(q_t, batch_size, j)?;
        let m_t = &acc.s_hat[j] / q_t;
        let (q_b, m_b, v_b) = batch.component_moments(j);
        let old = recentre(&prev.covs[j], acc_prev.q_hat[j] / q_t, &prev.means[j], &m_t);
        let new = recentre(&v_b, q_b / q_t, &m_b, &m_t);
        let mut v_t = old * keep + new * step;
        symmetrize(&mut v_t);
        acc.ss_hat[j] = (&v_t + &m_t * m_t.transpose()) * q_t;
        p.alpha.push(q_t / batch_size);
        p.means.push(m_t);
        p.covs.push(v_t);
    }
    Ok((p, acc))
}

/// Copy of `p` with `reg_w` added to every covariance diagonal.
pub fn regularise<T: RealField + Copy>(p: &GmmParams<T>, reg_w: T) -> GmmParams<T> {
    let mut out = p.clone();
    for v in &mut out.covs {
        for a in 0..v.nrows() {
            v[(a, a)] += reg_w;
        }
    }
    out
}

/// The same update written with [`adjust`] on each branch.
///
/// Algebraically identical to [`m_step_stable`]; numerically each branch carries a term of
/// size `|s - 1| |m|²` that only cancels in the sum, so single precision loses accuracy
/// when component weights move.
pub fn m_step_adjust<T: RealField + Copy>(
    acc_prev: &SuffStatAccumulator<T>,
    prev: &GmmParams<T>,
    batch: &MinibatchStats<T>,
    step: T,
    batch_size: T,
) -> Result<(GmmParams<T>, SuffStatAccumulator<T>)> {
    let k = acc_prev.k();
    let mut acc = accumulate(acc_prev, &batch.sums, step);
    let keep = T::one() - step;
    let mut p = GmmParams {
        alpha: Vec::with_capacity(k),
        means: Vec::with_capacity(k),
        covs: Vec::with_capacity(k),
    };
    for j in 0..k {
        let q_t = acc.q_hat[j];
        check_mass(q_t, batch_size, j)?;
        let m_t = &acc.s_hat[j] / q_t;
        let (q_b, m_b, v_b) = batch.component_moments(j);
        let old = adjust(&prev.covs[j], acc_prev.q_hat[j] / q_t, &prev.means[j], &m_t);
        let new = adjust(&v_b, q_b / q_t, &m_b, &m_t);
        let mut v_t = old * keep + new * step;
        symmetrize(&mut v_t);
        acc.ss_hat[j] = (&v_t + &m_t * m_t.transpose()) * q_t;
        p.alpha.push(q_t / batch_size);
        p.means.push(m_t);
        p.covs.push(v_t);
    }
    Ok((p, acc))
}
