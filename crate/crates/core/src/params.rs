//! Mixture parameters, noisy observations and the unconstrained reparameterisation used
//! by gradient-based fitting.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, RealField};
use serde::{Deserialize, Serialize};

use crate::error::{Result, XdError};
use crate::linalg;

/// Bound on the log of each Cholesky diagonal entry; keeps `exp` finite during optimisation.
pub const LOGDIAG_CLAMP: f64 = 30.0;

/// Linear map from latent space to observation space.
#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    Identity,
    /// `d_obs x d_latent`.
    Matrix(DMatrix<f64>),
}

/// One observation `x = R v + eps`, `eps ~ N(0, S)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyPoint {
    pub x: DVector<f64>,
    pub noise: DMatrix<f64>,
    pub projection: Projection,
}

impl NoisyPoint {
    /// Builds a point after checking shapes and that the noise covariance is symmetric PSD.
    pub fn new(x: DVector<f64>, noise: DMatrix<f64>, projection: Projection) -> Result<Self> {
        let n = x.len();
        if noise.nrows() != n || noise.ncols() != n {
            return Err(XdError::Dimension(format!(
                "noise covariance is {}x{} for an observation of length {n}",
                noise.nrows(),
                noise.ncols()
            )));
        }
        if let Projection::Matrix(r) = &projection {
            if r.nrows() != n {
                return Err(XdError::Dimension(format!(
                    "projection has {} rows for an observation of length {n}",
                    r.nrows()
                )));
            }
        }
        if !linalg::is_psd(&noise) {
            return Err(XdError::InvalidParams(
                "noise covariance is not symmetric positive semidefinite".into(),
            ));
        }
        Ok(Self {
            x,
            noise,
            projection,
        })
    }

    /// Noise-free point observed through the identity.
    pub fn exact(x: DVector<f64>) -> Self {
        let n = x.len();
        Self {
            x,
            noise: DMatrix::zeros(n, n),
            projection: Projection::Identity,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.x.len()
    }

    pub fn latent_dim(&self) -> usize {
        match &self.projection {
            Projection::Identity => self.x.len(),
            Projection::Matrix(r) => r.ncols(),
        }
    }

    /// `R m`.
    pub fn project_mean(&self, m: &DVector<f64>) -> DVector<f64> {
        match &self.projection {
            Projection::Identity => m.clone(),
            Projection::Matrix(r) => r * m,
        }
    }

    /// `T = R V Rᵀ + S`, the covariance of the observation under a component with covariance `V`.
    pub fn convolved_cov(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let mut t = match &self.projection {
            Projection::Identity => v + &self.noise,
            Projection::Matrix(r) => r * v * r.transpose() + &self.noise,
        };
        linalg::symmetrize(&mut t);
        t
    }

    /// `V Rᵀ` (`d_latent x d_obs`).
    pub fn cov_times_rt(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.projection {
            Projection::Identity => v.clone(),
            Projection::Matrix(r) => v * r.transpose(),
        }
    }
}

/// Mixture weights, means and covariances.
///
/// Generic over the scalar so the minibatch update can also be run in single precision;
/// everything outside the update machinery uses `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams<T: RealField + Copy = f64> {
    pub alpha: Vec<T>,
    pub means: Vec<DVector<T>>,
    pub covs: Vec<DMatrix<T>>,
}

impl<T: RealField + Copy> GmmParams<T> {
    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }

}

impl GmmParams {
    /// Single-precision copy.
    pub fn to_f32(&self) -> GmmParams<f32> {
        GmmParams {
            alpha: self.alpha.iter().map(|&a| a as f32).collect(),
            means: self.means.iter().map(|m| m.map(|v| v as f32)).collect(),
            covs: self.covs.iter().map(|v| v.map(|x| x as f32)).collect(),
        }
    }

    /// Validated constructor.
    pub fn new(alpha: Vec<f64>, means: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        let p = Self { alpha, means, covs };
        p.validate()?;
        Ok(p)
    }

    /// Equal weights, given means, identity covariances.
    pub fn with_identity_covs(means: Vec<DVector<f64>>) -> Result<Self> {
        let k = means.len();
        let d = means.first().map_or(0, |m| m.len());
        Self::new(
            vec![1.0 / k as f64; k],
            means,
            vec![DMatrix::identity(d, d); k],
        )
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 {
            return Err(XdError::InvalidParams("mixture has no components".into()));
        }
        if self.means.len() != k || self.covs.len() != k {
            return Err(XdError::InvalidParams(format!(
                "{k} weights but {} means and {} covariances",
                self.means.len(),
                self.covs.len()
            )));
        }
        let d = self.dim();
        if d == 0 {
            return Err(XdError::InvalidParams("zero-dimensional mixture".into()));
        }
        if let Some(j) = self.alpha.iter().position(|a| !(*a > 0.0) || !a.is_finite()) {
            return Err(XdError::InvalidParams(format!(
                "weight of component {j} is {} (must be positive)",
                self.alpha[j]
            )));
        }
        let total: f64 = self.alpha.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(XdError::InvalidParams(format!("weights sum to {total}, not 1")));
        }
        for j in 0..k {
            if self.means[j].len() != d || self.means[j].iter().any(|v| !v.is_finite()) {
                return Err(XdError::InvalidParams(format!("mean of component {j} is malformed")));
            }
            let v = &self.covs[j];
            if v.nrows() != d || v.ncols() != d {
                return Err(XdError::InvalidParams(format!(
                    "covariance of component {j} is {}x{}, expected {d}x{d}",
                    v.nrows(),
                    v.ncols()
                )));
            }
            let scale = v.amax().max(1.0);
            if linalg::asymmetry(v) > 1e-9 * scale || Cholesky::new(v.clone()).is_none() {
                return Err(XdError::NotPositiveDefinite { component: j });
            }
        }
        Ok(())
    }

    /// Reorders components; `order[new] = old`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            alpha: order.iter().map(|&j| self.alpha[j]).collect(),
            means: order.iter().map(|&j| self.means[j].clone()).collect(),
            covs: order.iter().map(|&j| self.covs[j].clone()).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            k: self.k(),
            d: self.dim(),
            alpha: self.alpha.clone(),
            means: self.means.iter().map(|m| m.iter().copied().collect()).collect(),
            covs: self
                .covs
                .iter()
                .map(|v| v.row_iter().map(|r| r.iter().copied().collect()).collect())
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        let (k, d) = (file.k, file.d);
        if file.alpha.len() != k || file.means.len() != k || file.covs.len() != k {
            return Err(XdError::InvalidParams(format!(
                "checkpoint declares k={k} but holds {} weights, {} means, {} covariances",
                file.alpha.len(),
                file.means.len(),
                file.covs.len()
            )));
        }
        let mut means = Vec::with_capacity(k);
        let mut covs = Vec::with_capacity(k);
        for j in 0..k {
            if file.means[j].len() != d {
                return Err(XdError::InvalidParams(format!("mean {j} does not have length {d}")));
            }
            means.push(DVector::from_vec(file.means[j].clone()));
            let rows = &file.covs[j];
            if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                return Err(XdError::InvalidParams(format!("covariance {j} is not {d}x{d}")));
            }
            covs.push(DMatrix::from_fn(d, d, |a, b| rows[a][b]));
        }
        Self::new(file.alpha, means, covs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| XdError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| XdError::io(path, e))?;
        Self::from_json(&text)
    }
}

/// On-disk model checkpoint. `serde_json` writes floats in shortest round-trip form, so a
/// save/load cycle is bit-exact.
#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    k: usize,
    d: usize,
    alpha: Vec<f64>,
    means: Vec<Vec<f64>>,
    covs: Vec<Vec<Vec<f64>>>,
}

/// Unconstrained coordinates: softmax logits for the weights and log-diagonal Cholesky
/// factors for the covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct UnconstrainedParams {
    pub logits: DVector<f64>,
    pub means: Vec<DVector<f64>>,
    /// Only the strictly lower triangle is read.
    pub chol_lower: Vec<DMatrix<f64>>,
    pub chol_logdiag: Vec<DVector<f64>>,
}

impl UnconstrainedParams {
    pub fn zeros(k: usize, d: usize) -> Self {
        Self {
            logits: DVector::zeros(k),
            means: vec![DVector::zeros(d); k],
            chol_lower: vec![DMatrix::zeros(d, d); k],
            chol_logdiag: vec![DVector::zeros(d); k],
        }
    }

    pub fn k(&self) -> usize {
        self.logits.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }

    pub fn num_params(&self) -> usize {
        let d = self.dim();
        self.k() * (1 + 2 * d + d * (d - 1) / 2)
    }

    /// Flattens the free coordinates: logits, then per component the mean, the strictly
    /// lower Cholesky entries in row-major order and the log-diagonal.
    pub fn to_flat(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = Vec::with_capacity(self.num_params());
        out.extend(self.logits.iter());
        for j in 0..self.k() {
            out.extend(self.means[j].iter());
            for a in 1..d {
                for b in 0..a {
                    out.push(self.chol_lower[j][(a, b)]);
                }
            }
            out.extend(self.chol_logdiag[j].iter());
        }
        out
    }

    /// Inverse of [`to_flat`](Self::to_flat) for the given shape.
    pub fn from_flat(k: usize, d: usize, flat: &[f64]) -> Self {
        let mut u = Self::zeros(k, d);
        assert_eq!(flat.len(), u.num_params(), "flat parameter vector has wrong length");
        let mut it = flat.iter().copied();
        let mut next = || it.next().unwrap();
        for j in 0..k {
            u.logits[j] = next();
        }
        for j in 0..k {
            for a in 0..d {
                u.means[j][a] = next();
            }
            for a in 1..d {
                for b in 0..a {
                    u.chol_lower[j][(a, b)] = next();
                }
            }
            for a in 0..d {
                u.chol_logdiag[j][a] = next();
            }
        }
        u
    }

    /// Lower-triangular factors `L_j` with `exp(clamp(logdiag))` on the diagonal.
    pub fn cholesky_factors(&self) -> Vec<DMatrix<f64>> {
        let d = self.dim();
        (0..self.k())
            .map(|j| {
                DMatrix::from_fn(d, d, |a, b| {
                    if a > b {
                        self.chol_lower[j][(a, b)]
                    } else if a == b {
                        clamp_logdiag(self.chol_logdiag[j][a]).exp()
                    } else {
                        0.0
                    }
                })
            })
            .collect()
    }
}

pub(crate) fn clamp_logdiag(v: f64) -> f64 {
    v.clamp(-LOGDIAG_CLAMP, LOGDIAG_CLAMP)
}

pub fn softmax(z: &DVector<f64>) -> Vec<f64> {
    let max = z.max();
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Maps unconstrained coordinates to mixture parameters.
pub fn constrain(u: &UnconstrainedParams) -> GmmParams {
    let factors = u.cholesky_factors();
    GmmParams {
        alpha: softmax(&u.logits),
        means: u.means.clone(),
        covs: factors.iter().map(|l| l * l.transpose()).collect(),
    }
}

/// Inverse of [`constrain`], with the logit gauge fixed to zero mean.
pub fn unconstrain(p: &GmmParams) -> Result<UnconstrainedParams> {
    let k = p.k();
    let d = p.dim();
    let logs: Vec<f64> = p.alpha.iter().map(|a| a.ln()).collect();
    let shift = logs.iter().sum::<f64>() / k as f64;
    let mut u = UnconstrainedParams::zeros(k, d);
    for j in 0..k {
        u.logits[j] = logs[j] - shift;
        u.means[j] = p.means[j].clone();
        let chol = Cholesky::new(p.covs[j].clone())
            .ok_or(XdError::NotPositiveDefinite { component: j })?;
        let l = chol.l();
        for a in 0..d {
            for b in 0..a {
                u.chol_lower[j][(a, b)] = l[(a, b)];
            }
            u.chol_logdiag[j][a] = l[(a, a)].ln();
        }
    }
    Ok(u)
}
