use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Dataset, Schema};
use crate::error::{Result, XdError};
use crate::linalg;
use crate::params::{GmmParams, NoisyPoint, Projection};

/// How per-point noise covariances are produced.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSpec {
    Zero,
    /// The same covariance for every point.
    Fixed(DMatrix<f64>),
    /// Independent per-coordinate standard deviations drawn uniformly from the range.
    DiagonalUniform { min_sd: f64, max_sd: f64 },
}

/// Fixed synthetic ground truths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Three correlated 3-D blobs with heteroscedastic diagonal noise.
    ThreeBlobs,
}

impl Preset {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "three-blobs" => Some(Preset::ThreeBlobs),
            _ => None,
        }
    }

    pub fn truth(self) -> GmmParams {
        match self {
            Preset::ThreeBlobs => GmmParams::new(
                vec![0.5, 0.3, 0.2],
                vec![
                    DVector::from_vec(vec![0.0, 0.0, 0.0]),
                    DVector::from_vec(vec![4.0, 4.0, 0.0]),
                    DVector::from_vec(vec![-4.0, 3.0, 3.0]),
                ],
                vec![
                    DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.0, 0.5, 1.0, 0.2, 0.0, 0.2, 0.5]),
                    DMatrix::from_row_slice(3, 3, &[0.5, 0.0, 0.0, 0.0, 1.5, 0.4, 0.0, 0.4, 0.8]),
                    DMatrix::from_row_slice(3, 3, &[0.8, -0.3, 0.1, -0.3, 0.6, 0.0, 0.1, 0.0, 1.2]),
                ],
            )
            .expect("preset parameters are valid"),
        }
    }

    pub fn noise(self) -> NoiseSpec {
        match self {
            Preset::ThreeBlobs => NoiseSpec::DiagonalUniform {
                min_sd: 0.2,
                max_sd: 0.8,
            },
        }
    }
}

fn component_factors(p: &GmmParams) -> Vec<DMatrix<f64>> {
    p.covs.iter().map(linalg::psd_sqrt).collect()
}

fn standard_normal(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

fn draw(
    p: &GmmParams,
    factors: &[DMatrix<f64>],
    pick: &WeightedIndex<f64>,
    rng: &mut ChaCha8Rng,
) -> (usize, DVector<f64>) {
    let j = pick.sample(rng);
    let z = standard_normal(rng, p.dim());
    (j, &p.means[j] + &factors[j] * z)
}

fn weights(p: &GmmParams) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new(&p.alpha).map_err(|e| XdError::InvalidParams(e.to_string()))
}

/// Ancestral samples together with the index of the component each came from.
pub fn sample_model_labeled(p: &GmmParams, n: usize, seed: u64) -> Result<(Vec<DVector<f64>>, Vec<usize>)> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factors = component_factors(p);
    let pick = weights(p)?;
    let (labels, samples) = (0..n).map(|_| draw(p, &factors, &pick, &mut rng)).unzip();
    Ok((samples, labels))
}

/// `n` draws from the mixture: component from the weights, then `m_j + L_j z`.
pub fn sample_model(p: &GmmParams, n: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    Ok(sample_model_labeled(p, n, seed)?.0)
}

/// Draws `x_i = R v_i + ε_i` with `v_i` from `truth` and `ε_i ~ N(0, S_i)`.
///
/// The returned dataset uses a numbered schema (`x0`, `x1`, ...) and the generating
/// parameters are handed back alongside it.
pub fn generate_synthetic(
    truth: &GmmParams,
    noise: &NoiseSpec,
    projection: &Projection,
    n: usize,
    seed: u64,
) -> Result<(Dataset, GmmParams)> {
    truth.validate()?;
    let d_latent = truth.dim();
    let d_obs = match projection {
        Projection::Identity => d_latent,
        Projection::Matrix(r) => {
            if r.ncols() != d_latent {
                return Err(XdError::Dimension(format!(
                    "projection has {} columns but the model has dimension {d_latent}",
                    r.ncols()
                )));
            }
            r.nrows()
        }
    };
    let fixed_factor = match noise {
        NoiseSpec::Fixed(s) => {
            if s.nrows() != d_obs || s.ncols() != d_obs || !linalg::is_psd(s) {
                return Err(XdError::InvalidParams(
                    "fixed noise covariance must be a PSD matrix matching the observation size".into(),
                ));
            }
            Some(linalg::psd_sqrt(s))
        }
        NoiseSpec::DiagonalUniform { min_sd, max_sd } => {
            if !(0.0 <= *min_sd && min_sd <= max_sd) {
                return Err(XdError::InvalidParams(format!("bad noise range [{min_sd}, {max_sd}]")));
            }
            None
        }
        NoiseSpec::Zero => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factors = component_factors(truth);
    let pick = weights(truth)?;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let (_, v) = draw(truth, &factors, &pick, &mut rng);
        let mut x = match projection {
            Projection::Identity => v,
            Projection::Matrix(r) => r * v,
        };
        let s = match noise {
            NoiseSpec::Zero => DMatrix::zeros(d_obs, d_obs),
            NoiseSpec::Fixed(s) => {
                x += fixed_factor.as_ref().unwrap() * standard_normal(&mut rng, d_obs);
                s.clone()
            }
            NoiseSpec::DiagonalUniform { min_sd, max_sd } => {
                let sd = DVector::from_fn(d_obs, |_, _| {
                    if min_sd == max_sd {
                        *min_sd
                    } else {
                        rng.random_range(*min_sd..*max_sd)
                    }
                });
                for k in 0..d_obs {
                    x[k] += sd[k] * rng.sample::<f64, _>(StandardNormal);
                }
                DMatrix::from_diagonal(&sd.map(|v| v * v))
            }
        };
        points.push(NoisyPoint {
            x,
            noise: s,
            projection: projection.clone(),
        });
    }
    let mut schema = Schema::numbered(d_obs);
    schema.d_latent = d_latent;
    Ok((Dataset::new(schema, points)?, truth.clone()))
}
