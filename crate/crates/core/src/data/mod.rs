//! Datasets: CSV ingestion, train/validation/test splits, synthetic ground truth and
//! sampling from fitted models.

mod csv_io;
mod synthetic;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use csv_io::{load_csv, read_csv, write_csv, write_samples};
pub use synthetic::{generate_synthetic, sample_model, sample_model_labeled, NoiseSpec, Preset};

use crate::error::{Result, XdError};
use crate::params::NoisyPoint;

/// Noise variance given to a missing measurement.
pub const MISSING_VARIANCE: f64 = 1e12;
/// Noise variance given to a column that carries no error estimate.
pub const NOISELESS_VARIANCE: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    /// Whether the CSV carries a `<name>_err` standard-deviation column.
    #[serde(default = "default_true")]
    pub noise: bool,
}

fn default_true() -> bool {
    true
}

/// Sidecar description of a CSV file: feature order, which features have errors, and the
/// latent dimension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<ColumnSpec>,
    pub d_latent: usize,
}

impl Schema {
    /// `x0, x1, ...`, all noisy.
    pub fn numbered(d: usize) -> Self {
        Self {
            columns: (0..d)
                .map(|i| ColumnSpec {
                    name: format!("x{i}"),
                    noise: true,
                })
                .collect(),
            d_latent: d,
        }
    }

    pub fn d_obs(&self) -> usize {
        self.columns.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.columns.is_empty() {
            return Err(XdError::Schema("no columns declared".into()));
        }
        for (i, c) in self.columns.iter().enumerate() {
            if c.name.is_empty() {
                return Err(XdError::Schema(format!("column {i} has an empty name")));
            }
            if self.columns[..i].iter().any(|o| o.name == c.name) {
                return Err(XdError::Schema(format!("duplicate column {}", c.name)));
            }
        }
        if self.d_latent == 0 {
            return Err(XdError::Schema("d_latent must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| XdError::io(path, e))?;
        let schema: Self = serde_json::from_str(&text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| XdError::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: Schema,
    pub points: Vec<NoisyPoint>,
}

impl Dataset {
    /// Checks that every point matches the schema's dimensions.
    pub fn new(schema: Schema, points: Vec<NoisyPoint>) -> Result<Self> {
        schema.validate()?;
        for (i, p) in points.iter().enumerate() {
            if p.obs_dim() != schema.d_obs() || p.latent_dim() != schema.d_latent {
                return Err(XdError::Dimension(format!(
                    "point {i} is {}->{} but the schema declares {}->{}",
                    p.latent_dim(),
                    p.obs_dim(),
                    schema.d_latent,
                    schema.d_obs()
                )));
            }
        }
        Ok(Self { schema, points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn d_obs(&self) -> usize {
        self.schema.d_obs()
    }

    pub fn d_latent(&self) -> usize {
        self.schema.d_latent
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            schema: self.schema.clone(),
            points: idx.iter().map(|&i| self.points[i].clone()).collect(),
        }
    }
}

/// Seeded shuffle followed by a contiguous partition into train/validation/test.
///
/// Validation and test sizes are `round(f · N)`; training gets the remainder.
pub fn split(data: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (ft, fv, fs) = fractions;
    if !(ft > 0.0 && fv > 0.0 && fs > 0.0) || (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(XdError::InvalidConfig(format!(
            "split fractions ({ft}, {fv}, {fs}) must be positive and sum to 1"
        )));
    }
    let n = data.len();
    let n_val = (fv * n as f64).round() as usize;
    let n_test = (fs * n as f64).round() as usize;
    let n_train = n.saturating_sub(n_val + n_test);
    if n_train == 0 || n_val == 0 || n_test == 0 || n_train + n_val + n_test != n {
        return Err(XdError::InvalidConfig(format!(
            "split of {n} rows leaves an empty part ({n_train}, {n_val}, {n_test})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((
        data.subset(&order[..n_train]),
        data.subset(&order[n_train..n_train + n_val]),
        data.subset(&order[n_train + n_val..]),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn toy(n: usize) -> Dataset {
        Dataset::new(
            Schema::numbered(1),
            (0..n).map(|i| NoisyPoint::exact(DVector::from_element(1, i as f64))).collect(),
        )
        .unwrap()
    }

    #[test]
    fn split_sizes() {
        let (a, b, c) = split(&toy(10), (0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
    }

    #[test]
    fn split_is_seeded_and_exhaustive() {
        let data = toy(57);
        let first = split(&data, (0.6, 0.2, 0.2), 9).unwrap();
        let again = split(&data, (0.6, 0.2, 0.2), 9).unwrap();
        assert_eq!(first, again);
        let mut seen: Vec<f64> = [&first.0, &first.1, &first.2]
            .iter()
            .flat_map(|d| d.points.iter().map(|p| p.x[0]))
            .collect();
        seen.sort_by(f64::total_cmp);
        let all: Vec<f64> = (0..57).map(|i| i as f64).collect();
        assert_eq!(seen, all);
    }

    #[test]
    fn split_rejects_empty_parts() {
        assert!(split(&toy(3), (0.9, 0.05, 0.05), 0).is_err());
        assert!(split(&toy(10), (0.5, 0.5, 0.1), 0).is_err());
    }

    #[test]
    fn dataset_checks_dimensions() {
        let pts = vec![NoisyPoint::exact(DVector::zeros(2))];
        assert!(Dataset::new(Schema::numbered(3), pts).is_err());
    }
}
