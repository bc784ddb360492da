//! Minibatch k-means initialisation.
//!
//! Centres are seeded from distinct datapoints and moved with per-centre learning rate
//! `1/count` (counts accumulate over all epochs). Weights come from the final counts,
//! means from the centres, covariances are the identity. Noise covariances are ignored.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Result, XdError};
use crate::params::GmmParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansConfig {
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            epochs: 10,
            batch_size: 500,
            seed,
        }
    }
}

pub fn nearest(centres: &[DVector<f64>], x: &DVector<f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centres.iter().enumerate() {
        let d = (x - c).norm_squared();
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

/// Sum of squared distances from each point to its nearest centre.
pub fn assignment_cost(centres: &[DVector<f64>], points: &[DVector<f64>]) -> f64 {
    points
        .iter()
        .map(|x| (x - &centres[nearest(centres, x)]).norm_squared())
        .sum()
}

fn seed_centres(points: &[DVector<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.shuffle(rng);
    let mut centres: Vec<DVector<f64>> = Vec::with_capacity(k);
    for &i in &order {
        if centres.len() == k {
            break;
        }
        if !centres.contains(&points[i]) {
            centres.push(points[i].clone());
        }
    }
    // fewer distinct values than k: duplicates are unavoidable
    for &i in &order {
        if centres.len() == k {
            break;
        }
        centres.push(points[i].clone());
    }
    centres
}

/// Runs minibatch k-means on `points` and converts the result to mixture parameters.
pub fn kmeans_init(points: &[DVector<f64>], cfg: &KMeansConfig) -> Result<GmmParams> {
    let (n, k) = (points.len(), cfg.k);
    if k == 0 {
        return Err(XdError::InvalidConfig("k must be at least 1".into()));
    }
    if k > n {
        return Err(XdError::InvalidConfig(format!("k = {k} exceeds the number of points ({n})")));
    }
    if cfg.batch_size == 0 {
        return Err(XdError::InvalidConfig("k-means batch size must be at least 1".into()));
    }
    let d = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centres = seed_centres(points, k, &mut rng);
    let mut counts = vec![0u64; k];
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let assigned: Vec<usize> = chunk.iter().map(|&i| nearest(&centres, &points[i])).collect();
            for (&i, &j) in chunk.iter().zip(&assigned) {
                counts[j] += 1;
                let eta = 1.0 / counts[j] as f64;
                centres[j] = &centres[j] * (1.0 - eta) + &points[i] * eta;
            }
        }
        if epoch + 1 < cfg.epochs {
            for j in 0..k {
                if counts[j] == 0 {
                    centres[j] = points[rng.random_range(0..n)].clone();
                }
            }
        }
    }

    // a centre that never won a point still gets a (tiny) positive weight
    let mass: Vec<f64> = counts.iter().map(|&c| c.max(1) as f64).collect();
    let total: f64 = mass.iter().sum();
    GmmParams::new(
        mass.iter().map(|m| m / total).collect(),
        centres,
        vec![DMatrix::identity(d, d); k],
    )
}

/// [`kmeans_init`] on the observed vectors of a dataset.
pub fn kmeans_init_dataset(data: &Dataset, cfg: &KMeansConfig) -> Result<GmmParams> {
    if data.d_obs() != data.d_latent() {
        return Err(XdError::Dimension(
            "k-means initialisation needs observations in latent space (identity projection)".into(),
        ));
    }
    let xs: Vec<DVector<f64>> = data.points.iter().map(|p| p.x.clone()).collect();
    kmeans_init(&xs, cfg)
}
