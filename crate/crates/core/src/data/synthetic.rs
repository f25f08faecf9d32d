//! Seeded synthetic datasets.
//!
//! [`generate_synthetic`] builds smooth random trajectories on `[0, 1]`:
//! standard-normal values at evenly spaced reference points, smoothed onto
//! a dense grid by a normalized RBF kernel, then thinned to a random subset
//! of grid points. [`generate_oscillations`] builds a two-class toy
//! classification set separated by oscillation frequency.

use std::f64::consts::TAU;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::series::{DimSeries, SparseSeries};
use crate::attention::rbf_weights;
use crate::error::{Error, Result};
use crate::model::reference_times;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub trajectories: usize,
    pub grid: usize,
    pub ref_points: usize,
    /// RBF sharpness `α` in `exp(−α(t − r)²)`.
    pub alpha: f64,
    /// Grid points kept as observations per trajectory.
    pub observed: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            trajectories: 1000,
            grid: 100,
            ref_points: 10,
            alpha: 100.0,
            observed: 20,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trajectories == 0 || self.grid == 0 || self.ref_points == 0 || self.observed == 0 {
            return Err(Error::Config("synthetic counts must be positive".into()));
        }
        if self.observed > self.grid {
            return Err(Error::Config(format!(
                "cannot keep {} observations from a grid of {}",
                self.observed, self.grid
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn grid_times(&self) -> Vec<f64> {
        reference_times(self.grid)
    }
}

/// Observed series and their dense ground truth, index-aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub observed: Vec<SparseSeries>,
    pub truth: Vec<SparseSeries>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub train: Split,
    pub test: Split,
    /// Reference-point values per trajectory, in generation order.
    pub ref_values: Vec<Vec<f64>>,
}

/// Normalized-RBF smoothing of `values` at `refs` onto `times`.
pub fn rbf_trajectory(times: &[f64], refs: &[f64], values: &[f64], alpha: f64) -> Result<Vec<f64>> {
    times
        .iter()
        .map(|&t| {
            let w = rbf_weights(t, refs, alpha)?;
            Ok(w.iter().zip(values).map(|(w, v)| w * v).sum())
        })
        .collect()
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let refs = reference_times(cfg.ref_points);
    let grid = cfg.grid_times();
    let n_train = ((cfg.trajectories as f64) * cfg.train_fraction).round() as usize;
    let mut data = SyntheticData {
        train: Split { observed: Vec::new(), truth: Vec::new() },
        test: Split { observed: Vec::new(), truth: Vec::new() },
        ref_values: Vec::with_capacity(cfg.trajectories),
    };
    for i in 0..cfg.trajectories {
        let values: Vec<f64> = (0..cfg.ref_points).map(|_| StandardNormal.sample(&mut rng)).collect();
        let dense = rbf_trajectory(&grid, &refs, &values, cfg.alpha)?;
        let mut keep = index::sample(&mut rng, cfg.grid, cfg.observed).into_vec();
        keep.sort_unstable();
        let observed = SparseSeries::new(
            vec![DimSeries::new(
                keep.iter().map(|&j| grid[j]).collect(),
                keep.iter().map(|&j| dense[j]).collect(),
            )],
            None,
        )?;
        let truth = SparseSeries::new(vec![DimSeries::new(grid.clone(), dense)], None)?;
        let split = if i < n_train { &mut data.train } else { &mut data.test };
        split.observed.push(observed);
        split.truth.push(truth);
        data.ref_values.push(values);
    }
    Ok(data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OscillationConfig {
    pub cases: usize,
    /// Observation count per series is uniform on this inclusive range.
    pub min_len: usize,
    pub max_len: usize,
    /// Frequency ranges in cycles per unit time, one per class.
    pub slow: (f64, f64),
    pub fast: (f64, f64),
    pub noise: f64,
    pub seed: u64,
}

impl Default for OscillationConfig {
    fn default() -> Self {
        OscillationConfig {
            cases: 500,
            min_len: 20,
            max_len: 40,
            slow: (1.0, 2.0),
            fast: (3.0, 4.0),
            noise: 0.1,
            seed: 0,
        }
    }
}

/// Univariate series `sin(2πft + φ) + noise` at random times on `[0, 1]`.
/// Class 0 draws `f` from `slow`, class 1 from `fast`; classes alternate.
pub fn generate_oscillations(cfg: &OscillationConfig) -> Result<Vec<SparseSeries>> {
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(Error::Config(format!("bad length range {}..={}", cfg.min_len, cfg.max_len)));
    }
    if !(cfg.noise >= 0.0) {
        return Err(Error::Config(format!("noise must be non-negative, got {}", cfg.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    (0..cfg.cases)
        .map(|i| {
            let label = i % 2;
            let (lo, hi) = if label == 0 { cfg.slow } else { cfg.fast };
            let f = rng.random_range(lo..=hi);
            let phase = rng.random_range(0.0..TAU);
            let len = rng.random_range(cfg.min_len..=cfg.max_len);
            let mut times: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
            times.sort_by(f64::total_cmp);
            times.dedup();
            let values = times
                .iter()
                .map(|t| (TAU * f * t + phase).sin() + noise.sample(&mut rng))
                .collect();
            SparseSeries::new(vec![DimSeries::new(times, values)], Some(label))
        })
        .collect()
}
