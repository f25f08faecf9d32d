//! Rescaling, conditioning subsets and dataset splits.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::series::{DimSeries, SparseSeries};
use crate::error::{Error, Result};

/// Per-dimension `(min, max)` of the fitting set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaling {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl FeatureScaling {
    /// Every dimension needs at least one observation in `data`.
    pub fn fit(data: &[SparseSeries]) -> Result<Self> {
        let dims = data.first().map_or(0, SparseSeries::num_dims);
        let mut min = vec![f64::INFINITY; dims];
        let mut max = vec![f64::NEG_INFINITY; dims];
        for s in data {
            if s.num_dims() != dims {
                return Err(Error::Validation("series disagree on dimension count".into()));
            }
            for (d, dim) in s.dims.iter().enumerate() {
                for &x in &dim.values {
                    min[d] = min[d].min(x);
                    max[d] = max[d].max(x);
                }
            }
        }
        if let Some(d) = min.iter().position(|m| m.is_infinite()) {
            return Err(Error::contract(format!("dimension {d} has no observations to fit a scale")));
        }
        Ok(FeatureScaling { min, max })
    }

    /// `x ← (x − min)/(max − min)`; constant dimensions map to 0.
    pub fn apply(&self, s: &mut SparseSeries) -> Result<()> {
        if s.num_dims() != self.min.len() {
            return Err(Error::Validation(format!(
                "series has {} dims, scaling has {}",
                s.num_dims(),
                self.min.len()
            )));
        }
        for (d, dim) in s.dims.iter_mut().enumerate() {
            let (lo, span) = (self.min[d], self.max[d] - self.min[d]);
            for x in &mut dim.values {
                *x = if span > 0.0 { (*x - lo) / span } else { 0.0 };
            }
        }
        Ok(())
    }
}

/// Fits the scale on `train`, then applies it to `train` and each of `others`.
pub fn rescale_features(train: &mut [SparseSeries], others: &mut [&mut [SparseSeries]]) -> Result<FeatureScaling> {
    let scaling = FeatureScaling::fit(train)?;
    for s in train.iter_mut().chain(others.iter_mut().flat_map(|o| o.iter_mut())) {
        scaling.apply(s)?;
    }
    Ok(scaling)
}

/// Maps all times affinely onto `[0, 1]` using the dataset's overall range;
/// a single distinct time maps to 0. Returns the original `(min, max)`.
pub fn rescale_time(data: &mut [SparseSeries]) -> Result<(f64, f64)> {
    let (lo, hi) = data
        .iter()
        .filter_map(SparseSeries::min_max_time)
        .reduce(|(a, b), (c, d)| (a.min(c), b.max(d)))
        .ok_or_else(|| Error::contract("rescaling time needs at least one observation"))?;
    let span = hi - lo;
    for s in data.iter_mut() {
        for dim in &mut s.dims {
            for t in &mut dim.times {
                *t = if span > 0.0 { (*t - lo) / span } else { 0.0 };
            }
        }
        s.validate()?;
    }
    Ok((lo, hi))
}

/// Observations kept per dimension at fraction `p`: `⌈p·L⌉`, at least 1
/// when `L ≥ 1`.
pub fn kept_count(len: usize, p: f64) -> usize {
    if len == 0 {
        return 0;
    }
    ((p * len as f64).ceil() as usize).clamp(1, len)
}

/// Random conditioning subset of `s` at fraction `p`, paired with the full
/// series as the target.
pub fn subsample_observed(s: &SparseSeries, p: f64, seed: u64) -> Result<(SparseSeries, SparseSeries)> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::contract(format!("observed fraction must lie in (0, 1], got {p}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = s
        .dims
        .iter()
        .map(|dim| {
            let keep = kept_count(dim.len(), p);
            let mut idx = index::sample(&mut rng, dim.len(), keep).into_vec();
            idx.sort_unstable();
            DimSeries::new(
                idx.iter().map(|&i| dim.times[i]).collect(),
                idx.iter().map(|&i| dim.values[i]).collect(),
            )
        })
        .collect();
    Ok((SparseSeries::new(dims, s.label)?, s.clone()))
}

/// Seeded shuffle, then consecutive partitions of `⌊f·n⌋` items each. When
/// the fractions sum to 1 the last partition takes the remainder, so the
/// parts cover the input.
pub fn split<T: Clone>(data: &[T], fractions: &[f64], seed: u64) -> Result<Vec<Vec<T>>> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(*f >= 0.0)) || total > 1.0 + 1e-9 {
        return Err(Error::contract(format!("fractions {fractions:?} must be non-negative and sum to at most 1")));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = data.len();
    let covering = (total - 1.0).abs() < 1e-9;
    let mut parts = Vec::with_capacity(fractions.len());
    let mut start = 0;
    for (i, f) in fractions.iter().enumerate() {
        let size = if covering && i + 1 == fractions.len() {
            n - start
        } else {
            ((f * n as f64).floor() as usize).min(n - start)
        };
        if size == 0 {
            log::warn!("split: partition {i} (fraction {f}) is empty for {n} items");
        }
        parts.push(order[start..start + size].iter().map(|&j| data[j].clone()).collect());
        start += size;
    }
    Ok(parts)
}
