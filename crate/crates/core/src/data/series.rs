use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observations of one variable: strictly increasing times and their values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DimSeries {
    #[serde(rename = "t")]
    pub times: Vec<f64>,
    #[serde(rename = "x")]
    pub values: Vec<f64>,
}

impl DimSeries {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Self {
        DimSeries { times, values }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.iter().copied().zip(self.values.iter().copied())
    }
}

/// One data case: a `D`-dimensional sparse, irregularly sampled series with
/// an optional class label.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseSeries {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    pub dims: Vec<DimSeries>,
}

impl SparseSeries {
    pub fn new(dims: Vec<DimSeries>, label: Option<usize>) -> Result<Self> {
        let s = SparseSeries { label, dims };
        s.validate()?;
        Ok(s)
    }

    /// Univariate series from `(time, value)` pairs, sorted by time.
    pub fn univariate(mut points: Vec<(f64, f64)>) -> Result<Self> {
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (t, x) = points.into_iter().unzip();
        SparseSeries::new(vec![DimSeries::new(t, x)], None)
    }

    pub fn validate(&self) -> Result<()> {
        for (d, dim) in self.dims.iter().enumerate() {
            if dim.times.len() != dim.values.len() {
                return Err(Error::Validation(format!(
                    "dimension {d}: {} times but {} values",
                    dim.times.len(),
                    dim.values.len()
                )));
            }
            if dim.times.iter().chain(&dim.values).any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("dimension {d}: non-finite entry")));
            }
            if dim.times.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Validation(format!(
                    "dimension {d}: times are not strictly increasing"
                )));
            }
        }
        Ok(())
    }

    pub fn num_dims(&self) -> usize {
        self.dims.len()
    }

    /// `Σ_d L_d`.
    pub fn total_observations(&self) -> usize {
        self.dims.iter().map(DimSeries::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_observations() == 0
    }

    /// Sorted, de-duplicated times at which any dimension is observed.
    pub fn union_times(&self) -> Vec<f64> {
        let mut ts: Vec<f64> = self.dims.iter().flat_map(|d| d.times.iter().copied()).collect();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        ts
    }

    pub fn min_max_time(&self) -> Option<(f64, f64)> {
        let mut it = self.dims.iter().flat_map(|d| d.times.iter().copied());
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), t| (lo.min(t), hi.max(t))))
    }
}

/// A batch of series padded to a common time axis.
///
/// Each case is laid out on the union of its observation times, padded
/// with masked slots up to the longest case. `values` and `mask` are
/// `[batch, len, dims]`; `times` is `[batch, len]`.
#[derive(Clone, Debug)]
pub struct PaddedBatch {
    pub batch: usize,
    pub len: usize,
    pub dims: usize,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub mask: Arc<[bool]>,
    /// Number of real (non-padding) time slots per case.
    pub lengths: Vec<usize>,
}

impl PaddedBatch {
    pub fn from_series(series: &[&SparseSeries]) -> Result<Self> {
        let dims = series.first().map_or(0, |s| s.num_dims());
        if series.iter().any(|s| s.num_dims() != dims) {
            return Err(Error::Validation(
                "series in a batch disagree on dimension count".into(),
            ));
        }
        let unions: Vec<Vec<f64>> = series.iter().map(|s| s.union_times()).collect();
        let len = unions.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let batch = series.len();
        let mut times = vec![0.0; batch * len];
        let mut values = vec![0.0; batch * len * dims];
        let mut mask = vec![false; batch * len * dims];
        for (b, (s, union)) in series.iter().zip(&unions).enumerate() {
            times[b * len..b * len + union.len()].copy_from_slice(union);
            for (d, dim) in s.dims.iter().enumerate() {
                // both lists are sorted, so a single merge walk suffices
                let mut slot = 0;
                for (t, x) in dim.iter() {
                    while union[slot] < t {
                        slot += 1;
                    }
                    let idx = (b * len + slot) * dims + d;
                    values[idx] = x;
                    mask[idx] = true;
                }
            }
        }
        Ok(PaddedBatch {
            batch,
            len,
            dims,
            times,
            values,
            mask: Arc::from(mask),
            lengths: unions.iter().map(Vec::len).collect(),
        })
    }

    /// Observed entries per case.
    pub fn observation_counts(&self) -> Vec<usize> {
        self.mask
            .chunks(self.len * self.dims.max(1))
            .map(|c| c.iter().filter(|&&m| m).count())
            .collect()
    }
}
