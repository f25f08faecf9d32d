//! Sparse series, synthetic generators, transforms and file I/O.

pub mod io;
mod series;
pub mod synthetic;
pub mod transform;

pub use series::{DimSeries, PaddedBatch, SparseSeries};
