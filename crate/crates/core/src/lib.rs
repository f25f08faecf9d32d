//! Multi-time attention networks for sparse, irregularly sampled
//! multivariate time series.
//!
//! The crate is layered bottom-up: [`tensor`] and [`graph`] provide dense
//! arrays with reverse-mode differentiation, [`time_embed`] and
//! [`attention`] build the continuous-time attention module on top, and
//! [`model`], [`objectives`] and [`train`] assemble the encoder-decoder.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod time_embed;
pub mod train;

pub use attention::{Kernel, MtanParams, QueryResult};
pub use data::{DimSeries, PaddedBatch, SparseSeries};
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use model::{Arch, LatentPosterior, Model, ModelConfig};
pub use objectives::{LossReport, Objective};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::Params;
pub use tensor::Tensor;
pub use time_embed::{EmbedMode, TimeEmbedding};
pub use train::{Task, TrainConfig};
