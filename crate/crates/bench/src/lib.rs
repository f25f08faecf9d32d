//! Shared fixtures for the benchmarks.

use mtan::data::synthetic::{generate_synthetic, SyntheticConfig};
use mtan::{Model, ModelConfig, SparseSeries};

/// `n` observed trajectories from the default synthetic generator.
pub fn synthetic_series(n: usize) -> Vec<SparseSeries> {
    let data = generate_synthetic(&SyntheticConfig {
        trajectories: 2 * n,
        train_fraction: 0.5,
        ..SyntheticConfig::default()
    })
    .expect("valid generator config");
    data.train.observed
}

/// The small interpolation model used in the acceptance runs.
pub fn interpolation_model() -> Model {
    let config = ModelConfig {
        ref_points: 16,
        latent: 10,
        mtan_out: 16,
        heads: 1,
        embed_dim: 16,
        dk: 16,
        enc_hidden: 32,
        ..ModelConfig::default()
    };
    Model::new(config, 0).expect("valid model config")
}
