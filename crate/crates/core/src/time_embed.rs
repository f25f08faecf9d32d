//! Continuous-time embeddings `φ_h(t)`.
//!
//! In learned mode coordinate 0 of every head is linear, `ω₀·t + α₀`, and
//! the remaining coordinates are `sin(ωᵢ·t + αᵢ)`. Positional mode uses the
//! fixed transformer sinusoids, with every coordinate periodic.

use std::f64::consts::{FRAC_PI_2, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedMode {
    #[default]
    Learned,
    /// Fixed sinusoids; parameters are frozen.
    Positional,
}

impl EmbedMode {
    pub fn has_linear_term(self) -> bool {
        self == EmbedMode::Learned
    }
}

/// Frequencies `ω` and phases `α`, both `[heads, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeEmbedding {
    pub omega: Tensor,
    pub alpha: Tensor,
    pub mode: EmbedMode,
}

impl TimeEmbedding {
    pub fn new(omega: Tensor, alpha: Tensor, mode: EmbedMode) -> Result<Self> {
        let [_, width] = omega.shape() else {
            return Err(Error::shape(
                "time_embed",
                format!("omega must be [heads, width], got {:?}", omega.shape()),
            ));
        };
        if omega.shape() != alpha.shape() {
            return Err(Error::shape(
                "time_embed",
                format!("omega {:?} vs alpha {:?}", omega.shape(), alpha.shape()),
            ));
        }
        if mode == EmbedMode::Learned && *width < 2 {
            return Err(Error::contract(
                "learned time embedding needs width >= 2 (one linear, one periodic term)",
            ));
        }
        Ok(TimeEmbedding { omega, alpha, mode })
    }

    /// Random initialization: `ω ~ U[0,1]·(h+1)` and `α ~ U[0, 2π)`.
    pub fn learned<R: Rng>(heads: usize, width: usize, rng: &mut R) -> Result<Self> {
        TimeEmbedding::learned_scaled(heads, width, 1.0, rng)
    }

    /// [`TimeEmbedding::learned`] with every frequency multiplied by `scale`.
    pub fn learned_scaled<R: Rng>(heads: usize, width: usize, scale: f64, rng: &mut R) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::contract(format!("frequency scale must be positive, got {scale}")));
        }
        let n = heads * width;
        let mut omega = Vec::with_capacity(n);
        for h in 0..heads {
            for _ in 0..width {
                omega.push(rng.random::<f64>() * (h + 1) as f64 * scale);
            }
        }
        let alpha = (0..n).map(|_| rng.random::<f64>() * TAU).collect();
        TimeEmbedding::new(
            Tensor::new(vec![heads, width], omega)?,
            Tensor::new(vec![heads, width], alpha)?,
            EmbedMode::Learned,
        )
    }

    /// Single-head positional encoding: pair `p = ⌊i/2⌋` has frequency
    /// `10000^(−2p/width)`; odd coordinates are phase-shifted by `π/2` so
    /// that they evaluate to cosines.
    pub fn positional(width: usize) -> Result<Self> {
        if width == 0 || width % 2 != 0 {
            return Err(Error::contract(format!(
                "positional encoding needs an even width, got {width}"
            )));
        }
        let omega = (0..width)
            .map(|i| 10000f64.powf(-2.0 * (i / 2) as f64 / width as f64))
            .collect();
        let alpha = (0..width)
            .map(|i| if i % 2 == 0 { 0.0 } else { FRAC_PI_2 })
            .collect();
        TimeEmbedding::new(
            Tensor::new(vec![1, width], omega)?,
            Tensor::new(vec![1, width], alpha)?,
            EmbedMode::Positional,
        )
    }

    /// Copies a single-head embedding onto `heads` identical heads.
    pub fn replicate(&self, heads: usize) -> Result<Self> {
        if self.heads() != 1 {
            return Err(Error::contract("only single-head embeddings can be replicated"));
        }
        let tile = |t: &Tensor| Tensor::new(vec![heads, self.width()], t.data().repeat(heads));
        TimeEmbedding::new(tile(&self.omega)?, tile(&self.alpha)?, self.mode)
    }

    pub fn heads(&self) -> usize {
        self.omega.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.omega.shape()[1]
    }

    /// `φ_h(t)` for one head.
    pub fn embed_head(&self, h: usize, t: f64) -> Vec<f64> {
        let w = self.width();
        let omega = &self.omega.data()[h * w..(h + 1) * w];
        let alpha = &self.alpha.data()[h * w..(h + 1) * w];
        let linear = self.mode.has_linear_term();
        omega
            .iter()
            .zip(alpha)
            .enumerate()
            .map(|(i, (o, a))| {
                let x = t * o + a;
                if i == 0 && linear {
                    x
                } else {
                    x.sin()
                }
            })
            .collect()
    }

    /// `φ(t)` for every head, `[heads, width]`.
    pub fn embed(&self, t: f64) -> Tensor {
        let data = (0..self.heads()).flat_map(|h| self.embed_head(h, t)).collect();
        Tensor::new(vec![self.heads(), self.width()], data).expect("shape is consistent")
    }
}

/// Differentiable embedding of `times` for all heads: `[heads, n, width]`.
///
/// `omega` and `alpha` are `[heads, width]` graph values.
pub fn embed_graph(
    g: &mut Graph,
    omega: Var,
    alpha: Var,
    times: &[f64],
    mode: EmbedMode,
) -> Result<Var> {
    let (heads, width) = match g.shape(omega) {
        [h, w] => (*h, *w),
        s => return Err(Error::shape("time_embed", format!("omega {s:?}"))),
    };
    let n = times.len();
    // pre[h, j, i] = [t_j, 1] · [ω_hi, α_hi]
    let design = g.constant(Tensor::new(
        vec![1, n, 2],
        times.iter().flat_map(|&t| [t, 1.0]).collect(),
    )?);
    let om = g.reshape(omega, &[heads, width, 1])?;
    let al = g.reshape(alpha, &[heads, width, 1])?;
    let coef = g.concat(&[om, al], 2)?;
    let pre = g.bmm_nt(design, coef)?;
    if !mode.has_linear_term() {
        return g.sin(pre);
    }
    let linear = g.slice(pre, 2, 0, 1)?;
    let rest = g.slice(pre, 2, 1, width - 1)?;
    let periodic = g.sin(rest)?;
    g.concat(&[linear, periodic], 2)
}
