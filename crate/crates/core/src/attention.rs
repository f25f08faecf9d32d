//! Multi-time attention: a learned kernel smoother over each dimension's
//! observations, mixed across heads and dimensions.
//!
//! The scalar functions on [`MtanParams`] evaluate one query at a time and
//! serve as the readable reference. The graph functions ([`learned_logits`],
//! [`attend`], [`mix_heads`]) evaluate whole batches at once and are what
//! the model trains through; [`MtanParams::mtand`] runs them on constants.

use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DimSeries, PaddedBatch, SparseSeries};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::tensor::Tensor;
use crate::time_embed::{embed_graph, EmbedMode, TimeEmbedding};

/// Similarity kernel used to weight observations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Kernel {
    /// Learned scaled dot product between time embeddings.
    Mtan,
    /// Fixed `exp(−alpha·(t − tᵢ)²)`, normalized.
    Rbf { alpha: f64 },
}

/// Parameters of one multi-time attention module.
///
/// `w` and `v` are `[heads, width, dk]`, `u` is `[heads, dims, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MtanParams {
    pub embed: TimeEmbedding,
    pub w: Tensor,
    pub v: Tensor,
    pub u: Tensor,
}

pub(crate) fn uniform_tensor<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape is consistent")
}

impl MtanParams {
    pub fn new(embed: TimeEmbedding, w: Tensor, v: Tensor, u: Tensor) -> Result<Self> {
        let (heads, width) = (embed.heads(), embed.width());
        let dk = match w.shape() {
            [h, r, k] if *h == heads && *r == width => *k,
            s => {
                return Err(Error::shape(
                    "mtan",
                    format!("w must be [{heads}, {width}, dk], got {s:?}"),
                ))
            }
        };
        if dk == 0 || dk > width {
            return Err(Error::contract(format!("dk = {dk} must be in 1..={width}")));
        }
        if v.shape() != w.shape() {
            return Err(Error::shape("mtan", format!("w {:?} vs v {:?}", w.shape(), v.shape())));
        }
        if u.rank() != 3 || u.shape()[0] != heads {
            return Err(Error::shape(
                "mtan",
                format!("u must be [{heads}, dims, out], got {:?}", u.shape()),
            ));
        }
        Ok(MtanParams { embed, w, v, u })
    }

    /// Uniform `±1/√fan_in` projections around a given time embedding.
    pub fn init<R: Rng>(embed: TimeEmbedding, dk: usize, dims: usize, out: usize, rng: &mut R) -> Result<Self> {
        let (h, r) = (embed.heads(), embed.width());
        let w = uniform_tensor(&[h, r, dk], r, rng);
        let v = uniform_tensor(&[h, r, dk], r, rng);
        let u = uniform_tensor(&[h, dims, out], h * dims, rng);
        MtanParams::new(embed, w, v, u)
    }

    pub fn heads(&self) -> usize {
        self.embed.heads()
    }

    pub fn dk(&self) -> usize {
        self.w.shape()[2]
    }

    pub fn dims(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn out_width(&self) -> usize {
        self.u.shape()[2]
    }

    /// `φ_h(t)·M` for a `[width, dk]` slice `M` of `w` or `v`.
    fn project(&self, m: &Tensor, h: usize, t: f64) -> Vec<f64> {
        let (r, k) = (self.embed.width(), self.dk());
        let phi = self.embed.embed_head(h, t);
        let mut out = vec![0.0; k];
        kernels::matmul_acc(&phi, &m.data()[h * r * k..(h + 1) * r * k], 1, r, k, &mut out);
        out
    }

    /// `κ_h(t, ·)` over the observation times of one dimension.
    pub fn attention_weights(&self, t: f64, times_d: &[f64], h: usize) -> Result<Vec<f64>> {
        if times_d.is_empty() {
            return Err(Error::EmptyDimension);
        }
        let scale = 1.0 / (self.dk() as f64).sqrt();
        let q: Vec<f64> = self.project(&self.w, h, t).iter().map(|x| x * scale).collect();
        let logits: Vec<f64> = times_d
            .iter()
            .map(|&ti| kernels::dot(&q, &self.project(&self.v, h, ti)))
            .collect();
        let mut w = vec![0.0; logits.len()];
        kernels::masked_softmax_slice(&logits, None, &mut w)?;
        Ok(w)
    }

    /// `x̂_hd(t)`: the attention-weighted average of one dimension.
    pub fn interpolate_dim(&self, t: f64, s_d: &DimSeries, h: usize) -> Result<f64> {
        let w = self.attention_weights(t, &s_d.times, h)?;
        Ok(kernels::dot(&w, &s_d.values))
    }

    /// `mTAN(t, s)`: length-`out` embedding at one query time. Dimensions
    /// without observations contribute nothing.
    pub fn mtan_embed(&self, t: f64, s: &SparseSeries) -> Result<Vec<f64>> {
        self.check_series(s)?;
        let (dims, out) = (self.dims(), self.out_width());
        let mut acc = vec![0.0; out];
        for h in 0..self.heads() {
            for (d, dim) in s.dims.iter().enumerate() {
                if dim.is_empty() {
                    continue;
                }
                let x = self.interpolate_dim(t, dim, h)?;
                let u = &self.u.data()[(h * dims + d) * out..(h * dims + d + 1) * out];
                for (a, uj) in acc.iter_mut().zip(u) {
                    *a += x * uj;
                }
            }
        }
        Ok(acc)
    }

    fn check_series(&self, s: &SparseSeries) -> Result<()> {
        if s.num_dims() != self.dims() {
            return Err(Error::shape(
                "mtan",
                format!("series has {} dims, module expects {}", s.num_dims(), self.dims()),
            ));
        }
        if s.is_empty() {
            return Err(Error::EmptySeries);
        }
        Ok(())
    }

    /// `mTAND(r, s)`: `[|r|, out]`, evaluated with the batched kernels.
    pub fn mtand(&self, ref_times: &[f64], s: &SparseSeries) -> Result<Tensor> {
        Ok(self.mtand_batch(ref_times, &[s])?.remove(0))
    }

    /// `mTAND(r, ·)` for several series in one batched evaluation.
    pub fn mtand_batch(&self, ref_times: &[f64], series: &[&SparseSeries]) -> Result<Vec<Tensor>> {
        if ref_times.is_empty() {
            return Err(Error::contract("mtand needs at least one reference time"));
        }
        if ref_times.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::contract("reference times must be non-decreasing"));
        }
        for s in series {
            self.check_series(s)?;
        }
        let batch = PaddedBatch::from_series(series)?;
        let mut g = Graph::new();
        let scorer = LearnedScorer::constant(&mut g, self);
        let u = g.constant(self.u.clone());
        let values = g.constant(Tensor::new(
            vec![batch.batch, batch.len, batch.dims],
            batch.values.clone(),
        )?);
        let logits = learned_logits(
            &mut g,
            &scorer,
            batch.batch,
            Times::Shared(ref_times),
            Times::PerCase(&batch.times),
        )?;
        let heads = attend(&mut g, logits, values, Some(batch.mask.clone()), self.heads())?;
        let out = mix_heads(&mut g, heads, u, self.heads(), batch.batch)?;
        let (q, j) = (ref_times.len(), self.out_width());
        Ok(g.value(out)
            .data()
            .chunks(q * j)
            .map(|c| Tensor::new(vec![q, j], c.to_vec()).expect("shape is consistent"))
            .collect())
    }

    /// Embeddings plus every attention vector behind them, for the query
    /// times in ascending order.
    pub fn query(&self, query_times: &[f64], s: &SparseSeries) -> Result<QueryResult> {
        let mut sorted = query_times.to_vec();
        sorted.sort_by(f64::total_cmp);
        let query_times = sorted.as_slice();
        let embedding = self.mtand(query_times, s)?;
        let mut attention = Vec::new();
        for h in 0..self.heads() {
            for (d, dim) in s.dims.iter().enumerate() {
                if dim.is_empty() {
                    continue;
                }
                for &t in query_times {
                    attention.push(AttentionVector {
                        head: h,
                        dim: d,
                        query_time: t,
                        key_times: dim.times.clone(),
                        weights: self.attention_weights(t, &dim.times, h)?,
                    });
                }
            }
        }
        Ok(QueryResult {
            embedding,
            attention,
        })
    }
}

/// Normalized RBF weights `∝ exp(−alpha·(t − tᵢ)²)`.
pub fn rbf_weights(t: f64, times_d: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0) {
        return Err(Error::contract(format!("rbf sharpness must be positive, got {alpha}")));
    }
    if times_d.is_empty() {
        return Err(Error::EmptyDimension);
    }
    let logits: Vec<f64> = times_d.iter().map(|&ti| rbf_logit(t, ti, alpha)).collect();
    let mut w = vec![0.0; logits.len()];
    kernels::masked_softmax_slice(&logits, None, &mut w)?;
    Ok(w)
}

fn rbf_logit(t: f64, ti: f64, alpha: f64) -> f64 {
    let d = t - ti;
    -alpha * d * d
}

/// One attention vector `κ_h(t, ·)` over a dimension's observations.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionVector {
    pub head: usize,
    pub dim: usize,
    pub query_time: f64,
    pub key_times: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    /// `[queries, out]`.
    pub embedding: Tensor,
    pub attention: Vec<AttentionVector>,
}

impl QueryResult {
    /// Writes `head dim query_time key_time weight` rows, tab separated,
    /// sorted by head, dim, query time and key time.
    pub fn write_table(&self, mut w: impl Write) -> std::io::Result<()> {
        let mut groups: Vec<&AttentionVector> = self.attention.iter().collect();
        groups.sort_by(|a, b| {
            (a.head, a.dim)
                .cmp(&(b.head, b.dim))
                .then(a.query_time.total_cmp(&b.query_time))
        });
        writeln!(w, "head\tdim\tquery_time\tkey_time\tweight")?;
        for g in groups {
            for (k, wt) in g.key_times.iter().zip(&g.weights) {
                writeln!(w, "{}\t{}\t{}\t{}\t{}", g.head, g.dim, g.query_time, k, wt)?;
            }
        }
        Ok(())
    }
}

/// Query or key times for a batch: one list shared by every case, or a
/// `[cases, len]` block with one row per case.
#[derive(Clone, Copy, Debug)]
pub enum Times<'a> {
    Shared(&'a [f64]),
    PerCase(&'a [f64]),
}

impl Times<'_> {
    fn rows(&self, batch: usize) -> Result<(usize, usize)> {
        match self {
            Times::Shared(t) => Ok((1, t.len())),
            Times::PerCase(t) if batch > 0 && t.len() % batch == 0 => Ok((batch, t.len() / batch)),
            Times::PerCase(t) => Err(Error::shape(
                "attention",
                format!("{} per-case times for batch {batch}", t.len()),
            )),
        }
    }

    fn all(&self) -> &[f64] {
        match self {
            Times::Shared(t) | Times::PerCase(t) => t,
        }
    }
}

/// Graph handles for the learned attention score.
#[derive(Clone, Copy, Debug)]
pub struct LearnedScorer {
    pub omega: Var,
    pub alpha: Var,
    pub w: Var,
    pub v: Var,
    pub mode: EmbedMode,
}

impl LearnedScorer {
    /// Places `p`'s embedding and projections on `g` as constants.
    pub fn constant(g: &mut Graph, p: &MtanParams) -> Self {
        LearnedScorer {
            omega: g.constant(p.embed.omega.clone()),
            alpha: g.constant(p.embed.alpha.clone()),
            w: g.constant(p.w.clone()),
            v: g.constant(p.v.clone()),
            mode: p.embed.mode,
        }
    }
}

/// `φ(times)·M` for every head, laid out `[heads·batch, len, dk]`
/// (head-major). Shared times are broadcast across the batch.
fn projected(g: &mut Graph, sc: &LearnedScorer, m: Var, batch: usize, times: Times) -> Result<Var> {
    let (cases, len) = times.rows(batch)?;
    let heads = g.shape(m)[0];
    let dk = g.shape(m)[2];
    let phi = embed_graph(g, sc.omega, sc.alpha, times.all(), sc.mode)?;
    let proj = g.bmm(phi, m)?;
    let proj = g.reshape(proj, &[heads * cases, len, dk])?;
    if cases == batch {
        return Ok(proj);
    }
    let idx: Vec<usize> = (0..heads).flat_map(|h| std::iter::repeat_n(h, batch)).collect();
    g.gather_rows(proj, Arc::from(idx))
}

/// Scaled dot-product logits `[heads·batch, queries, keys]`.
pub fn learned_logits(
    g: &mut Graph,
    sc: &LearnedScorer,
    batch: usize,
    queries: Times,
    keys: Times,
) -> Result<Var> {
    let dk = g.shape(sc.w)[2];
    let q = projected(g, sc, sc.w, batch, queries)?;
    let q = g.scale(q, 1.0 / (dk as f64).sqrt())?;
    let k = projected(g, sc, sc.v, batch, keys)?;
    g.bmm_nt(q, k)
}

/// Constant RBF logits `−alpha·(q − t)²`, `[batch, queries, keys]`.
pub fn rbf_logits(g: &mut Graph, alpha: f64, batch: usize, queries: Times, keys: Times) -> Result<Var> {
    if !(alpha > 0.0) {
        return Err(Error::contract(format!("rbf sharpness must be positive, got {alpha}")));
    }
    let (qc, ql) = queries.rows(batch)?;
    let (kc, kl) = keys.rows(batch)?;
    let (qt, kt) = (queries.all(), keys.all());
    let mut data = Vec::with_capacity(batch * ql * kl);
    for b in 0..batch {
        let qrow = &qt[(b % qc) * ql..(b % qc + 1) * ql];
        let krow = &kt[(b % kc) * kl..(b % kc + 1) * kl];
        for &q in qrow {
            data.extend(krow.iter().map(|&k| rbf_logit(q, k, alpha)));
        }
    }
    Ok(g.constant(Tensor::new(vec![batch, ql, kl], data)?))
}

/// Per-head kernel smoothing: `[heads·batch, queries, dims]`.
///
/// `values: [batch, keys, dims]` and `mask` are shared by every head.
pub fn attend(
    g: &mut Graph,
    logits: Var,
    values: Var,
    mask: Option<Arc<[bool]>>,
    heads: usize,
) -> Result<Var> {
    if heads == 1 {
        return g.masked_attention(logits, values, mask);
    }
    let batch = g.shape(values)[0];
    let idx: Vec<usize> = (0..heads).flat_map(|_| 0..batch).collect();
    let tiled = g.gather_rows(values, Arc::from(idx))?;
    let mask = mask.map(|m| Arc::from(m.repeat(heads)));
    g.masked_attention(logits, tiled, mask)
}

/// `out[b, q, j] = Σ_h Σ_d x̂[h·batch + b, q, d] · u[h, d, j]`.
pub fn mix_heads(g: &mut Graph, per_head: Var, u: Var, heads: usize, batch: usize) -> Result<Var> {
    let (q, d) = match g.shape(per_head) {
        [_, q, d] => (*q, *d),
        s => return Err(Error::shape("mix_heads", format!("{s:?}"))),
    };
    let j = match g.shape(u) {
        [h, ud, j] if *h == heads && *ud == d => *j,
        s => {
            return Err(Error::shape(
                "mix_heads",
                format!("u {s:?} for {heads} heads of {d} dims"),
            ))
        }
    };
    let mut acc: Option<Var> = None;
    for h in 0..heads {
        let x = g.slice(per_head, 0, h * batch, batch)?;
        let x = g.reshape(x, &[batch * q, d])?;
        let uh = g.slice(u, 0, h, 1)?;
        let uh = g.reshape(uh, &[d, j])?;
        let y = g.matmul(x, uh)?;
        acc = Some(match acc {
            None => y,
            Some(a) => g.add(a, y)?,
        });
    }
    let acc = acc.ok_or_else(|| Error::contract("mix_heads needs at least one head"))?;
    g.reshape(acc, &[batch, q, j])
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn identity_params() -> MtanParams {
        // φ(t) = [t], W = V = [1], U = [1]
        let embed = TimeEmbedding {
            omega: Tensor::full(&[1, 1], 1.0),
            alpha: Tensor::zeros(&[1, 1]),
            mode: EmbedMode::Learned,
        };
        MtanParams {
            embed,
            w: Tensor::full(&[1, 1, 1], 1.0),
            v: Tensor::full(&[1, 1, 1], 1.0),
            u: Tensor::full(&[1, 1, 1], 1.0),
        }
    }

    fn random_params(seed: u64, heads: usize, dims: usize, out: usize) -> MtanParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = TimeEmbedding::learned(heads, 6, &mut rng).unwrap();
        MtanParams::init(embed, 4, dims, out, &mut rng).unwrap()
    }

    fn series(dims: Vec<(Vec<f64>, Vec<f64>)>) -> SparseSeries {
        SparseSeries::new(dims.into_iter().map(|(t, x)| DimSeries::new(t, x)).collect(), None).unwrap()
    }

    #[test]
    fn identity_kernel_weights() {
        let p = identity_params();
        let w = p.attention_weights(1.0, &[0.0, 1.0], 0).unwrap();
        let e = std::f64::consts::E;
        assert!((w[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((w[1] - e / (1.0 + e)).abs() < 1e-15);
        assert!((w[0] - 0.26894).abs() < 1e-5 && (w[1] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn identity_kernel_interpolation() {
        let p = identity_params();
        let x = p
            .interpolate_dim(1.0, &DimSeries::new(vec![0.0, 1.0], vec![2.0, 4.0]), 0)
            .unwrap();
        let e = std::f64::consts::E;
        assert!((x - (2.0 + 4.0 * e) / (1.0 + e)).abs() < 1e-14);
        assert!((x - 3.46212).abs() < 1e-5);
    }

    #[test]
    fn single_observation_gets_full_weight() {
        let p = random_params(1, 2, 1, 3);
        assert_eq!(p.attention_weights(0.4, &[0.9], 1).unwrap(), vec![1.0]);
        let x = p.interpolate_dim(0.1, &DimSeries::new(vec![0.9], vec![-2.5]), 0).unwrap();
        assert_eq!(x, -2.5);
    }

    #[test]
    fn zero_projection_is_uniform() {
        let mut p = random_params(2, 1, 1, 1);
        p.w = Tensor::zeros(p.w.shape());
        let w = p.attention_weights(0.3, &[0.0, 0.5, 0.7, 1.0], 0).unwrap();
        assert!(w.iter().all(|&x| x == 0.25));
    }

    #[test]
    fn empty_dimension_is_refused_at_low_level() {
        let p = random_params(3, 1, 1, 1);
        assert!(matches!(p.attention_weights(0.0, &[], 0), Err(Error::EmptyDimension)));
    }

    #[test]
    fn zero_mixing_gives_zero() {
        let mut p = random_params(4, 2, 2, 3);
        p.u = Tensor::zeros(p.u.shape());
        let s = series(vec![(vec![0.1, 0.4], vec![1.0, 2.0]), (vec![0.2], vec![3.0])]);
        assert_eq!(p.mtan_embed(0.5, &s).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn all_empty_series_is_an_error() {
        let p = random_params(5, 1, 2, 2);
        let s = series(vec![(vec![], vec![]), (vec![], vec![])]);
        assert!(matches!(p.mtan_embed(0.5, &s), Err(Error::EmptySeries)));
        assert!(matches!(p.mtand(&[0.5], &s), Err(Error::EmptySeries)));
    }

    /// Direct evaluation of every formula with plain loops.
    fn naive_embed(p: &MtanParams, t: f64, s: &SparseSeries) -> Vec<f64> {
        let (r, k) = (p.embed.width(), p.dk());
        let (dims, out) = (p.dims(), p.out_width());
        let phi = |h: usize, t: f64| -> Vec<f64> {
            (0..r)
                .map(|i| {
                    let x = p.embed.omega.data()[h * r + i] * t + p.embed.alpha.data()[h * r + i];
                    if i == 0 { x } else { x.sin() }
                })
                .collect()
        };
        let bilinear = |h: usize, a: &[f64], b: &[f64]| -> f64 {
            let mut total = 0.0;
            for c in 0..k {
                let mut qa = 0.0;
                let mut kb = 0.0;
                for i in 0..r {
                    qa += a[i] * p.w.data()[(h * r + i) * k + c];
                    kb += b[i] * p.v.data()[(h * r + i) * k + c];
                }
                total += qa * kb;
            }
            total / (k as f64).sqrt()
        };
        let mut res = vec![0.0; out];
        for h in 0..p.heads() {
            for d in 0..dims {
                let dim = &s.dims[d];
                if dim.is_empty() {
                    continue;
                }
                let logits: Vec<f64> = dim.times.iter().map(|&ti| bilinear(h, &phi(h, t), &phi(h, ti))).collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                let x: f64 = logits.iter().zip(&dim.values).map(|(l, v)| (l - m).exp() / z * v).sum();
                for j in 0..out {
                    res[j] += x * p.u.data()[(h * dims + d) * out + j];
                }
            }
        }
        res
    }

    #[test]
    fn scalar_and_batched_match_naive_loops() {
        let p = random_params(6, 2, 2, 3);
        let s = series(vec![
            (vec![0.05, 0.3, 0.31, 0.8], vec![1.0, -0.5, 0.25, 2.0]),
            (vec![0.3, 0.6], vec![0.7, -1.1]),
        ]);
        let refs = [0.0, 0.25, 0.5, 0.75, 1.0];
        let batched = p.mtand(&refs, &s).unwrap();
        for (i, &t) in refs.iter().enumerate() {
            let want = naive_embed(&p, t, &s);
            let scalar = p.mtan_embed(t, &s).unwrap();
            for j in 0..3 {
                assert!((scalar[j] - want[j]).abs() < 1e-12);
                assert!((batched.data()[i * 3 + j] - want[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_dimension_contributes_nothing() {
        let p = random_params(7, 2, 2, 2);
        let full = series(vec![(vec![0.1, 0.9], vec![1.0, 3.0]), (vec![], vec![])]);
        let batched = p.mtand(&[0.5], &full).unwrap();
        let want = naive_embed(&p, 0.5, &full);
        assert!(batched.data().iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn batch_of_series_matches_individual_calls() {
        let p = random_params(8, 2, 1, 2);
        let a = series(vec![(vec![0.1, 0.2, 0.7], vec![1.0, 0.0, -1.0])]);
        let b = series(vec![(vec![0.5], vec![4.0])]);
        let refs = [0.0, 0.5, 1.0];
        let both = p.mtand_batch(&refs, &[&a, &b]).unwrap();
        assert!(both[0].max_abs_diff(&p.mtand(&refs, &a).unwrap()) < 1e-15);
        assert!(both[1].max_abs_diff(&p.mtand(&refs, &b).unwrap()) < 1e-15);
    }

    #[test]
    fn rbf_cases() {
        assert_eq!(rbf_weights(0.5, &[0.0, 1.0], 3.0).unwrap(), vec![0.5, 0.5]);
        let w = rbf_weights(0.0, &[0.0, 1.0], 1e4).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-12);
        let w = rbf_weights(0.3, &[0.0, 1.0], 100.0).unwrap();
        let (a, b) = ((-100.0f64 * 0.09).exp(), (-100.0f64 * 0.49).exp());
        assert!((w[0] - a / (a + b)).abs() < 1e-15);
        assert!((w[1] - b / (a + b)).abs() < 1e-15);
        assert!(matches!(rbf_weights(0.3, &[0.0], 0.0), Err(Error::Contract(_))));
        assert!(matches!(rbf_weights(0.3, &[0.0], -1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn rbf_graph_logits_match_scalar_weights() {
        let s = series(vec![(vec![0.0, 0.4, 1.0], vec![1.0, 2.0, 3.0])]);
        let pb = PaddedBatch::from_series(&[&s]).unwrap();
        let mut g = Graph::new();
        let logits = rbf_logits(&mut g, 50.0, 1, Times::Shared(&[0.3]), Times::PerCase(&pb.times)).unwrap();
        let vals = g.constant(Tensor::new(vec![1, 3, 1], pb.values.clone()).unwrap());
        let out = attend(&mut g, logits, vals, Some(pb.mask.clone()), 1).unwrap();
        let w = rbf_weights(0.3, &[0.0, 0.4, 1.0], 50.0).unwrap();
        let want = w[0] + 2.0 * w[1] + 3.0 * w[2];
        assert!((g.value(out).data()[0] - want).abs() < 1e-14);
    }

    #[test]
    fn dump_rows_are_sorted_and_normalized() {
        let p = random_params(9, 2, 2, 2);
        let s = series(vec![(vec![0.1, 0.5, 0.9], vec![1.0, 2.0, 3.0]), (vec![0.2], vec![5.0])]);
        let q = p.query(&[0.7, 0.2], &s).unwrap();
        let mut buf = Vec::new();
        q.write_table(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let rows: Vec<(usize, usize, f64, f64, f64)> = text
            .lines()
            .skip(1)
            .map(|l| {
                let f: Vec<&str> = l.split('\t').collect();
                (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap(), f[3].parse().unwrap(), f[4].parse().unwrap())
            })
            .collect();
        // 2 heads × (3 + 1 keys) × 2 queries
        assert_eq!(rows.len(), 16);
        for w in rows.windows(2) {
            let ka = (w[0].0, w[0].1);
            let kb = (w[1].0, w[1].1);
            assert!(ka < kb || (ka == kb && (w[0].2, w[0].3) < (w[1].2, w[1].3)));
        }
        let group: f64 = rows.iter().filter(|r| r.0 == 1 && r.1 == 0 && r.2 == 0.7).map(|r| r.4).sum();
        assert!((group - 1.0).abs() < 1e-12);
    }

    fn observations() -> impl Strategy<Value = DimSeries> {
        prop::collection::btree_map(0u32..10_000, -50.0f64..50.0, 1..30).prop_map(|m| {
            let (t, x) = m.into_iter().map(|(k, v)| (k as f64 / 10_000.0, v)).unzip();
            DimSeries::new(t, x)
        })
    }

    proptest! {
        #[test]
        fn learned_weights_form_a_distribution(seed in any::<u64>(), obs in observations(), t in 0.0f64..1.0) {
            let p = random_params(seed, 2, 1, 1);
            for h in 0..2 {
                let w = p.attention_weights(t, &obs.times, h).unwrap();
                prop_assert!(w.iter().all(|&x| x >= 0.0));
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn rbf_weights_form_a_distribution(obs in observations(), t in 0.0f64..1.0, alpha in 0.1f64..1000.0) {
            let w = rbf_weights(t, &obs.times, alpha).unwrap();
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn interpolant_stays_in_value_range(seed in any::<u64>(), obs in observations(), t in 0.0f64..1.0) {
            let p = random_params(seed, 1, 1, 1);
            let x = p.interpolate_dim(t, &obs, 0).unwrap();
            let lo = obs.values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = obs.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12, "{x} outside [{lo}, {hi}]");
        }

        #[test]
        fn interpolant_ignores_observation_order(
            seed in any::<u64>(),
            obs in observations(),
            t in 0.0f64..1.0,
            shuffle in any::<u64>(),
        ) {
            let p = random_params(seed, 1, 1, 1);
            let mut pairs: Vec<(f64, f64)> = obs.iter().collect();
            pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle));
            let (ts, xs) = pairs.into_iter().unzip();
            let a = p.interpolate_dim(t, &obs, 0).unwrap();
            let b = p.interpolate_dim(t, &DimSeries::new(ts, xs), 0).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
