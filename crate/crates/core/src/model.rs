//! The encoder-decoder model and its classifier heads.
//!
//! Encoder: mTAND over reference points, a (bidirectional) GRU, then two
//! MLP heads giving `μ` and `log σ²` per reference point. Decoder: a GRU
//! over the latent sequence, mTAND queried at the target times with the
//! reference points as keys, then an MLP to `D` output means. The
//! classifier runs a GRU over the latent sequence and an MLP on its final
//! state. The `Enc` architecture classifies directly from the encoder's
//! mTAND output instead.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{
    attend, learned_logits, mix_heads, rbf_logits, rbf_weights, uniform_tensor, AttentionVector, Kernel,
    LearnedScorer, MtanParams, QueryResult, Times,
};
use crate::data::{PaddedBatch, SparseSeries};
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::layers::{gru_final_graph, gru_sequence_graph, GruParams, GruVars, MlpParams, MlpVars};
use crate::params::{Bound, Params};
use crate::tensor::Tensor;
use crate::time_embed::{EmbedMode, TimeEmbedding};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// Variational encoder-decoder, optionally with a classifier on `z`.
    #[default]
    Full,
    /// Encoder mTAND followed directly by the classifier.
    Enc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Data dimensions `D`.
    pub dims: usize,
    /// Reference points `K`, evenly spaced on `[0, 1]`.
    pub ref_points: usize,
    /// Width of each latent `z_k`.
    pub latent: usize,
    /// mTAND output width `J`.
    pub mtan_out: usize,
    pub heads: usize,
    /// Time-embedding width `d_r`.
    pub embed_dim: usize,
    pub dk: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    /// Hidden width of the `μ`, `σ` and output MLPs.
    pub head_hidden: usize,
    pub clf_hidden: usize,
    pub clf_mlp: usize,
    pub classes: Option<usize>,
    /// Fixed observation variance `σ²`.
    pub obs_var: f64,
    pub kernel: Kernel,
    pub embed_mode: EmbedMode,
    /// Multiplier on the initial learned frequencies.
    #[serde(default = "unit_scale")]
    pub omega_scale: f64,
    pub bidirectional: bool,
    pub arch: Arch,
}

fn unit_scale() -> f64 {
    1.0
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dims: 1,
            ref_points: 128,
            latent: 32,
            mtan_out: 32,
            heads: 2,
            embed_dim: 128,
            dk: 64,
            enc_hidden: 32,
            dec_hidden: 50,
            head_hidden: 50,
            clf_hidden: 32,
            clf_mlp: 300,
            classes: None,
            obs_var: 0.01,
            kernel: Kernel::Mtan,
            embed_mode: EmbedMode::Learned,
            omega_scale: 1.0,
            bidirectional: true,
            arch: Arch::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("dims", self.dims),
            ("ref_points", self.ref_points),
            ("latent", self.latent),
            ("mtan_out", self.mtan_out),
            ("heads", self.heads),
            ("embed_dim", self.embed_dim),
            ("dk", self.dk),
            ("enc_hidden", self.enc_hidden),
            ("dec_hidden", self.dec_hidden),
            ("head_hidden", self.head_hidden),
            ("clf_hidden", self.clf_hidden),
            ("clf_mlp", self.clf_mlp),
        ];
        if let Some((name, _)) = widths.iter().find(|(_, w)| *w == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.obs_var > 0.0) {
            return Err(Error::Config(format!("obs_var must be positive, got {}", self.obs_var)));
        }
        if !(self.omega_scale > 0.0 && self.omega_scale.is_finite()) {
            return Err(Error::Config(format!("omega_scale must be positive, got {}", self.omega_scale)));
        }
        if self.classes == Some(0) {
            return Err(Error::Config("classes must be positive".into()));
        }
        if self.arch == Arch::Enc && self.classes.is_none() {
            return Err(Error::Config("the enc architecture needs a class count".into()));
        }
        match self.kernel {
            Kernel::Rbf { alpha } if !(alpha > 0.0) => {
                return Err(Error::Config(format!("rbf sharpness must be positive, got {alpha}")))
            }
            Kernel::Rbf { .. } if self.heads != 1 => {
                return Err(Error::Config("the rbf kernel uses a single head".into()))
            }
            Kernel::Mtan if self.dk > self.embed_dim => {
                return Err(Error::Config(format!(
                    "dk = {} exceeds embed_dim = {}",
                    self.dk, self.embed_dim
                )))
            }
            _ => {}
        }
        if self.embed_mode == EmbedMode::Positional && self.embed_dim % 2 != 0 {
            return Err(Error::Config("positional embeddings need an even embed_dim".into()));
        }
        Ok(())
    }

    pub fn ref_times(&self) -> Vec<f64> {
        reference_times(self.ref_points)
    }

    fn enc_rnn_out(&self) -> usize {
        self.enc_hidden * if self.bidirectional { 2 } else { 1 }
    }

    fn dec_rnn_out(&self) -> usize {
        self.dec_hidden * if self.bidirectional { 2 } else { 1 }
    }
}

/// `k` evenly spaced points on `[0, 1]`, both ends included.
pub fn reference_times(k: usize) -> Vec<f64> {
    match k {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..k).map(|i| i as f64 / (k - 1) as f64).collect(),
    }
}

/// Per reference point mean and standard deviation, both `[K, latent]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPosterior {
    pub mu: Tensor,
    pub sigma: Tensor,
}

/// Configuration plus every named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

fn insert_mtan<R: rand::Rng>(
    params: &mut Params,
    cfg: &ModelConfig,
    side: &str,
    dims: usize,
    rng: &mut R,
) -> Result<()> {
    if let Kernel::Mtan = cfg.kernel {
        let embed = match cfg.embed_mode {
            EmbedMode::Learned => TimeEmbedding::learned_scaled(cfg.heads, cfg.embed_dim, cfg.omega_scale, rng)?,
            EmbedMode::Positional => TimeEmbedding::positional(cfg.embed_dim)?.replicate(cfg.heads)?,
        };
        params.insert(format!("time_embed.{side}.omega"), embed.omega)?;
        params.insert(format!("time_embed.{side}.alpha"), embed.alpha)?;
        let (h, r, k) = (cfg.heads, cfg.embed_dim, cfg.dk);
        params.insert(format!("mtan.{side}.w"), uniform_tensor(&[h, r, k], r, rng))?;
        params.insert(format!("mtan.{side}.v"), uniform_tensor(&[h, r, k], r, rng))?;
    }
    let h = cfg.heads;
    params.insert(
        format!("mtan.{side}.u"),
        uniform_tensor(&[h, dims, cfg.mtan_out], h * dims, rng),
    )
}

fn insert_gru<R: rand::Rng>(
    params: &mut Params,
    prefix: &str,
    input: usize,
    hidden: usize,
    bidirectional: bool,
    rng: &mut R,
) -> Result<()> {
    GruParams::init(input, hidden, rng).insert_into(params, &format!("{prefix}.fwd"))?;
    if bidirectional {
        GruParams::init(input, hidden, rng).insert_into(params, &format!("{prefix}.bwd"))?;
    }
    Ok(())
}

impl Model {
    /// Freshly initialized parameters, deterministic in `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        insert_mtan(&mut p, cfg, "enc", cfg.dims, &mut rng)?;
        if cfg.arch == Arch::Full {
            insert_gru(&mut p, "enc.rnn", cfg.mtan_out, cfg.enc_hidden, cfg.bidirectional, &mut rng)?;
            let head = [cfg.enc_rnn_out(), cfg.head_hidden, cfg.latent];
            MlpParams::init(&head, &mut rng)?.insert_into(&mut p, "enc.mu")?;
            MlpParams::init(&head, &mut rng)?.insert_into(&mut p, "enc.sigma")?;
            insert_gru(&mut p, "dec.rnn", cfg.latent, cfg.dec_hidden, cfg.bidirectional, &mut rng)?;
            insert_mtan(&mut p, cfg, "dec", cfg.dec_rnn_out(), &mut rng)?;
            MlpParams::init(&[cfg.mtan_out, cfg.head_hidden, cfg.dims], &mut rng)?
                .insert_into(&mut p, "dec.out")?;
        }
        if let Some(classes) = cfg.classes {
            let input = match cfg.arch {
                Arch::Full => cfg.latent,
                Arch::Enc => cfg.mtan_out,
            };
            insert_gru(&mut p, "clf.rnn", input, cfg.clf_hidden, false, &mut rng)?;
            MlpParams::init(&[cfg.clf_hidden, cfg.clf_mlp, classes], &mut rng)?.insert_into(&mut p, "clf.mlp")?;
        }
        Ok(Model { config, params: p })
    }

    /// Checks that `params` has exactly the names and shapes `config` implies.
    pub fn from_parts(config: ModelConfig, params: Params) -> Result<Self> {
        let reference = Model::new(config.clone(), 0)?;
        let want: BTreeMap<&String, &[usize]> = reference.params.iter().map(|(n, t)| (n, t.shape())).collect();
        let got: BTreeMap<&String, &[usize]> = params.iter().map(|(n, t)| (n, t.shape())).collect();
        if want != got {
            let missing: Vec<_> = want.keys().filter(|k| !got.contains_key(*k)).collect();
            let extra: Vec<_> = got.keys().filter(|k| !want.contains_key(*k)).collect();
            let reshaped: Vec<_> = want
                .iter()
                .filter(|(k, s)| got.get(*k).is_some_and(|g| g != *s))
                .map(|(k, _)| k)
                .collect();
            return Err(Error::Config(format!(
                "parameters do not match the configuration: missing {missing:?}, unexpected {extra:?}, wrong shape {reshaped:?}"
            )));
        }
        Ok(Model { config, params })
    }

    pub fn ref_times(&self) -> Vec<f64> {
        self.config.ref_times()
    }

    /// Parameters excluded from training.
    pub fn is_frozen(&self, name: &str) -> bool {
        self.config.embed_mode == EmbedMode::Positional && name.starts_with("time_embed.")
    }

    /// Places the parameters on `g`: trainable leaves (frozen ones as
    /// constants), or all constants for inference.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelVars<'_> {
        let bound = self.params.bind(g, |n| !trainable || self.is_frozen(n));
        ModelVars { model: self, bound }
    }

    fn check_input(&self, series: &[&SparseSeries]) -> Result<()> {
        for s in series {
            if s.num_dims() != self.config.dims {
                return Err(Error::shape(
                    "model",
                    format!("series has {} dims, model expects {}", s.num_dims(), self.config.dims),
                ));
            }
            if s.is_empty() {
                return Err(Error::EmptySeries);
            }
        }
        Ok(())
    }

    pub fn encode(&self, s: &SparseSeries) -> Result<LatentPosterior> {
        Ok(self.encode_batch(&[s])?.remove(0))
    }

    pub fn encode_batch(&self, series: &[&SparseSeries]) -> Result<Vec<LatentPosterior>> {
        self.check_input(series)?;
        let batch = PaddedBatch::from_series(series)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let (mu, logvar) = vars.posterior(&mut g, &batch)?;
        let (k, l) = (self.config.ref_points, self.config.latent);
        let mu = g.value(mu).data().chunks(k * l);
        let lv = g.value(logvar).data().chunks(k * l);
        mu.zip(lv)
            .map(|(m, v)| {
                Ok(LatentPosterior {
                    mu: Tensor::new(vec![k, l], m.to_vec())?,
                    sigma: Tensor::new(vec![k, l], v.iter().map(|x| (0.5 * x).exp()).collect())?,
                })
            })
            .collect()
    }

    /// Output means `[queries, D]` for one latent sequence `z: [K, latent]`.
    pub fn decode(&self, z: &Tensor, query_times: &[f64]) -> Result<Tensor> {
        let (k, l) = (self.config.ref_points, self.config.latent);
        if z.shape() != [k, l] {
            return Err(Error::shape("decode", format!("z {:?}, expected [{k}, {l}]", z.shape())));
        }
        let z = z.clone().reshape(vec![1, k, l])?;
        let out = self.decode_batch(&z, query_times)?;
        out.reshape(vec![query_times.len(), self.config.dims])
    }

    /// Output means `[N, Q, D]` for `z: [N, K, latent]` and `N·Q`
    /// per-case query times.
    pub fn decode_batch(&self, z: &Tensor, query_times: &[f64]) -> Result<Tensor> {
        if query_times.is_empty() {
            return Err(Error::contract("decode needs at least one query time"));
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let out = vars.decode(&mut g, zv, query_times)?;
        Ok(g.value(out).clone())
    }

    /// Draws `z` from the standard normal prior, decodes it, and adds
    /// observation noise of variance `obs_var`.
    pub fn generate(&self, query_times: &[f64], seed: u64) -> Result<Tensor> {
        let (k, l) = (self.config.ref_points, self.config.latent);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::new(vec![k, l], draw_normal(&mut rng, k * l))?;
        let mut x = self.decode(&z, query_times)?;
        let sd = self.config.obs_var.sqrt();
        let noise = draw_normal(&mut rng, x.len());
        x.data_mut().iter_mut().zip(noise).for_each(|(v, e)| *v += sd * e);
        Ok(x)
    }

    /// Class log-probabilities for one latent sequence `z: [K, latent]`.
    pub fn classify(&self, z: &Tensor) -> Result<Vec<f64>> {
        if self.config.classes.is_none() {
            return Err(Error::Config("model has no classifier".into()));
        }
        let (k, l) = (self.config.ref_points, self.config.latent);
        let z = z.clone().reshape(vec![1, k, l])?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let zv = g.constant(z);
        let out = vars.classify(&mut g, zv)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Class log-probabilities straight from the encoder (`Enc` architecture).
    pub fn classify_series(&self, series: &[&SparseSeries]) -> Result<Vec<Vec<f64>>> {
        self.check_input(series)?;
        let batch = PaddedBatch::from_series(series)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let out = vars.classify_encoded(&mut g, &batch)?;
        let c = g.shape(out)[1];
        Ok(g.value(out).data().chunks(c).map(<[f64]>::to_vec).collect())
    }

    /// Decodes each conditioning series from its posterior mean at its own
    /// query times. Returns one `[queries, D]` tensor per case.
    pub fn reconstruct(&self, cond: &[&SparseSeries], queries: &[Vec<f64>]) -> Result<Vec<Tensor>> {
        if cond.len() != queries.len() {
            return Err(Error::contract("one query list per series is required"));
        }
        self.check_input(cond)?;
        if queries.iter().any(Vec::is_empty) {
            return Err(Error::contract("decode needs at least one query time"));
        }
        let batch = PaddedBatch::from_series(cond)?;
        let q = queries.iter().map(Vec::len).max().unwrap_or(0);
        let mut flat = Vec::with_capacity(cond.len() * q);
        for qs in queries {
            flat.extend_from_slice(qs);
            flat.extend(std::iter::repeat_n(0.0, q - qs.len()));
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let (mu, _) = vars.posterior(&mut g, &batch)?;
        let out = vars.decode(&mut g, mu, &flat)?;
        let d = self.config.dims;
        Ok(g.value(out)
            .data()
            .chunks(q * d)
            .zip(queries)
            .map(|(c, qs)| Tensor::new(vec![qs.len(), d], c[..qs.len() * d].to_vec()).expect("shape is consistent"))
            .collect())
    }
}

impl Model {
    /// The encoder's attention module as standalone parameters (`Mtan`
    /// kernel only).
    pub fn encoder_mtan(&self) -> Result<Option<MtanParams>> {
        if let Kernel::Rbf { .. } = self.config.kernel {
            return Ok(None);
        }
        let p = &self.params;
        let embed = TimeEmbedding::new(
            p.get("time_embed.enc.omega")?.clone(),
            p.get("time_embed.enc.alpha")?.clone(),
            self.config.embed_mode,
        )?;
        MtanParams::new(
            embed,
            p.get("mtan.enc.w")?.clone(),
            p.get("mtan.enc.v")?.clone(),
            p.get("mtan.enc.u")?.clone(),
        )
        .map(Some)
    }

    /// Encoder embedding of `s` at `query_times` (sorted ascending) and the
    /// attention vector of every (head, observed dimension, query).
    pub fn encoder_attention(&self, s: &SparseSeries, query_times: &[f64]) -> Result<QueryResult> {
        self.check_input(&[s])?;
        if query_times.is_empty() {
            return Err(Error::contract("at least one query time is required"));
        }
        let mut queries = query_times.to_vec();
        queries.sort_by(f64::total_cmp);
        let mtan = self.encoder_mtan()?;
        let mut attention = Vec::new();
        for h in 0..self.config.heads {
            for (d, dim) in s.dims.iter().enumerate() {
                if dim.is_empty() {
                    continue;
                }
                for &t in &queries {
                    let weights = match (&mtan, self.config.kernel) {
                        (Some(m), _) => m.attention_weights(t, &dim.times, h)?,
                        (None, Kernel::Rbf { alpha }) => rbf_weights(t, &dim.times, alpha)?,
                        (None, Kernel::Mtan) => unreachable!("mtan kernel always has parameters"),
                    };
                    attention.push(AttentionVector {
                        head: h,
                        dim: d,
                        query_time: t,
                        key_times: dim.times.clone(),
                        weights,
                    });
                }
            }
        }
        let batch = PaddedBatch::from_series(&[s])?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let out = vars.encoder_mtand_at(&mut g, &batch, Times::Shared(&queries))?;
        let embedding = g.value(out).clone().reshape(vec![queries.len(), self.config.mtan_out])?;
        Ok(QueryResult { embedding, attention })
    }
}

/// Model parameters bound to a graph.
pub struct ModelVars<'m> {
    model: &'m Model,
    bound: Bound,
}

impl ModelVars<'_> {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.bound.get(name)
    }

    /// Per-parameter gradients by name; frozen parameters are absent.
    pub fn gradients(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.bound.gradients(grads)
    }

    fn mtand(
        &self,
        g: &mut Graph,
        side: &str,
        batch: usize,
        queries: Times,
        keys: Times,
        values: Var,
        mask: Option<Arc<[bool]>>,
    ) -> Result<Var> {
        let cfg = &self.model.config;
        let logits = match cfg.kernel {
            Kernel::Mtan => {
                let scorer = LearnedScorer {
                    omega: self.get(&format!("time_embed.{side}.omega"))?,
                    alpha: self.get(&format!("time_embed.{side}.alpha"))?,
                    w: self.get(&format!("mtan.{side}.w"))?,
                    v: self.get(&format!("mtan.{side}.v"))?,
                    mode: cfg.embed_mode,
                };
                learned_logits(g, &scorer, batch, queries, keys)?
            }
            Kernel::Rbf { alpha } => rbf_logits(g, alpha, batch, queries, keys)?,
        };
        let per_head = attend(g, logits, values, mask, cfg.heads)?;
        let u = self.get(&format!("mtan.{side}.u"))?;
        mix_heads(g, per_head, u, cfg.heads, batch)
    }

    fn gru(&self, g: &mut Graph, prefix: &str, inputs: Var) -> Result<Var> {
        let fwd = GruVars::bind(&self.bound, &format!("{prefix}.fwd"))?;
        let bwd = if self.model.config.bidirectional {
            Some(GruVars::bind(&self.bound, &format!("{prefix}.bwd"))?)
        } else {
            None
        };
        gru_sequence_graph(g, &fwd, bwd.as_ref(), inputs)
    }

    /// Encoder mTAND at the reference points, `[B, K, J]`.
    pub fn encoder_mtand(&self, g: &mut Graph, batch: &PaddedBatch) -> Result<Var> {
        let refs = self.model.ref_times();
        self.encoder_mtand_at(g, batch, Times::Shared(&refs))
    }

    /// Encoder mTAN at arbitrary query times, `[B, Q, J]`.
    pub fn encoder_mtand_at(&self, g: &mut Graph, batch: &PaddedBatch, queries: Times) -> Result<Var> {
        let values = g.constant(Tensor::new(vec![batch.batch, batch.len, batch.dims], batch.values.clone())?);
        self.mtand(
            g,
            "enc",
            batch.batch,
            queries,
            Times::PerCase(&batch.times),
            values,
            Some(batch.mask.clone()),
        )
    }

    /// Posterior mean and log-variance, each `[B, K, latent]`.
    pub fn posterior(&self, g: &mut Graph, batch: &PaddedBatch) -> Result<(Var, Var)> {
        let cfg = &self.model.config;
        if cfg.arch != Arch::Full {
            return Err(Error::Config("the enc architecture has no latent posterior".into()));
        }
        let (b, k) = (batch.batch, cfg.ref_points);
        let h = self.encoder_mtand(g, batch)?;
        let states = self.gru(g, "enc.rnn", h)?;
        let flat = g.reshape(states, &[b * k, cfg.enc_rnn_out()])?;
        let mu = MlpVars::bind(&self.bound, "enc.mu")?.forward(g, flat)?;
        let logvar = MlpVars::bind(&self.bound, "enc.sigma")?.forward(g, flat)?;
        let mu = g.reshape(mu, &[b, k, cfg.latent])?;
        let logvar = g.reshape(logvar, &[b, k, cfg.latent])?;
        Ok((mu, logvar))
    }

    /// Output means `[N, Q, D]` for `z: [N, K, latent]` and `N·Q` query
    /// times (one row of `Q` per case).
    pub fn decode(&self, g: &mut Graph, z: Var, query_times: &[f64]) -> Result<Var> {
        let cfg = &self.model.config;
        let n = g.shape(z)[0];
        let q = query_times.len() / n.max(1);
        let states = self.gru(g, "dec.rnn", z)?;
        let refs = self.model.ref_times();
        let h = self.mtand(g, "dec", n, Times::PerCase(query_times), Times::Shared(&refs), states, None)?;
        let flat = g.reshape(h, &[n * q, cfg.mtan_out])?;
        let out = MlpVars::bind(&self.bound, "dec.out")?.forward(g, flat)?;
        g.reshape(out, &[n, q, cfg.dims])
    }

    fn classifier_head(&self, g: &mut Graph, inputs: Var) -> Result<Var> {
        if self.model.config.classes.is_none() {
            return Err(Error::Config("model has no classifier".into()));
        }
        let rnn = GruVars::bind(&self.bound, "clf.rnn.fwd")?;
        let last = gru_final_graph(g, &rnn, inputs)?;
        let logits = MlpVars::bind(&self.bound, "clf.mlp")?.forward(g, last)?;
        g.log_softmax(logits, 1)
    }

    /// Class log-probabilities `[N, C]` for latent sequences `[N, K, latent]`.
    pub fn classify(&self, g: &mut Graph, z: Var) -> Result<Var> {
        if self.model.config.arch != Arch::Full {
            return Err(Error::Config("the enc architecture classifies series, not latents".into()));
        }
        self.classifier_head(g, z)
    }

    /// Class log-probabilities `[B, C]` from the encoder mTAND output.
    pub fn classify_encoded(&self, g: &mut Graph, batch: &PaddedBatch) -> Result<Var> {
        if self.model.config.arch != Arch::Enc {
            return Err(Error::Config("only the enc architecture classifies series directly".into()));
        }
        let h = self.encoder_mtand(g, batch)?;
        self.classifier_head(g, h)
    }
}

pub(crate) fn draw_normal<R: rand::Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `n` standard-normal draws from an independent stream per `(seed, stream)`.
pub fn normal_stream(seed: u64, stream: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    draw_normal(&mut rng, n)
}

/// `n` reparameterized samples `z = μ + σ ⊙ ε`, `[n, K, latent]`.
pub fn sample_posterior(post: &LatentPosterior, n: usize, seed: u64) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::contract("at least one sample is required"));
    }
    let m = post.mu.len();
    let eps = normal_stream(seed, 0, n * m);
    let data = eps
        .chunks(m)
        .flat_map(|e| {
            post.mu
                .data()
                .iter()
                .zip(post.sigma.data())
                .zip(e)
                .map(|((mu, sd), e)| mu + sd * e)
        })
        .collect();
    let mut shape = vec![n];
    shape.extend_from_slice(post.mu.shape());
    Tensor::new(shape, data)
}
