//! Training criteria: the length-normalized ELBO, the supervised
//! cross-entropy term, KL annealing, and the label prediction rule.
//!
//! Losses are minimized, so [`LossReport`] stores every term as a positive
//! quantity: `total = recon + kl_weight·kl + λ·supervised`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use crate::data::{PaddedBatch, SparseSeries};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{normal_stream, Arch, Model, ModelVars};
use crate::tensor::Tensor;

/// `log N(x; mean, var)`.
pub fn gaussian_loglik(x: f64, mean: f64, var: f64) -> Result<f64> {
    if !(var > 0.0) {
        return Err(Error::contract(format!("variance must be positive, got {var}")));
    }
    let d = x - mean;
    Ok(-0.5 * (2.0 * PI * var).ln() - d * d / (2.0 * var))
}

/// `KL(N(μ, σ²) ‖ N(0, I))` summed over coordinates.
pub fn kl_diag_gaussian(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::shape("kl_diag_gaussian", format!("{} means vs {} sigmas", mu.len(), sigma.len())));
    }
    let mut total = 0.0;
    for (&m, &s) in mu.iter().zip(sigma) {
        if !(s > 0.0) {
            return Err(Error::contract(format!("sigma must be positive, got {s}")));
        }
        let v = s * s;
        total += 0.5 * (m * m + v - 1.0 - v.ln());
    }
    Ok(total)
}

/// KL weight at `epoch`: `1 − 0.99^epoch`.
pub fn kl_anneal(epoch: usize) -> f64 {
    1.0 - 0.99f64.powi(epoch as i32)
}

/// Loss terms for one batch, each summed over cases.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    /// Negative log-likelihood, each case divided by its observation count.
    pub recon: f64,
    /// KL divergence before annealing, each case divided by its observation count.
    pub kl: f64,
    /// Cross-entropy of the labels.
    pub supervised: f64,
    pub kl_weight: f64,
    /// Observations per target case.
    pub counts: Vec<usize>,
}

/// How a batch is scored.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    /// Posterior samples per case.
    pub samples: usize,
    pub kl_weight: f64,
    /// Weight of the supervised term; 0 disables it.
    pub lambda: f64,
    /// Seed for the reparameterization noise.
    pub seed: u64,
}

impl Objective {
    pub fn unsupervised(samples: usize, kl_weight: f64, seed: u64) -> Self {
        Objective { samples, kl_weight, lambda: 0.0, seed }
    }

    fn validate(&self, model: &Model) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::contract("at least one sample is required"));
        }
        if !(0.0..=1.0).contains(&self.kl_weight) {
            return Err(Error::contract(format!("kl_weight must lie in [0, 1], got {}", self.kl_weight)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::contract(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.lambda > 0.0 && model.config.classes.is_none() {
            return Err(Error::Config("a supervised objective needs a classifier".into()));
        }
        if model.config.arch == Arch::Enc && self.lambda == 0.0 {
            return Err(Error::Config("the enc architecture trains only the supervised term".into()));
        }
        Ok(())
    }
}

/// Graph handles for the loss terms.
pub struct LossVars {
    pub total: Var,
    recon: Option<Var>,
    kl: Option<Var>,
    supervised: Option<Var>,
    kl_weight: f64,
    counts: Vec<usize>,
}

impl LossVars {
    pub fn report(&self, g: &Graph) -> Result<LossReport> {
        let get = |v: Option<Var>| v.map_or(Ok(0.0), |v| g.scalar_value(v));
        Ok(LossReport {
            total: g.scalar_value(self.total)?,
            recon: get(self.recon)?,
            kl: get(self.kl)?,
            supervised: get(self.supervised)?,
            kl_weight: self.kl_weight,
            counts: self.counts.clone(),
        })
    }
}

fn label_weights(cases: &[&SparseSeries], rows_per_case: usize, classes: usize) -> Result<Tensor> {
    let mut w = vec![0.0; cases.len() * rows_per_case * classes];
    for (n, s) in cases.iter().enumerate() {
        let Some(y) = s.label else { continue };
        if y >= classes {
            return Err(Error::contract(format!("label {y} is out of range for {classes} classes")));
        }
        for r in 0..rows_per_case {
            w[(n * rows_per_case + r) * classes + y] = -1.0 / rows_per_case as f64;
        }
    }
    Tensor::new(vec![cases.len() * rows_per_case, classes], w)
}

/// Builds the loss for conditioning series `cond` scored against
/// `target` (case `n` of one is case `n` of the other). Noise for case `n`
/// comes from stream `n` of `objective.seed`, so a case's draws do not
/// depend on the rest of the batch.
pub fn loss_graph(
    g: &mut Graph,
    vars: &ModelVars,
    model: &Model,
    cond: &[&SparseSeries],
    target: &[&SparseSeries],
    objective: &Objective,
) -> Result<LossVars> {
    objective.validate(model)?;
    if cond.len() != target.len() {
        return Err(Error::contract(format!(
            "{} conditioning series vs {} targets",
            cond.len(),
            target.len()
        )));
    }
    if cond.is_empty() {
        return Err(Error::contract("the batch is empty"));
    }
    if cond.iter().chain(target).any(|s| s.is_empty()) {
        return Err(Error::EmptySeries);
    }
    let cfg = &model.config;
    let counts: Vec<usize> = target.iter().map(|s| s.total_observations()).collect();
    let cb = PaddedBatch::from_series(cond)?;
    let n = cond.len();

    if cfg.arch == Arch::Enc {
        let lp = vars.classify_encoded(g, &cb)?;
        let ce = g.weighted_sum(lp, label_weights(cond, 1, cfg.classes.unwrap_or(1))?)?;
        let total = g.scale(ce, objective.lambda)?;
        return Ok(LossVars {
            total,
            recon: None,
            kl: None,
            supervised: Some(ce),
            kl_weight: 0.0,
            counts,
        });
    }

    let tb = PaddedBatch::from_series(target)?;
    let (k, l, d) = (cfg.ref_points, cfg.latent, cfg.dims);
    let s = objective.samples;
    let (mu, logvar) = vars.posterior(g, &cb)?;

    // z rows are case-major: row n·S + s holds sample s of case n
    let idx: Arc<[usize]> = (0..n * s).map(|r| r / s).collect();
    let mu_s = g.gather_rows(mu, idx.clone())?;
    let lv_s = g.gather_rows(logvar, idx)?;
    let eps: Vec<f64> = (0..n).flat_map(|c| normal_stream(objective.seed, c as u64, s * k * l)).collect();
    let eps = g.constant(Tensor::new(vec![n * s, k, l], eps)?);
    let half = g.scale(lv_s, 0.5)?;
    let sd = g.exp(half)?;
    let noise = g.mul(sd, eps)?;
    let z = g.add(mu_s, noise)?;

    let tl = tb.len;
    let mut queries = Vec::with_capacity(n * s * tl);
    let mut x = Vec::with_capacity(n * s * tl * d);
    let mut w = Vec::with_capacity(n * s * tl * d);
    for c in 0..n {
        let times = &tb.times[c * tl..(c + 1) * tl];
        let values = &tb.values[c * tl * d..(c + 1) * tl * d];
        let mask = &tb.mask[c * tl * d..(c + 1) * tl * d];
        let scale = 1.0 / (2.0 * cfg.obs_var * s as f64 * counts[c] as f64);
        for _ in 0..s {
            queries.extend_from_slice(times);
            x.extend_from_slice(values);
            w.extend(mask.iter().map(|&m| if m { scale } else { 0.0 }));
        }
    }
    let mean = vars.decode(g, z, &queries)?;
    let x = g.constant(Tensor::new(vec![n * s, tl, d], x)?);
    let diff = g.sub(mean, x)?;
    let sq = g.square(diff)?;
    let quad = g.weighted_sum(sq, Tensor::new(vec![n * s, tl, d], w)?)?;
    // each case contributes L_n copies of ½ln(2πσ²), divided by L_n
    let recon = g.offset(quad, n as f64 * 0.5 * (2.0 * PI * cfg.obs_var).ln())?;

    let mu2 = g.square(mu)?;
    let var = g.exp(logvar)?;
    let var_m1 = g.offset(var, -1.0)?;
    let gap = g.sub(var_m1, logvar)?;
    let kl_terms = g.add(mu2, gap)?;
    let kl_w: Vec<f64> = counts
        .iter()
        .flat_map(|&c| std::iter::repeat_n(0.5 / c as f64, k * l))
        .collect();
    let kl = g.weighted_sum(kl_terms, Tensor::new(vec![n, k, l], kl_w)?)?;

    let annealed = g.scale(kl, objective.kl_weight)?;
    let mut total = g.add(recon, annealed)?;
    let mut supervised = None;
    if objective.lambda > 0.0 {
        let classes = cfg.classes.unwrap_or(1);
        let lp = vars.classify(g, z)?;
        let ce = g.weighted_sum(lp, label_weights(cond, s, classes)?)?;
        let weighted = g.scale(ce, objective.lambda)?;
        total = g.add(total, weighted)?;
        supervised = Some(ce);
    }
    Ok(LossVars {
        total,
        recon: Some(recon),
        kl: Some(kl),
        supervised,
        kl_weight: objective.kl_weight,
        counts,
    })
}

/// Scores a batch without computing gradients.
pub fn evaluate(
    model: &Model,
    cond: &[&SparseSeries],
    target: &[&SparseSeries],
    objective: &Objective,
) -> Result<LossReport> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    loss_graph(&mut g, &vars, model, cond, target, objective)?.report(&g)
}

/// Scores a batch and returns gradients for every trainable parameter.
pub fn loss_and_gradients(
    model: &Model,
    cond: &[&SparseSeries],
    target: &[&SparseSeries],
    objective: &Objective,
) -> Result<(LossReport, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, true);
    let loss = loss_graph(&mut g, &vars, model, cond, target, objective)?;
    let report = loss.report(&g)?;
    if !report.total.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    let mut grads = g.backward(loss.total)?;
    Ok((report, vars.gradients(&mut grads)))
}

/// Negative normalized ELBO of `batch` reconstructing itself.
pub fn nvae_loss(
    model: &Model,
    batch: &[&SparseSeries],
    samples: usize,
    kl_weight: f64,
    seed: u64,
) -> Result<LossReport> {
    evaluate(model, batch, batch, &Objective::unsupervised(samples, kl_weight, seed))
}

/// [`nvae_loss`] plus `λ` times the label cross-entropy. Unlabeled cases
/// contribute no supervised term.
pub fn supervised_loss(
    model: &Model,
    batch: &[&SparseSeries],
    lambda: f64,
    samples: usize,
    kl_weight: f64,
    seed: u64,
) -> Result<LossReport> {
    let objective = Objective { samples, kl_weight, lambda, seed };
    evaluate(model, batch, batch, &objective)
}

/// Class log-probabilities per series, averaged over `samples` posterior
/// draws (the `Enc` architecture is deterministic and ignores both).
pub fn class_log_probs(model: &Model, series: &[&SparseSeries], samples: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let cfg = &model.config;
    let Some(classes) = cfg.classes else {
        return Err(Error::Config("model has no classifier".into()));
    };
    if cfg.arch == Arch::Enc {
        return model.classify_series(series);
    }
    if samples == 0 {
        return Err(Error::contract("at least one sample is required"));
    }
    let posts = model.encode_batch(series)?;
    let (k, l) = (cfg.ref_points, cfg.latent);
    let mut z = Vec::with_capacity(series.len() * samples * k * l);
    for (c, post) in posts.iter().enumerate() {
        let eps = normal_stream(seed, c as u64, samples * k * l);
        for e in eps.chunks(k * l) {
            z.extend(post.mu.data().iter().zip(post.sigma.data()).zip(e).map(|((m, s), e)| m + s * e));
        }
    }
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let zv = g.constant(Tensor::new(vec![series.len() * samples, k, l], z)?);
    let lp = vars.classify(&mut g, zv)?;
    Ok(g.value(lp)
        .data()
        .chunks(samples * classes)
        .map(|case| {
            (0..classes)
                .map(|j| case.chunks(classes).map(|row| row[j]).sum::<f64>() / samples as f64)
                .collect()
        })
        .collect())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Predicted class of one series.
pub fn predict_label(model: &Model, s: &SparseSeries, samples: usize, seed: u64) -> Result<usize> {
    Ok(argmax(&class_log_probs(model, &[s], samples, seed)?[0]))
}
