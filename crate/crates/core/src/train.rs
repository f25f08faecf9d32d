//! Mini-batch training with Adam, per-epoch metrics and best-validation
//! model selection.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::transform::subsample_observed;
use crate::data::{PaddedBatch, SparseSeries};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, mse, roc_auc};
use crate::model::{Arch, Model};
use crate::objectives::{argmax, class_log_probs, kl_anneal, loss_and_gradients, Objective};
use crate::optim::{adam_step, AdamConfig, AdamState};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Interpolation,
    Classification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Posterior samples per case in the ELBO.
    pub elbo_samples: usize,
    /// Weight of the supervised term (classification only).
    pub lambda: f64,
    /// Fraction of each series used for conditioning (interpolation only).
    pub p_observed: f64,
    /// Anneal the KL weight as `1 − 0.99^epoch`; otherwise it is 1.
    pub kl_annealing: bool,
    /// Posterior samples when predicting labels.
    pub predict_samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: Task::Interpolation,
            epochs: 500,
            lr: 1e-3,
            batch_size: 50,
            elbo_samples: 5,
            lambda: 100.0,
            p_observed: 1.0,
            kl_annealing: true,
            predict_samples: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.batch_size == 0 || self.elbo_samples == 0 || self.predict_samples == 0 {
            return Err(Error::Config("batch size and sample counts must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.p_observed > 0.0 && self.p_observed <= 1.0) {
            return Err(Error::Config(format!("p_observed must lie in (0, 1], got {}", self.p_observed)));
        }
        match self.task {
            Task::Interpolation if model.config.arch == Arch::Enc => {
                Err(Error::Config("the enc architecture cannot interpolate".into()))
            }
            Task::Classification if model.config.classes.is_none() => {
                Err(Error::Config("classification needs a class count".into()))
            }
            Task::Classification if !(self.lambda > 0.0) => {
                Err(Error::Config("classification needs lambda > 0".into()))
            }
            _ => Ok(()),
        }
    }

    fn objective(&self, epoch: usize, seed: u64) -> Objective {
        let (samples, lambda) = match self.task {
            Task::Interpolation => (self.elbo_samples, 0.0),
            Task::Classification => (self.elbo_samples, self.lambda),
        };
        Objective {
            samples,
            kl_weight: if self.kl_annealing { kl_anneal(epoch) } else { 1.0 },
            lambda,
            seed,
        }
    }
}

const NOISE_STREAM: u64 = 0x6e6f_6973_65;
const VAL_STREAM: u64 = 0x7661_6c;

/// Independent seed for a `(parent, index)` pair.
pub fn derive_seed(parent: u64, index: u64) -> u64 {
    let mut x = parent ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// The selection metric on the validation split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ValMetric {
    Mse(f64),
    Auc(f64),
    Accuracy(f64),
}

impl ValMetric {
    pub fn name(&self) -> &'static str {
        match self {
            ValMetric::Mse(_) => "val_mse",
            ValMetric::Auc(_) => "val_auc",
            ValMetric::Accuracy(_) => "val_accuracy",
        }
    }

    pub fn value(&self) -> f64 {
        match *self {
            ValMetric::Mse(v) | ValMetric::Auc(v) | ValMetric::Accuracy(v) => v,
        }
    }

    fn better_than(&self, other: &ValMetric) -> bool {
        match self {
            ValMetric::Mse(v) => *v < other.value(),
            _ => self.value() > other.value(),
        }
    }
}

/// One line of the metrics log. Loss terms are averaged over training cases.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub supervised: f64,
    pub kl_weight: f64,
    pub val: Option<ValMetric>,
    pub wall_ms: u128,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} total={} recon={} kl={} supervised={} kl_weight={}",
            self.epoch, self.total, self.recon, self.kl, self.supervised, self.kl_weight
        )?;
        if let Some(v) = self.val {
            write!(f, " {}={}", v.name(), v.value())?;
        }
        write!(f, " wall_ms={}", self.wall_ms)
    }
}

/// Training and validation series. For interpolation, `val_truth` (dense
/// targets index-aligned with `val`) replaces the observed points as the
/// validation target when present.
pub struct TrainData<'a> {
    pub train: &'a [SparseSeries],
    pub val: &'a [SparseSeries],
    pub val_truth: Option<&'a [SparseSeries]>,
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation metric, or the
    /// final ones when there is no validation split.
    pub best: Model,
    pub best_epoch: usize,
    pub best_metric: Option<ValMetric>,
    pub history: Vec<EpochRecord>,
}

/// Trains `model` in place. `on_epoch` sees each record and whether the
/// epoch improved on the best validation metric.
pub fn train(
    model: &mut Model,
    cfg: &TrainConfig,
    data: &TrainData,
    mut on_epoch: impl FnMut(&EpochRecord, &Model, bool) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate(model)?;
    if data.train.is_empty() {
        return Err(Error::Validation("the training split is empty".into()));
    }
    if let Some(truth) = data.val_truth {
        if truth.len() != data.val.len() {
            return Err(Error::Validation(format!(
                "{} validation series but {} ground-truth series",
                data.val.len(),
                truth.len()
            )));
        }
    }
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr));
    let mut best: Option<(Model, usize, ValMetric)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let epoch_seed = derive_seed(cfg.seed, epoch as u64);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let mut sums = [0.0; 4];
        let mut kl_weight = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let targets: Vec<&SparseSeries> = chunk.iter().map(|&i| &data.train[i]).collect();
            let conds = conditioning(&targets, cfg, epoch_seed, chunk)?;
            let cond_refs: Vec<&SparseSeries> = conds.iter().collect();
            let objective = cfg.objective(epoch, derive_seed(epoch_seed ^ NOISE_STREAM, b as u64));
            let (report, grads) = loss_and_gradients(model, &cond_refs, &targets, &objective)?;
            if grads.values().any(|g| !g.all_finite()) {
                return Err(Error::NonFinite { op: "gradient" });
            }
            adam_step(&mut model.params, &grads, &mut adam)?;
            sums[0] += report.total;
            sums[1] += report.recon;
            sums[2] += report.kl;
            sums[3] += report.supervised;
            kl_weight = report.kl_weight;
        }
        let val = if data.val.is_empty() {
            None
        } else {
            Some(validate(model, cfg, data)?)
        };
        let improved = match (&val, &best) {
            (Some(v), Some((_, _, b))) => v.better_than(b),
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            best = Some((model.clone(), epoch, val.expect("improvement implies a metric")));
        }
        let n = data.train.len() as f64;
        let record = EpochRecord {
            epoch,
            total: sums[0] / n,
            recon: sums[1] / n,
            kl: sums[2] / n,
            supervised: sums[3] / n,
            kl_weight,
            val,
            wall_ms: start.elapsed().as_millis(),
        };
        on_epoch(&record, model, improved)?;
        history.push(record);
    }
    Ok(match best {
        Some((m, e, v)) => TrainOutcome {
            best: m,
            best_epoch: e,
            best_metric: Some(v),
            history,
        },
        None => TrainOutcome {
            best: model.clone(),
            best_epoch: cfg.epochs.saturating_sub(1),
            best_metric: None,
            history,
        },
    })
}

fn conditioning(targets: &[&SparseSeries], cfg: &TrainConfig, seed: u64, ids: &[usize]) -> Result<Vec<SparseSeries>> {
    targets
        .iter()
        .zip(ids)
        .map(|(s, &i)| {
            if cfg.task == Task::Interpolation && cfg.p_observed < 1.0 {
                Ok(subsample_observed(s, cfg.p_observed, derive_seed(seed, i as u64))?.0)
            } else {
                Ok((*s).clone())
            }
        })
        .collect()
}

fn validate(model: &Model, cfg: &TrainConfig, data: &TrainData) -> Result<ValMetric> {
    match cfg.task {
        Task::Interpolation => {
            let (cond, target): (Vec<SparseSeries>, &[SparseSeries]) = match data.val_truth {
                Some(truth) => (data.val.to_vec(), truth),
                None => (
                    data.val
                        .iter()
                        .enumerate()
                        .map(|(i, s)| Ok(subsample_observed(s, cfg.p_observed, derive_seed(cfg.seed ^ VAL_STREAM, i as u64))?.0))
                        .collect::<Result<_>>()?,
                    data.val,
                ),
            };
            Ok(ValMetric::Mse(reconstruction_mse(model, &cond, target)?))
        }
        Task::Classification => {
            let m = classification_metrics(model, data.val, cfg.predict_samples, cfg.seed)?;
            Ok(match m.auc {
                Some(a) => ValMetric::Auc(a),
                None => ValMetric::Accuracy(m.accuracy),
            })
        }
    }
}

const EVAL_CHUNK: usize = 100;

/// MSE over every observed `(dimension, time)` of `targets`, decoding
/// each case from the posterior mean given `cond` (index-aligned).
pub fn reconstruction_mse(model: &Model, cond: &[SparseSeries], targets: &[SparseSeries]) -> Result<f64> {
    if cond.len() != targets.len() || cond.is_empty() {
        return Err(Error::contract("reconstruction needs equal, non-empty conditioning and target sets"));
    }
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for (c, t) in cond.chunks(EVAL_CHUNK).zip(targets.chunks(EVAL_CHUNK)) {
        let c: Vec<&SparseSeries> = c.iter().collect();
        let t: Vec<&SparseSeries> = t.iter().collect();
        let tb = PaddedBatch::from_series(&t)?;
        let queries: Vec<Vec<f64>> = tb
            .lengths
            .iter()
            .enumerate()
            .map(|(i, &n)| tb.times[i * tb.len..i * tb.len + n.max(1)].to_vec())
            .collect();
        let out = model.reconstruct(&c, &queries)?;
        let d = tb.dims;
        for (i, o) in out.iter().enumerate() {
            for j in 0..tb.lengths[i] {
                for k in 0..d {
                    let at = (i * tb.len + j) * d + k;
                    if tb.mask[at] {
                        pred.push(o.data()[j * d + k]);
                        truth.push(tb.values[at]);
                    }
                }
            }
        }
    }
    mse(&pred, &truth)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    /// Binary problems with both classes present only.
    pub auc: Option<f64>,
    pub predictions: Vec<usize>,
}

pub fn classification_metrics(model: &Model, data: &[SparseSeries], samples: usize, seed: u64) -> Result<ClassificationMetrics> {
    let labels: Vec<usize> = data
        .iter()
        .enumerate()
        .map(|(i, s)| s.label.ok_or_else(|| Error::Validation(format!("series {i} has no label"))))
        .collect::<Result<_>>()?;
    let mut lp = Vec::with_capacity(data.len());
    for (k, chunk) in data.chunks(EVAL_CHUNK).enumerate() {
        let refs: Vec<&SparseSeries> = chunk.iter().collect();
        lp.extend(class_log_probs(model, &refs, samples, derive_seed(seed, k as u64))?);
    }
    let predictions: Vec<usize> = lp.iter().map(|p| argmax(p)).collect();
    let acc = accuracy(&predictions, &labels)?;
    let positive: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
    let binary = model.config.classes == Some(2);
    let both = positive.iter().any(|&p| p) && positive.iter().any(|&p| !p);
    let auc = if binary && both {
        Some(roc_auc(&lp.iter().map(|p| p[1]).collect::<Vec<_>>(), &positive)?)
    } else {
        None
    };
    Ok(ClassificationMetrics {
        accuracy: acc,
        auc,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_oscillations, generate_synthetic, OscillationConfig, SyntheticConfig};
    use crate::data::DimSeries;
    use crate::model::ModelConfig;

    fn small_model(classes: Option<usize>) -> Model {
        Model::new(
            ModelConfig {
                ref_points: 8,
                latent: 4,
                mtan_out: 8,
                heads: 1,
                embed_dim: 8,
                dk: 8,
                enc_hidden: 8,
                dec_hidden: 8,
                head_hidden: 8,
                clf_hidden: 8,
                clf_mlp: 8,
                classes,
                ..ModelConfig::default()
            },
            0,
        )
        .unwrap()
    }

    #[test]
    fn seeds_are_spread() {
        assert_ne!(derive_seed(0, 0), derive_seed(0, 1));
        assert_ne!(derive_seed(0, 1), derive_seed(1, 0));
    }

    #[test]
    fn record_format() {
        let r = EpochRecord {
            epoch: 3,
            total: 1.5,
            recon: 1.0,
            kl: 0.25,
            supervised: 0.0,
            kl_weight: 0.01,
            val: Some(ValMetric::Mse(0.125)),
            wall_ms: 7,
        };
        assert_eq!(
            r.to_string(),
            "epoch=3 total=1.5 recon=1 kl=0.25 supervised=0 kl_weight=0.01 val_mse=0.125 wall_ms=7"
        );
    }

    #[test]
    fn interpolation_loss_decreases() {
        let d = generate_synthetic(&SyntheticConfig { trajectories: 60, ..SyntheticConfig::default() }).unwrap();
        let mut m = small_model(None);
        let cfg = TrainConfig {
            epochs: 8,
            lr: 1e-2,
            batch_size: 16,
            elbo_samples: 2,
            kl_annealing: false,
            ..TrainConfig::default()
        };
        let data = TrainData {
            train: &d.train.observed,
            val: &d.test.observed,
            val_truth: Some(&d.test.truth),
        };
        let out = train(&mut m, &cfg, &data, |_, _, _| Ok(())).unwrap();
        let first = &out.history[0];
        let last = out.history.last().unwrap();
        assert!(last.total < first.total, "{first} -> {last}");
        assert!(out.best_metric.is_some());
    }

    #[test]
    fn training_is_deterministic() {
        let d = generate_oscillations(&OscillationConfig { cases: 24, ..OscillationConfig::default() }).unwrap();
        let cfg = TrainConfig {
            task: Task::Classification,
            epochs: 2,
            batch_size: 8,
            elbo_samples: 1,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = small_model(Some(2));
            let data = TrainData { train: &d[..16], val: &d[16..], val_truth: None };
            let out = train(&mut m, &cfg, &data, |_, _, _| Ok(())).unwrap();
            (m, out.history.into_iter().map(|r| (r.total, r.val)).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn perfect_reconstruction_scores_zero() {
        // a constant decoder output of 0 reproduces all-zero data exactly
        let mut m = small_model(None);
        for (name, t) in m.params.iter_mut() {
            if name.starts_with("dec.out") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let s = SparseSeries::new(vec![DimSeries::new(vec![0.1, 0.5], vec![0.0, 0.0])], None).unwrap();
        assert_eq!(reconstruction_mse(&m, &[s.clone()], &[s]).unwrap(), 0.0);
    }

    #[test]
    fn invalid_task_configs() {
        let m = small_model(None);
        let cfg = TrainConfig { task: Task::Classification, ..TrainConfig::default() };
        assert!(matches!(cfg.validate(&m), Err(Error::Config(_))));
        let cfg = TrainConfig { p_observed: 0.0, ..TrainConfig::default() };
        assert!(matches!(cfg.validate(&m), Err(Error::Config(_))));
    }
}
