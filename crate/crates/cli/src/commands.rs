use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mtan::checkpoint::{self, write_atomic};
use mtan::data::io::{load_series, save_series};
use mtan::data::synthetic::{generate_oscillations, generate_synthetic, OscillationConfig, SyntheticConfig};
use mtan::data::transform::{split, subsample_observed};
use mtan::train::{classification_metrics, derive_seed, reconstruction_mse, train, TrainConfig, TrainData};
use mtan::{Error, Model, SparseSeries, Task};
use serde_json::json;

use crate::args::{DumpArgs, EvalArgs, GenerateArgs, Switch, TaskArg, TrainArgs};

/// A failure with its process exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Lib(Error::Config(_)) => 2,
            CliError::Lib(Error::NonFinite { .. }) => 4,
            CliError::Lib(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e }.into())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("manifest serializes");
    text.push('\n');
    Ok(write_atomic(path, text.as_bytes())?)
}

fn write_text(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => Ok(write_atomic(path, text.as_bytes())?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn generate(args: &GenerateArgs) -> Result<()> {
    create_dir(&args.out)?;
    let files = match args.task {
        TaskArg::Interpolation => {
            let cfg = SyntheticConfig {
                trajectories: args.count.unwrap_or(1000),
                grid: args.grid,
                ref_points: args.generator_ref_points,
                alpha: args.alpha,
                observed: args.observed,
                train_fraction: args.train_fraction,
                seed: args.seed,
            };
            let data = generate_synthetic(&cfg)?;
            save_series(&args.out.join("train.jsonl"), &data.train.observed)?;
            save_series(&args.out.join("test.jsonl"), &data.test.observed)?;
            save_series(&args.out.join("train_truth.jsonl"), &data.train.truth)?;
            save_series(&args.out.join("test_truth.jsonl"), &data.test.truth)?;
            json!({
                "task": "interpolation",
                "config": cfg,
                "train": data.train.observed.len(),
                "test": data.test.observed.len(),
                "files": ["train.jsonl", "test.jsonl", "train_truth.jsonl", "test_truth.jsonl"],
            })
        }
        TaskArg::Classification => {
            if !(args.train_fraction > 0.0 && args.train_fraction < 1.0) {
                return Err(CliError::Usage("--train-fraction must lie in (0, 1)".into()));
            }
            let cfg = OscillationConfig {
                cases: args.count.unwrap_or(500),
                seed: args.seed,
                ..OscillationConfig::default()
            };
            let data = generate_oscillations(&cfg)?;
            let parts = split(&data, &[args.train_fraction, 1.0 - args.train_fraction], args.seed)?;
            save_series(&args.out.join("train.jsonl"), &parts[0])?;
            save_series(&args.out.join("test.jsonl"), &parts[1])?;
            json!({
                "task": "classification",
                "config": cfg,
                "train_fraction": args.train_fraction,
                "train": parts[0].len(),
                "test": parts[1].len(),
                "files": ["train.jsonl", "test.jsonl"],
            })
        }
    };
    write_json(&args.out.join("manifest.json"), &json!({ "command": "generate", "dataset": files }))
}

fn check_dims(data: &[SparseSeries], what: &Path) -> Result<usize> {
    let dims = data.first().map(SparseSeries::num_dims).ok_or_else(|| {
        CliError::Lib(Error::Validation(format!("{} contains no series", what.display())))
    })?;
    if let Some(i) = data.iter().position(|s| s.num_dims() != dims) {
        return Err(Error::Validation(format!("series {i} has {} dims, expected {dims}", data[i].num_dims())).into());
    }
    if let Some(i) = data.iter().position(SparseSeries::is_empty) {
        return Err(Error::Validation(format!("series {i} has no observations")).into());
    }
    Ok(dims)
}

fn load_truth(path: Option<&PathBuf>, data: &[SparseSeries]) -> Result<Option<Vec<SparseSeries>>> {
    let Some(path) = path else { return Ok(None) };
    let truth = load_series(path)?;
    if truth.len() != data.len() {
        return Err(Error::Validation(format!(
            "{} has {} series but the data has {}",
            path.display(),
            truth.len(),
            data.len()
        ))
        .into());
    }
    Ok(Some(truth))
}

pub fn train_cmd(args: &TrainArgs) -> Result<()> {
    let task: Task = args.task.into();
    let data = load_series(&args.data)?;
    let dims = check_dims(&data, &args.data)?;
    let truth = load_truth(args.ground_truth.as_ref(), &data)?;
    let classes = match task {
        Task::Classification => {
            let max = data.iter().filter_map(|s| s.label).max().ok_or_else(|| {
                CliError::Lib(Error::Validation("classification needs labeled series".into()))
            })?;
            let classes = args.classes.unwrap_or(max + 1).max(2);
            if max >= classes {
                return Err(Error::Validation(format!("label {max} does not fit {classes} classes")).into());
            }
            Some(classes)
        }
        Task::Interpolation => args.classes,
    };
    if !(args.val_fraction >= 0.0 && args.val_fraction < 1.0) {
        return Err(CliError::Usage("--val-fraction must lie in [0, 1)".into()));
    }
    let config = args.model.to_config(dims, classes);
    let defaults = match task {
        Task::Interpolation => (500, 1e-3, 5),
        Task::Classification => (300, 1e-4, 1),
    };
    let cfg = TrainConfig {
        task,
        epochs: args.epochs.unwrap_or(defaults.0),
        lr: args.lr.unwrap_or(defaults.1),
        batch_size: args.batch,
        elbo_samples: args.elbo_samples.unwrap_or(defaults.2),
        lambda: args.lambda,
        p_observed: args.p_observed,
        kl_annealing: args.kl_annealing == Switch::On,
        predict_samples: 1,
        seed: args.seed,
    };
    let mut model = Model::new(config, derive_seed(args.seed, 0))?;
    cfg.validate(&model)?;

    let ids: Vec<usize> = (0..data.len()).collect();
    let parts = split(&ids, &[1.0 - args.val_fraction, args.val_fraction], args.seed)?;
    let pick = |set: &[SparseSeries], idx: &[usize]| idx.iter().map(|&i| set[i].clone()).collect::<Vec<_>>();
    let train_set = pick(&data, &parts[0]);
    let val_set = pick(&data, &parts[1]);
    let val_truth = truth.as_ref().map(|t| pick(t, &parts[1]));

    create_dir(&args.out)?;
    let ckpt_path = args.out.join("checkpoint.json");
    let log_path = args.out.join("metrics.log");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::Io { path: log_path.clone(), source: e })?;
    let log_err = |e: std::io::Error| CliError::Lib(Error::Io { path: log_path.clone(), source: e });
    let mut manifest = json!({
        "command": "train",
        "data": args.data,
        "ground_truth": args.ground_truth,
        "seed": args.seed,
        "val_fraction": args.val_fraction,
        "train_cases": train_set.len(),
        "val_cases": val_set.len(),
        "model": model.config,
        "train": cfg,
    });
    write_json(&args.out.join("manifest.json"), &manifest)?;

    let mut last_epoch = None;
    let result = train(
        &mut model,
        &cfg,
        &TrainData {
            train: &train_set,
            val: &val_set,
            val_truth: val_truth.as_deref(),
        },
        |record, current, improved| {
            writeln!(log, "{record}").and_then(|_| log.flush()).map_err(|e| Error::Io {
                path: log_path.clone(),
                source: e,
            })?;
            if improved || val_set.is_empty() {
                checkpoint::save(current, &ckpt_path)?;
            }
            last_epoch = Some(record.epoch);
            Ok(())
        },
    );
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            let epoch = last_epoch.map_or(0, |e| e + 1);
            writeln!(log, "epoch={epoch} status=aborted error={}", e.to_string().replace(' ', "_")).map_err(log_err)?;
            return Err(e.into());
        }
    };
    manifest["best_epoch"] = json!(outcome.best_epoch);
    if let Some(m) = outcome.best_metric {
        manifest[m.name()] = json!(m.value());
    }
    write_json(&args.out.join("manifest.json"), &manifest)
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let model = checkpoint::load(&args.checkpoint)?;
    let data = load_series(&args.data)?;
    let dims = check_dims(&data, &args.data)?;
    if dims != model.config.dims {
        return Err(Error::Validation(format!(
            "data has {dims} dims but the checkpoint expects {}",
            model.config.dims
        ))
        .into());
    }
    let mut lines = vec![format!("cases={}", data.len())];
    match args.task {
        TaskArg::Interpolation => {
            if !(args.p_observed > 0.0 && args.p_observed <= 1.0) {
                return Err(CliError::Usage("--p-observed must lie in (0, 1]".into()));
            }
            let truth = load_truth(args.ground_truth.as_ref(), &data)?;
            let cond: Vec<SparseSeries> = data
                .iter()
                .enumerate()
                .map(|(i, s)| Ok(subsample_observed(s, args.p_observed, derive_seed(args.seed, i as u64))?.0))
                .collect::<std::result::Result<_, Error>>()?;
            let target = truth.as_deref().unwrap_or(&data);
            lines.push(format!("mse={}", reconstruction_mse(&model, &cond, target)?));
            lines.push(format!("reconstruction_mse={}", reconstruction_mse(&model, &cond, &cond)?));
        }
        TaskArg::Classification => {
            let m = classification_metrics(&model, &data, args.samples, args.seed)?;
            lines.push(format!("accuracy={}", m.accuracy));
            if let Some(auc) = m.auc {
                lines.push(format!("auc={auc}"));
            }
        }
    }
    let mut text = lines.join("\n");
    text.push('\n');
    write_text(args.out.as_ref(), &text)
}

pub fn dump_attention(args: &DumpArgs) -> Result<()> {
    let model = checkpoint::load(&args.checkpoint)?;
    let data = load_series(&args.data)?;
    let s = data.get(args.index).ok_or_else(|| {
        CliError::Usage(format!("--index {} is out of range for {} series", args.index, data.len()))
    })?;
    let result = model.encoder_attention(s, &args.times)?;
    let mut buf = Vec::new();
    result.write_table(&mut buf).expect("writing to memory succeeds");
    write_text(args.out.as_ref(), &String::from_utf8(buf).expect("table is UTF-8"))
}
