use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mtan::{Arch, EmbedMode, Kernel, ModelConfig, Task};

#[derive(Parser, Debug)]
#[command(name = "mtan", version, about = "Multi-time attention networks for irregularly sampled time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a seeded synthetic dataset.
    Generate(GenerateArgs),
    /// Train a model and keep the best-validation checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Export encoder attention weights for one series.
    DumpAttention(DumpArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Interpolation,
    Classification,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Interpolation => Task::Interpolation,
            TaskArg::Classification => Task::Classification,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    Mtan,
    Rbf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EmbedArg {
    Learned,
    Positional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ArchArg {
    Full,
    Enc,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long, value_enum, default_value = "interpolation")]
    pub task: TaskArg,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Trajectories (interpolation) or cases (classification).
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub grid: usize,
    #[arg(long, default_value_t = 10)]
    pub generator_ref_points: usize,
    /// Sharpness of the generator's RBF smoother.
    #[arg(long, default_value_t = 100.0)]
    pub alpha: f64,
    /// Grid points kept per trajectory.
    #[arg(long, default_value_t = 20)]
    pub observed: usize,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 128)]
    pub ref_points: usize,
    #[arg(long, default_value_t = 32)]
    pub latent: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    #[arg(long, default_value_t = 128)]
    pub embed_dim: usize,
    /// Defaults to embed-dim / heads.
    #[arg(long)]
    pub dk: Option<usize>,
    /// Attention output width.
    #[arg(long, default_value_t = 32)]
    pub mtan_out: usize,
    #[arg(long, default_value_t = 32)]
    pub enc_hidden: usize,
    #[arg(long, default_value_t = 50)]
    pub dec_hidden: usize,
    #[arg(long, default_value_t = 50)]
    pub head_hidden: usize,
    #[arg(long, default_value_t = 32)]
    pub clf_hidden: usize,
    #[arg(long, default_value_t = 300)]
    pub clf_mlp: usize,
    #[arg(long, value_enum, default_value = "mtan")]
    pub kernel: KernelArg,
    /// Sharpness of the fixed RBF kernel.
    #[arg(long, default_value_t = 100.0)]
    pub rbf_alpha: f64,
    #[arg(long, value_enum, default_value = "learned")]
    pub time_embed: EmbedArg,
    /// Multiplier on the initial learned time-embedding frequencies.
    #[arg(long, default_value_t = 1.0)]
    pub omega_scale: f64,
    #[arg(long, value_enum, default_value = "on")]
    pub bidirectional: Switch,
    #[arg(long, value_enum, default_value = "full")]
    pub arch: ArchArg,
    /// Output variance of the decoder.
    #[arg(long, default_value_t = 0.01)]
    pub obs_var: f64,
}

impl ModelArgs {
    pub fn to_config(&self, dims: usize, classes: Option<usize>) -> ModelConfig {
        let heads = if self.kernel == KernelArg::Rbf { 1 } else { self.heads };
        ModelConfig {
            dims,
            ref_points: self.ref_points,
            latent: self.latent,
            mtan_out: self.mtan_out,
            heads,
            embed_dim: self.embed_dim,
            dk: self.dk.unwrap_or((self.embed_dim / heads.max(1)).max(1)),
            enc_hidden: self.enc_hidden,
            dec_hidden: self.dec_hidden,
            head_hidden: self.head_hidden,
            clf_hidden: self.clf_hidden,
            clf_mlp: self.clf_mlp,
            classes,
            obs_var: self.obs_var,
            kernel: match self.kernel {
                KernelArg::Mtan => Kernel::Mtan,
                KernelArg::Rbf => Kernel::Rbf { alpha: self.rbf_alpha },
            },
            embed_mode: match self.time_embed {
                EmbedArg::Learned => EmbedMode::Learned,
                EmbedArg::Positional => EmbedMode::Positional,
            },
            omega_scale: self.omega_scale,
            bidirectional: self.bidirectional == Switch::On,
            arch: match self.arch {
                ArchArg::Full => Arch::Full,
                ArchArg::Enc => Arch::Enc,
            },
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "interpolation")]
    pub task: TaskArg,
    /// Training series (JSON lines).
    #[arg(long)]
    pub data: PathBuf,
    /// Dense targets index-aligned with --data (interpolation).
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    /// Output directory for the checkpoint, metrics log and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to 500 (interpolation) or 300 (classification).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Defaults to 1e-3 (interpolation) or 1e-4 (classification).
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 50)]
    pub batch: usize,
    #[arg(long, default_value_t = 1.0)]
    pub p_observed: f64,
    #[arg(long, default_value_t = 100.0)]
    pub lambda: f64,
    /// Defaults to 5 (interpolation) or 1 (classification).
    #[arg(long)]
    pub elbo_samples: Option<usize>,
    /// Share of the data held out for validation.
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    /// Number of classes; inferred from the labels when omitted.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long, value_enum, default_value = "on")]
    pub kl_annealing: Switch,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, value_enum, default_value = "interpolation")]
    pub task: TaskArg,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub p_observed: f64,
    /// Posterior samples per prediction (classification).
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Metrics file; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Zero-based index of the series in --data.
    #[arg(long)]
    pub index: usize,
    /// Comma-separated query times.
    #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
    pub times: Vec<f64>,
    /// Attention table; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
