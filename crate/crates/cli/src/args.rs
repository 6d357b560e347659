use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use multigrain::eval::Stratum;
use multigrain::model::TrainConfig;
use multigrain::uncertainty::{AugmentTarget, GammaSchedule};

#[derive(Parser, Debug)]
#[command(
    name = "multigrain",
    version,
    about = "Uncertainty-regularized composed retrieval on synthetic multi-grained data",
    after_help = "Exit codes: 0 success, 1 error, 2 usage error, 3 numeric failure during training."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    Generate {
        /// JSON dataset spec; omitted fields take their defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Overrides the dataset spec's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write checkpoint, trace, reports and manifest.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// One training run per value along an ablation axis.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Comma-separated values; `inf` is accepted for gamma0.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset's held-out queries.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        stratum: StratumArg,
        /// Cutoffs for Recall@K.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 10, 50])]
        ks: Vec<usize>,
        /// Also write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rerun the command recorded in a manifest into a new directory.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Training options. Precedence: flag > --config file > built-in default.
#[derive(Args, Debug, Clone, Default)]
#[command(next_help_heading = "Training (flag > --config file > default)")]
pub struct TrainArgs {
    /// JSON training config; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Annealing strength of the balance weight; `inf` trains the baseline.
    #[arg(long, value_parser = parse_gamma0, conflicts_with = "gamma_fixed")]
    pub gamma0: Option<f64>,
    /// Constant balance weight in [0, 1] instead of annealing.
    #[arg(long)]
    pub gamma_fixed: Option<f64>,
    #[arg(long)]
    pub w1: Option<f64>,
    #[arg(long)]
    pub w2: Option<f64>,
    /// Which feature the augmenter jitters.
    #[arg(long, value_enum)]
    pub augment: Option<AugmentArg>,
    /// Detach the batch statistics from the gradient.
    #[arg(long)]
    pub stop_grad_sigma: bool,
    /// Dropout rate on the text features.
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
}

impl TrainArgs {
    /// Applies flags on top of `cfg`.
    pub fn apply(&self, cfg: &mut TrainConfig) -> multigrain::Result<()> {
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.momentum {
            cfg.momentum = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(g) = self.gamma0 {
            cfg.schedule = if g.is_infinite() {
                GammaSchedule::baseline()
            } else {
                GammaSchedule::exponential(g)?
            };
        }
        if let Some(v) = self.gamma_fixed {
            cfg.schedule = GammaSchedule::fixed(v)?;
        }
        if let Some(v) = self.w1 {
            cfg.noise.w1 = v;
        }
        if let Some(v) = self.w2 {
            cfg.noise.w2 = v;
        }
        if let Some(a) = self.augment {
            cfg.noise.target = a.into();
        }
        if self.stop_grad_sigma {
            cfg.stop_grad_sigma = true;
        }
        if let Some(v) = self.dropout {
            cfg.dropout_rate = Some(v);
        }
        if let Some(v) = self.temperature {
            cfg.temperature = v;
        }
        Ok(())
    }
}

pub fn parse_gamma0(s: &str) -> Result<f64, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "inf" | "+inf" | "infinity" | "+infinity" => Ok(f64::INFINITY),
        t => t
            .parse::<f64>()
            .map_err(|_| format!("expected a number or `inf`, got `{s}`")),
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    W1,
    W2,
    Gamma0,
    #[value(name = "gamma_fixed")]
    GammaFixed,
    Dropout,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::W1 => "w1",
            SweepAxis::W2 => "w2",
            SweepAxis::Gamma0 => "gamma0",
            SweepAxis::GammaFixed => "gamma_fixed",
            SweepAxis::Dropout => "dropout",
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum StratumArg {
    All,
    Coarse,
    Fine,
}

impl From<StratumArg> for Stratum {
    fn from(s: StratumArg) -> Self {
        match s {
            StratumArg::All => Stratum::All,
            StratumArg::Coarse => Stratum::CoarseOnly,
            StratumArg::Fine => Stratum::FineOnly,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum AugmentArg {
    Target,
    Source,
}

impl From<AugmentArg> for AugmentTarget {
    fn from(a: AugmentArg) -> Self {
        match a {
            AugmentArg::Target => AugmentTarget::TargetFeature,
            AugmentArg::Source => AugmentTarget::SourceImageFeature,
        }
    }
}
