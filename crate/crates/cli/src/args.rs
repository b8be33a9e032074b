use crate::error::{CliError, CliResult};
use crate::invocation::{ClassChoice, EvalSource, ExplainRequest, Invocation, MethodChoice};
use crate::model::ModelSource;
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use xplain_core::dataset::{Balance, Partition};
use xplain_core::evalbench::{
    AugmentationKind, DatasetConfig, ExperimentConfig, GridKind, OptimizerName,
};
use xplain_core::explain::{Filler, GradCamConfig, LimeConfig, ShapConfig, SlicConfig};
use xplain_core::nnet::HeadVersion;

pub const SEED_ENV: &str = "XPLAIN_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "xplain",
    version,
    about = "Train, evaluate and explain image classifiers"
)]
pub struct Cli {
    /// Log progress at info level (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Count images per class under one or more corpus roots.
    Scan {
        #[arg(required = true)]
        roots: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a seeded 80/10/10 split manifest.
    Split {
        #[arg(required = true)]
        roots: Vec<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = BalanceArg::Truncate)]
        balance: BalanceArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train DeskNet with a chosen head and report test metrics.
    Train {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a model on a split partition.
    Evaluate {
        /// `native:<checkpoint>`, `remote:<url>`, a checkpoint path or a URL.
        #[arg(long)]
        model: Option<String>,
        /// Split manifest from `split` or `train`.
        #[arg(long, conflicts_with = "data")]
        split: Option<PathBuf>,
        /// Corpus roots to split on the fly.
        #[arg(long)]
        data: Vec<PathBuf>,
        #[arg(long)]
        split_seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = BalanceArg::Truncate)]
        balance: BalanceArg,
        #[arg(long, value_enum, default_value_t = PartitionArg::Test)]
        partition: PartitionArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the hyperparameter, head-version or augmentation grid.
    Grid {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, value_enum)]
        grid: GridArg,
        /// Re-run cells even when results exist in the output directory.
        #[arg(long)]
        no_resume: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Explain one image with LIME, Kernel SHAP and/or Grad-CAM.
    Explain {
        image: PathBuf,
        #[arg(long, value_enum, default_value_t = MethodArg::All)]
        method: MethodArg,
        #[command(flatten)]
        opts: ExplainArgs,
    },
    /// All methods on one image plus SHAP for each class by probability and
    /// agreement statistics between the maps.
    CompareXai {
        image: PathBuf,
        /// Number of classes explained with SHAP (default: all).
        #[arg(long)]
        shap_classes: Option<usize>,
        #[command(flatten)]
        opts: ExplainArgs,
    },
    /// Re-run the command recorded in a manifest into a new directory.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BalanceArg {
    Off,
    Truncate,
    Oversample,
}

impl From<BalanceArg> for Balance {
    fn from(b: BalanceArg) -> Self {
        match b {
            BalanceArg::Off => Balance::Off,
            BalanceArg::Truncate => Balance::Truncate,
            BalanceArg::Oversample => Balance::Oversample,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PartitionArg {
    Train,
    Val,
    Test,
}

impl From<PartitionArg> for Partition {
    fn from(p: PartitionArg) -> Self {
        match p {
            PartitionArg::Train => Partition::Train,
            PartitionArg::Val => Partition::Val,
            PartitionArg::Test => Partition::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GridArg {
    Hyper,
    Heads,
    Aug,
}

impl From<GridArg> for GridKind {
    fn from(g: GridArg) -> Self {
        match g {
            GridArg::Hyper => GridKind::Hyper,
            GridArg::Heads => GridKind::Heads,
            GridArg::Aug => GridKind::Aug,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Lime,
    Shap,
    Gradcam,
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AugmentationArg {
    None,
    Aug1,
    Aug2,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FillerArg {
    Mean,
    Gray,
}

/// Experiment settings: a TOML config file plus flag overrides.
#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// TOML experiment config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus roots (replaces the config's dataset.roots).
    #[arg(long)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub head_version: Option<u8>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_enum)]
    pub augmentation: Option<AugmentationArg>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long, value_enum)]
    pub balance: Option<BalanceArg>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    /// `native:<checkpoint>`, `remote:<url>`, a checkpoint path or a URL;
    /// defaults to the model URL environment variable.
    #[arg(long)]
    pub model: Option<String>,
    /// `top` or a class index.
    #[arg(long, default_value = "top")]
    pub class: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// LIME perturbation samples.
    #[arg(long, default_value_t = 1000)]
    pub num_samples: usize,
    /// Superpixels kept by LIME's feature selection.
    #[arg(long, default_value_t = 10)]
    pub num_features: usize,
    #[arg(long, default_value_t = 0.25)]
    pub kernel_width: f64,
    #[arg(long, default_value_t = 1.0)]
    pub ridge_lambda: f64,
    /// Kernel SHAP coalition budget (default 2S + 2048).
    #[arg(long)]
    pub shap_samples: Option<usize>,
    /// Target superpixel count.
    #[arg(long, default_value_t = 50)]
    pub segments: usize,
    #[arg(long, default_value_t = 10.0)]
    pub compactness: f64,
    /// Fill for switched-off superpixels.
    #[arg(long, value_enum, default_value_t = FillerArg::Mean)]
    pub filler: FillerArg,
    /// Grad-CAM feature layer.
    #[arg(long, default_value = "last")]
    pub layer: String,
    #[arg(long)]
    pub out: PathBuf,
}

/// `--seed`, else the seed environment variable, else `fallback`.
pub fn resolve_seed(flag: Option<u64>, fallback: u64) -> CliResult<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map_err(|_| CliError::config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        _ => Ok(fallback),
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn absolute_all(ps: &[PathBuf]) -> Vec<PathBuf> {
    ps.iter().map(|p| absolute(p)).collect()
}

impl ExperimentArgs {
    pub fn resolve(&self) -> CliResult<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => {
                ExperimentConfig::load(path).map_err(|e| CliError::config(e.to_string()))?
            }
            None => {
                if self.data.is_empty() {
                    return Err(CliError::config(
                        "give --config or at least one --data root",
                    ));
                }
                ExperimentConfig::new(Vec::new())
            }
        };
        if !self.data.is_empty() {
            c.dataset.roots = self.data.clone();
        }
        if let Some(v) = self.head_version {
            c.model.head_version =
                HeadVersion::new(v).map_err(|e| CliError::config(e.to_string()))?;
        }
        if let Some(lr) = self.lr {
            c.learning_rate = lr;
        }
        if let Some(o) = self.optimizer {
            c.optimizer = match o {
                OptimizerArg::Sgd => OptimizerName::Sgd,
                OptimizerArg::Adam => OptimizerName::Adam,
            };
        }
        if let Some(e) = self.epochs {
            c.epochs = e;
        }
        if let Some(a) = self.augmentation {
            c.augmentation = match a {
                AugmentationArg::None => AugmentationKind::None,
                AugmentationArg::Aug1 => AugmentationKind::Aug1,
                AugmentationArg::Aug2 => AugmentationKind::Aug2,
            };
        }
        if let Some(b) = self.batch_size {
            c.batch_size = b;
        }
        c.seed = resolve_seed(self.seed, c.seed)?;
        if let Some(s) = self.split_seed {
            c.dataset.split_seed = s;
        }
        if let Some(b) = self.balance {
            c.dataset.balance = b.into();
        }
        c.dataset.roots = absolute_all(&c.dataset.roots);
        c.validate().map_err(|e| CliError::config(e.to_string()))?;
        Ok(c)
    }
}

impl ExplainArgs {
    pub fn request(&self, method: MethodChoice) -> CliResult<ExplainRequest> {
        let seed = resolve_seed(self.seed, 0)?;
        let class = match self.class.as_str() {
            "top" => ClassChoice::Top,
            s => ClassChoice::Index(s.parse().map_err(|_| {
                CliError::config(format!("--class must be `top` or an index, got {s:?}"))
            })?),
        };
        let filler = match self.filler {
            FillerArg::Mean => Filler::MeanColor,
            FillerArg::Gray => Filler::Gray,
        };
        Ok(ExplainRequest {
            method,
            class,
            slic: SlicConfig {
                target_segments: self.segments,
                compactness: self.compactness,
                seed,
                ..SlicConfig::default()
            },
            lime: LimeConfig {
                num_samples: self.num_samples,
                num_features: self.num_features,
                kernel_width: self.kernel_width,
                ridge_lambda: self.ridge_lambda,
                seed,
                filler,
            },
            shap: ShapConfig {
                num_samples: self.shap_samples,
                seed,
                filler,
            },
            gradcam: GradCamConfig {
                layer: self.layer.clone(),
            },
        })
    }
}

impl Command {
    /// The resolved invocation and the output directory, if any.
    pub fn resolve(&self) -> CliResult<(Invocation, Option<PathBuf>)> {
        Ok(match self {
            Command::Scan { roots, out } => (
                Invocation::Scan {
                    roots: absolute_all(roots),
                },
                out.clone(),
            ),
            Command::Split {
                roots,
                seed,
                balance,
                out,
            } => (
                Invocation::Split {
                    roots: absolute_all(roots),
                    seed: resolve_seed(*seed, 0)?,
                    balance: (*balance).into(),
                },
                Some(out.clone()),
            ),
            Command::Train { exp, out } => (
                Invocation::Train {
                    config: exp.resolve()?,
                },
                Some(out.clone()),
            ),
            Command::Evaluate {
                model,
                split,
                data,
                split_seed,
                balance,
                partition,
                out,
            } => {
                let source = match split {
                    Some(p) => EvalSource::SplitFile(absolute(p)),
                    None if data.is_empty() => {
                        return Err(CliError::config("give --split or at least one --data root"))
                    }
                    None => EvalSource::Dataset(DatasetConfig {
                        roots: absolute_all(data),
                        split_seed: resolve_seed(*split_seed, 0)?,
                        balance: (*balance).into(),
                    }),
                };
                (
                    Invocation::Evaluate {
                        model: ModelSource::resolve(model.as_deref())?,
                        source,
                        partition: (*partition).into(),
                    },
                    Some(out.clone()),
                )
            }
            Command::Grid {
                exp,
                grid,
                no_resume,
                out,
            } => (
                Invocation::Grid {
                    config: exp.resolve()?,
                    grid: (*grid).into(),
                    resume: !no_resume,
                },
                Some(out.clone()),
            ),
            Command::Explain {
                image,
                method,
                opts,
            } => {
                let method = match method {
                    MethodArg::Lime => MethodChoice::Lime,
                    MethodArg::Shap => MethodChoice::Shap,
                    MethodArg::Gradcam => MethodChoice::Gradcam,
                    MethodArg::All => MethodChoice::All,
                };
                (
                    Invocation::Explain {
                        image: absolute(image),
                        model: ModelSource::resolve(opts.model.as_deref())?,
                        request: opts.request(method)?,
                    },
                    Some(opts.out.clone()),
                )
            }
            Command::CompareXai {
                image,
                shap_classes,
                opts,
            } => (
                Invocation::CompareXai {
                    image: absolute(image),
                    model: ModelSource::resolve(opts.model.as_deref())?,
                    request: opts.request(MethodChoice::All)?,
                    shap_classes: *shap_classes,
                },
                Some(opts.out.clone()),
            ),
            Command::Replay { .. } => unreachable!("replay is handled before resolution"),
        })
    }
}
