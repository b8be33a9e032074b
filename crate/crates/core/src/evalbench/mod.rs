//! Classification metrics, experiment configs, single runs and the
//! hyperparameter, head-version and augmentation grids.

mod data;
mod grid;
mod metrics;

pub use data::{FileData, ImageStore};
pub use grid::{
    best_row, grid_cells, run_grid, write_reports, CellStatus, GridKind, GridOptions, GridReport,
    GridRow, GRID_EPOCHS, GRID_LEARNING_RATES, GRID_OPTIMIZERS,
};
pub use metrics::{compute_metrics, ClassMetrics, ConfusionMatrix, MetricsReport};

use crate::dataset::{self, Balance, CorpusItem, DatasetError, Partition, SplitManifest};
use crate::gateway::{GatewayError, ModelHandle};
use crate::imaging::{self, AugmentationSpec, ImageTensor, ImagingError, CROP_SIZE};
use crate::nnet::{
    self, FeatureCache, HeadVersion, Network, NnetError, OptimizerKind, OptimizerSpec, Shape,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Nnet(#[from] NnetError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationKind {
    #[default]
    None,
    Aug1,
    Aug2,
}

impl AugmentationKind {
    pub const ALL: [AugmentationKind; 3] = [
        AugmentationKind::None,
        AugmentationKind::Aug1,
        AugmentationKind::Aug2,
    ];

    pub fn spec(self, seed: u64) -> Option<AugmentationSpec> {
        match self {
            AugmentationKind::None => None,
            AugmentationKind::Aug1 => Some(AugmentationSpec::aug1(seed)),
            AugmentationKind::Aug2 => Some(AugmentationSpec::aug2(seed)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AugmentationKind::None => "none",
            AugmentationKind::Aug1 => "aug1",
            AugmentationKind::Aug2 => "aug2",
        }
    }
}

impl std::str::FromStr for AugmentationKind {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                EvalError::Config(format!("unknown augmentation {s:?} (none, aug1, aug2)"))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerName {
    #[default]
    Sgd,
    Adam,
}

impl OptimizerName {
    pub fn kind(self) -> OptimizerKind {
        match self {
            OptimizerName::Sgd => OptimizerKind::Sgd,
            OptimizerName::Adam => OptimizerKind::ADAM,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OptimizerName::Sgd => "sgd",
            OptimizerName::Adam => "adam",
        }
    }
}

impl std::str::FromStr for OptimizerName {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerName::Sgd),
            "adam" => Ok(OptimizerName::Adam),
            other => Err(EvalError::Config(format!(
                "unknown optimizer {other:?} (sgd, adam)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum ModelBackend {
    /// DeskNet built and trained in process.
    #[default]
    Native,
    /// A served model; evaluation only.
    Remote { url: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(flatten)]
    pub backend: ModelBackend,
    #[serde(default)]
    pub head_version: HeadVersion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Class-folder roots; several roots are pooled before splitting.
    pub roots: Vec<PathBuf>,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default)]
    pub balance: Balance,
}

/// Everything one training run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub augmentation: AugmentationKind,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerName,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetConfig,
}

fn default_batch_size() -> usize {
    nnet::TrainConfig::DEFAULT_BATCH_SIZE
}

impl ExperimentConfig {
    pub fn new(roots: Vec<PathBuf>) -> Self {
        Self {
            model: ModelSpec::default(),
            augmentation: AugmentationKind::None,
            learning_rate: 0.001,
            optimizer: OptimizerName::Sgd,
            epochs: 10,
            batch_size: default_batch_size(),
            seed: 0,
            dataset: DatasetConfig {
                roots,
                split_seed: 0,
                balance: Balance::default(),
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| EvalError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EvalError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            EvalError::Config(m) => EvalError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(EvalError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(EvalError::Config("batch_size must be at least 1".into()));
        }
        self.optimizer_spec()?;
        if self.dataset.roots.is_empty() {
            return Err(EvalError::Config("dataset.roots is empty".into()));
        }
        if let ModelBackend::Remote { url } = &self.model.backend {
            if !(url.starts_with("http://") || url.starts_with("https://")) {
                return Err(EvalError::Config(format!(
                    "remote url must be http(s), got {url:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn optimizer_spec(&self) -> Result<OptimizerSpec> {
        OptimizerSpec::new(self.optimizer.kind(), self.learning_rate)
            .map_err(|e| EvalError::Config(e.to_string()))
    }

    pub fn train_config(&self) -> Result<nnet::TrainConfig> {
        Ok(nnet::TrainConfig {
            batch_size: self.batch_size,
            ..nnet::TrainConfig::new(self.epochs, self.optimizer_spec()?, self.seed)
        })
    }

    /// Short identifier, e.g. `lr0.005-adam-e20-v2-aug1`.
    pub fn cell_id(&self) -> String {
        format!(
            "lr{}-{}-e{}-v{}-{}",
            self.learning_rate,
            self.optimizer.name(),
            self.epochs,
            self.model.head_version.get(),
            self.augmentation.name()
        )
    }
}

/// Input shape of every network run through the harness.
pub fn input_shape() -> Shape {
    Shape::new(imaging::CHANNELS, CROP_SIZE, CROP_SIZE)
}

/// Scans the configured roots and splits them.
pub fn resolve_split(config: &DatasetConfig) -> Result<SplitManifest> {
    for root in &config.roots {
        if !root.is_dir() {
            return Err(DatasetError::MissingRoot(root.clone()).into());
        }
    }
    let corpus = dataset::scan_corpora(&config.roots)?;
    let plan = dataset::make_split(&corpus, config.split_seed, config.balance)?;
    Ok(SplitManifest::new(&corpus, &plan))
}

/// Confusion matrix and metrics for one partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsReport,
}

impl Evaluation {
    pub fn from_predictions(
        classes: Vec<String>,
        rows: &[Vec<f64>],
        labels: &[usize],
    ) -> Result<Self> {
        let confusion = ConfusionMatrix::from_predictions(classes, rows, labels)?;
        let metrics = compute_metrics(&confusion)?;
        Ok(Self { confusion, metrics })
    }
}

/// Images per gateway call in [`evaluate`].
const EVAL_BATCH: usize = 32;

/// Preprocesses each item once, predicts through `handle` and tallies the
/// top classes.
pub fn evaluate(handle: &ModelHandle, items: &[CorpusItem]) -> Result<Evaluation> {
    if items.is_empty() {
        return Err(EvalError::Data("evaluation partition is empty".into()));
    }
    let mut rows = Vec::with_capacity(items.len());
    for chunk in items.chunks(EVAL_BATCH) {
        let images: Vec<ImageTensor> = chunk
            .iter()
            .map(|i| {
                dataset::load_preprocessed(&i.path)
                    .map_err(|e| EvalError::Data(format!("{}: {e}", i.path.display())))
            })
            .collect::<Result<_>>()?;
        rows.extend(handle.predict_batch(&images)?);
    }
    let labels: Vec<usize> = items.iter().map(|i| i.label).collect();
    Evaluation::from_predictions(handle.class_names().to_vec(), &rows, &labels)
}

/// Shared state between the runs of one process.
#[derive(Debug, Default)]
pub struct RunContext {
    pub images: ImageStore,
    pub features: FeatureCache,
}

impl RunContext {
    pub fn new() -> Self {
        Self::default()
    }
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub network: Network,
    pub class_names: Vec<String>,
    pub history: nnet::TrainingHistory,
    pub test: Evaluation,
    pub split: SplitManifest,
}

/// Builds DeskNet with the configured head, trains it on the train split
/// (validation split for checkpoint selection) and evaluates on the test
/// split.
pub fn run_experiment(
    config: &ExperimentConfig,
    ctx: &mut RunContext,
) -> Result<ExperimentOutcome> {
    config.validate()?;
    if let ModelBackend::Remote { url } = &config.model.backend {
        return Err(EvalError::Config(format!(
            "remote model {url} cannot be trained in process; train it on the server and use evaluate"
        )));
    }
    let split = resolve_split(&config.dataset)?;
    let classes = split.classes.clone();
    let train_set = FileData::new(
        &mut ctx.images,
        &split.items(Partition::Train),
        config.augmentation,
        config.seed,
    )?;
    let val_set = FileData::new(
        &mut ctx.images,
        &split.items(Partition::Val),
        AugmentationKind::None,
        config.seed,
    )?;
    let test_set = FileData::new(
        &mut ctx.images,
        &split.items(Partition::Test),
        AugmentationKind::None,
        config.seed,
    )?;
    if nnet::TrainingData::is_empty(&test_set) {
        return Err(EvalError::Data("test split is empty".into()));
    }

    let mut net = nnet::desknet(
        input_shape(),
        config.model.head_version,
        classes.len(),
        config.seed,
    )?;
    let history = nnet::train(
        &mut net,
        &train_set,
        &val_set,
        &config.train_config()?,
        Some(&mut ctx.features),
    )?;
    let rows = nnet::predict_data(&net, &test_set, Some(&mut ctx.features))?;
    let test = Evaluation::from_predictions(classes.clone(), &rows, test_set.labels())?;
    Ok(ExperimentOutcome {
        network: net,
        class_names: classes,
        history,
        test,
        split,
    })
}
