//! Fully resolved commands. Flag parsing produces one of these; replay reads
//! one back from a manifest.

use crate::model::ModelSource;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use xplain_core::dataset::{Balance, Partition};
use xplain_core::evalbench::{DatasetConfig, ExperimentConfig, GridKind};
use xplain_core::explain::{GradCamConfig, LimeConfig, ShapConfig, SlicConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodChoice {
    Lime,
    Shap,
    Gradcam,
    All,
}

impl MethodChoice {
    pub fn lime(self) -> bool {
        matches!(self, Self::Lime | Self::All)
    }

    pub fn shap(self) -> bool {
        matches!(self, Self::Shap | Self::All)
    }

    pub fn gradcam(self) -> bool {
        matches!(self, Self::Gradcam | Self::All)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassChoice {
    Top,
    Index(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainRequest {
    pub method: MethodChoice,
    pub class: ClassChoice,
    pub slic: SlicConfig,
    pub lime: LimeConfig,
    pub shap: ShapConfig,
    pub gradcam: GradCamConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSource {
    /// A split manifest written by `split` or `train`.
    SplitFile(PathBuf),
    Dataset(DatasetConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Invocation {
    Scan {
        roots: Vec<PathBuf>,
    },
    Split {
        roots: Vec<PathBuf>,
        seed: u64,
        balance: Balance,
    },
    Train {
        config: ExperimentConfig,
    },
    Evaluate {
        model: ModelSource,
        source: EvalSource,
        partition: Partition,
    },
    Grid {
        config: ExperimentConfig,
        grid: GridKind,
        resume: bool,
    },
    Explain {
        image: PathBuf,
        model: ModelSource,
        request: ExplainRequest,
    },
    CompareXai {
        image: PathBuf,
        model: ModelSource,
        request: ExplainRequest,
        /// Classes explained with SHAP, highest probability first; `None`
        /// means all.
        shap_classes: Option<usize>,
    },
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::Scan { .. } => "scan",
            Invocation::Split { .. } => "split",
            Invocation::Train { .. } => "train",
            Invocation::Evaluate { .. } => "evaluate",
            Invocation::Grid { .. } => "grid",
            Invocation::Explain { .. } => "explain",
            Invocation::CompareXai { .. } => "compare-xai",
        }
    }
}
