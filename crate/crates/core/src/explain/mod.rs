//! Attribution methods and their renderings.
//!
//! LIME and Kernel SHAP treat superpixels as features and only query the
//! model through a [`ModelHandle`], so they work with any backend. Grad-CAM
//! needs activations and gradients and therefore a native network.

mod gradcam;
mod lime;
mod perturb;
mod render;
mod shapley;
mod slic;

pub use gradcam::{grad_cam, GradCamConfig};
pub use lime::{lime_explain, lime_fit, LimeConfig, LimeFit};
pub use perturb::{Filler, Perturber};
pub use render::{comparison_sheet, jet, render, RenderStyle};
pub use shapley::{
    exact_shapley, kernel_shap, kernel_shap_fit, ShapConfig, ShapFit, MAX_EXACT_FEATURES,
};
pub use slic::{segment_superpixels, SlicConfig, SuperpixelMap};

use crate::gateway::GatewayError;
use crate::imaging::ImagingError;
use crate::nnet::NnetError;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("degenerate design: {0}")]
    DegenerateDesign(String),
    #[error("{features} features exceed the exact enumeration limit of {max}")]
    TooManyFeatures { features: usize, max: usize },
    #[error("style {style:?} cannot render a {method:?} result")]
    StyleMismatch { style: RenderStyle, method: Method },
    #[error("backend does not expose gradients")]
    GradientsUnavailable,
    #[error("no layer named {0:?}")]
    UnknownLayerName(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Gateway(GatewayError),
    #[error(transparent)]
    Nnet(NnetError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<GatewayError> for ExplainError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::GradientsUnavailable => ExplainError::GradientsUnavailable,
            GatewayError::Nnet(n) => n.into(),
            other => ExplainError::Gateway(other),
        }
    }
}

impl From<NnetError> for ExplainError {
    fn from(e: NnetError) -> Self {
        match e {
            NnetError::UnknownLayerName(n) => ExplainError::UnknownLayerName(n),
            other => ExplainError::Nnet(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, ExplainError>;

/// Model output for a batch of superpixel masks (`true` keeps a segment).
pub type CoalitionValues<'a> = dyn FnMut(&[Vec<bool>]) -> Result<Vec<f64>> + 'a;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lime,
    KernelShap,
    GradCam,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Lime => "lime",
            Method::KernelShap => "kernel_shap",
            Method::GradCam => "grad_cam",
        }
    }
}

/// Scores live either on superpixels or on pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoreLayout {
    Segments { count: usize },
    Pixels { height: usize, width: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub method: Method,
    pub target_class: usize,
    /// LIME: surrogate intercept. SHAP: value of the background. Grad-CAM: 0.
    pub base_value: f64,
    pub layout: ScoreLayout,
    pub scores: Vec<f64>,
    /// Sample counts, seeds, kernel width and similar run parameters.
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl AttributionResult {
    /// One score per pixel: each pixel takes its segment's score for
    /// superpixel methods.
    pub fn pixel_scores(&self, segments: Option<&SuperpixelMap>) -> Result<Vec<f64>> {
        match self.layout {
            ScoreLayout::Pixels { .. } => Ok(self.scores.clone()),
            ScoreLayout::Segments { count } => {
                let sp = segments.ok_or_else(|| {
                    ExplainError::InvalidConfig("segment scores need the superpixel map".into())
                })?;
                if sp.num_segments() != count {
                    return Err(ExplainError::InvalidConfig(format!(
                        "{count} scores for {} segments",
                        sp.num_segments()
                    )));
                }
                Ok(sp
                    .labels()
                    .iter()
                    .map(|&l| self.scores[l as usize])
                    .collect())
            }
        }
    }

    pub fn meta(&self, key: &str) -> Option<&serde_json::Value> {
        self.metadata.get(key)
    }
}

/// Share of positive pixel attribution lying in columns `>= width / 2`.
/// Returns 0 when there is no positive mass.
pub fn right_half_positive_fraction(pixels: &[f64], height: usize, width: usize) -> f64 {
    assert_eq!(
        pixels.len(),
        height * width,
        "pixel scores do not match the shape"
    );
    let (mut right, mut total) = (0.0, 0.0);
    for (i, &v) in pixels.iter().enumerate() {
        if v > 0.0 {
            total += v;
            if i % width >= width / 2 {
                right += v;
            }
        }
    }
    if total > 0.0 {
        right / total
    } else {
        0.0
    }
}

fn meta_insert(meta: &mut BTreeMap<String, serde_json::Value>, key: &str, value: impl Serialize) {
    meta.insert(
        key.to_string(),
        serde_json::to_value(value).expect("metadata values are plain data"),
    );
}
