use super::{ExplainError, Result, SuperpixelMap};
use crate::gateway::ModelHandle;
use crate::imaging::{normalize, ImageTensor, NormalizationConstants, RangeTag};
use serde::{Deserialize, Serialize};

/// Images per gateway call while evaluating perturbations.
const EVAL_CHUNK: usize = 128;

/// What a switched-off superpixel is replaced with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Filler {
    #[default]
    MeanColor,
    Gray,
}

/// Builds masked copies of one image and scores them through a model.
#[derive(Debug, Clone)]
pub struct Perturber {
    normalized: ImageTensor,
    segments: SuperpixelMap,
    /// Normalized fill value per segment and channel.
    fill: Vec<[f32; 3]>,
}

impl Perturber {
    pub fn new(
        unit: &ImageTensor,
        segments: &SuperpixelMap,
        filler: Filler,
        norm: &NormalizationConstants,
    ) -> Result<Self> {
        if unit.range() != RangeTag::Unit {
            return Err(ExplainError::InvalidConfig(format!(
                "perturbation needs a Unit image, got {:?}",
                unit.range()
            )));
        }
        if (unit.height(), unit.width()) != (segments.height(), segments.width()) {
            return Err(ExplainError::InvalidConfig(
                "superpixel map does not match the image".into(),
            ));
        }
        let colors = match filler {
            Filler::MeanColor => segments.segment_means(unit),
            Filler::Gray => vec![[0.5; 3]; segments.num_segments()],
        };
        let (mean, std) = (norm.mean(), norm.std());
        let fill = colors
            .iter()
            .map(|rgb| [0, 1, 2].map(|c| ((rgb[c] - mean[c]) / std[c]) as f32))
            .collect();
        Ok(Self {
            normalized: normalize(unit, norm)?,
            segments: segments.clone(),
            fill,
        })
    }

    pub fn num_features(&self) -> usize {
        self.segments.num_segments()
    }

    pub fn segments(&self) -> &SuperpixelMap {
        &self.segments
    }

    /// Normalized image with every segment whose mask bit is off filled.
    pub fn compose(&self, mask: &[bool]) -> ImageTensor {
        assert_eq!(
            mask.len(),
            self.num_features(),
            "mask length differs from the segment count"
        );
        let plane = self.segments.height() * self.segments.width();
        let mut data = self.normalized.data().to_vec();
        for (i, &l) in self.segments.labels().iter().enumerate() {
            if !mask[l as usize] {
                let f = self.fill[l as usize];
                for c in 0..3 {
                    data[c * plane + i] = f[c];
                }
            }
        }
        ImageTensor::new(
            data,
            self.segments.height(),
            self.segments.width(),
            RangeTag::Normalized,
        )
        .expect("composition keeps the shape")
    }

    /// Full probability rows for each mask.
    pub fn predict(&self, handle: &ModelHandle, masks: &[Vec<bool>]) -> Result<Vec<Vec<f64>>> {
        let mut rows = Vec::with_capacity(masks.len());
        for chunk in masks.chunks(EVAL_CHUNK) {
            let images: Vec<ImageTensor> = chunk.iter().map(|m| self.compose(m)).collect();
            rows.extend(handle.predict_batch(&images)?);
        }
        Ok(rows)
    }

    /// Target-class probability for each mask.
    pub fn values(
        &self,
        handle: &ModelHandle,
        masks: &[Vec<bool>],
        target: usize,
    ) -> Result<Vec<f64>> {
        if target >= handle.num_classes() {
            return Err(ExplainError::InvalidConfig(format!(
                "target class {target} out of range for {} classes",
                handle.num_classes()
            )));
        }
        Ok(self
            .predict(handle, masks)?
            .into_iter()
            .map(|r| r[target])
            .collect())
    }
}
