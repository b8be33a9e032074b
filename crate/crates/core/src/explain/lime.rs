//! LIME over superpixels: random on/off masks, a proximity-weighted ridge
//! surrogate and greedy forward feature selection.

use super::{
    meta_insert, AttributionResult, CoalitionValues, ExplainError, Filler, Method, Perturber,
    Result, ScoreLayout, SuperpixelMap,
};
use crate::gateway::{top_class_of, ModelHandle};
use crate::imaging::{ImageTensor, NormalizationConstants};
use crate::rng::{self, Purpose};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimeConfig {
    pub num_samples: usize,
    pub num_features: usize,
    /// Width of the exponential kernel on cosine distance.
    pub kernel_width: f64,
    pub ridge_lambda: f64,
    pub seed: u64,
    pub filler: Filler,
}

impl Default for LimeConfig {
    fn default() -> Self {
        Self {
            num_samples: 1000,
            num_features: 10,
            kernel_width: 0.25,
            ridge_lambda: 1.0,
            seed: 0,
            filler: Filler::MeanColor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimeFit {
    pub intercept: f64,
    /// One coefficient per feature; unselected features are 0.
    pub coefficients: Vec<f64>,
    /// Selected features by decreasing `|coefficient|`.
    pub selected: Vec<usize>,
    /// Weighted coefficient of determination of the surrogate.
    pub r2: f64,
    pub used_forward_selection: bool,
}

/// Masks: the all-ones mask followed by uniform draws from `{0,1}^S`.
pub(crate) fn sample_masks(features: usize, samples: usize, seed: u64) -> Vec<Vec<bool>> {
    let mut rng = rng::stream(seed, Purpose::Lime, 0);
    let mut masks = Vec::with_capacity(samples);
    masks.push(vec![true; features]);
    for _ in 1..samples {
        masks.push((0..features).map(|_| rng.random::<bool>()).collect());
    }
    masks
}

/// `exp(-d^2 / width^2)` with `d` the cosine distance to the all-ones mask.
pub(crate) fn proximity(mask: &[bool], width: f64) -> f64 {
    let on = mask.iter().filter(|&&b| b).count();
    let d = if on == 0 {
        1.0
    } else {
        1.0 - (on as f64 / mask.len() as f64).sqrt()
    };
    (-(d * d) / (width * width)).exp()
}

struct RidgeFit {
    intercept: f64,
    coefficients: Vec<f64>,
    r2: f64,
}

/// Weighted ridge regression of `y` on the mask columns `features`, with
/// columns standardized by their weighted mean and deviation.
fn weighted_ridge(
    masks: &[Vec<bool>],
    features: &[usize],
    y: &[f64],
    w: &[f64],
    lambda: f64,
) -> RidgeFit {
    let n = masks.len();
    let sw: f64 = w.iter().sum();
    let y_mean = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let mut mu = Vec::with_capacity(features.len());
    let mut sigma = Vec::with_capacity(features.len());
    for &j in features {
        let m = masks
            .iter()
            .zip(w)
            .map(|(x, wi)| if x[j] { *wi } else { 0.0 })
            .sum::<f64>()
            / sw;
        let var = masks
            .iter()
            .zip(w)
            .map(|(x, wi)| wi * (f64::from(u8::from(x[j])) - m).powi(2))
            .sum::<f64>()
            / sw;
        mu.push(m);
        sigma.push(var.sqrt());
    }
    let active: Vec<usize> = (0..features.len()).filter(|&k| sigma[k] > 1e-12).collect();
    let mut coefficients = vec![0.0; features.len()];
    if !active.is_empty() {
        let z = DMatrix::from_fn(n, active.len(), |i, k| {
            let j = active[k];
            (f64::from(u8::from(masks[i][features[j]])) - mu[j]) / sigma[j] * w[i].sqrt()
        });
        let yc = DVector::from_fn(n, |i, _| (y[i] - y_mean) * w[i].sqrt());
        let mut a = z.transpose() * &z;
        for k in 0..active.len() {
            a[(k, k)] += lambda;
        }
        let b = z.transpose() * yc;
        let beta = match a.clone().cholesky() {
            Some(ch) => ch.solve(&b),
            None => a
                .svd(true, true)
                .solve(&b, 1e-12)
                .unwrap_or_else(|_| DVector::zeros(active.len())),
        };
        for (k, &j) in active.iter().enumerate() {
            coefficients[j] = beta[k] / sigma[j];
        }
    }
    let intercept = y_mean
        - coefficients
            .iter()
            .zip(&mu)
            .map(|(c, m)| c * m)
            .sum::<f64>();
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for i in 0..n {
        let pred = intercept
            + features
                .iter()
                .zip(&coefficients)
                .filter(|(&j, _)| masks[i][j])
                .map(|(_, c)| c)
                .sum::<f64>();
        ss_res += w[i] * (y[i] - pred).powi(2);
        ss_tot += w[i] * (y[i] - y_mean).powi(2);
    }
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else {
        1.0
    };
    RidgeFit {
        intercept,
        coefficients,
        r2,
    }
}

/// Fits the surrogate to precomputed masks and values.
pub(crate) fn fit_surrogate(
    masks: &[Vec<bool>],
    y: &[f64],
    config: &LimeConfig,
) -> Result<LimeFit> {
    let features = masks.first().map_or(0, Vec::len);
    if masks.windows(2).all(|p| p[0] == p[1]) {
        return Err(ExplainError::DegenerateDesign(
            "all perturbation masks are identical".into(),
        ));
    }
    let w: Vec<f64> = masks
        .iter()
        .map(|m| proximity(m, config.kernel_width))
        .collect();
    let forward = features > config.num_features;
    let chosen: Vec<usize> = if forward {
        let mut chosen: Vec<usize> = Vec::with_capacity(config.num_features);
        for _ in 0..config.num_features {
            let mut best: Option<(f64, usize)> = None;
            for j in (0..features).filter(|j| !chosen.contains(j)) {
                let mut trial = chosen.clone();
                trial.push(j);
                let r2 = weighted_ridge(masks, &trial, y, &w, config.ridge_lambda).r2;
                if best.is_none_or(|(b, _)| r2 > b) {
                    best = Some((r2, j));
                }
            }
            chosen.push(best.expect("candidates remain").1);
        }
        chosen.sort_unstable();
        chosen
    } else {
        (0..features).collect()
    };
    let fit = weighted_ridge(masks, &chosen, y, &w, config.ridge_lambda);
    let mut coefficients = vec![0.0; features];
    for (&j, &c) in chosen.iter().zip(&fit.coefficients) {
        coefficients[j] = c;
    }
    let mut selected = chosen;
    selected.sort_by(|&a, &b| {
        coefficients[b]
            .abs()
            .total_cmp(&coefficients[a].abs())
            .then(a.cmp(&b))
    });
    Ok(LimeFit {
        intercept: fit.intercept,
        coefficients,
        selected,
        r2: fit.r2,
        used_forward_selection: forward,
    })
}

/// LIME against any value function over masks of `features` superpixels.
/// `value_fn` receives batches of masks and returns one value per mask.
pub fn lime_fit(
    features: usize,
    value_fn: &mut CoalitionValues,
    config: &LimeConfig,
) -> Result<LimeFit> {
    check_config(features, config)?;
    let masks = sample_masks(features, config.num_samples, config.seed);
    let y = value_fn(&masks)?;
    if y.len() != masks.len() {
        return Err(ExplainError::InvalidConfig(format!(
            "{} values for {} masks",
            y.len(),
            masks.len()
        )));
    }
    fit_surrogate(&masks, &y, config)
}

fn check_config(features: usize, config: &LimeConfig) -> Result<()> {
    if features == 0 {
        return Err(ExplainError::InvalidConfig("no features to explain".into()));
    }
    if config.num_samples < features + 2 {
        return Err(ExplainError::InvalidConfig(format!(
            "need at least {} samples for {features} features, got {}",
            features + 2,
            config.num_samples
        )));
    }
    if config.num_features == 0
        || config.kernel_width.is_nan()
        || config.kernel_width <= 0.0
        || config.ridge_lambda.is_nan()
        || config.ridge_lambda < 0.0
    {
        return Err(ExplainError::InvalidConfig(
            "num_features must be >= 1, kernel width > 0 and ridge lambda >= 0".into(),
        ));
    }
    Ok(())
}

/// Explains `target` (the top class when `None`) for a unit-range image.
pub fn lime_explain(
    handle: &ModelHandle,
    unit: &ImageTensor,
    segments: &SuperpixelMap,
    target: Option<usize>,
    config: &LimeConfig,
    norm: &NormalizationConstants,
) -> Result<AttributionResult> {
    let features = segments.num_segments();
    check_config(features, config)?;
    let perturber = Perturber::new(unit, segments, config.filler, norm)?;
    let masks = sample_masks(features, config.num_samples, config.seed);
    let rows = perturber.predict(handle, &masks)?;
    let (top, _) = top_class_of(&rows[0]);
    let target = target.unwrap_or(top);
    if target >= handle.num_classes() {
        return Err(ExplainError::InvalidConfig(format!(
            "target class {target} out of range"
        )));
    }
    let y: Vec<f64> = rows.iter().map(|r| r[target]).collect();
    let fit = fit_surrogate(&masks, &y, config)?;

    let mut metadata = BTreeMap::new();
    meta_insert(&mut metadata, "num_samples", config.num_samples);
    meta_insert(&mut metadata, "num_features", config.num_features);
    meta_insert(&mut metadata, "kernel_width", config.kernel_width);
    meta_insert(&mut metadata, "ridge_lambda", config.ridge_lambda);
    meta_insert(&mut metadata, "seed", config.seed);
    meta_insert(&mut metadata, "filler", config.filler);
    meta_insert(&mut metadata, "segments", features);
    meta_insert(&mut metadata, "selected", &fit.selected);
    meta_insert(&mut metadata, "r2", fit.r2);
    meta_insert(
        &mut metadata,
        "feature_selection",
        if fit.used_forward_selection {
            "forward_selection"
        } else {
            "all"
        },
    );
    meta_insert(&mut metadata, "predicted_probability", y[0]);
    meta_insert(&mut metadata, "top_class", top);
    Ok(AttributionResult {
        method: Method::Lime,
        target_class: target,
        base_value: fit.intercept,
        layout: ScoreLayout::Segments { count: features },
        scores: fit.coefficients,
        metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_oracle(masks: &[Vec<bool>]) -> Result<Vec<f64>> {
        Ok(masks
            .iter()
            .map(|m| 3.0 * f64::from(u8::from(m[2])) - 2.0 * f64::from(u8::from(m[5])) + 0.1)
            .collect())
    }

    #[test]
    fn recovers_a_mask_linear_oracle() {
        let cfg = LimeConfig {
            ridge_lambda: 1e-6,
            ..Default::default()
        };
        let fit = lime_fit(8, &mut linear_oracle, &cfg).unwrap();
        assert!(
            (fit.coefficients[2] - 3.0).abs() / 3.0 < 1e-3,
            "{:?}",
            fit.coefficients
        );
        assert!(
            (fit.coefficients[5] + 2.0).abs() / 2.0 < 1e-3,
            "{:?}",
            fit.coefficients
        );
        for (j, c) in fit.coefficients.iter().enumerate() {
            if j != 2 && j != 5 {
                assert!(c.abs() < 1e-3, "feature {j}: {c}");
            }
        }
        assert!((fit.intercept - 0.1).abs() < 1e-3);
        assert_eq!(&fit.selected[..2], &[2, 5]);
        assert!(!fit.used_forward_selection);
    }

    #[test]
    fn forward_selection_finds_the_active_features() {
        let cfg = LimeConfig {
            ridge_lambda: 1e-6,
            num_features: 2,
            ..Default::default()
        };
        let fit = lime_fit(20, &mut linear_oracle, &cfg).unwrap();
        assert!(fit.used_forward_selection);
        assert_eq!(fit.selected, vec![2, 5]);
        assert_eq!(fit.coefficients.iter().filter(|c| **c != 0.0).count(), 2);
        assert!((fit.coefficients[2] - 3.0).abs() < 3e-3);
    }

    #[test]
    fn constant_model_has_zero_coefficients() {
        let fit = lime_fit(
            12,
            &mut |m: &[Vec<bool>]| Ok(vec![0.25; m.len()]),
            &LimeConfig::default(),
        )
        .unwrap();
        assert!(fit.coefficients.iter().all(|c| c.abs() < 1e-9));
        assert!((fit.intercept - 0.25).abs() < 1e-9);
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let mut f = |m: &[Vec<bool>]| -> Result<Vec<f64>> {
            Ok(m.iter()
                .map(|x| {
                    x.iter()
                        .enumerate()
                        .filter(|(_, b)| **b)
                        .map(|(i, _)| (i as f64).sin())
                        .sum::<f64>()
                        .tanh()
                })
                .collect())
        };
        let cfg = LimeConfig::default();
        let a = lime_fit(15, &mut f, &cfg).unwrap();
        let b = lime_fit(15, &mut f, &cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = lime_fit(15, &mut f, &LimeConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.coefficients, c.coefficients);
    }

    #[test]
    fn masks_and_kernel() {
        let masks = sample_masks(6, 50, 3);
        assert_eq!(masks.len(), 50);
        assert!(masks[0].iter().all(|&b| b));
        assert_eq!(proximity(&[true; 4], 0.25), 1.0);
        let half = proximity(&[true, true, false, false], 0.25);
        let d: f64 = 1.0 - 0.5f64.sqrt();
        assert!((half - (-(d * d) / 0.0625).exp()).abs() < 1e-15);
        assert!((proximity(&[false; 4], 0.25) - (-16.0f64).exp()).abs() < 1e-20);
    }

    #[test]
    fn invalid_configs() {
        let cfg = LimeConfig {
            num_samples: 5,
            ..Default::default()
        };
        assert!(lime_fit(4, &mut linear_oracle, &cfg).is_err());
        assert!(matches!(
            fit_surrogate(
                &[vec![true; 3], vec![true; 3]],
                &[1.0, 1.0],
                &LimeConfig::default()
            ),
            Err(ExplainError::DegenerateDesign(_))
        ));
    }
}
