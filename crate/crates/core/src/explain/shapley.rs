//! Exact Shapley values by enumeration and Kernel SHAP by constrained
//! weighted least squares.

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
use std::collections::{BTreeMap, HashMap};

pub const MAX_EXACT_FEATURES: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapFit {
    pub phi: Vec<f64>,
    /// Value of the empty coalition.
    pub base: f64,
    /// Value of the full coalition.
    pub full: f64,
    /// Coalitions evaluated besides the empty and full ones.
    pub coalitions: usize,
    pub full_enumeration: bool,
}

impl ShapFit {
    /// `sum(phi) + base - full`, zero up to rounding.
    pub fn efficiency_gap(&self) -> f64 {
        self.phi.iter().sum::<f64>() + self.base - self.full
    }
}

fn mask_of(bits: u64, features: usize) -> Vec<bool> {
    (0..features).map(|i| bits >> i & 1 == 1).collect()
}

fn ln_factorial(n: usize) -> f64 {
    (1..=n).map(|k| (k as f64).ln()).sum()
}

/// `phi_i = sum_T |T|! (S-|T|-1)! / S! * (v(T + i) - v(T))` over all
/// coalitions `T` without `i`.
pub fn exact_shapley(features: usize, value_fn: &mut CoalitionValues) -> Result<ShapFit> {
    if features > MAX_EXACT_FEATURES {
        return Err(ExplainError::TooManyFeatures {
            features,
            max: MAX_EXACT_FEATURES,
        });
    }
    if features == 0 {
        return Err(ExplainError::InvalidConfig("no features to explain".into()));
    }
    let count = 1u64 << features;
    let masks: Vec<Vec<bool>> = (0..count).map(|b| mask_of(b, features)).collect();
    let v = value_fn(&masks)?;
    if v.len() != masks.len() {
        return Err(ExplainError::InvalidConfig(format!(
            "{} values for {} masks",
            v.len(),
            masks.len()
        )));
    }
    let ln_s = ln_factorial(features);
    let weight: Vec<f64> = (0..features)
        .map(|t| (ln_factorial(t) + ln_factorial(features - t - 1) - ln_s).exp())
        .collect();
    let mut phi = vec![0.0; features];
    for bits in 0..count {
        let size = bits.count_ones() as usize;
        for (i, p) in phi.iter_mut().enumerate() {
            if bits >> i & 1 == 0 {
                *p += weight[size] * (v[(bits | 1 << i) as usize] - v[bits as usize]);
            }
        }
    }
    Ok(ShapFit {
        phi,
        base: v[0],
        full: v[(count - 1) as usize],
        coalitions: (count - 2) as usize,
        full_enumeration: true,
    })
}

/// Shapley kernel weight of one coalition of size `s` out of `n`:
/// `(n - 1) / (C(n, s) * s * (n - s))`.
pub(crate) fn kernel_weight(n: usize, s: usize) -> f64 {
    let ln_binom = ln_factorial(n) - ln_factorial(s) - ln_factorial(n - s);
    (n as f64 - 1.0) / (ln_binom.exp() * s as f64 * (n - s) as f64)
}

pub(crate) fn default_samples(features: usize) -> usize {
    2 * features + 2048
}

/// Coalitions (excluding empty and full) and their regression weights.
fn coalitions(features: usize, budget: usize, seed: u64) -> (Vec<Vec<bool>>, Vec<f64>, bool) {
    let total = if features < 63 {
        (1u64 << features) - 2
    } else {
        u64::MAX
    };
    if budget as u64 >= total {
        let masks: Vec<Vec<bool>> = (1..=total).map(|b| mask_of(b, features)).collect();
        let weights = masks
            .iter()
            .map(|m| kernel_weight(features, m.iter().filter(|&&b| b).count()))
            .collect();
        return (masks, weights, true);
    }
    // Sizes are drawn with probability proportional to their total kernel
    // mass (n - 1) / (s (n - s)); each draw adds the subset and its complement.
    let sizes: Vec<f64> = (1..features)
        .map(|s| (features as f64 - 1.0) / (s as f64 * (features - s) as f64))
        .collect();
    let mass: f64 = sizes.iter().sum();
    let mut rng = rng::stream(seed, Purpose::Shap, 0);
    let mut index: HashMap<Vec<bool>, usize> = HashMap::new();
    let (mut masks, mut weights) = (Vec::new(), Vec::new());
    let mut order: Vec<usize> = (0..features).collect();
    for _ in 0..budget.div_ceil(2) {
        let mut u = rng.random::<f64>() * mass;
        let mut s = features - 1;
        for (k, m) in sizes.iter().enumerate() {
            if u < *m {
                s = k + 1;
                break;
            }
            u -= m;
        }
        for i in 0..s {
            let j = rng.random_range(i..features);
            order.swap(i, j);
        }
        let mut mask = vec![false; features];
        for &i in &order[..s] {
            mask[i] = true;
        }
        let complement: Vec<bool> = mask.iter().map(|b| !b).collect();
        for m in [mask, complement] {
            match index.get(&m) {
                Some(&k) => weights[k] += 1.0,
                None => {
                    index.insert(m.clone(), masks.len());
                    masks.push(m);
                    weights.push(1.0);
                }
            }
        }
    }
    (masks, weights, false)
}

/// Solves the Shapley-kernel weighted regression with `sum(phi) = full - base`
/// enforced by eliminating the last feature.
fn solve_constrained(
    masks: &[Vec<bool>],
    weights: &[f64],
    values: &[f64],
    base: f64,
    full: f64,
) -> Vec<f64> {
    let n = masks[0].len();
    let delta = full - base;
    if n == 1 {
        return vec![delta];
    }
    let rows = masks.len();
    let last = n - 1;
    let x = DMatrix::from_fn(rows, last, |r, i| {
        let z = |k: usize| f64::from(u8::from(masks[r][k]));
        (z(i) - z(last)) * weights[r].sqrt()
    });
    let y = DVector::from_fn(rows, |r, _| {
        let zl = f64::from(u8::from(masks[r][last]));
        (values[r] - base - zl * delta) * weights[r].sqrt()
    });
    let solved = x
        .svd(true, true)
        .solve(&y, 1e-12)
        .expect("SVD with both factors always solves");
    let mut phi: Vec<f64> = solved.iter().copied().collect();
    phi.push(delta - phi.iter().sum::<f64>());
    phi
}

/// Kernel SHAP against any value function over masks of `features` players.
/// All coalitions are enumerated when `num_samples >= 2^S - 2`.
pub fn kernel_shap_fit(
    features: usize,
    value_fn: &mut CoalitionValues,
    num_samples: Option<usize>,
    seed: u64,
) -> Result<ShapFit> {
    if features == 0 {
        return Err(ExplainError::InvalidConfig("no features to explain".into()));
    }
    let budget = num_samples.unwrap_or_else(|| default_samples(features));
    let (coal, weights, full_enumeration) = coalitions(features, budget, seed);
    let mut masks = Vec::with_capacity(coal.len() + 2);
    masks.push(vec![true; features]);
    masks.push(vec![false; features]);
    masks.extend(coal.iter().cloned());
    let v = value_fn(&masks)?;
    if v.len() != masks.len() {
        return Err(ExplainError::InvalidConfig(format!(
            "{} values for {} masks",
            v.len(),
            masks.len()
        )));
    }
    let (full, base) = (v[0], v[1]);
    let phi = if coal.is_empty() {
        vec![(full - base) / features as f64; features]
    } else {
        solve_constrained(&coal, &weights, &v[2..], base, full)
    };
    Ok(ShapFit {
        phi,
        base,
        full,
        coalitions: coal.len(),
        full_enumeration,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapConfig {
    /// Coalition budget; `2S + 2048` when unset.
    pub num_samples: Option<usize>,
    pub seed: u64,
    /// Background for switched-off superpixels.
    pub filler: Filler,
}

impl Default for ShapConfig {
    fn default() -> Self {
        Self {
            num_samples: None,
            seed: 0,
            filler: Filler::MeanColor,
        }
    }
}

/// Kernel SHAP on superpixels for `target` (the top class when `None`).
pub fn kernel_shap(
    handle: &ModelHandle,
    unit: &ImageTensor,
    segments: &SuperpixelMap,
    target: Option<usize>,
    config: &ShapConfig,
    norm: &NormalizationConstants,
) -> Result<AttributionResult> {
    let features = segments.num_segments();
    if features < 2 {
        return Err(ExplainError::InvalidConfig(
            "Kernel SHAP needs at least 2 superpixels".into(),
        ));
    }
    let perturber = Perturber::new(unit, segments, config.filler, norm)?;
    let mut chosen = target;
    let mut top = 0;
    let mut value_fn = |masks: &[Vec<bool>]| -> Result<Vec<f64>> {
        let rows = perturber.predict(handle, masks)?;
        top = top_class_of(&rows[0]).0;
        let t = *chosen.get_or_insert(top);
        if t >= handle.num_classes() {
            return Err(ExplainError::InvalidConfig(format!(
                "target class {t} out of range"
            )));
        }
        Ok(rows.iter().map(|r| r[t]).collect())
    };
    let fit = kernel_shap_fit(features, &mut value_fn, config.num_samples, config.seed)?;
    let target = chosen.expect("value function ran");

    let mut metadata = BTreeMap::new();
    meta_insert(
        &mut metadata,
        "num_samples",
        config
            .num_samples
            .unwrap_or_else(|| default_samples(features)),
    );
    meta_insert(&mut metadata, "coalitions", fit.coalitions);
    meta_insert(&mut metadata, "full_enumeration", fit.full_enumeration);
    meta_insert(&mut metadata, "seed", config.seed);
    meta_insert(
        &mut metadata,
        "background",
        match config.filler {
            Filler::MeanColor => "segment_mean_color",
            Filler::Gray => "gray",
        },
    );
    meta_insert(&mut metadata, "segments", features);
    meta_insert(&mut metadata, "predicted_probability", fit.full);
    meta_insert(&mut metadata, "efficiency_gap", fit.efficiency_gap());
    meta_insert(&mut metadata, "top_class", top);
    Ok(AttributionResult {
        method: Method::KernelShap,
        target_class: target,
        base_value: fit.base,
        layout: ScoreLayout::Segments { count: features },
        scores: fit.phi,
        metadata,
    })
}
