use super::{meta_insert, AttributionResult, ExplainError, Method, Result, ScoreLayout};
use crate::gateway::{top_class_of, ModelHandle};
use crate::imaging::{resize_plane, ImageTensor};
use crate::nnet::{Batch, Network, Seed};
use crate::rng::{self, Purpose};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradCamConfig {
    /// Layer whose output is the feature map; `"last"` picks the last
    /// convolution, or the ReLU right after it.
    pub layer: String,
}

impl Default for GradCamConfig {
    fn default() -> Self {
        Self {
            layer: "last".into(),
        }
    }
}

fn resolve_layer(net: &Network, name: &str) -> Result<usize> {
    if name == "last" {
        net.last_conv_feature_layer()
            .ok_or_else(|| ExplainError::InvalidConfig("network has no convolution layer".into()))
    } else {
        Ok(net.layer_index(name)?)
    }
}

/// Min-max scaling to [0, 1]; a map with no range becomes all zeros.
pub(crate) fn min_max(values: &mut [f64]) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range > 0.0 && range.is_finite() {
        values.iter_mut().for_each(|v| *v = (*v - lo) / range);
    } else {
        values.fill(0.0);
    }
}

/// Grad-CAM for a normalized image on a native network.
///
/// `alpha_k` is the spatial mean of the gradient of the pre-softmax score
/// for `target` (the top class when `None`) with respect to feature map
/// `A_k`. The map `ReLU(sum_k alpha_k A_k)` is min-max scaled and resized
/// bilinearly to the input size.
pub fn grad_cam(
    handle: &ModelHandle,
    image: &ImageTensor,
    target: Option<usize>,
    config: &GradCamConfig,
) -> Result<AttributionResult> {
    let net = handle.gradients()?;
    let idx = resolve_layer(net, &config.layer)?;
    let layer = &net.layers()[idx];
    let fmap = layer.output_shape();
    let name = layer.name().to_string();

    let input = Batch::from_images(std::slice::from_ref(image))?;
    if input.shape() != net.input_shape() {
        return Err(ExplainError::InvalidConfig(format!(
            "image shape {} does not match network input {}",
            input.shape(),
            net.input_shape()
        )));
    }
    let mut rng = rng::stream(net.seed(), Purpose::Dropout, u64::MAX);
    let tape = net.forward(&input, false, &mut rng)?;
    let probs = tape.probabilities().sample(0).to_vec();
    let (top, _) = top_class_of(&probs);
    let target = target.unwrap_or(top);
    let classes = net.output_shape().len();
    if target >= classes {
        return Err(ExplainError::InvalidConfig(format!(
            "target class {target} out of range"
        )));
    }
    let mut onehot = Batch::zeros(net.output_shape(), 1);
    onehot.data_mut()[target] = 1.0;
    let seed = if net.ends_with_softmax() {
        Seed::Logits(onehot)
    } else {
        Seed::Output(onehot)
    };
    let grads = net.backward(&tape, seed, &[name.as_str()])?;
    let d_act = grads.activation(&name)?;
    let acts = tape.activation(&name)?;

    let plane = fmap.height * fmap.width;
    let alphas: Vec<f64> = (0..fmap.channels)
        .map(|k| d_act.data()[k * plane..(k + 1) * plane].iter().sum::<f64>() / plane as f64)
        .collect();
    let mut cam = vec![0.0; plane];
    for (k, a) in alphas.iter().enumerate() {
        for (c, v) in cam.iter_mut().zip(&acts.data()[k * plane..(k + 1) * plane]) {
            *c += a * v;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    min_max(&mut cam);
    let (h, w) = (image.height(), image.width());
    let scores: Vec<f64> = resize_plane(&cam, fmap.height, fmap.width, h, w)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();

    let mut metadata = BTreeMap::new();
    meta_insert(&mut metadata, "layer", &name);
    meta_insert(
        &mut metadata,
        "feature_map_shape",
        [fmap.channels, fmap.height, fmap.width],
    );
    meta_insert(&mut metadata, "alphas", &alphas);
    meta_insert(&mut metadata, "score", tape.logits().sample(0)[target]);
    meta_insert(&mut metadata, "predicted_probability", probs[target]);
    meta_insert(&mut metadata, "top_class", top);
    Ok(AttributionResult {
        method: Method::GradCam,
        target_class: target,
        base_value: 0.0,
        layout: ScoreLayout::Pixels {
            height: h,
            width: w,
        },
        scores,
        metadata,
    })
}
