//! A small CPU network with explicit activation capture and reverse-mode
//! gradients.
//!
//! Everything runs in `f64`. A forward pass records every layer's output in a
//! [`Tape`]; [`Network::backward`] walks the tape in reverse and returns
//! parameter gradients for trainable layers plus the gradient with respect to
//! any named layer's output, which is what Grad-CAM consumes.

mod checkpoint;
mod head;
mod layers;
mod optim;
mod train;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
};
pub use head::{
    build_head, describe_head, desknet, desknet_backbone, HeadVersion, DROPOUT_RATE, HIDDEN_WIDTHS,
};
pub use optim::{optimizer_step, AdamMoments, Optimizer, OptimizerKind, OptimizerSpec};
pub use train::{
    cross_entropy, cross_entropy_labels, predict_data, train, EpochRecord, FeatureCache,
    InMemoryData, TrainConfig, TrainingData, TrainingHistory,
};

use crate::imaging::ImageTensor;
use crate::rng::{self, Purpose};
use layers::ConvGeom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnetError {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("no layer named {0:?}")]
    UnknownLayerName(String),
    #[error("unknown head version {0} (expected 0..=8)")]
    UnknownVersion(u8),
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("tape does not match this network: {0}")]
    TapeMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnetError>;

/// Per-sample tensor shape, channel-major. Flat vectors use `(n, 1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub const fn flat(n: usize) -> Self {
        Self::new(n, 1, 1)
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2x2,
    Flatten,
    Dense {
        units: usize,
    },
    Dropout {
        rate: f64,
    },
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }

    /// Stride-1 convolution with "same" padding.
    pub fn conv_same(name: impl Into<String>, out_channels: usize, kernel: usize) -> Self {
        Self::new(
            name,
            LayerKind::Conv2d {
                out_channels,
                kernel,
                stride: 1,
                padding: kernel / 2,
            },
        )
    }

    pub fn relu(name: impl Into<String>) -> Self {
        Self::new(name, LayerKind::Relu)
    }

    pub fn max_pool(name: impl Into<String>) -> Self {
        Self::new(name, LayerKind::MaxPool2x2)
    }

    pub fn flatten(name: impl Into<String>) -> Self {
        Self::new(name, LayerKind::Flatten)
    }

    pub fn dense(name: impl Into<String>, units: usize) -> Self {
        Self::new(name, LayerKind::Dense { units })
    }

    pub fn dropout(name: impl Into<String>, rate: f64) -> Self {
        Self::new(name, LayerKind::Dropout { rate })
    }

    pub fn softmax(name: impl Into<String>) -> Self {
        Self::new(name, LayerKind::Softmax)
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        let bad = |msg: String| {
            Err(NnetError::InvalidSpec(format!(
                "layer {:?}: {msg}",
                self.name
            )))
        };
        match self.kind {
            LayerKind::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if out_channels == 0 || kernel == 0 || stride == 0 {
                    return bad("conv channels, kernel and stride must be >= 1".into());
                }
                let (h, w) = (input.height + 2 * padding, input.width + 2 * padding);
                if h < kernel || w < kernel {
                    return bad(format!("kernel {kernel} larger than padded input {input}"));
                }
                Ok(Shape::new(
                    out_channels,
                    (h - kernel) / stride + 1,
                    (w - kernel) / stride + 1,
                ))
            }
            LayerKind::Relu | LayerKind::Softmax => Ok(input),
            LayerKind::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return bad(format!("dropout rate {rate} outside [0, 1)"));
                }
                Ok(input)
            }
            LayerKind::MaxPool2x2 => {
                if input.height < 2 || input.width < 2 {
                    return bad(format!("cannot pool {input}"));
                }
                Ok(Shape::new(
                    input.channels,
                    input.height / 2,
                    input.width / 2,
                ))
            }
            LayerKind::Flatten => Ok(Shape::flat(input.len())),
            LayerKind::Dense { units } => {
                if units == 0 {
                    return bad("dense units must be >= 1".into());
                }
                Ok(Shape::flat(units))
            }
        }
    }
}

/// Weights and biases of one layer. Conv weights are `out x in x k x k`,
/// dense weights `units x inputs`, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Params {
    pub fn zeros_like(other: &Params) -> Self {
        Self {
            weights: vec![0.0; other.weights.len()],
            bias: vec![0.0; other.bias.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    spec: LayerSpec,
    input: Shape,
    output: Shape,
    params: Option<Params>,
    frozen: bool,
}

impl Layer {
    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn output_shape(&self) -> Shape {
        self.output
    }

    pub fn params(&self) -> Option<&Params> {
        self.params.as_ref()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn trainable(&self) -> bool {
        self.params.is_some() && !self.frozen
    }

    fn conv_geom(&self) -> Option<ConvGeom> {
        match self.spec.kind {
            LayerKind::Conv2d {
                kernel,
                stride,
                padding,
                ..
            } => Some(ConvGeom {
                input: self.input,
                output: self.output,
                kernel,
                stride,
                padding,
            }),
            _ => None,
        }
    }
}

/// A batch of same-shaped samples stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    shape: Shape,
    data: Vec<f64>,
}

impl Batch {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || !data.len().is_multiple_of(shape.len()) {
            return Err(NnetError::ShapeMismatch {
                expected: format!("a multiple of {}", shape.len()),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape, samples: usize) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len() * samples],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(NnetError::ShapeMismatch {
                expected: format!("rows of length {width}"),
                actual: "ragged rows".into(),
            });
        }
        Self::new(Shape::flat(width.max(1)), rows.concat())
    }

    /// Stacks image tensors into a `(3, h, w)` batch.
    pub fn from_images(images: &[ImageTensor]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| NnetError::Data("empty image batch".into()))?;
        let (c, h, w) = first.shape();
        let shape = Shape::new(c, h, w);
        let mut data = Vec::with_capacity(shape.len() * images.len());
        for img in images {
            if img.shape() != (c, h, w) {
                return Err(NnetError::ShapeMismatch {
                    expected: shape.to_string(),
                    actual: format!("{:?}", img.shape()),
                });
            }
            data.extend(img.data().iter().map(|&v| v as f64));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn samples(&self) -> usize {
        self.data.len() / self.shape.len()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.shape.len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.shape.len();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.shape.len())
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(|r| r.to_vec()).collect()
    }

    /// Gathers the given samples into a new batch.
    pub fn select(&self, indices: &[usize]) -> Batch {
        let mut data = Vec::with_capacity(indices.len() * self.shape.len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Batch {
            shape: self.shape,
            data,
        }
    }
}

/// Activations recorded by a forward pass starting at layer `start`.
#[derive(Debug, Clone)]
pub struct Tape {
    start: usize,
    /// `activations[0]` is the input to layer `start`; `activations[k + 1]` is
    /// the output of layer `start + k`.
    activations: Vec<Batch>,
    dropout_masks: Vec<Option<Vec<f64>>>,
    names: Vec<String>,
    ends_with_softmax: bool,
}

impl Tape {
    pub fn start(&self) -> usize {
        self.start
    }

    pub fn input(&self) -> &Batch {
        &self.activations[0]
    }

    pub fn output(&self) -> &Batch {
        self.activations
            .last()
            .expect("tape always holds the input")
    }

    /// Final probabilities when the network ends in softmax, else the raw output.
    pub fn probabilities(&self) -> &Batch {
        self.output()
    }

    /// Pre-softmax scores.
    pub fn logits(&self) -> &Batch {
        if self.ends_with_softmax && self.activations.len() >= 2 {
            &self.activations[self.activations.len() - 2]
        } else {
            self.output()
        }
    }

    /// Output of the named layer.
    pub fn activation(&self, name: &str) -> Result<&Batch> {
        let k = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| NnetError::UnknownLayerName(name.to_string()))?;
        Ok(&self.activations[k + 1])
    }
}

/// Where the backward pass is seeded.
#[derive(Debug, Clone)]
pub enum Seed {
    /// Gradient with respect to the network output.
    Output(Batch),
    /// Gradient with respect to the input of the final softmax.
    Logits(Batch),
}

#[derive(Debug, Clone, Default)]
pub struct Gradients {
    /// Indexed by layer; `None` for layers without parameters, frozen layers
    /// and layers before the tape start.
    pub params: Vec<Option<Params>>,
    /// Gradients with respect to the outputs of the requested layers.
    pub activations: BTreeMap<String, Batch>,
}

impl Gradients {
    pub fn activation(&self, name: &str) -> Result<&Batch> {
        self.activations
            .get(name)
            .ok_or_else(|| NnetError::UnknownLayerName(name.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input: Shape,
    layers: Vec<Layer>,
    seed: u64,
}

/// Half-width of the He-uniform initializer: `sqrt(6 / fan_in)`.
pub fn init_limit(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

impl Network {
    /// Builds a network and initializes weights from `seed`: He-uniform
    /// `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases, one stream per layer.
    pub fn new(input: Shape, specs: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut shape = input;
        let mut layers = Vec::with_capacity(specs.len());
        for (idx, spec) in specs.into_iter().enumerate() {
            if !seen.insert(spec.name.clone()) {
                return Err(NnetError::InvalidSpec(format!(
                    "duplicate layer name {:?}",
                    spec.name
                )));
            }
            let output = spec.output_shape(shape)?;
            let params = match spec.kind {
                LayerKind::Conv2d {
                    out_channels,
                    kernel,
                    ..
                } => Some(init_params(
                    out_channels * shape.channels * kernel * kernel,
                    out_channels,
                    shape.channels * kernel * kernel,
                    seed,
                    idx,
                )),
                LayerKind::Dense { units } => Some(init_params(
                    units * shape.len(),
                    units,
                    shape.len(),
                    seed,
                    idx,
                )),
                _ => None,
            };
            layers.push(Layer {
                spec,
                input: shape,
                output,
                params,
                frozen: false,
            });
            shape = output;
        }
        if layers.is_empty() {
            return Err(NnetError::InvalidSpec("network has no layers".into()));
        }
        Ok(Self {
            input,
            layers,
            seed,
        })
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn output_shape(&self) -> Shape {
        self.layers.last().map_or(self.input, |l| l.output)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.spec.name == name)
            .ok_or_else(|| NnetError::UnknownLayerName(name.to_string()))
    }

    pub fn ends_with_softmax(&self) -> bool {
        matches!(
            self.layers.last().map(|l| &l.spec.kind),
            Some(LayerKind::Softmax)
        )
    }

    pub fn params(&self, index: usize) -> Option<&Params> {
        self.layers.get(index).and_then(|l| l.params.as_ref())
    }

    /// Replaces a layer's parameters; lengths must match.
    pub fn set_params(&mut self, index: usize, params: Params) -> Result<()> {
        let layer = self
            .layers
            .get_mut(index)
            .ok_or_else(|| NnetError::InvalidSpec(format!("no layer {index}")))?;
        match &layer.params {
            Some(p)
                if p.weights.len() == params.weights.len() && p.bias.len() == params.bias.len() =>
            {
                layer.params = Some(params);
                Ok(())
            }
            Some(p) => Err(NnetError::ShapeMismatch {
                expected: format!("{} weights + {} biases", p.weights.len(), p.bias.len()),
                actual: format!(
                    "{} weights + {} biases",
                    params.weights.len(),
                    params.bias.len()
                ),
            }),
            None => Err(NnetError::InvalidSpec(format!(
                "layer {:?} has no parameters",
                layer.spec.name
            ))),
        }
    }

    pub(crate) fn params_mut(&mut self, index: usize) -> Option<&mut Params> {
        self.layers.get_mut(index).and_then(|l| l.params.as_mut())
    }

    pub fn set_frozen(&mut self, index: usize, frozen: bool) {
        if let Some(l) = self.layers.get_mut(index) {
            l.frozen = frozen;
        }
    }

    /// Freezes every layer up to and including `name`.
    pub fn freeze_through(&mut self, name: &str) -> Result<()> {
        let idx = self.layer_index(name)?;
        for l in &mut self.layers[..=idx] {
            l.frozen = true;
        }
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for l in &mut self.layers {
            l.frozen = true;
        }
    }

    pub fn frozen_mask(&self) -> Vec<bool> {
        self.layers.iter().map(|l| l.frozen).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.params.as_ref())
            .map(Params::len)
            .sum()
    }

    /// First layer whose output may differ between calls or whose parameters
    /// change during training; everything before it can be cached.
    pub fn frozen_prefix_len(&self) -> usize {
        self.layers
            .iter()
            .position(|l| l.trainable() || matches!(l.spec.kind, LayerKind::Dropout { .. }))
            .unwrap_or(self.layers.len())
    }

    /// Index of the last convolution, or of the ReLU directly after it, whose
    /// output is the feature map Grad-CAM reads.
    pub fn last_conv_feature_layer(&self) -> Option<usize> {
        let conv = self
            .layers
            .iter()
            .rposition(|l| matches!(l.spec.kind, LayerKind::Conv2d { .. }))?;
        match self.layers.get(conv + 1).map(|l| &l.spec.kind) {
            Some(LayerKind::Relu) => Some(conv + 1),
            _ => Some(conv),
        }
    }

    pub fn forward(&self, input: &Batch, train: bool, rng: &mut impl Rng) -> Result<Tape> {
        self.forward_from(0, input, train, rng)
    }

    /// Runs layers `start..` on `input`, which must have the input shape of
    /// layer `start`. Dropout is active only when `train` is set and uses
    /// inverted scaling by `1 / (1 - rate)`.
    pub fn forward_from(
        &self,
        start: usize,
        input: &Batch,
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<Tape> {
        self.forward_range(start, self.layers.len(), input, train, rng)
    }

    /// Runs layers `start..end` only.
    pub fn forward_range(
        &self,
        start: usize,
        end: usize,
        input: &Batch,
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<Tape> {
        if start > end || end > self.layers.len() {
            return Err(NnetError::InvalidSpec(format!(
                "bad layer range {start}..{end}"
            )));
        }
        let expected = if start < self.layers.len() {
            self.layers[start].input
        } else {
            self.output_shape()
        };
        if input.shape.len() != expected.len() {
            return Err(NnetError::ShapeMismatch {
                expected: expected.to_string(),
                actual: input.shape.to_string(),
            });
        }
        let n = input.samples();
        let mut activations = Vec::with_capacity(end - start + 1);
        activations.push(Batch {
            shape: expected,
            data: input.data.clone(),
        });
        let mut masks = Vec::with_capacity(end - start);
        for layer in &self.layers[start..end] {
            let x = activations.last().expect("non-empty");
            let mut out = Batch::zeros(layer.output, n);
            let mut mask = None;
            match &layer.spec.kind {
                LayerKind::Conv2d { .. } => {
                    let g = layer.conv_geom().expect("conv");
                    let p = layer.params.as_ref().expect("conv params");
                    for i in 0..n {
                        layers::conv_forward(
                            &g,
                            &p.weights,
                            &p.bias,
                            x.sample(i),
                            out.sample_mut(i),
                        );
                    }
                }
                LayerKind::Relu => {
                    for (o, v) in out.data.iter_mut().zip(&x.data) {
                        *o = v.max(0.0);
                    }
                }
                LayerKind::MaxPool2x2 => {
                    for i in 0..n {
                        layers::maxpool_forward(
                            layer.input,
                            layer.output,
                            x.sample(i),
                            out.sample_mut(i),
                        );
                    }
                }
                LayerKind::Flatten => out.data.copy_from_slice(&x.data),
                LayerKind::Dense { .. } => {
                    let p = layer.params.as_ref().expect("dense params");
                    for i in 0..n {
                        layers::dense_forward(&p.weights, &p.bias, x.sample(i), out.sample_mut(i));
                    }
                }
                LayerKind::Dropout { rate } => {
                    if train && *rate > 0.0 {
                        let keep = 1.0 / (1.0 - rate);
                        let m: Vec<f64> = (0..x.data.len())
                            .map(|_| {
                                if rng.random::<f64>() >= *rate {
                                    keep
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        for ((o, v), k) in out.data.iter_mut().zip(&x.data).zip(&m) {
                            *o = v * k;
                        }
                        mask = Some(m);
                    } else {
                        out.data.copy_from_slice(&x.data);
                    }
                }
                LayerKind::Softmax => {
                    for i in 0..n {
                        layers::softmax(x.sample(i), out.sample_mut(i));
                    }
                }
            }
            masks.push(mask);
            activations.push(out);
        }
        Ok(Tape {
            start,
            activations,
            dropout_masks: masks,
            names: self.layers[start..end]
                .iter()
                .map(|l| l.spec.name.clone())
                .collect(),
            ends_with_softmax: end == self.layers.len() && self.ends_with_softmax(),
        })
    }

    /// Evaluation-mode forward pass returning only the output rows.
    pub fn predict(&self, input: &Batch) -> Result<Batch> {
        let mut rng = rng::stream(self.seed, Purpose::Dropout, u64::MAX);
        let tape = self.forward(input, false, &mut rng)?;
        Ok(tape.activations.into_iter().last().expect("output"))
    }

    /// Reverse pass over `tape`.
    ///
    /// Parameter gradients are produced for trainable layers covered by the
    /// tape; gradients with respect to the outputs of the layers named in
    /// `capture` are returned as well. Propagation stops at the earliest
    /// layer that still needs a gradient.
    pub fn backward(&self, tape: &Tape, seed: Seed, capture: &[&str]) -> Result<Gradients> {
        let tape_len = tape.activations.len() - 1;
        if tape.start + tape_len > self.layers.len() || tape.names.len() != tape_len {
            return Err(NnetError::TapeMismatch(
                "tape is longer than the network".into(),
            ));
        }
        for (k, name) in tape.names.iter().enumerate() {
            if self.layers[tape.start + k].spec.name != *name {
                return Err(NnetError::TapeMismatch(format!(
                    "layer {} is not {name:?}",
                    tape.start + k
                )));
            }
        }
        let end = tape.start + tape_len;
        let mut captured = Vec::with_capacity(capture.len());
        for name in capture {
            let idx = self.layer_index(name)?;
            if idx < tape.start || idx >= end {
                return Err(NnetError::TapeMismatch(format!(
                    "layer {name:?} is not on the tape"
                )));
            }
            captured.push(idx);
        }

        // Layer index whose output gradient the seed provides.
        let (mut grad, seed_layer) = match seed {
            Seed::Output(g) => (g, end),
            Seed::Logits(g) => {
                if !tape.ends_with_softmax {
                    return Err(NnetError::TapeMismatch(
                        "logit seed needs a tape ending in softmax".into(),
                    ));
                }
                (g, end - 1)
            }
        };
        let expected = &tape.activations[seed_layer - tape.start];
        if grad.data.len() != expected.data.len() {
            return Err(NnetError::ShapeMismatch {
                expected: format!("{} seed values", expected.data.len()),
                actual: grad.data.len().to_string(),
            });
        }
        grad.shape = expected.shape;

        let first_trainable = (tape.start..seed_layer).find(|&i| self.layers[i].trainable());
        let stop = captured
            .iter()
            .copied()
            .chain(first_trainable)
            .min()
            .unwrap_or(seed_layer);

        let mut out = Gradients {
            params: vec![None; self.layers.len()],
            activations: BTreeMap::new(),
        };
        let n = grad.samples();
        for idx in (stop..seed_layer).rev() {
            let layer = &self.layers[idx];
            if captured.contains(&idx) {
                out.activations
                    .insert(layer.spec.name.clone(), grad.clone());
            }
            let x = &tape.activations[idx - tape.start];
            let y = &tape.activations[idx + 1 - tape.start];
            let need_input = idx > stop;
            let mut gp = if layer.trainable() {
                layer.params.as_ref().map(Params::zeros_like)
            } else {
                None
            };
            let mut gin = if need_input {
                Some(Batch::zeros(layer.input, n))
            } else {
                None
            };
            match &layer.spec.kind {
                LayerKind::Conv2d { .. } => {
                    let g = layer.conv_geom().expect("conv");
                    let p = layer.params.as_ref().expect("conv params");
                    for i in 0..n {
                        layers::conv_backward(
                            &g,
                            &p.weights,
                            x.sample(i),
                            grad.sample(i),
                            gp.as_mut()
                                .map(|q| (q.weights.as_mut_slice(), q.bias.as_mut_slice())),
                            gin.as_mut().map(|b| b.sample_mut(i)),
                        );
                    }
                }
                LayerKind::Dense { .. } => {
                    let p = layer.params.as_ref().expect("dense params");
                    for i in 0..n {
                        layers::dense_backward(
                            &p.weights,
                            x.sample(i),
                            grad.sample(i),
                            gp.as_mut()
                                .map(|q| (q.weights.as_mut_slice(), q.bias.as_mut_slice())),
                            gin.as_mut().map(|b| b.sample_mut(i)),
                        );
                    }
                }
                LayerKind::Relu => {
                    if let Some(gi) = gin.as_mut() {
                        for ((d, g), v) in gi.data.iter_mut().zip(&grad.data).zip(&x.data) {
                            *d = if *v > 0.0 { *g } else { 0.0 };
                        }
                    }
                }
                LayerKind::MaxPool2x2 => {
                    if let Some(gi) = gin.as_mut() {
                        for i in 0..n {
                            layers::maxpool_backward(
                                layer.input,
                                layer.output,
                                x.sample(i),
                                grad.sample(i),
                                gi.sample_mut(i),
                            );
                        }
                    }
                }
                LayerKind::Flatten => {
                    if let Some(gi) = gin.as_mut() {
                        gi.data.copy_from_slice(&grad.data);
                    }
                }
                LayerKind::Dropout { .. } => {
                    if let Some(gi) = gin.as_mut() {
                        match &tape.dropout_masks[idx - tape.start] {
                            Some(m) => {
                                for ((d, g), k) in gi.data.iter_mut().zip(&grad.data).zip(m) {
                                    *d = g * k;
                                }
                            }
                            None => gi.data.copy_from_slice(&grad.data),
                        }
                    }
                }
                LayerKind::Softmax => {
                    if let Some(gi) = gin.as_mut() {
                        for i in 0..n {
                            layers::softmax_backward(y.sample(i), grad.sample(i), gi.sample_mut(i));
                        }
                    }
                }
            }
            out.params[idx] = gp;
            match gin {
                Some(g) => grad = g,
                None => break,
            }
        }
        Ok(out)
    }
}

fn init_params(n_weights: usize, n_bias: usize, fan_in: usize, seed: u64, layer: usize) -> Params {
    let limit = init_limit(fan_in);
    let mut rng = rng::stream(seed, Purpose::Init, layer as u64);
    Params {
        weights: (0..n_weights)
            .map(|_| rng.random_range(-limit..limit))
            .collect(),
        bias: vec![0.0; n_bias],
    }
}
