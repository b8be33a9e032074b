//! Classifier heads and the DeskNet reference network.

use super::{LayerKind, LayerSpec, Network, NnetError, Result, Shape};
use serde::{Deserialize, Serialize};

pub const HIDDEN_WIDTHS: [usize; 4] = [256, 128, 64, 32];
pub const DROPOUT_RATE: f64 = 0.3;

/// Head design 0..=8. Version 0 is a single softmax dense layer; odd versions
/// stack 1..4 hidden dense layers and each even version adds dropout to the
/// odd version before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct HeadVersion(u8);

impl HeadVersion {
    pub const ORIGINAL: HeadVersion = HeadVersion(0);

    pub fn new(version: u8) -> Result<Self> {
        if version > 8 {
            return Err(NnetError::UnknownVersion(version));
        }
        Ok(Self(version))
    }

    pub fn all() -> impl Iterator<Item = HeadVersion> {
        (0..=8).map(HeadVersion)
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn hidden_widths(self) -> &'static [usize] {
        &HIDDEN_WIDTHS[..(self.0 as usize).div_ceil(2)]
    }

    pub fn has_dropout(self) -> bool {
        self.0 > 0 && self.0.is_multiple_of(2)
    }

    pub fn label(self) -> String {
        match self.0 {
            0 => "Original".to_string(),
            v => format!("Version {v}"),
        }
    }
}

impl Default for HeadVersion {
    fn default() -> Self {
        Self::ORIGINAL
    }
}

impl TryFrom<u8> for HeadVersion {
    type Error = NnetError;

    fn try_from(v: u8) -> Result<Self> {
        Self::new(v)
    }
}

impl From<HeadVersion> for u8 {
    fn from(v: HeadVersion) -> u8 {
        v.0
    }
}

impl std::fmt::Display for HeadVersion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

/// Layers appended after the backbone's flatten. Hidden dense layers are each
/// followed by a ReLU.
pub fn build_head(version: HeadVersion, num_classes: usize) -> Result<Vec<LayerSpec>> {
    if num_classes < 2 {
        return Err(NnetError::InvalidSpec(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    let mut specs = Vec::new();
    for (i, &units) in version.hidden_widths().iter().enumerate() {
        specs.push(LayerSpec::dense(format!("dense{}", i + 1), units));
        specs.push(LayerSpec::relu(format!("relu_d{}", i + 1)));
    }
    if version.has_dropout() {
        specs.push(LayerSpec::dropout("dropout", DROPOUT_RATE));
    }
    specs.push(LayerSpec::dense("logits", num_classes));
    specs.push(LayerSpec::softmax("softmax"));
    Ok(specs)
}

/// Conv(8, 3x3) -> ReLU -> MaxPool -> Conv(16, 3x3) -> ReLU -> MaxPool -> Flatten.
pub fn desknet_backbone() -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv_same("conv1", 8, 3),
        LayerSpec::relu("relu1"),
        LayerSpec::max_pool("pool1"),
        LayerSpec::conv_same("conv2", 16, 3),
        LayerSpec::relu("relu2"),
        LayerSpec::max_pool("pool2"),
        LayerSpec::flatten("flatten"),
    ]
}

/// DeskNet with the given head; the backbone is frozen.
pub fn desknet(
    input: Shape,
    version: HeadVersion,
    num_classes: usize,
    seed: u64,
) -> Result<Network> {
    let mut specs = desknet_backbone();
    specs.extend(build_head(version, num_classes)?);
    let mut net = Network::new(input, specs, seed)?;
    net.freeze_through("flatten")?;
    Ok(net)
}

/// Compact description such as `Dense(256),Dropout(0.3),Dense(4),Softmax`,
/// skipping activations.
pub fn describe_head(specs: &[LayerSpec]) -> String {
    specs
        .iter()
        .filter_map(|s| match &s.kind {
            LayerKind::Dense { units } => Some(format!("Dense({units})")),
            LayerKind::Dropout { rate } => Some(format!("Dropout({rate})")),
            LayerKind::Softmax => Some("Softmax".to_string()),
            _ => None,
        })
        .collect::<Vec<_>>()
        .join(",")
}
