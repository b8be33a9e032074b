//! Generated corpora and hand-wired models for tests, benches and demos.
//!
//! The blob task puts one bright Gaussian blob in one image quadrant; the
//! quadrant is the class. The right-half scene pairs a smooth-left,
//! textured-right image with a network that only responds to texture.

use crate::imaging::{ImageTensor, RangeTag, CROP_SIZE};
use crate::nnet::{LayerKind, LayerSpec, Network, NnetError, Params, Shape};
use crate::rng::{self, Purpose};
use image::{Rgb, RgbImage};
use rand::Rng;
use std::path::Path;

/// Blob-task class folders, in label order.
pub const BLOB_CLASSES: [&str; 4] = ["bottom_left", "bottom_right", "top_left", "top_right"];

/// Side length of generated blob images; the preprocessing resize is then
/// the identity.
pub const BLOB_IMAGE_SIZE: usize = 256;

/// Quadrant `(row, col)` of a blob class, 0 = top/left.
fn quadrant(class: usize) -> (usize, usize) {
    match BLOB_CLASSES[class] {
        "top_left" => (0, 0),
        "top_right" => (0, 1),
        "bottom_left" => (1, 0),
        _ => (1, 1),
    }
}

/// One blob image. Background is speckle noise; the blob center is jittered
/// inside its quadrant so that it stays clear of the 16 pixel crop margin.
pub fn blob_image(class: usize, index: u64, seed: u64) -> RgbImage {
    let n = BLOB_IMAGE_SIZE;
    let mut rng = rng::stream(
        seed,
        Purpose::Synthetic,
        rng::pair_index(class as u64, index),
    );
    let (qy, qx) = quadrant(class);
    let half = n as f64 / 2.0;
    let cy = qy as f64 * half + half / 2.0 + rng.random_range(-20.0..20.0);
    let cx = qx as f64 * half + half / 2.0 + rng.random_range(-20.0..20.0);
    let sigma: f64 = rng.random_range(14.0..24.0);
    let amp: f64 = rng.random_range(130.0..190.0);
    let tint: [f64; 3] = [
        1.0,
        rng.random_range(0.85..1.0),
        rng.random_range(0.85..1.0),
    ];
    RgbImage::from_fn(n as u32, n as u32, |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        let blob = amp * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        let base = 30.0 + rng.random_range(0.0..40.0);
        Rgb([0, 1, 2].map(|c| (base + blob * tint[c]).round().clamp(0.0, 255.0) as u8))
    })
}

/// Writes `per_class` PNGs for every blob class under `root/<class>/`.
pub fn write_blob_corpus(root: &Path, per_class: usize, seed: u64) -> std::io::Result<()> {
    for (class, name) in BLOB_CLASSES.iter().enumerate() {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir)?;
        for i in 0..per_class {
            blob_image(class, i as u64, seed)
                .save(dir.join(format!("{name}_{i:04}.png")))
                .map_err(std::io::Error::other)?;
        }
    }
    Ok(())
}

/// Unit-range test image: a smooth horizontal ramp on the left half and
/// speckle texture on the right half.
pub fn textured_right_half(size: usize, seed: u64) -> ImageTensor {
    let mut rng = rng::stream(seed, Purpose::Synthetic, u64::MAX);
    let plane = size * size;
    let mut data = vec![0f32; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let v = if x < size / 2 {
                0.35 + 0.2 * x as f64 / size as f64
            } else {
                0.5 + rng.random_range(-0.3..0.3)
            };
            for c in 0..3 {
                data[c * plane + i] = v as f32;
            }
        }
    }
    ImageTensor::new(data, size, size, RangeTag::Unit).expect("sizes agree")
}

/// Class names of the right-half model.
pub fn right_half_classes() -> Vec<String> {
    vec!["flat".into(), "texture".into()]
}

/// Network on normalized 224x224 input: a valid 3x3 Laplacian (+ and -
/// copies, averaged over RGB), ReLU, max pooling, then a dense layer whose
/// "texture" logit is the scaled mean response and whose "flat" logit is a
/// constant. The scale is set so that `reference` (normalized) scores a
/// texture logit of 4 against a flat logit of 2.
pub fn right_half_model(reference: &ImageTensor) -> Result<Network, NnetError> {
    let n = CROP_SIZE;
    let specs = vec![
        LayerSpec::new(
            "conv",
            LayerKind::Conv2d {
                out_channels: 2,
                kernel: 3,
                stride: 1,
                padding: 0,
            },
        ),
        LayerSpec::relu("relu"),
        LayerSpec::max_pool("pool"),
        LayerSpec::flatten("flatten"),
        LayerSpec::dense("logits", 2),
        LayerSpec::softmax("softmax"),
    ];
    let mut net = Network::new(Shape::new(3, n, n), specs, 0)?;
    let lap = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];
    let mut weights = Vec::with_capacity(2 * 27);
    for sign in [1.0, -1.0] {
        for _ in 0..3 {
            weights.extend(lap.iter().map(|v| sign * v / 3.0));
        }
    }
    net.set_params(
        0,
        Params {
            weights,
            bias: vec![0.0; 2],
        },
    )?;

    let features = net.layers()[4].input_shape().len();
    let mut rng = rng::stream(0, Purpose::Dropout, 0);
    let probe = crate::nnet::Batch::from_images(std::slice::from_ref(reference))?;
    let tape = net.forward_range(0, 4, &probe, false, &mut rng)?;
    let mean = tape.output().data().iter().sum::<f64>() / features as f64;
    if mean <= 0.0 {
        return Err(NnetError::InvalidSpec(
            "reference image has no texture".into(),
        ));
    }
    let mut dense = vec![0.0; features];
    dense.extend(std::iter::repeat_n(
        4.0 / (mean * features as f64),
        features,
    ));
    net.set_params(
        4,
        Params {
            weights: dense,
            bias: vec![2.0, 0.0],
        },
    )?;
    net.freeze_all();
    Ok(net)
}
