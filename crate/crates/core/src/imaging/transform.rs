use super::{ImageTensor, ImagingError, RangeTag, Result, CHANNELS};
use serde::{Deserialize, Serialize};

/// Side length images are resized to before cropping.
pub const RESIZE_SIZE: usize = 256;
/// Side length of the network input after center cropping.
pub const CROP_SIZE: usize = 224;

/// Per-channel mean and standard deviation on the unit scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationConstants {
    mean: [f64; 3],
    std: [f64; 3],
}

impl NormalizationConstants {
    /// ImageNet statistics.
    pub const IMAGENET: Self = Self {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };

    pub fn new(mean: [f64; 3], std: [f64; 3]) -> Result<Self> {
        if std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || mean.iter().any(|m| !m.is_finite()) {
            return Err(ImagingError::InvalidSpec(format!(
                "normalization needs finite means and positive stds, got mean={mean:?} std={std:?}"
            )));
        }
        Ok(Self { mean, std })
    }

    pub fn mean(&self) -> [f64; 3] {
        self.mean
    }

    pub fn std(&self) -> [f64; 3] {
        self.std
    }
}

impl Default for NormalizationConstants {
    fn default() -> Self {
        Self::IMAGENET
    }
}

/// Source sample positions and weights for one axis under half-pixel-center
/// alignment: output index `d` maps to `(d + 0.5) * in / out - 0.5`, clamped to
/// the valid range.
fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize with half-pixel-center alignment and edge clamping.
///
/// A same-size resize returns the input unchanged. Every output value is a
/// convex combination of input values, so the range tag is preserved.
pub fn resize_bilinear(img: &ImageTensor, height: usize, width: usize) -> Result<ImageTensor> {
    if height == 0 || width == 0 {
        return Err(ImagingError::InvalidDimensions { height, width });
    }
    if height == img.height && width == img.width {
        return Ok(img.clone());
    }
    let ys = axis_taps(img.height, height);
    let xs = axis_taps(img.width, width);
    let mut out = Vec::with_capacity(CHANNELS * height * width);
    for c in 0..CHANNELS {
        let plane = img.channel(c);
        for &(y0, y1, ty) in &ys {
            let r0 = &plane[y0 * img.width..(y0 + 1) * img.width];
            let r1 = &plane[y1 * img.width..(y1 + 1) * img.width];
            for &(x0, x1, tx) in &xs {
                let top = r0[x0] as f64 * (1.0 - tx) + r0[x1] as f64 * tx;
                let bottom = r1[x0] as f64 * (1.0 - tx) + r1[x1] as f64 * tx;
                out.push((top * (1.0 - ty) + bottom * ty) as f32);
            }
        }
    }
    Ok(ImageTensor::from_parts_unchecked(
        out, height, width, img.range,
    ))
}

/// Bilinear resize of a single `height x width` plane, same alignment as
/// [`resize_bilinear`].
pub fn resize_plane(
    plane: &[f64],
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    assert_eq!(
        plane.len(),
        height * width,
        "plane length does not match its shape"
    );
    if (out_h, out_w) == (height, width) {
        return plane.to_vec();
    }
    let ys = axis_taps(height, out_h);
    let xs = axis_taps(width, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, ty) in &ys {
        let r0 = &plane[y0 * width..(y0 + 1) * width];
        let r1 = &plane[y1 * width..(y1 + 1) * width];
        for &(x0, x1, tx) in &xs {
            let top = r0[x0] * (1.0 - tx) + r0[x1] * tx;
            let bottom = r1[x0] * (1.0 - tx) + r1[x1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Top-left corner of a centered crop: `floor((H - h) / 2), floor((W - w) / 2)`.
pub fn crop_offset(
    height: usize,
    width: usize,
    crop_h: usize,
    crop_w: usize,
) -> Result<(usize, usize)> {
    if crop_h > height || crop_w > width {
        return Err(ImagingError::CropTooLarge {
            crop_h,
            crop_w,
            height,
            width,
        });
    }
    if crop_h == 0 || crop_w == 0 {
        return Err(ImagingError::InvalidDimensions {
            height: crop_h,
            width: crop_w,
        });
    }
    Ok(((height - crop_h) / 2, (width - crop_w) / 2))
}

pub fn center_crop(img: &ImageTensor, height: usize, width: usize) -> Result<ImageTensor> {
    let (oy, ox) = crop_offset(img.height, img.width, height, width)?;
    let mut out = Vec::with_capacity(CHANNELS * height * width);
    for c in 0..CHANNELS {
        let plane = img.channel(c);
        for y in oy..oy + height {
            out.extend_from_slice(&plane[y * img.width + ox..y * img.width + ox + width]);
        }
    }
    Ok(ImageTensor::from_parts_unchecked(
        out, height, width, img.range,
    ))
}

/// `Raw255` to `Unit` by dividing by 255.
pub fn scale_unit(img: &ImageTensor) -> Result<ImageTensor> {
    img.expect_range(RangeTag::Raw255)?;
    let data = img
        .data
        .iter()
        .map(|&v| ((v as f64) / 255.0) as f32)
        .collect();
    Ok(ImageTensor::from_parts_unchecked(
        data,
        img.height,
        img.width,
        RangeTag::Unit,
    ))
}

/// `Unit` to `Normalized`: `(v - mean[c]) / std[c]`.
pub fn normalize(img: &ImageTensor, consts: &NormalizationConstants) -> Result<ImageTensor> {
    img.expect_range(RangeTag::Unit)?;
    let plane = img.height * img.width;
    let mut data = Vec::with_capacity(img.data.len());
    for c in 0..CHANNELS {
        let (m, s) = (consts.mean[c], consts.std[c]);
        data.extend(
            img.data[c * plane..(c + 1) * plane]
                .iter()
                .map(|&v| ((v as f64 - m) / s) as f32),
        );
    }
    Ok(ImageTensor::from_parts_unchecked(
        data,
        img.height,
        img.width,
        RangeTag::Normalized,
    ))
}

/// Inverse of [`normalize`]. Values are clamped into `[0, 1]`.
pub fn denormalize(img: &ImageTensor, consts: &NormalizationConstants) -> Result<ImageTensor> {
    img.expect_range(RangeTag::Normalized)?;
    let plane = img.height * img.width;
    let mut data = Vec::with_capacity(img.data.len());
    for c in 0..CHANNELS {
        let (m, s) = (consts.mean[c], consts.std[c]);
        data.extend(
            img.data[c * plane..(c + 1) * plane]
                .iter()
                .map(|&v| ((v as f64 * s + m).clamp(0.0, 1.0)) as f32),
        );
    }
    Ok(ImageTensor::from_parts_unchecked(
        data,
        img.height,
        img.width,
        RangeTag::Unit,
    ))
}

/// Resize to 256x256, center crop to 224x224 and scale to `[0, 1]`.
///
/// This is the display-space image the explainers perturb; [`preprocess`]
/// additionally normalizes it.
pub fn prepare_unit(img: &ImageTensor) -> Result<ImageTensor> {
    img.expect_range(RangeTag::Raw255)?;
    let resized = resize_bilinear(img, RESIZE_SIZE, RESIZE_SIZE)?;
    let cropped = center_crop(&resized, CROP_SIZE, CROP_SIZE)?;
    scale_unit(&cropped)
}

/// Full chain: resize(256) -> crop(224) -> scale -> normalize(ImageNet).
pub fn preprocess(img: &ImageTensor) -> Result<ImageTensor> {
    normalize(&prepare_unit(img)?, &NormalizationConstants::IMAGENET)
}
