//! Image tensors, decoding and the preprocessing chain.

mod augment;
mod transform;
mod xpb1;

pub use augment::{apply_affine, sample_augmentation, AffineTransform, AugmentationSpec, FillMode};
pub use transform::{
    center_crop, crop_offset, denormalize, normalize, prepare_unit, preprocess, resize_bilinear,
    resize_plane, scale_unit, NormalizationConstants, CROP_SIZE, RESIZE_SIZE,
};
pub use xpb1::{
    decode_xpb1, decode_xpb1_batch, encode_xpb1, encode_xpb1_batch, read_xpb1, write_xpb1,
    XPB1_MAGIC,
};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("crop {crop_h}x{crop_w} is larger than image {height}x{width}")]
    CropTooLarge {
        crop_h: usize,
        crop_w: usize,
        height: usize,
        width: usize,
    },
    #[error("expected a {expected:?} tensor, got {actual:?}")]
    RangeTagMismatch {
        expected: RangeTag,
        actual: RangeTag,
    },
    #[error("tensor data of length {len} does not fit shape 3x{height}x{width}")]
    ShapeMismatch {
        len: usize,
        height: usize,
        width: usize,
    },
    #[error("value {value} is outside the {range:?} range")]
    OutOfRange { value: f32, range: RangeTag },
    #[error("invalid dimensions {height}x{width}")]
    InvalidDimensions { height: usize, width: usize },
    #[error("invalid augmentation spec: {0}")]
    InvalidSpec(String),
    #[error("malformed XPB1 payload: {0}")]
    Xpb1(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ImagingError>;

/// Value range a tensor is currently in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RangeTag {
    /// Pixel intensities in `[0, 255]`.
    Raw255,
    /// Intensities scaled to `[0, 1]`.
    Unit,
    /// Per-channel standardized values.
    Normalized,
}

impl RangeTag {
    fn admits(self, v: f32) -> bool {
        match self {
            RangeTag::Raw255 => (0.0..=255.0).contains(&v),
            RangeTag::Unit => (0.0..=1.0).contains(&v),
            RangeTag::Normalized => v.is_finite(),
        }
    }
}

pub const CHANNELS: usize = 3;

/// Three-channel, channel-major (CHW) float image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Vec<f32>,
    height: usize,
    width: usize,
    range: RangeTag,
}

impl ImageTensor {
    /// Wraps CHW data, checking the length and that every value lies in `range`.
    pub fn new(data: Vec<f32>, height: usize, width: usize, range: RangeTag) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(ImagingError::InvalidDimensions { height, width });
        }
        if data.len() != CHANNELS * height * width {
            return Err(ImagingError::ShapeMismatch {
                len: data.len(),
                height,
                width,
            });
        }
        if let Some(&value) = data.iter().find(|v| !range.admits(**v)) {
            return Err(ImagingError::OutOfRange { value, range });
        }
        Ok(Self {
            data,
            height,
            width,
            range,
        })
    }

    pub(crate) fn from_parts_unchecked(
        data: Vec<f32>,
        height: usize,
        width: usize,
        range: RangeTag,
    ) -> Self {
        debug_assert_eq!(data.len(), CHANNELS * height * width);
        Self {
            data,
            height,
            width,
            range,
        }
    }

    /// Image with every pixel set to `rgb`.
    pub fn filled(rgb: [f32; 3], height: usize, width: usize, range: RangeTag) -> Result<Self> {
        let plane = height * width;
        let mut data = Vec::with_capacity(CHANNELS * plane);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, plane));
        }
        Self::new(data, height, width, range)
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let plane = w * h;
        let mut data = vec![0f32; CHANNELS * plane];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..CHANNELS {
                data[c * plane + i] = px[c] as f32;
            }
        }
        Self::from_parts_unchecked(data, h, w, RangeTag::Raw255)
    }

    /// Converts a `Raw255` or `Unit` tensor to 8-bit RGB, rounding and clamping.
    pub fn to_rgb8(&self) -> Result<RgbImage> {
        let scale = match self.range {
            RangeTag::Raw255 => 1.0,
            RangeTag::Unit => 255.0,
            RangeTag::Normalized => {
                return Err(ImagingError::RangeTagMismatch {
                    expected: RangeTag::Unit,
                    actual: RangeTag::Normalized,
                })
            }
        };
        let plane = self.height * self.width;
        let mut img = RgbImage::new(self.width as u32, self.height as u32);
        for (i, px) in img.pixels_mut().enumerate() {
            for c in 0..CHANNELS {
                px[c] = (self.data[c * plane + i] * scale).round().clamp(0.0, 255.0) as u8;
            }
        }
        Ok(img)
    }

    /// Writes a `Raw255` or `Unit` tensor as an 8-bit PNG.
    pub fn save_png(&self, path: &std::path::Path) -> Result<()> {
        self.to_rgb8()?
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| ImagingError::Io(std::io::Error::other(e)))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (CHANNELS, self.height, self.width)
    }

    pub fn range(&self) -> RangeTag {
        self.range
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub(crate) fn expect_range(&self, expected: RangeTag) -> Result<()> {
        if self.range == expected {
            Ok(())
        } else {
            Err(ImagingError::RangeTagMismatch {
                expected,
                actual: self.range,
            })
        }
    }
}

/// Decodes a JPEG or PNG stream into a `Raw255` tensor; grayscale is replicated
/// across the three channels.
pub fn decode_image(bytes: &[u8]) -> Result<ImageTensor> {
    let img = image::load_from_memory(bytes).map_err(|e| ImagingError::Decode(e.to_string()))?;
    if img.width() == 0 || img.height() == 0 {
        return Err(ImagingError::Decode("image has no pixels".into()));
    }
    Ok(ImageTensor::from_rgb8(&img.to_rgb8()))
}

pub fn load_image(path: &std::path::Path) -> Result<ImageTensor> {
    let bytes = std::fs::read(path)?;
    decode_image(&bytes)
}
