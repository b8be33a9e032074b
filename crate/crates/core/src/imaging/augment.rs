//! Random affine augmentation with Keras `ImageDataGenerator` semantics:
//! rotation and shear ranges in degrees, zoom and shift ranges as fractions.

use super::{ImageTensor, ImagingError, RangeTag, Result, CHANNELS};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillMode {
    /// Out-of-bounds samples take `cval`.
    Constant,
    /// Out-of-bounds samples take the nearest edge pixel.
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub rotation_range: f64,
    pub shear_range: f64,
    pub zoom_range: f64,
    pub width_shift_range: f64,
    pub height_shift_range: f64,
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub fill_mode: FillMode,
    pub cval: f64,
    pub seed: u64,
}

impl AugmentationSpec {
    /// No-op spec: every range zero, flips off.
    pub fn identity(seed: u64) -> Self {
        Self {
            rotation_range: 0.0,
            shear_range: 0.0,
            zoom_range: 0.0,
            width_shift_range: 0.0,
            height_shift_range: 0.0,
            horizontal_flip: false,
            vertical_flip: false,
            fill_mode: FillMode::Nearest,
            cval: 0.0,
            seed,
        }
    }

    /// Geometric-only preset: tiny rotation/shear/zoom plus both flips.
    pub fn aug1(seed: u64) -> Self {
        Self {
            rotation_range: 0.05,
            shear_range: 0.05,
            zoom_range: 0.05,
            horizontal_flip: true,
            vertical_flip: true,
            ..Self::identity(seed)
        }
    }

    /// `aug1` plus 3 degree rotations, 5% shifts and constant zero fill.
    pub fn aug2(seed: u64) -> Self {
        Self {
            rotation_range: 3.0,
            width_shift_range: 0.05,
            height_shift_range: 0.05,
            fill_mode: FillMode::Constant,
            cval: 0.0,
            ..Self::aug1(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("rotation_range", self.rotation_range),
            ("shear_range", self.shear_range),
            ("zoom_range", self.zoom_range),
            ("width_shift_range", self.width_shift_range),
            ("height_shift_range", self.height_shift_range),
        ];
        for (name, v) in ranges {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ImagingError::InvalidSpec(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.zoom_range >= 1.0 {
            return Err(ImagingError::InvalidSpec(format!(
                "zoom_range must be < 1, got {}",
                self.zoom_range
            )));
        }
        if !self.cval.is_finite() {
            return Err(ImagingError::InvalidSpec("cval must be finite".into()));
        }
        Ok(())
    }
}

/// One sampled augmentation. Shifts are fractions of the image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub rotation_deg: f64,
    pub shear_deg: f64,
    pub zoom_x: f64,
    pub zoom_y: f64,
    pub shift_x: f64,
    pub shift_y: f64,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
}

impl AffineTransform {
    pub const IDENTITY: Self = Self {
        rotation_deg: 0.0,
        shear_deg: 0.0,
        zoom_x: 1.0,
        zoom_y: 1.0,
        shift_x: 0.0,
        shift_y: 0.0,
        flip_horizontal: false,
        flip_vertical: false,
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    fn linear_part(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        // Counter-clockwise on screen (y axis points down).
        let rot = [[c, s], [-s, c]];
        let (ss, sc) = self.shear_deg.to_radians().sin_cos();
        let shear = [[1.0, -ss], [0.0, sc]];
        let zoom = [[self.zoom_x, 0.0], [0.0, self.zoom_y]];
        mat_mul(zoom, mat_mul(shear, rot))
    }
}

fn mat_mul(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    [
        [
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
        ],
        [
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        ],
    ]
}

fn symmetric(rng: &mut impl Rng, range: f64) -> f64 {
    if range > 0.0 {
        rng.random_range(-range..=range)
    } else {
        0.0
    }
}

/// Draws one transform. Draw order is fixed (rotation, shifts, shear, zoom,
/// flips) so a given generator state always yields the same transform.
pub fn sample_augmentation(spec: &AugmentationSpec, rng: &mut impl Rng) -> AffineTransform {
    let rotation_deg = symmetric(rng, spec.rotation_range);
    let shift_x = symmetric(rng, spec.width_shift_range);
    let shift_y = symmetric(rng, spec.height_shift_range);
    let shear_deg = symmetric(rng, spec.shear_range);
    let (zoom_x, zoom_y) = if spec.zoom_range > 0.0 {
        (
            1.0 + symmetric(rng, spec.zoom_range),
            1.0 + symmetric(rng, spec.zoom_range),
        )
    } else {
        (1.0, 1.0)
    };
    let flip_horizontal = spec.horizontal_flip && rng.random_bool(0.5);
    let flip_vertical = spec.vertical_flip && rng.random_bool(0.5);
    AffineTransform {
        rotation_deg,
        shear_deg,
        zoom_x,
        zoom_y,
        shift_x,
        shift_y,
        flip_horizontal,
        flip_vertical,
    }
}

/// Warps `img` by `t` around the image center (rotate, shear, zoom, then
/// shift), resampling bilinearly, then applies flips. Positive shifts move
/// content right/down.
pub fn apply_affine(
    img: &ImageTensor,
    t: &AffineTransform,
    fill: FillMode,
    cval: f64,
) -> ImageTensor {
    if t.is_identity() {
        return img.clone();
    }
    let (h, w) = (img.height, img.width);
    let a = t.linear_part();
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [
        [a[1][1] / det, -a[0][1] / det],
        [-a[1][0] / det, a[0][0] / det],
    ];
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (tx, ty) = (t.shift_x * w as f64, t.shift_y * h as f64);
    let cval = match img.range {
        RangeTag::Raw255 => cval.clamp(0.0, 255.0),
        RangeTag::Unit => cval.clamp(0.0, 1.0),
        RangeTag::Normalized => cval,
    };

    let mut out = vec![0f32; img.data.len()];
    for oy in 0..h {
        for ox in 0..w {
            let dx = ox as f64 - cx - tx;
            let dy = oy as f64 - cy - ty;
            let sx = cx + inv[0][0] * dx + inv[0][1] * dy;
            let sy = cy + inv[1][0] * dx + inv[1][1] * dy;
            let dst_x = if t.flip_horizontal { w - 1 - ox } else { ox };
            let dst_y = if t.flip_vertical { h - 1 - oy } else { oy };
            for c in 0..CHANNELS {
                out[(c * h + dst_y) * w + dst_x] =
                    sample(img.channel(c), h, w, sx, sy, fill, cval) as f32;
            }
        }
    }
    ImageTensor::from_parts_unchecked(out, h, w, img.range)
}

fn sample(plane: &[f32], h: usize, w: usize, x: f64, y: f64, fill: FillMode, cval: f64) -> f64 {
    let (x, y) = match fill {
        FillMode::Nearest => (x.clamp(0.0, (w - 1) as f64), y.clamp(0.0, (h - 1) as f64)),
        FillMode::Constant => (x, y),
    };
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let tap = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi > (w - 1) as f64 || yi > (h - 1) as f64 {
            cval
        } else {
            plane[yi as usize * w + xi as usize] as f64
        }
    };
    let mut v = tap(x0, y0) * (1.0 - fx) * (1.0 - fy);
    if fx > 0.0 {
        v += tap(x0 + 1.0, y0) * fx * (1.0 - fy);
    }
    if fy > 0.0 {
        v += tap(x0, y0 + 1.0) * (1.0 - fx) * fy;
    }
    if fx > 0.0 && fy > 0.0 {
        v += tap(x0 + 1.0, y0 + 1.0) * fx * fy;
    }
    v
}
