//! Turns attribution results into unit-range RGB images.

use super::{AttributionResult, ExplainError, Method, Result, SuperpixelMap};
use crate::imaging::{ImageTensor, RangeTag};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderStyle {
    /// Selected superpixels in original color, everything else white.
    LimeSuperpixelOnly,
    /// Green tint on positive and red tint on negative selected superpixels,
    /// with their boundaries in yellow.
    LimePosNeg,
    /// Red for positive, blue for negative, white at zero, scaled by the
    /// largest magnitude.
    ShapRedBlue,
    /// Half original, half jet-colored heatmap.
    CamOverlay,
}

impl RenderStyle {
    pub fn method(self) -> Method {
        match self {
            RenderStyle::LimeSuperpixelOnly | RenderStyle::LimePosNeg => Method::Lime,
            RenderStyle::ShapRedBlue => Method::KernelShap,
            RenderStyle::CamOverlay => Method::GradCam,
        }
    }
}

const TINT: f64 = 0.5;
const GREEN: [f64; 3] = [0.0, 1.0, 0.0];
const RED: [f64; 3] = [1.0, 0.0, 0.0];
const YELLOW: [f64; 3] = [1.0, 1.0, 0.0];

/// Jet colormap on [0, 1]: dark blue through cyan, yellow to dark red.
pub fn jet(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |offset: f64| (1.5 - (4.0 * v - offset).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

fn diverging(v: f64) -> [f64; 3] {
    let v = v.clamp(-1.0, 1.0);
    if v >= 0.0 {
        [1.0, 1.0 - v, 1.0 - v]
    } else {
        [1.0 + v, 1.0 + v, 1.0]
    }
}

struct Canvas {
    data: Vec<f32>,
    height: usize,
    width: usize,
}

impl Canvas {
    fn from(img: &ImageTensor) -> Self {
        Self {
            data: img.data().to_vec(),
            height: img.height(),
            width: img.width(),
        }
    }

    fn filled(rgb: [f64; 3], height: usize, width: usize) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat_n(c as f32, height * width));
        }
        Self {
            data,
            height,
            width,
        }
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn get(&self, i: usize) -> [f64; 3] {
        let p = self.plane();
        [0, 1, 2].map(|c| self.data[c * p + i] as f64)
    }

    fn set(&mut self, i: usize, rgb: [f64; 3]) {
        let p = self.plane();
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * p + i] = v.clamp(0.0, 1.0) as f32;
        }
    }

    fn into_image(self) -> ImageTensor {
        ImageTensor::new(self.data, self.height, self.width, RangeTag::Unit)
            .expect("canvas keeps its shape")
    }
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|c| (1.0 - t) * a[c] + t * b[c])
}

fn selected_segments(result: &AttributionResult) -> Vec<bool> {
    let mut keep = vec![false; result.scores.len()];
    match result.meta("selected").and_then(|v| v.as_array()) {
        Some(list) => {
            for j in list.iter().filter_map(|v| v.as_u64()) {
                if let Some(k) = keep.get_mut(j as usize) {
                    *k = true;
                }
            }
        }
        None => {
            for (k, s) in keep.iter_mut().zip(&result.scores) {
                *k = *s != 0.0;
            }
        }
    }
    keep
}

/// Renders `result` over `original`, a unit-range image of the explained
/// input. Superpixel styles need the segment map.
pub fn render(
    result: &AttributionResult,
    original: &ImageTensor,
    segments: Option<&SuperpixelMap>,
    style: RenderStyle,
) -> Result<ImageTensor> {
    if style.method() != result.method {
        return Err(ExplainError::StyleMismatch {
            style,
            method: result.method,
        });
    }
    if original.range() != RangeTag::Unit {
        return Err(ExplainError::InvalidConfig(
            "renderings need the Unit-range original".into(),
        ));
    }
    let (h, w) = (original.height(), original.width());
    let pixels = result.pixel_scores(segments)?;
    if pixels.len() != h * w {
        return Err(ExplainError::InvalidConfig(format!(
            "{} pixel scores for a {h}x{w} image",
            pixels.len()
        )));
    }
    let canvas = match style {
        RenderStyle::LimeSuperpixelOnly => {
            let sp = segments.expect("pixel_scores checked the map");
            let keep = selected_segments(result);
            let src = Canvas::from(original);
            let mut out = Canvas::filled([1.0; 3], h, w);
            for (i, &l) in sp.labels().iter().enumerate() {
                if keep[l as usize] {
                    out.set(i, src.get(i));
                }
            }
            out
        }
        RenderStyle::LimePosNeg => {
            let sp = segments.expect("pixel_scores checked the map");
            let keep = selected_segments(result);
            let edges = sp.boundaries();
            let mut out = Canvas::from(original);
            for (i, &l) in sp.labels().iter().enumerate() {
                let l = l as usize;
                if !keep[l] || result.scores[l] == 0.0 {
                    continue;
                }
                let color = if result.scores[l] > 0.0 { GREEN } else { RED };
                let px = if edges[i] {
                    YELLOW
                } else {
                    mix(out.get(i), color, TINT)
                };
                out.set(i, px);
            }
            out
        }
        RenderStyle::ShapRedBlue => {
            let scale = pixels.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let mut out = Canvas::filled([1.0; 3], h, w);
            for (i, v) in pixels.iter().enumerate() {
                out.set(i, diverging(if scale > 0.0 { v / scale } else { 0.0 }));
            }
            out
        }
        RenderStyle::CamOverlay => {
            let mut out = Canvas::from(original);
            for (i, v) in pixels.iter().enumerate() {
                out.set(i, mix(out.get(i), jet(*v), 0.5));
            }
            out
        }
    };
    Ok(canvas.into_image())
}

/// Tiles rows of images on a white sheet with a fixed gap. Missing cells
/// stay white.
pub fn comparison_sheet(rows: &[Vec<&ImageTensor>]) -> Result<ImageTensor> {
    const GAP: usize = 8;
    let tiles: Vec<&ImageTensor> = rows.iter().flatten().copied().collect();
    let Some(first) = tiles.first() else {
        return Err(ExplainError::InvalidConfig(
            "comparison sheet needs at least one image".into(),
        ));
    };
    let (th, tw) = (first.height(), first.width());
    if tiles
        .iter()
        .any(|t| (t.height(), t.width()) != (th, tw) || t.range() != RangeTag::Unit)
    {
        return Err(ExplainError::InvalidConfig(
            "sheet tiles must share a size and be Unit range".into(),
        ));
    }
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (h, w) = (rows.len() * (th + GAP) + GAP, cols * (tw + GAP) + GAP);
    let mut sheet = Canvas::filled([1.0; 3], h, w);
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            let src = Canvas::from(tile);
            let (oy, ox) = (GAP + r * (th + GAP), GAP + c * (tw + GAP));
            for y in 0..th {
                for x in 0..tw {
                    sheet.set((oy + y) * w + ox + x, src.get(y * tw + x));
                }
            }
        }
    }
    Ok(sheet.into_image())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::{meta_insert, ScoreLayout};
    use std::collections::BTreeMap;

    fn stripes(h: usize, w: usize, n: usize) -> SuperpixelMap {
        let labels: Vec<u32> = (0..h * w).map(|i| ((i % w) * n / w) as u32).collect();
        SuperpixelMap::from_labels(&labels, h, w).unwrap()
    }

    fn original(h: usize, w: usize) -> ImageTensor {
        let data = (0..3 * h * w).map(|i| (i % 7) as f32 / 10.0).collect();
        ImageTensor::new(data, h, w, RangeTag::Unit).unwrap()
    }

    fn seg_result(
        method: Method,
        scores: Vec<f64>,
        selected: Option<Vec<usize>>,
    ) -> AttributionResult {
        let mut metadata = BTreeMap::new();
        if let Some(s) = selected {
            meta_insert(&mut metadata, "selected", s);
        }
        AttributionResult {
            method,
            target_class: 0,
            base_value: 0.0,
            layout: ScoreLayout::Segments {
                count: scores.len(),
            },
            scores,
            metadata,
        }
    }

    #[test]
    fn superpixel_only_shows_exactly_the_selected_segments() {
        let (h, w) = (4, 24);
        let sp = stripes(h, w, 12);
        let scores: Vec<f64> = (0..12)
            .map(|i| if i < 10 { 1.0 + i as f64 } else { 0.0 })
            .collect();
        let res = seg_result(Method::Lime, scores, Some((0..10).collect()));
        let img = render(
            &res,
            &original(h, w),
            Some(&sp),
            RenderStyle::LimeSuperpixelOnly,
        )
        .unwrap();
        let plane = h * w;
        let mut shown = std::collections::BTreeSet::new();
        for i in 0..plane {
            let white = (0..3).all(|c| img.data()[c * plane + i] == 1.0);
            if !white {
                shown.insert(sp.labels()[i]);
            } else {
                assert!(sp.labels()[i] >= 10);
            }
        }
        assert_eq!(shown.len(), 10);
    }

    #[test]
    fn zero_shap_scores_are_white() {
        let sp = stripes(3, 6, 3);
        let res = seg_result(Method::KernelShap, vec![0.0; 3], None);
        let img = render(&res, &original(3, 6), Some(&sp), RenderStyle::ShapRedBlue).unwrap();
        assert!(img.data().iter().all(|&v| v == 1.0));
        let res = seg_result(Method::KernelShap, vec![2.0, -1.0, 0.0], None);
        let img = render(&res, &original(3, 6), Some(&sp), RenderStyle::ShapRedBlue).unwrap();
        let plane = 18;
        assert_eq!(
            [img.get(0, 0, 0), img.get(1, 0, 0), img.get(2, 0, 0)],
            [1.0, 0.0, 0.0]
        );
        assert_eq!(
            [img.get(0, 0, 2), img.get(1, 0, 2), img.get(2, 0, 2)],
            [0.5, 0.5, 1.0]
        );
        assert_eq!(img.data()[2 * plane + 5], 1.0);
    }

    #[test]
    fn cam_overlay_of_zero_map_is_uniform_tint() {
        let (h, w) = (5, 4);
        let orig = original(h, w);
        let res = AttributionResult {
            method: Method::GradCam,
            target_class: 0,
            base_value: 0.0,
            layout: ScoreLayout::Pixels {
                height: h,
                width: w,
            },
            scores: vec![0.0; h * w],
            metadata: BTreeMap::new(),
        };
        let img = render(&res, &orig, None, RenderStyle::CamOverlay).unwrap();
        let j = jet(0.0);
        assert_eq!(j, [0.0, 0.0, 0.5]);
        for c in 0..3 {
            for i in 0..h * w {
                let expected = 0.5 * orig.data()[c * h * w + i] as f64 + 0.5 * j[c];
                assert!((img.data()[c * h * w + i] as f64 - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn style_mismatch() {
        let sp = stripes(3, 6, 3);
        let res = seg_result(Method::Lime, vec![1.0, 0.0, 0.0], None);
        assert!(matches!(
            render(&res, &original(3, 6), Some(&sp), RenderStyle::CamOverlay),
            Err(ExplainError::StyleMismatch { .. })
        ));
        assert!(matches!(
            render(&res, &original(3, 6), Some(&sp), RenderStyle::ShapRedBlue),
            Err(ExplainError::StyleMismatch { .. })
        ));
    }

    #[test]
    fn pos_neg_tints_and_boundaries() {
        let sp = stripes(2, 6, 3);
        let res = seg_result(Method::Lime, vec![1.0, -1.0, 0.5], Some(vec![0, 1]));
        let orig = ImageTensor::filled([0.2; 3], 2, 6, RangeTag::Unit).unwrap();
        let img = render(&res, &orig, Some(&sp), RenderStyle::LimePosNeg).unwrap();
        assert_eq!(
            [img.get(0, 0, 0), img.get(1, 0, 0), img.get(2, 0, 0)],
            [0.1, 0.6, 0.1]
        );
        assert_eq!(
            [img.get(0, 0, 1), img.get(1, 0, 1), img.get(2, 0, 1)],
            [1.0, 1.0, 0.0]
        );
        assert_eq!(
            [img.get(0, 0, 5), img.get(1, 0, 5), img.get(2, 0, 5)],
            [0.2, 0.2, 0.2]
        );
    }

    #[test]
    fn sheet_layout() {
        let a = original(4, 5);
        let sheet = comparison_sheet(&[vec![&a, &a], vec![&a]]).unwrap();
        assert_eq!((sheet.height(), sheet.width()), (2 * 12 + 8, 2 * 13 + 8));
        assert_eq!(sheet.get(0, 8, 8), a.get(0, 0, 0));
        assert_eq!(sheet.get(0, 20, 21), 1.0);
    }
}
