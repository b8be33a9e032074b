//! SLIC superpixels: k-means in (L, a, b, y, x) on a regular seed grid,
//! followed by 4-connectivity enforcement.

use super::{ExplainError, Result};
use crate::imaging::{ImageTensor, RangeTag};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlicConfig {
    pub target_segments: usize,
    pub compactness: f64,
    pub max_iter: usize,
    /// Recorded for provenance; the algorithm itself is deterministic.
    pub seed: u64,
}

impl Default for SlicConfig {
    fn default() -> Self {
        Self {
            target_segments: 50,
            compactness: 10.0,
            max_iter: 10,
            seed: 0,
        }
    }
}

/// Dense segment labels `0..num_segments`, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuperpixelMap {
    labels: Vec<u32>,
    height: usize,
    width: usize,
    num_segments: usize,
}

impl SuperpixelMap {
    /// Relabels `labels` densely in raster order of first appearance.
    pub fn from_labels(labels: &[u32], height: usize, width: usize) -> Result<Self> {
        if labels.len() != height * width || labels.is_empty() {
            return Err(ExplainError::InvalidConfig(format!(
                "{} labels for a {height}x{width} image",
                labels.len()
            )));
        }
        let mut map = BTreeMap::new();
        let dense: Vec<u32> = labels
            .iter()
            .map(|l| {
                let next = map.len() as u32;
                *map.entry(*l).or_insert(next)
            })
            .collect();
        Ok(Self {
            labels: dense,
            height,
            width,
            num_segments: map.len(),
        })
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_segments(&self) -> usize {
        self.num_segments
    }

    pub fn label(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn segment_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_segments];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }

    /// Mean color of each segment, per channel.
    pub fn segment_means(&self, img: &ImageTensor) -> Vec<[f64; 3]> {
        let plane = self.height * self.width;
        let mut sums = vec![[0.0; 3]; self.num_segments];
        for (i, &l) in self.labels.iter().enumerate() {
            for (c, s) in sums[l as usize].iter_mut().enumerate() {
                *s += img.data()[c * plane + i] as f64;
            }
        }
        for (s, n) in sums.iter_mut().zip(self.segment_sizes()) {
            for v in s.iter_mut() {
                *v /= n.max(1) as f64;
            }
        }
        sums
    }

    /// Pixels with a 4-neighbor in a different segment.
    pub fn boundaries(&self) -> Vec<bool> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let l = self.label(y, x);
                let differs = (x + 1 < w && self.label(y, x + 1) != l)
                    || (y + 1 < h && self.label(y + 1, x) != l)
                    || (x > 0 && self.label(y, x - 1) != l)
                    || (y > 0 && self.label(y - 1, x) != l);
                out[y * w + x] = differs;
            }
        }
        out
    }

    /// True when every segment is a single 4-connected region.
    pub fn is_four_connected(&self) -> bool {
        let components = connected_components(&self.labels, self.height, self.width);
        components.count == self.num_segments
    }
}

struct Components {
    ids: Vec<usize>,
    count: usize,
}

/// 4-connected components of equal labels, numbered in raster order.
fn connected_components(labels: &[u32], h: usize, w: usize) -> Components {
    let mut ids = vec![usize::MAX; h * w];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if ids[start] != usize::MAX {
            continue;
        }
        ids[start] = count;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if ids[q] == usize::MAX && labels[q] == labels[p] {
                    ids[q] = count;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        count += 1;
    }
    Components { ids, count }
}

fn srgb_to_linear(c: f64) -> f64 {
    if c > 0.04045 {
        ((c + 0.055) / 1.055).powf(2.4)
    } else {
        c / 12.92
    }
}

fn lab_f(t: f64) -> f64 {
    if t > 0.008856 {
        t.cbrt()
    } else {
        7.787 * t + 16.0 / 116.0
    }
}

/// CIE L*a*b* under D65 from unit-range sRGB.
pub(crate) fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(|c| srgb_to_linear(c.clamp(0.0, 1.0)));
    let x = (0.412453 * r + 0.357580 * g + 0.180423 * b) / 0.950456;
    let y = 0.212671 * r + 0.715160 * g + 0.072169 * b;
    let z = (0.019334 * r + 0.119193 * g + 0.950227 * b) / 1.088754;
    let (fx, fy, fz) = (lab_f(x), lab_f(y), lab_f(z));
    let l = if y > 0.008856 {
        116.0 * fy - 16.0
    } else {
        903.3 * y
    };
    [l, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Seed grid: `round(sqrt(H*W/n))` spacing starting at half a step, with the
/// step clamped to the image extent for very elongated images.
fn seed_grid(h: usize, w: usize, n: usize) -> (Vec<usize>, Vec<usize>, f64) {
    let area = (h * w) as f64;
    if area <= n as f64 {
        return ((0..h).collect(), (0..w).collect(), 1.0);
    }
    let mut step = [(area / n as f64).sqrt(); 2];
    let dims = [h as f64, w as f64];
    let (small, large) = if h <= w { (0, 1) } else { (1, 0) };
    if dims[small] < step[small] {
        step[small] = dims[small];
        step[large] = dims[large] / n as f64;
    }
    let axis = |len: usize, s: f64| -> Vec<usize> {
        let start = (s / 2.0).floor() as usize;
        let stride = (s.round() as usize).max(1);
        (start..len).step_by(stride).collect()
    };
    (axis(h, step[0]), axis(w, step[1]), step[0].max(step[1]))
}

/// Segments a unit-range image into roughly `target_segments` compact,
/// 4-connected superpixels. Fragments smaller than `area / (4 * target)`
/// are merged into the neighbor sharing the longest border.
pub fn segment_superpixels(img: &ImageTensor, config: &SlicConfig) -> Result<SuperpixelMap> {
    if img.range() != RangeTag::Unit {
        return Err(ExplainError::InvalidConfig(format!(
            "superpixels need a Unit image, got {:?}",
            img.range()
        )));
    }
    if config.target_segments == 0 || config.compactness <= 0.0 {
        return Err(ExplainError::InvalidConfig(
            "target segments and compactness must be positive".into(),
        ));
    }
    let (h, w) = (img.height(), img.width());
    let plane = h * w;
    let lab: Vec<[f64; 3]> = (0..plane)
        .map(|i| rgb_to_lab([0, 1, 2].map(|c| img.data()[c * plane + i] as f64)))
        .collect();

    let (ys, xs, step) = seed_grid(h, w, config.target_segments);
    // Center: (L, a, b, y, x).
    let mut centers: Vec<[f64; 5]> = Vec::with_capacity(ys.len() * xs.len());
    for &y in &ys {
        for &x in &xs {
            let [l, a, b] = lab[y * w + x];
            centers.push([l, a, b, y as f64, x as f64]);
        }
    }
    let spatial = (config.compactness / step).powi(2);
    let window = (2.0 * step).ceil() as isize;
    let mut assign = vec![0u32; plane];
    let mut dist = vec![f64::INFINITY; plane];
    for _ in 0..config.max_iter.max(1) {
        dist.fill(f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let (cy, cx) = (c[3].round() as isize, c[4].round() as isize);
            let y0 = (cy - window).max(0) as usize;
            let y1 = ((cy + window + 1) as usize).min(h);
            let x0 = (cx - window).max(0) as usize;
            let x1 = ((cx + window + 1) as usize).min(w);
            for y in y0..y1 {
                let dy = y as f64 - c[3];
                for x in x0..x1 {
                    let p = y * w + x;
                    let dx = x as f64 - c[4];
                    let [l, a, b] = lab[p];
                    let dc = (l - c[0]).powi(2) + (a - c[1]).powi(2) + (b - c[2]).powi(2);
                    let d = dc + (dy * dy + dx * dx) * spatial;
                    if d < dist[p] {
                        dist[p] = d;
                        assign[p] = k as u32;
                    }
                }
            }
        }
        let mut sums = vec![[0.0f64; 6]; centers.len()];
        for (p, &k) in assign.iter().enumerate() {
            if dist[p].is_infinite() {
                continue;
            }
            let s = &mut sums[k as usize];
            let [l, a, b] = lab[p];
            s[0] += l;
            s[1] += a;
            s[2] += b;
            s[3] += (p / w) as f64;
            s[4] += (p % w) as f64;
            s[5] += 1.0;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s[5] > 0.0 {
                for j in 0..5 {
                    c[j] = s[j] / s[5];
                }
            }
        }
    }
    // Pixels no window reached join the nearest center spatially.
    for p in 0..plane {
        if dist[p].is_infinite() {
            let (y, x) = ((p / w) as f64, (p % w) as f64);
            let nearest = centers
                .iter()
                .enumerate()
                .min_by(|a, b| {
                    let da = (a.1[3] - y).powi(2) + (a.1[4] - x).powi(2);
                    let db = (b.1[3] - y).powi(2) + (b.1[4] - x).powi(2);
                    da.total_cmp(&db)
                })
                .map_or(0, |(k, _)| k);
            assign[p] = nearest as u32;
        }
    }
    let min_size = plane / (4 * config.target_segments);
    let merged = enforce_connectivity(&assign, h, w, min_size);
    SuperpixelMap::from_labels(&merged, h, w)
}

/// Splits labels into 4-connected components and folds every component
/// smaller than `min_size` into the neighbor with the longest shared border
/// (lowest component id on ties), smallest components first.
fn enforce_connectivity(labels: &[u32], h: usize, w: usize, min_size: usize) -> Vec<u32> {
    let comps = connected_components(labels, h, w);
    let mut ids = comps.ids;
    let mut pixels: Vec<Vec<usize>> = vec![Vec::new(); comps.count];
    for (p, &c) in ids.iter().enumerate() {
        pixels[c].push(p);
    }
    let mut alive = comps.count;
    loop {
        if alive <= 1 {
            break;
        }
        let smallest = pixels
            .iter()
            .enumerate()
            .filter(|(_, px)| !px.is_empty() && px.len() < min_size)
            .min_by_key(|(c, px)| (px.len(), *c))
            .map(|(c, _)| c);
        let Some(c) = smallest else { break };
        let mut border: BTreeMap<usize, usize> = BTreeMap::new();
        for &p in &pixels[c] {
            let (y, x) = (p / w, p % w);
            let mut count = |q: usize| {
                if ids[q] != c {
                    *border.entry(ids[q]).or_insert(0) += 1;
                }
            };
            if x > 0 {
                count(p - 1);
            }
            if x + 1 < w {
                count(p + 1);
            }
            if y > 0 {
                count(p - w);
            }
            if y + 1 < h {
                count(p + w);
            }
        }
        let Some((&target, _)) = border.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        else {
            break;
        };
        let moved = std::mem::take(&mut pixels[c]);
        for &p in &moved {
            ids[p] = target;
        }
        pixels[target].extend(moved);
        alive -= 1;
    }
    ids.into_iter().map(|c| c as u32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray(h: usize, w: usize) -> ImageTensor {
        ImageTensor::filled([0.5; 3], h, w, RangeTag::Unit).unwrap()
    }

    #[test]
    fn constant_image_forms_a_grid() {
        for (target, expected) in [(16, 16), (50, 49)] {
            let sp = segment_superpixels(
                &gray(224, 224),
                &SlicConfig {
                    target_segments: target,
                    ..Default::default()
                },
            )
            .unwrap();
            assert_eq!(sp.num_segments(), expected);
            assert!(sp.is_four_connected());
        }
        let sp = segment_superpixels(
            &gray(224, 224),
            &SlicConfig {
                target_segments: 16,
                ..Default::default()
            },
        )
        .unwrap();
        // Ideal 4x4 grid of 56x56 cells; tie-breaking at cell borders may
        // shift a boundary by one pixel.
        let sizes = sp.segment_sizes();
        assert!(
            sizes.iter().all(|&s| (55 * 55..=57 * 57).contains(&s)),
            "{sizes:?}"
        );
        let mut cell_of = [usize::MAX; 16];
        for y in (28..224).step_by(56) {
            for x in (28..224).step_by(56) {
                cell_of[sp.label(y, x) as usize] = (y / 56) * 4 + x / 56;
            }
        }
        let mut agree = 0;
        for y in 0..224 {
            for x in 0..224 {
                agree += (cell_of[sp.label(y, x) as usize] == (y / 56) * 4 + x / 56) as usize;
            }
        }
        assert!(agree as f64 >= 0.97 * (224 * 224) as f64, "{agree}");
    }

    #[test]
    fn lab_reference_values() {
        let white = rgb_to_lab([1.0, 1.0, 1.0]);
        assert!((white[0] - 100.0).abs() < 1e-3 && white[1].abs() < 1e-3 && white[2].abs() < 1e-3);
        let red = rgb_to_lab([1.0, 0.0, 0.0]);
        assert!((red[0] - 53.24).abs() < 0.05, "{red:?}");
        assert!((red[1] - 80.09).abs() < 0.1, "{red:?}");
        assert!((red[2] - 67.20).abs() < 0.1, "{red:?}");
        assert_eq!(rgb_to_lab([0.0; 3]), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn two_color_halves_do_not_mix() {
        let mut data = vec![0f32; 3 * 64 * 64];
        for c in 0..3 {
            for y in 0..64 {
                for x in 32..64 {
                    data[c * 4096 + y * 64 + x] = 1.0;
                }
            }
        }
        let img = ImageTensor::new(data, 64, 64, RangeTag::Unit).unwrap();
        let sp = segment_superpixels(
            &img,
            &SlicConfig {
                target_segments: 8,
                ..Default::default()
            },
        )
        .unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let l = sp.label(y, x);
                let other_side = (0..64).any(|yy| {
                    let xx = if x < 32 { 63 } else { 0 };
                    sp.label(yy, xx) == l
                });
                assert!(!other_side, "segment {l} spans both halves");
            }
        }
    }

    #[test]
    fn rejects_non_unit_input() {
        let img = ImageTensor::filled([0.0; 3], 8, 8, RangeTag::Normalized).unwrap();
        assert!(segment_superpixels(&img, &SlicConfig::default()).is_err());
    }

    #[test]
    fn relabel_is_dense() {
        let sp = SuperpixelMap::from_labels(&[7, 7, 3, 9], 2, 2).unwrap();
        assert_eq!(sp.labels(), &[0, 0, 1, 2]);
        assert_eq!(sp.num_segments(), 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn random_images_give_valid_maps(seed in any::<u64>(), target in 4usize..40) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data = (0..3 * 40 * 48).map(|_| rng.random::<f32>()).collect();
            let img = ImageTensor::new(data, 40, 48, RangeTag::Unit).unwrap();
            let cfg = SlicConfig { target_segments: target, ..Default::default() };
            let a = segment_superpixels(&img, &cfg).unwrap();
            let b = segment_superpixels(&img, &cfg).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.is_four_connected());
            prop_assert_eq!(a.labels().len(), 40 * 48);
            prop_assert!(a.labels().iter().all(|&l| (l as usize) < a.num_segments()));
            let min = 40 * 48 / (4 * target);
            if a.num_segments() > 1 {
                prop_assert!(a.segment_sizes().iter().all(|&s| s >= min));
            }
        }
    }
}
