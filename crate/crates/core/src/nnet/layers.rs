//! Per-sample kernels. Every function works on one sample's CHW slice.

use super::Shape;

pub(crate) struct ConvGeom {
    pub input: Shape,
    pub output: Shape,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    fn weight_index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.input.channels + i) * self.kernel + ky) * self.kernel + kx
    }

    /// Output columns whose input column `ox*stride + kx - padding` is in range.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let (s, p, w) = (self.stride, self.padding, self.input.width);
        let lo = if p > kx { (p - kx).div_ceil(s) } else { 0 };
        let hi = if w + p > kx {
            ((w - 1 + p - kx) / s + 1).min(self.output.width)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
        (iy >= 0 && (iy as usize) < self.input.height).then_some(iy as usize)
    }

    /// Visits every (weight, input row, output row, column range) tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, (usize, usize))) {
        let k = self.kernel;
        for o in 0..self.output.channels {
            for i in 0..self.input.channels {
                for ky in 0..k {
                    for kx in 0..k {
                        let (lo, hi) = self.valid_cols(kx);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..self.output.height {
                            if let Some(iy) = self.input_row(oy, ky) {
                                f(o, i, self.weight_index(o, i, ky, kx), iy, oy, (lo, hi));
                            }
                        }
                    }
                }
            }
        }
    }

    fn input_col(&self, ox: usize, kx_of_weight: usize) -> usize {
        ox * self.stride + kx_of_weight - self.padding
    }
}

pub(crate) fn conv_forward(
    g: &ConvGeom,
    weights: &[f64],
    bias: &[f64],
    input: &[f64],
    out: &mut [f64],
) {
    let (iw, ow) = (g.input.width, g.output.width);
    let (ip, op) = (g.input.height * iw, g.output.height * ow);
    for (o, b) in bias.iter().enumerate() {
        out[o * op..(o + 1) * op].fill(*b);
    }
    let k = g.kernel;
    g.for_each_tap(|o, i, widx, iy, oy, (lo, hi)| {
        let w = weights[widx];
        let kx = widx % k;
        let out_row = &mut out[o * op + oy * ow..o * op + oy * ow + ow];
        let in_row = &input[i * ip + iy * iw..i * ip + iy * iw + iw];
        if g.stride == 1 {
            let start = lo + kx - g.padding;
            for (dst, src) in out_row[lo..hi]
                .iter_mut()
                .zip(&in_row[start..start + (hi - lo)])
            {
                *dst += w * src;
            }
        } else {
            for (ox, dst) in out_row.iter_mut().enumerate().take(hi).skip(lo) {
                *dst += w * in_row[g.input_col(ox, kx)];
            }
        }
    });
}

/// Accumulates parameter gradients into `grad_w`/`grad_b` and, when given,
/// overwrites `grad_in` with the input gradient.
pub(crate) fn conv_backward(
    g: &ConvGeom,
    weights: &[f64],
    input: &[f64],
    grad_out: &[f64],
    grad_params: Option<(&mut [f64], &mut [f64])>,
    grad_in: Option<&mut [f64]>,
) {
    let (iw, ow) = (g.input.width, g.output.width);
    let (ip, op) = (g.input.height * iw, g.output.height * ow);
    let k = g.kernel;
    if let Some((gw, gb)) = grad_params {
        for (o, b) in gb.iter_mut().enumerate() {
            *b += grad_out[o * op..(o + 1) * op].iter().sum::<f64>();
        }
        g.for_each_tap(|o, i, widx, iy, oy, (lo, hi)| {
            let kx = widx % k;
            let go = &grad_out[o * op + oy * ow..o * op + oy * ow + ow];
            let in_row = &input[i * ip + iy * iw..i * ip + iy * iw + iw];
            let mut acc = 0.0;
            if g.stride == 1 {
                let start = lo + kx - g.padding;
                for (a, b) in go[lo..hi].iter().zip(&in_row[start..start + (hi - lo)]) {
                    acc += a * b;
                }
            } else {
                for (ox, a) in go.iter().enumerate().take(hi).skip(lo) {
                    acc += a * in_row[g.input_col(ox, kx)];
                }
            }
            gw[widx] += acc;
        });
    }
    if let Some(gi) = grad_in {
        gi.fill(0.0);
        g.for_each_tap(|o, i, widx, iy, oy, (lo, hi)| {
            let w = weights[widx];
            let kx = widx % k;
            let go = &grad_out[o * op + oy * ow..o * op + oy * ow + ow];
            let gi_row = &mut gi[i * ip + iy * iw..i * ip + iy * iw + iw];
            if g.stride == 1 {
                let start = lo + kx - g.padding;
                for (dst, a) in gi_row[start..start + (hi - lo)].iter_mut().zip(&go[lo..hi]) {
                    *dst += w * a;
                }
            } else {
                for (ox, a) in go.iter().enumerate().take(hi).skip(lo) {
                    gi_row[g.input_col(ox, kx)] += w * a;
                }
            }
        });
    }
}

pub(crate) fn maxpool_forward(input: Shape, output: Shape, x: &[f64], out: &mut [f64]) {
    let (h, w) = (input.height, input.width);
    for c in 0..input.channels {
        for oy in 0..output.height {
            for ox in 0..output.width {
                let base = c * h * w + 2 * oy * w + 2 * ox;
                let m = x[base]
                    .max(x[base + 1])
                    .max(x[base + w])
                    .max(x[base + w + 1]);
                out[(c * output.height + oy) * output.width + ox] = m;
            }
        }
    }
}

/// Routes each output gradient to the first maximal element of its window.
pub(crate) fn maxpool_backward(
    input: Shape,
    output: Shape,
    x: &[f64],
    grad_out: &[f64],
    grad_in: &mut [f64],
) {
    let (h, w) = (input.height, input.width);
    grad_in.fill(0.0);
    for c in 0..input.channels {
        for oy in 0..output.height {
            for ox in 0..output.width {
                let base = c * h * w + 2 * oy * w + 2 * ox;
                let mut best = base;
                for cand in [base + 1, base + w, base + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                grad_in[best] += grad_out[(c * output.height + oy) * output.width + ox];
            }
        }
    }
}

/// `out[u] = b[u] + sum_j W[u, j] x[j]` with `W` row-major `units x inputs`.
pub(crate) fn dense_forward(weights: &[f64], bias: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (u, (o, b)) in out.iter_mut().zip(bias).enumerate() {
        let row = &weights[u * n..(u + 1) * n];
        *o = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
    }
}

pub(crate) fn dense_backward(
    weights: &[f64],
    x: &[f64],
    grad_out: &[f64],
    grad_params: Option<(&mut [f64], &mut [f64])>,
    grad_in: Option<&mut [f64]>,
) {
    let n = x.len();
    if let Some((gw, gb)) = grad_params {
        for (u, &g) in grad_out.iter().enumerate() {
            gb[u] += g;
            if g != 0.0 {
                for (dst, v) in gw[u * n..(u + 1) * n].iter_mut().zip(x) {
                    *dst += g * v;
                }
            }
        }
    }
    if let Some(gi) = grad_in {
        gi.fill(0.0);
        for (u, &g) in grad_out.iter().enumerate() {
            if g != 0.0 {
                for (dst, w) in gi.iter_mut().zip(&weights[u * n..(u + 1) * n]) {
                    *dst += g * w;
                }
            }
        }
    }
}

pub(crate) fn softmax(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Vector-Jacobian product of softmax: `p * (g - <g, p>)`.
pub(crate) fn softmax_backward(p: &[f64], grad_out: &[f64], grad_in: &mut [f64]) {
    let dot: f64 = p.iter().zip(grad_out).map(|(a, b)| a * b).sum();
    for ((gi, pi), go) in grad_in.iter_mut().zip(p).zip(grad_out) {
        *gi = pi * (go - dot);
    }
}
