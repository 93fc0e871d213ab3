//! Raw kernels shared by the graph-recording and inference paths.
//!
//! Everything here works on flat row-major slices; shape bookkeeping lives
//! in the callers. Accumulators are `f32` throughout.

/// Geometry of a square-kernel 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.out_channels * self.out_height() * self.out_width()
    }

    /// Input coordinate for an output position and kernel tap, or `None` when
    /// it falls in the zero padding.
    #[inline]
    fn source(&self, out_pos: usize, tap: usize, extent: usize) -> Option<usize> {
        let pos = (out_pos * self.stride + tap) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// `y[b, o] = sum_i x[b, i] * w[o, i] + bias[o]`
pub fn linear_forward(
    x: &[f32],
    batch: usize,
    in_features: usize,
    weight: &[f32],
    bias: Option<&[f32]>,
    out_features: usize,
) -> Vec<f32> {
    let mut y = vec![0.0f32; batch * out_features];
    for b in 0..batch {
        let xr = &x[b * in_features..(b + 1) * in_features];
        let yr = &mut y[b * out_features..(b + 1) * out_features];
        for (o, yo) in yr.iter_mut().enumerate() {
            let wr = &weight[o * in_features..(o + 1) * in_features];
            let mut acc = 0.0f32;
            for (xi, wi) in xr.iter().zip(wr) {
                acc += xi * wi;
            }
            *yo = acc + bias.map_or(0.0, |bv| bv[o]);
        }
    }
    y
}

/// Gradients of [`linear_forward`]: returns `(dx, dw, db)`.
pub fn linear_backward(
    x: &[f32],
    batch: usize,
    in_features: usize,
    weight: &[f32],
    out_features: usize,
    dy: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut dx = vec![0.0f32; batch * in_features];
    let mut dw = vec![0.0f32; out_features * in_features];
    let mut db = vec![0.0f32; out_features];
    for b in 0..batch {
        let xr = &x[b * in_features..(b + 1) * in_features];
        let dxr = &mut dx[b * in_features..(b + 1) * in_features];
        for o in 0..out_features {
            let g = dy[b * out_features + o];
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            let wr = &weight[o * in_features..(o + 1) * in_features];
            let dwr = &mut dw[o * in_features..(o + 1) * in_features];
            for i in 0..in_features {
                dxr[i] += g * wr[i];
                dwr[i] += g * xr[i];
            }
        }
    }
    (dx, dw, db)
}

pub fn conv2d_forward(
    x: &[f32],
    weight: &[f32],
    bias: Option<&[f32]>,
    g: &ConvGeometry,
) -> Vec<f32> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let mut y = vec![0.0f32; g.output_len()];
    for b in 0..g.batch {
        for o in 0..g.out_channels {
            let plane = &mut y
                [((b * g.out_channels + o) * oh) * ow..((b * g.out_channels + o + 1) * oh) * ow];
            if let Some(bv) = bias {
                plane.iter_mut().for_each(|v| *v = bv[o]);
            }
            for c in 0..g.in_channels {
                let xin = &x[((b * g.in_channels + c) * g.height) * g.width
                    ..((b * g.in_channels + c + 1) * g.height) * g.width];
                let wk = &weight
                    [((o * g.in_channels + c) * k) * k..((o * g.in_channels + c + 1) * k) * k];
                for oy in 0..oh {
                    for ky in 0..k {
                        let Some(iy) = g.source(oy, ky, g.height) else {
                            continue;
                        };
                        let row = &xin[iy * g.width..(iy + 1) * g.width];
                        for kx in 0..k {
                            let wv = wk[ky * k + kx];
                            for ox in 0..ow {
                                if let Some(ix) = g.source(ox, kx, g.width) {
                                    plane[oy * ow + ox] += wv * row[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Gradients of [`conv2d_forward`]: returns `(dx, dw, db)`.
pub fn conv2d_backward(
    x: &[f32],
    weight: &[f32],
    g: &ConvGeometry,
    dy: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let mut dx = vec![0.0f32; x.len()];
    let mut dw = vec![0.0f32; weight.len()];
    let mut db = vec![0.0f32; g.out_channels];
    for b in 0..g.batch {
        for o in 0..g.out_channels {
            let dplane =
                &dy[((b * g.out_channels + o) * oh) * ow..((b * g.out_channels + o + 1) * oh) * ow];
            db[o] += dplane.iter().sum::<f32>();
            for c in 0..g.in_channels {
                let base_x = ((b * g.in_channels + c) * g.height) * g.width;
                let base_w = ((o * g.in_channels + c) * k) * k;
                for oy in 0..oh {
                    for ky in 0..k {
                        let Some(iy) = g.source(oy, ky, g.height) else {
                            continue;
                        };
                        for kx in 0..k {
                            let wv = weight[base_w + ky * k + kx];
                            let mut wacc = 0.0f32;
                            for ox in 0..ow {
                                if let Some(ix) = g.source(ox, kx, g.width) {
                                    let d = dplane[oy * ow + ox];
                                    if d == 0.0 {
                                        continue;
                                    }
                                    wacc += d * x[base_x + iy * g.width + ix];
                                    dx[base_x + iy * g.width + ix] += d * wv;
                                }
                            }
                            dw[base_w + ky * k + kx] += wacc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// NaN maps to zero, matching `x > 0 ? x : 0`.
pub fn relu_forward(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub fn relu_backward(x: &[f32], dy: &[f32]) -> Vec<f32> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
        .collect()
}

/// Mean softmax cross-entropy over the batch plus its gradient w.r.t. logits.
pub fn softmax_cross_entropy(logits: &[f32], classes: usize, labels: &[usize]) -> (f32, Vec<f32>) {
    let ce = softmax_cross_entropy_rows(logits, classes, labels, false);
    (ce.loss, ce.grad)
}

/// Row-wise cross-entropy that tolerates faulted logits.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossEntropy {
    /// Mean loss over the rows with all-finite logits (0 if none).
    pub loss: f32,
    pub grad: Vec<f32>,
    /// Rows with all-finite logits.
    pub finite_rows: usize,
    /// Rows contributing to `grad`.
    pub grad_rows: usize,
}

/// With `lenient`, rows containing `+inf` use the limiting softmax (mass
/// shared by the `+inf` entries) for their gradient and are left out of the
/// loss; rows with NaN, or with no entry above `-inf`, are ignored. The
/// gradient is averaged over the rows that contribute to it.
pub fn softmax_cross_entropy_rows(
    logits: &[f32],
    classes: usize,
    labels: &[usize],
    lenient: bool,
) -> CrossEntropy {
    let mut grad = vec![0.0f32; logits.len()];
    let rows: Vec<&[f32]> = logits.chunks(classes).collect();
    let finite: Vec<bool> = rows
        .iter()
        .map(|r| r.iter().all(|v| v.is_finite()))
        .collect();
    let usable: Vec<bool> = rows
        .iter()
        .zip(&finite)
        .map(|(r, &f)| {
            f || (lenient && !r.iter().any(|v| v.is_nan()) && r.contains(&f32::INFINITY))
        })
        .collect();
    let finite_rows = finite.iter().filter(|&&f| f).count();
    let grad_rows = if lenient {
        usable.iter().filter(|&&u| u).count()
    } else {
        labels.len()
    };
    let mut total = 0.0f32;
    let scale = 1.0 / grad_rows.max(1) as f32;
    for (b, &label) in labels.iter().enumerate() {
        if lenient && !usable[b] {
            continue;
        }
        let row = rows[b];
        let grow = &mut grad[b * classes..(b + 1) * classes];
        if !finite[b] && lenient {
            let hot = row.iter().filter(|&&v| v == f32::INFINITY).count() as f32;
            for (j, gv) in grow.iter_mut().enumerate() {
                let p = if row[j] == f32::INFINITY {
                    1.0 / hot
                } else {
                    0.0
                };
                *gv = (p - if j == label { 1.0 } else { 0.0 }) * scale;
            }
            continue;
        }
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f32;
        for &v in row {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln() + max;
        total += log_denom - row[label];
        for (j, gv) in grow.iter_mut().enumerate() {
            let p = (row[j] - log_denom).exp();
            *gv = (p - if j == label { 1.0 } else { 0.0 }) * scale;
        }
    }
    let loss = if lenient {
        if finite_rows == 0 {
            0.0
        } else {
            total / finite_rows as f32
        }
    } else {
        total * scale
    };
    CrossEntropy {
        loss,
        grad,
        finite_rows,
        grad_rows,
    }
}

/// Index of the largest entry; ties and NaN resolve toward the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Six nested loops, no shortcuts.
    fn naive_conv(x: &[f32], w: &[f32], bias: &[f32], g: &ConvGeometry) -> Vec<f32> {
        let (oh, ow) = (g.out_height(), g.out_width());
        let mut y = vec![0.0f32; g.output_len()];
        for b in 0..g.batch {
            for o in 0..g.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[o];
                        for c in 0..g.in_channels {
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                    if iy < 0
                                        || ix < 0
                                        || iy as usize >= g.height
                                        || ix as usize >= g.width
                                    {
                                        continue;
                                    }
                                    let xv = x[((b * g.in_channels + c) * g.height + iy as usize)
                                        * g.width
                                        + ix as usize];
                                    let wv = w
                                        [((o * g.in_channels + c) * g.kernel + ky) * g.kernel + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        y[((b * g.out_channels + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_loops() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for &(stride, padding) in &[(1, 0), (2, 0), (1, 1), (2, 1)] {
            let g = ConvGeometry {
                batch: 2,
                in_channels: 3,
                height: 7,
                width: 6,
                out_channels: 4,
                kernel: 3,
                stride,
                padding,
            };
            // Integer-valued inputs keep every partial sum exact, so the two
            // summation orders must agree bit for bit.
            let x: Vec<f32> = (0..2 * 3 * 7 * 6)
                .map(|_| rng.random_range(-4..=4) as f32)
                .collect();
            let w: Vec<f32> = (0..4 * 3 * 9)
                .map(|_| rng.random_range(-3..=3) as f32)
                .collect();
            let bias = vec![0.0, 1.0, -2.0, 3.0];
            assert_eq!(
                conv2d_forward(&x, &w, Some(&bias), &g),
                naive_conv(&x, &w, &bias, &g)
            );
        }
    }

    #[test]
    fn softmax_grad_rows_sum_to_zero() {
        let logits = [1.0, 2.0, -3.0, 0.5, 0.5, 0.5];
        let (loss, grad) = softmax_cross_entropy(&logits, 3, &[1, 2]);
        assert!(loss > 0.0);
        for row in grad.chunks(3) {
            assert!(row.iter().sum::<f32>().abs() < 1e-7);
        }
    }

    #[test]
    fn argmax_prefers_lowest_on_ties_and_nan() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[f32::NAN, 1.0, 2.0]), 0);
        assert_eq!(argmax(&[0.0, f32::NAN, 2.0]), 2);
    }

    #[test]
    fn linear_hand_case() {
        // W = [[1, 2], [3, 4]], x = [1, 0] -> [1, 3]
        let y = linear_forward(&[1.0, 0.0], 1, 2, &[1.0, 2.0, 3.0, 4.0], None, 2);
        assert_eq!(y, vec![1.0, 3.0]);
    }
}
