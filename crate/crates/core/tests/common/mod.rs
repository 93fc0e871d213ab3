#![allow(dead_code)]

use faultline::data::{Dataset, Split};
use faultline::model::{Layer, Model};
use faultline::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// `|a - b| <= rel * max(|a|, |b|) + abs`
pub fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + abs
}

/// Naive conv in the same accumulation order as the library kernel.
pub fn naive_conv2d_f32(
    x: &[f32],
    xs: [usize; 4],
    w: &[f32],
    ws: [usize; 4],
    bias: Option<&[f32]>,
    stride: usize,
    padding: usize,
) -> Vec<f32> {
    let [n, c, h, wd] = xs;
    let [o, _, k, _] = ws;
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (wd + 2 * padding - k) / stride + 1;
    let mut y = vec![0.0f32; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bv| bv[oc]);
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= wd {
                                    continue;
                                }
                                let xv = x[((b * c + ic) * h + iy as usize) * wd + ix as usize];
                                acc += w[((oc * c + ic) * k + ky) * k + kx] * xv;
                            }
                        }
                    }
                    y[((b * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    y
}

pub fn conv2d_f64(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let [n, c, h, wd] = xs;
    let [o, _, k, _] = ws;
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (wd + 2 * padding - k) / stride + 1;
    let mut y = vec![0.0f64; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bv| bv[oc]);
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= wd {
                                    continue;
                                }
                                acc += w[((oc * c + ic) * k + ky) * k + kx]
                                    * x[((b * c + ic) * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    y[((b * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    y
}

pub fn linear_f64(
    x: &[f64],
    batch: usize,
    inf: usize,
    w: &[f64],
    b: Option<&[f64]>,
    outf: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; batch * outf];
    for n in 0..batch {
        for o in 0..outf {
            let mut acc = b.map_or(0.0, |b| b[o]);
            for i in 0..inf {
                acc += x[n * inf + i] * w[o * inf + i];
            }
            y[n * outf + o] = acc;
        }
    }
    y
}

/// Mean softmax cross-entropy in f64.
pub fn cross_entropy_f64(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &l) in logits.chunks(classes).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[l];
    }
    total / labels.len() as f64
}

/// Two-class model on two features: `logits = W x`, no hidden layer.
pub fn linear_model(weights: [f32; 4]) -> Model {
    Model::new(
        vec![2],
        vec![Layer::linear(2, 2, weights.to_vec(), None).unwrap()],
    )
    .unwrap()
}

pub fn dataset(rows: &[[f32; 2]], labels: &[usize], classes: usize) -> Dataset {
    let data: Vec<f32> = rows.iter().flatten().copied().collect();
    Dataset::new(
        Tensor::new(vec![rows.len(), 1, 1, 2], data).unwrap(),
        labels.to_vec(),
        classes,
        Split::Test,
    )
    .unwrap()
}

/// Four-class model where the `class` weight of input feature `class`
/// dominates: `w[c][c] = 100`, everything else small. Inputs are one-hot so
/// every flip of a dominant weight's high exponent bits costs a full class.
pub fn dominant_weight_model() -> Model {
    let classes = 4;
    let features = 8;
    let mut r = rng(77);
    let mut w = vec![0.0f32; classes * features];
    for (i, v) in w.iter_mut().enumerate() {
        let (o, f) = (i / features, i % features);
        *v = if f < classes && o == f {
            100.0
        } else {
            r.random_range(-1.0f32..1.0)
        };
    }
    Model::new(
        vec![features],
        vec![Layer::linear(features, classes, w, None).unwrap()],
    )
    .unwrap()
}

/// One-hot-ish inputs for [`dominant_weight_model`]: feature `c` is 1 for
/// class `c`, plus small seeded noise on the distractor features.
pub fn dominant_weight_data(per_class: usize, seed: u64) -> Dataset {
    let (classes, features) = (4, 8);
    let mut r = rng(seed);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..classes * per_class {
        let c = i % classes;
        for f in 0..features {
            data.push(if f == c {
                1.0
            } else if f >= classes {
                r.random_range(0.0f32..0.2)
            } else {
                0.0
            });
        }
        labels.push(c);
    }
    Dataset::new(
        Tensor::new(vec![labels.len(), 1, 1, features], data).unwrap(),
        labels,
        classes,
        Split::Test,
    )
    .unwrap()
}
