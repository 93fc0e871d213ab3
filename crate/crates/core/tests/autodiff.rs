mod common;

use common::{
    close, conv2d_f64, cross_entropy_f64, linear_f64, naive_conv2d_f32, rng, uniform_vec,
};
use faultline::graph::{Graph, NodeId};
use faultline::model::Model;
use faultline::ops::{self, ConvGeometry};
use faultline::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

const INSTANCES: u64 = 100;
const EPS: f64 = 1e-3;
const REL: f64 = 1e-3;
const ABS: f64 = 1e-6;

/// Central difference of `f` with respect to every entry of `at`.
fn numeric_grad(at: &[f32], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x: Vec<f64> = at.iter().map(|&v| f64::from(v)).collect();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + EPS;
            let up = f(&x);
            x[i] = orig - EPS;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * EPS)
        })
        .collect()
}

fn assert_grad(kind: &str, instance: u64, analytic: &[f32], numeric: &[f64]) {
    assert_eq!(analytic.len(), numeric.len());
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        assert!(
            close(f64::from(a), n, REL, ABS),
            "{kind} instance {instance} entry {i}: autodiff {a} vs finite difference {n}"
        );
    }
}

fn leaf(g: &mut Graph, shape: Vec<usize>, data: Vec<f32>) -> NodeId {
    g.input(Tensor::new(shape, data).unwrap().with_requires_grad(true))
}

fn constant(g: &mut Graph, shape: Vec<usize>, data: Vec<f32>) -> NodeId {
    g.input(Tensor::new(shape, data).unwrap())
}

/// `sum(y * r)` for a fixed random `r`, the generic scalar head.
fn weighted_sum(g: &mut Graph, y: NodeId, r: &[f32]) -> NodeId {
    let shape = g.value(y).shape().to_vec();
    let rn = constant(g, shape, r.to_vec());
    let p = g.mul(y, rn).unwrap();
    g.sum(p)
}

fn dot(a: &[f64], r: &[f32]) -> f64 {
    a.iter().zip(r).map(|(x, &w)| x * f64::from(w)).sum()
}

fn to64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

#[test]
fn linear_gradients_match_finite_differences() {
    for inst in 0..INSTANCES {
        let mut r = rng(1000 + inst);
        let (batch, inf, outf) = (
            r.random_range(1..4),
            r.random_range(1..7),
            r.random_range(1..6),
        );
        let x = uniform_vec(&mut r, batch * inf, -1.0, 1.0);
        let w = uniform_vec(&mut r, outf * inf, -1.0, 1.0);
        let b = uniform_vec(&mut r, outf, -1.0, 1.0);
        let head = uniform_vec(&mut r, batch * outf, -1.0, 1.0);

        let mut g = Graph::new();
        let (xn, wn, bn) = (
            leaf(&mut g, vec![batch, inf], x.clone()),
            leaf(&mut g, vec![outf, inf], w.clone()),
            leaf(&mut g, vec![outf], b.clone()),
        );
        let y = g.linear(xn, wn, Some(bn)).unwrap();
        let loss = weighted_sum(&mut g, y, &head);
        let grads = g.backward(loss).unwrap();

        let (x64, w64, b64) = (to64(&x), to64(&w), to64(&b));
        let nx = numeric_grad(&x, |v| {
            dot(&linear_f64(v, batch, inf, &w64, Some(&b64), outf), &head)
        });
        let nw = numeric_grad(&w, |v| {
            dot(&linear_f64(&x64, batch, inf, v, Some(&b64), outf), &head)
        });
        let nb = numeric_grad(&b, |v| {
            dot(&linear_f64(&x64, batch, inf, &w64, Some(v), outf), &head)
        });
        assert_grad("linear dx", inst, grads.get(xn).unwrap(), &nx);
        assert_grad("linear dw", inst, grads.get(wn).unwrap(), &nw);
        assert_grad("linear db", inst, grads.get(bn).unwrap(), &nb);
    }
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    for inst in 0..INSTANCES {
        let mut r = rng(2000 + inst);
        let k = r.random_range(1..4);
        let (stride, padding) = (r.random_range(1..3), r.random_range(0..2));
        let (n, c, o) = (
            r.random_range(1..3),
            r.random_range(1..3),
            r.random_range(1..4),
        );
        let h = r.random_range(k..k + 4);
        let wd = r.random_range(k..k + 4);
        let xs = [n, c, h, wd];
        let ws = [o, c, k, k];
        let x = uniform_vec(&mut r, xs.iter().product(), -1.0, 1.0);
        let w = uniform_vec(&mut r, ws.iter().product(), -1.0, 1.0);
        let b = uniform_vec(&mut r, o, -1.0, 1.0);

        let mut g = Graph::new();
        let (xn, wn, bn) = (
            leaf(&mut g, xs.to_vec(), x.clone()),
            leaf(&mut g, ws.to_vec(), w.clone()),
            leaf(&mut g, vec![o], b.clone()),
        );
        let y = g.conv2d(xn, wn, Some(bn), stride, padding).unwrap();
        let head = uniform_vec(&mut r, g.value(y).len(), -1.0, 1.0);
        let loss = weighted_sum(&mut g, y, &head);
        let grads = g.backward(loss).unwrap();

        let (x64, w64, b64) = (to64(&x), to64(&w), to64(&b));
        let nx = numeric_grad(&x, |v| {
            dot(
                &conv2d_f64(v, xs, &w64, ws, Some(&b64), stride, padding),
                &head,
            )
        });
        let nw = numeric_grad(&w, |v| {
            dot(
                &conv2d_f64(&x64, xs, v, ws, Some(&b64), stride, padding),
                &head,
            )
        });
        let nb = numeric_grad(&b, |v| {
            dot(
                &conv2d_f64(&x64, xs, &w64, ws, Some(v), stride, padding),
                &head,
            )
        });
        assert_grad("conv2d dx", inst, grads.get(xn).unwrap(), &nx);
        assert_grad("conv2d dw", inst, grads.get(wn).unwrap(), &nw);
        assert_grad("conv2d db", inst, grads.get(bn).unwrap(), &nb);
    }
}

#[test]
fn relu_gradients_match_finite_differences() {
    for inst in 0..INSTANCES {
        let mut r = rng(3000 + inst);
        let len = r.random_range(1..20);
        // keep clear of the kink so the central difference is exact
        let x: Vec<f32> = (0..len)
            .map(|_| {
                let v: f32 = r.random_range(0.01..1.0);
                if r.random_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let head = uniform_vec(&mut r, len, -1.0, 1.0);
        let mut g = Graph::new();
        let xn = leaf(&mut g, vec![len], x.clone());
        let y = g.relu(xn);
        let loss = weighted_sum(&mut g, y, &head);
        let grads = g.backward(loss).unwrap();
        let nx = numeric_grad(&x, |v| {
            v.iter()
                .zip(&head)
                .map(|(a, &h)| a.max(0.0) * f64::from(h))
                .sum()
        });
        assert_grad("relu", inst, grads.get(xn).unwrap(), &nx);
    }
}

#[test]
fn reshape_gradients_match_finite_differences() {
    for inst in 0..INSTANCES {
        let mut r = rng(4000 + inst);
        let (a, b) = (r.random_range(1..5), r.random_range(1..5));
        let x = uniform_vec(&mut r, a * b, -1.0, 1.0);
        let head = uniform_vec(&mut r, a * b, -1.0, 1.0);
        let mut g = Graph::new();
        let xn = leaf(&mut g, vec![a, b], x.clone());
        let y = g.reshape(xn, vec![b, a]).unwrap();
        let loss = weighted_sum(&mut g, y, &head);
        let grads = g.backward(loss).unwrap();
        let nx = numeric_grad(&x, |v| dot(v, &head));
        assert_grad("reshape", inst, grads.get(xn).unwrap(), &nx);
    }
}

#[test]
fn mul_and_sum_gradients_match_finite_differences() {
    for inst in 0..INSTANCES {
        let mut r = rng(5000 + inst);
        let len = r.random_range(1..16);
        let a = uniform_vec(&mut r, len, -2.0, 2.0);
        let b = uniform_vec(&mut r, len, -2.0, 2.0);
        let mut g = Graph::new();
        let an = leaf(&mut g, vec![len], a.clone());
        let bn = leaf(&mut g, vec![len], b.clone());
        let p = g.mul(an, bn).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        let (a64, b64) = (to64(&a), to64(&b));
        let na = numeric_grad(&a, |v| v.iter().zip(&b64).map(|(x, y)| x * y).sum());
        let nb = numeric_grad(&b, |v| v.iter().zip(&a64).map(|(x, y)| x * y).sum());
        assert_grad("mul da", inst, grads.get(an).unwrap(), &na);
        assert_grad("mul db", inst, grads.get(bn).unwrap(), &nb);
    }
}

#[test]
fn pick_sum_gradients_match_finite_differences() {
    for inst in 0..INSTANCES {
        let mut r = rng(6000 + inst);
        let (batch, classes) = (r.random_range(1..6), r.random_range(2..6));
        let logits = uniform_vec(&mut r, batch * classes, -3.0, 3.0);
        let picks: Vec<usize> = (0..batch).map(|_| r.random_range(0..classes)).collect();
        let mut g = Graph::new();
        let ln = leaf(&mut g, vec![batch, classes], logits.clone());
        let loss = g.pick_sum(ln, &picks).unwrap();
        let grads = g.backward(loss).unwrap();
        let nl = numeric_grad(&logits, |v| {
            picks
                .iter()
                .enumerate()
                .map(|(b, &p)| v[b * classes + p])
                .sum()
        });
        assert_grad("pick_sum", inst, grads.get(ln).unwrap(), &nl);
    }
}

#[test]
fn cross_entropy_gradients_match_finite_differences() {
    for inst in 0..INSTANCES {
        let mut r = rng(7000 + inst);
        let (batch, classes) = (r.random_range(1..6), r.random_range(2..6));
        let logits = uniform_vec(&mut r, batch * classes, -3.0, 3.0);
        let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..classes)).collect();
        let mut g = Graph::new();
        let ln = leaf(&mut g, vec![batch, classes], logits.clone());
        let loss = g.softmax_cross_entropy(ln, &labels).unwrap();
        let grads = g.backward(loss).unwrap();
        let nl = numeric_grad(&logits, |v| cross_entropy_f64(v, classes, &labels));
        assert_grad("cross_entropy", inst, grads.get(ln).unwrap(), &nl);
    }
}

#[test]
fn mlp_parameter_gradients_match_finite_differences() {
    for inst in 0..INSTANCES {
        let mut r = rng(8000 + inst);
        let (inf, h1, h2, classes) = (3, 5, 4, 3);
        let model = Model::mlp(inf, &[h1, h2], classes, 8000 + inst).unwrap();
        let batch = 4;
        let params: Vec<Vec<f64>> = model.params().map(|t| to64(t.data())).collect();
        // resample inputs until no hidden pre-activation sits near a ReLU kink
        let x = loop {
            let x = uniform_vec(&mut r, batch * inf, -1.0, 1.0);
            let z1 = linear_f64(&to64(&x), batch, inf, &params[0], Some(&params[1]), h1);
            let a1: Vec<f64> = z1.iter().map(|v| v.max(0.0)).collect();
            let z2 = linear_f64(&a1, batch, h1, &params[2], Some(&params[3]), h2);
            if z1.iter().chain(&z2).all(|v| v.abs() > 0.02) {
                break x;
            }
        };
        let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..classes)).collect();
        let input = Tensor::new(vec![batch, inf], x.clone()).unwrap();

        let mut g = Graph::new();
        let trace = model.record(&mut g, &input, &[], true, false).unwrap();
        let loss = g.softmax_cross_entropy(trace.logits(), &labels).unwrap();
        let grads = g.backward(loss).unwrap();

        let x64 = to64(&x);
        let forward = |p: &[Vec<f64>]| {
            let a1: Vec<f64> = linear_f64(&x64, batch, inf, &p[0], Some(&p[1]), h1)
                .iter()
                .map(|v| v.max(0.0))
                .collect();
            let a2: Vec<f64> = linear_f64(&a1, batch, h1, &p[2], Some(&p[3]), h2)
                .iter()
                .map(|v| v.max(0.0))
                .collect();
            cross_entropy_f64(
                &linear_f64(&a2, batch, h2, &p[4], Some(&p[5]), classes),
                classes,
                &labels,
            )
        };
        let leaves: Vec<NodeId> = trace
            .params
            .iter()
            .flat_map(|(w, b)| [*w, *b])
            .flatten()
            .collect();
        assert_eq!(leaves.len(), params.len());
        for (pi, (id, current)) in leaves.iter().zip(&params).enumerate() {
            let at: Vec<f32> = current.iter().map(|&v| v as f32).collect();
            let numeric = numeric_grad(&at, |v| {
                let mut p = params.clone();
                p[pi] = v.to_vec();
                forward(&p)
            });
            assert_grad(
                &format!("mlp param {pi}"),
                inst,
                grads.get(*id).unwrap(),
                &numeric,
            );
        }
    }
}

#[test]
fn conv2d_forward_matches_naive_loops_exactly() {
    for inst in 0..200 {
        let mut r = rng(9000 + inst);
        let k = r.random_range(1..5);
        let (stride, padding) = (r.random_range(1..4), r.random_range(0..3));
        let (n, c, o) = (
            r.random_range(1..3),
            r.random_range(1..4),
            r.random_range(1..4),
        );
        let h = r.random_range(k..k + 6);
        let w = r.random_range(k..k + 6);
        let x = uniform_vec(&mut r, n * c * h * w, -1.0, 1.0);
        let wt = uniform_vec(&mut r, o * c * k * k, -1.0, 1.0);
        let bias = uniform_vec(&mut r, o, -1.0, 1.0);
        let geom = ConvGeometry {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            out_channels: o,
            kernel: k,
            stride,
            padding,
        };
        let fast = ops::conv2d_forward(&x, &wt, Some(&bias), &geom);
        let naive = naive_conv2d_f32(
            &x,
            [n, c, h, w],
            &wt,
            [o, c, k, k],
            Some(&bias),
            stride,
            padding,
        );
        let same = fast
            .iter()
            .zip(&naive)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same && fast.len() == naive.len(), "instance {inst} differs");
    }
}

#[test]
fn hand_computed_two_layer_logits() {
    use faultline::model::Layer;
    // W1 = [[1, 2], [3, -4]], b1 = [0.5, 0]; W2 = [[1, -1], [2, 1]]
    let model = Model::new(
        vec![2],
        vec![
            Layer::linear(2, 2, vec![1.0, 2.0, 3.0, -4.0], Some(vec![0.5, 0.0])).unwrap(),
            Layer::relu(),
            Layer::linear(2, 2, vec![1.0, -1.0, 2.0, 1.0], None).unwrap(),
        ],
    )
    .unwrap();
    // x = [1, 0]: hidden = relu([1.5, 3]) = [1.5, 3]; logits = [1.5 - 3, 3 + 3]
    let out = model
        .forward(&Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap())
        .unwrap();
    assert_eq!(out.data(), &[-1.5, 6.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn cross_entropy_row_gradients_sum_to_zero(
        rows in prop::collection::vec(prop::collection::vec(-20.0f32..20.0, 4), 1..8),
        label_seed in any::<u64>(),
    ) {
        let classes = 4;
        let logits: Vec<f32> = rows.iter().flatten().copied().collect();
        let labels: Vec<usize> = (0..rows.len()).map(|i| ((label_seed >> (i * 2)) & 3) as usize).collect();
        let (_, grad) = ops::softmax_cross_entropy(&logits, classes, &labels);
        for row in grad.chunks(classes) {
            let s: f32 = row.iter().sum();
            prop_assert!(s.abs() < 1e-6, "row sum {}", s);
        }
    }

    #[test]
    fn graph_nodes_precede_their_consumers(len in 1usize..10) {
        // a chain records nodes in order and its gradient reaches the leaf
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![len], vec![1.0; len]);
        let y = g.relu(x);
        let z = g.reshape(y, vec![1, len]).unwrap();
        let s = g.sum(z);
        prop_assert!(x.index() < y.index() && y.index() < z.index() && z.index() < s.index());
        let grads = g.backward(s).unwrap();
        let ones = vec![1.0f32; len];
        prop_assert_eq!(grads.get(x).unwrap(), ones.as_slice());
    }
}
