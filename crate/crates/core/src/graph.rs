//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and `backward` simply walks it in reverse.

use crate::bitfloat::flip_bit;
use crate::error::{Error, Result};
use crate::ops::{self, ConvGeometry};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Linear {
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        geometry: ConvGeometry,
    },
    Relu {
        x: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Sum {
        x: NodeId,
    },
    PickSum {
        logits: NodeId,
        picks: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        dlogits: Vec<f32>,
    },
    /// Per-sample bit flips. The backward pass is straight-through, keeping
    /// the sign of the flip's local slope (negative for the sign bit).
    BitFlip {
        x: NodeId,
        flips: Vec<(usize, u8)>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    tracked: bool,
}

/// A recorded computation. Inputs always precede the nodes consuming them.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every tracked node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f32]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f32>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf. It is differentiated iff `tensor.requires_grad()`.
    pub fn input(&mut self, tensor: Tensor) -> NodeId {
        let tracked = tensor.requires_grad();
        self.push(Op::Leaf, tensor, tracked)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, tracked: bool) -> NodeId {
        self.nodes.push(Node { op, value, tracked });
        NodeId(self.nodes.len() - 1)
    }

    fn tracked(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].tracked)
    }

    /// `x: [B, ...]` flattened per sample, `weight: [out, in]`, `bias: [out]`.
    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let xv = self.value(x);
        let wv = self.value(weight);
        if wv.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "linear weight must be 2-D, got {:?}",
                wv.shape()
            )));
        }
        let (out_features, in_features) = (wv.shape()[0], wv.shape()[1]);
        let batch = xv.batch();
        if xv.sample_len() != in_features {
            return Err(Error::Shape(format!(
                "linear expects {in_features} input features, got {:?}",
                xv.shape()
            )));
        }
        if let Some(b) = bias {
            if self.value(b).len() != out_features {
                return Err(Error::Shape("linear bias length mismatch".into()));
            }
        }
        let y = ops::linear_forward(
            xv.data(),
            batch,
            in_features,
            wv.data(),
            bias.map(|b| self.value(b).data()),
            out_features,
        );
        let value = Tensor::new(vec![batch, out_features], y)?;
        let mut deps = vec![x, weight];
        deps.extend(bias);
        let tracked = self.tracked(&deps);
        Ok(self.push(
            Op::Linear {
                x,
                weight,
                bias,
                in_features,
                out_features,
            },
            value,
            tracked,
        ))
    }

    /// `x: [B, C, H, W]`, `weight: [O, C, K, K]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        let wv = self.value(weight);
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(Error::Shape(format!(
                "conv2d input {xs:?} incompatible with weight {ws:?}"
            )));
        }
        if xs[2] + 2 * padding < ws[2] || xs[3] + 2 * padding < ws[2] || stride == 0 {
            return Err(Error::Shape(format!(
                "conv2d kernel {} too large for input {xs:?}",
                ws[2]
            )));
        }
        let geometry = ConvGeometry {
            batch: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            out_channels: ws[0],
            kernel: ws[2],
            stride,
            padding,
        };
        let y = ops::conv2d_forward(
            xv.data(),
            wv.data(),
            bias.map(|b| self.value(b).data()),
            &geometry,
        );
        let value = Tensor::new(
            vec![
                geometry.batch,
                geometry.out_channels,
                geometry.out_height(),
                geometry.out_width(),
            ],
            y,
        )?;
        let mut deps = vec![x, weight];
        deps.extend(bias);
        let tracked = self.tracked(&deps);
        Ok(self.push(
            Op::Conv2d {
                x,
                weight,
                bias,
                geometry,
            },
            value,
            tracked,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let value =
            Tensor::new(xv.shape().to_vec(), ops::relu_forward(xv.data())).expect("same shape");
        let tracked = self.tracked(&[x]);
        self.push(Op::Relu { x }, value, tracked)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let mut value = self.value(x).clone().reshape(shape)?;
        value.clear_grad();
        let tracked = self.tracked(&[x]);
        Ok(self.push(Op::Reshape { x }, value, tracked))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!(
                "mul of {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Op::Mul { a, b }, value, tracked))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        let tracked = self.tracked(&[x]);
        self.push(Op::Sum { x }, Tensor::scalar(s), tracked)
    }

    /// `sum_b logits[b, picks[b]]`.
    pub fn pick_sum(&mut self, logits: NodeId, picks: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.shape()[0] != picks.len() {
            return Err(Error::Shape(format!(
                "pick_sum over {:?} with {} picks",
                lv.shape(),
                picks.len()
            )));
        }
        let classes = lv.shape()[1];
        if let Some(&bad) = picks.iter().find(|&&p| p >= classes) {
            return Err(Error::Usage(format!(
                "class {bad} out of range for {classes} logits"
            )));
        }
        let s = picks
            .iter()
            .enumerate()
            .map(|(b, &p)| lv.data()[b * classes + p])
            .sum();
        let tracked = self.tracked(&[logits]);
        Ok(self.push(
            Op::PickSum {
                logits,
                picks: picks.to_vec(),
            },
            Tensor::scalar(s),
            tracked,
        ))
    }

    /// Mean softmax cross-entropy against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.cross_entropy(logits, labels, false).map(|(id, _)| id)
    }

    /// Cross-entropy for logits that faults may have made non-finite; see
    /// [`ops::softmax_cross_entropy_rows`]. The node's value is the loss over
    /// finite rows while its gradient also covers `+inf` rows.
    pub fn softmax_cross_entropy_lenient(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<(NodeId, ops::CrossEntropy)> {
        self.cross_entropy(logits, labels, true)
    }

    fn cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        lenient: bool,
    ) -> Result<(NodeId, ops::CrossEntropy)> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "cross-entropy over {:?} with {} labels",
                lv.shape(),
                labels.len()
            )));
        }
        let classes = lv.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Usage(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut ce = ops::softmax_cross_entropy_rows(lv.data(), classes, labels, lenient);
        let dlogits = std::mem::take(&mut ce.grad);
        let tracked = self.tracked(&[logits]);
        let id = self.push(
            Op::SoftmaxCrossEntropy { logits, dlogits },
            Tensor::scalar(ce.loss),
            tracked,
        );
        Ok((id, ce))
    }

    /// Flips `bit` of element `index` within every sample of `x`.
    pub fn bit_flip(&mut self, x: NodeId, flips: &[(usize, u8)]) -> Result<NodeId> {
        self.flip_impl(x, flips, None)
    }

    /// Like [`Graph::bit_flip`], but flipped values are clamped to
    /// `[-limit, limit]`; NaN becomes `±limit` by its sign bit.
    pub fn bit_flip_saturating(
        &mut self,
        x: NodeId,
        flips: &[(usize, u8)],
        limit: f32,
    ) -> Result<NodeId> {
        if !(limit.is_finite() && limit > 0.0) {
            return Err(Error::Usage(format!(
                "saturation limit must be positive and finite, got {limit}"
            )));
        }
        self.flip_impl(x, flips, Some(limit))
    }

    fn flip_impl(
        &mut self,
        x: NodeId,
        flips: &[(usize, u8)],
        limit: Option<f32>,
    ) -> Result<NodeId> {
        let mut value = self.value(x).clone();
        value.clear_grad();
        let per = value.sample_len();
        if let Some(&(bad, _)) = flips.iter().find(|(i, b)| *i >= per || *b > 31) {
            return Err(Error::Usage(format!(
                "flip position {bad} outside sample of {per} elements"
            )));
        }
        let batch = value.batch();
        let data = value.data_mut();
        for b in 0..batch {
            for &(i, bit) in flips {
                let mut v = flip_bit(data[b * per + i], bit);
                if let Some(l) = limit {
                    v = if v.is_nan() {
                        l.copysign(v)
                    } else {
                        v.clamp(-l, l)
                    };
                }
                data[b * per + i] = v;
            }
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            Op::BitFlip {
                x,
                flips: flips.to_vec(),
            },
            value,
            tracked,
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let contributions = self.local_gradients(&node.op, &node.value, &dy);
            grads[idx] = Some(dy);
            for (input, g) in contributions {
                if !self.nodes[input.0].tracked {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn local_gradients(&self, op: &Op, value: &Tensor, dy: &[f32]) -> Vec<(NodeId, Vec<f32>)> {
        match op {
            Op::Leaf => vec![],
            Op::Linear {
                x,
                weight,
                bias,
                in_features,
                out_features,
            } => {
                let xv = self.value(*x);
                let (dx, dw, db) = ops::linear_backward(
                    xv.data(),
                    xv.batch(),
                    *in_features,
                    self.value(*weight).data(),
                    *out_features,
                    dy,
                );
                let mut out = vec![(*x, dx), (*weight, dw)];
                if let Some(b) = bias {
                    out.push((*b, db));
                }
                out
            }
            Op::Conv2d {
                x,
                weight,
                bias,
                geometry,
            } => {
                let (dx, dw, db) = ops::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*weight).data(),
                    geometry,
                    dy,
                );
                let mut out = vec![(*x, dx), (*weight, dw)];
                if let Some(b) = bias {
                    out.push((*b, db));
                }
                out
            }
            Op::Relu { x } => vec![(*x, ops::relu_backward(self.value(*x).data(), dy))],
            Op::Reshape { x } => vec![(*x, dy.to_vec())],
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let da = dy.iter().zip(bv).map(|(d, v)| d * v).collect();
                let db = dy.iter().zip(av).map(|(d, v)| d * v).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Sum { x } => vec![(*x, vec![dy[0]; self.value(*x).len()])],
            Op::PickSum { logits, picks } => {
                let lv = self.value(*logits);
                let classes = lv.shape()[1];
                let mut g = vec![0.0f32; lv.len()];
                for (b, &p) in picks.iter().enumerate() {
                    g[b * classes + p] = dy[0];
                }
                vec![(*logits, g)]
            }
            Op::SoftmaxCrossEntropy { logits, dlogits } => {
                vec![(*logits, dlogits.iter().map(|v| v * dy[0]).collect())]
            }
            Op::BitFlip { x, flips } => {
                let per = value.sample_len();
                let mut g = dy.to_vec();
                for b in 0..value.batch() {
                    for &(i, bit) in flips {
                        if usize::from(bit) == crate::bitfloat::SIGN_BIT {
                            g[b * per + i] = -g[b * per + i];
                        }
                    }
                }
                vec![(*x, g)]
            }
        }
    }
}
