//! Sequential models built from conv2d / linear / relu / flatten layers,
//! plus the binary checkpoint format.

use std::fmt;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::ops::{self, ConvGeometry};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ISDL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    Flatten,
}

impl LayerKind {
    fn tag(&self) -> u32 {
        match self {
            LayerKind::Conv2d { .. } => 0,
            LayerKind::Linear { .. } => 1,
            LayerKind::Relu => 2,
            LayerKind::Flatten => 3,
        }
    }

    pub fn has_weights(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::Linear { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Linear { .. } => "linear",
            LayerKind::Relu => "relu",
            LayerKind::Flatten => "flatten",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

impl Layer {
    pub fn relu() -> Self {
        Layer {
            kind: LayerKind::Relu,
            weight: None,
            bias: None,
        }
    }

    pub fn flatten() -> Self {
        Layer {
            kind: LayerKind::Flatten,
            weight: None,
            bias: None,
        }
    }

    /// `weight` is `[out, in]` row-major.
    pub fn linear(
        in_features: usize,
        out_features: usize,
        weight: Vec<f32>,
        bias: Option<Vec<f32>>,
    ) -> Result<Self> {
        Ok(Layer {
            kind: LayerKind::Linear {
                in_features,
                out_features,
            },
            weight: Some(Tensor::new(vec![out_features, in_features], weight)?),
            bias: bias
                .map(|b| Tensor::new(vec![out_features], b))
                .transpose()?,
        })
    }

    /// `weight` is `[out, in, k, k]` row-major.
    pub fn conv2d(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        weight: Vec<f32>,
        bias: Option<Vec<f32>>,
    ) -> Result<Self> {
        Ok(Layer {
            kind: LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            },
            weight: Some(Tensor::new(
                vec![out_channels, in_channels, kernel, kernel],
                weight,
            )?),
            bias: bias
                .map(|b| Tensor::new(vec![out_channels], b))
                .transpose()?,
        })
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init(kind: LayerKind, rng: &mut impl Rng) -> Result<Self> {
        let (wshape, fan_in, out) = match kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (
                vec![out_channels, in_channels, kernel, kernel],
                in_channels * kernel * kernel,
                out_channels,
            ),
            LayerKind::Linear {
                in_features,
                out_features,
            } => (vec![out_features, in_features], in_features, out_features),
            LayerKind::Relu | LayerKind::Flatten => {
                return Ok(Layer {
                    kind,
                    weight: None,
                    bias: None,
                })
            }
        };
        let bound = 1.0 / (fan_in as f32).sqrt();
        let n: usize = wshape.iter().product();
        let w = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        let b = (0..out).map(|_| rng.random_range(-bound..=bound)).collect();
        Ok(Layer {
            kind,
            weight: Some(Tensor::new(wshape, w)?),
            bias: Some(Tensor::new(vec![out], b)?),
        })
    }
}

/// Location of a per-sample output bit flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutputFlip {
    pub layer: usize,
    pub element: usize,
    pub bit: u8,
}

/// Node ids of a model forward recorded on a [`Graph`].
#[derive(Debug, Clone)]
pub struct Trace {
    pub input: NodeId,
    pub outputs: Vec<NodeId>,
    /// Per layer: `(weight, bias)` leaf nodes.
    pub params: Vec<(Option<NodeId>, Option<NodeId>)>,
}

impl Trace {
    pub fn logits(&self) -> NodeId {
        *self.outputs.last().unwrap_or(&self.input)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    output_shapes: Vec<Vec<usize>>,
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "input {:?}", self.input_shape)?;
        for (l, s) in self.layers.iter().zip(&self.output_shapes) {
            write!(f, " -> {} {:?}", l.kind.name(), s)?;
        }
        Ok(())
    }
}

fn conv_geometry(kind: &LayerKind, batch: usize, input: &[usize]) -> Option<ConvGeometry> {
    match *kind {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => Some(ConvGeometry {
            batch,
            in_channels,
            height: input[1],
            width: input[2],
            out_channels,
            kernel,
            stride,
            padding,
        }),
        _ => None,
    }
}

impl Model {
    /// Validates that consecutive layer shapes compose.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let mut shape = input_shape.clone();
        let mut output_shapes = Vec::with_capacity(layers.len());
        for (idx, layer) in layers.iter().enumerate() {
            shape = match layer.kind {
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    if shape.len() != 3 || shape[0] != in_channels {
                        return Err(Error::Shape(format!(
                            "layer {idx}: conv2d expects [{in_channels}, H, W], got {shape:?}"
                        )));
                    }
                    if stride == 0
                        || kernel == 0
                        || shape[1] + 2 * padding < kernel
                        || shape[2] + 2 * padding < kernel
                    {
                        return Err(Error::Shape(format!(
                            "layer {idx}: bad conv geometry for {shape:?}"
                        )));
                    }
                    let g = conv_geometry(&layer.kind, 1, &shape).expect("conv");
                    vec![out_channels, g.out_height(), g.out_width()]
                }
                LayerKind::Linear {
                    in_features,
                    out_features,
                } => {
                    if shape.iter().product::<usize>() != in_features {
                        return Err(Error::Shape(format!(
                            "layer {idx}: linear expects {in_features} features, got {shape:?}"
                        )));
                    }
                    vec![out_features]
                }
                LayerKind::Relu => shape,
                LayerKind::Flatten => vec![shape.iter().product()],
            };
            match (&layer.kind, &layer.weight) {
                (k, Some(w)) if k.has_weights() => {
                    let expected = match *k {
                        LayerKind::Conv2d {
                            in_channels,
                            out_channels,
                            kernel,
                            ..
                        } => vec![out_channels, in_channels, kernel, kernel],
                        LayerKind::Linear {
                            in_features,
                            out_features,
                        } => vec![out_features, in_features],
                        _ => unreachable!(),
                    };
                    if w.shape() != expected.as_slice() {
                        return Err(Error::Shape(format!(
                            "layer {idx}: weight shape {:?}, expected {expected:?}",
                            w.shape()
                        )));
                    }
                    if let Some(b) = &layer.bias {
                        if b.len() != expected[0] {
                            return Err(Error::Shape(format!(
                                "layer {idx}: bias length {}",
                                b.len()
                            )));
                        }
                    }
                }
                (k, None) if !k.has_weights() => {}
                _ => {
                    return Err(Error::Shape(format!(
                        "layer {idx}: parameters do not match kind"
                    )))
                }
            }
            output_shapes.push(shape.clone());
        }
        Ok(Model {
            input_shape,
            layers,
            output_shapes,
        })
    }

    /// Randomly initialised model from a list of layer kinds.
    pub fn init(input_shape: Vec<usize>, kinds: &[LayerKind], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = kinds
            .iter()
            .map(|&k| Layer::init(k, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Model::new(input_shape, layers)
    }

    /// conv-relu-conv-relu-flatten-linear-relu-linear over `[c, h, w]` inputs.
    pub fn small_cnn(
        input_shape: [usize; 3],
        channels: [usize; 2],
        hidden: usize,
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let [c, h, w] = input_shape;
        let k = 3;
        let (h1, w1) = (h - k + 1, w - k + 1);
        let (h2, w2) = ((h1 - k) / 2 + 1, (w1 - k) / 2 + 1);
        let kinds = [
            LayerKind::Conv2d {
                in_channels: c,
                out_channels: channels[0],
                kernel: k,
                stride: 1,
                padding: 0,
            },
            LayerKind::Relu,
            LayerKind::Conv2d {
                in_channels: channels[0],
                out_channels: channels[1],
                kernel: k,
                stride: 2,
                padding: 0,
            },
            LayerKind::Relu,
            LayerKind::Flatten,
            LayerKind::Linear {
                in_features: channels[1] * h2 * w2,
                out_features: hidden,
            },
            LayerKind::Relu,
            LayerKind::Linear {
                in_features: hidden,
                out_features: classes,
            },
        ];
        Model::init(input_shape.to_vec(), &kinds, seed)
    }

    /// Fully connected ReLU network.
    pub fn mlp(input_features: usize, hidden: &[usize], classes: usize, seed: u64) -> Result<Self> {
        let mut kinds = Vec::new();
        let mut prev = input_features;
        for &h in hidden {
            kinds.push(LayerKind::Linear {
                in_features: prev,
                out_features: h,
            });
            kinds.push(LayerKind::Relu);
            prev = h;
        }
        kinds.push(LayerKind::Linear {
            in_features: prev,
            out_features: classes,
        });
        Model::init(vec![input_features], &kinds, seed)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, idx: usize) -> Result<&Layer> {
        self.layers.get(idx).ok_or_else(|| {
            Error::Usage(format!(
                "layer {idx} out of range ({} layers)",
                self.layers.len()
            ))
        })
    }

    pub fn layer_mut(&mut self, idx: usize) -> Result<&mut Layer> {
        let n = self.layers.len();
        self.layers
            .get_mut(idx)
            .ok_or_else(|| Error::Usage(format!("layer {idx} out of range ({n} layers)")))
    }

    /// Per-sample output shape of each layer.
    pub fn output_shapes(&self) -> &[Vec<usize>] {
        &self.output_shapes
    }

    pub fn output_len(&self, layer: usize) -> usize {
        self.output_shapes[layer].iter().product()
    }

    pub fn classes(&self) -> usize {
        self.output_shapes.last().map_or(0, |s| s.iter().product())
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.weight.as_ref().map_or(0, Tensor::len) + l.bias.as_ref().map_or(0, Tensor::len)
            })
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weight.as_ref().is_none_or(Tensor::all_finite)
                && l.bias.as_ref().is_none_or(Tensor::all_finite)
        })
    }

    fn shaped_input(&self, batch: &Tensor) -> Result<Tensor> {
        let per: usize = self.input_shape.iter().product();
        if batch.shape().is_empty() || batch.sample_len() != per {
            return Err(Error::Shape(format!(
                "batch {:?} does not match model input {:?}",
                batch.shape(),
                self.input_shape
            )));
        }
        let mut shape = vec![batch.batch()];
        shape.extend(&self.input_shape);
        let mut t = batch.clone().reshape(shape)?;
        t.clear_grad();
        Ok(t)
    }

    fn apply_layer(&self, idx: usize, x: &Tensor) -> Tensor {
        let layer = &self.layers[idx];
        let batch = x.batch();
        let mut shape = vec![batch];
        shape.extend(&self.output_shapes[idx]);
        let data = match layer.kind {
            LayerKind::Conv2d { .. } => {
                let g = conv_geometry(&layer.kind, batch, &x.shape()[1..]).expect("conv");
                ops::conv2d_forward(
                    x.data(),
                    layer.weight.as_ref().expect("weights").data(),
                    layer.bias.as_ref().map(Tensor::data),
                    &g,
                )
            }
            LayerKind::Linear {
                in_features,
                out_features,
            } => ops::linear_forward(
                x.data(),
                batch,
                in_features,
                layer.weight.as_ref().expect("weights").data(),
                layer.bias.as_ref().map(Tensor::data),
                out_features,
            ),
            LayerKind::Relu => ops::relu_forward(x.data()),
            LayerKind::Flatten => x.data().to_vec(),
        };
        Tensor::new(shape, data).expect("validated shapes")
    }

    fn check_flips(&self, flips: &[OutputFlip]) -> Result<()> {
        for f in flips {
            if f.layer >= self.layers.len() || f.element >= self.output_len(f.layer) || f.bit > 31 {
                return Err(Error::Usage(format!("invalid output fault location {f:?}")));
            }
        }
        Ok(())
    }

    /// Logits `[batch, classes]`.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward_with_flips(batch, &[])
    }

    /// Forward pass with output bit flips applied after their layers.
    pub fn forward_with_flips(&self, batch: &Tensor, flips: &[OutputFlip]) -> Result<Tensor> {
        self.check_flips(flips)?;
        let mut x = self.shaped_input(batch)?;
        for idx in 0..self.layers.len() {
            x = self.apply_layer(idx, &x);
            apply_flips(&mut x, idx, flips);
        }
        Ok(x)
    }

    /// Every layer's output; the last entry holds the logits.
    pub fn forward_snapshot(&self, batch: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = self.shaped_input(batch)?;
        let mut acts = Vec::with_capacity(self.layers.len());
        for idx in 0..self.layers.len() {
            x = self.apply_layer(idx, &x);
            acts.push(x.clone());
        }
        Ok(acts)
    }

    /// Forward pass recorded on `graph`.
    ///
    /// Parameter leaves are differentiable iff `params_require_grad`; the
    /// input leaf iff `input_requires_grad`.
    pub fn record(
        &self,
        graph: &mut Graph,
        batch: &Tensor,
        flips: &[OutputFlip],
        params_require_grad: bool,
        input_requires_grad: bool,
    ) -> Result<Trace> {
        self.record_inner(
            graph,
            batch,
            flips,
            None,
            params_require_grad,
            input_requires_grad,
        )
    }

    /// Training-time recording with parameter gradients, where flipped
    /// outputs saturate at `±limit` (see [`Graph::bit_flip_saturating`]).
    pub fn record_saturating(
        &self,
        graph: &mut Graph,
        batch: &Tensor,
        flips: &[OutputFlip],
        limit: f32,
    ) -> Result<Trace> {
        self.record_inner(graph, batch, flips, Some(limit), true, false)
    }

    fn record_inner(
        &self,
        graph: &mut Graph,
        batch: &Tensor,
        flips: &[OutputFlip],
        limit: Option<f32>,
        params_require_grad: bool,
        input_requires_grad: bool,
    ) -> Result<Trace> {
        self.check_flips(flips)?;
        let input = graph.input(
            self.shaped_input(batch)?
                .with_requires_grad(input_requires_grad),
        );
        let mut x = input;
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut params = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            let leaf = |g: &mut Graph, t: &Option<Tensor>| {
                t.as_ref().map(|t| {
                    let mut t = t.clone();
                    t.clear_grad();
                    g.input(t.with_requires_grad(params_require_grad))
                })
            };
            let w = leaf(graph, &layer.weight);
            let b = leaf(graph, &layer.bias);
            params.push((w, b));
            x = match layer.kind {
                LayerKind::Conv2d {
                    stride, padding, ..
                } => graph.conv2d(x, w.expect("weights"), b, stride, padding)?,
                LayerKind::Linear { .. } => graph.linear(x, w.expect("weights"), b)?,
                LayerKind::Relu => graph.relu(x),
                LayerKind::Flatten => {
                    let batch = graph.value(x).batch();
                    graph.reshape(x, vec![batch, self.output_len(idx)])?
                }
            };
            let here: Vec<(usize, u8)> = flips
                .iter()
                .filter(|f| f.layer == idx)
                .map(|f| (f.element, f.bit))
                .collect();
            if !here.is_empty() {
                x = match limit {
                    Some(l) => graph.bit_flip_saturating(x, &here, l)?,
                    None => graph.bit_flip(x, &here)?,
                };
            }
            outputs.push(x);
        }
        Ok(Trace {
            input,
            outputs,
            params,
        })
    }

    /// Forward pass carrying a tangent (directional derivative) alongside
    /// the values. Returns `(outputs, tangents)` per layer.
    pub fn forward_tangent(
        &self,
        batch: &Tensor,
        direction: &Tensor,
    ) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let mut x = self.shaped_input(batch)?;
        let mut dx = self.shaped_input(direction)?;
        if x.shape() != dx.shape() {
            return Err(Error::Shape(
                "tangent batch differs from input batch".into(),
            ));
        }
        let mut outs = Vec::with_capacity(self.layers.len());
        let mut tans = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            let batch = x.batch();
            let mut shape = vec![batch];
            shape.extend(&self.output_shapes[idx]);
            let dy = match layer.kind {
                LayerKind::Conv2d { .. } => {
                    let g = conv_geometry(&layer.kind, batch, &x.shape()[1..]).expect("conv");
                    ops::conv2d_forward(
                        dx.data(),
                        layer.weight.as_ref().expect("weights").data(),
                        None,
                        &g,
                    )
                }
                LayerKind::Linear {
                    in_features,
                    out_features,
                } => ops::linear_forward(
                    dx.data(),
                    batch,
                    in_features,
                    layer.weight.as_ref().expect("weights").data(),
                    None,
                    out_features,
                ),
                LayerKind::Relu => x
                    .data()
                    .iter()
                    .zip(dx.data())
                    .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
                    .collect(),
                LayerKind::Flatten => dx.data().to_vec(),
            };
            let y = self.apply_layer(idx, &x);
            dx = Tensor::new(shape, dy)?;
            x = y;
            outs.push(x.clone());
            tans.push(dx.clone());
        }
        Ok((outs, tans))
    }

    /// Copies gradients from a finished backward pass into parameter tensors.
    pub fn store_grads(
        &mut self,
        trace: &Trace,
        grads: &mut crate::graph::Gradients,
    ) -> Result<()> {
        for (layer, &(w, b)) in self.layers.iter_mut().zip(&trace.params) {
            if let (Some(t), Some(id)) = (layer.weight.as_mut(), w) {
                let g = grads.take(id).unwrap_or_else(|| vec![0.0; t.len()]);
                t.set_grad(g)?;
            }
            if let (Some(t), Some(id)) = (layer.bias.as_mut(), b) {
                let g = grads.take(id).unwrap_or_else(|| vec![0.0; t.len()]);
                t.set_grad(g)?;
            }
        }
        Ok(())
    }

    /// Mutable access to every parameter tensor, weights before biases per layer.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn clear_grads(&mut self) {
        self.params_mut().for_each(Tensor::clear_grad);
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        put_u32(&mut w, CHECKPOINT_VERSION)?;
        put_u32(&mut w, self.input_shape.len() as u32)?;
        for &d in &self.input_shape {
            put_u32(&mut w, d as u32)?;
        }
        put_u32(&mut w, self.layers.len() as u32)?;
        for layer in &self.layers {
            put_u32(&mut w, layer.kind.tag())?;
            match layer.kind {
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    for v in [in_channels, out_channels, kernel, stride, padding] {
                        put_u32(&mut w, v as u32)?;
                    }
                }
                LayerKind::Linear {
                    in_features,
                    out_features,
                } => {
                    put_u32(&mut w, in_features as u32)?;
                    put_u32(&mut w, out_features as u32)?;
                }
                LayerKind::Relu | LayerKind::Flatten => {}
            }
            for t in [&layer.weight, &layer.bias] {
                match t {
                    None => w.write_all(&[0])?,
                    Some(t) => {
                        w.write_all(&[1])?;
                        put_u32(&mut w, t.shape().len() as u32)?;
                        for &d in t.shape() {
                            put_u32(&mut w, d as u32)?;
                        }
                        for v in t.data() {
                            w.write_all(&v.to_le_bytes())?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read_checkpoint<R: Read>(r: R) -> Result<Self> {
        let mut r = ByteReader::new(r);
        let magic = r.bytes(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(
                0,
                format!("expected checkpoint magic \"ISDL\", found {magic:?}"),
            ));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                4,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let rank = r.u32()? as usize;
        let input_shape = (0..rank)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let at = r.offset;
            let kind = match r.u32()? {
                0 => LayerKind::Conv2d {
                    in_channels: r.u32()? as usize,
                    out_channels: r.u32()? as usize,
                    kernel: r.u32()? as usize,
                    stride: r.u32()? as usize,
                    padding: r.u32()? as usize,
                },
                1 => LayerKind::Linear {
                    in_features: r.u32()? as usize,
                    out_features: r.u32()? as usize,
                },
                2 => LayerKind::Relu,
                3 => LayerKind::Flatten,
                tag => return Err(Error::format(at, format!("unknown layer tag {tag}"))),
            };
            let mut params = [None, None];
            for slot in &mut params {
                let at = r.offset;
                match r.bytes(1)?[0] {
                    0 => {}
                    1 => {
                        let rank = r.u32()? as usize;
                        let shape = (0..rank)
                            .map(|_| r.u32().map(|v| v as usize))
                            .collect::<Result<Vec<_>>>()?;
                        let n: usize = shape.iter().product();
                        let raw = r.bytes(n * 4)?;
                        let data = raw
                            .chunks_exact(4)
                            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                            .collect();
                        *slot = Some(Tensor::new(shape, data)?);
                    }
                    flag => {
                        return Err(Error::format(
                            at,
                            format!("bad parameter presence flag {flag}"),
                        ))
                    }
                }
            }
            let [weight, bias] = params;
            layers.push(Layer { kind, weight, bias });
        }
        let at = r.offset;
        Model::new(input_shape, layers).map_err(|e| Error::format(at, e.to_string()))
    }

    /// SHA-256 of the checkpoint encoding, hex.
    pub fn checksum_hex(&self) -> String {
        let digest = Sha256::digest(self.to_checkpoint_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// First 8 bytes of the checkpoint SHA-256 as a little-endian integer.
    pub fn checksum(&self) -> u64 {
        let digest = Sha256::digest(self.to_checkpoint_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(b)
    }
}

fn apply_flips(x: &mut Tensor, layer: usize, flips: &[OutputFlip]) {
    if flips.iter().all(|f| f.layer != layer) {
        return;
    }
    let per = x.sample_len();
    let batch = x.batch();
    let data = x.data_mut();
    for f in flips.iter().filter(|f| f.layer == layer) {
        for b in 0..batch {
            let v = &mut data[b * per + f.element];
            *v = crate::bitfloat::flip_bit(*v, f.bit);
        }
    }
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

/// Little-endian reader that tracks its byte offset for error messages.
pub(crate) struct ByteReader<R> {
    inner: R,
    pub offset: u64,
}

impl<R: Read> ByteReader<R> {
    pub fn new(inner: R) -> Self {
        ByteReader { inner, offset: 0 }
    }

    pub fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = Vec::with_capacity(n.min(1 << 24));
        let got = (&mut self.inner).take(n as u64).read_to_end(&mut buf)?;
        if got != n {
            return Err(Error::format(
                self.offset + got as u64,
                format!("truncated: needed {n} bytes, found {got}"),
            ));
        }
        self.offset += n as u64;
        Ok(buf)
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Raw read without the exact-length requirement.
    pub fn inner_read(&mut self, buf: &mut [u8]) -> Result<usize> {
        let n = self.inner.read(buf)?;
        self.offset += n as u64;
        Ok(n)
    }

    pub fn u64(&mut self) -> Result<u64> {
        let b = self.bytes(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(&b);
        Ok(u64::from_le_bytes(a))
    }
}
