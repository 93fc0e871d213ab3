//! Neuron-output conductance and weight-gradient attributions.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fault_model::{element_count, eligible_layers, TargetKind};
use crate::graph::Graph;
use crate::model::{ByteReader, Model};
use crate::ops;
use crate::rng::stream;
use crate::tensor::Tensor;

const ATTRIBUTION_MAGIC: &[u8; 4] = b"ISAT";
const ATTRIBUTION_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Zeros,
    DatasetMean,
}

/// Reference input `x'` for path integrals.
#[derive(Debug, Clone, PartialEq)]
pub struct Baseline {
    pub kind: BaselineKind,
    /// One sample, `[1, ...input_shape]`.
    pub tensor: Tensor,
}

impl Baseline {
    pub fn zeros(model: &Model) -> Self {
        let mut shape = vec![1];
        shape.extend(model.input_shape());
        Baseline {
            kind: BaselineKind::Zeros,
            tensor: Tensor::zeros(shape),
        }
    }

    pub fn dataset_mean(data: &Dataset) -> Self {
        Baseline {
            kind: BaselineKind::DatasetMean,
            tensor: data.mean_image(),
        }
    }

    pub fn build(kind: BaselineKind, model: &Model, data: &Dataset) -> Self {
        match kind {
            BaselineKind::Zeros => Self::zeros(model),
            BaselineKind::DatasetMean => Self::dataset_mean(data),
        }
    }
}

/// Which logit is attributed for each input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetClass {
    Predicted,
    True,
}

pub fn predicted_classes(model: &Model, inputs: &Tensor) -> Result<Vec<usize>> {
    let logits = model.forward(inputs)?;
    Ok(logits
        .data()
        .chunks(model.classes())
        .map(ops::argmax)
        .collect())
}

fn check_layer(model: &Model, layer: usize) -> Result<()> {
    if layer >= model.layers().len() {
        return Err(Error::Usage(format!(
            "layer {layer} out of range for a {}-layer model",
            model.layers().len()
        )));
    }
    Ok(())
}

/// Signed conductance of each output element of each layer in `layers`,
/// per input: `[n, output_len]` per layer.
///
/// The path integral uses the midpoint rule with `steps` points. At each
/// point the directional derivative of the layer output along `x - x'` is
/// carried forward as a tangent and `dF/dy` comes from one reverse pass.
pub fn conductance_signed(
    model: &Model,
    layers: &[usize],
    inputs: &Tensor,
    baseline: &Baseline,
    steps: usize,
    targets: &[usize],
) -> Result<Vec<Tensor>> {
    if steps == 0 {
        return Err(Error::Usage(
            "conductance needs at least one integration step".into(),
        ));
    }
    for &l in layers {
        check_layer(model, l)?;
    }
    let n = inputs.batch();
    if targets.len() != n {
        return Err(Error::Shape(format!(
            "{} targets for {n} inputs",
            targets.len()
        )));
    }
    let per = inputs.sample_len();
    if baseline.tensor.len() != per {
        return Err(Error::Shape(format!(
            "baseline {:?} does not match input {:?}",
            baseline.tensor.shape(),
            inputs.shape()
        )));
    }
    let base = baseline.tensor.data();
    let mut direction = inputs.clone();
    direction.clear_grad();
    for row in direction.data_mut().chunks_mut(per) {
        row.iter_mut().zip(base).for_each(|(d, b)| *d -= b);
    }

    let mut acc: Vec<Vec<f32>> = layers
        .iter()
        .map(|&l| vec![0.0; n * model.output_len(l)])
        .collect();
    let scale = 1.0 / steps as f32;
    for m in 0..steps {
        let alpha = (m as f32 + 0.5) / steps as f32;
        let mut point = direction.clone();
        for row in point.data_mut().chunks_mut(per) {
            row.iter_mut()
                .zip(base)
                .for_each(|(d, b)| *d = b + alpha * *d);
        }
        let (_, tangents) = model.forward_tangent(&point, &direction)?;
        let mut graph = Graph::new();
        let trace = model.record(&mut graph, &point, &[], false, true)?;
        let f = graph.pick_sum(trace.logits(), targets)?;
        let grads = graph.backward(f)?;
        for (a, &l) in acc.iter_mut().zip(layers) {
            let dfdy = grads.get(trace.outputs[l]).expect("input is tracked");
            for ((c, g), t) in a.iter_mut().zip(dfdy).zip(tangents[l].data()) {
                *c += scale * g * t;
            }
        }
    }
    layers
        .iter()
        .zip(acc)
        .map(|(&l, a)| Tensor::new(vec![n, model.output_len(l)], a))
        .collect()
}

/// Mean absolute conductance of `layer`'s outputs over `inputs`, attributing
/// each input's predicted-class logit.
pub fn conductance(
    model: &Model,
    layer: usize,
    inputs: &Tensor,
    baseline: &Baseline,
    steps: usize,
) -> Result<Vec<f32>> {
    let targets = predicted_classes(model, inputs)?;
    let signed = conductance_signed(model, &[layer], inputs, baseline, steps, &targets)?;
    Ok(mean_abs(&signed[0]))
}

fn mean_abs(per_input: &Tensor) -> Vec<f32> {
    let n = per_input.batch();
    let width = per_input.sample_len();
    let mut out = vec![0.0f32; width];
    for row in per_input.data().chunks(width) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v.abs());
    }
    out.iter_mut().for_each(|o| *o /= n.max(1) as f32);
    out
}

/// `sum_i d logit_{t_i}(x_i) / dW` for every weight tensor, before any
/// absolute value. Entries for layers without weights are `None`.
pub fn weight_gradients_signed(
    model: &Model,
    inputs: &Tensor,
    targets: &[usize],
    batch_size: usize,
) -> Result<Vec<Option<Vec<f32>>>> {
    let n = inputs.batch();
    if n == 0 {
        return Err(Error::Usage(
            "weight attribution needs at least one input".into(),
        ));
    }
    if targets.len() != n {
        return Err(Error::Shape(format!(
            "{} targets for {n} inputs",
            targets.len()
        )));
    }
    let mut acc: Vec<Option<Vec<f32>>> = model
        .layers()
        .iter()
        .map(|l| l.weight.as_ref().map(|w| vec![0.0; w.len()]))
        .collect();
    for start in (0..n).step_by(batch_size.max(1)) {
        let end = (start + batch_size.max(1)).min(n);
        let mut graph = Graph::new();
        let trace = model.record(
            &mut graph,
            &inputs.slice_batch(start, end),
            &[],
            true,
            false,
        )?;
        let f = graph.pick_sum(trace.logits(), &targets[start..end])?;
        let grads = graph.backward(f)?;
        for (a, &(w, _)) in acc.iter_mut().zip(&trace.params) {
            if let (Some(a), Some(w)) = (a.as_mut(), w) {
                if let Some(g) = grads.get(w) {
                    a.iter_mut().zip(g).for_each(|(s, v)| *s += v);
                }
            }
        }
    }
    Ok(acc)
}

/// `|sum_i d logit_pred(x_i) / dw_j|` for the weights of `layer`.
pub fn weight_attribution(model: &Model, layer: usize, inputs: &Tensor) -> Result<Vec<f32>> {
    check_layer(model, layer)?;
    if model.layers()[layer].weight.is_none() {
        return Err(Error::Usage(format!(
            "layer {layer} ({}) has no weights to attribute",
            model.layers()[layer].kind.name()
        )));
    }
    let targets = predicted_classes(model, inputs)?;
    let signed = weight_gradients_signed(model, inputs, &targets, 256)?;
    Ok(signed[layer]
        .as_ref()
        .expect("weights")
        .iter()
        .map(|v| v.abs())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributionConfig {
    pub steps: usize,
    pub baseline: BaselineKind,
    pub target_class: TargetClass,
    /// Inputs used for conductance.
    pub output_inputs: usize,
    /// Inputs used for weight gradients; `None` uses the whole dataset.
    pub weight_inputs: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            steps: 32,
            baseline: BaselineKind::Zeros,
            target_class: TargetClass::Predicted,
            output_inputs: 256,
            weight_inputs: None,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Scores for every eligible layer of one target kind.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    pub target: TargetKind,
    pub baseline: BaselineKind,
    pub steps: u32,
    pub inputs: u32,
    pub seed: u64,
    pub model_checksum: u64,
    pub layers: Vec<(usize, Vec<f32>)>,
}

impl AttributionMap {
    pub fn scores(&self, layer: usize) -> Option<&[f32]> {
        self.layers
            .iter()
            .find(|(l, _)| *l == layer)
            .map(|(_, s)| s.as_slice())
    }

    /// Layer with the largest single score, and that element.
    pub fn argmax(&self) -> Option<(usize, usize)> {
        let mut best: Option<(usize, usize, f32)> = None;
        for (l, s) in &self.layers {
            for (e, &v) in s.iter().enumerate() {
                if best.is_none_or(|(_, _, b)| v > b) {
                    best = Some((*l, e, v));
                }
            }
        }
        best.map(|(l, e, _)| (l, e))
    }

    /// Verifies that this map describes `model`'s eligible layers for `target`.
    pub fn check_against(&self, model: &Model, target: TargetKind) -> Result<()> {
        if self.target != target {
            return Err(Error::Config(format!(
                "attribution targets {} but the code targets {target}",
                self.target
            )));
        }
        if self.model_checksum != model.checksum() {
            return Err(Error::Config(
                "attribution was computed for a different model".into(),
            ));
        }
        let expected = eligible_layers(model, target);
        let got: Vec<usize> = self.layers.iter().map(|(l, _)| *l).collect();
        if got != expected {
            return Err(Error::Integrity(format!(
                "attribution covers layers {got:?}, expected {expected:?}"
            )));
        }
        for (l, s) in &self.layers {
            if s.len() != element_count(model, *l, target)? {
                return Err(Error::Integrity(format!("layer {l}: {} scores", s.len())));
            }
            if s.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Integrity(format!(
                    "layer {l}: scores must be finite and nonnegative"
                )));
            }
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(ATTRIBUTION_MAGIC)?;
        w.write_all(&ATTRIBUTION_VERSION.to_le_bytes())?;
        w.write_all(&[match self.target {
            TargetKind::NeuronOutput => 0,
            TargetKind::NeuronWeight => 1,
        }])?;
        w.write_all(&[match self.baseline {
            BaselineKind::Zeros => 0,
            BaselineKind::DatasetMean => 1,
        }])?;
        w.write_all(&self.model_checksum.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.steps.to_le_bytes())?;
        w.write_all(&self.inputs.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for (l, s) in &self.layers {
            w.write_all(&(*l as u32).to_le_bytes())?;
            w.write_all(&(s.len() as u32).to_le_bytes())?;
            for v in s {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("in-memory write");
        buf
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut r = ByteReader::new(r);
        if r.bytes(4)? != ATTRIBUTION_MAGIC {
            return Err(Error::format(0, "bad magic; expected \"ISAT\""));
        }
        let at = r.offset;
        let version = r.u32()?;
        if version != ATTRIBUTION_VERSION {
            return Err(Error::format(
                at,
                format!("unsupported attribution version {version}"),
            ));
        }
        let at = r.offset;
        let target = match r.bytes(1)?[0] {
            0 => TargetKind::NeuronOutput,
            1 => TargetKind::NeuronWeight,
            t => return Err(Error::format(at, format!("unknown target kind tag {t}"))),
        };
        let at = r.offset;
        let baseline = match r.bytes(1)?[0] {
            0 => BaselineKind::Zeros,
            1 => BaselineKind::DatasetMean,
            t => return Err(Error::format(at, format!("unknown baseline tag {t}"))),
        };
        let model_checksum = r.u64()?;
        let seed = r.u64()?;
        let steps = r.u32()?;
        let inputs = r.u32()?;
        let count = r.u32()?;
        let mut layers = Vec::new();
        for _ in 0..count {
            let l = r.u32()? as usize;
            let len = r.u32()? as usize;
            let raw = r.bytes(len * 4)?;
            let scores = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            layers.push((l, scores));
        }
        let mut trailing = [0u8; 1];
        if r.inner_read(&mut trailing)? != 0 {
            return Err(Error::format(
                r.offset,
                "trailing bytes after attribution data",
            ));
        }
        Ok(AttributionMap {
            target,
            baseline,
            steps,
            inputs,
            seed,
            model_checksum,
            layers,
        })
    }
}

fn choose_rows(len: usize, limit: Option<usize>, seed: u64) -> Vec<usize> {
    let mut rows: Vec<usize> = (0..len).collect();
    match limit {
        Some(k) if k < len => {
            rows.shuffle(&mut stream(seed, 0));
            rows.truncate(k);
            rows.sort_unstable();
            rows
        }
        _ => rows,
    }
}

/// Attribution over every eligible layer for `target`.
pub fn attribute_all(
    model: &Model,
    data: &Dataset,
    target: TargetKind,
    config: &AttributionConfig,
) -> Result<AttributionMap> {
    if data.is_empty() {
        return Err(Error::Usage("attribution needs a non-empty dataset".into()));
    }
    let layers = eligible_layers(model, target);
    let limit = match target {
        TargetKind::NeuronOutput => Some(config.output_inputs.max(1)),
        TargetKind::NeuronWeight => config.weight_inputs,
    };
    let rows = choose_rows(data.len(), limit, config.seed);
    let sub = data.subset(&rows, data.split);
    let targets = match config.target_class {
        TargetClass::Predicted => predicted_classes(model, &sub.images)?,
        TargetClass::True => sub.labels.clone(),
    };
    let baseline = Baseline::build(config.baseline, model, data);
    let scores: Vec<Vec<f32>> = match target {
        TargetKind::NeuronWeight => {
            let signed = weight_gradients_signed(model, &sub.images, &targets, config.batch_size)?;
            layers
                .iter()
                .map(|&l| {
                    signed[l]
                        .as_ref()
                        .expect("weights")
                        .iter()
                        .map(|v| v.abs())
                        .collect()
                })
                .collect()
        }
        TargetKind::NeuronOutput => {
            let mut sums: Vec<Vec<f32>> = layers
                .iter()
                .map(|&l| vec![0.0; model.output_len(l)])
                .collect();
            let bs = config.batch_size.max(1);
            for start in (0..sub.len()).step_by(bs) {
                let end = (start + bs).min(sub.len());
                let signed = conductance_signed(
                    model,
                    &layers,
                    &sub.images.slice_batch(start, end),
                    &baseline,
                    config.steps,
                    &targets[start..end],
                )?;
                for (s, t) in sums.iter_mut().zip(&signed) {
                    for row in t.data().chunks(t.sample_len()) {
                        s.iter_mut().zip(row).for_each(|(a, v)| *a += v.abs());
                    }
                }
            }
            for s in &mut sums {
                s.iter_mut().for_each(|a| *a /= sub.len() as f32);
            }
            sums
        }
    };
    for (l, s) in layers.iter().zip(&scores) {
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "attribution scores of layer {l} are not finite"
            )));
        }
    }
    Ok(AttributionMap {
        target,
        baseline: config.baseline,
        steps: if target == TargetKind::NeuronOutput {
            config.steps as u32
        } else {
            0
        },
        inputs: rows.len() as u32,
        seed: config.seed,
        model_checksum: model.checksum(),
        layers: layers.into_iter().zip(scores).collect(),
    })
}
