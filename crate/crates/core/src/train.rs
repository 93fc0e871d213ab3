//! Optimizers, the training loop and accuracy evaluation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Model, OutputFlip};
use crate::ops;
use crate::rng::stream;

const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Bound on each gradient entry while faults are active.
    pub fault_grad_clamp: f32,
    /// Magnitude at which flipped outputs saturate during training.
    pub fault_saturation: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            lr: 0.001,
            batch_size: 64,
            epochs: 30,
            seed: 0,
            fault_grad_clamp: 1.0,
            fault_saturation: 100.0,
        }
    }
}

const ADAM_BETA1: f32 = 0.9;
const ADAM_BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

#[derive(Debug, Clone)]
enum OptimizerState {
    Sgd,
    Adam {
        m: Vec<Vec<f32>>,
        v: Vec<Vec<f32>>,
        t: i32,
    },
}

/// A bit held at its faulted level across optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StuckWeightBit {
    pub layer: usize,
    pub element: usize,
    pub bit: u8,
    pub level: bool,
}

impl StuckWeightBit {
    /// Fault that sets `bit` of the weight's current pattern to its complement.
    pub fn flipping(model: &Model, layer: usize, element: usize, bit: u8) -> Result<Self> {
        let w = model
            .layer(layer)?
            .weight
            .as_ref()
            .ok_or_else(|| Error::Usage(format!("layer {layer} has no weights")))?;
        let v = *w.data().get(element).ok_or_else(|| {
            Error::Usage(format!("weight {element} out of range in layer {layer}"))
        })?;
        if bit > 31 {
            return Err(Error::Usage(format!("bit {bit} out of range")));
        }
        Ok(StuckWeightBit {
            layer,
            element,
            bit,
            level: (v.to_bits() >> bit) & 1 == 0,
        })
    }

    pub fn apply(&self, model: &mut Model) {
        let Ok(layer) = model.layer_mut(self.layer) else {
            return;
        };
        if let Some(v) = layer
            .weight
            .as_mut()
            .and_then(|w| w.data_mut().get_mut(self.element))
        {
            let mask = 1u32 << self.bit;
            let raw = if self.level {
                v.to_bits() | mask
            } else {
                v.to_bits() & !mask
            };
            *v = f32::from_bits(raw);
        }
    }
}

/// Faults held active while training.
#[derive(Debug, Clone, Default)]
pub struct TrainingFaults {
    pub outputs: Vec<OutputFlip>,
    pub weights: Vec<StuckWeightBit>,
}

impl TrainingFaults {
    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty() && self.weights.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f32,
    pub train_accuracy: f64,
    pub eval_accuracy: Option<f64>,
    /// Samples that contributed no gradient because faults made their
    /// logits NaN.
    pub skipped_samples: usize,
}

/// Stateful training loop; one call to [`Trainer::run_epoch`] per epoch.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    state: OptimizerState,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: &Model, config: TrainConfig) -> Self {
        let state = match config.optimizer {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam => OptimizerState::Adam {
                m: model.params().map(|p| vec![0.0; p.len()]).collect(),
                v: model.params().map(|p| vec![0.0; p.len()]).collect(),
                t: 0,
            },
        };
        Trainer {
            config,
            state,
            epoch: 0,
        }
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// One pass over `data` in a seeded per-epoch shuffle order.
    ///
    /// With faults active the lenient cross-entropy is used (see
    /// [`Graph::softmax_cross_entropy_lenient`]), batches with a non-finite
    /// loss are skipped, and
    /// gradients are sanitised (NaN to 0, entries clamped to
    /// `fault_grad_clamp`). Without faults any of these is an error.
    pub fn run_epoch(
        &mut self,
        model: &mut Model,
        data: &Dataset,
        faults: &TrainingFaults,
    ) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(Error::Usage("training set is empty".into()));
        }
        if self.config.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if let Some(&bad) = data.labels.iter().find(|&&l| l >= model.classes()) {
            return Err(Error::Usage(format!(
                "label {bad} outside model's {} classes",
                model.classes()
            )));
        }
        let faulted = !faults.is_empty();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream(self.config.seed, self.epoch as u64));
        for w in &faults.weights {
            w.apply(model);
        }
        let (mut loss_sum, mut correct, mut counted, mut skipped) =
            (0.0f32, 0usize, 0usize, 0usize);
        for (step, rows) in order.chunks(self.config.batch_size).enumerate() {
            let batch = data.images.gather_batch(rows);
            let labels: Vec<usize> = rows.iter().map(|&r| data.labels[r]).collect();
            let mut graph = Graph::new();
            let trace = model.record_saturating(
                &mut graph,
                &batch,
                &faults.outputs,
                self.config.fault_saturation,
            )?;
            let logits = graph.value(trace.logits());
            let classes = model.classes();
            correct += logits
                .data()
                .chunks(classes)
                .zip(&labels)
                .filter(|(row, &l)| ops::argmax(row) == l)
                .count();
            let (loss, kept, used) = if faulted {
                let (id, ce) = graph.softmax_cross_entropy_lenient(trace.logits(), &labels)?;
                (id, ce.finite_rows, ce.grad_rows)
            } else {
                (
                    graph.softmax_cross_entropy(trace.logits(), &labels)?,
                    rows.len(),
                    rows.len(),
                )
            };
            let loss_value = graph.value(loss).data()[0];
            if faulted && (used == 0 || !loss_value.is_finite()) {
                skipped += rows.len();
                continue;
            }
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss is {loss_value} at epoch {} step {step}",
                    self.epoch
                )));
            }
            skipped += rows.len() - used;
            counted += kept;
            loss_sum += loss_value * kept as f32;
            let mut grads = graph.backward(loss)?;
            model.store_grads(&trace, &mut grads)?;
            if faulted {
                self.sanitize_grads(model);
            }
            self.step(model);
            for w in &faults.weights {
                w.apply(model);
            }
            let faulted_at = |l: usize, e: usize| {
                faults
                    .weights
                    .iter()
                    .any(|w| w.layer == l && w.element == e)
            };
            if let Some((layer, what)) = first_non_finite(model, &faulted_at) {
                return Err(Error::NonFinite(format!(
                    "non-finite {what} in layer {layer} after epoch {} step {step}",
                    self.epoch
                )));
            }
        }
        model.clear_grads();
        let stats = EpochStats {
            epoch: self.epoch,
            loss: if counted > 0 {
                loss_sum / counted as f32
            } else {
                f32::NAN
            },
            train_accuracy: correct as f64 / data.len() as f64,
            eval_accuracy: None,
            skipped_samples: skipped,
        };
        self.epoch += 1;
        Ok(stats)
    }

    fn sanitize_grads(&self, model: &mut Model) {
        let c = self.config.fault_grad_clamp;
        for p in model.params_mut() {
            if let Some(g) = p.grad() {
                let clean: Vec<f32> = g
                    .iter()
                    .map(|&v| if v.is_nan() { 0.0 } else { v.clamp(-c, c) })
                    .collect();
                p.set_grad(clean).expect("same length");
            }
        }
    }

    fn step(&mut self, model: &mut Model) {
        let lr = self.config.lr;
        match &mut self.state {
            OptimizerState::Sgd => {
                for p in model.params_mut() {
                    if let Some(g) = p.grad().map(<[f32]>::to_vec) {
                        p.data_mut()
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(w, gi)| *w -= lr * gi);
                    }
                }
            }
            OptimizerState::Adam { m, v, t } => {
                *t += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(*t);
                let bc2 = 1.0 - ADAM_BETA2.powi(*t);
                for ((p, m), v) in model.params_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                    let Some(g) = p.grad().map(<[f32]>::to_vec) else {
                        continue;
                    };
                    for (((w, gi), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(&g)
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *w -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

fn first_non_finite(
    model: &Model,
    faulted: &dyn Fn(usize, usize) -> bool,
) -> Option<(usize, &'static str)> {
    for (idx, layer) in model.layers().iter().enumerate() {
        if let Some(w) = &layer.weight {
            if w.data()
                .iter()
                .enumerate()
                .any(|(e, v)| !v.is_finite() && !faulted(idx, e))
            {
                return Some((idx, "weight"));
            }
        }
        if let Some(b) = &layer.bias {
            if !b.all_finite() {
                return Some((idx, "bias"));
            }
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    pub fn eval_accuracies(&self) -> Vec<f64> {
        self.epochs.iter().filter_map(|e| e.eval_accuracy).collect()
    }
}

/// Trains `model` in place. With `eval` given, its accuracy is logged per epoch.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    eval: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    let mut trainer = Trainer::new(model, config.clone());
    let mut epochs = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let mut stats = trainer.run_epoch(model, data, &TrainingFaults::default())?;
        if let Some(e) = eval {
            stats.eval_accuracy = Some(evaluate(model, e)?);
        }
        log::debug!(
            "epoch {} loss {:.4} acc {:.4}",
            stats.epoch,
            stats.loss,
            stats.train_accuracy
        );
        epochs.push(stats);
    }
    Ok(TrainLog { epochs })
}

/// Result of scoring a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub correct: usize,
    pub total: usize,
    /// Some sample produced a NaN logit, so its argmax fell back to the
    /// lowest-index rule.
    pub poisoned: bool,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// Top-1 accuracy with output flips active on every forward pass.
pub fn evaluate_detailed(
    model: &Model,
    data: &Dataset,
    flips: &[OutputFlip],
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    let classes = model.classes();
    let mut correct = 0;
    let mut poisoned = false;
    for start in (0..data.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(data.len());
        let (x, labels) = data.batch(start, end);
        let logits = model.forward_with_flips(&x, flips)?;
        for (row, &label) in logits.data().chunks(classes).zip(labels) {
            poisoned |= row.iter().any(|v| v.is_nan());
            if ops::argmax(row) == label {
                correct += 1;
            }
        }
    }
    Ok(Evaluation {
        correct,
        total: data.len(),
        poisoned,
    })
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    evaluate_detailed(model, data, &[]).map(|e| e.accuracy())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, Split};
    use crate::model::Layer;
    use crate::tensor::Tensor;

    fn constant_class_zero() -> Model {
        Model::new(
            vec![2],
            vec![Layer::linear(2, 2, vec![0.0; 4], Some(vec![1.0, 0.0])).unwrap()],
        )
        .unwrap()
    }

    fn dataset(labels: Vec<usize>) -> Dataset {
        let n = labels.len();
        Dataset::new(Tensor::zeros(vec![n, 1, 1, 2]), labels, 2, Split::Test).unwrap()
    }

    #[test]
    fn constant_predictor_accuracy() {
        let m = constant_class_zero();
        assert_eq!(evaluate(&m, &dataset(vec![0; 5])).unwrap(), 1.0);
        assert_eq!(evaluate(&m, &dataset(vec![1; 5])).unwrap(), 0.0);
        assert!(matches!(
            evaluate(&m, &dataset(vec![])),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn hand_built_three_of_four() {
        // Identity logits: sample i has input e_{c}, predicted class c.
        let m = Model::new(
            vec![2],
            vec![Layer::linear(2, 2, vec![1., 0., 0., 1.], None).unwrap()],
        )
        .unwrap();
        let x = Tensor::new(vec![4, 1, 1, 2], vec![1., 0., 0., 1., 2., 1., 0., 3.]).unwrap();
        let ds = Dataset::new(x, vec![0, 1, 1, 1], 2, Split::Test).unwrap();
        assert_eq!(evaluate(&m, &ds).unwrap(), 0.75);
    }

    #[test]
    fn zero_epochs_keeps_initialisation() {
        let data = synth_blobs(2, 20, &[2], 0.1, 0).unwrap();
        let mut m = Model::mlp(2, &[4], 2, 3).unwrap();
        let before = m.clone();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        train(&mut m, &data, None, &cfg).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn sgd_reduces_loss() {
        let data = synth_blobs(2, 50, &[2], 0.05, 4).unwrap();
        let mut m = Model::mlp(2, &[8], 2, 1).unwrap();
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            lr: 0.5,
            batch_size: 16,
            epochs: 20,
            seed: 2,
            ..TrainConfig::default()
        };
        let log = train(&mut m, &data, Some(&data), &cfg).unwrap();
        assert!(log.epochs.last().unwrap().loss < log.epochs[0].loss);
    }

    #[test]
    fn stuck_bit_forces_level() {
        let mut m = Model::mlp(2, &[2], 2, 0).unwrap();
        let before = m.layers()[0].weight.as_ref().unwrap().data()[1];
        let f = StuckWeightBit::flipping(&m, 0, 1, 31).unwrap();
        f.apply(&mut m);
        f.apply(&mut m);
        assert_eq!(m.layers()[0].weight.as_ref().unwrap().data()[1], -before);
    }
}
