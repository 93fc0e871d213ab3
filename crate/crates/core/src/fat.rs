//! Fault-aware training and latency-to-critical measurement.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attribution::{attribute_all, AttributionConfig, AttributionMap};
use crate::campaign::{default_thresholds, validate_thresholds};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fault_model::{build_sampler, ExperimentCode, FaultSite, SamplerConfig, TargetKind};
use crate::injector::evaluate_with_fault;
use crate::model::{Model, OutputFlip};
use crate::train::{
    evaluate, evaluate_detailed, EpochStats, OptimizerKind, StuckWeightBit, TrainConfig, Trainer,
    TrainingFaults,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FatConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub faults_per_round: usize,
    pub consecutive_criticals: usize,
    pub thresholds: Vec<f64>,
    pub simulations_per_epoch: usize,
    pub latency_cap: usize,
    pub lr: f32,
    pub batch_size: usize,
    /// Per-entry gradient bound while faults are active.
    pub grad_clamp: f32,
    /// Magnitude at which flipped outputs saturate while training.
    pub saturation: f32,
    pub seed: u64,
    pub code: ExperimentCode,
    pub adversary_code: ExperimentCode,
    pub attribution: AttributionConfig,
}

impl Default for FatConfig {
    fn default() -> Self {
        FatConfig {
            epochs: 15,
            warmup_epochs: 5,
            faults_per_round: 5,
            consecutive_criticals: 3,
            thresholds: default_thresholds(),
            simulations_per_epoch: 3,
            latency_cap: 10_000,
            lr: 0.01,
            batch_size: 64,
            grad_clamp: 1.0,
            saturation: 100.0,
            seed: 0,
            code: "GBINo".parse().expect("valid code"),
            adversary_code: "RBRNo".parse().expect("valid code"),
            attribution: AttributionConfig::default(),
        }
    }
}

impl FatConfig {
    pub fn validate(&self) -> Result<()> {
        validate_thresholds(&self.thresholds)?;
        if self.consecutive_criticals == 0 || self.latency_cap == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "consecutive_criticals, latency_cap and batch_size must be positive".into(),
            ));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(self.saturation > 0.0 && self.saturation.is_finite()) {
            return Err(Error::Config(
                "saturation must be positive and finite".into(),
            ));
        }
        Ok(())
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            fault_grad_clamp: self.grad_clamp,
            fault_saturation: self.saturation,
        }
    }
}

/// Evaluations needed to see `k` consecutive critical faults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub threshold: f64,
    /// `None` when the cap was reached first.
    pub evaluations: Option<usize>,
    /// Evaluations times the evaluation-set size.
    pub cycles: Option<u64>,
    pub wallclock_ns: u64,
}

impl Latency {
    pub fn censored(&self) -> bool {
        self.evaluations.is_none()
    }
}

fn attribution_for(
    model: &Model,
    code: ExperimentCode,
    attribution_data: &Dataset,
    config: &AttributionConfig,
) -> Result<Option<AttributionMap>> {
    if code.needs_attribution() {
        attribute_all(model, attribution_data, code.target, config).map(Some)
    } else {
        Ok(None)
    }
}

/// Draws faults for `code` until `k` consecutive ones each drop accuracy by
/// at least the threshold, for every threshold at once over one sampled
/// sequence. Negative drops count as zero. Attribution time is included in
/// every reported wallclock.
#[allow(clippy::too_many_arguments)]
pub fn measure_latencies(
    model: &Model,
    data: &Dataset,
    attribution_data: &Dataset,
    attribution_config: &AttributionConfig,
    code: ExperimentCode,
    thresholds: &[f64],
    k: usize,
    cap: usize,
    seed: u64,
) -> Result<Vec<Latency>> {
    validate_thresholds(thresholds)?;
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let t0 = Instant::now();
    let map = attribution_for(model, code, attribution_data, attribution_config)?;
    let sampler = build_sampler(
        SamplerConfig {
            code,
            mix: 0.0,
            seed,
        },
        map.as_ref(),
        model,
        Some(&data.images),
    )?;
    let baseline = evaluate_detailed(model, data, &[])?;
    let mut replica = model.clone();
    let mut streak = vec![0usize; thresholds.len()];
    let mut done: Vec<Option<(usize, u64)>> = vec![None; thresholds.len()];
    for n in 1..=cap {
        let eval = evaluate_with_fault(&mut replica, data, sampler.sample_at(n as u64 - 1))?;
        let drop = ((baseline.correct as f64 - eval.correct as f64) / eval.total as f64).max(0.0);
        let ns = t0.elapsed().as_nanos() as u64;
        for (t, &th) in thresholds.iter().enumerate() {
            if done[t].is_some() {
                continue;
            }
            streak[t] = if drop >= th - 1e-9 { streak[t] + 1 } else { 0 };
            if streak[t] >= k {
                done[t] = Some((n, ns));
            }
        }
        if done.iter().all(Option::is_some) {
            break;
        }
    }
    let total_ns = t0.elapsed().as_nanos() as u64;
    Ok(thresholds
        .iter()
        .zip(done)
        .map(|(&threshold, d)| Latency {
            threshold,
            evaluations: d.map(|(n, _)| n),
            cycles: d.map(|(n, _)| (n * data.len()) as u64),
            wallclock_ns: d.map_or(total_ns, |(_, ns)| ns),
        })
        .collect())
}

/// Single-threshold form of [`measure_latencies`].
#[allow(clippy::too_many_arguments)]
pub fn measure_latency_to_critical(
    model: &Model,
    data: &Dataset,
    attribution_data: &Dataset,
    attribution_config: &AttributionConfig,
    code: ExperimentCode,
    threshold: f64,
    k: usize,
    cap: usize,
    seed: u64,
) -> Result<Latency> {
    measure_latencies(
        model,
        data,
        attribution_data,
        attribution_config,
        code,
        &[threshold],
        k,
        cap,
        seed,
    )
    .map(|mut v| v.remove(0))
}

/// A fault held active during training and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveFault {
    pub site: FaultSite,
    /// Level the weight bit is held at (weight faults only).
    pub level: Option<bool>,
}

fn select_faults(
    model: &Model,
    code: ExperimentCode,
    n: usize,
    seed: u64,
    train: &Dataset,
    probe: &Dataset,
    config: &AttributionConfig,
) -> Result<Vec<ActiveFault>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let map = attribution_for(model, code, train, config)?;
    let sampler = build_sampler(
        SamplerConfig {
            code,
            mix: 0.0,
            seed,
        },
        map.as_ref(),
        model,
        Some(&probe.images),
    )?;
    sampler
        .sample(n)
        .into_iter()
        .map(|site| {
            let level = match site.target_kind {
                TargetKind::NeuronOutput => None,
                TargetKind::NeuronWeight => Some(
                    StuckWeightBit::flipping(
                        model,
                        site.layer_id,
                        site.element_index,
                        site.bit_index,
                    )?
                    .level,
                ),
            };
            Ok(ActiveFault { site, level })
        })
        .collect()
}

fn training_faults(faults: &[ActiveFault]) -> TrainingFaults {
    let mut out = TrainingFaults::default();
    for f in faults {
        match f.level {
            None => out.outputs.push(OutputFlip {
                layer: f.site.layer_id,
                element: f.site.element_index,
                bit: f.site.bit_index,
            }),
            Some(level) => out.weights.push(StuckWeightBit {
                layer: f.site.layer_id,
                element: f.site.element_index,
                bit: f.site.bit_index,
                level,
            }),
        }
    }
    out
}

/// Accuracy with `faults` active together. Weight bits are forced on a copy.
pub fn accuracy_under_faults(model: &Model, data: &Dataset, faults: &[ActiveFault]) -> Result<f64> {
    let tf = training_faults(faults);
    let mut m = model.clone();
    for w in &tf.weights {
        w.apply(&mut m);
    }
    evaluate_detailed(&m, data, &tf.outputs).map(|e| e.accuracy())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLatency {
    pub epoch: usize,
    pub code: String,
    pub seed: u64,
    pub latencies: Vec<Latency>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FatReport {
    pub code: String,
    pub adversary_code: String,
    pub baseline_accuracy: f64,
    pub post_fat_accuracy: f64,
    pub accuracy_under_trained_faults: f64,
    pub accuracy_under_adversary_faults: f64,
    pub baseline_under_trained_faults: f64,
    pub baseline_under_adversary_faults: f64,
    pub trained_faults: Vec<ActiveFault>,
    pub adversary_faults: Vec<ActiveFault>,
    pub epoch_accuracy: Vec<f64>,
    pub training: Vec<EpochStats>,
    pub latency: Vec<EpochLatency>,
}

#[derive(Debug, Clone)]
pub struct FatOutcome {
    /// Fault-free parameters of the fault-aware model.
    pub model: Model,
    pub baseline_model: Model,
    pub report: FatReport,
}

/// Clears stuck bits back to their pre-fault level.
fn without_stuck_bits(model: &Model, faults: &[ActiveFault]) -> Model {
    let mut m = model.clone();
    for f in faults {
        if let Some(level) = f.level {
            StuckWeightBit {
                layer: f.site.layer_id,
                element: f.site.element_index,
                bit: f.site.bit_index,
                level: !level,
            }
            .apply(&mut m);
        }
    }
    m
}

/// Trains `initial` twice with the same seed: once fault-free, once with
/// the first `faults_per_round` faults of `config.code` active from the end
/// of warmup onwards.
pub fn fat_train(
    config: &FatConfig,
    initial: &Model,
    train: &Dataset,
    test: &Dataset,
) -> Result<FatOutcome> {
    config.validate()?;
    let mut model = initial.clone();
    let mut trainer = Trainer::new(&model, config.train_config());
    let mut epoch_accuracy = Vec::with_capacity(config.epochs);
    let mut latency = Vec::new();
    let mut training = Vec::with_capacity(config.epochs);
    let clean = TrainingFaults::default();

    let simulate = |model: &Model, epoch: usize, out: &mut Vec<EpochLatency>| -> Result<()> {
        for code in [config.code, config.adversary_code] {
            for s in 0..config.simulations_per_epoch as u64 {
                let seed = config.seed.wrapping_add(1 + s);
                let latencies = measure_latencies(
                    model,
                    test,
                    train,
                    &config.attribution,
                    code,
                    &config.thresholds,
                    config.consecutive_criticals,
                    config.latency_cap,
                    seed,
                )?;
                out.push(EpochLatency {
                    epoch,
                    code: code.to_string(),
                    seed,
                    latencies,
                });
            }
        }
        Ok(())
    };

    for epoch in 0..config.warmup_epochs {
        training.push(trainer.run_epoch(&mut model, train, &clean)?);
        epoch_accuracy.push(evaluate(&model, test)?);
        simulate(&model, epoch, &mut latency)?;
    }

    let trained_faults = select_faults(
        &model,
        config.code,
        config.faults_per_round,
        config.seed,
        train,
        test,
        &config.attribution,
    )?;
    let adversary_faults = select_faults(
        &model,
        config.adversary_code,
        config.faults_per_round,
        config.seed,
        train,
        test,
        &config.attribution,
    )?;
    let active = training_faults(&trained_faults);

    let mut baseline_model = model.clone();
    let mut baseline_trainer = trainer.clone();
    for _ in config.warmup_epochs..config.epochs {
        baseline_trainer.run_epoch(&mut baseline_model, train, &clean)?;
    }

    for epoch in config.warmup_epochs..config.epochs {
        training.push(trainer.run_epoch(&mut model, train, &active)?);
        let clean_model = without_stuck_bits(&model, &trained_faults);
        epoch_accuracy.push(evaluate(&clean_model, test)?);
        simulate(&clean_model, epoch, &mut latency)?;
    }
    let model = without_stuck_bits(&model, &trained_faults);

    let report = FatReport {
        code: config.code.to_string(),
        adversary_code: config.adversary_code.to_string(),
        baseline_accuracy: evaluate(&baseline_model, test)?,
        post_fat_accuracy: evaluate(&model, test)?,
        accuracy_under_trained_faults: accuracy_under_faults(&model, test, &trained_faults)?,
        accuracy_under_adversary_faults: accuracy_under_faults(&model, test, &adversary_faults)?,
        baseline_under_trained_faults: accuracy_under_faults(
            &baseline_model,
            test,
            &trained_faults,
        )?,
        baseline_under_adversary_faults: accuracy_under_faults(
            &baseline_model,
            test,
            &adversary_faults,
        )?,
        trained_faults,
        adversary_faults,
        epoch_accuracy,
        training,
        latency,
    };
    Ok(FatOutcome {
        model,
        baseline_model,
        report,
    })
}
