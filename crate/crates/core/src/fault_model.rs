//! Fault sites, experiment codes and the two-stage importance sampler.
//!
//! Stage one picks an element (a weight or a neuron output) from a single
//! categorical distribution pooled across all eligible layers. Stage two
//! picks a bit of that element according to a [`BitWeightScheme`].

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::attribution::AttributionMap;
use crate::bitfloat::{bit_weights, BitWeightScheme};
use crate::error::{Error, Result};
use crate::model::{LayerKind, Model};
use crate::rng::stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    NeuronOutput,
    NeuronWeight,
}

impl TargetKind {
    pub fn letter(self) -> char {
        match self {
            TargetKind::NeuronOutput => 'o',
            TargetKind::NeuronWeight => 'w',
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TargetKind::NeuronOutput => "neuron_output",
            TargetKind::NeuronWeight => "neuron_weight",
        }
    }
}

impl fmt::Display for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TargetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neuron_output" | "o" => Ok(TargetKind::NeuronOutput),
            "neuron_weight" | "w" => Ok(TargetKind::NeuronWeight),
            _ => Err(Error::Parse(format!(
                "unknown target kind {s:?}; expected neuron_output or neuron_weight"
            ))),
        }
    }
}

/// One injectable single-bit flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FaultSite {
    pub layer_id: usize,
    pub target_kind: TargetKind,
    pub element_index: usize,
    pub bit_index: u8,
}

impl fmt::Display for FaultSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}[{}].bit{}",
            self.layer_id,
            self.target_kind.letter(),
            self.element_index,
            self.bit_index
        )
    }
}

/// Layers whose weights or outputs can be faulted.
///
/// Weight faults target every conv/linear weight tensor. Output faults
/// target the conv/linear outputs of every layer except the one producing
/// the logits.
pub fn eligible_layers(model: &Model, target: TargetKind) -> Vec<usize> {
    let last = model.layers().len().saturating_sub(1);
    model
        .layers()
        .iter()
        .enumerate()
        .filter(|(idx, l)| {
            matches!(l.kind, LayerKind::Conv2d { .. } | LayerKind::Linear { .. })
                && (target == TargetKind::NeuronWeight || *idx != last)
        })
        .map(|(idx, _)| idx)
        .collect()
}

/// Number of faultable elements of `layer` for `target`.
pub fn element_count(model: &Model, layer: usize, target: TargetKind) -> Result<usize> {
    let l = model.layer(layer)?;
    Ok(match target {
        TargetKind::NeuronWeight => l.weight.as_ref().map(Tensor::len).ok_or_else(|| {
            Error::Usage(format!("layer {layer} ({}) has no weights", l.kind.name()))
        })?,
        TargetKind::NeuronOutput => model.output_len(layer),
    })
}

/// Total number of `(element, bit)` pairs over the eligible layers.
pub fn search_space_size(model: &Model, target: TargetKind) -> usize {
    eligible_layers(model, target)
        .into_iter()
        .map(|l| element_count(model, l, target).unwrap_or(0) * 32)
        .sum()
}

/// Every fault site of the eligible layers, in layer, element, bit order.
pub fn enumerate_sites(model: &Model, target: TargetKind) -> Vec<FaultSite> {
    let mut sites = Vec::new();
    for layer_id in eligible_layers(model, target) {
        for element_index in 0..element_count(model, layer_id, target).unwrap_or(0) {
            for bit_index in 0..32 {
                sites.push(FaultSite {
                    layer_id,
                    target_kind: target,
                    element_index,
                    bit_index,
                });
            }
        }
    }
    sites
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NeuronScheme {
    Importance,
    Random,
}

impl NeuronScheme {
    pub fn letter(self) -> char {
        match self {
            NeuronScheme::Importance => 'I',
            NeuronScheme::Random => 'R',
        }
    }
}

/// `<bit>B<neuron>N<target>`, e.g. `GBINo`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ExperimentCode {
    pub bit: BitWeightScheme,
    pub neuron: NeuronScheme,
    pub target: TargetKind,
}

impl ExperimentCode {
    pub fn all() -> Vec<ExperimentCode> {
        let mut codes = Vec::with_capacity(16);
        for bit in BitWeightScheme::ALL {
            for neuron in [NeuronScheme::Importance, NeuronScheme::Random] {
                for target in [TargetKind::NeuronOutput, TargetKind::NeuronWeight] {
                    codes.push(ExperimentCode {
                        bit,
                        neuron,
                        target,
                    });
                }
            }
        }
        codes
    }

    pub fn needs_attribution(self) -> bool {
        self.neuron == NeuronScheme::Importance
    }
}

impl fmt::Display for ExperimentCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}B{}N{}",
            self.bit.letter(),
            self.neuron.letter(),
            self.target.letter()
        )
    }
}

impl FromStr for ExperimentCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Parse(format!(
                "invalid experiment code {s:?}; expected <bit>B<neuron>N<target> \
                 with bit in {{G,E,L,R}}, neuron in {{I,R}}, target in {{o,w}}"
            ))
        };
        let c: Vec<char> = s.chars().collect();
        if c.len() != 5 || c[1] != 'B' || c[3] != 'N' {
            return Err(bad());
        }
        let bit = BitWeightScheme::from_letter(c[0]).ok_or_else(bad)?;
        let neuron = match c[2] {
            'I' => NeuronScheme::Importance,
            'R' => NeuronScheme::Random,
            _ => return Err(bad()),
        };
        let target = match c[4] {
            'o' => TargetKind::NeuronOutput,
            'w' => TargetKind::NeuronWeight,
            _ => return Err(bad()),
        };
        Ok(ExperimentCode {
            bit,
            neuron,
            target,
        })
    }
}

impl Serialize for ExperimentCode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ExperimentCode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub code: ExperimentCode,
    /// Probability that a draw ignores both weightings and is uniform over
    /// `(element, bit)`.
    pub mix: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
enum BitStage {
    Uniform,
    Static(WeightedAliasIndex<f64>),
    /// Pooled element values; weights are derived per draw.
    Gradient(Vec<f32>),
}

/// Immutable sampler; draw `k` depends only on `(seed, k)`.
#[derive(Debug, Clone)]
pub struct FaultSampler {
    config: SamplerConfig,
    layers: Vec<usize>,
    /// Exclusive prefix sums of element counts, one per layer plus total.
    offsets: Vec<usize>,
    elements: Option<WeightedAliasIndex<f64>>,
    bits: BitStage,
}

fn alias(weights: &[f64]) -> Option<WeightedAliasIndex<f64>> {
    let sum: f64 = weights.iter().sum();
    if !(sum > 0.0 && sum.is_finite()) {
        return None;
    }
    WeightedAliasIndex::new(weights.iter().map(|w| w / sum).collect()).ok()
}

/// Builds the sampler for `config`.
///
/// `probe` is one model input whose clean activations supply element values
/// for gradient bit weights on neuron outputs.
pub fn build_sampler(
    config: SamplerConfig,
    attributions: Option<&AttributionMap>,
    model: &Model,
    probe: Option<&Tensor>,
) -> Result<FaultSampler> {
    if !(0.0..=1.0).contains(&config.mix) {
        return Err(Error::Config(format!(
            "uniform mix {} outside [0, 1]",
            config.mix
        )));
    }
    let code = config.code;
    let layers = eligible_layers(model, code.target);
    if layers.is_empty() {
        return Err(Error::Config(format!(
            "model has no layers eligible for {}",
            code.target
        )));
    }
    let mut offsets = vec![0];
    for &l in &layers {
        offsets.push(offsets.last().unwrap() + element_count(model, l, code.target)?);
    }
    let total = *offsets.last().unwrap();

    let elements = match code.neuron {
        NeuronScheme::Random => None,
        NeuronScheme::Importance => {
            let map = attributions
                .ok_or_else(|| Error::Config(format!("code {code} requires --attribution")))?;
            map.check_against(model, code.target)?;
            let mut pooled = Vec::with_capacity(total);
            for &l in &layers {
                pooled.extend(
                    map.scores(l)
                        .expect("checked")
                        .iter()
                        .map(|&s| f64::from(s)),
                );
            }
            let table = alias(&pooled);
            if table.is_none() {
                log::warn!(
                    "all attribution scores are zero; falling back to uniform element sampling"
                );
            }
            table
        }
    };

    let bits = match code.bit {
        BitWeightScheme::Uniform => BitStage::Uniform,
        BitWeightScheme::Gradient => {
            let mut values = Vec::with_capacity(total);
            match code.target {
                TargetKind::NeuronWeight => {
                    for &l in &layers {
                        values.extend(model.layer(l)?.weight.as_ref().expect("eligible").data());
                    }
                }
                TargetKind::NeuronOutput => {
                    let probe = probe.ok_or_else(|| {
                        Error::Config(format!("code {code} needs a probe input for output values"))
                    })?;
                    let acts = model.forward_snapshot(&probe.slice_batch(0, 1))?;
                    for &l in &layers {
                        values.extend(acts[l].data());
                    }
                }
            }
            BitStage::Gradient(values)
        }
        scheme => BitStage::Static(alias(&bit_weights(scheme, 0.0)?).expect("positive weights")),
    };

    Ok(FaultSampler {
        config,
        layers,
        offsets,
        elements,
        bits,
    })
}

impl FaultSampler {
    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn code(&self) -> ExperimentCode {
        self.config.code
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn element_total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Whether element draws follow attributions (false after a fallback).
    pub fn is_importance(&self) -> bool {
        self.elements.is_some()
    }

    fn locate(&self, pooled: usize) -> (usize, usize) {
        let slot = self.offsets.partition_point(|&o| o <= pooled) - 1;
        (self.layers[slot], pooled - self.offsets[slot])
    }

    fn draw_bit(&self, pooled: usize, rng: &mut impl Rng) -> u8 {
        let idx = match &self.bits {
            BitStage::Uniform => rng.random_range(0..32),
            BitStage::Static(table) => table.sample(rng),
            BitStage::Gradient(values) => {
                match bit_weights(BitWeightScheme::Gradient, values[pooled]) {
                    Ok(w) => {
                        let total: f64 = w.iter().sum();
                        let mut u = rng.random::<f64>() * total;
                        let mut pick = 31;
                        for (i, wi) in w.iter().enumerate() {
                            if u < *wi {
                                pick = i;
                                break;
                            }
                            u -= wi;
                        }
                        pick
                    }
                    Err(_) => rng.random_range(0..32),
                }
            }
        };
        idx as u8
    }

    /// The `ordinal`-th draw of this sampler's sequence.
    pub fn sample_at(&self, ordinal: u64) -> FaultSite {
        let mut rng = stream(self.config.seed, ordinal);
        let total = self.element_total();
        let mixed = rng.random::<f64>() < self.config.mix;
        let (pooled, bit) = if mixed {
            (rng.random_range(0..total), rng.random_range(0..32u8))
        } else {
            let pooled = match &self.elements {
                Some(table) => table.sample(&mut rng),
                None => rng.random_range(0..total),
            };
            (pooled, self.draw_bit(pooled, &mut rng))
        };
        let (layer_id, element_index) = self.locate(pooled);
        FaultSite {
            layer_id,
            target_kind: self.config.code.target,
            element_index,
            bit_index: bit,
        }
    }

    /// Draws `0..n`.
    pub fn sample(&self, n: usize) -> Vec<FaultSite> {
        (0..n as u64).map(|k| self.sample_at(k)).collect()
    }
}

pub const FAULT_CSV_HEADER: &str = "layer_id,target_kind,element_index,bit_index";

pub fn write_fault_csv<W: Write>(w: W, sites: &[FaultSite]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(FAULT_CSV_HEADER.split(','))?;
    for s in sites {
        out.serialize(s)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_fault_csv<R: Read>(r: R) -> Result<Vec<FaultSite>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header.join(",") != FAULT_CSV_HEADER {
        return Err(Error::format(
            0,
            format!("fault list header must be {FAULT_CSV_HEADER:?}"),
        ));
    }
    let mut sites = Vec::new();
    for row in rdr.deserialize() {
        let site: FaultSite = row?;
        if site.bit_index > 31 {
            return Err(Error::Integrity(format!(
                "bit index {} out of range",
                site.bit_index
            )));
        }
        sites.push(site);
    }
    Ok(sites)
}
