//! Seeded injection campaigns, SDC classification and precision/recall.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attribution::AttributionMap;
use crate::bitfloat::BitWeightScheme;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fault_model::{
    build_sampler, enumerate_sites, ExperimentCode, FaultSite, NeuronScheme, SamplerConfig,
    TargetKind,
};
use crate::injector::evaluate_with_fault;
use crate::model::Model;
use crate::train::{evaluate_detailed, Evaluation};

pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
pub const DEFAULT_BUDGET: usize = 2000;

/// Slack for comparing accuracy drops against thresholds.
const DROP_EPS: f64 = 1e-9;

/// `0.00, 0.05, ..., 0.90`.
pub fn default_thresholds() -> Vec<f64> {
    (0..=18).map(|i| f64::from(i * 5) / 100.0).collect()
}

pub fn validate_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() {
        return Err(Error::Config(
            "at least one SDC threshold is required".into(),
        ));
    }
    if thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Config("SDC thresholds must lie in [0, 1]".into()));
    }
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(
            "SDC thresholds must be strictly ascending".into(),
        ));
    }
    let names: HashSet<String> = thresholds.iter().map(|&t| threshold_column(t)).collect();
    if names.len() != thresholds.len() {
        return Err(Error::Config(
            "SDC thresholds must differ by at least 0.01".into(),
        ));
    }
    Ok(())
}

/// Column name for a threshold, in hundredths: `sdc_005` for 0.05.
pub fn threshold_column(t: f64) -> String {
    format!("sdc_{:03}", (t * 100.0).round() as u32)
}

pub fn sdc_flags(drop: f64, thresholds: &[f64]) -> Vec<bool> {
    thresholds.iter().map(|&t| drop >= t - DROP_EPS).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub code: ExperimentCode,
    pub thresholds: Vec<f64>,
    pub budget: usize,
    pub seeds: Vec<u64>,
    pub mix: f64,
    pub workers: usize,
    /// When false every `wallclock_ns` is written as 0, making output
    /// byte-identical across runs.
    pub record_timing: bool,
    /// Global work items (seed-major) already completed by a previous run.
    pub resume_from: usize,
}

impl CampaignConfig {
    pub fn new(code: ExperimentCode) -> Self {
        CampaignConfig {
            code,
            thresholds: default_thresholds(),
            budget: DEFAULT_BUDGET,
            seeds: DEFAULT_SEEDS.to_vec(),
            mix: 0.0,
            workers: 1,
            record_timing: true,
            resume_from: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectionRecord {
    pub code: ExperimentCode,
    pub seed: u64,
    pub ordinal: u64,
    pub site: FaultSite,
    pub baseline_acc: f64,
    pub faulty_acc: f64,
    pub acc_drop: f64,
    pub poisoned: bool,
    pub wallclock_ns: u64,
    pub sdc: Vec<bool>,
}

/// Receives records in `(seed, ordinal)` order as a campaign progresses.
pub trait RecordSink {
    fn write(&mut self, record: &InjectionRecord) -> Result<()>;
    fn flush(&mut self) -> Result<()> {
        Ok(())
    }
}

impl RecordSink for Vec<InjectionRecord> {
    fn write(&mut self, record: &InjectionRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

pub fn record_header(thresholds: &[f64]) -> Vec<String> {
    let mut h: Vec<String> = [
        "experiment_code",
        "seed",
        "sample_ordinal",
        "layer_id",
        "target_kind",
        "element_index",
        "bit_index",
        "baseline_acc",
        "faulty_acc",
        "acc_drop",
        "poisoned",
        "wallclock_ns",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend(thresholds.iter().map(|&t| threshold_column(t)));
    h
}

/// CSV record sink.
pub struct CsvRecordWriter<W: Write> {
    out: csv::Writer<W>,
}

impl<W: Write> CsvRecordWriter<W> {
    pub fn new(w: W, thresholds: &[f64], write_header: bool) -> Result<Self> {
        let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        if write_header {
            out.write_record(record_header(thresholds))?;
        }
        Ok(CsvRecordWriter { out })
    }

    pub fn into_inner(self) -> Result<W> {
        self.out.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

impl<W: Write> RecordSink for CsvRecordWriter<W> {
    fn write(&mut self, r: &InjectionRecord) -> Result<()> {
        let mut row = vec![
            r.code.to_string(),
            r.seed.to_string(),
            r.ordinal.to_string(),
            r.site.layer_id.to_string(),
            r.site.target_kind.to_string(),
            r.site.element_index.to_string(),
            r.site.bit_index.to_string(),
            r.baseline_acc.to_string(),
            r.faulty_acc.to_string(),
            r.acc_drop.to_string(),
            u8::from(r.poisoned).to_string(),
            r.wallclock_ns.to_string(),
        ];
        row.extend(r.sdc.iter().map(|&f| u8::from(f).to_string()));
        self.out.write_record(&row)?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Parses a records CSV; returns its thresholds and rows.
pub fn read_records<R: Read>(r: R) -> Result<(Vec<f64>, Vec<InjectionRecord>)> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let fixed = record_header(&[]);
    if header.len() < fixed.len() || header[..fixed.len()] != fixed[..] {
        return Err(Error::format(
            0,
            "records header does not start with the expected columns",
        ));
    }
    let mut thresholds = Vec::new();
    for name in &header[fixed.len()..] {
        let pct: u32 = name
            .strip_prefix("sdc_")
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| Error::format(0, format!("bad threshold column {name:?}")))?;
        thresholds.push(f64::from(pct) / 100.0);
    }
    validate_thresholds(&thresholds)?;
    let mut records = Vec::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row?;
        let bad = |what: &str| Error::Parse(format!("records row {}: bad {what}", line + 2));
        let get = |i: usize| row.get(i).unwrap_or("");
        let flag = |s: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(bad("flag")),
        };
        let record = InjectionRecord {
            code: get(0).parse()?,
            seed: get(1).parse().map_err(|_| bad("seed"))?,
            ordinal: get(2).parse().map_err(|_| bad("sample_ordinal"))?,
            site: FaultSite {
                layer_id: get(3).parse().map_err(|_| bad("layer_id"))?,
                target_kind: get(4).parse()?,
                element_index: get(5).parse().map_err(|_| bad("element_index"))?,
                bit_index: get(6).parse().map_err(|_| bad("bit_index"))?,
            },
            baseline_acc: get(7).parse().map_err(|_| bad("baseline_acc"))?,
            faulty_acc: get(8).parse().map_err(|_| bad("faulty_acc"))?,
            acc_drop: get(9).parse().map_err(|_| bad("acc_drop"))?,
            poisoned: flag(get(10))?,
            wallclock_ns: get(11).parse().map_err(|_| bad("wallclock_ns"))?,
            sdc: (fixed.len()..header.len())
                .map(|i| flag(get(i)))
                .collect::<Result<_>>()?,
        };
        records.push(record);
    }
    Ok((thresholds, records))
}

/// Runs `f(i)` for `i in 0..n` on `workers` threads, each with its own
/// state from `init`, and hands results to `emit` in index order.
///
/// Stops at the first error from `f` or `emit`; results before it are
/// still emitted.
pub fn ordered_parallel<S, T, I, F, E>(
    n: usize,
    workers: usize,
    init: I,
    f: F,
    mut emit: E,
) -> Result<()>
where
    T: Send,
    I: Fn() -> S + Sync,
    F: Fn(&mut S, usize) -> Result<T> + Sync,
    E: FnMut(usize, T) -> Result<()>,
{
    let workers = workers.clamp(1, n.max(1));
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<(usize, Result<T>)>();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, stop, init, f) = (&next, &stop, &init, &f);
            scope.spawn(move || {
                let mut state = init();
                while !stop.load(Ordering::Relaxed) {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= n {
                        break;
                    }
                    let out = f(&mut state, i);
                    let failed = out.is_err();
                    if tx.send((i, out)).is_err() || failed {
                        break;
                    }
                }
            });
        }
        drop(tx);
        let mut pending = BTreeMap::new();
        let mut cursor = 0;
        let mut first_err: Option<(usize, Error)> = None;
        for (i, out) in rx {
            match out {
                Ok(v) => {
                    pending.insert(i, v);
                }
                Err(e) => {
                    stop.store(true, Ordering::Relaxed);
                    if first_err.as_ref().is_none_or(|(j, _)| i < *j) {
                        first_err = Some((i, e));
                    }
                }
            }
            while let Some(v) = pending.remove(&cursor) {
                if first_err.as_ref().is_some_and(|(j, _)| cursor >= *j) {
                    break;
                }
                if let Err(e) = emit(cursor, v) {
                    stop.store(true, Ordering::Relaxed);
                    first_err = Some((cursor, e));
                    break;
                }
                cursor += 1;
            }
        }
        match first_err {
            Some((_, e)) => Err(e),
            None => Ok(()),
        }
    })
}

/// Campaign result. `records` holds the rows produced by this run.
#[derive(Debug, Clone)]
pub struct CampaignOutcome {
    pub baseline: Evaluation,
    pub records: Vec<InjectionRecord>,
    /// Global items completed, counting resumed ones.
    pub completed: usize,
}

/// Runs `config.budget` injections per seed.
///
/// Records reach `sink` in `(seed, ordinal)` order whatever the worker
/// count. On failure the sink holds every record before the failing item
/// and the error is returned; rerunning with `resume_from` set to the
/// number of rows written continues the campaign.
pub fn run_campaign(
    model: &Model,
    data: &Dataset,
    attribution: Option<&AttributionMap>,
    config: &CampaignConfig,
    mut sink: Option<&mut dyn RecordSink>,
) -> Result<CampaignOutcome> {
    validate_thresholds(&config.thresholds)?;
    if config.seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let baseline = evaluate_detailed(model, data, &[])?;
    let samplers = config
        .seeds
        .iter()
        .map(|&seed| {
            build_sampler(
                SamplerConfig {
                    code: config.code,
                    mix: config.mix,
                    seed,
                },
                attribution,
                model,
                Some(&data.images),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let total = config.budget * config.seeds.len();
    let start = config.resume_from.min(total);
    let mut records = Vec::with_capacity(total - start);
    let baseline_acc = baseline.accuracy();
    let result = ordered_parallel(
        total - start,
        config.workers,
        || model.clone(),
        |replica, i| {
            let g = start + i;
            let (s, ordinal) = (g / config.budget, (g % config.budget) as u64);
            let site = samplers[s].sample_at(ordinal);
            let t0 = Instant::now();
            let eval = evaluate_with_fault(replica, data, site)?;
            let ns = if config.record_timing {
                t0.elapsed().as_nanos() as u64
            } else {
                0
            };
            let drop = (baseline.correct as f64 - eval.correct as f64) / eval.total as f64;
            Ok(InjectionRecord {
                code: config.code,
                seed: config.seeds[s],
                ordinal,
                site,
                baseline_acc,
                faulty_acc: eval.accuracy(),
                acc_drop: drop,
                poisoned: eval.poisoned,
                wallclock_ns: ns,
                sdc: sdc_flags(drop, &config.thresholds),
            })
        },
        |_, rec| {
            if let Some(s) = sink.as_deref_mut() {
                s.write(&rec)?;
            }
            records.push(rec);
            Ok(())
        },
    );
    if let Some(s) = sink {
        s.flush()?;
    }
    result?;
    Ok(CampaignOutcome {
        baseline,
        completed: start + records.len(),
        records,
    })
}

/// Injects every site of `target` once, in enumeration order.
///
/// Records carry the uniform code (`RBRN<target>`), seed 0 and the site's
/// enumeration index as ordinal.
pub fn run_exhaustive(
    model: &Model,
    data: &Dataset,
    target: TargetKind,
    thresholds: &[f64],
    workers: usize,
    record_timing: bool,
) -> Result<CampaignOutcome> {
    validate_thresholds(thresholds)?;
    let code = ExperimentCode {
        bit: BitWeightScheme::Uniform,
        neuron: NeuronScheme::Random,
        target,
    };
    let baseline = evaluate_detailed(model, data, &[])?;
    let sites = enumerate_sites(model, target);
    let baseline_acc = baseline.accuracy();
    let mut records = Vec::with_capacity(sites.len());
    ordered_parallel(
        sites.len(),
        workers,
        || model.clone(),
        |replica, i| {
            let t0 = Instant::now();
            let eval = evaluate_with_fault(replica, data, sites[i])?;
            let ns = if record_timing {
                t0.elapsed().as_nanos() as u64
            } else {
                0
            };
            let drop = (baseline.correct as f64 - eval.correct as f64) / eval.total as f64;
            Ok(InjectionRecord {
                code,
                seed: 0,
                ordinal: i as u64,
                site: sites[i],
                baseline_acc,
                faulty_acc: eval.accuracy(),
                acc_drop: drop,
                poisoned: eval.poisoned,
                wallclock_ns: ns,
                sdc: sdc_flags(drop, thresholds),
            })
        },
        |_, rec| {
            records.push(rec);
            Ok(())
        },
    )?;
    Ok(CampaignOutcome {
        baseline,
        completed: records.len(),
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdStats {
    pub threshold: f64,
    pub positives_true: usize,
    pub positives_false: usize,
    pub precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedStats {
    pub seed: u64,
    pub samples: usize,
    pub thresholds: Vec<ThresholdStats>,
}

/// Per-seed precision; `None` where a seed has no samples.
pub fn seed_stats(records: &[InjectionRecord], thresholds: &[f64]) -> Vec<SeedStats> {
    let mut seeds: Vec<u64> = Vec::new();
    for r in records {
        if !seeds.contains(&r.seed) {
            seeds.push(r.seed);
        }
    }
    seeds
        .into_iter()
        .map(|seed| {
            let rows: Vec<&InjectionRecord> = records.iter().filter(|r| r.seed == seed).collect();
            let thresholds = thresholds
                .iter()
                .enumerate()
                .map(|(t, &threshold)| {
                    let tp = rows.iter().filter(|r| r.sdc[t]).count();
                    let fp = rows.len() - tp;
                    ThresholdStats {
                        threshold,
                        positives_true: tp,
                        positives_false: fp,
                        precision: (!rows.is_empty()).then(|| tp as f64 / rows.len() as f64),
                    }
                })
                .collect();
            SeedStats {
                seed,
                samples: rows.len(),
                thresholds,
            }
        })
        .collect()
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Some((mean, std))
}

/// Mean over seeds of per-seed precision, per threshold.
pub fn mean_precision(records: &[InjectionRecord], thresholds: &[f64]) -> Vec<Option<f64>> {
    let stats = seed_stats(records, thresholds);
    (0..thresholds.len())
        .map(|t| {
            let v: Vec<f64> = stats
                .iter()
                .filter_map(|s| s.thresholds[t].precision)
                .collect();
            mean_std(&v).map(|(m, _)| m)
        })
        .collect()
}

/// Running precision of one seed's records at every sample count.
pub fn precision_series(records: &[InjectionRecord], threshold_index: usize) -> Vec<f64> {
    let mut hits = 0usize;
    records
        .iter()
        .enumerate()
        .map(|(k, r)| {
            hits += usize::from(r.sdc[threshold_index]);
            hits as f64 / (k + 1) as f64
        })
        .collect()
}

/// Distinct sampled sites that are SDCs at each threshold.
pub fn distinct_positives(
    records: &[InjectionRecord],
    thresholds: usize,
) -> Vec<HashSet<FaultSite>> {
    let mut sets = vec![HashSet::new(); thresholds];
    for r in records {
        for (t, set) in sets.iter_mut().enumerate() {
            if r.sdc[t] {
                set.insert(r.site);
            }
        }
    }
    sets
}

/// Recall per threshold: distinct true positives over the census size.
pub fn compute_recall(
    records: &[InjectionRecord],
    search_space_size: usize,
    census: &[usize],
) -> Result<Vec<Option<f64>>> {
    let hits = distinct_positives(records, census.len());
    census
        .iter()
        .zip(hits)
        .enumerate()
        .map(|(t, (&c, h))| {
            if c > search_space_size {
                return Err(Error::Integrity(format!(
                    "census {c} exceeds search space {search_space_size} at threshold index {t}"
                )));
            }
            if c < h.len() {
                return Err(Error::Integrity(format!(
                    "census {c} is smaller than the {} distinct positives observed at threshold index {t}",
                    h.len()
                )));
            }
            Ok((c > 0).then(|| h.len() as f64 / c as f64))
        })
        .collect()
}

/// Outcome of every site in the search space.
#[derive(Debug, Clone)]
pub struct Census {
    pub baseline: Evaluation,
    pub outcomes: Vec<(FaultSite, Evaluation)>,
}

impl Census {
    pub fn drop(&self, eval: &Evaluation) -> f64 {
        (self.baseline.correct as f64 - eval.correct as f64) / eval.total as f64
    }

    /// SDC-causing sites per threshold.
    pub fn positives(&self, thresholds: &[f64]) -> Vec<HashSet<FaultSite>> {
        let mut sets = vec![HashSet::new(); thresholds.len()];
        for (site, eval) in &self.outcomes {
            for (set, flag) in sets.iter_mut().zip(sdc_flags(self.drop(eval), thresholds)) {
                if flag {
                    set.insert(*site);
                }
            }
        }
        sets
    }
}

/// Evaluates every fault site of `target` (small models only).
pub fn enumerate_census(
    model: &Model,
    data: &Dataset,
    target: TargetKind,
    workers: usize,
) -> Result<Census> {
    let baseline = evaluate_detailed(model, data, &[])?;
    let sites = enumerate_sites(model, target);
    let mut outcomes = Vec::with_capacity(sites.len());
    ordered_parallel(
        sites.len(),
        workers,
        || model.clone(),
        |replica, i| evaluate_with_fault(replica, data, sites[i]),
        |i, eval| {
            outcomes.push((sites[i], eval));
            Ok(())
        },
    )?;
    Ok(Census { baseline, outcomes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub code: String,
    pub threshold: f64,
    pub seeds: usize,
    pub samples: usize,
    pub mean_precision: Option<f64>,
    pub std_precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub code: String,
    pub threshold: f64,
    pub samples: usize,
    pub mean_precision: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub thresholds: Vec<f64>,
    pub summary: Vec<SummaryRow>,
    pub series: Vec<SeriesRow>,
}

/// Summarises record sets that share one threshold list.
///
/// Precision is computed per seed, then averaged across seeds. The running
/// series averages seeds that have reached each sample count.
pub fn report(sets: &[(Vec<f64>, Vec<InjectionRecord>)]) -> Result<Report> {
    let Some((thresholds, _)) = sets.first() else {
        return Ok(Report::default());
    };
    if sets.iter().any(|(t, _)| t != thresholds) {
        return Err(Error::Usage(
            "record files use different SDC thresholds".into(),
        ));
    }
    let mut by_code: BTreeMap<String, Vec<InjectionRecord>> = BTreeMap::new();
    for (_, recs) in sets {
        for r in recs {
            by_code
                .entry(r.code.to_string())
                .or_default()
                .push(r.clone());
        }
    }
    let mut out = Report {
        thresholds: thresholds.clone(),
        ..Report::default()
    };
    for (code, mut recs) in by_code {
        recs.sort_by_key(|r| (r.seed, r.ordinal));
        let stats = seed_stats(&recs, thresholds);
        for (t, &threshold) in thresholds.iter().enumerate() {
            let v: Vec<f64> = stats
                .iter()
                .filter_map(|s| s.thresholds[t].precision)
                .collect();
            let ms = mean_std(&v);
            out.summary.push(SummaryRow {
                code: code.clone(),
                threshold,
                seeds: stats.len(),
                samples: recs.len(),
                mean_precision: ms.map(|m| m.0),
                std_precision: ms.map(|m| m.1),
            });
        }
        let per_seed: Vec<Vec<&InjectionRecord>> = stats
            .iter()
            .map(|s| recs.iter().filter(|r| r.seed == s.seed).collect())
            .collect();
        let longest = per_seed.iter().map(Vec::len).max().unwrap_or(0);
        for (t, &threshold) in thresholds.iter().enumerate() {
            let series: Vec<Vec<f64>> = per_seed
                .iter()
                .map(|rows| {
                    let owned: Vec<InjectionRecord> = rows.iter().map(|r| (*r).clone()).collect();
                    precision_series(&owned, t)
                })
                .collect();
            for k in 0..longest {
                let v: Vec<f64> = series.iter().filter_map(|s| s.get(k).copied()).collect();
                out.series.push(SeriesRow {
                    code: code.clone(),
                    threshold,
                    samples: k + 1,
                    mean_precision: v.iter().sum::<f64>() / v.len() as f64,
                });
            }
        }
    }
    Ok(out)
}

impl Report {
    pub fn write_summary<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.summary {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_series<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.series {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Self-description written next to a records CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignMeta {
    pub artifact_version: String,
    pub config: CampaignConfig,
    pub model_checksum: String,
    pub baseline_accuracy: f64,
    pub dataset_samples: usize,
    pub notes: Vec<String>,
}

impl CampaignMeta {
    pub fn new(
        config: &CampaignConfig,
        model: &Model,
        data: &Dataset,
        baseline_accuracy: f64,
    ) -> Self {
        CampaignMeta {
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            model_checksum: model.checksum_hex(),
            baseline_accuracy,
            dataset_samples: data.len(),
            notes: vec![
                "sampler: two independent stages (element, then bit)".into(),
                "output faults hit the same element of every sample in a batch".into(),
                "precision: computed per seed, then averaged".into(),
                "sdc flag: baseline_acc - faulty_acc >= threshold (absolute)".into(),
            ],
        }
    }
}
