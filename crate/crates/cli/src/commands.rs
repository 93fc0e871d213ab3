//! Subcommand implementations.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use faultline::attribution::{attribute_all, AttributionMap};
use faultline::campaign::{
    read_records, report as summarise, run_campaign, run_exhaustive, seed_stats, CampaignConfig,
    CsvRecordWriter, InjectionRecord, RecordSink, SeedStats,
};
use faultline::data::Dataset;
use faultline::fat::fat_train;
use faultline::fault_model::{write_fault_csv, FaultSite, TargetKind};
use faultline::model::Model;
use faultline::train::{evaluate, train as train_model, TrainLog};
use faultline::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::output::{sidecar_path, write_atomic, write_json, Meta};

fn load_checkpoint(path: &Path) -> Result<Model> {
    Model::read_checkpoint(BufReader::new(File::open(path)?))
}

fn check_inputs(model: &Model, data: &Dataset) -> Result<()> {
    let want: usize = model.input_shape().iter().product();
    if data.images.sample_len() != want {
        return Err(Error::Shape(format!(
            "model expects {want} values per sample, dataset has {}",
            data.images.sample_len()
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainDetails<'a> {
    seed: u64,
    train_samples: usize,
    test_samples: usize,
    test_accuracy: f64,
    log: &'a TrainLog,
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (train_set, test_set) = cfg.dataset.load()?;
    let mut model = cfg.model.build(&train_set, cfg.train.seed)?;
    let log = train_model(&mut model, &train_set, Some(&test_set), &cfg.train)?;
    let acc = evaluate(&model, &test_set)?;
    write_atomic(out, |w| model.write_checkpoint(w))?;
    let mut meta = Meta::new(
        "train",
        cfg,
        TrainDetails {
            seed: cfg.train.seed,
            train_samples: train_set.len(),
            test_samples: test_set.len(),
            test_accuracy: acc,
            log: &log,
        },
    );
    meta.model_checksum = Some(model.checksum_hex());
    meta.outputs.push(out.display().to_string());
    write_json(&sidecar_path(out), &meta)?;
    println!("test_accuracy={acc:.4} checksum={}", model.checksum_hex());
    Ok(())
}

#[derive(Serialize)]
struct AttributeDetails {
    checkpoint: String,
    target: TargetKind,
    layers: Vec<usize>,
    samples: usize,
}

pub fn attribute(cfg: &RunConfig, checkpoint: &Path, target: TargetKind, out: &Path) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let (train_set, _) = cfg.dataset.load()?;
    check_inputs(&model, &train_set)?;
    let map = attribute_all(&model, &train_set, target, &cfg.attribution)?;
    write_atomic(out, |w| map.write(w))?;
    let mut meta = Meta::new(
        "attribute",
        cfg,
        AttributeDetails {
            checkpoint: checkpoint.display().to_string(),
            target,
            layers: map.layers.iter().map(|(l, _)| *l).collect(),
            samples: train_set.len(),
        },
    );
    meta.model_checksum = Some(model.checksum_hex());
    meta.outputs.push(out.display().to_string());
    write_json(&sidecar_path(out), &meta)?;
    println!("layers={} target={target}", map.layers.len());
    Ok(())
}

pub struct CampaignOptions {
    pub checkpoint: PathBuf,
    pub attribution: Option<PathBuf>,
    pub resume: bool,
    pub no_timing: bool,
    pub exhaustive: bool,
}

#[derive(Serialize)]
struct CampaignDetails {
    checkpoint: String,
    attribution: Option<String>,
    exhaustive: bool,
    baseline_accuracy: f64,
    dataset_samples: usize,
    rows: usize,
    per_seed: Vec<SeedStats>,
}

/// Flushes after every record so an interrupted run keeps whole rows.
struct FlushingSink<W: Write>(CsvRecordWriter<W>);

impl<W: Write> RecordSink for FlushingSink<W> {
    fn write(&mut self, record: &InjectionRecord) -> Result<()> {
        self.0.write(record)?;
        self.0.flush()
    }
}

fn partial_path(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".partial");
    out.with_file_name(name)
}

/// Rows already in a partial file, dropping a torn final line.
fn recover_partial(path: &Path, config: &CampaignConfig) -> Result<usize> {
    let mut bytes = fs::read(path)?;
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    if keep < bytes.len() {
        bytes.truncate(keep);
        fs::write(path, &bytes)?;
    }
    let (thresholds, rows) = read_records(bytes.as_slice())?;
    if thresholds != config.thresholds {
        return Err(Error::Config(
            "cannot resume: thresholds differ from the partial run".into(),
        ));
    }
    if let Some(r) = rows.iter().find(|r| r.code != config.code) {
        return Err(Error::Config(format!(
            "cannot resume: partial run used code {}",
            r.code
        )));
    }
    Ok(rows.len())
}

pub fn campaign(cfg: &RunConfig, opts: &CampaignOptions, out: &Path) -> Result<()> {
    let mut config = cfg.campaign.to_config()?;
    config.record_timing = config.record_timing && !opts.no_timing;
    let model = load_checkpoint(&opts.checkpoint)?;
    if config.code.needs_attribution() && opts.attribution.is_none() && !opts.exhaustive {
        return Err(Error::Config(format!(
            "code {} requires --attribution",
            config.code
        )));
    }
    let attribution = match &opts.attribution {
        Some(p) => Some(AttributionMap::read(BufReader::new(File::open(p)?))?),
        None => None,
    };
    let (_, test_set) = cfg.dataset.load()?;
    check_inputs(&model, &test_set)?;

    let (baseline, all_rows) = if opts.exhaustive {
        let outcome = run_exhaustive(
            &model,
            &test_set,
            config.code.target,
            &config.thresholds,
            config.workers,
            config.record_timing,
        )?;
        let mut sink = CsvRecordWriter::new(Vec::new(), &config.thresholds, true)?;
        for r in &outcome.records {
            sink.write(r)?;
        }
        let bytes = sink.into_inner()?;
        write_atomic(out, |w| Ok(w.write_all(&bytes)?))?;
        (outcome.baseline, outcome.records)
    } else {
        let partial = partial_path(out);
        let resumed = if opts.resume && partial.exists() {
            recover_partial(&partial, &config)?
        } else {
            0
        };
        config.resume_from = resumed;
        let file = OpenOptions::new()
            .create(true)
            .append(resumed > 0)
            .write(true)
            .truncate(resumed == 0)
            .open(&partial)?;
        let mut sink = FlushingSink(CsvRecordWriter::new(
            BufWriter::new(file),
            &config.thresholds,
            resumed == 0,
        )?);
        let outcome = run_campaign(
            &model,
            &test_set,
            attribution.as_ref(),
            &config,
            Some(&mut sink),
        )?;
        drop(sink);
        File::open(&partial)?.sync_all()?;
        fs::rename(&partial, out)?;
        let (_, rows) = read_records(BufReader::new(File::open(out)?))?;
        (outcome.baseline, rows)
    };

    let per_seed = seed_stats(&all_rows, &config.thresholds);
    let mut meta = Meta::new(
        "campaign",
        cfg,
        CampaignDetails {
            checkpoint: opts.checkpoint.display().to_string(),
            attribution: opts.attribution.as_ref().map(|p| p.display().to_string()),
            exhaustive: opts.exhaustive,
            baseline_accuracy: baseline.accuracy(),
            dataset_samples: test_set.len(),
            rows: all_rows.len(),
            per_seed: per_seed.clone(),
        },
    );
    meta.model_checksum = Some(model.checksum_hex());
    meta.outputs.push(out.display().to_string());
    write_json(&sidecar_path(out), &meta)?;
    println!(
        "rows={} baseline_accuracy={:.4}",
        all_rows.len(),
        baseline.accuracy()
    );
    for s in &per_seed {
        let p: Vec<String> = s
            .thresholds
            .iter()
            .map(|t| format!("{:.2}:{:.3}", t.threshold, t.precision.unwrap_or(f64::NAN)))
            .collect();
        println!("seed={} precision {}", s.seed, p.join(" "));
    }
    Ok(())
}

#[derive(Serialize)]
struct FatDetails {
    baseline_accuracy: f64,
    post_fat_accuracy: f64,
    accuracy_under_trained_faults: f64,
    accuracy_under_adversary_faults: f64,
}

fn fault_sites(faults: &[faultline::fat::ActiveFault]) -> Vec<FaultSite> {
    faults.iter().map(|f| f.site).collect()
}

pub fn fat(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (train_set, test_set) = cfg.dataset.load()?;
    let initial = cfg.model.build(&train_set, cfg.fat.seed)?;
    let outcome = fat_train(&cfg.fat, &initial, &train_set, &test_set)?;
    let r = &outcome.report;
    fs::create_dir_all(out)?;
    let files = [
        "model.ckpt",
        "baseline.ckpt",
        "report.json",
        "trained_faults.csv",
        "adversary_faults.csv",
    ];
    write_atomic(&out.join(files[0]), |w| outcome.model.write_checkpoint(w))?;
    write_atomic(&out.join(files[1]), |w| {
        outcome.baseline_model.write_checkpoint(w)
    })?;
    write_json(&out.join(files[2]), r)?;
    write_atomic(&out.join(files[3]), |w| {
        write_fault_csv(w, &fault_sites(&r.trained_faults))
    })?;
    write_atomic(&out.join(files[4]), |w| {
        write_fault_csv(w, &fault_sites(&r.adversary_faults))
    })?;
    let mut meta = Meta::new(
        "fat",
        cfg,
        FatDetails {
            baseline_accuracy: r.baseline_accuracy,
            post_fat_accuracy: r.post_fat_accuracy,
            accuracy_under_trained_faults: r.accuracy_under_trained_faults,
            accuracy_under_adversary_faults: r.accuracy_under_adversary_faults,
        },
    );
    meta.model_checksum = Some(outcome.model.checksum_hex());
    meta.outputs = files
        .iter()
        .map(|f| out.join(f).display().to_string())
        .collect();
    write_json(&out.join("meta.json"), &meta)?;
    println!(
        "baseline={:.4} post_fat={:.4} under_trained={:.4} under_adversary={:.4}",
        r.baseline_accuracy,
        r.post_fat_accuracy,
        r.accuracy_under_trained_faults,
        r.accuracy_under_adversary_faults
    );
    Ok(())
}

#[derive(Serialize)]
struct ReportDetails {
    inputs: Vec<String>,
    codes: Vec<String>,
}

pub fn report(cfg: &RunConfig, inputs: &[PathBuf], out: &Path) -> Result<()> {
    let sets = inputs
        .iter()
        .map(|p| read_records(BufReader::new(File::open(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let rep = summarise(&sets)?;
    fs::create_dir_all(out)?;
    write_atomic(&out.join("summary.csv"), |w| rep.write_summary(w))?;
    write_atomic(&out.join("series.csv"), |w| rep.write_series(w))?;
    let mut codes: Vec<String> = rep.summary.iter().map(|r| r.code.clone()).collect();
    codes.dedup();
    let mut meta = Meta::new(
        "report",
        cfg,
        ReportDetails {
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            codes,
        },
    );
    meta.outputs = ["summary.csv", "series.csv"]
        .iter()
        .map(|f| out.join(f).display().to_string())
        .collect();
    write_json(&out.join("meta.json"), &meta)?;
    for r in &rep.summary {
        println!(
            "{} t={:.2} seeds={} samples={} mean={:.4} std={:.4}",
            r.code,
            r.threshold,
            r.seeds,
            r.samples,
            r.mean_precision.unwrap_or(f64::NAN),
            r.std_precision.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
