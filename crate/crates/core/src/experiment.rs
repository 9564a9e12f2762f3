//! Whole runs: loading data, training, and writing every output file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{DataSource, ExperimentConfig};
use crate::error::{Error, Result};
use crate::metrics::{
    export_mask_image, layer_stats, shrunk_param_count, write_metrics_csv, LayerStats, MetricsRecord, RunSummary,
};
use crate::nn::Model;
use crate::rewire::StrategyKind;
use crate::sparsity::Distribution;
use crate::train::{load_idx, run, synthetic_blobs, ChannelStats, Dataset, Split, TrainEvent};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_ECHO_FILE: &str = "config.cfg";

/// Training and test sets, normalized with statistics of the training set.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: Dataset,
    pub test: Dataset,
    pub stats: ChannelStats,
    pub description: String,
}

fn idx_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    let plain = dir.join(stem);
    if plain.exists() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(Error::Io {
        path: plain,
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "IDX file not found (also tried .gz)"),
    })
}

pub fn load_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let d = &cfg.data;
    let (mut train, mut test, description) = match &d.source {
        DataSource::Idx { dir } => {
            let train = load_idx(
                &idx_file(dir, "train-images-idx3-ubyte")?,
                &idx_file(dir, "train-labels-idx1-ubyte")?,
                Split::Train,
            )?;
            let test = load_idx(
                &idx_file(dir, "t10k-images-idx3-ubyte")?,
                &idx_file(dir, "t10k-labels-idx1-ubyte")?,
                Split::Test,
            )?;
            (train, test, format!("idx:{}", dir.display()))
        }
        &DataSource::Synthetic {
            classes,
            train,
            test,
            dim,
            margin,
            seed,
        } => (
            synthetic_blobs(classes, train, dim, margin, seed, Split::Train)?,
            synthetic_blobs(classes, test, dim, margin, seed.wrapping_add(1), Split::Test)?,
            format!("synthetic:{classes}x{dim}"),
        ),
    };
    if d.train_limit > 0 {
        train = train.take(d.train_limit);
    }
    if d.test_limit > 0 {
        test = test.take(d.test_limit);
    }
    // Flat data (synthetic vectors) is reshaped to whatever the model expects.
    if train.sample_shape() != cfg.model.input {
        let want: usize = cfg.model.input.iter().product();
        let have: usize = train.sample_shape().iter().product();
        if want != have {
            return Err(Error::Config(format!(
                "data samples are {:?} but the model input is {:?}",
                train.sample_shape(),
                cfg.model.input
            )));
        }
        train = train.reshape(cfg.model.input)?;
        test = test.reshape(cfg.model.input)?;
    }
    let stats = if d.normalize {
        let s = ChannelStats::compute(&train);
        train.normalize(&s);
        test.normalize(&s);
        s
    } else {
        let c = cfg.model.input[0];
        ChannelStats {
            mean: vec![0.0; c],
            std: vec![1.0; c],
        }
    };
    Ok(Datasets {
        train,
        test,
        stats,
        description,
    })
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub model: Model,
    pub records: Vec<MetricsRecord>,
    pub summary: RunSummary,
}

/// Trains one configuration on already-loaded data.
pub fn train_on(
    cfg: &ExperimentConfig,
    data: &Datasets,
    observer: impl FnMut(TrainEvent<'_>),
) -> Result<RunOutput> {
    let start = Instant::now();
    let (model, records) = run(&cfg.model, &cfg.train, &data.train, &data.test, observer)?;
    let summary = summarize(cfg, data, &model, &records, start.elapsed().as_secs_f64());
    Ok(RunOutput {
        model,
        records,
        summary,
    })
}

fn summarize(cfg: &ExperimentConfig, data: &Datasets, model: &Model, records: &[MetricsRecord], secs: f64) -> RunSummary {
    let (m, t) = (&cfg.model, &cfg.train);
    RunSummary {
        family: m.family.as_str().into(),
        input: m.input,
        classes: m.classes,
        widths: m.widths.clone(),
        fc_width: m.fc_width,
        strategy: t.strategy.as_str().into(),
        sparsity: t.sparsity.sparsity,
        distribution: t.sparsity.distribution.as_str().into(),
        seed: t.seed,
        epochs: t.epochs,
        batch_size: t.batch_size,
        base_lr: t.base_lr,
        lr_decay_factor: t.lr_decay_factor,
        milestones: t.milestones.clone(),
        momentum: t.momentum,
        weight_decay: t.weight_decay,
        initial_drop_fraction: t.schedule.initial_fraction,
        rewire_end_epoch: t.schedule.end_epoch,
        dataset: data.description.clone(),
        train_samples: data.train.len(),
        test_samples: data.test.len(),
        norm_mean: data.stats.mean.clone(),
        norm_std: data.stats.std.clone(),
        final_test_acc: records.last().map(|r| r.test_acc),
        best_test_acc: records.iter().map(|r| r.test_acc).reduce(f64::max),
        final_train_loss: records.last().map(|r| r.train_loss),
        dense_params: model.total_weights(),
        active_params: model.total_active(),
        shrunk_params: shrunk_param_count(model),
        final_densities: model.densities(),
        metrics_csv: METRICS_FILE.into(),
        wall_clock_secs: secs,
    }
}

/// Writes metrics CSV, summary JSON, checkpoint and the effective config into `out_dir`.
pub fn write_outputs(cfg: &ExperimentConfig, out: &RunOutput, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_metrics_csv(&out_dir.join(METRICS_FILE), &out.records)?;
    out.summary.write(&out_dir.join(SUMMARY_FILE))?;
    checkpoint::save(&out.model, &out_dir.join(CHECKPOINT_FILE))?;
    let echo = out_dir.join(CONFIG_ECHO_FILE);
    fs::write(&echo, cfg.to_text()).map_err(|e| Error::io(&echo, e))
}

pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    observer: impl FnMut(TrainEvent<'_>),
) -> Result<RunOutput> {
    let data = load_datasets(cfg)?;
    let out = train_on(cfg, &data, observer)?;
    write_outputs(cfg, &out, out_dir)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: StrategyKind,
    pub sparsity: f64,
    pub distribution: Distribution,
    pub final_test_acc: Option<f64>,
    pub best_test_acc: Option<f64>,
    pub active_params: usize,
    pub shrunk_params: usize,
    pub run_dir: String,
}

pub const SWEEP_FILE: &str = "sweep.csv";

/// Runs every strategy x sparsity x distribution combination of `base`,
/// each in its own subdirectory, and writes one summary row per run.
pub fn sweep(
    base: &ExperimentConfig,
    strategies: &[StrategyKind],
    sparsities: &[f64],
    distributions: &[Distribution],
    out_dir: &Path,
    mut progress: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    let data = load_datasets(base)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows = Vec::new();
    for &strategy in strategies {
        for &s in sparsities {
            for &distribution in distributions {
                let mut cfg = base.clone();
                cfg.train.strategy = strategy;
                cfg.train.sparsity.sparsity = s;
                cfg.train.sparsity.distribution = distribution;
                let name = format!("{strategy}_s{s}_{}", distribution.as_str());
                let out = train_on(&cfg, &data, |_| {})?;
                write_outputs(&cfg, &out, &out_dir.join(&name))?;
                let row = SweepRow {
                    strategy,
                    sparsity: s,
                    distribution,
                    final_test_acc: out.summary.final_test_acc,
                    best_test_acc: out.summary.best_test_acc,
                    active_params: out.summary.active_params,
                    shrunk_params: out.summary.shrunk_params,
                    run_dir: name,
                };
                progress(&row);
                rows.push(row);
            }
        }
    }
    let path = out_dir.join(SWEEP_FILE);
    fs::write(&path, sweep_csv(&rows)).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut s = String::from("strategy,sparsity,distribution,final_test_acc,best_test_acc,active_params,shrunk_params,run_dir\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.strategy,
            r.sparsity,
            r.distribution.as_str(),
            opt(r.final_test_acc),
            opt(r.best_test_acc),
            r.active_params,
            r.shrunk_params,
            r.run_dir
        )
        .unwrap();
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub layers: Vec<LayerStats>,
    pub dense_params: usize,
    pub active_params: usize,
    pub shrunk_params: usize,
    pub mask_images: Vec<PathBuf>,
}

/// Structural report for a checkpoint; writes one `mask_l{i}.pgm` per layer
/// when `image_dir` is given.
pub fn analyze(model: &Model, last: Option<&MetricsRecord>, image_dir: Option<&Path>) -> Result<Analysis> {
    let mut mask_images = Vec::new();
    if let Some(dir) = image_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, l) in model.layers.iter().enumerate() {
            let p = dir.join(format!("mask_l{i}.pgm"));
            export_mask_image(l, &p)?;
            mask_images.push(p);
        }
    }
    Ok(Analysis {
        layers: layer_stats(model, last),
        dense_params: model.total_weights(),
        active_params: model.total_active(),
        shrunk_params: shrunk_param_count(model),
        mask_images,
    })
}

impl Analysis {
    pub fn table(&self) -> String {
        let mut s = String::from(
            "layer kind    shape            size     active  density  empty_out      empty_in       dropped  inserted\n",
        );
        for l in &self.layers {
            let shape = format!("{}x{}x{}x{}", l.n_out, l.n_in, l.kh, l.kw);
            let pct = |e: usize, n: usize| format!("{e} ({:.1}%)", 100.0 * e as f64 / n as f64);
            writeln!(
                s,
                "{:<5} {:<7} {:<16} {:<8} {:<7} {:<8.4} {:<14} {:<14} {:<8} {}",
                l.layer,
                l.kind,
                shape,
                l.size,
                l.active,
                l.density,
                pct(l.empty_outputs, l.n_out),
                pct(l.empty_inputs, l.n_in),
                l.dropped,
                l.inserted
            )
            .unwrap();
        }
        writeln!(
            s,
            "dense params {}  active {}  shrunk (Params*) {}",
            self.dense_params, self.active_params, self.shrunk_params
        )
        .unwrap();
        s
    }
}
