//! Experiment configuration in a flat `key = value` format with
//! `[model]`, `[sparsity]`, `[rewire]`, `[train]` and `[data]` sections.
//! `#` starts a comment. Unknown sections or keys are errors.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{Family, ModelSpec};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// A directory holding the four standard MNIST-format IDX files
    /// (optionally gzip-compressed, with a `.gz` suffix).
    Idx { dir: PathBuf },
    Synthetic {
        classes: usize,
        train: usize,
        test: usize,
        dim: usize,
        margin: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Keep only the first `n` samples; 0 keeps everything.
    pub train_limit: usize,
    pub test_limit: usize,
    pub normalize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Idx {
                dir: PathBuf::from("data/mnist"),
            },
            train_limit: 0,
            test_limit: 0,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::mlp([1, 28, 28], &[256, 128], 10),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

fn list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, ()> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| x.trim().parse().map_err(|_| ())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn shape3(v: &str) -> std::result::Result<[usize; 3], ()> {
    let parts: Vec<usize> = v.split('x').map(|x| x.trim().parse().map_err(|_| ())).collect::<std::result::Result<_, _>>()?;
    <[usize; 3]>::try_from(parts).map_err(|_| ())
}

// Synthetic-source fields are collected separately and assembled at the end.
#[derive(Default)]
struct SyntheticKeys {
    classes: Option<usize>,
    train: Option<usize>,
    test: Option<usize>,
    dim: Option<usize>,
    margin: Option<f64>,
    seed: Option<u64>,
}

impl ExperimentConfig {
    /// Parses `text`; relative data paths are resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut section = String::new();
        let mut source = "idx".to_string();
        let mut idx_dir: Option<PathBuf> = None;
        let mut syn = SyntheticKeys::default();

        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |detail: String| Error::Config(format!("line {line_no}: {detail}"));
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("malformed section header `{line}`")))?;
                if !["model", "sparsity", "rewire", "train", "data"].contains(&name) {
                    return Err(err(format!("unknown section `[{name}]`")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
            let bad = || err(format!("invalid value `{value}` for `{key}`"));
            macro_rules! parse {
                () => {
                    value.parse().map_err(|_| bad())?
                };
            }
            let m = &mut cfg.model;
            let t = &mut cfg.train;
            let d = &mut cfg.data;
            match (section.as_str(), key) {
                ("model", "family") => m.family = value.parse::<Family>().map_err(|_| bad())?,
                ("model", "input") => m.input = shape3(value).map_err(|_| bad())?,
                ("model", "classes") => m.classes = parse!(),
                ("model", "widths") => m.widths = list(value).map_err(|_| bad())?,
                ("model", "fc_width") => m.fc_width = parse!(),
                ("sparsity", "sparsity") => t.sparsity.sparsity = parse!(),
                ("sparsity", "distribution") => t.sparsity.distribution = value.parse().map_err(|_| bad())?,
                ("sparsity", "rescale_init") => t.rescale_init = parse!(),
                ("rewire", "strategy") => t.strategy = value.parse().map_err(|_| bad())?,
                ("rewire", "initial_fraction") => t.schedule.initial_fraction = parse!(),
                ("rewire", "end_epoch") => t.schedule.end_epoch = parse!(),
                ("rewire", "at_epoch_start") => t.schedule.at_epoch_start = parse!(),
                ("rewire", "dsr_threshold") => t.dsr.threshold = parse!(),
                ("rewire", "dsr_tolerance") => t.dsr.tolerance = parse!(),
                ("train", "epochs") => t.epochs = parse!(),
                ("train", "batch_size") => t.batch_size = parse!(),
                ("train", "base_lr") => t.base_lr = parse!(),
                ("train", "lr_decay_factor") => t.lr_decay_factor = parse!(),
                ("train", "milestones") => t.milestones = list(value).map_err(|_| bad())?,
                ("train", "momentum") => t.momentum = parse!(),
                ("train", "weight_decay") => t.weight_decay = parse!(),
                ("train", "seed") => t.seed = parse!(),
                ("data", "source") => {
                    if value != "idx" && value != "synthetic" {
                        return Err(bad());
                    }
                    source = value.to_string();
                }
                ("data", "dir") => idx_dir = Some(PathBuf::from(value)),
                ("data", "train_limit") => d.train_limit = parse!(),
                ("data", "test_limit") => d.test_limit = parse!(),
                ("data", "normalize") => d.normalize = parse!(),
                ("data", "classes") => syn.classes = Some(parse!()),
                ("data", "train_samples") => syn.train = Some(parse!()),
                ("data", "test_samples") => syn.test = Some(parse!()),
                ("data", "dim") => syn.dim = Some(parse!()),
                ("data", "margin") => syn.margin = Some(parse!()),
                ("data", "data_seed") => syn.seed = Some(parse!()),
                ("", _) => return Err(err(format!("`{key}` appears before any section"))),
                (s, _) => return Err(err(format!("unknown key `{key}` in [{s}]"))),
            }
        }

        cfg.data.source = if source == "synthetic" {
            if idx_dir.is_some() {
                return Err(Error::Config("`dir` only applies to the idx data source".into()));
            }
            DataSource::Synthetic {
                classes: syn.classes.unwrap_or(2),
                train: syn.train.unwrap_or(512),
                test: syn.test.unwrap_or(256),
                dim: syn.dim.unwrap_or(16),
                margin: syn.margin.unwrap_or(4.0),
                seed: syn.seed.unwrap_or(0),
            }
        } else {
            if syn.classes.is_some() || syn.train.is_some() || syn.test.is_some() || syn.dim.is_some() || syn.margin.is_some() || syn.seed.is_some() {
                return Err(Error::Config("synthetic data keys need `source = synthetic`".into()));
            }
            let dir = idx_dir.unwrap_or_else(|| PathBuf::from("data/mnist"));
            DataSource::Idx {
                dir: if dir.is_absolute() { dir } else { base_dir.join(dir) },
            }
        };
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The configuration in the same format [`ExperimentConfig::parse`] reads.
    pub fn to_text(&self) -> String {
        let (m, t, d) = (&self.model, &self.train, &self.data);
        let mut s = String::new();
        let [c, h, w] = m.input;
        writeln!(s, "[model]\nfamily = {}\ninput = {c}x{h}x{w}\nclasses = {}", m.family.as_str(), m.classes).unwrap();
        writeln!(s, "widths = {}\nfc_width = {}\n", join(&m.widths), m.fc_width).unwrap();
        writeln!(
            s,
            "[sparsity]\nsparsity = {}\ndistribution = {}\nrescale_init = {}\n",
            t.sparsity.sparsity,
            t.sparsity.distribution.as_str(),
            t.rescale_init
        )
        .unwrap();
        writeln!(
            s,
            "[rewire]\nstrategy = {}\ninitial_fraction = {}\nend_epoch = {}\nat_epoch_start = {}\ndsr_threshold = {}\ndsr_tolerance = {}\n",
            t.strategy, t.schedule.initial_fraction, t.schedule.end_epoch, t.schedule.at_epoch_start, t.dsr.threshold, t.dsr.tolerance
        )
        .unwrap();
        writeln!(
            s,
            "[train]\nepochs = {}\nbatch_size = {}\nbase_lr = {}\nlr_decay_factor = {}\nmilestones = {}\nmomentum = {}\nweight_decay = {}\nseed = {}\n",
            t.epochs,
            t.batch_size,
            t.base_lr,
            t.lr_decay_factor,
            join(&t.milestones),
            t.momentum,
            t.weight_decay,
            t.seed
        )
        .unwrap();
        writeln!(s, "[data]").unwrap();
        match &d.source {
            DataSource::Idx { dir } => writeln!(s, "source = idx\ndir = {}", dir.display()).unwrap(),
            DataSource::Synthetic {
                classes,
                train,
                test,
                dim,
                margin,
                seed,
            } => writeln!(
                s,
                "source = synthetic\nclasses = {classes}\ntrain_samples = {train}\ntest_samples = {test}\ndim = {dim}\nmargin = {margin}\ndata_seed = {seed}"
            )
            .unwrap(),
        }
        writeln!(
            s,
            "train_limit = {}\ntest_limit = {}\nnormalize = {}",
            d.train_limit, d.test_limit, d.normalize
        )
        .unwrap();
        s
    }
}
