use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dst_core::checkpoint;
use dst_core::config::ExperimentConfig;
use dst_core::experiment::{self, METRICS_FILE};
use dst_core::metrics::{emit_plots, read_metrics_csv};
use dst_core::rewire::StrategyKind;
use dst_core::sparsity::Distribution;
use dst_core::train::TrainEvent;
use dst_core::Error;

// Output goes through these so a closed pipe (`dst ... | head`) is not a panic.
macro_rules! say_raw {
    ($($t:tt)*) => {{
        let _ = write!(std::io::stdout().lock(), $($t)*);
    }};
}
macro_rules! say {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($t)*);
    }};
}

#[derive(Parser)]
#[command(name = "dst", version, about = "Dynamic sparse training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration; writes metrics.csv, summary.json, model.ckpt.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        strategy: Option<StrategyKind>,
        #[arg(long)]
        sparsity: Option<f64>,
        #[arg(long)]
        distribution: Option<Distribution>,
        /// Suppress per-epoch progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Report per-layer density, empty units and Params* for a checkpoint.
    Analyze {
        /// Checkpoint file, or a run directory containing model.ckpt.
        checkpoint: PathBuf,
        /// Metrics CSV whose last row supplies drop/insert counts.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Where to write mask_l{i}.pgm images.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Render SVG charts from a metrics CSV.
    Plot {
        /// Metrics CSV, or a run directory containing metrics.csv.
        metrics: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train every strategy x sparsity x distribution combination.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "set,rigl,dsr,ggr")]
        strategy: Vec<StrategyKind>,
        #[arg(long, value_delimiter = ',', default_value = "0.9,0.97,0.99")]
        sparsity: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "erk,uniform")]
        distribution: Vec<Distribution>,
    },
}

#[derive(Args)]
struct Common {
    /// Config file (`key = value` with [model], [sparsity], [rewire], [train], [data]).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs/latest")]
    out_dir: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        Ok(cfg)
    }
}

/// Exit codes: 1 runtime failure, 2 usage, 3 invalid config, 4 I/O, 5 malformed input file.
fn category(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Config(_) => ("config", 3),
        Error::Io { .. } => ("io", 4),
        Error::Parse { .. } | Error::Csv { .. } => ("parse", 5),
        _ => ("runtime", 1),
    }
}

fn in_dir(path: &Path, file: &str) -> PathBuf {
    if path.is_dir() {
        path.join(file)
    } else {
        path.to_path_buf()
    }
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train {
            common,
            strategy,
            sparsity,
            distribution,
            quiet,
        } => {
            let mut cfg = common.load()?;
            if let Some(s) = strategy {
                cfg.train.strategy = s;
            }
            if let Some(s) = sparsity {
                cfg.train.sparsity.sparsity = s;
            }
            if let Some(d) = distribution {
                cfg.train.sparsity.distribution = d;
            }
            cfg.train.validate()?;
            let out = experiment::run_experiment(&cfg, &common.out_dir, |ev| {
                if let (false, TrainEvent::EpochEnd { record: r, .. }) = (quiet, ev) {
                    say!(
                        "epoch {:>3}  lr {:<8.5}  drop {:<7.4}  loss {:<8.5}  test {:.2}%",
                        r.epoch, r.lr, r.drop_fraction, r.train_loss, r.test_acc
                    );
                }
            })?;
            match out.summary.final_test_acc {
                Some(a) => say!("final test accuracy {a:.2}%"),
                None => say!("no epochs run"),
            }
            say!("outputs in {}", common.out_dir.display());
        }
        Command::Analyze {
            checkpoint: path,
            metrics,
            out_dir,
            json,
        } => {
            let ckpt = in_dir(&path, experiment::CHECKPOINT_FILE);
            let model = checkpoint::load(&ckpt)?;
            let metrics = metrics.or_else(|| {
                let p = ckpt.with_file_name(METRICS_FILE);
                p.exists().then_some(p)
            });
            let records = match &metrics {
                Some(p) => read_metrics_csv(p)?,
                None => Vec::new(),
            };
            let report = experiment::analyze(&model, records.last(), out_dir.as_deref())?;
            if json {
                let body = serde_json::json!({
                    "layers": report.layers,
                    "dense_params": report.dense_params,
                    "active_params": report.active_params,
                    "shrunk_params": report.shrunk_params,
                });
                say!("{}", serde_json::to_string_pretty(&body).expect("report serializes"));
            } else {
                say_raw!("{}", report.table());
                for p in &report.mask_images {
                    say!("wrote {}", p.display());
                }
            }
        }
        Command::Plot { metrics, out_dir } => {
            let csv = in_dir(&metrics, METRICS_FILE);
            let dir = out_dir.unwrap_or_else(|| csv.parent().map(Path::to_path_buf).unwrap_or_default());
            for p in emit_plots(&csv, &dir)? {
                say!("wrote {}", p.display());
            }
        }
        Command::Sweep {
            common,
            strategy,
            sparsity,
            distribution,
        } => {
            let cfg = common.load()?;
            let total = strategy.len() * sparsity.len() * distribution.len();
            let mut done = 0;
            let rows = experiment::sweep(&cfg, &strategy, &sparsity, &distribution, &common.out_dir, |row| {
                done += 1;
                eprintln!("[{done}/{total}] {}", row.run_dir);
            })?;
            say_raw!("{}", experiment::sweep_csv(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = category(&e);
            eprintln!("error[{kind}]: {e}");
            ExitCode::from(code)
        }
    }
}
