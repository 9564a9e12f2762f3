use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat JSON written at the end of a run: the configuration echoed back,
/// followed by the final numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub family: String,
    pub input: [usize; 3],
    pub classes: usize,
    pub widths: Vec<usize>,
    pub fc_width: usize,
    pub strategy: String,
    pub sparsity: f64,
    pub distribution: String,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    pub milestones: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub initial_drop_fraction: f64,
    pub rewire_end_epoch: usize,
    pub dataset: String,
    pub train_samples: usize,
    pub test_samples: usize,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
    /// Percent; `None` for zero-epoch runs.
    pub final_test_acc: Option<f64>,
    pub best_test_acc: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub dense_params: usize,
    pub active_params: usize,
    pub shrunk_params: usize,
    pub final_densities: Vec<f64>,
    pub metrics_csv: String,
    pub wall_clock_secs: f64,
}

impl RunSummary {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("summary serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            detail: e.to_string(),
        })
    }
}
