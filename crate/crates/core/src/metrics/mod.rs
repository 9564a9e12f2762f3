//! Per-epoch records, mask structure analysis and report outputs.

mod csv;
mod pgm;
mod plot;
mod summary;

pub use csv::{parse_metrics_csv, read_metrics_csv, write_metrics_csv, metrics_csv_string};
pub use pgm::{export_mask_image, mask_image};
pub use plot::{accuracy_svg, active_params_svg, density_svg, emit_plots, PlotGeometry};
pub use summary::RunSummary;

use serde::{Deserialize, Serialize};

use crate::nn::{LayerKind, Model, SparseLayerState};

/// One layer's state at the end of an epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEpoch {
    /// Weight count of the layer; fixed over a run.
    pub size: usize,
    pub density: f64,
    pub dropped: usize,
    pub inserted: usize,
}

impl LayerEpoch {
    pub fn active(&self) -> usize {
        (self.density * self.size as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
    pub drop_fraction: f64,
    pub train_loss: f64,
    /// Percent, in `[0, 100]`.
    pub test_acc: f64,
    pub layers: Vec<LayerEpoch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    pub kind: String,
    pub n_out: usize,
    pub n_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub size: usize,
    pub active: usize,
    pub density: f64,
    pub empty_outputs: usize,
    pub empty_inputs: usize,
    pub dropped: usize,
    pub inserted: usize,
}

/// `(empty output units, empty input units)` of a layer's mask. An output is
/// empty when its whole row (every input channel and kernel tap) is zero;
/// an input is empty when no output uses it at any kernel tap.
pub fn empty_unit_stats(layer: &SparseLayerState) -> (usize, usize) {
    let s = layer.shape;
    let taps = s.kh * s.kw;
    let row = s.n_in * taps;
    let m = layer.mask.data();
    let mut out_used = vec![false; s.n_out];
    let mut in_used = vec![false; s.n_in];
    for (p, &v) in m.iter().enumerate() {
        if v != 0.0 {
            out_used[p / row] = true;
            in_used[(p % row) / taps] = true;
        }
    }
    (
        out_used.iter().filter(|&&u| !u).count(),
        in_used.iter().filter(|&&u| !u).count(),
    )
}

/// Dense weight count left after deleting every empty output and input of
/// each layer independently; removals are not propagated between layers.
pub fn shrunk_param_count(model: &Model) -> usize {
    model.layers.iter().map(shrunk_layer_params).sum()
}

pub fn shrunk_layer_params(layer: &SparseLayerState) -> usize {
    let s = layer.shape;
    let (eo, ei) = empty_unit_stats(layer);
    (s.n_out - eo) * (s.n_in - ei) * s.kh * s.kw
}

/// Stats for every layer; drop/insert counts come from `last` when given.
pub fn layer_stats(model: &Model, last: Option<&MetricsRecord>) -> Vec<LayerStats> {
    model
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let (empty_outputs, empty_inputs) = empty_unit_stats(l);
            let moved = last.and_then(|r| r.layers.get(i));
            LayerStats {
                layer: i,
                kind: match l.kind {
                    LayerKind::Linear => "linear".into(),
                    LayerKind::Conv { .. } => "conv".into(),
                },
                n_out: l.shape.n_out,
                n_in: l.shape.n_in,
                kh: l.shape.kh,
                kw: l.shape.kw,
                size: l.size(),
                active: l.active_count(),
                density: l.density(),
                empty_outputs,
                empty_inputs,
                dropped: moved.map_or(0, |m| m.dropped),
                inserted: moved.map_or(0, |m| m.inserted),
            }
        })
        .collect()
}
