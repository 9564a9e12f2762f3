//! Adaptive-threshold dropping and density-proportional reallocation.

use serde::{Deserialize, Serialize};

use crate::apportion::largest_remainder;
use crate::error::{Error, Result};
use crate::nn::SparseLayerState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DsrState {
    /// Magnitude threshold `H`; active weights below it are dropped.
    pub threshold: f64,
    /// Relative tolerance band around the target drop count.
    pub tolerance: f64,
}

impl Default for DsrState {
    fn default() -> Self {
        Self {
            threshold: 1e-3,
            tolerance: 0.1,
        }
    }
}

impl DsrState {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(Error::Config(format!("DSR threshold must be positive, got {}", self.threshold)));
        }
        if !(0.0..1.0).contains(&self.tolerance) {
            return Err(Error::Config(format!("DSR tolerance must lie in [0, 1), got {}", self.tolerance)));
        }
        Ok(())
    }
}

/// Drops every active weight with `|w| < H` in every layer, then doubles
/// `H` when too few were dropped or halves it when too many were.
pub fn dsr_drop(
    layers: &mut [SparseLayerState],
    state: &mut DsrState,
    target_count: usize,
) -> Vec<Vec<usize>> {
    let h = state.threshold;
    let mut dropped = Vec::with_capacity(layers.len());
    for layer in layers.iter_mut() {
        let hit: Vec<usize> = layer
            .active_positions()
            .into_iter()
            .filter(|&p| layer.weight.data()[p].abs() < h)
            .collect();
        for &p in &hit {
            layer.deactivate(p);
        }
        dropped.push(hit);
    }
    let total: usize = dropped.iter().map(Vec::len).sum();
    let target = target_count as f64;
    if (total as f64) < (1.0 - state.tolerance) * target {
        state.threshold *= 2.0;
    } else if (total as f64) > (1.0 + state.tolerance) * target {
        state.threshold /= 2.0;
    }
    dropped
}

/// Splits `dropped_total` across layers in proportion to their remaining
/// active counts, never exceeding `capacity`; capped layers pass their
/// excess on to the others. When no layer has active weights left the
/// split follows capacity instead.
pub fn dsr_allocate(dropped_total: usize, active: &[usize], capacity: &[usize]) -> Result<Vec<usize>> {
    if capacity.iter().sum::<usize>() < dropped_total {
        return Err(Error::Contract(format!(
            "{dropped_total} weights to place but only {} free positions",
            capacity.iter().sum::<usize>()
        )));
    }
    let n = active.len();
    let mut counts = vec![0usize; n];
    let mut open: Vec<usize> = (0..n).filter(|&i| capacity[i] > 0).collect();
    let mut remaining = dropped_total;
    while remaining > 0 {
        let mut weight: Vec<f64> = open.iter().map(|&i| active[i] as f64).collect();
        if weight.iter().sum::<f64>() == 0.0 {
            weight = open.iter().map(|&i| capacity[i] as f64).collect();
        }
        let wsum: f64 = weight.iter().sum();
        let quotas: Vec<f64> = weight.iter().map(|w| remaining as f64 * w / wsum).collect();
        let full: Vec<usize> = open
            .iter()
            .zip(&quotas)
            .filter(|&(&i, &q)| q >= capacity[i] as f64)
            .map(|(&i, _)| i)
            .collect();
        if full.is_empty() {
            let caps: Vec<usize> = open.iter().map(|&i| capacity[i]).collect();
            let rounded = largest_remainder(&quotas, remaining, &caps)
                .expect("capacity checked above");
            for (&i, c) in open.iter().zip(rounded) {
                counts[i] += c;
            }
            break;
        }
        for i in full {
            counts[i] = capacity[i];
            remaining -= capacity[i];
            open.retain(|&o| o != i);
        }
    }
    Ok(counts)
}
