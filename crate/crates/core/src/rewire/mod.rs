//! Drop-and-grow rewiring.
//!
//! Every strategy removes weights by magnitude and grows the same number
//! back, so the global active count never changes. SET and RigL regrow
//! inside the layer they dropped from; DSR and GGR move weights between
//! layers. Positions dropped in a step are not eligible for regrowth in
//! that step unless a layer has nowhere else to put them.

mod dsr;
mod grow;
mod schedule;
mod topk;

pub use dsr::{dsr_allocate, dsr_drop, DsrState};
pub use grow::{eligible_positions, grow_ggr, grow_rigl, grow_set, local_magnitude_drop, INSERT_VALUE};
pub use schedule::{drop_fraction, RewireSchedule};
pub use topk::{streaming_global_topk, LayerCandidates, TopKSelection};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::apportion::largest_remainder;
use crate::error::{Error, Result};
use crate::nn::{Model, SparseLayerState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Set,
    Rigl,
    Dsr,
    Ggr,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::Set,
        StrategyKind::Rigl,
        StrategyKind::Dsr,
        StrategyKind::Ggr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Set => "set",
            StrategyKind::Rigl => "rigl",
            StrategyKind::Dsr => "dsr",
            StrategyKind::Ggr => "ggr",
        }
    }

    fn needs_gradients(self) -> bool {
        matches!(self, StrategyKind::Rigl | StrategyKind::Ggr)
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "set" => Ok(StrategyKind::Set),
            "rigl" => Ok(StrategyKind::Rigl),
            "dsr" => Ok(StrategyKind::Dsr),
            "ggr" => Ok(StrategyKind::Ggr),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewirePlan {
    pub strategy: StrategyKind,
    pub drops: Vec<usize>,
    pub inserts: Vec<usize>,
}

impl RewirePlan {
    pub fn empty(strategy: StrategyKind, layers: usize) -> Self {
        Self {
            strategy,
            drops: vec![0; layers],
            inserts: vec![0; layers],
        }
    }

    pub fn total_dropped(&self) -> usize {
        self.drops.iter().sum()
    }

    pub fn total_inserted(&self) -> usize {
        self.inserts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewireOutcome {
    pub plan: RewirePlan,
    pub drop_fraction: f64,
    /// Positions dropped or grown, per layer; their optimizer state must be reset.
    pub toggled: Vec<Vec<usize>>,
    /// Growths that had to fall back to regrowing just-dropped positions
    /// or to random placement because gradient candidates ran out.
    pub fallback: usize,
}

/// A strategy plus whatever state it carries between rewiring steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Rewirer {
    pub kind: StrategyKind,
    pub schedule: RewireSchedule,
    pub dsr: DsrState,
}

impl Rewirer {
    pub fn new(kind: StrategyKind, schedule: RewireSchedule) -> Self {
        Self {
            kind,
            schedule,
            dsr: DsrState::default(),
        }
    }

    pub fn with_dsr(mut self, dsr: DsrState) -> Self {
        self.dsr = dsr;
        self
    }
}

/// Per-layer drop counts `round(f * active_l)`, corrected so they sum to
/// `round(f * total_active)`.
pub fn per_layer_drop_counts(active: &[usize], fraction: f64) -> Vec<usize> {
    let total: usize = active.iter().sum();
    let target = (fraction * total as f64).round() as usize;
    let quotas: Vec<f64> = active.iter().map(|&a| fraction * a as f64).collect();
    largest_remainder(&quotas, target, active).expect("drop target within active counts")
}

/// One rewiring step at `epoch`. `batch`/`labels` feed the dense gradients
/// RigL and GGR rank candidates by.
pub fn rewire_step<R: Rng + ?Sized>(
    model: &mut Model,
    rewirer: &mut Rewirer,
    epoch: usize,
    batch: &Tensor,
    labels: &[usize],
    rng: &mut R,
) -> Result<RewireOutcome> {
    let f = drop_fraction(epoch, &rewirer.schedule)?;
    let layers = model.layers.len();
    let mut outcome = RewireOutcome {
        plan: RewirePlan::empty(rewirer.kind, layers),
        drop_fraction: f,
        toggled: vec![Vec::new(); layers],
        fallback: 0,
    };
    if f == 0.0 {
        return Ok(outcome);
    }

    let dropped: Vec<Vec<usize>> = if rewirer.kind == StrategyKind::Dsr {
        let target = (f * model.total_active() as f64).round() as usize;
        dsr_drop(&mut model.layers, &mut rewirer.dsr, target)
    } else {
        let active: Vec<usize> = model.layers.iter().map(|l| l.active_count()).collect();
        let counts = per_layer_drop_counts(&active, f);
        model
            .layers
            .iter_mut()
            .zip(counts)
            .map(|(layer, c)| local_magnitude_drop(layer, c, rng))
            .collect::<Result<_>>()?
    };
    if rewirer.kind.needs_gradients() {
        model.dense_weight_grads(batch, labels)?;
    }
    let eligible: Vec<Vec<usize>> = model
        .layers
        .iter()
        .zip(&dropped)
        .map(|(l, d)| eligible_positions(l, d))
        .collect();

    let inserted = match rewirer.kind {
        StrategyKind::Set | StrategyKind::Rigl => {
            let kind = rewirer.kind;
            let mut inserted = Vec::with_capacity(layers);
            for ((layer, elig), d) in model.layers.iter_mut().zip(&eligible).zip(&dropped) {
                let n = d.len();
                let primary = n.min(elig.len());
                let mut got = match kind {
                    StrategyKind::Set => grow_set(layer, elig, primary, rng)?,
                    _ => grow_rigl(layer, elig, primary)?,
                };
                if primary < n {
                    got.extend(regrow_anywhere(layer, n - primary, rng)?);
                    outcome.fallback += n - primary;
                }
                inserted.push(got);
            }
            inserted
        }
        StrategyKind::Dsr => {
            let total: usize = dropped.iter().map(Vec::len).sum();
            let active: Vec<usize> = model.layers.iter().map(|l| l.active_count()).collect();
            let mut capacity: Vec<usize> = eligible.iter().map(Vec::len).collect();
            let mut pools = eligible.clone();
            if capacity.iter().sum::<usize>() < total {
                pools = model.layers.iter().map(|l| l.inactive_positions()).collect();
                capacity = pools.iter().map(Vec::len).collect();
                outcome.fallback += total - eligible.iter().map(Vec::len).sum::<usize>();
            }
            let counts = dsr_allocate(total, &active, &capacity)?;
            model
                .layers
                .iter_mut()
                .zip(&pools)
                .zip(counts)
                .map(|((layer, pool), c)| grow_set(layer, pool, c, rng))
                .collect::<Result<Vec<_>>>()?
        }
        StrategyKind::Ggr => {
            let k: usize = dropped.iter().map(Vec::len).sum();
            let available: usize = eligible.iter().map(Vec::len).sum();
            let candidates = model.layers.iter().zip(&eligible).map(|(l, e)| LayerCandidates {
                grads: l.grad_buffer.as_ref().expect("dense gradients computed").data(),
                eligible: e,
            });
            let selection = match streaming_global_topk(candidates, k) {
                Ok(sel) => sel,
                Err(Error::Shortfall { .. }) => {
                    let candidates = model.layers.iter().zip(&eligible).map(|(l, e)| LayerCandidates {
                        grads: l.grad_buffer.as_ref().expect("dense gradients computed").data(),
                        eligible: e,
                    });
                    streaming_global_topk(candidates, available)?
                }
                Err(e) => return Err(e),
            };
            let mut inserted = Vec::with_capacity(layers);
            for ((layer, elig), &c) in model.layers.iter_mut().zip(&eligible).zip(&selection.counts) {
                inserted.push(grow_ggr(layer, elig, c, rng)?);
            }
            let deficit = k - selection.counts.iter().sum::<usize>();
            if deficit > 0 {
                outcome.fallback += deficit;
                for (i, extra) in spread_by_free_room(&model.layers, deficit) {
                    inserted[i].extend(regrow_anywhere(&mut model.layers[i], extra, rng)?);
                }
            }
            inserted
        }
    };

    for (i, (d, g)) in dropped.iter().zip(&inserted).enumerate() {
        outcome.plan.drops[i] = d.len();
        outcome.plan.inserts[i] = g.len();
        let mut t: Vec<usize> = d.iter().chain(g).copied().collect();
        t.sort_unstable();
        t.dedup();
        outcome.toggled[i] = t;
    }
    model.clear_grad_buffers();
    debug_assert_eq!(outcome.plan.total_dropped(), outcome.plan.total_inserted());
    Ok(outcome)
}

/// Grows `n` random weights among every inactive position, dropped ones included.
fn regrow_anywhere<R: Rng + ?Sized>(layer: &mut SparseLayerState, n: usize, rng: &mut R) -> Result<Vec<usize>> {
    let free = layer.inactive_positions();
    grow_set(layer, &free, n, rng)
}

/// Hands `deficit` out to the layers with the most inactive positions first.
fn spread_by_free_room(layers: &[SparseLayerState], deficit: usize) -> Vec<(usize, usize)> {
    let mut order: Vec<(usize, usize)> = layers
        .iter()
        .enumerate()
        .map(|(i, l)| (i, l.size() - l.active_count()))
        .collect();
    order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut left = deficit;
    let mut out = Vec::new();
    for (i, free) in order {
        if left == 0 {
            break;
        }
        let take = free.min(left);
        if take > 0 {
            out.push((i, take));
            left -= take;
        }
    }
    out
}
