//! Global top-k over per-layer gradient magnitudes, one layer at a time.
//!
//! The running buffer never holds more than `k` entries plus the current
//! layer's candidates, and the result equals a global sort of every
//! eligible `|gradient|` because the ordering is total: larger magnitude
//! first, then lower layer index, then lower position.

use std::cmp::Ordering;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct LayerCandidates<'a> {
    /// Dense gradient of the layer, indexed by flat weight position.
    pub grads: &'a [f64],
    /// Positions allowed to grow.
    pub eligible: &'a [usize],
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TopKSelection {
    pub counts: Vec<usize>,
    /// Selected positions per layer, ascending.
    pub positions: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    magnitude: f64,
    layer: usize,
    pos: usize,
}

fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.magnitude
        .total_cmp(&a.magnitude)
        .then(a.layer.cmp(&b.layer))
        .then(a.pos.cmp(&b.pos))
}

pub fn streaming_global_topk<'a, I>(layers: I, k: usize) -> Result<TopKSelection>
where
    I: IntoIterator<Item = LayerCandidates<'a>>,
{
    let mut buffer: Vec<Candidate> = Vec::with_capacity(k);
    let mut available = 0usize;
    let mut layer_count = 0usize;
    for (layer, cand) in layers.into_iter().enumerate() {
        layer_count += 1;
        available += cand.eligible.len();
        if k == 0 {
            continue;
        }
        buffer.extend(cand.eligible.iter().map(|&pos| Candidate {
            magnitude: cand.grads[pos].abs(),
            layer,
            pos,
        }));
        if buffer.len() > k {
            buffer.select_nth_unstable_by(k, rank);
            buffer.truncate(k);
        }
    }
    if available < k {
        return Err(Error::Shortfall {
            requested: k,
            available,
        });
    }
    let mut positions = vec![Vec::new(); layer_count];
    for c in &buffer {
        positions[c.layer].push(c.pos);
    }
    positions.iter_mut().for_each(|p| p.sort_unstable());
    Ok(TopKSelection {
        counts: positions.iter().map(Vec::len).collect(),
        positions,
    })
}
