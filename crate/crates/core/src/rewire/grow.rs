//! Per-layer drop and grow primitives.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::SparseLayerState;

/// Value given to every newly grown weight.
pub const INSERT_VALUE: f64 = 1e-10;

/// Deactivates the `count` active weights of smallest magnitude. Equal
/// magnitudes are ordered by a uniform random permutation.
pub fn local_magnitude_drop<R: Rng + ?Sized>(
    layer: &mut SparseLayerState,
    count: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let mut active = layer.active_positions();
    if count > active.len() {
        return Err(Error::Contract(format!(
            "cannot drop {count} of {} active weights",
            active.len()
        )));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    active.shuffle(rng);
    let w = layer.weight.data();
    active.sort_by(|&a, &b| w[a].abs().total_cmp(&w[b].abs()));
    let mut dropped = active[..count].to_vec();
    dropped.sort_unstable();
    for &p in &dropped {
        layer.deactivate(p);
    }
    Ok(dropped)
}

/// Inactive positions of `layer` that are not in `excluded`.
pub fn eligible_positions(layer: &SparseLayerState, excluded: &[usize]) -> Vec<usize> {
    let mut skip = vec![false; layer.size()];
    for &p in excluded {
        skip[p] = true;
    }
    (0..layer.size())
        .filter(|&p| !layer.is_active(p) && !skip[p])
        .collect()
}

fn check_room(n: usize, eligible: &[usize]) -> Result<()> {
    if n > eligible.len() {
        return Err(Error::Contract(format!(
            "cannot grow {n} weights into {} eligible positions",
            eligible.len()
        )));
    }
    Ok(())
}

/// Activates `n` of the `eligible` positions chosen uniformly at random.
pub fn grow_set<R: Rng + ?Sized>(
    layer: &mut SparseLayerState,
    eligible: &[usize],
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_room(n, eligible)?;
    let mut chosen: Vec<usize> = rand::seq::index::sample(rng, eligible.len(), n)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    chosen.sort_unstable();
    for &p in &chosen {
        layer.activate(p, INSERT_VALUE);
    }
    Ok(chosen)
}

/// Activates the `n` eligible positions with the largest dense gradient
/// magnitude, ties broken by position.
pub fn grow_rigl(layer: &mut SparseLayerState, eligible: &[usize], n: usize) -> Result<Vec<usize>> {
    let grads = layer.grad_buffer.as_ref().ok_or(Error::MissingGradients)?;
    check_room(n, eligible)?;
    let g = grads.data();
    let mut order = eligible.to_vec();
    order.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()).then(a.cmp(&b)));
    let mut chosen = order[..n].to_vec();
    chosen.sort_unstable();
    for &p in &chosen {
        layer.activate(p, INSERT_VALUE);
    }
    Ok(chosen)
}

/// Half by gradient (rounded up), the rest uniformly among what is left.
pub fn grow_ggr<R: Rng + ?Sized>(
    layer: &mut SparseLayerState,
    eligible: &[usize],
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if layer.grad_buffer.is_none() {
        return Err(Error::MissingGradients);
    }
    check_room(n, eligible)?;
    let by_gradient = n.div_ceil(2);
    let mut chosen = grow_rigl(layer, eligible, by_gradient)?;
    let rest: Vec<usize> = eligible
        .iter()
        .copied()
        .filter(|&p| !layer.is_active(p))
        .collect();
    chosen.extend(grow_set(layer, &rest, n - by_gradient, rng)?);
    chosen.sort_unstable();
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerKind, LayerShape};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(weights: &[f64]) -> SparseLayerState {
        let n = weights.len();
        SparseLayerState::new(
            LayerKind::Linear,
            LayerShape::linear(n, 1),
            Tensor::new(&[1, n], weights.to_vec()).unwrap(),
            Tensor::zeros(&[1]),
        )
        .unwrap()
    }

    fn with_mask(weights: &[f64], mask: &[f64]) -> SparseLayerState {
        let mut l = layer(weights);
        l.set_mask(Tensor::new(&[1, mask.len()], mask.to_vec()).unwrap()).unwrap();
        l
    }

    #[test]
    fn drops_unique_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut l = layer(&[0.5, -0.01, 0.3]);
        assert_eq!(local_magnitude_drop(&mut l, 1, &mut rng).unwrap(), vec![1]);
        assert_eq!(l.mask.data(), &[1., 0., 1.]);
        assert_eq!(l.weight.data(), &[0.5, 0.0, 0.3]);

        let before = l.clone();
        assert!(local_magnitude_drop(&mut l, 0, &mut rng).unwrap().is_empty());
        assert_eq!(l, before);
        assert!(local_magnitude_drop(&mut l, 3, &mut rng).is_err());
    }

    #[test]
    fn drop_tie_break_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let trials = 10_000;
        let mut hits = [0usize; 4];
        for _ in 0..trials {
            let mut l = layer(&[0.2, -0.2, 0.2, 0.2]);
            for p in local_magnitude_drop(&mut l, 2, &mut rng).unwrap() {
                hits[p] += 1;
            }
        }
        for h in hits {
            let f = h as f64 / trials as f64;
            assert!((f - 0.5).abs() < 0.02, "frequency {f}");
        }
    }

    #[test]
    fn set_fills_and_noops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut l = with_mask(&[1.0, 0.0, 0.0, 0.0], &[1., 0., 0., 0.]);
        let free = eligible_positions(&l, &[]);
        assert_eq!(free, vec![1, 2, 3]);
        assert!(grow_set(&mut l, &free, 0, &mut rng).unwrap().is_empty());
        assert!(grow_set(&mut l, &free, 4, &mut rng).is_err());
        assert_eq!(grow_set(&mut l, &free, 3, &mut rng).unwrap(), vec![1, 2, 3]);
        assert_eq!(l.weight.data(), &[1.0, INSERT_VALUE, INSERT_VALUE, INSERT_VALUE]);
    }

    #[test]
    fn set_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trials = 10_000;
        let mut hits = [0usize; 10];
        for _ in 0..trials {
            let mut l = with_mask(&[0.0; 10], &[0.0; 10]);
            let free = eligible_positions(&l, &[]);
            for p in grow_set(&mut l, &free, 3, &mut rng).unwrap() {
                hits[p] += 1;
            }
        }
        for h in hits {
            let f = h as f64 / trials as f64;
            assert!((f - 0.3).abs() < 0.02, "frequency {f}");
        }
    }

    #[test]
    fn rigl_takes_largest_gradient() {
        let mut l = with_mask(&[0.0; 3], &[0.0; 3]);
        assert!(matches!(grow_rigl(&mut l, &[0, 1, 2], 1), Err(Error::MissingGradients)));
        l.grad_buffer = Some(Tensor::new(&[1, 3], vec![0.1, -0.9, 0.5]).unwrap());
        assert_eq!(grow_rigl(&mut l, &[0, 1, 2], 1).unwrap(), vec![1]);
        let mut l2 = with_mask(&[0.0; 3], &[0.0; 3]);
        l2.grad_buffer = l.grad_buffer.clone();
        assert_eq!(grow_rigl(&mut l2, &[0, 1, 2], 3).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn ggr_splits_half_and_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grads = Tensor::new(&[1, 6], vec![0.9, 0.8, 0.1, 0.05, 0.01, 0.0]).unwrap();
        let mut seen = [0usize; 6];
        for _ in 0..200 {
            let mut l = with_mask(&[0.0; 6], &[0.0; 6]);
            l.grad_buffer = Some(grads.clone());
            let got = grow_ggr(&mut l, &[0, 1, 2, 3, 4, 5], 4, &mut rng).unwrap();
            assert_eq!(got.len(), 4);
            assert!(got.contains(&0) && got.contains(&1));
            for p in got {
                seen[p] += 1;
                assert_eq!(l.weight.data()[p], INSERT_VALUE);
            }
        }
        // The random half reaches every remaining position.
        assert!(seen[2..].iter().all(|&c| c > 0));

        let mut l = with_mask(&[0.0; 6], &[0.0; 6]);
        l.grad_buffer = Some(grads);
        assert_eq!(grow_ggr(&mut l, &[0, 1, 2, 3, 4, 5], 1, &mut rng).unwrap(), vec![0]);
    }
}
