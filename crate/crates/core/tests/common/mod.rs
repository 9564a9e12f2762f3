//! Shared oracles for the integration tests.
#![allow(dead_code)]

use dst_core::autograd::{Graph, NodeId};
use dst_core::Tensor;
use rand::Rng;

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-4;

/// A graph op under test: builds its output from the leaf nodes.
pub type Build<'a> = &'a dyn Fn(&mut Graph, &[NodeId]) -> NodeId;

/// Scalar probe `sum(op(inputs) * probe)`, so every output element matters.
fn evaluate(build: Build<'_>, inputs: &[Tensor], probe: &Tensor, grads: bool) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let leaves: Vec<NodeId> = inputs
        .iter()
        .map(|t| if grads { g.param(t.clone()) } else { g.constant(t.clone()) }.unwrap())
        .collect();
    let out = build(&mut g, &leaves);
    let p = g.constant(probe.clone()).unwrap();
    let prod = g.mul(out, p).unwrap();
    let loss = g.sum(prod).unwrap();
    let value = g.value(loss).data()[0];
    if !grads {
        return (value, Vec::new());
    }
    g.backward(loss).unwrap();
    let gs = leaves.iter().map(|&l| g.take_grad(l).unwrap()).collect();
    (value, gs)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        // Both essentially zero: judge the absolute gap on the same footing.
        (analytic - numeric).abs() / 1e-7
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Maximum relative error between backprop and central differences over
/// every element of every input.
pub fn max_gradient_error<R: Rng>(build: Build<'_>, inputs: &[Tensor], rng: &mut R) -> f64 {
    let mut g = Graph::new();
    let leaves: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
    let out = build(&mut g, &leaves);
    let shape = g.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let probe = Tensor::new(&shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();

    let (_, analytic) = evaluate(build, inputs, &probe, true);
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (evaluate(build, &plus, &probe, false).0 - evaluate(build, &minus, &probe, false).0)
                / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[i].data()[j], numeric));
        }
    }
    worst
}

pub fn random_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, so ReLU kinks sit outside the FD stencil.
pub fn away_from_zero<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    random_tensor(shape, rng).map(|v| if v >= 0.0 { v + 0.01 } else { v - 0.01 })
}

/// A shuffled grid of distinct values spaced 0.01 apart, so no pooling
/// window has a near-tie within the FD stencil.
pub fn distinct_values<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    v.shuffle(rng);
    Tensor::new(shape, v).unwrap()
}

pub const GRADIENT_TRIALS: usize = 100;

/// Runs the finite-difference oracle over randomized instances of every
/// differentiable op; returns `(op name, worst relative error)`.
pub fn gradient_suite(seed: u64) -> Vec<(&'static str, f64)> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let mut record = |name: &'static str, errs: Vec<f64>| {
        results.push((name, errs.into_iter().fold(0.0, f64::max)));
    };

    let mut errs = Vec::new();
    for _ in 0..GRADIENT_TRIALS {
        let (n, i, o) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..5));
        let inputs = [random_tensor(&[n, i], &mut rng), random_tensor(&[o, i], &mut rng), random_tensor(&[o], &mut rng)];
        errs.push(max_gradient_error(&|g, l| g.linear(l[0], l[1], Some(l[2])).unwrap(), &inputs, &mut rng));
    }
    record("linear", errs);

    let mut errs = Vec::new();
    for _ in 0..GRADIENT_TRIALS {
        let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
        let inputs = [random_tensor(&[m, k], &mut rng), random_tensor(&[k, n], &mut rng)];
        errs.push(max_gradient_error(&|g, l| g.matmul(l[0], l[1]).unwrap(), &inputs, &mut rng));
    }
    record("matmul", errs);

    let mut errs = Vec::new();
    for _ in 0..GRADIENT_TRIALS {
        let (n, c, f) = (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..4));
        let k = rng.random_range(1..4);
        let (h, w) = (rng.random_range(k..k + 3), rng.random_range(k..k + 3));
        let stride = rng.random_range(1..3);
        let padding = rng.random_range(0..2);
        let inputs = [
            random_tensor(&[n, c, h, w], &mut rng),
            random_tensor(&[f, c, k, k], &mut rng),
            random_tensor(&[f], &mut rng),
        ];
        errs.push(max_gradient_error(
            &|g, l| g.conv2d(l[0], l[1], Some(l[2]), stride, padding).unwrap(),
            &inputs,
            &mut rng,
        ));
    }
    record("conv2d", errs);

    let mut errs = Vec::new();
    for _ in 0..GRADIENT_TRIALS {
        let shape = [rng.random_range(1..4), rng.random_range(1..6)];
        let inputs = [away_from_zero(&shape, &mut rng)];
        errs.push(max_gradient_error(&|g, l| g.relu(l[0]).unwrap(), &inputs, &mut rng));
    }
    record("relu", errs);

    let mut errs = Vec::new();
    for _ in 0..GRADIENT_TRIALS {
        let window = rng.random_range(1..3);
        let stride = rng.random_range(1..3);
        let (h, w) = (rng.random_range(window..window + 4), rng.random_range(window..window + 4));
        let inputs = [distinct_values(&[rng.random_range(1..3), rng.random_range(1..3), h, w], &mut rng)];
        errs.push(max_gradient_error(&|g, l| g.maxpool2d(l[0], window, stride).unwrap(), &inputs, &mut rng));
    }
    record("maxpool2d", errs);

    let mut errs = Vec::new();
    for _ in 0..GRADIENT_TRIALS {
        let (n, k) = (rng.random_range(1..5), rng.random_range(2..6));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let inputs = [random_tensor(&[n, k], &mut rng).map(|v| 3.0 * v)];
        errs.push(max_gradient_error(
            &|g, l| g.softmax_cross_entropy(l[0], &labels).unwrap(),
            &inputs,
            &mut rng,
        ));
    }
    record("softmax_cross_entropy", errs);

    results
}

/// Reference selection: sort every eligible candidate globally.
pub fn full_sort_topk(grads: &[Vec<f64>], eligible: &[Vec<usize>], k: usize) -> Option<Vec<Vec<usize>>> {
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for (l, (g, e)) in grads.iter().zip(eligible).enumerate() {
        all.extend(e.iter().map(|&p| (g[p].abs(), l, p)));
    }
    if all.len() < k {
        return None;
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![Vec::new(); grads.len()];
    for &(_, l, p) in &all[..k] {
        out[l].push(p);
    }
    out.iter_mut().for_each(|v| v.sort_unstable());
    Some(out)
}

/// A random multi-layer candidate set. Magnitudes are sometimes coarsely
/// quantized so ties across layers and positions are common.
pub fn random_topk_instance<R: Rng>(rng: &mut R) -> (Vec<Vec<f64>>, Vec<Vec<usize>>, usize) {
    let layers = rng.random_range(1..6);
    let coarse = rng.random_bool(0.5);
    let mut grads = Vec::new();
    let mut eligible = Vec::new();
    for _ in 0..layers {
        let n = rng.random_range(1..40);
        let g: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(-1.0..1.0);
                if coarse { (v * 4.0).round() / 4.0 } else { v }
            })
            .collect();
        let e: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.6)).collect();
        grads.push(g);
        eligible.push(e);
    }
    let total: usize = eligible.iter().map(Vec::len).sum();
    let k = rng.random_range(0..=total);
    (grads, eligible, k)
}

/// Number of instances (out of `trials`) where streaming and full-sort
/// selection disagree on counts or positions.
pub fn topk_suite(seed: u64, trials: usize) -> usize {
    use dst_core::rewire::{streaming_global_topk, LayerCandidates};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..trials {
        let (grads, eligible, k) = random_topk_instance(&mut rng);
        let want = full_sort_topk(&grads, &eligible, k).expect("k within candidates");
        let got = streaming_global_topk(
            grads.iter().zip(&eligible).map(|(g, e)| LayerCandidates { grads: g, eligible: e }),
            k,
        )
        .expect("k within candidates");
        let counts: Vec<usize> = want.iter().map(Vec::len).collect();
        if got.positions != want || got.counts != counts {
            mismatches += 1;
        }
    }
    mismatches
}

/// Empty outputs/inputs by scanning the 4-D mask directly.
pub fn brute_force_empty(mask: &[f64], n_out: usize, n_in: usize, kh: usize, kw: usize) -> (usize, usize) {
    let at = |o: usize, i: usize, y: usize, x: usize| mask[((o * n_in + i) * kh + y) * kw + x];
    let empty_out = (0..n_out)
        .filter(|&o| (0..n_in).all(|i| (0..kh).all(|y| (0..kw).all(|x| at(o, i, y, x) == 0.0))))
        .count();
    let empty_in = (0..n_in)
        .filter(|&i| (0..n_out).all(|o| (0..kh).all(|y| (0..kw).all(|x| at(o, i, y, x) == 0.0))))
        .count();
    (empty_out, empty_in)
}

/// A random linear or conv layer whose mask density is itself random, so
/// both empty-heavy and dense masks occur.
pub fn random_masked_layer<R: Rng>(rng: &mut R) -> dst_core::nn::SparseLayerState {
    use dst_core::nn::{LayerKind, LayerShape, SparseLayerState};
    let (n_out, n_in) = (rng.random_range(1..9), rng.random_range(1..9));
    let conv = rng.random_bool(0.5);
    let (kind, shape, dims) = if conv {
        let (kh, kw) = (rng.random_range(1..4), rng.random_range(1..4));
        (
            LayerKind::Conv { stride: 1, padding: 0 },
            LayerShape::conv(n_in, n_out, kh, kw),
            vec![n_out, n_in, kh, kw],
        )
    } else {
        (LayerKind::Linear, LayerShape::linear(n_in, n_out), vec![n_out, n_in])
    };
    let mut layer =
        SparseLayerState::new(kind, shape, Tensor::ones(&dims), Tensor::zeros(&[n_out])).unwrap();
    let p: f64 = rng.random_range(0.0..0.6);
    let n: usize = dims.iter().product();
    let mask = Tensor::new(&dims, (0..n).map(|_| rng.random_bool(p) as u8 as f64).collect()).unwrap();
    layer.set_mask(mask).unwrap();
    layer
}

/// Mismatches between the analyzer and the brute-force scan.
pub fn empty_unit_suite(seed: u64, trials: usize) -> usize {
    use dst_core::metrics::empty_unit_stats;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .filter(|_| {
            let l = random_masked_layer(&mut rng);
            let s = l.shape;
            empty_unit_stats(&l) != brute_force_empty(l.mask.data(), s.n_out, s.n_in, s.kh, s.kw)
        })
        .count()
}
