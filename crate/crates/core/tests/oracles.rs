mod common;

use dst_core::metrics::{shrunk_layer_params, shrunk_param_count};
use dst_core::nn::{LayerKind, LayerShape, Model, ModelSpec, SparseLayerState};
use dst_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn streaming_topk_equals_full_sort() {
    assert_eq!(common::topk_suite(7, 1000), 0);
}

#[test]
fn empty_units_match_brute_force() {
    assert_eq!(common::empty_unit_suite(11, 1000), 0);
}

#[test]
fn shrunk_count_bounded_by_dense_with_equality_iff_no_empty_units() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..500 {
        let l = common::random_masked_layer(&mut rng);
        let (eo, ei) = dst_core::metrics::empty_unit_stats(&l);
        let shrunk = shrunk_layer_params(&l);
        assert!(shrunk <= l.size());
        assert_eq!(shrunk == l.size(), eo == 0 && ei == 0);
    }
}

#[test]
fn two_layer_shrink_is_sum_of_local_products() {
    let spec = ModelSpec::mlp([1, 1, 4], &[3], 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::build(&spec, &mut rng).unwrap();
    // Layer 0 (3x4): rows 0 and 2 use columns 1 and 3 -> 2 x 2.
    let m0 = vec![0., 1., 0., 0., 0., 0., 0., 0., 0., 0., 0., 1.];
    // Layer 1 (2x3): row 0 reads hidden unit 1 only -> 1 x 1.
    let m1 = vec![0., 1., 0., 0., 0., 0.];
    model.layers[0].set_mask(Tensor::new(&[3, 4], m0).unwrap()).unwrap();
    model.layers[1].set_mask(Tensor::new(&[2, 3], m1).unwrap()).unwrap();
    assert_eq!(shrunk_param_count(&model), 4 + 1);
}

#[test]
fn dense_gradient_of_a_linear_layer_is_an_outer_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let (n_in, n_out) = (rng.random_range(1..7), rng.random_range(2..6));
        let spec = ModelSpec::mlp([1, 1, n_in], &[], n_out);
        let mut model = Model::build(&spec, &mut rng).unwrap();
        let mask = Tensor::new(
            &[n_out, n_in],
            (0..n_in * n_out).map(|_| rng.random_bool(0.5) as u8 as f64).collect(),
        )
        .unwrap();
        model.layers[0].set_mask(mask).unwrap();
        let x = common::random_tensor(&[1, 1, 1, n_in], &mut rng);
        let label = rng.random_range(0..n_out);
        model.dense_weight_grads(&x, &[label]).unwrap();

        let logits = model.forward(&x).unwrap();
        let max = logits.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.data().iter().map(|v| (v - max).exp()).sum();
        let g = model.layers[0].grad_buffer.as_ref().unwrap().data();
        for o in 0..n_out {
            let delta = (logits.data()[o] - max).exp() / z - f64::from(o == label);
            for i in 0..n_in {
                let want = delta * x.data()[i];
                assert!((g[o * n_in + i] - want).abs() < 1e-12, "({o},{i}): {} vs {want}", g[o * n_in + i]);
            }
        }
    }
}

#[test]
fn dense_gradients_agree_with_ordinary_gradients_on_active_positions() {
    use dst_core::autograd::Graph;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let spec = ModelSpec::mlp([1, 1, 5], &[6], 3);
    let mut model = Model::build(&spec, &mut rng).unwrap();
    for l in &mut model.layers {
        let n = l.size();
        let mask = Tensor::new(l.weight.shape(), (0..n).map(|_| rng.random_bool(0.5) as u8 as f64).collect()).unwrap();
        l.set_mask(mask).unwrap();
    }
    let x = common::random_tensor(&[4, 1, 1, 5], &mut rng);
    let y = [0, 1, 2, 1];
    model.dense_weight_grads(&x, &y).unwrap();

    // Ordinary gradients: the mask enters as a plain elementwise product,
    // whose backward zeroes every masked position.
    let mut g = Graph::new();
    let mut h = g.constant(x.reshape(&[4, 5]).unwrap()).unwrap();
    let mut ws = Vec::new();
    for (i, l) in model.layers.iter().enumerate() {
        let w = g.param(l.weight.clone()).unwrap();
        let m = g.constant(l.mask.clone()).unwrap();
        let wm = g.mul(w, m).unwrap();
        let b = g.param(l.bias.clone()).unwrap();
        h = g.linear(h, wm, Some(b)).unwrap();
        if i + 1 < model.layers.len() {
            h = g.relu(h).unwrap();
        }
        ws.push(w);
    }
    let loss = g.softmax_cross_entropy(h, &y).unwrap();
    g.backward(loss).unwrap();

    let mut masked_nonzero = 0;
    for (l, &w) in model.layers.iter().zip(&ws) {
        let dense = l.grad_buffer.as_ref().unwrap().data();
        let ordinary = g.grad(w).unwrap().data();
        for p in 0..l.size() {
            if l.is_active(p) {
                assert!((dense[p] - ordinary[p]).abs() <= 1e-15 * dense[p].abs().max(1.0));
            } else {
                assert_eq!(ordinary[p], 0.0);
                if dense[p] != 0.0 {
                    masked_nonzero += 1;
                }
            }
        }
    }
    assert!(masked_nonzero > 0, "dense gradients at masked positions were all zero");
}

#[test]
fn fully_masked_layer_makes_logits_independent_of_its_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = ModelSpec::mlp([1, 1, 3], &[4], 2);
    let mut model = Model::build(&spec, &mut rng).unwrap();
    model.layers[1].set_mask(Tensor::zeros(&[2, 4])).unwrap();
    let x = common::random_tensor(&[2, 1, 1, 3], &mut rng);
    let before = model.forward(&x).unwrap();
    let mut other = model.clone();
    other.layers[1] = SparseLayerState {
        weight: Tensor::zeros(&[2, 4]),
        ..model.layers[1].clone()
    };
    assert_eq!(other.forward(&x).unwrap(), before);
    assert!(matches!(model.layers[1].kind, LayerKind::Linear));
    assert_eq!(model.layers[1].shape, LayerShape::linear(4, 2));
}
