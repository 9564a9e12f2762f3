//! SGD training with warmup, milestone decay and per-epoch rewiring.

mod data;

pub use data::{load_idx, synthetic_blobs, ChannelStats, Dataset, Split, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{LayerEpoch, MetricsRecord};
use crate::nn::{LayerGrads, Model, ModelSpec};
use crate::rewire::{drop_fraction, rewire_step, DsrState, RewireOutcome, RewireSchedule, Rewirer, StrategyKind};
use crate::sparsity::{sparsify, Distribution, SparsityConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    pub milestones: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub sparsity: SparsityConfig,
    pub strategy: StrategyKind,
    pub seed: u64,
    pub schedule: RewireSchedule,
    pub dsr: DsrState,
    /// Rescale each layer's initial weights by `1/sqrt(density)` after
    /// sparsification, so the Kaiming bound uses the expected active fan-in.
    pub rescale_init: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.1,
            lr_decay_factor: 5.0,
            milestones: vec![10, 15, 18],
            epochs: 20,
            batch_size: 128,
            momentum: 0.9,
            weight_decay: 0.0,
            sparsity: SparsityConfig {
                sparsity: 0.9,
                distribution: Distribution::Uniform,
            },
            strategy: StrategyKind::Ggr,
            seed: 0,
            schedule: RewireSchedule {
                end_epoch: 10,
                ..RewireSchedule::default()
            },
            dsr: DsrState::default(),
            rescale_init: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be a non-negative number, got {}", self.base_lr));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return bad(format!("lr_decay_factor must be positive, got {}", self.lr_decay_factor));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("milestones must be strictly increasing, got {:?}", self.milestones));
        }
        if let Some(&m) = self.milestones.last() {
            if m >= self.epochs {
                return bad(format!("milestone {m} is not below the epoch count {}", self.epochs));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        self.sparsity.validate()?;
        self.schedule.validate()?;
        self.dsr.validate()
    }

    fn rewirer(&self) -> Rewirer {
        Rewirer::new(self.strategy, self.schedule).with_dsr(self.dsr)
    }
}

/// Learning rate for one step. Epoch 0 ramps linearly from 0 towards
/// `base_lr`; afterwards the rate is divided by `lr_decay_factor` once per
/// passed milestone.
pub fn lr_at(epoch: usize, step_in_epoch: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch == 0 {
        return cfg.base_lr * step_in_epoch as f64 / steps_per_epoch.max(1) as f64;
    }
    let passed = cfg.milestones.iter().filter(|&&m| epoch >= m).count();
    cfg.base_lr * cfg.lr_decay_factor.powi(-(passed as i32))
}

/// Momentum SGD that only ever touches active weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    weight_velocity: Vec<Vec<f64>>,
    bias_velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(model: &Model, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            weight_velocity: model.layers.iter().map(|l| vec![0.0; l.size()]).collect(),
            bias_velocity: model.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &[LayerGrads], lr: f64) -> Result<()> {
        if grads.len() != model.layers.len() {
            return Err(Error::Contract(format!(
                "{} gradient sets for {} layers",
                grads.len(),
                model.layers.len()
            )));
        }
        for (i, (layer, g)) in model.layers.iter_mut().zip(grads).enumerate() {
            if g.weight.shape() != layer.weight.shape() || g.bias.shape() != layer.bias.shape() {
                return Err(Error::ShapeMismatch {
                    op: "sgd_step",
                    left: layer.weight.shape().to_vec(),
                    right: g.weight.shape().to_vec(),
                });
            }
            let vel = &mut self.weight_velocity[i];
            let mask = layer.mask.data();
            let w = layer.weight.data_mut();
            for (p, &gw) in g.weight.data().iter().enumerate() {
                if mask[p] == 0.0 {
                    continue;
                }
                let v = self.momentum * vel[p] + gw + self.weight_decay * w[p];
                vel[p] = v;
                w[p] -= lr * v;
            }
            let bvel = &mut self.bias_velocity[i];
            for ((b, v), &gb) in layer.bias.data_mut().iter_mut().zip(bvel.iter_mut()).zip(g.bias.data()) {
                *v = self.momentum * *v + gb;
                *b -= lr * *v;
            }
        }
        Ok(())
    }

    /// Zeroes momentum at `positions` of weight layer `layer`.
    pub fn reset(&mut self, layer: usize, positions: &[usize]) {
        for &p in positions {
            self.weight_velocity[layer][p] = 0.0;
        }
    }

    pub fn velocity(&self, layer: usize) -> &[f64] {
        &self.weight_velocity[layer]
    }
}

/// Percentage of `data` classified correctly; ties go to the lowest class.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    const EVAL_BATCH: usize = 500;
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = data.batch(chunk);
        let logits = model.forward(&x)?;
        let classes = logits.shape()[1];
        for (row, &label) in logits.data().chunks(classes).zip(&y) {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            correct += usize::from(best == label);
        }
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}

/// What the training loop reports as it goes.
pub enum TrainEvent<'a> {
    Rewired {
        epoch: usize,
        model: &'a Model,
        outcome: &'a RewireOutcome,
    },
    EpochEnd {
        model: &'a Model,
        record: &'a MetricsRecord,
    },
}

fn check_data(model: &Model, data: &Dataset) -> Result<()> {
    let spec = model.spec();
    if data.sample_shape() != spec.input {
        return Err(Error::Config(format!(
            "{:?} dataset samples are {:?} but the model expects {:?}",
            data.split,
            data.sample_shape(),
            spec.input
        )));
    }
    if data.classes > spec.classes {
        return Err(Error::Config(format!(
            "{:?} dataset has {} classes but the model outputs {}",
            data.split, data.classes, spec.classes
        )));
    }
    Ok(())
}

/// Trains `model` in place and returns one record per epoch. Every random
/// choice (shuffling, tie-breaks, random growth) is drawn from `rng`.
pub fn train<R: Rng + ?Sized>(
    model: &mut Model,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    rng: &mut R,
    mut observer: impl FnMut(TrainEvent<'_>),
) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    check_data(model, train_set)?;
    check_data(model, test_set)?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut rewirer = cfg.rewirer();
    let mut sgd = Sgd::new(model, cfg.momentum, cfg.weight_decay);
    let steps = train_set.len().div_ceil(cfg.batch_size);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let layers = model.layers.len();
        let mut dropped = vec![0; layers];
        let mut inserted = vec![0; layers];
        let f = if epoch >= 1 { drop_fraction(epoch, &cfg.schedule)? } else { 0.0 };
        let rewire_batch = if cfg.schedule.at_epoch_start { 0 } else { batches.len() - 1 };
        let mut rewire = |model: &mut Model, sgd: &mut Sgd, rng: &mut R| -> Result<()> {
            let (x, y) = train_set.batch(batches[rewire_batch]);
            let outcome = rewire_step(model, &mut rewirer, epoch, &x, &y, rng)?;
            for (i, t) in outcome.toggled.iter().enumerate() {
                sgd.reset(i, t);
            }
            dropped.clone_from(&outcome.plan.drops);
            inserted.clone_from(&outcome.plan.inserts);
            observer(TrainEvent::Rewired {
                epoch,
                model,
                outcome: &outcome,
            });
            Ok(())
        };
        if f > 0.0 && cfg.schedule.at_epoch_start {
            rewire(model, &mut sgd, rng)?;
        }

        let mut loss_sum = 0.0;
        for (step, idx) in batches.iter().enumerate() {
            let (x, y) = train_set.batch(idx);
            let (loss, grads) = model.gradients(&x, &y)?;
            sgd.step(model, &grads, lr_at(epoch, step, steps, cfg))?;
            loss_sum += loss * idx.len() as f64;
        }
        if f > 0.0 && !cfg.schedule.at_epoch_start {
            rewire(model, &mut sgd, rng)?;
        }

        let record = MetricsRecord {
            epoch,
            lr: lr_at(epoch, 0, steps, cfg),
            drop_fraction: f,
            train_loss: loss_sum / train_set.len() as f64,
            test_acc: evaluate(model, test_set)?,
            layers: model
                .layers
                .iter()
                .zip(dropped.iter().zip(&inserted))
                .map(|(l, (&d, &g))| LayerEpoch {
                    size: l.size(),
                    density: l.density(),
                    dropped: d,
                    inserted: g,
                })
                .collect(),
        };
        observer(TrainEvent::EpochEnd {
            model,
            record: &record,
        });
        records.push(record);
    }
    Ok(records)
}

/// Multiplies every layer's weights by `1/sqrt(density)`; empty layers are left alone.
pub fn rescale_for_density(model: &mut Model) {
    for l in &mut model.layers {
        let d = l.density();
        if d > 0.0 {
            let k = d.sqrt().recip();
            l.weight.data_mut().iter_mut().for_each(|w| *w *= k);
        }
    }
}

/// Builds and sparsifies a model, then trains it; everything is seeded by
/// `cfg.seed` through a single generator.
pub fn run(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    observer: impl FnMut(TrainEvent<'_>),
) -> Result<(Model, Vec<MetricsRecord>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::build(spec, &mut rng)?;
    let alloc = cfg.sparsity.allocate(&model.shapes())?;
    sparsify(&mut model, &alloc, &mut rng)?;
    if cfg.rescale_init {
        rescale_for_density(&mut model);
    }
    let records = train(&mut model, train_set, test_set, cfg, &mut rng, observer)?;
    Ok((model, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn blobs(n: usize, seed: u64, split: Split) -> Dataset {
        synthetic_blobs(2, n, 4, 6.0, seed, split).unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 5,
            milestones: vec![3],
            batch_size: 16,
            sparsity: SparsityConfig {
                sparsity: 0.5,
                distribution: Distribution::Uniform,
            },
            schedule: RewireSchedule {
                initial_fraction: 0.2,
                end_epoch: 4,
                at_epoch_start: true,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, 0, 100, &cfg), 0.0);
        assert_eq!(lr_at(0, 50, 100, &cfg), 0.05);
        assert_eq!(lr_at(1, 0, 100, &cfg), 0.1);
        assert!((lr_at(10, 0, 100, &cfg) - 0.02).abs() < 1e-15);
        assert!((lr_at(19, 7, 100, &cfg) - 0.1 / 125.0).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig {
            milestones: vec![10, 10],
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.milestones = vec![20];
        assert!(c.validate().is_err());
        let c = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    fn toy_model() -> Model {
        let spec = ModelSpec::mlp([1, 1, 2], &[], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Model::build(&spec, &mut rng).unwrap();
        m.layers[0].weight = Tensor::new(&[2, 2], vec![1.0, 2.0, 0.0, 4.0]).unwrap();
        m.layers[0].set_mask(Tensor::new(&[2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap()).unwrap();
        m
    }

    fn grads(w: &[f64], b: &[f64]) -> Vec<LayerGrads> {
        vec![LayerGrads {
            weight: Tensor::new(&[2, 2], w.to_vec()).unwrap(),
            bias: Tensor::new(&[2], b.to_vec()).unwrap(),
        }]
    }

    #[test]
    fn sgd_step_examples() {
        let g = grads(&[0.5, -1.0, 3.0, 2.0], &[1.0, -1.0]);

        let mut m = toy_model();
        let before = m.layers.clone();
        Sgd::new(&m, 0.9, 0.0).step(&mut m, &g, 0.0).unwrap();
        assert_eq!(m.layers, before);

        let mut m = toy_model();
        Sgd::new(&m, 0.0, 0.0).step(&mut m, &g, 0.1).unwrap();
        assert_eq!(m.layers[0].weight.data(), &[1.0 - 0.05, 2.0 + 0.1, 0.0, 4.0 - 0.2]);
        assert_eq!(m.layers[0].bias.data(), &[-0.1, 0.1]);
        assert_eq!(m.layers[0].weight.data()[2].to_bits(), 0.0f64.to_bits());
    }

    #[test]
    fn momentum_accumulates_and_resets() {
        let g = grads(&[1.0, 1.0, 1.0, 1.0], &[0.0, 0.0]);
        let mut m = toy_model();
        let mut sgd = Sgd::new(&m, 0.5, 0.0);
        sgd.step(&mut m, &g, 1.0).unwrap();
        sgd.step(&mut m, &g, 1.0).unwrap();
        assert_eq!(sgd.velocity(0), &[1.5, 1.5, 0.0, 1.5]);
        assert_eq!(m.layers[0].weight.data()[0], 1.0 - 1.0 - 1.5);
        sgd.reset(0, &[1]);
        assert_eq!(sgd.velocity(0), &[1.5, 0.0, 0.0, 1.5]);
    }

    #[test]
    fn weight_decay_skips_inactive() {
        let g = grads(&[0.0; 4], &[0.0, 0.0]);
        let mut m = toy_model();
        Sgd::new(&m, 0.0, 0.5).step(&mut m, &g, 0.1).unwrap();
        assert_eq!(m.layers[0].weight.data(), &[0.95, 1.9, 0.0, 3.8]);
    }

    #[test]
    fn zero_epochs_leave_model_untouched() {
        let spec = ModelSpec::mlp([1, 1, 4], &[8], 2);
        let cfg = TrainConfig {
            epochs: 0,
            milestones: vec![],
            ..small_cfg()
        };
        let (train_set, test_set) = (blobs(32, 1, Split::Train), blobs(16, 2, Split::Test));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = Model::build(&spec, &mut rng).unwrap();
        let before = model.layers.clone();
        let recs = train(&mut model, &train_set, &test_set, &cfg, &mut rng, |_| {}).unwrap();
        assert!(recs.is_empty());
        assert_eq!(model.layers, before);
    }

    #[test]
    fn rewires_once_per_epoch_inside_window() {
        let spec = ModelSpec::mlp([1, 1, 4], &[8], 2);
        let cfg = small_cfg();
        let (train_set, test_set) = (blobs(64, 1, Split::Train), blobs(32, 2, Split::Test));
        let mut epochs = Vec::new();
        let (model, recs) = run(&spec, &cfg, &train_set, &test_set, |ev| {
            if let TrainEvent::Rewired { epoch, model, .. } = ev {
                epochs.push(epoch);
                assert!(model.layers.iter().all(|l| l.inactive_weights_are_zero()));
            }
        })
        .unwrap();
        assert_eq!(epochs, vec![1, 2, 3]);
        assert_eq!(recs.len(), 5);
        assert_eq!(recs[0].drop_fraction, 0.0);
        assert_eq!(recs[1].drop_fraction, 0.2);
        assert_eq!(recs[4].drop_fraction, 0.0);
        assert!(model.layers.iter().all(|l| l.inactive_weights_are_zero()));
    }

    #[test]
    fn static_run_keeps_masks() {
        let spec = ModelSpec::mlp([1, 1, 4], &[8], 2);
        let mut cfg = small_cfg();
        cfg.schedule.initial_fraction = 0.0;
        let (train_set, test_set) = (blobs(64, 1, Split::Train), blobs(32, 2, Split::Test));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut model = Model::build(&spec, &mut rng).unwrap();
        let alloc = cfg.sparsity.allocate(&model.shapes()).unwrap();
        sparsify(&mut model, &alloc, &mut rng).unwrap();
        let masks: Vec<Tensor> = model.layers.iter().map(|l| l.mask.clone()).collect();
        train(&mut model, &train_set, &test_set, &cfg, &mut rng, |ev| {
            assert!(!matches!(ev, TrainEvent::Rewired { .. }));
        })
        .unwrap();
        for (l, m) in model.layers.iter().zip(&masks) {
            assert_eq!(&l.mask, m);
        }
    }

    #[test]
    fn same_seed_same_records() {
        let spec = ModelSpec::mlp([1, 1, 4], &[8], 2);
        let cfg = small_cfg();
        let (train_set, test_set) = (blobs(64, 1, Split::Train), blobs(32, 2, Split::Test));
        let a = run(&spec, &cfg, &train_set, &test_set, |_| {}).unwrap().1;
        let b = run(&spec, &cfg, &train_set, &test_set, |_| {}).unwrap().1;
        assert_eq!(a, b);
    }

    #[test]
    fn separable_blobs_are_learned_by_a_dense_model() {
        let spec = ModelSpec::mlp([1, 1, 4], &[16], 2);
        let cfg = TrainConfig {
            epochs: 5,
            milestones: vec![],
            batch_size: 16,
            sparsity: SparsityConfig {
                sparsity: 0.0,
                distribution: Distribution::Uniform,
            },
            schedule: RewireSchedule {
                initial_fraction: 0.0,
                end_epoch: 2,
                at_epoch_start: true,
            },
            ..TrainConfig::default()
        };
        let train_set = synthetic_blobs(2, 200, 4, 10.0, 5, Split::Train).unwrap();
        let (model, _) = run(&spec, &cfg, &train_set, &train_set, |_| {}).unwrap();
        assert_eq!(evaluate(&model, &train_set).unwrap(), 100.0);
    }

    #[test]
    fn mismatched_dataset_is_a_config_error() {
        let spec = ModelSpec::mlp([1, 1, 5], &[8], 2);
        let (train_set, test_set) = (blobs(32, 1, Split::Train), blobs(16, 2, Split::Test));
        assert!(matches!(
            run(&spec, &small_cfg(), &train_set, &test_set, |_| {}),
            Err(Error::Config(_))
        ));
    }
}
