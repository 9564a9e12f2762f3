//! Per-layer density allocation under a global weight budget and random
//! mask initialization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::apportion::largest_remainder;
use crate::error::{Error, Result};
use crate::nn::{LayerShape, Model};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    Erk,
    Uniform,
}

impl Distribution {
    pub fn as_str(self) -> &'static str {
        match self {
            Distribution::Erk => "erk",
            Distribution::Uniform => "uniform",
        }
    }
}

impl std::str::FromStr for Distribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "erk" => Ok(Distribution::Erk),
            "uniform" => Ok(Distribution::Uniform),
            other => Err(Error::Config(format!("unknown distribution `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityConfig {
    pub sparsity: f64,
    pub distribution: Distribution,
}

impl SparsityConfig {
    pub fn validate(&self) -> Result<()> {
        validate_sparsity(self.sparsity)
    }

    pub fn allocate(&self, layers: &[LayerShape]) -> Result<DensityAllocation> {
        match self.distribution {
            Distribution::Erk => erk_allocation(layers, self.sparsity),
            Distribution::Uniform => uniform_allocation(layers, self.sparsity),
        }
    }
}

fn validate_sparsity(s: f64) -> Result<()> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::Config(format!("sparsity must lie in [0, 1), got {s}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityAllocation {
    /// Real-valued target density per layer, before integer rounding.
    pub densities: Vec<f64>,
    /// Active weights per layer; sums to [`budget`] exactly.
    pub active: Vec<usize>,
    pub sparsity: f64,
}

impl DensityAllocation {
    pub fn total_active(&self) -> usize {
        self.active.iter().sum()
    }
}

/// `round((1 - s) * total)`.
pub fn budget(total_weights: usize, s: f64) -> usize {
    ((1.0 - s) * total_weights as f64).round() as usize
}

/// The Erdős–Rényi-Kernel scale `1 - (n_in + n_out + kw + kh) / (n_in * n_out * kw * kh)`.
/// A layer with a 1x1 kernel is treated as linear and the kernel terms drop out.
pub fn erk_scale(shape: &LayerShape) -> f64 {
    let (n_in, n_out) = (shape.n_in as f64, shape.n_out as f64);
    if shape.kh == 1 && shape.kw == 1 {
        1.0 - (n_in + n_out) / (n_in * n_out)
    } else {
        let (kh, kw) = (shape.kh as f64, shape.kw as f64);
        1.0 - (n_in + n_out + kw + kh) / (n_in * n_out * kw * kh)
    }
}

pub fn erk_allocation(layers: &[LayerShape], s: f64) -> Result<DensityAllocation> {
    validate_sparsity(s)?;
    if layers.iter().any(|l| l.size() == 0) {
        return Err(Error::Config("layer dimensions must be positive".into()));
    }
    let sizes: Vec<usize> = layers.iter().map(|l| l.size()).collect();
    let total: usize = sizes.iter().sum();
    let target = (1.0 - s) * total as f64;
    let scales: Vec<f64> = layers.iter().map(|l| erk_scale(l).max(0.0)).collect();

    let mut dense = vec![false; layers.len()];
    let mut densities = vec![0.0; layers.len()];
    loop {
        let open: Vec<usize> = (0..layers.len()).filter(|&i| !dense[i]).collect();
        if open.is_empty() {
            break;
        }
        let clamped: usize = (0..layers.len()).filter(|&i| dense[i]).map(|i| sizes[i]).sum();
        let open_size: usize = open.iter().map(|&i| sizes[i]).sum();
        let rho = if clamped == 0 {
            1.0 - s
        } else {
            ((target - clamped as f64) / open_size as f64).max(0.0)
        };
        let weighted: f64 = open.iter().map(|&i| scales[i] * sizes[i] as f64).sum();
        let equal = open.iter().all(|&i| scales[i].to_bits() == scales[open[0]].to_bits());
        for &i in &open {
            densities[i] = if equal || weighted <= 0.0 {
                rho
            } else {
                rho * scales[i] * open_size as f64 / weighted
            };
        }
        let newly: Vec<usize> = open.iter().copied().filter(|&i| densities[i] > 1.0).collect();
        if newly.is_empty() {
            break;
        }
        for i in newly {
            dense[i] = true;
            densities[i] = 1.0;
        }
    }
    finish(densities, &sizes, s)
}

pub fn uniform_allocation(layers: &[LayerShape], s: f64) -> Result<DensityAllocation> {
    validate_sparsity(s)?;
    let sizes: Vec<usize> = layers.iter().map(|l| l.size()).collect();
    finish(vec![1.0 - s; layers.len()], &sizes, s)
}

fn finish(densities: Vec<f64>, sizes: &[usize], s: f64) -> Result<DensityAllocation> {
    let total: usize = sizes.iter().sum();
    let quotas: Vec<f64> = densities
        .iter()
        .zip(sizes)
        .map(|(&d, &n)| d * n as f64)
        .collect();
    let active = largest_remainder(&quotas, budget(total, s), sizes)
        .ok_or_else(|| Error::Contract("budget exceeds total weight count".into()))?;
    Ok(DensityAllocation {
        densities,
        active,
        sparsity: s,
    })
}

/// A 0/1 tensor with exactly `active` ones placed uniformly at random.
pub fn random_mask<R: Rng + ?Sized>(shape: &[usize], active: usize, rng: &mut R) -> Result<Tensor> {
    let size: usize = shape.iter().product();
    if active > size {
        return Err(Error::Contract(format!(
            "cannot activate {active} of {size} positions"
        )));
    }
    let mut mask = Tensor::zeros(shape);
    for i in rand::seq::index::sample(rng, size, active) {
        mask.data_mut()[i] = 1.0;
    }
    Ok(mask)
}

/// Draws a random mask per layer following `alloc` and zeroes the weights
/// it switches off.
pub fn sparsify<R: Rng + ?Sized>(model: &mut Model, alloc: &DensityAllocation, rng: &mut R) -> Result<()> {
    if alloc.active.len() != model.layers.len() {
        return Err(Error::Contract("allocation does not match layer count".into()));
    }
    for (layer, &count) in model.layers.iter_mut().zip(&alloc.active) {
        let mask = random_mask(layer.weight.shape(), count, rng)?;
        layer.set_mask(mask)?;
    }
    Ok(())
}
