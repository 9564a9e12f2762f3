//! Masked layers and the model families trained by the harness.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Mlp,
    SmallCnn,
    MiniVgg,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Mlp => "mlp",
            Family::SmallCnn => "small-cnn",
            Family::MiniVgg => "mini-vgg",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Family::Mlp),
            "small-cnn" => Ok(Family::SmallCnn),
            "mini-vgg" => Ok(Family::MiniVgg),
            other => Err(Error::Config(format!("unknown model family `{other}`"))),
        }
    }
}

/// Minimum ratio between the mini-vgg hidden FC layer and its largest conv layer.
pub const OVERSIZED_FC_RATIO: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    /// Per-sample input extents `[C, H, W]`.
    pub input: [usize; 3],
    pub classes: usize,
    /// Hidden widths (mlp) or conv channels (small-cnn, mini-vgg).
    pub widths: Vec<usize>,
    /// Width of the oversized fully-connected layer (mini-vgg only).
    pub fc_width: usize,
}

impl ModelSpec {
    pub fn mlp(input: [usize; 3], hidden: &[usize], classes: usize) -> Self {
        Self {
            family: Family::Mlp,
            input,
            classes,
            widths: hidden.to_vec(),
            fc_width: 0,
        }
    }

    pub fn small_cnn(input: [usize; 3], channels: &[usize], classes: usize) -> Self {
        Self {
            family: Family::SmallCnn,
            input,
            classes,
            widths: channels.to_vec(),
            fc_width: 0,
        }
    }

    pub fn mini_vgg(input: [usize; 3], channels: &[usize], fc_width: usize, classes: usize) -> Self {
        Self {
            family: Family::MiniVgg,
            input,
            classes,
            widths: channels.to_vec(),
            fc_width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Linear,
    Conv { stride: usize, padding: usize },
}

/// `(n_out, n_in, kh, kw)`; kernel extents are 1 for linear layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub n_out: usize,
    pub n_in: usize,
    pub kh: usize,
    pub kw: usize,
}

impl LayerShape {
    pub fn linear(n_in: usize, n_out: usize) -> Self {
        Self {
            n_out,
            n_in,
            kh: 1,
            kw: 1,
        }
    }

    pub fn conv(n_in: usize, n_out: usize, kh: usize, kw: usize) -> Self {
        Self { n_out, n_in, kh, kw }
    }

    pub fn size(&self) -> usize {
        self.n_out * self.n_in * self.kh * self.kw
    }

    pub fn fan_in(&self) -> usize {
        self.n_in * self.kh * self.kw
    }

    /// Number of weights feeding one output unit.
    pub fn row_len(&self) -> usize {
        self.fan_in()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseLayerState {
    pub kind: LayerKind,
    pub shape: LayerShape,
    pub weight: Tensor,
    /// 0/1 entries, same shape as `weight`.
    pub mask: Tensor,
    pub bias: Tensor,
    pub grad_buffer: Option<Tensor>,
}

impl SparseLayerState {
    pub fn new(kind: LayerKind, shape: LayerShape, weight: Tensor, bias: Tensor) -> Result<Self> {
        let dims = weight_dims(kind, shape);
        if weight.shape() != dims.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "layer",
                left: dims,
                right: weight.shape().to_vec(),
            });
        }
        if bias.shape() != [shape.n_out] {
            return Err(Error::ShapeMismatch {
                op: "layer",
                left: vec![shape.n_out],
                right: bias.shape().to_vec(),
            });
        }
        let mask = Tensor::ones(weight.shape());
        Ok(Self {
            kind,
            shape,
            weight,
            mask,
            bias,
            grad_buffer: None,
        })
    }

    pub fn size(&self) -> usize {
        self.weight.len()
    }

    pub fn is_active(&self, pos: usize) -> bool {
        self.mask.data()[pos] != 0.0
    }

    pub fn active_count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m != 0.0).count()
    }

    pub fn density(&self) -> f64 {
        self.active_count() as f64 / self.size() as f64
    }

    pub fn active_positions(&self) -> Vec<usize> {
        (0..self.size()).filter(|&i| self.is_active(i)).collect()
    }

    pub fn inactive_positions(&self) -> Vec<usize> {
        (0..self.size()).filter(|&i| !self.is_active(i)).collect()
    }

    pub fn activate(&mut self, pos: usize, value: f64) {
        self.mask.data_mut()[pos] = 1.0;
        self.weight.data_mut()[pos] = value;
    }

    pub fn deactivate(&mut self, pos: usize) {
        self.mask.data_mut()[pos] = 0.0;
        self.weight.data_mut()[pos] = 0.0;
    }

    /// Replaces the mask and zeroes every weight it switches off.
    pub fn set_mask(&mut self, mask: Tensor) -> Result<()> {
        self.mask.expect_same_shape(&mask, "set_mask")?;
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Contract("mask entries must be 0 or 1".into()));
        }
        self.mask = mask;
        self.apply_mask();
        Ok(())
    }

    pub fn apply_mask(&mut self) {
        let mask = self.mask.data();
        for (w, &m) in self.weight.data_mut().iter_mut().zip(mask) {
            if m == 0.0 {
                *w = 0.0;
            }
        }
    }

    /// True when every inactive position holds a bit-exact zero.
    pub fn inactive_weights_are_zero(&self) -> bool {
        self.weight
            .data()
            .iter()
            .zip(self.mask.data())
            .all(|(&w, &m)| m != 0.0 || w.to_bits() == 0)
    }
}

fn weight_dims(kind: LayerKind, s: LayerShape) -> Vec<usize> {
    match kind {
        LayerKind::Linear => vec![s.n_out, s.n_in],
        LayerKind::Conv { .. } => vec![s.n_out, s.n_in, s.kh, s.kw],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Layer(usize),
    Relu,
    Pool,
    Flatten,
}

/// Uniform Kaiming bound `sqrt(6 / fan_in)`.
pub fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    /// Dense gradient over every weight position.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    stages: Vec<Stage>,
    pub layers: Vec<SparseLayerState>,
}

const CONV_KERNEL: usize = 3;

impl Model {
    /// Builds the layer chain with Kaiming-uniform weights, zero biases and
    /// all-ones masks.
    pub fn build<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        let (stages, descriptors) = plan(spec)?;
        let layers = descriptors
            .into_iter()
            .map(|(kind, shape)| {
                let bound = kaiming_bound(shape.fan_in());
                let data = (0..shape.size())
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                let weight = Tensor::new(&weight_dims(kind, shape), data)?;
                SparseLayerState::new(kind, shape, weight, Tensor::zeros(&[shape.n_out]))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: spec.clone(),
            stages,
            layers,
        })
    }

    /// Reassembles a model from stored layers, checking them against `spec`.
    pub fn from_layers(spec: &ModelSpec, layers: Vec<SparseLayerState>) -> Result<Self> {
        let (stages, descriptors) = plan(spec)?;
        if descriptors.len() != layers.len()
            || descriptors
                .iter()
                .zip(&layers)
                .any(|(&(k, s), l)| l.kind != k || l.shape != s)
        {
            return Err(Error::Config("stored layers do not match the model spec".into()));
        }
        Ok(Self {
            spec: spec.clone(),
            stages,
            layers,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn shapes(&self) -> Vec<LayerShape> {
        self.layers.iter().map(|l| l.shape).collect()
    }

    pub fn total_weights(&self) -> usize {
        self.layers.iter().map(|l| l.size()).sum()
    }

    pub fn total_active(&self) -> usize {
        self.layers.iter().map(|l| l.active_count()).sum()
    }

    pub fn densities(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.density()).collect()
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let s = batch.shape();
        if s.len() != 4 || s[1..] != self.spec.input {
            let mut want = vec![s.first().copied().unwrap_or(0)];
            want.extend(self.spec.input);
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: want,
                right: s.to_vec(),
            });
        }
        Ok(())
    }

    /// Records the forward pass on `g`; returns the logits node and the
    /// `(weight, bias)` parameter nodes per layer.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        batch: &Tensor,
        track_grads: bool,
    ) -> Result<(NodeId, Vec<(NodeId, NodeId)>)> {
        self.check_batch(batch)?;
        let mut params = Vec::with_capacity(self.layers.len());
        let mut x = g.constant(batch.clone())?;
        for &stage in &self.stages {
            x = match stage {
                Stage::Layer(i) => {
                    let layer = &self.layers[i];
                    let (w, b) = if track_grads {
                        (g.param(layer.weight.clone())?, g.param(layer.bias.clone())?)
                    } else {
                        (g.constant(layer.weight.clone())?, g.constant(layer.bias.clone())?)
                    };
                    params.push((w, b));
                    let wm = g.masked_weight(w, &layer.mask)?;
                    match layer.kind {
                        LayerKind::Linear => g.linear(x, wm, Some(b))?,
                        LayerKind::Conv { stride, padding } => {
                            g.conv2d(x, wm, Some(b), stride, padding)?
                        }
                    }
                }
                Stage::Relu => g.relu(x)?,
                Stage::Pool => g.maxpool2d(x, 2, 2)?,
                Stage::Flatten => g.flatten(x)?,
            };
        }
        Ok((x, params))
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let (logits, _) = self.forward_graph(&mut g, batch, false)?;
        Ok(g.value(logits).clone())
    }

    /// Mean loss and per-layer gradients on one batch. Weight gradients are
    /// dense: they cover inactive positions too.
    pub fn gradients(&self, batch: &Tensor, labels: &[usize]) -> Result<(f64, Vec<LayerGrads>)> {
        let mut g = Graph::new();
        let (logits, params) = self.forward_graph(&mut g, batch, true)?;
        let loss = g.softmax_cross_entropy(logits, labels)?;
        g.backward(loss)?;
        let value = g.value(loss).data()[0];
        let grads = params
            .into_iter()
            .map(|(w, b)| LayerGrads {
                weight: g.take_grad(w).expect("weight gradient"),
                bias: g.take_grad(b).expect("bias gradient"),
            })
            .collect();
        Ok((value, grads))
    }

    /// Computes dense weight gradients on `batch` and stores them in each
    /// layer's `grad_buffer`. Returns the batch loss.
    pub fn dense_weight_grads(&mut self, batch: &Tensor, labels: &[usize]) -> Result<f64> {
        if batch.shape().first().copied().unwrap_or(0) == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        let (loss, grads) = self.gradients(batch, labels)?;
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            layer.grad_buffer = Some(g.weight);
        }
        Ok(loss)
    }

    pub fn clear_grad_buffers(&mut self) {
        self.layers.iter_mut().for_each(|l| l.grad_buffer = None);
    }
}

type LayerPlan = (Vec<Stage>, Vec<(LayerKind, LayerShape)>);

fn plan(spec: &ModelSpec) -> Result<LayerPlan> {
    let [c, h, w] = spec.input;
    if c == 0 || h == 0 || w == 0 || spec.classes == 0 {
        return Err(Error::Config(format!(
            "input {:?} and class count {} must be positive",
            spec.input, spec.classes
        )));
    }
    if spec.widths.contains(&0) {
        return Err(Error::Config("layer widths must be positive".into()));
    }
    let mut stages = Vec::new();
    let mut layers = Vec::new();
    fn push(
        stages: &mut Vec<Stage>,
        layers: &mut Vec<(LayerKind, LayerShape)>,
        kind: LayerKind,
        shape: LayerShape,
    ) {
        stages.push(Stage::Layer(layers.len()));
        layers.push((kind, shape));
    }
    let conv = LayerKind::Conv {
        stride: 1,
        padding: CONV_KERNEL / 2,
    };
    match spec.family {
        Family::Mlp => {
            stages.push(Stage::Flatten);
            let mut fan_in = c * h * w;
            for &width in &spec.widths {
                push(&mut stages, &mut layers, LayerKind::Linear, LayerShape::linear(fan_in, width));
                stages.push(Stage::Relu);
                fan_in = width;
            }
            push(&mut stages, &mut layers, LayerKind::Linear, LayerShape::linear(fan_in, spec.classes));
        }
        Family::SmallCnn | Family::MiniVgg => {
            if spec.widths.is_empty() {
                return Err(Error::Config("convolutional families need at least one conv layer".into()));
            }
            let last = spec.widths.len() - 1;
            let (mut ch, mut hh, mut ww) = (c, h, w);
            for (i, &out) in spec.widths.iter().enumerate() {
                push(&mut stages, &mut layers, conv, LayerShape::conv(ch, out, CONV_KERNEL, CONV_KERNEL));
                stages.push(Stage::Relu);
                let pool = match spec.family {
                    Family::SmallCnn => true,
                    _ => i < 2 || i == last,
                };
                if pool {
                    if hh < 2 || ww < 2 {
                        return Err(Error::Config(format!(
                            "spatial extent {hh}x{ww} too small to pool after conv {i}"
                        )));
                    }
                    stages.push(Stage::Pool);
                    hh /= 2;
                    ww /= 2;
                }
                ch = out;
            }
            stages.push(Stage::Flatten);
            let flat = ch * hh * ww;
            if spec.family == Family::MiniVgg {
                if spec.fc_width == 0 {
                    return Err(Error::Config("mini-vgg needs a positive fc_width".into()));
                }
                let fc = LayerShape::linear(flat, spec.fc_width);
                let largest_conv = layers.iter().map(|(_, s)| s.size()).max().unwrap_or(0);
                if fc.size() < OVERSIZED_FC_RATIO * largest_conv {
                    return Err(Error::Config(format!(
                        "mini-vgg FC layer has {} weights, needs at least {}x the largest conv ({largest_conv})",
                        fc.size(),
                        OVERSIZED_FC_RATIO
                    )));
                }
                push(&mut stages, &mut layers, LayerKind::Linear, fc);
                stages.push(Stage::Relu);
                push(&mut stages, &mut layers, LayerKind::Linear, LayerShape::linear(spec.fc_width, spec.classes));
            } else {
                push(&mut stages, &mut layers, LayerKind::Linear, LayerShape::linear(flat, spec.classes));
            }
        }
    }
    Ok((stages, layers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn mnist_mlp_parameter_counts() {
        let spec = ModelSpec::mlp([1, 28, 28], &[256, 128], 10);
        let m = Model::build(&spec, &mut rng()).unwrap();
        let sizes: Vec<usize> = m.layers.iter().map(|l| l.size()).collect();
        assert_eq!(sizes, vec![200704, 32768, 1280]);
        assert!(m.densities().iter().all(|&d| d == 1.0));
        let bound = kaiming_bound(784);
        assert!((bound - 0.0875).abs() < 5e-5);
        assert!(m.layers[0].weight.data().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn mini_vgg_has_oversized_fc() {
        let spec = ModelSpec::mini_vgg([1, 28, 28], &[16, 32, 64, 64], 512, 10);
        let m = Model::build(&spec, &mut rng()).unwrap();
        assert_eq!(m.layers.len(), 6);
        let fc = m.layers[4].size();
        let max_conv = m.layers[..4].iter().map(|l| l.size()).max().unwrap();
        assert!(fc >= OVERSIZED_FC_RATIO * max_conv);

        let bad = ModelSpec::mini_vgg([1, 28, 28], &[16, 32, 64, 64], 16, 10);
        assert!(matches!(Model::build(&bad, &mut rng()), Err(Error::Config(_))));
    }

    #[test]
    fn inconsistent_spec_rejected() {
        let spec = ModelSpec::small_cnn([1, 2, 2], &[4, 4], 3);
        assert!(Model::build(&spec, &mut rng()).is_err());
        let spec = ModelSpec::mlp([1, 1, 4], &[0], 3);
        assert!(Model::build(&spec, &mut rng()).is_err());
    }

    #[test]
    fn zero_batch_gives_zero_logits() {
        let spec = ModelSpec::small_cnn([1, 8, 8], &[4], 3);
        let m = Model::build(&spec, &mut rng()).unwrap();
        let out = m.forward(&Tensor::zeros(&[2, 1, 8, 8])).unwrap();
        assert_eq!(out.shape(), &[2, 3]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let spec = ModelSpec::mlp([1, 1, 4], &[3], 2);
        let m = Model::build(&spec, &mut rng()).unwrap();
        assert!(matches!(
            m.forward(&Tensor::zeros(&[2, 1, 1, 5])),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn fully_masked_layer_hides_its_weights() {
        let spec = ModelSpec::mlp([1, 1, 3], &[4], 2);
        let mut m = Model::build(&spec, &mut rng()).unwrap();
        let x = Tensor::new(&[1, 1, 1, 3], vec![0.3, -0.7, 1.1]).unwrap();
        m.layers[0].set_mask(Tensor::zeros(&[4, 3])).unwrap();
        let before = m.forward(&x).unwrap();
        let mut other = m.clone();
        // Writing garbage behind a zero mask must not leak into the output.
        other.layers[0].weight = Tensor::full(&[4, 3], 5.0);
        assert_eq!(other.forward(&x).unwrap(), before);
    }

    #[test]
    fn two_layer_toy_matches_hand_computation() {
        // 2 inputs -> 2 hidden (relu) -> 2 outputs.
        let spec = ModelSpec::mlp([1, 1, 2], &[2], 2);
        let mut m = Model::build(&spec, &mut rng()).unwrap();
        m.layers[0].weight = Tensor::from_rows(&[&[1.0, -1.0], &[0.5, 2.0]]);
        m.layers[0].bias = Tensor::new(&[2], vec![0.0, -1.0]).unwrap();
        m.layers[1].weight = Tensor::from_rows(&[&[1.0, 1.0], &[-2.0, 3.0]]);
        m.layers[1].bias = Tensor::new(&[2], vec![0.5, 0.0]).unwrap();
        let x = Tensor::new(&[1, 1, 1, 2], vec![2.0, 1.0]).unwrap();
        // hidden pre = [2-1, 1+2-1] = [1, 2]; relu -> [1, 2]
        // out = [1+2+0.5, -2+6] = [3.5, 4]
        assert_eq!(m.forward(&x).unwrap().data(), &[3.5, 4.0]);
    }
}
