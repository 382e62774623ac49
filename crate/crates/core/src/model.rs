//! The per-pixel segmentation model: an ordered stack of batch-norm, 1×1
//! linear and ReLU layers ending in a softmax head.
//!
//! Batch-norm layers are numbered `1..=L` in forward order; an optional
//! input batch-norm counts as layer 1.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::batchnorm::{AdaptNormalization, BnLayer, BnMode};
use crate::error::{invalid, Result};
use crate::labels::LabelMap;
use crate::tensor::{argmax_channels, linear_forward, relu, softmax_channels, FeatureBatch, LinearLayer};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    pub input_channels: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub input_bn: bool,
}

impl Architecture {
    /// InputBN → (Linear → BN → ReLU) per hidden width → Linear → softmax.
    pub fn default_segmenter(input_channels: usize, classes: usize) -> Self {
        Self { input_channels, hidden: vec![16, 16], classes, input_bn: true }
    }

    /// Input batch-norm followed directly by the classifier.
    pub fn single_bn(input_channels: usize, classes: usize) -> Self {
        Self { input_channels, hidden: Vec::new(), classes, input_bn: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.classes == 0 || self.hidden.contains(&0) {
            return Err(invalid(format!("architecture has a zero width: {self:?}")));
        }
        if !self.input_bn && self.hidden.is_empty() {
            return Err(invalid("architecture has no batch-norm layer"));
        }
        Ok(())
    }

    pub fn bn_count(&self) -> usize {
        self.hidden.len() + usize::from(self.input_bn)
    }

    /// Layer kinds and widths implied by this architecture.
    pub fn layer_plan(&self) -> Vec<LayerKind> {
        let mut plan = Vec::new();
        if self.input_bn {
            plan.push(LayerKind::InputBn { channels: self.input_channels });
        }
        let mut prev = self.input_channels;
        for &h in &self.hidden {
            plan.push(LayerKind::Linear { inputs: prev, outputs: h });
            plan.push(LayerKind::Bn { channels: h });
            plan.push(LayerKind::Relu);
            prev = h;
        }
        plan.push(LayerKind::Linear { inputs: prev, outputs: self.classes });
        plan.push(LayerKind::SoftmaxHead);
        plan
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    InputBn { channels: usize },
    Linear { inputs: usize, outputs: usize },
    Bn { channels: usize },
    Relu,
    SoftmaxHead,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    InputBn(BnLayer),
    Linear(LinearLayer),
    Bn(BnLayer),
    Relu,
    SoftmaxHead,
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::InputBn(bn) => LayerKind::InputBn { channels: bn.channels() },
            Layer::Linear(l) => LayerKind::Linear { inputs: l.in_features(), outputs: l.out_features() },
            Layer::Bn(bn) => LayerKind::Bn { channels: bn.channels() },
            Layer::Relu => LayerKind::Relu,
            Layer::SoftmaxHead => LayerKind::SoftmaxHead,
        }
    }

    pub fn as_bn(&self) -> Option<&BnLayer> {
        match self {
            Layer::InputBn(bn) | Layer::Bn(bn) => Some(bn),
            _ => None,
        }
    }

    pub fn as_bn_mut(&mut self) -> Option<&mut BnLayer> {
        match self {
            Layer::InputBn(bn) | Layer::Bn(bn) => Some(bn),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Architecture,
    layers: Vec<Layer>,
}

impl Model {
    /// Fresh model with He-initialized linear weights and zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch
            .layer_plan()
            .into_iter()
            .map(|kind| match kind {
                LayerKind::InputBn { channels } => Layer::InputBn(BnLayer::new(channels)),
                LayerKind::Bn { channels } => Layer::Bn(BnLayer::new(channels)),
                LayerKind::Relu => Layer::Relu,
                LayerKind::SoftmaxHead => Layer::SoftmaxHead,
                LayerKind::Linear { inputs, outputs } => {
                    let std = (2.0 / inputs as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("positive std");
                    let weight = (0..inputs * outputs).map(|_| normal.sample(&mut rng) as f32).collect();
                    Layer::Linear(LinearLayer::new(inputs, outputs, weight, vec![0.0; outputs]).expect("planned shape"))
                }
            })
            .collect();
        Ok(Self { arch, layers })
    }

    /// Assembles a model from explicit layers, which must follow the
    /// architecture's layer plan exactly.
    pub fn from_layers(arch: Architecture, layers: Vec<Layer>) -> Result<Self> {
        arch.validate()?;
        let plan = arch.layer_plan();
        if plan.len() != layers.len() {
            return Err(invalid(format!("architecture implies {} layers, got {}", plan.len(), layers.len())));
        }
        for (i, (want, layer)) in plan.iter().zip(&layers).enumerate() {
            if *want != layer.kind() {
                return Err(invalid(format!("layer {i}: expected {want:?}, got {:?}", layer.kind())));
            }
        }
        Ok(Self { arch, layers })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn bn_count(&self) -> usize {
        self.layers.iter().filter(|l| l.as_bn().is_some()).count()
    }

    /// Batch-norm layers in forward order (index 0 is layer ℓ = 1).
    pub fn bn_layers(&self) -> impl Iterator<Item = &BnLayer> {
        self.layers.iter().filter_map(Layer::as_bn)
    }

    pub fn bn_layers_mut(&mut self) -> impl Iterator<Item = &mut BnLayer> {
        self.layers.iter_mut().filter_map(Layer::as_bn_mut)
    }

    /// Batch-norm layer ℓ, 1-based.
    pub fn bn_layer(&self, l: usize) -> Option<&BnLayer> {
        l.checked_sub(1).and_then(|i| self.bn_layers().nth(i))
    }

    /// Runs the network, delegating every batch-norm layer to `bn`, which
    /// receives the 0-based BN index, the layer and its input.
    pub(crate) fn forward_with<F>(&self, x: &FeatureBatch, mut bn: F) -> Result<FeatureBatch>
    where
        F: FnMut(usize, &BnLayer, &FeatureBatch) -> Result<FeatureBatch>,
    {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut bn_index = 0;
        for layer in &self.layers {
            h = match layer {
                Layer::InputBn(b) | Layer::Bn(b) => {
                    let out = bn(bn_index, b, &h)?;
                    bn_index += 1;
                    out
                }
                Layer::Linear(l) => linear_forward(l, &h)?,
                Layer::Relu => relu(&h),
                Layer::SoftmaxHead => softmax_channels(&h),
            };
        }
        Ok(h)
    }

    fn forward_with_mut<F>(&mut self, x: &FeatureBatch, mut bn: F) -> Result<FeatureBatch>
    where
        F: FnMut(usize, &mut BnLayer, &FeatureBatch) -> Result<FeatureBatch>,
    {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut bn_index = 0;
        for layer in &mut self.layers {
            h = match layer {
                Layer::InputBn(b) | Layer::Bn(b) => {
                    let out = bn(bn_index, b, &h)?;
                    bn_index += 1;
                    out
                }
                Layer::Linear(l) => linear_forward(l, &h)?,
                Layer::Relu => relu(&h),
                Layer::SoftmaxHead => softmax_channels(&h),
            };
        }
        Ok(h)
    }

    fn check_input(&self, x: &FeatureBatch) -> Result<()> {
        if x.channels() != self.arch.input_channels {
            return Err(invalid(format!(
                "model expects {} input channels, got {}",
                self.arch.input_channels,
                x.channels()
            )));
        }
        Ok(())
    }

    /// Inference with frozen running statistics; returns class probabilities.
    pub fn forward_eval(&self, x: &FeatureBatch) -> Result<FeatureBatch> {
        self.forward_with(x, |_, bn, h| bn.forward_eval(h))
    }

    /// Every batch-norm layer normalizes with the current batch's own
    /// statistics. Nothing is mutated.
    pub fn forward_batch_stats(&self, x: &FeatureBatch) -> Result<FeatureBatch> {
        self.forward_with(x, |_, bn, h| bn.forward_batch_stats(h))
    }

    /// One adaptation step: batch-norm layer ℓ updates its running
    /// statistics with `momenta[ℓ − 1]`.
    pub fn adapt_step(
        &mut self,
        x: &FeatureBatch,
        momenta: &[f64],
        normalize_with: AdaptNormalization,
    ) -> Result<FeatureBatch> {
        if momenta.len() != self.bn_count() {
            return Err(invalid(format!("{} momenta for {} batch-norm layers", momenta.len(), self.bn_count())));
        }
        self.forward_with_mut(x, |i, bn, h| bn.forward(h, BnMode::Adapt { momentum: momenta[i], normalize_with }))
    }

    /// Train-mode forward with running-statistics tracking.
    pub fn train_forward(&mut self, x: &FeatureBatch, momentum: f64) -> Result<FeatureBatch> {
        self.forward_with_mut(x, |_, bn, h| bn.forward(h, BnMode::Train { momentum }))
    }

    pub fn predict(&self, x: &FeatureBatch) -> Result<LabelMap> {
        let probs = self.forward_eval(x)?;
        let s = x.shape();
        LabelMap::new(s.batch, s.height, s.width, argmax_channels(&probs))
    }

    pub fn predict_with_batch_stats(&self, x: &FeatureBatch) -> Result<LabelMap> {
        let probs = self.forward_batch_stats(x)?;
        let s = x.shape();
        LabelMap::new(s.batch, s.height, s.width, argmax_channels(&probs))
    }

    /// True if every non-statistic parameter (linear weights and biases,
    /// γ, β) is bit-identical between the two models.
    pub fn same_parameters(&self, other: &Model) -> bool {
        self.arch == other.arch
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| match (a, b) {
                (Layer::Linear(x), Layer::Linear(y)) => {
                    bits32(&x.weight) == bits32(&y.weight) && bits32(&x.bias) == bits32(&y.bias)
                }
                (Layer::InputBn(x), Layer::InputBn(y)) | (Layer::Bn(x), Layer::Bn(y)) => {
                    bits32(&x.gamma) == bits32(&y.gamma)
                        && bits32(&x.beta) == bits32(&y.beta)
                        && x.eps().to_bits() == y.eps().to_bits()
                }
                (Layer::Relu, Layer::Relu) | (Layer::SoftmaxHead, Layer::SoftmaxHead) => true,
                _ => false,
            })
    }
}

fn bits32(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}
