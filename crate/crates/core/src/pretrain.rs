//! Supervised source-domain pre-training with plain SGD.
//!
//! The training forward pass runs in `f64` on the model's `f32` parameters,
//! normalizing every batch-norm layer with its batch statistics; the
//! backward pass is written out by hand for each layer type, including the
//! full batch-statistics path of batch-norm. Running statistics are
//! tracked with a fixed momentum and become the starting point for
//! adaptation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adapt::OfflineSampler;
use crate::datagen::{load_batch, load_labels, ImageSource};
use crate::error::{invalid, Error, Result};
use crate::labels::LabelMap;
use crate::model::{Layer, Model};
use crate::tensor::{ChannelVector, FeatureBatch};

/// Probabilities below this are clamped inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    #[default]
    Uniform,
    /// `w_s ∝ 1 / frequency_s` over the source set, normalized to mean one
    /// over the classes that occur.
    InverseFrequency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub bn_momentum: f64,
    #[serde(default)]
    pub class_weighting: ClassWeighting,
    /// Explicit per-class weights; overrides `class_weighting`.
    #[serde(default)]
    pub class_weights: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            learning_rate: 0.1,
            batch_size: 6,
            bn_momentum: 0.1,
            class_weighting: ClassWeighting::Uniform,
            class_weights: None,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(invalid("learning_rate must be finite and >= 0"));
        }
        if self.batch_size < 2 {
            return Err(invalid("pre-training batch size must be >= 2"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(invalid("bn_momentum must lie in (0, 1]"));
        }
        if let Some(w) = &self.class_weights {
            check_weights(w, classes)?;
        }
        Ok(())
    }

    /// Resolves the per-class loss weights for `source`.
    pub fn resolve_weights(&self, source: &dyn ImageSource, classes: usize) -> Result<Vec<f64>> {
        if let Some(w) = &self.class_weights {
            check_weights(w, classes)?;
            return Ok(w.clone());
        }
        match self.class_weighting {
            ClassWeighting::Uniform => Ok(vec![1.0; classes]),
            ClassWeighting::InverseFrequency => {
                let mut counts = vec![0u64; classes];
                for i in 0..source.len() {
                    let labels = source.labels(i)?.ok_or_else(|| invalid("source set has no labels"))?;
                    for (c, n) in counts.iter_mut().zip(labels.histogram(classes)) {
                        *c += n;
                    }
                }
                inverse_frequency_weights(&counts)
            }
        }
    }
}

fn check_weights(w: &[f64], classes: usize) -> Result<()> {
    if w.len() != classes {
        return Err(invalid(format!("{} class weights for {classes} classes", w.len())));
    }
    if w.iter().any(|&v| !v.is_finite() || v < 0.0) || w.iter().all(|&v| v == 0.0) {
        return Err(invalid("class weights must be non-negative, finite and not all zero"));
    }
    Ok(())
}

pub fn inverse_frequency_weights(counts: &[u64]) -> Result<Vec<f64>> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(invalid("no labeled pixels"));
    }
    let raw: Vec<f64> = counts.iter().map(|&n| if n == 0 { 0.0 } else { total as f64 / n as f64 }).collect();
    let present = counts.iter().filter(|&&n| n > 0).count() as f64;
    let mean = raw.iter().sum::<f64>() / present;
    Ok(raw.into_iter().map(|w| w / mean).collect())
}

/// `−(1/N) Σ_pixels Σ_s w_s · ȳ_s · log(max(y_s, floor))` with N = B·H·W,
/// i.e. the per-image loss averaged over the batch.
pub fn cross_entropy_loss(probs: &FeatureBatch, labels: &LabelMap, weights: &[f64]) -> Result<f64> {
    let s = probs.shape();
    if labels.dims() != (s.batch, s.height, s.width) {
        return Err(invalid(format!("labels {:?} vs probabilities {:?}", labels.dims(), s)));
    }
    if weights.len() != s.channels {
        return Err(invalid(format!("{} weights for {} classes", weights.len(), s.channels)));
    }
    labels.check_classes(s.channels)?;
    let mut total = 0.0;
    for (px, &t) in probs.pixels().zip(labels.data()) {
        total -= weights[t as usize] * f64::from(px[t as usize]).max(PROB_FLOOR).ln();
    }
    Ok(total / s.pixels() as f64)
}

/// Gradient of one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrad {
    Linear { weight: Vec<f64>, bias: Vec<f64> },
    Bn { gamma: Vec<f64>, beta: Vec<f64> },
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    /// Fraction of pixels whose argmax matches the label.
    pub accuracy: f64,
    /// Parallel to `Model::layers`.
    pub layers: Vec<LayerGrad>,
    /// Batch mean and variance seen by each batch-norm layer, in order.
    pub batch_stats: Vec<(ChannelVector, ChannelVector)>,
}

enum Cache {
    Linear { input: Vec<f64> },
    Bn { normalized: Vec<f64>, inv_std: Vec<f64> },
    Relu { input: Vec<f64> },
    Softmax,
}

/// Train-mode loss and exact parameter gradients. The model is not mutated.
pub fn backward_pass(model: &Model, batch: &FeatureBatch, labels: &LabelMap, weights: &[f64]) -> Result<Gradients> {
    let shape = batch.shape();
    if labels.dims() != (shape.batch, shape.height, shape.width) {
        return Err(invalid("labels do not match the batch"));
    }
    if weights.len() != model.classes() {
        return Err(invalid("class weight count differs from model classes"));
    }
    labels.check_classes(model.classes())?;
    if batch.channels() != model.architecture().input_channels {
        return Err(invalid("input channel count differs from the model"));
    }
    let n = shape.pixels();
    if n < 2 {
        return Err(invalid("training needs B·H·W >= 2"));
    }

    let mut h: Vec<f64> = batch.data().iter().map(|&v| f64::from(v)).collect();
    let mut width = batch.channels();
    let mut caches = Vec::with_capacity(model.layers().len());
    let mut stats = Vec::new();

    for layer in model.layers() {
        match layer {
            Layer::Linear(l) => {
                let (cin, cout) = (l.in_features(), l.out_features());
                let mut out = vec![0.0; n * cout];
                for p in 0..n {
                    let x = &h[p * cin..(p + 1) * cin];
                    for o in 0..cout {
                        let row = &l.weight[o * cin..(o + 1) * cin];
                        let mut acc = f64::from(l.bias[o]);
                        for (w, v) in row.iter().zip(x) {
                            acc += f64::from(*w) * v;
                        }
                        out[p * cout + o] = acc;
                    }
                }
                caches.push(Cache::Linear { input: std::mem::replace(&mut h, out) });
                width = cout;
            }
            Layer::InputBn(bn) | Layer::Bn(bn) => {
                let c = width;
                let mut mean = vec![0.0; c];
                for px in h.chunks_exact(c) {
                    for (m, v) in mean.iter_mut().zip(px) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; c];
                for px in h.chunks_exact(c) {
                    for ((s, v), m) in var.iter_mut().zip(px).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps()).sqrt()).collect();
                let mut normalized = vec![0.0; h.len()];
                for (p, px) in h.chunks_exact(c).enumerate() {
                    for i in 0..c {
                        let xh = (px[i] - mean[i]) * inv_std[i];
                        normalized[p * c + i] = xh;
                    }
                }
                h = normalized
                    .chunks_exact(c)
                    .flat_map(|px| (0..c).map(move |i| f64::from(bn.gamma[i]) * px[i] + f64::from(bn.beta[i])))
                    .collect();
                stats.push((ChannelVector(mean), ChannelVector(var)));
                caches.push(Cache::Bn { normalized, inv_std });
            }
            Layer::Relu => {
                let out = h.iter().map(|&v| v.max(0.0)).collect();
                caches.push(Cache::Relu { input: std::mem::replace(&mut h, out) });
            }
            Layer::SoftmaxHead => {
                for px in h.chunks_exact_mut(width) {
                    let max = px.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for v in px.iter_mut() {
                        *v = (*v - max).exp();
                        total += *v;
                    }
                    px.iter_mut().for_each(|v| *v /= total);
                }
                caches.push(Cache::Softmax);
            }
        }
    }

    // h holds per-pixel class probabilities.
    let classes = width;
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut grad = vec![0.0; h.len()];
    for (p, (px, &t)) in h.chunks_exact(classes).zip(labels.data()).enumerate() {
        let t = t as usize;
        let pt = px[t];
        loss -= weights[t] * pt.max(PROB_FLOOR).ln();
        let argmax = (0..classes).fold(0, |b, i| if px[i] > px[b] { i } else { b });
        correct += usize::from(argmax == t);
        if pt > PROB_FLOOR {
            // d/dz of −w_t·log softmax(z)_t
            let scale = weights[t] / n as f64;
            for s in 0..classes {
                grad[p * classes + s] = scale * (px[s] - f64::from(u8::from(s == t)));
            }
        }
    }
    loss /= n as f64;

    let mut layer_grads = vec![LayerGrad::None; model.layers().len()];
    let mut dh = grad;
    // The softmax cache is consumed by the fused loss gradient above.
    for (idx, (layer, cache)) in model.layers().iter().zip(&caches).enumerate().rev() {
        match (layer, cache) {
            (Layer::SoftmaxHead, Cache::Softmax) => {}
            (Layer::Linear(l), Cache::Linear { input }) => {
                let (cin, cout) = (l.in_features(), l.out_features());
                let mut gw = vec![0.0; cin * cout];
                let mut gb = vec![0.0; cout];
                let mut dx = vec![0.0; n * cin];
                for p in 0..n {
                    let dy = &dh[p * cout..(p + 1) * cout];
                    let x = &input[p * cin..(p + 1) * cin];
                    for o in 0..cout {
                        gb[o] += dy[o];
                        for k in 0..cin {
                            gw[o * cin + k] += dy[o] * x[k];
                            dx[p * cin + k] += dy[o] * f64::from(l.weight[o * cin + k]);
                        }
                    }
                }
                layer_grads[idx] = LayerGrad::Linear { weight: gw, bias: gb };
                dh = dx;
            }
            (Layer::Relu, Cache::Relu { input }) => {
                for (d, &x) in dh.iter_mut().zip(input) {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            (Layer::InputBn(bn) | Layer::Bn(bn), Cache::Bn { normalized, inv_std }) => {
                let c = bn.channels();
                let mut g_gamma = vec![0.0; c];
                let mut g_beta = vec![0.0; c];
                for (dy, xh) in dh.chunks_exact(c).zip(normalized.chunks_exact(c)) {
                    for i in 0..c {
                        g_gamma[i] += dy[i] * xh[i];
                        g_beta[i] += dy[i];
                    }
                }
                // dx = γ·inv_std/N · (N·dy − Σdy − x̂·Σ(dy·x̂))
                let nf = n as f64;
                let mut dx = vec![0.0; dh.len()];
                for (p, (dy, xh)) in dh.chunks_exact(c).zip(normalized.chunks_exact(c)).enumerate() {
                    for i in 0..c {
                        let k = f64::from(bn.gamma[i]) * inv_std[i] / nf;
                        dx[p * c + i] = k * (nf * dy[i] - g_beta[i] - xh[i] * g_gamma[i]);
                    }
                }
                layer_grads[idx] = LayerGrad::Bn { gamma: g_gamma, beta: g_beta };
                dh = dx;
            }
            _ => return Err(Error::InternalInvariant("layer/cache mismatch in backward pass".into())),
        }
    }

    Ok(Gradients { loss, accuracy: correct as f64 / n as f64, layers: layer_grads, batch_stats: stats })
}

/// `θ ← θ − lr·∇θ` on every linear weight/bias and batch-norm γ/β.
pub fn sgd_step(model: &mut Model, grads: &Gradients, learning_rate: f64) -> Result<()> {
    if grads.layers.len() != model.layers().len() {
        return Err(invalid("gradient does not match model layout"));
    }
    fn update(params: &mut [f32], grad: &[f64], lr: f64) {
        for (p, g) in params.iter_mut().zip(grad) {
            *p = (f64::from(*p) - lr * g) as f32;
        }
    }
    for (layer, g) in model.layers_mut().iter_mut().zip(&grads.layers) {
        match (layer, g) {
            (Layer::Linear(l), LayerGrad::Linear { weight, bias }) => {
                update(&mut l.weight, weight, learning_rate);
                update(&mut l.bias, bias, learning_rate);
            }
            (Layer::InputBn(bn) | Layer::Bn(bn), LayerGrad::Bn { gamma, beta }) => {
                update(&mut bn.gamma, gamma, learning_rate);
                update(&mut bn.beta, beta, learning_rate);
            }
            (_, LayerGrad::None) => {}
            _ => return Err(Error::InternalInvariant("gradient kind mismatch".into())),
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub records: Vec<TrainRecord>,
    /// Per step, the batch statistics each batch-norm layer folded into its
    /// running statistics.
    pub batch_stats: Vec<Vec<(ChannelVector, ChannelVector)>>,
    pub class_weights: Vec<f64>,
}

impl TrainingLog {
    /// Columns `step,loss,source_accuracy`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,source_accuracy\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{}", r.step, r.loss, r.accuracy);
        }
        out
    }
}

/// Runs `cfg.steps` SGD steps on labeled source batches drawn by the
/// seeded epoch sampler.
pub fn pretrain(model: &mut Model, source: &dyn ImageSource, cfg: &PretrainConfig) -> Result<TrainingLog> {
    cfg.validate(model.classes())?;
    if source.is_empty() {
        return Err(invalid("source set is empty"));
    }
    let weights = cfg.resolve_weights(source, model.classes())?;
    let mut log = TrainingLog { class_weights: weights.clone(), ..TrainingLog::default() };
    if cfg.steps == 0 {
        return Ok(log);
    }
    let mut sampler = OfflineSampler::new(cfg.seed, source.len(), cfg.batch_size.min(source.len()))?;
    for step in 1..=cfg.steps {
        let ids = sampler.next_batch();
        let batch = load_batch(source, &ids)?;
        let labels = load_labels(source, &ids)?;
        let grads = backward_pass(model, &batch, &labels, &weights)?;
        let finite = grads.loss.is_finite()
            && grads.layers.iter().all(|g| match g {
                LayerGrad::Linear { weight, bias } => weight.iter().chain(bias).all(|v| v.is_finite()),
                LayerGrad::Bn { gamma, beta } => gamma.iter().chain(beta).all(|v| v.is_finite()),
                LayerGrad::None => true,
            });
        if !finite {
            return Err(Error::TrainingFailure { step, loss: grads.loss });
        }
        sgd_step(model, &grads, cfg.learning_rate)?;
        if model.layers().iter().any(|l| match l {
            Layer::Linear(l) => l.weight.iter().chain(&l.bias).any(|v| !v.is_finite()),
            Layer::InputBn(b) | Layer::Bn(b) => b.gamma.iter().chain(&b.beta).any(|v| !v.is_finite()),
            _ => false,
        }) {
            return Err(Error::TrainingFailure { step, loss: grads.loss });
        }
        for (bn, (mean, var)) in model.bn_layers_mut().zip(&grads.batch_stats) {
            bn.update_running(mean, var, cfg.bn_momentum);
        }
        log.records.push(TrainRecord { step, loss: grads.loss, accuracy: grads.accuracy });
        log.batch_stats.push(grads.batch_stats);
    }
    Ok(log)
}
