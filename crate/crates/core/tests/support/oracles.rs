//! Independent reference implementations shared by integration tests.
//!
//! Everything here is written with plain scalar loops over `f64` copies of
//! the parameters so it shares no code path with the library.

#![allow(clippy::needless_range_loop)]
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ubna_core::model::{Architecture, Layer, Model};
use ubna_core::pretrain::{backward_pass, LayerGrad, PROB_FLOOR};
use ubna_core::tensor::Shape;
use ubna_core::{FeatureBatch, LabelMap};

#[derive(Debug, Clone)]
pub enum RefLayer {
    Bn { gamma: Vec<f64>, beta: Vec<f64>, eps: f64 },
    Linear { inputs: usize, outputs: usize, w: Vec<f64>, b: Vec<f64> },
    Relu,
    Softmax,
}

/// `f64` copy of a model's trainable parameters.
#[derive(Debug, Clone)]
pub struct RefNet {
    pub layers: Vec<RefLayer>,
}

impl RefNet {
    pub fn from_model(model: &Model) -> Self {
        let widen = |v: &[f32]| v.iter().map(|&x| f64::from(x)).collect::<Vec<_>>();
        let layers = model
            .layers()
            .iter()
            .map(|l| match l {
                Layer::InputBn(bn) | Layer::Bn(bn) => {
                    RefLayer::Bn { gamma: widen(&bn.gamma), beta: widen(&bn.beta), eps: bn.eps() }
                }
                Layer::Linear(lin) => RefLayer::Linear {
                    inputs: lin.in_features(),
                    outputs: lin.out_features(),
                    w: widen(&lin.weight),
                    b: widen(&lin.bias),
                },
                Layer::Relu => RefLayer::Relu,
                Layer::SoftmaxHead => RefLayer::Softmax,
            })
            .collect();
        Self { layers }
    }

    /// Mutable access to every scalar parameter, tagged with
    /// `(layer, kind, index)`.
    pub fn params_mut(&mut self) -> Vec<(usize, &'static str, usize, &mut f64)> {
        let mut out = Vec::new();
        for (li, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                RefLayer::Bn { gamma, beta, .. } => {
                    out.extend(gamma.iter_mut().enumerate().map(|(i, p)| (li, "gamma", i, p)));
                    out.extend(beta.iter_mut().enumerate().map(|(i, p)| (li, "beta", i, p)));
                }
                RefLayer::Linear { w, b, .. } => {
                    out.extend(w.iter_mut().enumerate().map(|(i, p)| (li, "weight", i, p)));
                    out.extend(b.iter_mut().enumerate().map(|(i, p)| (li, "bias", i, p)));
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&mut self) -> usize {
        self.params_mut().len()
    }
}

/// Train-mode forward (batch statistics at every BN layer) followed by the
/// weighted mean pixel cross-entropy. Also returns the pre-activation sign
/// pattern of every ReLU so callers can detect kink crossings.
pub fn train_loss(net: &RefNet, x: &FeatureBatch, labels: &LabelMap, weights: &[f64], floor: f64) -> (f64, Vec<bool>) {
    let n = x.shape().pixels();
    let mut c = x.channels();
    let mut h: Vec<Vec<f64>> = x.data().chunks(c).map(|p| p.iter().map(|&v| f64::from(v)).collect()).collect();
    let mut signs = Vec::new();
    for layer in &net.layers {
        match layer {
            RefLayer::Bn { gamma, beta, eps } => {
                for ch in 0..c {
                    let mut mean = 0.0;
                    for p in &h {
                        mean += p[ch];
                    }
                    mean /= n as f64;
                    let mut var = 0.0;
                    for p in &h {
                        var += (p[ch] - mean) * (p[ch] - mean);
                    }
                    var /= n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    for p in h.iter_mut() {
                        p[ch] = gamma[ch] * (p[ch] - mean) * inv + beta[ch];
                    }
                }
            }
            RefLayer::Linear { inputs, outputs, w, b } => {
                assert_eq!(*inputs, c);
                for p in h.iter_mut() {
                    let mut out = vec![0.0; *outputs];
                    for o in 0..*outputs {
                        let mut acc = b[o];
                        for i in 0..*inputs {
                            acc += w[o * inputs + i] * p[i];
                        }
                        out[o] = acc;
                    }
                    *p = out;
                }
                c = *outputs;
            }
            RefLayer::Relu => {
                for p in h.iter_mut() {
                    for v in p.iter_mut() {
                        signs.push(*v > 0.0);
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                }
            }
            RefLayer::Softmax => {
                for p in h.iter_mut() {
                    let mut m = f64::NEG_INFINITY;
                    for &v in p.iter() {
                        m = m.max(v);
                    }
                    let mut z = 0.0;
                    for v in p.iter_mut() {
                        *v = (*v - m).exp();
                        z += *v;
                    }
                    for v in p.iter_mut() {
                        *v /= z;
                    }
                }
            }
        }
    }
    let mut loss = 0.0;
    for (p, &y) in h.iter().zip(labels.data()) {
        loss -= weights[y as usize] * p[y as usize].max(floor).ln();
    }
    (loss / n as f64, signs)
}

/// Naive per-channel mean and biased variance.
pub fn naive_moments(x: &FeatureBatch) -> (Vec<f64>, Vec<f64>) {
    let c = x.channels();
    let n = x.shape().pixels();
    let mut mean = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            mean[ch] += f64::from(x.data()[i * c + ch]);
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut var = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let d = f64::from(x.data()[i * c + ch]) - mean[ch];
            var[ch] += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= n as f64;
    }
    (mean, var)
}

pub const H: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-3;

/// A small random instance with non-trivial γ, β and class weights.
pub fn instance(seed: u64) -> (Model, FeatureBatch, LabelMap, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = Architecture { input_channels: 3, hidden: vec![5, 4], classes: 3, input_bn: true };
    let mut model = Model::init(arch, seed).unwrap();
    for bn in model.bn_layers_mut() {
        for g in bn.gamma.iter_mut() {
            *g = rng.gen_range(0.5..1.5);
        }
        for b in bn.beta.iter_mut() {
            *b = rng.gen_range(-0.5..0.5);
        }
    }
    let shape = Shape::new(2, 3, 3, 3).unwrap();
    let data = (0..shape.len()).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let x = FeatureBatch::new(shape, data).unwrap();
    let labels = LabelMap::new(2, 3, 3, (0..18).map(|_| rng.gen_range(0..3)).collect()).unwrap();
    let weights = (0..3).map(|_| rng.gen_range(0.5..2.0)).collect();
    (model, x, labels, weights)
}

fn analytic(model: &Model, grads: &[LayerGrad], layer: usize, kind: &str, i: usize) -> f64 {
    match (&model.layers()[layer], &grads[layer]) {
        (Layer::Linear(_), LayerGrad::Linear { weight, bias }) => match kind {
            "weight" => weight[i],
            _ => bias[i],
        },
        (Layer::InputBn(_) | Layer::Bn(_), LayerGrad::Bn { gamma, beta }) => match kind {
            "gamma" => gamma[i],
            _ => beta[i],
        },
        other => panic!("layout mismatch at {layer}: {other:?}"),
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Outcome of [`gradient_check`].
#[derive(Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    /// Perturbations that flipped a ReLU and so have no central difference.
    pub skipped: usize,
    pub worst_rel_err: f64,
    pub kinds: std::collections::BTreeSet<&'static str>,
}

/// Compares every analytic parameter gradient against central finite
/// differences of [`train_loss`] on one seeded instance per seed.
pub fn gradient_check(seeds: std::ops::Range<u64>) -> Result<GradCheck, String> {
    let mut out = GradCheck::default();
    for seed in seeds {
        let (model, x, labels, weights) = instance(seed);
        let grads = backward_pass(&model, &x, &labels, &weights).map_err(|e| e.to_string())?;
        let net = RefNet::from_model(&model);
        let (loss, _) = train_loss(&net, &x, &labels, &weights, PROB_FLOOR);
        if (loss - grads.loss).abs() > 1e-6 * loss.abs().max(1.0) {
            return Err(format!("seed {seed}: loss {loss} vs {}", grads.loss));
        }
        let count = net.clone().param_count();
        for p in 0..count {
            let mut plus = net.clone();
            let mut minus = net.clone();
            let (layer, kind, i) = {
                let mut ps = plus.params_mut();
                let (l, k, i, v) = &mut ps[p];
                **v += H;
                (*l, *k, *i)
            };
            *minus.params_mut()[p].3 -= H;
            let (lp, sp) = train_loss(&plus, &x, &labels, &weights, PROB_FLOOR);
            let (lm, sm) = train_loss(&minus, &x, &labels, &weights, PROB_FLOOR);
            if sp != sm {
                out.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * H);
            let exact = analytic(&model, &grads.layers, layer, kind, i);
            let e = rel_err(exact, numeric);
            if e > GRAD_TOL {
                return Err(format!(
                    "seed {seed} layer {layer} {kind}[{i}]: analytic {exact} numeric {numeric} rel {e}"
                ));
            }
            out.worst_rel_err = out.worst_rel_err.max(e);
            out.kinds.insert(kind);
            out.checked += 1;
        }
    }
    Ok(out)
}
