//! Gradient-free adaptation of batch-norm statistics to a target domain.
//!
//! Starting from the pre-trained running statistics, each adaptation step
//! draws an unlabeled target batch and moves every batch-norm layer's
//! running mean and variance towards the batch statistics with momentum
//!
//! ```text
//! η_ℓ(κ) = η0 · exp(−κ · α_batch) · exp(−ℓ · α_layer)
//! ```
//!
//! so early steps and early layers adapt fastest and a share of the source
//! statistics survives a finite run. Weights, biases, γ and β are never
//! modified.
//!
//! Also here: the full-recomputation baseline ([`adabn_recompute`]), the
//! batch-statistics-at-test baseline ([`predict_with_batch_stats`]),
//! sequential multi-domain adaptation and the online clock constraint.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batchnorm::{batch_stats, bn_normalize, AdaptNormalization};
use crate::datagen::{load_batch, ImageSource};
use crate::error::{invalid, Error, Result};
use crate::model::Model;
use crate::tensor::{ChannelVector, FeatureBatch};

/// Momentum schedule. Step κ runs over
/// `first_step_index .. first_step_index + num_steps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationSchedule {
    pub eta0: f64,
    pub alpha_batch: f64,
    pub alpha_layer: f64,
    pub num_steps: usize,
    #[serde(default = "default_first_step")]
    pub first_step_index: usize,
    #[serde(default)]
    pub normalize_with: AdaptNormalization,
}

fn default_first_step() -> usize {
    1
}

pub const DEFAULT_ETA0: f64 = 0.1;
pub const DEFAULT_ALPHA_BATCH: f64 = 0.08;
pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_BATCH_SIZE: usize = 6;

impl AdaptationSchedule {
    pub fn new(eta0: f64, alpha_batch: f64, alpha_layer: f64, num_steps: usize) -> Result<Self> {
        let s = Self {
            eta0,
            alpha_batch,
            alpha_layer,
            num_steps,
            first_step_index: 1,
            normalize_with: AdaptNormalization::PostUpdateRunning,
        };
        s.validate()?;
        Ok(s)
    }

    /// Constant momentum η0 = 0.1.
    pub fn ubna0() -> Self {
        Self::new(DEFAULT_ETA0, 0.0, 0.0, DEFAULT_STEPS).expect("valid preset")
    }

    /// Batch-wise decay α_batch = 0.08.
    pub fn ubna() -> Self {
        Self::new(DEFAULT_ETA0, DEFAULT_ALPHA_BATCH, 0.0, DEFAULT_STEPS).expect("valid preset")
    }

    /// Batch-wise decay plus layer-wise weighting.
    pub fn ubna_plus(alpha_layer: f64) -> Result<Self> {
        Self::new(DEFAULT_ETA0, DEFAULT_ALPHA_BATCH, alpha_layer, DEFAULT_STEPS)
    }

    pub fn with_steps(mut self, num_steps: usize) -> Self {
        self.num_steps = num_steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta0 > 0.0 && self.eta0 <= 1.0) {
            return Err(invalid(format!("eta0 must lie in (0, 1], got {}", self.eta0)));
        }
        for (name, v) in [("alpha_batch", self.alpha_batch), ("alpha_layer", self.alpha_layer)] {
            if !v.is_finite() || v < 0.0 {
                return Err(invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.first_step_index > 1 {
            return Err(invalid(format!("first_step_index must be 0 or 1, got {}", self.first_step_index)));
        }
        Ok(())
    }

    pub fn steps(&self) -> std::ops::Range<usize> {
        self.first_step_index..self.first_step_index + self.num_steps
    }

    /// η(κ) before layer weighting.
    pub fn batch_momentum(&self, step: usize) -> f64 {
        self.eta0 * (-(step as f64) * self.alpha_batch).exp()
    }

    /// The factor `exp(−ℓ · α_layer)` of batch-norm layer ℓ (1-based).
    pub fn layer_factor(&self, layer: usize) -> f64 {
        (-(layer as f64) * self.alpha_layer).exp()
    }

    /// Σ_κ η(κ) over the scheduled steps.
    pub fn momentum_sum(&self) -> f64 {
        self.steps().map(|k| self.batch_momentum(k)).sum()
    }

    /// Share of the initial statistics left after the run when every step
    /// sees the same batch: Π_κ (1 − η_ℓ(κ)).
    pub fn retained_weight(&self, layer: usize) -> f64 {
        self.steps().map(|k| 1.0 - momentum_at(self, k, layer)).product()
    }
}

/// Momentum of batch-norm layer `layer` (1-based) at adaptation step `step`.
pub fn momentum_at(schedule: &AdaptationSchedule, step: usize, layer: usize) -> f64 {
    schedule.batch_momentum(step) * schedule.layer_factor(layer)
}

/// The adaptation methods the command line exposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ubna0")]
    Ubna0,
    #[serde(rename = "ubna")]
    Ubna,
    #[serde(rename = "ubna+")]
    UbnaPlus,
    #[serde(rename = "adabn")]
    AdaBn,
    #[serde(rename = "none")]
    None,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ubna0 => "ubna0",
            Method::Ubna => "ubna",
            Method::UbnaPlus => "ubna+",
            Method::AdaBn => "adabn",
            Method::None => "none",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(match text {
            "ubna0" => Method::Ubna0,
            "ubna" => Method::Ubna,
            "ubna+" => Method::UbnaPlus,
            "adabn" => Method::AdaBn,
            "none" => Method::None,
            other => return Err(invalid(format!("unknown method {other:?}"))),
        })
    }

    /// Default (α_batch, α_layer) of the momentum-schedule methods.
    pub fn default_alphas(self) -> Option<(f64, f64)> {
        match self {
            Method::Ubna0 => Some((0.0, 0.0)),
            Method::Ubna => Some((DEFAULT_ALPHA_BATCH, 0.0)),
            Method::UbnaPlus => Some((DEFAULT_ALPHA_BATCH, 0.03)),
            Method::AdaBn | Method::None => None,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Where adaptation batches come from.
#[derive(Debug, Clone, PartialEq)]
pub enum AdaptationProtocol {
    /// Uniform sampling without replacement within an epoch, reshuffled
    /// every epoch.
    Offline { seed: u64, batch_size: usize },
    /// Consecutive frames of a temporally ordered stream, `batch_size`
    /// frames per step, one frame every `frame_period` seconds.
    Online { batch_size: usize, frame_period: f64 },
    /// The same batch at every step.
    FewShot { batch_ids: Vec<usize> },
}

impl AdaptationProtocol {
    pub fn batch_size(&self) -> usize {
        match self {
            Self::Offline { batch_size, .. } | Self::Online { batch_size, .. } => *batch_size,
            Self::FewShot { batch_ids } => batch_ids.len(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Offline { .. } => "offline",
            Self::Online { .. } => "online",
            Self::FewShot { .. } => "fewshot",
        }
    }
}

/// Seeded epoch-wise shuffling sampler behind the offline protocol.
#[derive(Debug, Clone)]
pub struct OfflineSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
}

impl OfflineSampler {
    pub fn new(seed: u64, len: usize, batch_size: usize) -> Result<Self> {
        if batch_size == 0 || batch_size > len {
            return Err(invalid(format!("batch size {batch_size} invalid for {len} images")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Ok(Self { rng, order, cursor: 0, batch_size })
    }

    /// Next batch; an incomplete epoch tail is dropped and a new epoch
    /// is shuffled.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let batch = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        batch
    }
}

/// Elapsed stream time after `steps` online steps: `t = κ · Δt · B`.
/// Fails unless exactly `κ · B` frames have been consumed.
pub fn online_clock_check(protocol: &AdaptationProtocol, steps: usize, frames_consumed: usize) -> Result<f64> {
    let AdaptationProtocol::Online { batch_size, frame_period } = *protocol else {
        return Err(invalid("clock check applies to the online protocol only"));
    };
    if frames_consumed != steps * batch_size {
        return Err(Error::ProtocolViolation(format!(
            "{frames_consumed} frames consumed after {steps} steps of {batch_size}"
        )));
    }
    Ok(steps as f64 * frame_period * batch_size as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub eta: f64,
    pub layer_etas: Vec<f64>,
    pub metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdaptationTrace {
    pub bn_layers: usize,
    pub records: Vec<StepRecord>,
}

impl AdaptationTrace {
    /// Columns `step,eta,eta_layer_1..eta_layer_L,metric`; an absent
    /// metric is an empty field.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,eta");
        for l in 1..=self.bn_layers {
            let _ = write!(out, ",eta_layer_{l}");
        }
        out.push_str(",metric\n");
        for r in &self.records {
            let _ = write!(out, "{},{}", r.step, r.eta);
            for e in &r.layer_etas {
                let _ = write!(out, ",{e}");
            }
            match r.metric {
                Some(m) => {
                    let _ = writeln!(out, ",{m}");
                }
                None => out.push_str(",\n"),
            }
        }
        out
    }

    pub fn metrics(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.metric).collect()
    }
}

/// Called after every adaptation step with the model (to be evaluated with
/// frozen statistics) and the step index; its value becomes the trace
/// metric.
pub type EvalHook<'a> = &'a mut dyn FnMut(&Model, usize) -> Result<f64>;

fn check_adaptable(model: &Model, data: &dyn ImageSource) -> Result<()> {
    if model.bn_count() == 0 {
        return Err(invalid("model has no batch-norm layers"));
    }
    if data.is_empty() {
        return Err(invalid("adaptation set is empty"));
    }
    Ok(())
}

/// Runs the scheduled adaptation of every batch-norm layer's running
/// statistics; returns the per-step trace.
pub fn ubna_adapt(
    model: &mut Model,
    data: &dyn ImageSource,
    schedule: &AdaptationSchedule,
    protocol: &AdaptationProtocol,
    mut hook: Option<EvalHook<'_>>,
) -> Result<AdaptationTrace> {
    check_adaptable(model, data)?;
    schedule.validate()?;
    let layers = model.bn_count();
    let mut trace = AdaptationTrace { bn_layers: layers, records: Vec::with_capacity(schedule.num_steps) };
    if schedule.num_steps == 0 {
        return Ok(trace);
    }

    let mut offline = None;
    match protocol {
        AdaptationProtocol::Offline { seed, batch_size } => {
            offline = Some(OfflineSampler::new(*seed, data.len(), *batch_size)?);
        }
        AdaptationProtocol::Online { batch_size, frame_period } => {
            if !data.is_temporally_ordered() {
                return Err(Error::ProtocolViolation("online adaptation needs a temporally ordered stream".into()));
            }
            if *batch_size == 0 || !frame_period.is_finite() || *frame_period <= 0.0 {
                return Err(invalid("online protocol needs batch_size >= 1 and frame_period > 0"));
            }
            if schedule.num_steps * batch_size > data.len() {
                return Err(Error::ProtocolViolation(format!(
                    "stream of {} frames cannot feed {} steps of {batch_size}",
                    data.len(),
                    schedule.num_steps
                )));
            }
        }
        AdaptationProtocol::FewShot { batch_ids } => {
            if batch_ids.is_empty() {
                return Err(invalid("few-shot batch is empty"));
            }
            if let Some(&bad) = batch_ids.iter().find(|&&i| i >= data.len()) {
                return Err(Error::IndexOutOfRange { index: bad, size: data.len() });
            }
        }
    }
    // The few-shot batch is loaded once and reused verbatim.
    let fixed = match protocol {
        AdaptationProtocol::FewShot { batch_ids } => Some(load_batch(data, batch_ids)?),
        _ => None,
    };

    let mut frames_consumed = 0;
    for (done, step) in schedule.steps().enumerate() {
        let batch = match protocol {
            AdaptationProtocol::Offline { .. } => load_batch(data, &offline.as_mut().expect("sampler").next_batch())?,
            AdaptationProtocol::Online { batch_size, .. } => {
                let ids: Vec<usize> = (frames_consumed..frames_consumed + batch_size).collect();
                frames_consumed += batch_size;
                load_batch(data, &ids)?
            }
            AdaptationProtocol::FewShot { .. } => fixed.clone().expect("fixed batch"),
        };
        let layer_etas: Vec<f64> = (1..=layers).map(|l| momentum_at(schedule, step, l)).collect();
        model.adapt_step(&batch, &layer_etas, schedule.normalize_with)?;
        if matches!(protocol, AdaptationProtocol::Online { .. }) {
            online_clock_check(protocol, done + 1, frames_consumed)?;
        }
        let metric = match hook.as_mut() {
            Some(h) => Some(h(model, step)?),
            None => None,
        };
        trace.records.push(StepRecord { step, eta: schedule.batch_momentum(step), layer_etas, metric });
    }
    Ok(trace)
}

/// One leg of a sequential adaptation.
pub struct SequentialSegment<'a> {
    pub data: &'a dyn ImageSource,
    pub schedule: AdaptationSchedule,
    pub protocol: AdaptationProtocol,
}

/// Adapts through the segments in order. The step counter restarts at each
/// domain switch, so the momentum returns to its initial value.
pub fn sequential_adapt(
    model: &mut Model,
    segments: &[SequentialSegment<'_>],
    mut hook: Option<EvalHook<'_>>,
) -> Result<Vec<AdaptationTrace>> {
    if segments.is_empty() {
        return Err(invalid("sequential adaptation needs at least one segment"));
    }
    segments
        .iter()
        .map(|seg| {
            let h: Option<EvalHook<'_>> = match hook.as_mut() {
                Some(h) => Some(&mut **h),
                None => None,
            };
            ubna_adapt(model, seg.data, &seg.schedule, &seg.protocol, h)
        })
        .collect()
}

#[derive(Debug, Clone)]
struct PooledMoments {
    count: usize,
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl PooledMoments {
    fn merge(&mut self, count: usize, mean: &ChannelVector, var: &ChannelVector) {
        if self.count == 0 {
            self.count = count;
            self.mean = mean.0.clone();
            self.var = var.0.clone();
            return;
        }
        let na = self.count as f64;
        let nb = count as f64;
        let n = na + nb;
        for c in 0..self.mean.len() {
            let delta = mean[c] - self.mean[c];
            self.var[c] = (na * self.var[c] + nb * var[c]) / n + delta * delta * na * nb / (n * n);
            self.mean[c] += delta * nb / n;
        }
        self.count += count;
    }
}

/// Replaces every batch-norm layer's running statistics by the exact mean
/// and biased variance of its inputs over the whole set. Batches of
/// `batch_size` are propagated in index order, each normalized with its own
/// statistics.
pub fn adabn_recompute(model: &mut Model, data: &dyn ImageSource, batch_size: usize) -> Result<()> {
    check_adaptable(model, data)?;
    if batch_size == 0 {
        return Err(invalid("batch size must be >= 1"));
    }
    let mut pooled = vec![PooledMoments { count: 0, mean: Vec::new(), var: Vec::new() }; model.bn_count()];
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let x = load_batch(data, chunk)?;
        model.forward_with(&x, |i, bn, h| {
            let (mean, var) = batch_stats(h)?;
            pooled[i].merge(h.shape().pixels(), &mean, &var);
            bn_normalize(h, &mean, &var, bn)
        })?;
    }
    for (bn, moments) in model.bn_layers_mut().zip(pooled) {
        bn.set_stats(ChannelVector(moments.mean), ChannelVector(moments.var))?;
    }
    Ok(())
}

/// Class probabilities with every batch-norm layer normalizing by the
/// batch's own statistics; predictions depend on the other images in the
/// batch. Nothing is mutated.
pub fn predict_with_batch_stats(model: &Model, batch: &FeatureBatch) -> Result<FeatureBatch> {
    model.forward_batch_stats(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{DatasetSpec, DomainDataset, InMemorySource};
    use crate::model::Architecture;

    fn small_dataset(seed: u64, size: usize) -> DomainDataset {
        DomainDataset::new(DatasetSpec { height: 6, width: 6, ..DatasetSpec::default_source(seed, size) }).unwrap()
    }

    #[test]
    fn constant_schedule() {
        let s = AdaptationSchedule::ubna0();
        for k in 0..60 {
            for l in 1..5 {
                assert_eq!(momentum_at(&s, k, l), 0.1);
            }
        }
    }

    #[test]
    fn decayed_momentum_at_step_fifty() {
        let s = AdaptationSchedule::ubna();
        let expected = 0.1 * (-4.0f64).exp();
        assert!((momentum_at(&s, 50, 1) - expected).abs() < 1e-18);
        assert!((expected - 1.8316e-3).abs() < 1e-7);
    }

    #[test]
    fn layer_ratio() {
        let s = AdaptationSchedule::ubna_plus(0.3).unwrap();
        let r = momentum_at(&s, 7, 2) / momentum_at(&s, 7, 1);
        assert!((r - (-0.3f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn schedule_validation() {
        assert!(AdaptationSchedule::new(0.0, 0.0, 0.0, 5).is_err());
        assert!(AdaptationSchedule::new(1.5, 0.0, 0.0, 5).is_err());
        assert!(AdaptationSchedule::new(0.1, -0.1, 0.0, 5).is_err());
        assert!(AdaptationSchedule::new(0.1, 0.0, f64::NAN, 5).is_err());
        let mut s = AdaptationSchedule::ubna();
        s.first_step_index = 2;
        assert!(s.validate().is_err());
    }

    #[test]
    fn first_step_index_shifts_the_schedule() {
        let mut s = AdaptationSchedule::ubna().with_steps(3);
        assert_eq!(s.steps().collect::<Vec<_>>(), vec![1, 2, 3]);
        s.first_step_index = 0;
        assert_eq!(s.steps().collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(momentum_at(&s, 0, 1), 0.1);
    }

    #[test]
    fn offline_sampler_covers_epochs() {
        let mut s = OfflineSampler::new(3, 10, 3).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9, "no repeats within an epoch");
        assert!(OfflineSampler::new(0, 2, 3).is_err());
        let a: Vec<_> = {
            let mut s = OfflineSampler::new(9, 10, 4).unwrap();
            (0..5).map(|_| s.next_batch()).collect()
        };
        let b: Vec<_> = {
            let mut s = OfflineSampler::new(9, 10, 4).unwrap();
            (0..5).map(|_| s.next_batch()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn clock_examples() {
        let online = AdaptationProtocol::Online { batch_size: 6, frame_period: 0.06 };
        assert!((online_clock_check(&online, 50, 300).unwrap() - 18.0).abs() < 1e-12);
        assert_eq!(online_clock_check(&online, 0, 0).unwrap(), 0.0);
        let unit = AdaptationProtocol::Online { batch_size: 1, frame_period: 1.0 };
        assert_eq!(online_clock_check(&unit, 7, 7).unwrap(), 7.0);
        assert!(matches!(online_clock_check(&online, 2, 11), Err(Error::ProtocolViolation(_))));
        assert!(online_clock_check(&AdaptationProtocol::FewShot { batch_ids: vec![0] }, 1, 1).is_err());
    }

    #[test]
    fn zero_steps_leave_model_untouched() {
        let mut model = Model::init(Architecture::default_segmenter(3, 4), 1).unwrap();
        let before = model.clone();
        let data = small_dataset(1, 12);
        let trace = ubna_adapt(
            &mut model,
            &data,
            &AdaptationSchedule::ubna().with_steps(0),
            &AdaptationProtocol::Offline { seed: 0, batch_size: 6 },
            None,
        )
        .unwrap();
        assert!(trace.records.is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn online_rejects_shuffled_and_short_streams() {
        let mut model = Model::init(Architecture::default_segmenter(3, 4), 1).unwrap();
        let shuffled = DomainDataset::new(DatasetSpec {
            ordering: crate::datagen::FrameOrder::Shuffled,
            height: 6,
            width: 6,
            ..DatasetSpec::default_source(1, 30)
        })
        .unwrap();
        let online = AdaptationProtocol::Online { batch_size: 2, frame_period: 0.06 };
        let s = AdaptationSchedule::ubna().with_steps(5);
        let err = ubna_adapt(&mut model, &shuffled, &s, &online, None).unwrap_err();
        assert!(matches!(err, Error::ProtocolViolation(_)));
        let short = small_dataset(1, 9);
        let err = ubna_adapt(&mut model, &short, &s, &online, None).unwrap_err();
        assert!(matches!(err, Error::ProtocolViolation(_)));
    }

    #[test]
    fn fewshot_index_checked() {
        let mut model = Model::init(Architecture::default_segmenter(3, 4), 1).unwrap();
        let data = small_dataset(1, 4);
        let p = AdaptationProtocol::FewShot { batch_ids: vec![0, 4] };
        assert!(ubna_adapt(&mut model, &data, &AdaptationSchedule::ubna(), &p, None).is_err());
    }

    #[test]
    fn trace_columns_and_hook() {
        let mut model = Model::init(Architecture::default_segmenter(3, 4), 1).unwrap();
        let data = small_dataset(2, 12);
        let mut calls = 0;
        let mut hook = |_: &Model, k: usize| {
            calls += 1;
            Ok(k as f64 * 0.5)
        };
        let s = AdaptationSchedule::ubna_plus(0.3).unwrap().with_steps(4);
        let trace =
            ubna_adapt(&mut model, &data, &s, &AdaptationProtocol::Offline { seed: 1, batch_size: 3 }, Some(&mut hook))
                .unwrap();
        assert_eq!(calls, 4);
        let csv = trace.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "step,eta,eta_layer_1,eta_layer_2,eta_layer_3,metric");
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first[0], "1");
        assert_eq!(first[1].parse::<f64>().unwrap(), s.batch_momentum(1));
        assert_eq!(first[5], "0.5");
        for w in trace.records.windows(2) {
            assert!(w[1].eta < w[0].eta);
        }
    }

    #[test]
    fn adabn_single_batch_equals_unit_momentum_step() {
        let arch = Architecture::single_bn(3, 4);
        let data = small_dataset(5, 4);
        let mut a = Model::init(arch.clone(), 2).unwrap();
        let mut b = a.clone();
        adabn_recompute(&mut a, &data, 4).unwrap();
        let batch = load_batch(&data, &[0, 1, 2, 3]).unwrap();
        b.adapt_step(&batch, &[1.0], AdaptNormalization::PostUpdateRunning).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adabn_pooled_moments_match_brute_force() {
        let data = small_dataset(6, 7);
        let mut model = Model::init(Architecture::default_segmenter(3, 4), 3).unwrap();
        adabn_recompute(&mut model, &data, 3).unwrap();
        let mut sum = [0.0f64; 3];
        let mut n = 0usize;
        let mut pixels = Vec::new();
        for i in 0..data.len() {
            let img = data.image(i).unwrap();
            for px in img.pixels() {
                for c in 0..3 {
                    sum[c] += px[c] as f64;
                }
                n += 1;
                pixels.push([px[0] as f64, px[1] as f64, px[2] as f64]);
            }
        }
        let first = model.bn_layer(1).unwrap();
        for c in 0..3 {
            let mean = sum[c] / n as f64;
            let var = pixels.iter().map(|p| (p[c] - mean).powi(2)).sum::<f64>() / n as f64;
            assert!((first.running_mean()[c] - mean).abs() <= 1e-6 * mean.abs().max(1.0));
            assert!((first.running_var()[c] - var).abs() <= 1e-6 * var.max(1e-3));
        }
    }

    #[test]
    fn adabn_rejects_empty_set() {
        let mut model = Model::init(Architecture::single_bn(3, 2), 0).unwrap();
        let empty = InMemorySource::new(vec![], None).unwrap();
        assert!(adabn_recompute(&mut model, &empty, 2).is_err());
    }

    #[test]
    fn sequential_single_segment_matches_direct_run() {
        let data = small_dataset(7, 12);
        let s = AdaptationSchedule::ubna().with_steps(5);
        let p = AdaptationProtocol::Offline { seed: 4, batch_size: 3 };
        let base = Model::init(Architecture::default_segmenter(3, 4), 8).unwrap();
        let mut a = base.clone();
        let ta = ubna_adapt(&mut a, &data, &s, &p, None).unwrap();
        let mut b = base;
        let tb =
            sequential_adapt(&mut b, &[SequentialSegment { data: &data, schedule: s, protocol: p }], None).unwrap();
        assert_eq!(a, b);
        assert_eq!(vec![ta], tb);
        assert!(sequential_adapt(&mut b, &[], None).is_err());
    }

    #[test]
    fn sequential_resets_momentum() {
        let a = small_dataset(7, 12);
        let b = small_dataset(8, 12);
        let s = AdaptationSchedule::ubna_plus(0.3).unwrap().with_steps(4);
        let p = AdaptationProtocol::Offline { seed: 4, batch_size: 3 };
        let mut model = Model::init(Architecture::default_segmenter(3, 4), 8).unwrap();
        let segs = [
            SequentialSegment { data: &a, schedule: s.clone(), protocol: p.clone() },
            SequentialSegment { data: &b, schedule: s.clone(), protocol: p.clone() },
            SequentialSegment { data: &a, schedule: s.clone(), protocol: p },
        ];
        let traces = sequential_adapt(&mut model, &segs, None).unwrap();
        for t in &traces {
            assert_eq!(t.records[0].step, 1);
            assert_eq!(t.records[0].layer_etas[0], 0.1 * (-0.08f64).exp() * (-0.3f64).exp());
        }
    }

    #[test]
    fn batch_stat_prediction_depends_on_batch_mates() {
        let model = Model::init(Architecture::default_segmenter(3, 4), 4).unwrap();
        let data = small_dataset(9, 6);
        let img = data.image(0).unwrap();
        let repeated = FeatureBatch::concat(&[img.clone(), img.clone(), img.clone()]).unwrap();
        let mixed = load_batch(&data, &[0, 1, 2]).unwrap();
        let a = predict_with_batch_stats(&model, &repeated).unwrap().sample(0).unwrap();
        let b = predict_with_batch_stats(&model, &mixed).unwrap().sample(0).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn batch_stat_prediction_equals_eval_when_stats_coincide() {
        // A single-BN model whose running stats equal the batch stats.
        let data = small_dataset(10, 4);
        let batch = load_batch(&data, &[0, 1, 2, 3]).unwrap();
        let mut model = Model::init(Architecture::single_bn(3, 4), 1).unwrap();
        let (m, v) = batch_stats(&batch).unwrap();
        model.bn_layers_mut().next().unwrap().set_stats(m, v).unwrap();
        let a = predict_with_batch_stats(&model, &batch).unwrap();
        let b = model.forward_eval(&batch).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn batch_stat_prediction_single_layer_composes_primitives() {
        let data = small_dataset(11, 3);
        let batch = load_batch(&data, &[0, 1, 2]).unwrap();
        let model = Model::init(Architecture::single_bn(3, 4), 6).unwrap();
        let got = predict_with_batch_stats(&model, &batch).unwrap();
        let bn = model.bn_layer(1).unwrap();
        let mean = crate::tensor::batch_mean(&batch);
        let var = crate::tensor::batch_var(&batch, &mean).unwrap();
        let normed = bn_normalize(&batch, &mean, &var, bn).unwrap();
        let crate::model::Layer::Linear(lin) = &model.layers()[1] else { panic!("layout") };
        let want = crate::tensor::softmax_channels(&crate::tensor::linear_forward(lin, &normed).unwrap());
        assert_eq!(got, want);
    }
}
