//! Batch-normalization layer state and its three forward modes.
//!
//! * `Train`: normalize with batch statistics, then fold them into the
//!   running statistics with a fixed momentum.
//! * `Eval`: normalize with the frozen running statistics.
//! * `Adapt`: fold batch statistics into the running statistics with a
//!   caller-supplied (scheduled) momentum, then normalize. The affine
//!   parameters are never touched.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::{batch_mean, batch_var, ChannelVector, FeatureBatch};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Which statistics normalize the activations during an adaptation step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptNormalization {
    /// The running statistics after this step's update.
    #[default]
    PostUpdateRunning,
    /// The current batch's own statistics (conventional train-mode behavior).
    BatchStats,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BnMode {
    Train { momentum: f64 },
    Eval,
    Adapt { momentum: f64, normalize_with: AdaptNormalization },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnLayer {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    running_mean: ChannelVector,
    running_var: ChannelVector,
    eps: f64,
}

pub(crate) fn check_momentum(momentum: f64) -> Result<()> {
    if (0.0..=1.0).contains(&momentum) {
        Ok(())
    } else {
        Err(invalid(format!("momentum {momentum} outside [0, 1]")))
    }
}

fn check_variance(var: &ChannelVector) -> Result<()> {
    match var.0.iter().position(|v| !v.is_finite() || *v < 0.0) {
        Some(c) => Err(invalid(format!("variance at channel {c} is {}", var[c]))),
        None => Ok(()),
    }
}

impl BnLayer {
    /// Fresh layer: γ = 1, β = 0, running mean 0, running variance 1.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: ChannelVector::zeros(channels),
            running_var: ChannelVector::filled(channels, 1.0),
            eps: DEFAULT_EPS,
        }
    }

    pub fn from_parts(
        gamma: Vec<f32>,
        beta: Vec<f32>,
        running_mean: ChannelVector,
        running_var: ChannelVector,
        eps: f64,
    ) -> Result<Self> {
        let c = gamma.len();
        if c == 0 {
            return Err(invalid("batch-norm layer needs at least one channel"));
        }
        if beta.len() != c || running_mean.len() != c || running_var.len() != c {
            return Err(invalid(format!(
                "inconsistent channel counts: gamma {c}, beta {}, mean {}, var {}",
                beta.len(),
                running_mean.len(),
                running_var.len()
            )));
        }
        if !eps.is_finite() || eps <= 0.0 {
            return Err(invalid(format!("eps must be positive and finite, got {eps}")));
        }
        if gamma.iter().chain(&beta).any(|v| !v.is_finite()) || running_mean.0.iter().any(|v| !v.is_finite()) {
            return Err(invalid("batch-norm parameters must be finite"));
        }
        check_variance(&running_var)?;
        Ok(Self { gamma, beta, running_mean, running_var, eps })
    }

    pub fn with_eps(mut self, eps: f64) -> Result<Self> {
        if !eps.is_finite() || eps <= 0.0 {
            return Err(invalid(format!("eps must be positive and finite, got {eps}")));
        }
        self.eps = eps;
        Ok(self)
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn running_mean(&self) -> &ChannelVector {
        &self.running_mean
    }

    pub fn running_var(&self) -> &ChannelVector {
        &self.running_var
    }

    /// Replaces the running statistics wholesale.
    pub fn set_stats(&mut self, mean: ChannelVector, var: ChannelVector) -> Result<()> {
        let c = self.channels();
        if mean.len() != c || var.len() != c {
            return Err(invalid(format!(
                "statistics lengths ({}, {}) do not match {c} channels",
                mean.len(),
                var.len()
            )));
        }
        if mean.0.iter().any(|v| !v.is_finite()) {
            return Err(invalid("running mean must be finite"));
        }
        check_variance(&var)?;
        self.running_mean = mean;
        self.running_var = var;
        Ok(())
    }

    /// Exponential moving-average update of the running statistics.
    pub fn update_running(&mut self, batch_mean: &ChannelVector, batch_var: &ChannelVector, momentum: f64) {
        ema_update(&mut self.running_mean.0, &batch_mean.0, momentum);
        ema_update(&mut self.running_var.0, &batch_var.0, momentum);
    }

    pub fn forward(&mut self, x: &FeatureBatch, mode: BnMode) -> Result<FeatureBatch> {
        self.check_channels(x)?;
        match mode {
            BnMode::Eval => bn_normalize(x, &self.running_mean, &self.running_var, self),
            BnMode::Train { momentum } => {
                check_momentum(momentum)?;
                let (mean, var) = batch_stats(x)?;
                let out = bn_normalize(x, &mean, &var, self)?;
                self.update_running(&mean, &var, momentum);
                Ok(out)
            }
            BnMode::Adapt { momentum, normalize_with } => {
                check_momentum(momentum)?;
                let (mean, var) = batch_stats(x)?;
                self.update_running(&mean, &var, momentum);
                match normalize_with {
                    AdaptNormalization::PostUpdateRunning => {
                        bn_normalize(x, &self.running_mean, &self.running_var, self)
                    }
                    AdaptNormalization::BatchStats => bn_normalize(x, &mean, &var, self),
                }
            }
        }
    }

    /// Normalizes with the batch's own statistics without touching state.
    pub fn forward_batch_stats(&self, x: &FeatureBatch) -> Result<FeatureBatch> {
        self.check_channels(x)?;
        let (mean, var) = batch_stats(x)?;
        bn_normalize(x, &mean, &var, self)
    }

    pub fn forward_eval(&self, x: &FeatureBatch) -> Result<FeatureBatch> {
        self.check_channels(x)?;
        bn_normalize(x, &self.running_mean, &self.running_var, self)
    }

    fn check_channels(&self, x: &FeatureBatch) -> Result<()> {
        if x.channels() != self.channels() {
            return Err(invalid(format!(
                "batch-norm layer has {} channels, input has {}",
                self.channels(),
                x.channels()
            )));
        }
        Ok(())
    }
}

fn ema_update(running: &mut [f64], batch: &[f64], momentum: f64) {
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = (1.0 - momentum) * *r + momentum * b;
    }
}

/// Batch mean and biased variance; needs at least two reduction positions.
pub fn batch_stats(x: &FeatureBatch) -> Result<(ChannelVector, ChannelVector)> {
    if x.shape().pixels() < 2 {
        return Err(invalid("batch statistics need B·H·W >= 2"));
    }
    let mean = batch_mean(x);
    let var = batch_var(x, &mean)?;
    Ok((mean, var))
}

/// `γ·(f − μ)·(σ² + ε)^(−1/2) + β` per channel.
pub fn bn_normalize(
    x: &FeatureBatch,
    mean: &ChannelVector,
    var: &ChannelVector,
    state: &BnLayer,
) -> Result<FeatureBatch> {
    let c = state.channels();
    if x.channels() != c || mean.len() != c || var.len() != c {
        return Err(invalid(format!(
            "normalize: channels {} / mean {} / var {} vs layer {c}",
            x.channels(),
            mean.len(),
            var.len()
        )));
    }
    if let Some(ch) = var.0.iter().position(|v| v.is_nan() || *v < 0.0) {
        return Err(Error::InternalInvariant(format!("negative variance {} at channel {ch}", var[ch])));
    }
    let scale: Vec<f64> = (0..c).map(|i| f64::from(state.gamma[i]) * (var[i] + state.eps).powf(-0.5)).collect();
    let mut out = Vec::with_capacity(x.data().len());
    for px in x.pixels() {
        for i in 0..c {
            let v = (f64::from(px[i]) - mean[i]) * scale[i] + f64::from(state.beta[i]);
            out.push(v as f32);
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::InternalInvariant("normalization produced a non-finite activation".into()));
    }
    Ok(FeatureBatch::from_parts(x.shape(), out))
}
