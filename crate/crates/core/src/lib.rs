//! Gradient-free adaptation of batch-normalization statistics to a new data
//! domain, with everything needed to exercise it end to end: a small
//! per-pixel segmentation model, supervised source pre-training, seeded
//! synthetic domains with controllable shifts, segmentation metrics and a
//! bit-exact checkpoint format.

pub mod adapt;
pub mod batchnorm;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod labels;
pub mod model;
pub mod modelio;
pub mod pretrain;
pub mod tensor;

pub use adapt::{
    adabn_recompute, momentum_at, online_clock_check, predict_with_batch_stats, sequential_adapt, ubna_adapt,
    AdaptationProtocol, AdaptationSchedule, AdaptationTrace, Method, SequentialSegment,
};
pub use batchnorm::{AdaptNormalization, BnLayer, BnMode};
pub use datagen::{DatasetSpec, DomainDataset, DomainShift, ImageSource};
pub use error::{Error, Result};
pub use eval::{miou, ClassSubset, ConfusionMatrix};
pub use labels::LabelMap;
pub use model::{Architecture, Model};
pub use modelio::{Checkpoint, CheckpointError, Provenance};
pub use pretrain::{pretrain, PretrainConfig};
pub use tensor::{ChannelVector, FeatureBatch, Shape};
