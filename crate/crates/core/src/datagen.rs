//! Seeded synthetic segmentation domains.
//!
//! An image is a base class overpainted with random axis-aligned rectangles
//! of other classes; each pixel's color is drawn from its class's Gaussian
//! and clamped to `[0, 1]`. A target domain is the same generator seen
//! through a [`DomainShift`] (per-channel affine map, channel mixing and
//! additive noise), optionally with different class priors.
//!
//! Generation is a pure function of `(spec, seed, index)`: the layout and
//! colors come from ChaCha stream `index` of `seed`, and shift noise from an
//! independent stream, so a shifted and an unshifted dataset with the same
//! seed have pixel-identical label maps.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::labels::LabelMap;
use crate::tensor::{FeatureBatch, Shape};

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    #[serde(default = "ones3")]
    pub scale: [f64; 3],
    #[serde(default)]
    pub offset: [f64; 3],
    #[serde(default = "identity3")]
    pub mixing: [[f64; 3]; 3],
    #[serde(default)]
    pub noise: f64,
}

fn ones3() -> [f64; 3] {
    [1.0; 3]
}

fn identity3() -> [[f64; 3]; 3] {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

impl Default for DomainShift {
    fn default() -> Self {
        Self::identity()
    }
}

impl DomainShift {
    pub fn identity() -> Self {
        Self { scale: ones3(), offset: [0.0; 3], mixing: identity3(), noise: 0.0 }
    }

    /// Per-channel `a ⊙ x + b` with no mixing or noise.
    pub fn affine(scale: [f64; 3], offset: [f64; 3]) -> Self {
        Self { scale, offset, ..Self::identity() }
    }

    /// The affine inverse `(1/a, −b/a)`; mixing and noise are ignored.
    pub fn inverse_affine(&self) -> Self {
        let mut scale = [0.0; 3];
        let mut offset = [0.0; 3];
        for c in 0..3 {
            scale[c] = 1.0 / self.scale[c];
            offset[c] = -self.offset[c] / self.scale[c];
        }
        Self::affine(scale, offset)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale.iter().any(|&a| !a.is_finite() || a <= 0.0) {
            return Err(invalid(format!("shift scale must be positive and finite: {:?}", self.scale)));
        }
        let finite = self.offset.iter().chain(self.mixing.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(invalid("shift offset and mixing must be finite"));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(invalid(format!("shift noise must be >= 0, got {}", self.noise)));
        }
        Ok(())
    }
}

/// `x' = clamp(M·(a ⊙ x + b) + n, 0, 1)` with `n ~ N(0, σ_n²)` drawn from
/// a generator seeded with `seed`.
pub fn apply_shift(image: &FeatureBatch, shift: &DomainShift, seed: u64) -> Result<FeatureBatch> {
    if image.channels() != CHANNELS {
        return Err(invalid(format!("domain shift needs {CHANNELS} channels, got {}", image.channels())));
    }
    shift.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(image.data().len());
    for px in image.pixels() {
        let mut affine = [0.0f64; 3];
        for c in 0..3 {
            affine[c] = shift.scale[c] * f64::from(px[c]) + shift.offset[c];
        }
        for row in &shift.mixing {
            let mut v = row[0] * affine[0] + row[1] * affine[1] + row[2] * affine[2];
            if shift.noise > 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                v += shift.noise * z;
            }
            out.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    FeatureBatch::new(image.shape(), out)
}

/// Same as [`apply_shift`] without the final clamp, for algebraic checks.
pub fn apply_shift_unclamped(image: &FeatureBatch, shift: &DomainShift) -> Result<FeatureBatch> {
    if image.channels() != CHANNELS {
        return Err(invalid("domain shift needs 3 channels"));
    }
    let mut out = Vec::with_capacity(image.data().len());
    for px in image.pixels() {
        let affine: Vec<f64> = (0..3).map(|c| shift.scale[c] * f64::from(px[c]) + shift.offset[c]).collect();
        for row in &shift.mixing {
            out.push((row[0] * affine[0] + row[1] * affine[1] + row[2] * affine[2]) as f32);
        }
    }
    FeatureBatch::new(image.shape(), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameOrder {
    /// Index order is time order (a video-like stream).
    #[default]
    Temporal,
    /// Frames carry no temporal order.
    Shuffled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub seed: u64,
    pub size: usize,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    /// Mean color `c_s` of each class; the class count is its length.
    pub class_colors: Vec<[f64; 3]>,
    /// Standard deviation of the isotropic per-pixel color noise.
    pub color_noise: f64,
    /// Relative class frequencies for base and rectangle classes.
    #[serde(default)]
    pub class_prior: Option<Vec<f64>>,
    #[serde(default = "default_rects_min")]
    pub rects_min: usize,
    #[serde(default = "default_rects_max")]
    pub rects_max: usize,
    /// Rectangle side length as a fraction of the image side.
    #[serde(default = "default_rect_min_frac")]
    pub rect_min_frac: f64,
    #[serde(default = "default_rect_max_frac")]
    pub rect_max_frac: f64,
    #[serde(default)]
    pub shift: Option<DomainShift>,
    #[serde(default = "default_true")]
    pub labeled: bool,
    #[serde(default)]
    pub ordering: FrameOrder,
}

fn default_side() -> usize {
    32
}
fn default_rects_min() -> usize {
    3
}
fn default_rects_max() -> usize {
    7
}
fn default_rect_min_frac() -> f64 {
    0.2
}
fn default_rect_max_frac() -> f64 {
    0.6
}
fn default_true() -> bool {
    true
}

/// Default class palette: four well-separated colors away from the clamp
/// boundaries.
pub fn default_palette() -> Vec<[f64; 3]> {
    vec![[0.30, 0.30, 0.35], [0.25, 0.55, 0.25], [0.45, 0.60, 0.80], [0.70, 0.45, 0.35]]
}

impl DatasetSpec {
    pub fn default_source(seed: u64, size: usize) -> Self {
        Self {
            seed,
            size,
            height: default_side(),
            width: default_side(),
            class_colors: default_palette(),
            color_noise: 0.08,
            class_prior: None,
            rects_min: default_rects_min(),
            rects_max: default_rects_max(),
            rect_min_frac: default_rect_min_frac(),
            rect_max_frac: default_rect_max_frac(),
            shift: None,
            labeled: true,
            ordering: FrameOrder::Temporal,
        }
    }

    /// The default target domain: a color cast with channel cross-talk,
    /// sensor noise and a different class mix than the source.
    pub fn default_target(seed: u64, size: usize) -> Self {
        Self {
            shift: Some(default_target_shift()),
            class_prior: Some(vec![0.4, 0.1, 0.2, 0.3]),
            ..Self::default_source(seed, size)
        }
    }

    pub fn with_shift(mut self, shift: DomainShift) -> Self {
        self.shift = Some(shift);
        self
    }

    pub fn classes(&self) -> usize {
        self.class_colors.len()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("dataset spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.height == 0 || self.width == 0 {
            return Err(invalid("dataset size, height and width must be >= 1"));
        }
        if self.height.saturating_mul(self.width) > 1 << 20 {
            return Err(invalid("image larger than 2^20 pixels"));
        }
        if self.class_colors.is_empty() || self.class_colors.len() > 256 {
            return Err(invalid("need between 1 and 256 classes"));
        }
        if self.class_colors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("class colors must be finite"));
        }
        if !self.color_noise.is_finite() || self.color_noise < 0.0 {
            return Err(invalid("color_noise must be >= 0"));
        }
        if let Some(prior) = &self.class_prior {
            if prior.len() != self.classes() {
                return Err(invalid(format!("class_prior has {} entries for {} classes", prior.len(), self.classes())));
            }
            if prior.iter().any(|&p| !p.is_finite() || p < 0.0) || prior.iter().sum::<f64>() <= 0.0 {
                return Err(invalid("class_prior must be non-negative with a positive sum"));
            }
        }
        if self.rects_min > self.rects_max || self.rects_max > 1024 {
            return Err(invalid("need rects_min <= rects_max <= 1024"));
        }
        let frac_ok = |f: f64| f > 0.0 && f <= 1.0;
        if !frac_ok(self.rect_min_frac) || !frac_ok(self.rect_max_frac) || self.rect_min_frac > self.rect_max_frac {
            return Err(invalid("rectangle fractions must satisfy 0 < min <= max <= 1"));
        }
        if let Some(shift) = &self.shift {
            shift.validate()?;
        }
        Ok(())
    }
}

/// Anything adaptation, training and evaluation can draw images from.
pub trait ImageSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Image `index` as a batch of one.
    fn image(&self, index: usize) -> Result<FeatureBatch>;

    /// Ground truth for image `index`, if this source is labeled.
    fn labels(&self, index: usize) -> Result<Option<LabelMap>>;

    /// Whether index order is a temporal frame order.
    fn is_temporally_ordered(&self) -> bool {
        true
    }
}

/// Stacks the listed images into one batch.
pub fn load_batch(source: &dyn ImageSource, indices: &[usize]) -> Result<FeatureBatch> {
    let parts = indices.iter().map(|&i| source.image(i)).collect::<Result<Vec<_>>>()?;
    FeatureBatch::concat(&parts)
}

/// Stacks the listed label maps; fails on an unlabeled source.
pub fn load_labels(source: &dyn ImageSource, indices: &[usize]) -> Result<LabelMap> {
    let parts = indices
        .iter()
        .map(|&i| source.labels(i)?.ok_or_else(|| invalid(format!("image {i} has no labels"))))
        .collect::<Result<Vec<_>>>()?;
    LabelMap::concat(&parts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    spec: DatasetSpec,
    cumulative_prior: Vec<f64>,
}

impl DomainDataset {
    pub fn new(spec: DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let prior = spec.class_prior.clone().unwrap_or_else(|| vec![1.0; spec.classes()]);
        let total: f64 = prior.iter().sum();
        let mut acc = 0.0;
        let cumulative_prior = prior
            .iter()
            .map(|p| {
                acc += p / total;
                acc
            })
            .collect();
        Ok(Self { spec, cumulative_prior })
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn classes(&self) -> usize {
        self.spec.classes()
    }

    fn draw_class(&self, rng: &mut ChaCha8Rng) -> u32 {
        let u: f64 = rng.gen();
        let last = self.cumulative_prior.len() - 1;
        self.cumulative_prior.iter().position(|&c| u < c).unwrap_or(last) as u32
    }

    /// Image `index` (batch of one) and its label map.
    pub fn generate(&self, index: usize) -> Result<(FeatureBatch, LabelMap)> {
        if index >= self.spec.size {
            return Err(Error::IndexOutOfRange { index, size: self.spec.size });
        }
        let (h, w) = (self.spec.height, self.spec.width);
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(index as u64);

        let mut labels = vec![self.draw_class(&mut rng); h * w];
        let rects = rng.gen_range(self.spec.rects_min..=self.spec.rects_max);
        for _ in 0..rects {
            let class = self.draw_class(&mut rng);
            let rh = side(&mut rng, h, self.spec.rect_min_frac, self.spec.rect_max_frac);
            let rw = side(&mut rng, w, self.spec.rect_min_frac, self.spec.rect_max_frac);
            let y0 = rng.gen_range(0..=h - rh);
            let x0 = rng.gen_range(0..=w - rw);
            for y in y0..y0 + rh {
                labels[y * w + x0..y * w + x0 + rw].fill(class);
            }
        }

        let noise = self.spec.color_noise;
        let mut data = Vec::with_capacity(h * w * CHANNELS);
        for &class in &labels {
            let mean = self.spec.class_colors[class as usize];
            for m in mean {
                let v = if noise > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (m + noise * z).clamp(0.0, 1.0)
                } else {
                    m
                };
                data.push(v as f32);
            }
        }
        let mut image = FeatureBatch::new(Shape::new(1, h, w, CHANNELS)?, data)?;
        if let Some(shift) = &self.spec.shift {
            image = apply_shift(&image, shift, shift_seed(self.spec.seed, index))?;
        }
        Ok((image, LabelMap::new(1, h, w, labels)?))
    }
}

fn side(rng: &mut ChaCha8Rng, full: usize, min_frac: f64, max_frac: f64) -> usize {
    let lo = ((full as f64 * min_frac).round() as usize).clamp(1, full);
    let hi = ((full as f64 * max_frac).round() as usize).clamp(lo, full);
    rng.gen_range(lo..=hi)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn shift_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(index as u64 ^ 0x5348_4946_5400_0000))
}

impl ImageSource for DomainDataset {
    fn len(&self) -> usize {
        self.spec.size
    }

    fn image(&self, index: usize) -> Result<FeatureBatch> {
        Ok(self.generate(index)?.0)
    }

    fn labels(&self, index: usize) -> Result<Option<LabelMap>> {
        if !self.spec.labeled {
            if index >= self.spec.size {
                return Err(Error::IndexOutOfRange { index, size: self.spec.size });
            }
            return Ok(None);
        }
        Ok(Some(self.generate(index)?.1))
    }

    fn is_temporally_ordered(&self) -> bool {
        self.spec.ordering == FrameOrder::Temporal
    }
}

/// Images held in memory, e.g. a captured frame sequence.
#[derive(Debug, Clone)]
pub struct InMemorySource {
    images: Vec<FeatureBatch>,
    labels: Option<Vec<LabelMap>>,
    temporal: bool,
}

impl InMemorySource {
    pub fn new(images: Vec<FeatureBatch>, labels: Option<Vec<LabelMap>>) -> Result<Self> {
        if images.iter().any(|i| i.shape().batch != 1) {
            return Err(invalid("in-memory sources hold single images"));
        }
        if let Some(l) = &labels {
            if l.len() != images.len() {
                return Err(invalid("label count differs from image count"));
            }
        }
        Ok(Self { images, labels, temporal: true })
    }

    /// Splits a batch into its samples.
    pub fn from_batch(batch: &FeatureBatch) -> Result<Self> {
        let images = (0..batch.shape().batch).map(|i| batch.sample(i)).collect::<Result<Vec<_>>>()?;
        Self::new(images, None)
    }

    pub fn shuffled(mut self) -> Self {
        self.temporal = false;
        self
    }
}

impl ImageSource for InMemorySource {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn image(&self, index: usize) -> Result<FeatureBatch> {
        self.images.get(index).cloned().ok_or(Error::IndexOutOfRange { index, size: self.images.len() })
    }

    fn labels(&self, index: usize) -> Result<Option<LabelMap>> {
        if index >= self.images.len() {
            return Err(Error::IndexOutOfRange { index, size: self.images.len() });
        }
        Ok(self.labels.as_ref().map(|l| l[index].clone()))
    }

    fn is_temporally_ordered(&self) -> bool {
        self.temporal
    }
}

/// Binary PPM (P6) of sample `index` of an RGB batch.
pub fn image_to_ppm(image: &FeatureBatch, index: usize) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.channels != CHANNELS {
        return Err(invalid("PPM export needs 3 channels"));
    }
    let one = image.sample(index)?;
    let mut out = format!("P6\n{} {}\n255\n", s.width, s.height).into_bytes();
    out.extend(one.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Label map rendered with the class palette.
pub fn labels_to_ppm(labels: &LabelMap, index: usize, palette: &[[f64; 3]]) -> Result<Vec<u8>> {
    let (b, h, w) = labels.dims();
    if index >= b {
        return Err(invalid("label sample out of range"));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for &id in &labels.data()[index * h * w..(index + 1) * h * w] {
        let color = palette.get(id as usize).copied().unwrap_or([1.0, 0.0, 1.0]);
        out.extend(color.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes)?;
    Ok(())
}

/// The default target shift: per-channel gain and offset, mild channel
/// cross-talk and sensor noise.
pub fn default_target_shift() -> DomainShift {
    DomainShift {
        scale: [0.55, 0.7, 0.6],
        offset: [0.3, 0.12, 0.05],
        mixing: [[0.9, 0.1, 0.0], [0.05, 0.9, 0.05], [0.0, 0.15, 0.85]],
        noise: 0.03,
    }
}
