//! Dense channels-last activations and the forward primitives every other
//! module builds on.
//!
//! Activations are stored as `f32` in `(batch, height, width, channel)`
//! order. Every per-channel statistic is accumulated in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Shape of a [`FeatureBatch`], all dimensions at least one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub fn new(batch: usize, height: usize, width: usize, channels: usize) -> Result<Self> {
        if batch == 0 || height == 0 || width == 0 || channels == 0 {
            return Err(invalid(format!("all dimensions must be >= 1, got ({batch}, {height}, {width}, {channels})")));
        }
        Ok(Self { batch, height, width, channels })
    }

    /// Number of positions a per-channel statistic reduces over (B·H·W).
    pub fn pixels(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.pixels() * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_channels(self, channels: usize) -> Self {
        Self { channels, ..self }
    }
}

/// Rank-4 activation tensor, shape fixed at construction, entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    shape: Shape,
    data: Vec<f32>,
}

impl FeatureBatch {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        let shape = Shape::new(shape.batch, shape.height, shape.width, shape.channels)?;
        if data.len() != shape.len() {
            return Err(invalid(format!(
                "data length {} does not match shape {:?} ({} entries)",
                data.len(),
                shape,
                shape.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite entry {} at flat index {pos}", data[pos])));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Shape, value: f32) -> Result<Self> {
        Self::new(shape, vec![value; shape.len()])
    }

    /// Wraps data produced by an internal operation whose finiteness follows
    /// from finite inputs. Checked in debug builds.
    pub(crate) fn from_parts(shape: Shape, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), shape.len());
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite activation");
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Iterates over per-pixel channel slices.
    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.shape.channels)
    }

    pub fn get(&self, b: usize, y: usize, x: usize, c: usize) -> f32 {
        let s = self.shape;
        self.data[((b * s.height + y) * s.width + x) * s.channels + c]
    }

    /// Stacks batches of identical (H, W, C) along the batch axis.
    pub fn concat(parts: &[FeatureBatch]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| invalid("cannot concatenate zero batches"))?;
        let base = first.shape;
        let mut batch = 0;
        for p in parts {
            let s = p.shape;
            if (s.height, s.width, s.channels) != (base.height, base.width, base.channels) {
                return Err(invalid(format!("cannot concatenate {s:?} with {base:?}")));
            }
            batch += s.batch;
        }
        let mut data = Vec::with_capacity(batch * base.height * base.width * base.channels);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Self::from_parts(Shape { batch, ..base }, data))
    }

    /// The `index`-th sample as a batch of one.
    pub fn sample(&self, index: usize) -> Result<Self> {
        if index >= self.shape.batch {
            return Err(invalid(format!("sample {index} out of range for batch {}", self.shape.batch)));
        }
        let per = self.shape.len() / self.shape.batch;
        let data = self.data[index * per..(index + 1) * per].to_vec();
        Ok(Self::from_parts(Shape { batch: 1, ..self.shape }, data))
    }
}

/// Per-channel statistic or parameter vector in double precision.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ChannelVector(pub Vec<f64>);

impl ChannelVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Self(vec![value; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for ChannelVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl std::ops::Index<usize> for ChannelVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Per-channel mean over batch and spatial positions.
pub fn batch_mean(x: &FeatureBatch) -> ChannelVector {
    let c = x.channels();
    let mut sum = vec![0.0f64; c];
    for px in x.pixels() {
        for (s, &v) in sum.iter_mut().zip(px) {
            *s += f64::from(v);
        }
    }
    let n = x.shape.pixels() as f64;
    ChannelVector(sum.into_iter().map(|s| s / n).collect())
}

/// Biased (divide-by-N) per-channel variance around `mean`.
pub fn batch_var(x: &FeatureBatch, mean: &ChannelVector) -> Result<ChannelVector> {
    let c = x.channels();
    if mean.len() != c {
        return Err(invalid(format!("mean has length {}, batch has {c} channels", mean.len())));
    }
    let mut acc = vec![0.0f64; c];
    for px in x.pixels() {
        for ((a, &v), &m) in acc.iter_mut().zip(px).zip(&mean.0) {
            let d = f64::from(v) - m;
            *a += d * d;
        }
    }
    let n = x.shape.pixels() as f64;
    Ok(ChannelVector(acc.into_iter().map(|a| a / n).collect()))
}

/// Per-pixel affine map `y = W·x + b` (a 1×1 convolution).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    in_features: usize,
    out_features: usize,
    /// Row-major `out × in`.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LinearLayer {
    pub fn new(in_features: usize, out_features: usize, weight: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            return Err(invalid("linear layer dimensions must be >= 1"));
        }
        if weight.len() != in_features * out_features {
            return Err(invalid(format!("weight has {} entries, expected {out_features}x{in_features}", weight.len())));
        }
        if bias.len() != out_features {
            return Err(invalid(format!("bias has {} entries, expected {out_features}", bias.len())));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(invalid("linear parameters must be finite"));
        }
        Ok(Self { in_features, out_features, weight, bias })
    }

    pub fn identity(features: usize) -> Self {
        let mut weight = vec![0.0; features * features];
        for i in 0..features {
            weight[i * features + i] = 1.0;
        }
        Self { in_features: features, out_features: features, weight, bias: vec![0.0; features] }
    }

    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Self { in_features, out_features, weight: vec![0.0; in_features * out_features], bias: vec![0.0; out_features] }
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }
}

pub fn linear_forward(layer: &LinearLayer, x: &FeatureBatch) -> Result<FeatureBatch> {
    if x.channels() != layer.in_features {
        return Err(invalid(format!(
            "linear layer expects {} input channels, got {}",
            layer.in_features,
            x.channels()
        )));
    }
    let out_c = layer.out_features;
    let mut out = Vec::with_capacity(x.shape.pixels() * out_c);
    for px in x.pixels() {
        for (row, &b) in layer.weight.chunks_exact(layer.in_features).zip(&layer.bias) {
            let mut acc = f64::from(b);
            for (&w, &v) in row.iter().zip(px) {
                acc += f64::from(w) * f64::from(v);
            }
            out.push(acc as f32);
        }
    }
    Ok(FeatureBatch::from_parts(x.shape.with_channels(out_c), out))
}

pub fn relu(x: &FeatureBatch) -> FeatureBatch {
    FeatureBatch::from_parts(x.shape, x.data.iter().map(|&v| v.max(0.0)).collect())
}

/// Per-pixel softmax over the channel axis, max-subtracted.
pub fn softmax_channels(x: &FeatureBatch) -> FeatureBatch {
    let mut out = Vec::with_capacity(x.data.len());
    let mut exps = vec![0.0f64; x.channels()];
    for px in x.pixels() {
        let max = px.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut total = 0.0f64;
        for (e, &v) in exps.iter_mut().zip(px) {
            *e = (f64::from(v) - f64::from(max)).exp();
            total += *e;
        }
        out.extend(exps.iter().map(|&e| (e / total) as f32));
    }
    FeatureBatch::from_parts(x.shape, out)
}

/// Per-pixel argmax over channels; ties resolve to the lowest index.
pub fn argmax_channels(x: &FeatureBatch) -> Vec<u32> {
    x.pixels()
        .map(|px| {
            let mut best = 0;
            for (i, &v) in px.iter().enumerate() {
                if v > px[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, shape: Shape) -> FeatureBatch {
        let data = (0..shape.len()).map(|_| rng.gen_range(-2.0f32..3.0)).collect();
        FeatureBatch::new(shape, data).unwrap()
    }

    // Independent four-index loop oracles.
    fn oracle_mean_var(x: &FeatureBatch) -> (Vec<f64>, Vec<f64>) {
        let s = x.shape();
        let n = (s.batch * s.height * s.width) as f64;
        let mut mean = vec![0.0; s.channels];
        let mut var = vec![0.0; s.channels];
        for c in 0..s.channels {
            let mut acc = 0.0;
            for b in 0..s.batch {
                for i in 0..s.height {
                    for j in 0..s.width {
                        acc += x.get(b, i, j, c) as f64;
                    }
                }
            }
            mean[c] = acc / n;
            let mut sq = 0.0;
            for b in 0..s.batch {
                for i in 0..s.height {
                    for j in 0..s.width {
                        let d = x.get(b, i, j, c) as f64 - mean[c];
                        sq += d * d;
                    }
                }
            }
            var[c] = sq / n;
        }
        (mean, var)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(Shape::new(0, 1, 1, 1).is_err());
        assert!(FeatureBatch::new(Shape { batch: 0, height: 1, width: 1, channels: 1 }, vec![]).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        let s = Shape::new(1, 1, 2, 1).unwrap();
        assert!(FeatureBatch::new(s, vec![1.0, f32::NAN]).is_err());
        assert!(FeatureBatch::new(s, vec![f32::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn constant_tensor_stats() {
        let x = FeatureBatch::filled(Shape::new(2, 3, 3, 4).unwrap(), 3.0).unwrap();
        let m = batch_mean(&x);
        assert!(m.0.iter().all(|&v| v == 3.0));
        let v = batch_var(&x, &m).unwrap();
        assert!(v.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_point_stats() {
        let x = FeatureBatch::new(Shape::new(1, 1, 2, 1).unwrap(), vec![1.0, 3.0]).unwrap();
        let m = batch_mean(&x);
        assert_eq!(m.0, vec![2.0]);
        assert_eq!(batch_var(&x, &m).unwrap().0, vec![1.0]);
    }

    #[test]
    fn stats_match_loop_oracle_on_seeded_tensors() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for round in 0..120 {
            let shape = if round == 0 {
                Shape::new(2, 4, 4, 3).unwrap()
            } else {
                Shape::new(rng.gen_range(1..4), rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..5)).unwrap()
            };
            let x = random_batch(&mut rng, shape);
            let (om, ov) = oracle_mean_var(&x);
            let m = batch_mean(&x);
            let v = batch_var(&x, &m).unwrap();
            for c in 0..shape.channels {
                assert!(rel_err(m[c], om[c]) <= 1e-6 || (m[c] - om[c]).abs() < 1e-12);
                assert!(rel_err(v[c], ov[c]) <= 1e-6);
                assert!(v[c] >= 0.0);
            }
        }
    }

    #[test]
    fn var_rejects_mean_length_mismatch() {
        let x = FeatureBatch::filled(Shape::new(1, 2, 2, 3).unwrap(), 1.0).unwrap();
        assert!(batch_var(&x, &ChannelVector::zeros(2)).is_err());
    }

    #[test]
    fn linear_identity_and_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_batch(&mut rng, Shape::new(2, 3, 3, 4).unwrap());
        let y = linear_forward(&LinearLayer::identity(4), &x).unwrap();
        assert_eq!(y, x);

        let l = LinearLayer::new(1, 1, vec![2.0], vec![1.0]).unwrap();
        let x = FeatureBatch::new(Shape::new(1, 1, 1, 1).unwrap(), vec![3.0]).unwrap();
        assert_eq!(linear_forward(&l, &x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn linear_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_batch(&mut rng, Shape::new(2, 3, 4, 3).unwrap());
        let w: Vec<f32> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let l = LinearLayer::new(3, 5, w.clone(), b.clone()).unwrap();
        let y = linear_forward(&l, &x).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 3, 4, 5).unwrap());
        for bi in 0..2 {
            for i in 0..3 {
                for j in 0..4 {
                    for o in 0..5 {
                        let mut acc = b[o] as f64;
                        for k in 0..3 {
                            acc += w[o * 3 + k] as f64 * x.get(bi, i, j, k) as f64;
                        }
                        assert!(rel_err(y.get(bi, i, j, o) as f64, acc) <= 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn linear_channel_mismatch() {
        let x = FeatureBatch::filled(Shape::new(1, 1, 1, 2).unwrap(), 1.0).unwrap();
        assert!(linear_forward(&LinearLayer::identity(3), &x).is_err());
    }

    #[test]
    fn relu_cases() {
        let x = FeatureBatch::new(Shape::new(1, 1, 3, 1).unwrap(), vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let neg = FeatureBatch::filled(Shape::new(1, 2, 2, 2).unwrap(), -0.5).unwrap();
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = random_batch(&mut rng, Shape::new(2, 2, 2, 3).unwrap());
        assert_eq!(relu(&relu(&r)), relu(&r));
    }

    #[test]
    fn softmax_closed_forms() {
        let x = FeatureBatch::filled(Shape::new(1, 1, 1, 4).unwrap(), 0.7).unwrap();
        for &p in softmax_channels(&x).data() {
            assert!((p - 0.25).abs() < 1e-7);
        }
        let x = FeatureBatch::new(Shape::new(1, 1, 1, 2).unwrap(), vec![0.0, 3.0f32.ln()]).unwrap();
        let p = softmax_channels(&x);
        assert!((p.data()[0] - 0.25).abs() < 1e-6);
        assert!((p.data()[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn softmax_large_logits_stay_finite() {
        let x = FeatureBatch::new(Shape::new(1, 1, 1, 3).unwrap(), vec![1e30, -1e30, 0.0]).unwrap();
        let p = softmax_channels(&x);
        assert_eq!(p.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_and_sample_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_batch(&mut rng, Shape::new(1, 2, 2, 3).unwrap());
        let b = random_batch(&mut rng, Shape::new(2, 2, 2, 3).unwrap());
        let ab = FeatureBatch::concat(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(ab.shape().batch, 3);
        assert_eq!(ab.sample(0).unwrap(), a);
        assert_eq!(ab.sample(2).unwrap(), b.sample(1).unwrap());
        let c = random_batch(&mut rng, Shape::new(1, 3, 2, 3).unwrap());
        assert!(FeatureBatch::concat(&[a, c]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn batch_strategy() -> impl Strategy<Value = FeatureBatch> {
            (1usize..3, 1usize..4, 1usize..4, 1usize..5).prop_flat_map(|(b, h, w, c)| {
                let shape = Shape::new(b, h, w, c).unwrap();
                proptest::collection::vec(-50.0f32..50.0, shape.len())
                    .prop_map(move |d| FeatureBatch::new(shape, d).unwrap())
            })
        }

        proptest! {
            #[test]
            fn variance_is_non_negative(x in batch_strategy()) {
                let m = batch_mean(&x);
                prop_assert!(batch_var(&x, &m).unwrap().0.iter().all(|&v| v >= 0.0));
            }

            #[test]
            fn softmax_rows_sum_to_one_and_shift_invariant(x in batch_strategy(), shift in -20.0f32..20.0) {
                let p = softmax_channels(&x);
                for px in p.pixels() {
                    let s: f64 = px.iter().map(|&v| v as f64).sum();
                    prop_assert!((s - 1.0).abs() <= 1e-6);
                }
                let shifted = FeatureBatch::new(x.shape(), x.data().iter().map(|v| v + shift).collect()).unwrap();
                let q = softmax_channels(&shifted);
                prop_assert_eq!(argmax_channels(&p), argmax_channels(&q));
                for (a, b) in p.data().iter().zip(q.data()) {
                    prop_assert!((a - b).abs() <= 1e-5);
                }
            }
        }
    }
}
