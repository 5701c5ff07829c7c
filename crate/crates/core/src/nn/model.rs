use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::conv::{ConvGrad, ConvLayer};
use super::{cast_vec, Scalar};
use crate::error::{Error, Result};
use crate::grid::{Grid2D, LabelMap};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub kernel_size: usize,
    pub channels: usize,
    pub dilation: usize,
    /// Conv layers in the block, each followed by ReLU.
    #[serde(default = "one")]
    pub layers: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    #[serde(default = "one")]
    pub in_channels: usize,
    pub blocks: Vec<BlockConfig>,
    /// Width of the hidden 1x1 layer in the classifier head; 0 makes the head linear.
    #[serde(default)]
    pub head_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::with_widths(16, 2, 16)
    }
}

impl ArchConfig {
    pub const DEFAULT_DILATIONS: [usize; 5] = [1, 2, 4, 8, 16];

    /// Five 3x3 blocks with dilations 1, 2, 4, 8, 16.
    pub fn with_widths(channels: usize, layers: usize, head_hidden: usize) -> Self {
        Self {
            in_channels: 1,
            blocks: Self::DEFAULT_DILATIONS
                .iter()
                .map(|&dilation| BlockConfig { kernel_size: 3, channels, dilation, layers })
                .collect(),
            head_hidden,
        }
    }

    /// Small configuration used by the synthetic benchmark.
    pub fn toy() -> Self {
        Self::with_widths(8, 1, 8)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.blocks.is_empty() {
            return Err(Error::InvalidConfig("architecture needs input channels and at least one block".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.kernel_size % 2 == 0 || b.channels == 0 || b.dilation == 0 || b.layers == 0 {
                return Err(Error::InvalidConfig(format!(
                    "block {i}: kernel must be odd and channels, dilation, layers positive"
                )));
            }
        }
        Ok(())
    }

    /// Channels of the concatenation layer feeding the head.
    pub fn feature_channels(&self) -> usize {
        self.blocks.iter().map(|b| b.channels).sum()
    }

    pub fn receptive_field(&self) -> usize {
        1 + self.blocks.iter().map(|b| b.layers * (b.kernel_size - 1) * b.dilation).sum::<usize>()
    }

    pub fn config_hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("arch config serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

/// Intensity normalization learned from the training images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f32,
    pub std: f32,
}

impl Default for NormStats {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

impl NormStats {
    pub fn from_values<'a>(values: impl IntoIterator<Item = &'a f32>) -> Self {
        let (mut n, mut s, mut s2) = (0usize, 0f64, 0f64);
        for &v in values {
            n += 1;
            s += v as f64;
            s2 += (v as f64) * (v as f64);
        }
        if n == 0 {
            return Self::default();
        }
        let mean = s / n as f64;
        let var = (s2 / n as f64 - mean * mean).max(0.0);
        Self { mean: mean as f32, std: var.sqrt().max(1e-6) as f32 }
    }

    pub fn normalize(&self, grid: &Grid2D) -> Grid2D {
        let std = self.std.max(1e-6);
        Grid2D::from_raw(
            grid.width(),
            grid.height(),
            grid.channels(),
            grid.data().iter().map(|&v| (v - self.mean) / std).collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub layers: Vec<ConvLayer<T>>,
}

/// The fine-tunable classifier: optional 1x1 hidden layer with ReLU, then a
/// 1x1 layer to two logits (background, foreground).
#[derive(Clone, Debug, PartialEq)]
pub struct Head<T> {
    pub hidden: Option<ConvLayer<T>>,
    pub classifier: ConvLayer<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrad<T> {
    pub hidden: Option<ConvGrad<T>>,
    pub classifier: ConvGrad<T>,
}

#[inline]
fn sigmoid<T: Scalar>(d: T) -> T {
    if d >= T::zero() {
        T::one() / (T::one() + (-d).exp())
    } else {
        let e = d.exp();
        e / (T::one() + e)
    }
}

fn relu_in_place<T: Scalar>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

/// Zeroes `grad` where the ReLU output was not positive.
fn relu_mask<T: Scalar>(grad: &mut [T], output: &[T]) {
    for (g, &o) in grad.iter_mut().zip(output) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Mean-over-pixels weighted cross-entropy of two-channel logits, and its
/// gradient with respect to the logits.
fn weighted_ce<T: Scalar>(logits: &[T], labels: &[u8], weights: &[T], want_grad: bool) -> (T, Option<Vec<T>>) {
    let n = labels.len();
    let inv_n = T::one() / T::from_f64(n as f64);
    let eps = T::from_f64(PROB_CLAMP);
    let (z0, z1) = logits.split_at(n);
    let mut loss = T::zero();
    let mut grad = want_grad.then(|| vec![T::zero(); 2 * n]);
    for i in 0..n {
        let w = weights[i];
        if w == T::zero() {
            continue;
        }
        let p = sigmoid(z1[i] - z0[i]);
        let pc = p.max(eps).min(T::one() - eps);
        let y = labels[i] == 1;
        loss -= w * if y { pc.ln() } else { (T::one() - pc).ln() };
        if let Some(g) = grad.as_mut() {
            if p > eps && p < T::one() - eps {
                let target = if y { T::one() } else { T::zero() };
                let gd = w * (p - target) * inv_n;
                g[i] = -gd;
                g[n + i] = gd;
            }
        }
    }
    (loss * inv_n, grad)
}

impl<T: Scalar> Head<T> {
    /// He-initialized hidden layer and a zero classifier, so a fresh head predicts 0.5.
    pub fn init(in_channels: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let hidden_layer = (hidden > 0).then(|| ConvLayer::he_init(in_channels, hidden, 1, 1, rng));
        let cls_in = if hidden > 0 { hidden } else { in_channels };
        Self { hidden: hidden_layer, classifier: ConvLayer::zeros(cls_in, 2, 1, 1) }
    }

    pub fn in_channels(&self) -> usize {
        self.hidden.as_ref().map_or(self.classifier.in_channels, |h| h.in_channels)
    }

    pub fn cast<U: Scalar>(&self) -> Head<U> {
        Head { hidden: self.hidden.as_ref().map(ConvLayer::cast), classifier: self.classifier.cast() }
    }

    /// Multiplies the classifier's weights and bias, scaling every logit by `factor`.
    pub fn scale_logits(&mut self, factor: T) {
        for v in self.classifier.weights.iter_mut().chain(self.classifier.bias.iter_mut()) {
            *v *= factor;
        }
    }

    pub fn param_count(&self) -> usize {
        self.hidden.as_ref().map_or(0, ConvLayer::param_count) + self.classifier.param_count()
    }

    /// Parameter tensors in a fixed order, each tagged `true` if it is a bias.
    pub fn params_mut(&mut self) -> Vec<(bool, &mut Vec<T>)> {
        let mut out = Vec::new();
        if let Some(h) = self.hidden.as_mut() {
            out.push((false, &mut h.weights));
            out.push((true, &mut h.bias));
        }
        out.push((false, &mut self.classifier.weights));
        out.push((true, &mut self.classifier.bias));
        out
    }

    /// Hidden activations (post-ReLU) and the two logit planes.
    fn logits(&self, features: &[T], pixels: usize) -> (Option<Vec<T>>, Vec<T>) {
        match &self.hidden {
            Some(h) => {
                let mut act = h.forward(features, 1, pixels);
                relu_in_place(&mut act);
                let logits = self.classifier.forward(&act, 1, pixels);
                (Some(act), logits)
            }
            None => (None, self.classifier.forward(features, 1, pixels)),
        }
    }

    /// Foreground probability per pixel.
    pub fn probabilities(&self, features: &[T], pixels: usize) -> Vec<T> {
        let (_, z) = self.logits(features, pixels);
        (0..pixels).map(|i| sigmoid(z[pixels + i] - z[i])).collect()
    }

    pub fn weighted_loss(&self, features: &[T], labels: &[u8], weights: &[T]) -> T {
        let (_, z) = self.logits(features, labels.len());
        weighted_ce(&z, labels, weights, false).0
    }

    /// Weighted cross-entropy, its gradient over head parameters, and optionally
    /// the gradient with respect to the input features.
    pub fn loss_and_grad(
        &self,
        features: &[T],
        labels: &[u8],
        weights: &[T],
        need_feature_grad: bool,
    ) -> (T, HeadGrad<T>, Option<Vec<T>>) {
        let pixels = labels.len();
        let (hidden_act, z) = self.logits(features, pixels);
        let (loss, gz) = weighted_ce(&z, labels, weights, true);
        let gz = gz.expect("gradient requested");
        match (&self.hidden, hidden_act) {
            (Some(h), Some(act)) => {
                let (gcls, gact) = self.classifier.backward(&act, &gz, 1, pixels, true);
                let mut gact = gact.expect("input grad requested");
                relu_mask(&mut gact, &act);
                let (ghid, gfeat) = h.backward(features, &gact, 1, pixels, need_feature_grad);
                (loss, HeadGrad { hidden: Some(ghid), classifier: gcls }, gfeat)
            }
            _ => {
                let (gcls, gfeat) = self.classifier.backward(features, &gz, 1, pixels, need_feature_grad);
                (loss, HeadGrad { hidden: None, classifier: gcls }, gfeat)
            }
        }
    }
}

impl<T: Scalar> HeadGrad<T> {
    pub fn tensors(&self) -> Vec<&Vec<T>> {
        let mut out = Vec::new();
        if let Some(h) = &self.hidden {
            out.push(&h.weights);
            out.push(&h.bias);
        }
        out.push(&self.classifier.weights);
        out.push(&self.classifier.bias);
        out
    }

    pub fn flatten(&self) -> Vec<T> {
        self.tensors().into_iter().flatten().copied().collect()
    }
}

/// Concatenated features of one prepared crop, tied to the architecture that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCache {
    features: Grid2D,
    config_hash: u64,
}

impl FeatureCache {
    pub fn new(features: Grid2D, config_hash: u64) -> Self {
        Self { features, config_hash }
    }

    pub fn features(&self) -> &Grid2D {
        &self.features
    }

    pub fn config_hash(&self) -> u64 {
        self.config_hash
    }

    pub fn width(&self) -> usize {
        self.features.width()
    }

    pub fn height(&self) -> usize {
        self.features.height()
    }
}

/// Per-layer activations of one training forward pass.
pub(crate) struct Activations<T> {
    /// Post-ReLU output of every layer, per block.
    pub layer_outputs: Vec<Vec<Vec<T>>>,
    pub features: Vec<T>,
}

pub(crate) struct ModelGrad<T> {
    pub blocks: Vec<Vec<ConvGrad<T>>>,
    pub head: HeadGrad<T>,
}

impl<T: Scalar> ModelGrad<T> {
    pub fn tensors(&self) -> Vec<&Vec<T>> {
        let mut out = Vec::new();
        for block in &self.blocks {
            for g in block {
                out.push(&g.weights);
                out.push(&g.bias);
            }
        }
        out.extend(self.head.tensors());
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmenterModel<T = f32> {
    arch: ArchConfig,
    blocks: Vec<Block<T>>,
    head: Head<T>,
    norm: NormStats,
    loss_curve: Vec<f32>,
    config_hash: u64,
}

impl<T: Scalar> SegmenterModel<T> {
    /// Freshly initialized model: He-normal convs, zero classifier.
    pub fn init(arch: &ArchConfig, norm: NormStats, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_ch = arch.in_channels;
        let mut blocks = Vec::with_capacity(arch.blocks.len());
        for b in &arch.blocks {
            let mut layers = Vec::with_capacity(b.layers);
            for _ in 0..b.layers {
                layers.push(ConvLayer::he_init(in_ch, b.channels, b.kernel_size, b.dilation, &mut rng));
                in_ch = b.channels;
            }
            blocks.push(Block { layers });
        }
        let head = Head::init(arch.feature_channels(), arch.head_hidden, &mut rng);
        Ok(Self { arch: arch.clone(), blocks, head, norm, loss_curve: Vec::new(), config_hash: arch.config_hash() })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn blocks(&self) -> &[Block<T>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block<T>] {
        &mut self.blocks
    }

    pub fn head(&self) -> &Head<T> {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Head<T> {
        &mut self.head
    }

    pub fn norm(&self) -> NormStats {
        self.norm
    }

    pub fn set_norm(&mut self, norm: NormStats) {
        self.norm = norm;
    }

    pub fn loss_curve(&self) -> &[f32] {
        &self.loss_curve
    }

    pub(crate) fn set_loss_curve(&mut self, curve: Vec<f32>) {
        self.loss_curve = curve;
    }

    pub fn config_hash(&self) -> u64 {
        self.config_hash
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().flat_map(|b| &b.layers).map(ConvLayer::param_count).sum::<usize>()
            + self.head.param_count()
    }

    pub fn cast<U: Scalar>(&self) -> SegmenterModel<U> {
        SegmenterModel {
            arch: self.arch.clone(),
            blocks: self.blocks.iter().map(|b| Block { layers: b.layers.iter().map(ConvLayer::cast).collect() }).collect(),
            head: self.head.cast(),
            norm: self.norm,
            loss_curve: self.loss_curve.clone(),
            config_hash: self.config_hash,
        }
    }

    /// All parameter tensors (extractor then head), tagged `true` for biases.
    pub fn params_mut(&mut self) -> Vec<(bool, &mut Vec<T>)> {
        let mut out = Vec::new();
        for block in &mut self.blocks {
            for layer in &mut block.layers {
                out.push((false, &mut layer.weights));
                out.push((true, &mut layer.bias));
            }
        }
        out.extend(self.head.params_mut());
        out
    }

    pub(crate) fn forward_train(&self, input: &[T], height: usize, width: usize) -> Activations<T> {
        let plane = height * width;
        let mut layer_outputs = Vec::with_capacity(self.blocks.len());
        let mut features = Vec::with_capacity(self.arch.feature_channels() * plane);
        let mut current: Option<&Vec<T>> = None;
        for block in &self.blocks {
            let mut outs: Vec<Vec<T>> = Vec::with_capacity(block.layers.len());
            for layer in &block.layers {
                let src = outs.last().or(current).map_or(input, |v| v.as_slice());
                let mut out = layer.forward(src, height, width);
                relu_in_place(&mut out);
                outs.push(out);
            }
            layer_outputs.push(outs);
            let last = layer_outputs.last().unwrap().last().unwrap();
            features.extend_from_slice(last);
            current = layer_outputs.last().unwrap().last();
        }
        Activations { layer_outputs, features }
    }

    /// Concatenated block outputs for a prepared `in_channels x height x width` input.
    pub fn extract_features(&self, input: &[T], height: usize, width: usize) -> Vec<T> {
        self.forward_train(input, height, width).features
    }

    /// Full-network weighted loss and gradient for one sample.
    pub(crate) fn loss_and_grad(
        &self,
        input: &[T],
        height: usize,
        width: usize,
        labels: &[u8],
        weights: &[T],
    ) -> (T, ModelGrad<T>) {
        let plane = height * width;
        let acts = self.forward_train(input, height, width);
        let (loss, head_grad, gfeat) = self.head.loss_and_grad(&acts.features, labels, weights, true);
        let gfeat = gfeat.expect("feature grad requested");

        let mut block_grads: Vec<Vec<ConvGrad<T>>> = vec![Vec::new(); self.blocks.len()];
        let mut offsets = Vec::with_capacity(self.blocks.len());
        let mut off = 0;
        for b in &self.arch.blocks {
            offsets.push(off);
            off += b.channels * plane;
        }
        let mut carry: Option<Vec<T>> = None;
        for (bi, block) in self.blocks.iter().enumerate().rev() {
            let channels = self.arch.blocks[bi].channels;
            let mut g = gfeat[offsets[bi]..offsets[bi] + channels * plane].to_vec();
            if let Some(c) = carry.take() {
                for (a, b) in g.iter_mut().zip(&c) {
                    *a += *b;
                }
            }
            let outs = &acts.layer_outputs[bi];
            let mut grads = Vec::with_capacity(block.layers.len());
            for (li, layer) in block.layers.iter().enumerate().rev() {
                relu_mask(&mut g, &outs[li]);
                let src: &[T] = if li > 0 {
                    &outs[li - 1]
                } else if bi > 0 {
                    acts.layer_outputs[bi - 1].last().unwrap()
                } else {
                    input
                };
                let first = bi == 0 && li == 0;
                let (lg, gin) = layer.backward(src, &g, height, width, !first);
                grads.push(lg);
                if let Some(gin) = gin {
                    g = gin;
                }
            }
            grads.reverse();
            block_grads[bi] = grads;
            if bi > 0 {
                carry = Some(g);
            }
        }
        (loss, ModelGrad { blocks: block_grads, head: head_grad })
    }
}

fn check_weights(labels: &LabelMap, weights: &Grid2D) -> Result<()> {
    if !weights.same_size(labels) || weights.channels() != 1 {
        return Err(Error::DimensionMismatch(format!(
            "weight map {}x{}x{} vs labels {}x{}",
            weights.width(),
            weights.height(),
            weights.channels(),
            labels.width(),
            labels.height()
        )));
    }
    if let Some((index, &value)) = weights.data().iter().enumerate().find(|(_, &w)| w < 0.0) {
        return Err(Error::NegativeWeight { index, value });
    }
    Ok(())
}

impl SegmenterModel<f32> {
    /// Applies the stored normalization to a resized crop.
    pub fn prepare(&self, crop: &Grid2D) -> Grid2D {
        self.norm.normalize(crop)
    }

    /// Runs the network on a prepared crop, returning the feature cache and the
    /// foreground probability map.
    pub fn forward(&self, crop: &Grid2D) -> Result<(FeatureCache, Grid2D)> {
        if crop.channels() != self.arch.in_channels {
            return Err(Error::ChannelMismatch { expected: self.arch.in_channels, got: crop.channels() });
        }
        let features = self.extract_features(crop.data(), crop.height(), crop.width());
        let cache = FeatureCache::new(
            Grid2D::from_raw(crop.width(), crop.height(), self.arch.feature_channels(), features),
            self.config_hash,
        );
        let prob = self.head_forward(&cache)?;
        Ok((cache, prob))
    }

    fn check_cache(&self, head: &Head<f32>, cache: &FeatureCache) -> Result<()> {
        if cache.config_hash != self.config_hash {
            return Err(Error::CacheMismatch { cache: cache.config_hash, model: self.config_hash });
        }
        if cache.features.channels() != head.in_channels() {
            return Err(Error::ChannelMismatch { expected: head.in_channels(), got: cache.features.channels() });
        }
        Ok(())
    }

    /// Probabilities from cached features using the model's own head.
    pub fn head_forward(&self, cache: &FeatureCache) -> Result<Grid2D> {
        self.head_forward_with(&self.head, cache)
    }

    /// Probabilities from cached features using a (possibly fine-tuned) copy of the head.
    pub fn head_forward_with(&self, head: &Head<f32>, cache: &FeatureCache) -> Result<Grid2D> {
        self.check_cache(head, cache)?;
        let f = &cache.features;
        let p = head.probabilities(f.data(), f.pixels());
        Grid2D::new(f.width(), f.height(), 1, p)
    }

    /// Weighted cross-entropy of `head` on the cached features.
    pub fn weighted_loss(&self, head: &Head<f32>, cache: &FeatureCache, labels: &LabelMap, weights: &Grid2D) -> Result<f32> {
        self.check_cache(head, cache)?;
        check_weights(labels, weights)?;
        Ok(head.weighted_loss(cache.features.data(), labels.labels(), weights.data()))
    }

    /// Weighted cross-entropy and its exact gradient with respect to the head's parameters only.
    pub fn backprop_head(
        &self,
        head: &Head<f32>,
        cache: &FeatureCache,
        labels: &LabelMap,
        weights: &Grid2D,
    ) -> Result<(f32, HeadGrad<f32>)> {
        self.check_cache(head, cache)?;
        check_weights(labels, weights)?;
        if !cache.features.same_size(labels) {
            return Err(Error::DimensionMismatch("labels do not match the cached features".into()));
        }
        let (loss, grad, _) = head.loss_and_grad(cache.features.data(), labels.labels(), weights.data(), false);
        Ok((loss, grad))
    }
}

/// `f64` copy of cached features for gradient checks.
pub fn features_f64(cache: &FeatureCache) -> Vec<f64> {
    cast_vec(cache.features.data())
}
