//! The segmentation network: a stack of (conv 3x3, batch norm, ReLU) blocks
//! followed by a 1x1 classification head.
//!
//! The backbone runs in `f32` through im2col + sgemm. The head and everything
//! downstream of the logits runs in `f64`, so losses and their gradients can
//! be checked against finite differences at tight tolerances.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Epsilon added to the variance inside batch normalization.
pub const BN_EPS: f32 = 1e-5;

/// Channel layout of the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub in_channels: usize,
    /// Output width of each backbone block.
    pub widths: Vec<usize>,
    pub num_classes: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![16, 32, 32],
            num_classes: 4,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config(format!(
                "backbone needs at least 2 batch-norm layers, got {}",
                self.widths.len()
            )));
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.widths.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        *self.widths.last().expect("validated architecture")
    }
}

/// 3x3 (or 1x1) stride-1 convolution with "same" zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `[out][in][ky][kx]`, i.e. a row-major `out x (in * k * k)` matrix.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    /// He-normal weights, zero bias.
    pub fn he_init<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let mut conv = Self::zeros(in_channels, out_channels, kernel);
        for w in conv.weight.iter_mut() {
            *w = normal.sample(rng) as f32;
        }
        conv
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// `out = W * im2col(input) + b`. `col` is scratch space, left holding the
    /// im2col matrix of `input`.
    pub(crate) fn forward_into(
        &self,
        input: &[f32],
        height: usize,
        width: usize,
        col: &mut Vec<f32>,
        out: &mut [f32],
    ) {
        let hw = height * width;
        debug_assert_eq!(input.len(), self.in_channels * hw);
        debug_assert_eq!(out.len(), self.out_channels * hw);
        im2col(input, self.in_channels, height, width, self.kernel, col);
        for (c, row) in out.chunks_exact_mut(hw).enumerate() {
            row.fill(self.bias[c]);
        }
        sgemm(
            self.out_channels,
            self.patch_len(),
            hw,
            &self.weight,
            false,
            col,
            false,
            out,
            1.0,
        );
    }
}

/// Batch normalization with stored training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mu_train: Vec<f32>,
    /// Training standard deviation (not variance).
    pub sigma_train: Vec<f32>,
    pub epsilon: f32,
}

impl BatchNormLayer {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mu_train: vec![0.0; channels],
            sigma_train: vec![1.0; channels],
            epsilon: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn train_stats(&self) -> BnStats {
        BnStats {
            mean: self.mu_train.iter().map(|&v| v as f64).collect(),
            std: self.sigma_train.iter().map(|&v| v as f64).collect(),
        }
    }

    /// Normalize `x` (`[C, hw]`) in place with the given statistics, apply the
    /// affine transform and, if requested, ReLU.
    pub(crate) fn apply(&self, x: &mut [f32], hw: usize, stats: &BnStats, relu: bool) {
        for (c, row) in x.chunks_exact_mut(hw).enumerate() {
            let inv = 1.0 / (stats.std[c] * stats.std[c] + self.epsilon as f64).sqrt();
            let scale = (self.gamma[c] as f64 * inv) as f32;
            let shift = (self.beta[c] as f64 - stats.mean[c] * self.gamma[c] as f64 * inv) as f32;
            if relu {
                for v in row.iter_mut() {
                    *v = (*v * scale + shift).max(0.0);
                }
            } else {
                for v in row.iter_mut() {
                    *v = *v * scale + shift;
                }
            }
        }
    }
}

/// Per-channel mean and standard deviation at one BN layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl BnStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Biased per-channel statistics of a `[C, hw]` map.
    pub fn observe(x: &[f32], hw: usize) -> Self {
        let channels = x.len() / hw;
        let mut mean = Vec::with_capacity(channels);
        let mut std = Vec::with_capacity(channels);
        for row in x.chunks_exact(hw) {
            let (m, v) = mean_var(row);
            mean.push(m);
            std.push(v.sqrt());
        }
        Self { mean, std }
    }
}

/// Two-pass biased mean/variance with `f64` accumulation.
pub(crate) fn mean_var(row: &[f32]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = row
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, var)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub conv: Conv2d,
    pub bn: BatchNormLayer,
}

/// The 1x1 classification head as stored in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Row-major `num_classes x in_channels`.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Working copy of the head in `f64`; this is what gets adapted.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub in_channels: usize,
    pub num_classes: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl From<&Head> for HeadParams {
    fn from(head: &Head) -> Self {
        Self {
            in_channels: head.in_channels,
            num_classes: head.num_classes,
            weight: head.weight.iter().map(|&v| v as f64).collect(),
            bias: head.bias.iter().map(|&v| v as f64).collect(),
        }
    }
}

impl HeadParams {
    pub fn zeros(in_channels: usize, num_classes: usize) -> Self {
        Self {
            in_channels,
            num_classes,
            weight: vec![0.0; in_channels * num_classes],
            bias: vec![0.0; num_classes],
        }
    }
}

/// Gradient of a scalar loss with respect to [`HeadParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationNet {
    pub arch: Architecture,
    pub blocks: Vec<Block>,
    pub head: Head,
}

impl SegmentationNet {
    /// Freshly initialized network (He-normal convs, identity BN, zero biases).
    pub fn init<R: Rng>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut blocks = Vec::with_capacity(arch.widths.len());
        let mut in_ch = arch.in_channels;
        for &w in &arch.widths {
            blocks.push(Block {
                conv: Conv2d::he_init(in_ch, w, 3, rng),
                bn: BatchNormLayer::identity(w),
            });
            in_ch = w;
        }
        let head_conv = Conv2d::he_init(in_ch, arch.num_classes, 1, rng);
        Ok(Self {
            arch: arch.clone(),
            blocks,
            head: Head {
                in_channels: in_ch,
                num_classes: arch.num_classes,
                weight: head_conv.weight,
                bias: head_conv.bias,
            },
        })
    }

    pub fn num_bn_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes
    }

    /// Stored training statistics, one entry per BN layer.
    pub fn train_stats(&self) -> Vec<BnStats> {
        self.blocks.iter().map(|b| b.bn.train_stats()).collect()
    }

    pub fn head_params(&self) -> HeadParams {
        HeadParams::from(&self.head)
    }

    /// Run the backbone, normalizing every BN layer with `bn_stats`.
    ///
    /// Returns the final feature map and, per BN layer, the statistics of that
    /// layer's pre-normalization input observed on this image. The observed
    /// statistics never feed back into the normalization.
    pub fn forward_backbone(
        &self,
        image: &Tensor,
        bn_stats: &[BnStats],
    ) -> Result<(Tensor, Vec<BnStats>)> {
        let shape = image.shape();
        if shape.len() != 3 {
            return Err(Error::InvalidInput(format!(
                "image must be [C, H, W], got {shape:?}"
            )));
        }
        let channels = shape[0];
        if channels != self.arch.in_channels {
            return Err(Error::InvalidInput(format!(
                "image has {channels} channels, first conv expects {}",
                self.arch.in_channels
            )));
        }
        if bn_stats.len() != self.blocks.len() {
            return Err(Error::Shape(format!(
                "{} BN stat entries for {} BN layers",
                bn_stats.len(),
                self.blocks.len()
            )));
        }
        for (l, (stats, block)) in bn_stats.iter().zip(&self.blocks).enumerate() {
            if stats.mean.len() != block.bn.channels() || stats.std.len() != block.bn.channels() {
                return Err(Error::Shape(format!(
                    "BN stats for layer {l} have wrong channel count"
                )));
            }
            if stats.std.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::InvalidInput(format!(
                    "BN std for layer {l} must be positive"
                )));
            }
        }
        if !image.all_finite() {
            return Err(Error::InvalidInput(
                "image contains non-finite values".into(),
            ));
        }

        self.run_backbone(image, |l, _| Ok(bn_stats[l].clone()))
    }

    /// Run the backbone choosing each layer's normalization statistics on
    /// the fly from that layer's observed input statistics.
    ///
    /// Returns the features and the statistics actually used per layer.
    pub fn forward_backbone_adaptive<F>(
        &self,
        image: &Tensor,
        choose: F,
    ) -> Result<(Tensor, Vec<BnStats>)>
    where
        F: FnMut(usize, &BnStats) -> Result<BnStats>,
    {
        self.check_image(image)?;
        let mut used = Vec::with_capacity(self.blocks.len());
        let mut choose = choose;
        let (features, _) = self.run_backbone(image, |l, observed| {
            let stats = choose(l, observed)?;
            used.push(stats.clone());
            Ok(stats)
        })?;
        Ok((features, used))
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let shape = image.shape();
        if shape.len() != 3 {
            return Err(Error::InvalidInput(format!(
                "image must be [C, H, W], got {shape:?}"
            )));
        }
        if shape[0] != self.arch.in_channels {
            return Err(Error::InvalidInput(format!(
                "image has {} channels, first conv expects {}",
                shape[0], self.arch.in_channels
            )));
        }
        if !image.all_finite() {
            return Err(Error::InvalidInput(
                "image contains non-finite values".into(),
            ));
        }
        Ok(())
    }

    fn run_backbone<F>(&self, image: &Tensor, mut choose: F) -> Result<(Tensor, Vec<BnStats>)>
    where
        F: FnMut(usize, &BnStats) -> Result<BnStats>,
    {
        let (height, width) = (image.shape()[1], image.shape()[2]);
        let hw = height * width;
        let mut col = Vec::new();
        let mut x = image.data().to_vec();
        let mut observed = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let mut pre = vec![0.0f32; block.conv.out_channels * hw];
            block
                .conv
                .forward_into(&x, height, width, &mut col, &mut pre);
            let seen = BnStats::observe(&pre, hw);
            let stats = choose(l, &seen)?;
            if stats.mean.len() != block.bn.channels() || stats.std.len() != block.bn.channels() {
                return Err(Error::Shape(format!(
                    "BN stats for layer {l} have wrong channel count"
                )));
            }
            if stats.std.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::InvalidInput(format!(
                    "BN std for layer {l} must be positive"
                )));
            }
            block.bn.apply(&mut pre, hw, &stats, true);
            observed.push(seen);
            x = pre;
        }
        let features = Tensor::new(vec![self.arch.feature_channels(), height, width], x)?;
        Ok((features, observed))
    }
}

/// Per-pixel logits `W * f + b` for a `[K, H, W]` feature map.
pub fn forward_head(features: &Tensor, head: &HeadParams) -> Result<Tensor<f64>> {
    if features.shape().len() != 3 || features.channels() != head.in_channels {
        return Err(Error::Shape(format!(
            "features {:?} incompatible with head input width {}",
            features.shape(),
            head.in_channels
        )));
    }
    let d = features.pixels();
    let mut out = vec![0.0f64; head.num_classes * d];
    for (c, row) in out.chunks_exact_mut(d).enumerate() {
        row.fill(head.bias[c]);
        for k in 0..head.in_channels {
            let w = head.weight[c * head.in_channels + k];
            for (o, &f) in row.iter_mut().zip(features.channel(k)) {
                *o += w * f as f64;
            }
        }
    }
    let mut shape = features.shape().to_vec();
    shape[0] = head.num_classes;
    Tensor::new(shape, out)
}

/// Softmax over the class axis, independently for every pixel.
pub fn softmax_per_pixel(logits: &Tensor<f64>) -> Tensor<f64> {
    let classes = logits.channels();
    let d = logits.pixels();
    let src = logits.data();
    let mut out = vec![0.0f64; src.len()];
    for i in 0..d {
        let mut max = f64::NEG_INFINITY;
        for c in 0..classes {
            max = max.max(src[c * d + i]);
        }
        let mut sum = 0.0;
        for c in 0..classes {
            let e = (src[c * d + i] - max).exp();
            out[c * d + i] = e;
            sum += e;
        }
        for c in 0..classes {
            out[c * d + i] /= sum;
        }
    }
    Tensor::new(logits.shape().to_vec(), out).expect("same shape")
}

/// Gradient of the loss with respect to the head parameters, given the
/// upstream gradient with respect to the logits.
pub fn head_gradient(
    features: &Tensor,
    head: &HeadParams,
    dloss_dlogits: &Tensor<f64>,
) -> Result<HeadGradient> {
    let d = features.pixels();
    if dloss_dlogits.channels() != head.num_classes || dloss_dlogits.pixels() != d {
        return Err(Error::Shape(format!(
            "logit gradient {:?} does not match {} classes x {d} pixels",
            dloss_dlogits.shape(),
            head.num_classes
        )));
    }
    if features.channels() != head.in_channels {
        return Err(Error::Shape(
            "features do not match head input width".into(),
        ));
    }
    let mut weight = vec![0.0; head.weight.len()];
    let mut bias = vec![0.0; head.bias.len()];
    for c in 0..head.num_classes {
        let g = dloss_dlogits.channel(c);
        bias[c] = g.iter().sum();
        for k in 0..head.in_channels {
            weight[c * head.in_channels + k] = g
                .iter()
                .zip(features.channel(k))
                .map(|(&a, &f)| a * f as f64)
                .sum();
        }
    }
    Ok(HeadGradient { weight, bias })
}

/// Unfold `[ch, h, w]` into the `(ch * k * k) x (h * w)` patch matrix for a
/// stride-1 convolution with `k / 2` zero padding.
pub(crate) fn im2col(
    input: &[f32],
    channels: usize,
    height: usize,
    width: usize,
    k: usize,
    col: &mut Vec<f32>,
) {
    let hw = height * width;
    col.clear();
    col.resize(channels * k * k * hw, 0.0);
    if k == 1 {
        col.copy_from_slice(input);
        return;
    }
    let pad = (k / 2) as isize;
    for c in 0..channels {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let dy = ky as isize - pad;
                for y in 0..height {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= height as isize {
                        continue;
                    }
                    let src_row = &plane[sy as usize * width..(sy as usize + 1) * width];
                    let dst_row = &mut dst[y * width..(y + 1) * width];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (width as isize - dx.max(0)) as usize;
                    let s0 = (x0 as isize + dx) as usize;
                    dst_row[x0..x1].copy_from_slice(&src_row[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients back onto `[ch, h, w]`.
pub(crate) fn col2im(
    col: &[f32],
    channels: usize,
    height: usize,
    width: usize,
    k: usize,
    out: &mut [f32],
) {
    let hw = height * width;
    out.fill(0.0);
    let pad = (k / 2) as isize;
    for c in 0..channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let dy = ky as isize - pad;
                let plane = &mut out[c * hw..(c + 1) * hw];
                for y in 0..height {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= height as isize {
                        continue;
                    }
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (width as isize - dx.max(0)) as usize;
                    let s0 = (x0 as isize + dx) as usize;
                    let dst_row =
                        &mut plane[sy as usize * width + s0..sy as usize * width + s0 + (x1 - x0)];
                    for (d, &s) in dst_row.iter_mut().zip(&src[y * width + x0..y * width + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// `C = op(A) * op(B) + beta * C` for row-major operands, where `A` is `m x k`
/// (stored `k x m` when `trans_a`) and `B` is `k x n` (stored `n x k` when
/// `trans_b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above bound every index touched by the given
    // dimensions and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_channel_net(value_weight: f32) -> SegmentationNet {
        let mut conv = Conv2d::zeros(1, 1, 3);
        conv.weight[4] = value_weight;
        let block = Block {
            conv: conv.clone(),
            bn: BatchNormLayer::identity(1),
        };
        SegmentationNet {
            arch: Architecture {
                in_channels: 1,
                widths: vec![1, 1],
                num_classes: 1,
            },
            blocks: vec![block.clone(), block],
            head: Head {
                in_channels: 1,
                num_classes: 1,
                weight: vec![1.0],
                bias: vec![0.0],
            },
        }
    }

    fn unit_stats(net: &SegmentationNet) -> Vec<BnStats> {
        net.blocks
            .iter()
            .map(|b| BnStats {
                mean: vec![0.0; b.bn.channels()],
                std: vec![1.0; b.bn.channels()],
            })
            .collect()
    }

    #[test]
    fn one_pixel_identity_forward_is_relu() {
        let net = single_channel_net(1.0);
        let stats = unit_stats(&net);
        for v in [0.7f32, -0.4] {
            let image = Tensor::new(vec![1, 1, 1], vec![v]).unwrap();
            let (features, _) = net.forward_backbone(&image, &stats).unwrap();
            // Both blocks apply x / sqrt(1 + eps) followed by ReLU.
            let scale = 1.0 / (1.0f64 + BN_EPS as f64).sqrt();
            let expected = ((v as f64) * scale * scale).max(0.0);
            assert!((features.data()[0] as f64 - expected).abs() < 1e-6, "{v}");
            assert!((features.data()[0] - v.max(0.0)).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_image_has_zero_batch_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = SegmentationNet::init(&Architecture::default(), &mut rng).unwrap();
        let image = Tensor::zeros(vec![3, 8, 8]);
        let (_, observed) = net.forward_backbone(&image, &net.train_stats()).unwrap();
        for layer in observed {
            assert!(layer.mean.iter().all(|&m| m == 0.0));
        }
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = SegmentationNet::init(&Architecture::default(), &mut rng).unwrap();
        let image = Tensor::zeros(vec![1, 8, 8]);
        assert!(matches!(
            net.forward_backbone(&image, &net.train_stats()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let conv = Conv2d::he_init(2, 3, 3, &mut rng);
        let (h, w) = (5, 4);
        let input: Vec<f32> = (0..2 * h * w)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let mut col = Vec::new();
        let mut out = vec![0.0; 3 * h * w];
        conv.forward_into(&input, h, w, &mut col, &mut out);
        for o in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = conv.bias[o] as f64;
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = x as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += conv.weight[((o * 2 + c) * 3 + ky) * 3 + kx] as f64
                                    * input[(c * h + sy as usize) * w + sx as usize] as f64;
                            }
                        }
                    }
                    assert!((out[(o * h + y) * w + x] as f64 - acc).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (c, h, w) = (2, 4, 5);
        let x: Vec<f32> = (0..c * h * w)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let mut col = Vec::new();
        im2col(&x, c, h, w, 3, &mut col);
        let y: Vec<f32> = (0..col.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let mut back = vec![0.0; x.len()];
        col2im(&y, c, h, w, 3, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(&a, &b)| a as f64 * b as f64).sum();
        let rhs: f64 = x
            .iter()
            .zip(&back)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn head_with_zero_weights_emits_bias() {
        let features = Tensor::new(vec![2, 1, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        let mut head = HeadParams::zeros(2, 3);
        head.bias = vec![0.5, -1.0, 2.0];
        let logits = forward_head(&features, &head).unwrap();
        for c in 0..3 {
            assert!(logits.channel(c).iter().all(|&v| v == head.bias[c]));
        }
    }

    #[test]
    #[allow(clippy::neg_multiply)] // spelled out as weight * feature
    fn head_is_linear_in_parameters() {
        let features = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, -1.0]).unwrap();
        let head = HeadParams {
            in_channels: 2,
            num_classes: 2,
            weight: vec![0.3, -0.2, 1.5, 0.25],
            bias: vec![0.1, -0.4],
        };
        let mut doubled = head.clone();
        doubled.weight.iter_mut().for_each(|w| *w *= 2.0);
        doubled.bias.iter_mut().for_each(|b| *b *= 2.0);
        let a = forward_head(&features, &head).unwrap();
        let b = forward_head(&features, &doubled).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
        // Hand matrix product: pixel 0 features (1, 3), pixel 1 features (2, -1).
        let expected = [
            0.3 * 1.0 - 0.2 * 3.0 + 0.1,
            0.3 * 2.0 - 0.2 * -1.0 + 0.1,
            1.5 * 1.0 + 0.25 * 3.0 - 0.4,
            1.5 * 2.0 + 0.25 * -1.0 - 0.4,
        ];
        for (x, e) in a.data().iter().zip(expected) {
            assert!((x - e).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_closed_forms() {
        let logits = Tensor::new(vec![2, 1, 1], vec![0.0, 3.0f64.ln()]).unwrap();
        let f = softmax_per_pixel(&logits);
        assert!((f.data()[0] - 0.25).abs() < 1e-12);
        assert!((f.data()[1] - 0.75).abs() < 1e-12);

        let equal = Tensor::new(vec![4, 1, 1], vec![2.0; 4]).unwrap();
        assert!(softmax_per_pixel(&equal)
            .data()
            .iter()
            .all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn single_pixel_head_gradient_is_feature_times_upstream() {
        let features = Tensor::new(vec![3, 1, 1], vec![0.5, -2.0, 1.5]).unwrap();
        let head = HeadParams::zeros(3, 1);
        let upstream = Tensor::new(vec![1, 1, 1], vec![-0.75]).unwrap();
        let grad = head_gradient(&features, &head, &upstream).unwrap();
        assert_eq!(grad.weight, vec![0.5 * -0.75, -2.0 * -0.75, 1.5 * -0.75]);
        assert_eq!(grad.bias, vec![-0.75]);

        let zero = Tensor::zeros(vec![1, 1, 1]);
        let grad = head_gradient(&features, &head, &zero).unwrap();
        assert!(grad.weight.iter().chain(&grad.bias).all(|&g| g == 0.0));
    }
}
