//! Supervised training of the segmentation network and calibration of the
//! domain-shift detector.
//!
//! Backpropagation is written out by hand for the fixed block structure
//! (conv -> BN in training mode -> ReLU, then a 1x1 head with per-pixel
//! cross-entropy).

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::nn::{col2im, sgemm, Architecture, SegmentationNet};
use crate::optim::Adam;
use crate::scene::{LabelMap, LabeledScene, IGNORE_LABEL};
use crate::selective_bn::{kl_sum_with, DomainCalibration, KlReduction};
use crate::tensor::Tensor;

/// Minimum number of images for detector calibration.
pub const MIN_CALIBRATION_IMAGES: usize = 10;
/// Floor for the detector scale `b`.
pub const DETECTOR_SCALE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            bn_momentum: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config("bn_momentum must be in (0, 1]".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Statistics of the per-image KL-sum over the calibration images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlStatSummary {
    pub mean_kl_sum: f64,
    pub std_kl_sum: f64,
    pub count: usize,
}

/// Placement of the detector midpoint: `a = -(mean + sigmas * std)`, `b = std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorPolicy {
    pub sigmas: f64,
    pub reduction: KlReduction,
}

impl Default for DetectorPolicy {
    fn default() -> Self {
        Self {
            sigmas: 3.0,
            reduction: KlReduction::Mean,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Pixel accuracy on the training scenes, inference-mode BN.
    pub train_accuracy: f64,
}

/// Train from scratch, then calibrate the domain-shift detector on the same
/// (clean) training images.
pub fn train(
    scenes: &[LabeledScene],
    arch: &Architecture,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_policy(scenes, arch, config, &DetectorPolicy::default())
}

pub fn train_with_policy(
    scenes: &[LabeledScene],
    arch: &Architecture,
    config: &TrainConfig,
    policy: &DetectorPolicy,
) -> Result<TrainOutcome> {
    config.validate()?;
    arch.validate()?;
    if scenes.is_empty() {
        return Err(Error::InsufficientData {
            required: 1,
            actual: 0,
        });
    }
    for (i, s) in scenes.iter().enumerate() {
        if s.ood_mask.iter().any(|&m| m) {
            return Err(Error::InvalidInput(format!(
                "training scene {i} contains novel-class pixels"
            )));
        }
        if s.num_seen_classes != arch.num_classes {
            return Err(Error::InvalidInput(format!(
                "training scene {i} has {} classes, network has {}",
                s.num_seen_classes, arch.num_classes
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = SegmentationNet::init(arch, &mut rng)?;
    let mut running: Vec<(Vec<f64>, Vec<f64>)> = arch
        .widths
        .iter()
        .map(|&w| (vec![0.0; w], vec![1.0; w]))
        .collect();

    let sizes = param_sizes(&net);
    let mut adam = Adam::new(config.learning_rate as f32, &sizes);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let images: Vec<&Tensor> = chunk.iter().map(|&i| &scenes[i].image).collect();
            let labels: Vec<&LabelMap> = chunk.iter().map(|&i| &scenes[i].labels).collect();
            let pass = forward_backward(&net, &images, &labels)?;
            if !pass.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: pass.loss,
                });
            }
            for (l, (mean, var)) in pass.batch_moments.iter().enumerate() {
                let (rm, rv) = &mut running[l];
                for c in 0..mean.len() {
                    rm[c] = (1.0 - config.bn_momentum) * rm[c] + config.bn_momentum * mean[c];
                    rv[c] = (1.0 - config.bn_momentum) * rv[c] + config.bn_momentum * var[c];
                }
            }
            apply_adam(&mut net, &mut adam, &pass.grads);
            epoch_loss += pass.loss;
            batches += 1;
            step += 1;
        }
        let mean_loss = epoch_loss / batches as f64;
        debug!("epoch {epoch}: loss {mean_loss:.5}");
        loss_curve.push(mean_loss);
    }

    for (block, (rm, rv)) in net.blocks.iter_mut().zip(&running) {
        block.bn.mu_train = rm.iter().map(|&v| v as f32).collect();
        block.bn.sigma_train = rv.iter().map(|&v| (v.sqrt() as f32).max(1e-6)).collect();
    }

    let train_accuracy = pixel_accuracy(&net, scenes)?;
    info!(
        "trained {} epochs: final loss {:.4}, train pixel accuracy {:.4}",
        config.epochs,
        loss_curve.last().copied().unwrap_or(f64::NAN),
        train_accuracy
    );

    let mut checkpoint = ModelCheckpoint::new(net, config.seed);
    checkpoint.meta.loss_curve = loss_curve.clone();
    checkpoint.meta.train_pixel_accuracy = Some(train_accuracy);
    let images: Vec<&Tensor> = scenes.iter().map(|s| &s.image).collect();
    calibrate_domain_detector_with(&mut checkpoint, &images, policy)?;
    checkpoint.record_probe()?;
    Ok(TrainOutcome {
        checkpoint,
        loss_curve,
        train_accuracy,
    })
}

/// Fraction of labeled seen-class pixels whose argmax matches, with BN in
/// inference mode.
pub fn pixel_accuracy(net: &SegmentationNet, scenes: &[LabeledScene]) -> Result<f64> {
    let stats = net.train_stats();
    let head = net.head_params();
    let counts: Vec<(usize, usize)> = scenes
        .par_iter()
        .map(|s| -> Result<(usize, usize)> {
            let (features, _) = net.forward_backbone(&s.image, &stats)?;
            let logits = crate::nn::forward_head(&features, &head)?;
            let pred = crate::ood::argmax_labels(&logits);
            let mut hit = 0;
            let mut total = 0;
            for (p, &t) in pred.iter().zip(&s.labels.labels) {
                if t != IGNORE_LABEL && (t as usize) <= net.num_classes() {
                    total += 1;
                    hit += (*p == t) as usize;
                }
            }
            Ok((hit, total))
        })
        .collect::<Result<_>>()?;
    let (hit, total) = counts.iter().fold((0, 0), |(a, b), (h, t)| (a + h, b + t));
    Ok(hit as f64 / total.max(1) as f64)
}

/// Compute the per-image KL-sum over `images` and place the detector at
/// `a = -(mean + 3 std)`, `b = std`.
pub fn calibrate_domain_detector(
    checkpoint: &mut ModelCheckpoint,
    images: &[&Tensor],
) -> Result<DomainCalibration> {
    calibrate_domain_detector_with(checkpoint, images, &DetectorPolicy::default())
}

pub fn calibrate_domain_detector_with(
    checkpoint: &mut ModelCheckpoint,
    images: &[&Tensor],
    policy: &DetectorPolicy,
) -> Result<DomainCalibration> {
    if images.len() < MIN_CALIBRATION_IMAGES {
        return Err(Error::InsufficientData {
            required: MIN_CALIBRATION_IMAGES,
            actual: images.len(),
        });
    }
    let net = &checkpoint.net;
    let train_stats = net.train_stats();
    let kls: Vec<f64> = images
        .par_iter()
        .map(|img| -> Result<f64> {
            let (_, observed) = net.forward_backbone(img, &train_stats)?;
            kl_sum_with(&observed, &train_stats, policy.reduction)
        })
        .collect::<Result<_>>()?;
    let n = kls.len() as f64;
    let mean = kls.iter().sum::<f64>() / n;
    let std = (kls.iter().map(|k| (k - mean) * (k - mean)).sum::<f64>() / n).sqrt();
    let calibration = DomainCalibration {
        a: -(mean + policy.sigmas * std),
        b: std.max(DETECTOR_SCALE_FLOOR),
        reduction: policy.reduction,
    };
    checkpoint.meta.calibration = calibration;
    checkpoint.meta.kl_summary = Some(KlStatSummary {
        mean_kl_sum: mean,
        std_kl_sum: std,
        count: kls.len(),
    });
    Ok(calibration)
}

/// Gradients for every trainable tensor, in [`param_sizes`] order.
#[derive(Debug, Clone)]
pub(crate) struct Grads {
    pub conv_w: Vec<Vec<f32>>,
    pub conv_b: Vec<Vec<f32>>,
    pub gamma: Vec<Vec<f32>>,
    pub beta: Vec<Vec<f32>>,
    pub head_w: Vec<f32>,
    pub head_b: Vec<f32>,
}

pub(crate) struct Pass {
    pub loss: f64,
    pub grads: Grads,
    /// Per layer: batch mean and biased variance.
    pub batch_moments: Vec<(Vec<f64>, Vec<f64>)>,
}

fn param_sizes(net: &SegmentationNet) -> Vec<usize> {
    let mut sizes = Vec::new();
    for b in &net.blocks {
        sizes.extend([
            b.conv.weight.len(),
            b.conv.bias.len(),
            b.bn.gamma.len(),
            b.bn.beta.len(),
        ]);
    }
    sizes.extend([net.head.weight.len(), net.head.bias.len()]);
    sizes
}

fn apply_adam(net: &mut SegmentationNet, adam: &mut Adam<f32>, grads: &Grads) {
    let mut params: Vec<&mut [f32]> = Vec::new();
    for b in net.blocks.iter_mut() {
        params.push(&mut b.conv.weight);
        params.push(&mut b.conv.bias);
        params.push(&mut b.bn.gamma);
        params.push(&mut b.bn.beta);
    }
    params.push(&mut net.head.weight);
    params.push(&mut net.head.bias);
    let mut g: Vec<&[f32]> = Vec::new();
    for l in 0..grads.conv_w.len() {
        g.extend([
            grads.conv_w[l].as_slice(),
            grads.conv_b[l].as_slice(),
            grads.gamma[l].as_slice(),
            grads.beta[l].as_slice(),
        ]);
    }
    g.push(&grads.head_w);
    g.push(&grads.head_b);
    adam.step(&mut params, &g);
}

struct LayerCache {
    /// im2col matrix of the layer input, per image.
    cols: Vec<Vec<f32>>,
    /// Normalized pre-activations, per image.
    xhat: Vec<Vec<f32>>,
    /// Post-ReLU outputs, per image.
    out: Vec<Vec<f32>>,
    inv_std: Vec<f64>,
}

/// Forward in training mode (batch statistics) and backward for the mean
/// per-pixel cross-entropy over labeled seen-class pixels.
pub(crate) fn forward_backward(
    net: &SegmentationNet,
    images: &[&Tensor],
    labels: &[&LabelMap],
) -> Result<Pass> {
    let shape = images[0].shape();
    let (h, w) = (shape[1], shape[2]);
    let hw = h * w;
    for img in images {
        if img.shape() != shape {
            return Err(Error::Shape("training batch images differ in shape".into()));
        }
    }
    let bsz = images.len();
    let n = (bsz * hw) as f64;

    let mut caches: Vec<LayerCache> = Vec::with_capacity(net.blocks.len());
    let mut batch_moments = Vec::with_capacity(net.blocks.len());
    let mut inputs: Vec<Vec<f32>> = images.iter().map(|t| t.data().to_vec()).collect();
    for block in &net.blocks {
        let cout = block.conv.out_channels;
        let mut cols = Vec::with_capacity(bsz);
        let mut pre = Vec::with_capacity(bsz);
        for x in &inputs {
            let mut col = Vec::new();
            let mut y = vec![0.0f32; cout * hw];
            block.conv.forward_into(x, h, w, &mut col, &mut y);
            cols.push(col);
            pre.push(y);
        }
        let mut mean = vec![0.0f64; cout];
        let mut var = vec![0.0f64; cout];
        for c in 0..cout {
            let s: f64 = pre
                .iter()
                .map(|p| {
                    p[c * hw..(c + 1) * hw]
                        .iter()
                        .map(|&v| v as f64)
                        .sum::<f64>()
                })
                .sum();
            mean[c] = s / n;
            let ss: f64 = pre
                .iter()
                .map(|p| {
                    p[c * hw..(c + 1) * hw]
                        .iter()
                        .map(|&v| {
                            let d = v as f64 - mean[c];
                            d * d
                        })
                        .sum::<f64>()
                })
                .sum();
            var[c] = ss / n;
        }
        let inv_std: Vec<f64> = var
            .iter()
            .map(|&v| 1.0 / (v + block.bn.epsilon as f64).sqrt())
            .collect();
        let mut xhat = pre;
        let mut out = Vec::with_capacity(bsz);
        for xh in xhat.iter_mut() {
            let mut o = vec![0.0f32; cout * hw];
            for c in 0..cout {
                let (m, is) = (mean[c] as f32, inv_std[c] as f32);
                let (g, b) = (block.bn.gamma[c], block.bn.beta[c]);
                for i in c * hw..(c + 1) * hw {
                    xh[i] = (xh[i] - m) * is;
                    o[i] = (g * xh[i] + b).max(0.0);
                }
            }
            out.push(o);
        }
        inputs = out.clone();
        caches.push(LayerCache {
            cols,
            xhat,
            out,
            inv_std,
        });
        batch_moments.push((mean, var));
    }

    // Head and loss.
    let head = &net.head;
    let classes = head.num_classes;
    let k = head.in_channels;
    let feats = &caches.last().expect("at least two layers").out;
    let labeled: usize = labels
        .iter()
        .map(|l| {
            l.labels
                .iter()
                .filter(|&&t| t != IGNORE_LABEL && (t as usize) <= classes)
                .count()
        })
        .sum();
    let denom = labeled.max(1) as f64;
    let mut loss = 0.0f64;
    let mut head_w = vec![0.0f32; classes * k];
    let mut head_b = vec![0.0f32; classes];
    let mut upstream: Vec<Vec<f32>> = Vec::with_capacity(bsz);
    for (feat, lab) in feats.iter().zip(labels) {
        let mut logits = vec![0.0f32; classes * hw];
        for (c, row) in logits.chunks_exact_mut(hw).enumerate() {
            row.fill(head.bias[c]);
        }
        sgemm(
            classes,
            k,
            hw,
            &head.weight,
            false,
            feat,
            false,
            &mut logits,
            1.0,
        );
        let mut dlogits = vec![0.0f32; classes * hw];
        for i in 0..hw {
            let t = lab.labels[i];
            if t == IGNORE_LABEL || t as usize > classes {
                continue;
            }
            let max = (0..classes)
                .map(|c| logits[c * hw + i])
                .fold(f32::NEG_INFINITY, f32::max) as f64;
            let sum: f64 = (0..classes)
                .map(|c| (logits[c * hw + i] as f64 - max).exp())
                .sum();
            let target = t as usize - 1;
            loss += -(logits[target * hw + i] as f64 - max - sum.ln());
            for c in 0..classes {
                let p = (logits[c * hw + i] as f64 - max).exp() / sum;
                let g = (p - (c == target) as u8 as f64) / denom;
                dlogits[c * hw + i] = g as f32;
            }
        }
        sgemm(
            classes,
            hw,
            k,
            &dlogits,
            false,
            feat,
            true,
            &mut head_w,
            1.0,
        );
        for c in 0..classes {
            head_b[c] += dlogits[c * hw..(c + 1) * hw].iter().sum::<f32>();
        }
        let mut dfeat = vec![0.0f32; k * hw];
        sgemm(
            k,
            classes,
            hw,
            &head.weight,
            true,
            &dlogits,
            false,
            &mut dfeat,
            0.0,
        );
        upstream.push(dfeat);
    }
    loss /= denom;

    let layers = net.blocks.len();
    let mut conv_w = vec![Vec::new(); layers];
    let mut conv_b = vec![Vec::new(); layers];
    let mut gamma = vec![Vec::new(); layers];
    let mut beta = vec![Vec::new(); layers];
    for l in (0..layers).rev() {
        let block = &net.blocks[l];
        let cache = &caches[l];
        let cout = block.conv.out_channels;
        let cin = block.conv.in_channels;
        let patch = block.conv.patch_len();

        // Through ReLU: dy = upstream * [out > 0].
        for (up, out) in upstream.iter_mut().zip(&cache.out) {
            for (g, &o) in up.iter_mut().zip(out) {
                if o <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        let mut dgamma = vec![0.0f64; cout];
        let mut dbeta = vec![0.0f64; cout];
        for (dy, xh) in upstream.iter().zip(&cache.xhat) {
            for c in 0..cout {
                for i in c * hw..(c + 1) * hw {
                    dgamma[c] += dy[i] as f64 * xh[i] as f64;
                    dbeta[c] += dy[i] as f64;
                }
            }
        }
        // dxhat = dy * gamma; dpre = inv_std / N * (N dxhat - sum dxhat - xhat sum(dxhat xhat)).
        // With sum(dxhat) = gamma * dbeta and sum(dxhat xhat) = gamma * dgamma.
        let mut dpre_all = Vec::with_capacity(bsz);
        for (dy, xh) in upstream.iter().zip(&cache.xhat) {
            let mut dpre = vec![0.0f32; cout * hw];
            for c in 0..cout {
                let g = block.bn.gamma[c] as f64;
                let scale = (g * cache.inv_std[c]) as f32;
                let mean_dy = (dbeta[c] / n) as f32;
                let mean_dyx = (dgamma[c] / n) as f32;
                for i in c * hw..(c + 1) * hw {
                    dpre[i] = scale * (dy[i] - mean_dy - xh[i] * mean_dyx);
                }
            }
            dpre_all.push(dpre);
        }

        let mut dw = vec![0.0f32; cout * patch];
        let mut db = vec![0.0f32; cout];
        let mut next_upstream = Vec::with_capacity(if l > 0 { bsz } else { 0 });
        let mut dcol = Vec::new();
        for (dpre, col) in dpre_all.iter().zip(&cache.cols) {
            sgemm(cout, hw, patch, dpre, false, col, true, &mut dw, 1.0);
            for c in 0..cout {
                db[c] += dpre[c * hw..(c + 1) * hw].iter().sum::<f32>();
            }
            if l > 0 {
                dcol.clear();
                dcol.resize(patch * hw, 0.0);
                sgemm(
                    patch,
                    cout,
                    hw,
                    &block.conv.weight,
                    true,
                    dpre,
                    false,
                    &mut dcol,
                    0.0,
                );
                let mut dx = vec![0.0f32; cin * hw];
                col2im(&dcol, cin, h, w, block.conv.kernel, &mut dx);
                next_upstream.push(dx);
            }
        }
        conv_w[l] = dw;
        conv_b[l] = db;
        gamma[l] = dgamma.iter().map(|&v| v as f32).collect();
        beta[l] = dbeta.iter().map(|&v| v as f32).collect();
        upstream = next_upstream;
    }

    Ok(Pass {
        loss,
        grads: Grads {
            conv_w,
            conv_b,
            gamma,
            beta,
            head_w,
            head_b,
        },
        batch_moments,
    })
}
