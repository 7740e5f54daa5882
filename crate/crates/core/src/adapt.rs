//! Per-image test-time adaptation: selective BN statistics, then
//! anomaly-aware self-training of the classification head on calibrated
//! outlier pseudo-labels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate_image, CalibMode, CalibrationParams, GmmOptions};
use crate::checkpoint::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::nn::{forward_head, head_gradient, softmax_per_pixel, HeadParams};
use crate::ood::{self, ScoreKind};
use crate::optim::Adam;
use crate::selective_bn::{estimate_domain_shift, mix_bn_statistics, DomainShiftEstimate};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMode {
    #[default]
    AnomalyAware,
    SeenOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeight {
    #[default]
    Auto,
    One,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    #[default]
    Episodic,
    Continue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    #[default]
    Selective,
    TrainOnly,
    BatchOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub use_sbn: bool,
    pub use_ast: bool,
    pub entropy_mode: EntropyMode,
    pub calib_mode: CalibMode,
    pub class_weight: ClassWeight,
    pub stream_mode: StreamMode,
    pub bn_mode: BnMode,
    pub score_kind: ScoreKind,
    pub gmm: GmmOptions,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            iterations: 1,
            learning_rate: 1e-4,
            tau1: 0.3,
            tau2: 0.6,
            use_sbn: true,
            use_ast: true,
            entropy_mode: EntropyMode::AnomalyAware,
            calib_mode: CalibMode::Gmm,
            class_weight: ClassWeight::Auto,
            stream_mode: StreamMode::Episodic,
            bn_mode: BnMode::Selective,
            score_kind: ScoreKind::Energy,
            gmm: GmmOptions::default(),
        }
    }
}

impl AdaptConfig {
    /// No BN mixing and no self-training: plain frozen inference.
    pub fn identity() -> Self {
        Self {
            use_sbn: false,
            use_ast: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.tau1 && self.tau1 < self.tau2 && self.tau2 < 1.0) {
            return Err(Error::Config(format!(
                "thresholds must satisfy 0 < tau1 < tau2 < 1, got ({}, {})",
                self.tau1, self.tau2
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    /// BN statistics policy after applying the `use_sbn` switch.
    pub fn effective_bn_mode(&self) -> BnMode {
        if self.use_sbn {
            self.bn_mode
        } else {
            BnMode::TrainOnly
        }
    }
}

/// High-confidence region `D` and binary outlier targets on it.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub region: Vec<bool>,
    /// Outlier target; meaningful only where `region` is set.
    pub target: Vec<bool>,
    pub lambda: f64,
    pub tau1: f64,
    pub tau2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PseudoLabelStats {
    pub inliers: usize,
    pub outliers: usize,
    pub excluded: usize,
    pub lambda: f64,
}

impl PseudoLabels {
    pub fn stats(&self) -> PseudoLabelStats {
        let mut s = PseudoLabelStats {
            lambda: self.lambda,
            ..Default::default()
        };
        for (&r, &t) in self.region.iter().zip(&self.target) {
            match (r, t) {
                (false, _) => s.excluded += 1,
                (true, false) => s.inliers += 1,
                (true, true) => s.outliers += 1,
            }
        }
        s
    }

    pub fn is_empty(&self) -> bool {
        !self.region.iter().any(|&r| r)
    }
}

pub fn build_pseudo_labels(
    gbar: &[f64],
    tau1: f64,
    tau2: f64,
    class_weight: ClassWeight,
) -> PseudoLabels {
    let region: Vec<bool> = gbar.iter().map(|&g| g < tau1 || g > tau2).collect();
    let target: Vec<bool> = gbar.iter().map(|&g| g > tau2).collect();
    let outliers = target.iter().filter(|&&t| t).count();
    let inliers = gbar.iter().filter(|&&g| g < tau1).count();
    let lambda = match class_weight {
        ClassWeight::One => 1.0,
        ClassWeight::Auto if outliers == 0 => 1.0,
        ClassWeight::Auto => (inliers as f64 / outliers as f64).max(1.0),
    };
    PseudoLabels {
        region,
        target,
        lambda,
        tau1,
        tau2,
    }
}

/// Scalar loss and its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub dlogits: Tensor<f64>,
}

/// Gradient of the outlier score with respect to logit `k` at pixel `i`.
fn score_gradient(
    kind: ScoreKind,
    probs: &[f64],
    logits: &[f64],
    d: usize,
    classes: usize,
    i: usize,
    out: &mut [f64],
) {
    match kind {
        ScoreKind::Energy => {
            for k in 0..classes {
                out[k] = -probs[k * d + i];
            }
        }
        ScoreKind::MaxLogit => {
            let mut best = 0;
            for k in 1..classes {
                if logits[k * d + i] > logits[best * d + i] {
                    best = k;
                }
            }
            out.fill(0.0);
            out[best] = -1.0;
        }
    }
}

/// Anomaly-aware entropy on the region `D`:
/// `-sum_{i in D} ( sum_c F_c (1 - t_i) log(F_c (1 - G_i)) + lambda t_i log G_i )`,
/// where `G_i = sigmoid((score_i - a) / b)` with `(a, b)` held fixed.
///
/// The gradient flows through every occurrence of `F` (softmax) and of `G`
/// (the score of the logits).
pub fn anomaly_entropy_loss(
    logits: &Tensor<f64>,
    kind: ScoreKind,
    params: &CalibrationParams,
    labels: &PseudoLabels,
) -> Result<LossOutput> {
    let classes = logits.channels();
    let d = logits.pixels();
    if labels.region.len() != d || labels.target.len() != d {
        return Err(Error::Shape(format!(
            "{} pseudo-labels for {d} pixels",
            labels.region.len()
        )));
    }
    let probs = softmax_per_pixel(logits);
    let f = probs.data();
    let z = logits.data();
    let scores = ood::score(logits, kind).scores;
    let mut grad = vec![0.0f64; classes * d];
    let mut loss = 0.0;
    let mut dl_df = vec![0.0f64; classes];
    let mut dg_dz = vec![0.0f64; classes];
    for i in 0..d {
        if !labels.region[i] {
            continue;
        }
        let gbar = crate::selective_bn::sigmoid((scores[i] - params.a_x) / params.b_x);
        let mut dl_dgbar = 0.0;
        dl_df.fill(0.0);
        if labels.target[i] {
            let q = gbar.clamp(PROB_EPS, 1.0 - PROB_EPS);
            loss -= labels.lambda * q.ln();
            if q == gbar {
                dl_dgbar = -labels.lambda / q;
            }
        } else {
            for c in 0..classes {
                let fc = f[c * d + i];
                let u = fc * (1.0 - gbar);
                let q = u.clamp(PROB_EPS, 1.0 - PROB_EPS);
                let lq = q.ln();
                loss -= fc * lq;
                dl_df[c] = -lq;
                if q == u {
                    dl_df[c] -= fc * (1.0 - gbar) / q;
                    dl_dgbar += fc * fc / q;
                }
            }
        }
        // Softmax backward for the direct F terms.
        let dot: f64 = (0..classes).map(|c| f[c * d + i] * dl_df[c]).sum();
        for k in 0..classes {
            grad[k * d + i] += f[k * d + i] * (dl_df[k] - dot);
        }
        // Through G = sigmoid((score - a) / b).
        if dl_dgbar != 0.0 {
            score_gradient(kind, f, z, d, classes, i, &mut dg_dz);
            let scale = dl_dgbar * gbar * (1.0 - gbar) / params.b_x;
            for k in 0..classes {
                grad[k * d + i] += scale * dg_dz[k];
            }
        }
    }
    Ok(LossOutput {
        loss,
        dlogits: Tensor::new(logits.shape().to_vec(), grad)?,
    })
}

/// Entropy of the seen-class distribution summed over all pixels.
pub fn seen_only_entropy_loss(logits: &Tensor<f64>) -> Result<LossOutput> {
    let classes = logits.channels();
    let d = logits.pixels();
    let z = logits.data();
    let probs = softmax_per_pixel(logits);
    let f = probs.data();
    let mut grad = vec![0.0f64; classes * d];
    let mut loss = 0.0;
    let mut logf = vec![0.0f64; classes];
    for i in 0..d {
        let max = (0..classes)
            .map(|c| z[c * d + i])
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + (0..classes)
                .map(|c| (z[c * d + i] - max).exp())
                .sum::<f64>()
                .ln();
        for c in 0..classes {
            logf[c] = z[c * d + i] - lse;
            loss -= f[c * d + i] * logf[c];
        }
        // dL/dF_c = -(log F_c + 1); the constant cancels through softmax.
        let dot: f64 = (0..classes).map(|c| f[c * d + i] * logf[c]).sum();
        for k in 0..classes {
            grad[k * d + i] = -f[k * d + i] * (logf[k] - dot);
        }
    }
    Ok(LossOutput {
        loss,
        dlogits: Tensor::new(logits.shape().to_vec(), grad)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptResult {
    /// Seen-class probabilities `F`, `[C, H, W]`.
    pub inlier_probs: Tensor<f64>,
    /// Raw outlier scores `G`.
    pub scores: Vec<f64>,
    /// Calibrated outlier probabilities.
    pub gbar: Vec<f64>,
    pub calibration: CalibrationParams,
    pub domain: DomainShiftEstimate,
    /// Weight actually placed on the image's own BN statistics.
    pub bn_weight: f64,
    /// One entry per self-training iteration.
    pub loss_trace: Vec<f64>,
    pub pseudo_label_stats: Option<PseudoLabelStats>,
    /// Set when adaptation was abandoned and frozen outputs were returned.
    pub diagnostic: Option<String>,
}

impl AdaptResult {
    pub fn predicted_labels(&self) -> Vec<u8> {
        ood::argmax_labels(&self.inlier_probs)
    }
}

/// Mutable per-stream state: the adapted head and its optimizer.
#[derive(Debug, Clone)]
pub struct AdaptState {
    pub head: HeadParams,
    pub adam: Adam<f64>,
}

impl AdaptState {
    pub fn fresh(checkpoint: &ModelCheckpoint, config: &AdaptConfig) -> Self {
        let head = checkpoint.net.head_params();
        let adam = Adam::new(config.learning_rate, &[head.weight.len(), head.bias.len()]);
        Self { head, adam }
    }
}

/// FNV-1a over the image bytes; seeds per-image randomness so results do not
/// depend on stream position.
pub fn image_seed(image: &Tensor) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in image.data() {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Inlier probabilities, raw scores, calibrated scores and calibration.
type Finished = (Tensor<f64>, Vec<f64>, Vec<f64>, CalibrationParams);

fn finish(
    features: &Tensor,
    head: &HeadParams,
    config: &AdaptConfig,
    seed: u64,
) -> Result<Finished> {
    let logits = forward_head(features, head)?;
    let scores = ood::score(&logits, config.score_kind).scores;
    let cal = calibrate_image(&scores, config.calib_mode, seed, &config.gmm)?;
    Ok((softmax_per_pixel(&logits), scores, cal.gbar, cal.params))
}

/// Adapt to one image, reading and updating `state`.
///
/// A non-finite loss or gradient leaves `state` untouched and returns the
/// frozen model's outputs with `diagnostic` set.
pub fn adapt_with_state(
    checkpoint: &ModelCheckpoint,
    image: &Tensor,
    config: &AdaptConfig,
    state: &mut AdaptState,
) -> Result<AdaptResult> {
    config.validate()?;
    let net = &checkpoint.net;
    let seed = image_seed(image);
    let train_stats = net.train_stats();
    let (train_features, observed) = net.forward_backbone(image, &train_stats)?;
    let domain = estimate_domain_shift(&observed, &train_stats, &checkpoint.calibration())?;
    let bn_weight = match config.effective_bn_mode() {
        BnMode::TrainOnly => 0.0,
        BnMode::BatchOnly => 1.0,
        BnMode::Selective => domain.probability,
    };
    let features = if bn_weight == 0.0 {
        train_features.clone()
    } else {
        // Each layer mixes with the statistics of its own input under the
        // already-adapted layers below it.
        let (features, _) = net.forward_backbone_adaptive(image, |l, seen| {
            let mixed =
                mix_bn_statistics(&train_stats[l..=l], std::slice::from_ref(seen), bn_weight)?;
            Ok(mixed
                .into_iter()
                .next()
                .expect("one layer in, one layer out"))
        })?;
        features
    };

    let mut head = state.head.clone();
    let mut adam = state.adam.clone();
    let mut loss_trace = Vec::new();
    let mut pseudo_label_stats = None;
    let mut diagnostic = None;
    if config.use_ast {
        for _ in 0..config.iterations {
            let logits = forward_head(&features, &head)?;
            let out = match config.entropy_mode {
                EntropyMode::AnomalyAware => {
                    let scores = ood::score(&logits, config.score_kind).scores;
                    let cal = calibrate_image(&scores, config.calib_mode, seed, &config.gmm)?;
                    let labels = build_pseudo_labels(
                        &cal.gbar,
                        config.tau1,
                        config.tau2,
                        config.class_weight,
                    );
                    pseudo_label_stats = Some(labels.stats());
                    if labels.is_empty() {
                        loss_trace.push(0.0);
                        continue;
                    }
                    anomaly_entropy_loss(&logits, config.score_kind, &cal.params, &labels)?
                }
                EntropyMode::SeenOnly => seen_only_entropy_loss(&logits)?,
            };
            loss_trace.push(out.loss);
            if !out.loss.is_finite() || !out.dlogits.all_finite() {
                diagnostic = Some(format!("non-finite adaptation loss {}", out.loss));
                break;
            }
            let g = head_gradient(&features, &head, &out.dlogits)?;
            adam.step(
                &mut [&mut head.weight, &mut head.bias],
                &[&g.weight, &g.bias],
            );
        }
    }

    if diagnostic.is_some() {
        let frozen = checkpoint.net.head_params();
        let (inlier_probs, scores, gbar, calibration) =
            finish(&train_features, &frozen, config, seed)?;
        return Ok(AdaptResult {
            inlier_probs,
            scores,
            gbar,
            calibration,
            domain,
            bn_weight: 0.0,
            loss_trace,
            pseudo_label_stats,
            diagnostic,
        });
    }
    let (inlier_probs, scores, gbar, calibration) = finish(&features, &head, config, seed)?;
    state.head = head;
    state.adam = adam;
    Ok(AdaptResult {
        inlier_probs,
        scores,
        gbar,
        calibration,
        domain,
        bn_weight,
        loss_trace,
        pseudo_label_stats,
        diagnostic,
    })
}

/// Episodic adaptation: always starts from the checkpoint's parameters.
pub fn adapt_image(
    checkpoint: &ModelCheckpoint,
    image: &Tensor,
    config: &AdaptConfig,
) -> Result<AdaptResult> {
    let mut state = AdaptState::fresh(checkpoint, config);
    adapt_with_state(checkpoint, image, config, &mut state)
}

/// Adapt a stream. Episodic streams are processed in parallel; continue mode
/// carries the head and optimizer state from one image to the next.
pub fn adapt_stream(
    checkpoint: &ModelCheckpoint,
    images: &[&Tensor],
    config: &AdaptConfig,
) -> Vec<Result<AdaptResult>> {
    match config.stream_mode {
        StreamMode::Episodic => images
            .par_iter()
            .map(|img| adapt_image(checkpoint, img, config))
            .collect(),
        StreamMode::Continue => {
            let mut state = AdaptState::fresh(checkpoint, config);
            images
                .iter()
                .map(|img| adapt_with_state(checkpoint, img, config, &mut state))
                .collect()
        }
    }
}

/// Frozen-model outputs (training BN statistics, checkpoint head).
pub fn frozen_inference(
    checkpoint: &ModelCheckpoint,
    image: &Tensor,
    kind: ScoreKind,
) -> Result<(Tensor<f64>, Vec<f64>)> {
    let net = &checkpoint.net;
    let (features, _) = net.forward_backbone(image, &net.train_stats())?;
    let logits = forward_head(&features, &net.head_params())?;
    Ok((softmax_per_pixel(&logits), ood::score(&logits, kind).scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::Fallback;
    use crate::nn::HeadGradient;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logits(classes: usize, values: Vec<f64>) -> Tensor<f64> {
        let d = values.len() / classes;
        Tensor::new(vec![classes, 1, d], values).unwrap()
    }

    fn labels(region: Vec<bool>, target: Vec<bool>, lambda: f64) -> PseudoLabels {
        PseudoLabels {
            region,
            target,
            lambda,
            tau1: 0.3,
            tau2: 0.6,
        }
    }

    #[test]
    fn pseudo_label_spot_values() {
        let p = build_pseudo_labels(&[0.1, 0.5, 0.9], 0.3, 0.6, ClassWeight::Auto);
        assert_eq!(p.region, vec![true, false, true]);
        assert_eq!((p.target[0], p.target[2]), (false, true));
        assert_eq!(p.lambda, 1.0);

        let mut g = vec![0.1; 90];
        g.extend([0.9; 10]);
        assert_eq!(
            build_pseudo_labels(&g, 0.3, 0.6, ClassWeight::Auto).lambda,
            9.0
        );
        assert_eq!(
            build_pseudo_labels(&g, 0.3, 0.6, ClassWeight::One).lambda,
            1.0
        );
        // Outlier-dominant images keep lambda at 1.
        let g = [0.9, 0.9, 0.9, 0.1];
        assert_eq!(
            build_pseudo_labels(&g, 0.3, 0.6, ClassWeight::Auto).lambda,
            1.0
        );
        assert!(build_pseudo_labels(&[0.4, 0.5], 0.3, 0.6, ClassWeight::Auto).is_empty());
    }

    fn params(a_x: f64, b_x: f64) -> CalibrationParams {
        CalibrationParams {
            a_x,
            b_x,
            fallback_used: Fallback::None,
        }
    }

    #[test]
    fn anomaly_loss_closed_forms() {
        // Empty region.
        let z = logits(4, vec![0.3, -1.0, 2.0, 0.5]);
        let out = anomaly_entropy_loss(
            &z,
            ScoreKind::Energy,
            &params(0.0, 1.0),
            &labels(vec![false], vec![false], 1.0),
        )
        .unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.dlogits.data().iter().all(|&g| g == 0.0));

        // Uniform F, outlier probability ~0 (a far to the right): ln 4.
        let z = logits(4, vec![0.0; 4]);
        let out = anomaly_entropy_loss(
            &z,
            ScoreKind::Energy,
            &params(1e6, 1.0),
            &labels(vec![true], vec![false], 1.0),
        )
        .unwrap();
        assert!((out.loss - 4.0f64.ln()).abs() < 1e-9);

        // G = 0.5 exactly when the score sits at a: -ln 0.5.
        let energy = -(4.0f64).ln();
        let out = anomaly_entropy_loss(
            &z,
            ScoreKind::Energy,
            &params(energy, 1.0),
            &labels(vec![true], vec![true], 1.0),
        )
        .unwrap();
        assert!((out.loss - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn seen_only_closed_forms() {
        let out = seen_only_entropy_loss(&logits(4, vec![0.0; 12])).unwrap();
        assert!((out.loss - 3.0 * 4.0f64.ln()).abs() < 1e-12);
        let out = seen_only_entropy_loss(&logits(2, vec![800.0, -800.0])).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    fn random_instance(seed: u64, k: usize, c: usize, d: usize) -> (Tensor, HeadParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats: Vec<f32> = (0..k * d).map(|_| rng.random_range(0.0..1.5)).collect();
        let mut head = HeadParams::zeros(k, c);
        head.weight
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-1.0..1.0));
        head.bias
            .iter_mut()
            .for_each(|b| *b = rng.random_range(-0.5..0.5));
        let side = (d as f64).sqrt() as usize;
        (Tensor::new(vec![k, side, side], feats).unwrap(), head)
    }

    fn fd_check(head: &HeadParams, grad: &HeadGradient, loss: impl Fn(&HeadParams) -> f64) -> f64 {
        let step = 1e-3;
        let mut worst: f64 = 0.0;
        let analytic: Vec<f64> = grad.weight.iter().chain(&grad.bias).copied().collect();
        let nw = head.weight.len();
        for (idx, &an) in analytic.iter().enumerate() {
            let mut up = head.clone();
            let mut down = head.clone();
            if idx < nw {
                up.weight[idx] += step;
                down.weight[idx] -= step;
            } else {
                up.bias[idx - nw] += step;
                down.bias[idx - nw] -= step;
            }
            let fd = (loss(&up) - loss(&down)) / (2.0 * step);
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn anomaly_loss_gradient_matches_finite_differences() {
        for kind in [ScoreKind::Energy, ScoreKind::MaxLogit] {
            for seed in 0..5 {
                let (feats, head) = random_instance(seed, 6, 4, 64);
                let z = forward_head(&feats, &head).unwrap();
                let scores = ood::score(&z, kind).scores;
                let (m, s) = crate::calibration::mean_std(&scores);
                let p = params(m + 0.3 * s, s);
                let gbar = crate::calibration::platt_calibrate(&scores, &p);
                let pl = build_pseudo_labels(&gbar, 0.3, 0.6, ClassWeight::Auto);
                let out = anomaly_entropy_loss(&z, kind, &p, &pl).unwrap();
                let g = head_gradient(&feats, &head, &out.dlogits).unwrap();
                let worst = fd_check(&head, &g, |h| {
                    let z = forward_head(&feats, h).unwrap();
                    anomaly_entropy_loss(&z, kind, &p, &pl).unwrap().loss
                });
                assert!(worst < 1e-4, "{kind:?} seed {seed}: {worst}");
            }
        }
    }

    #[test]
    fn seen_only_gradient_matches_finite_differences() {
        let (feats, head) = random_instance(3, 5, 4, 16);
        let out = seen_only_entropy_loss(&forward_head(&feats, &head).unwrap()).unwrap();
        let g = head_gradient(&feats, &head, &out.dlogits).unwrap();
        let worst = fd_check(&head, &g, |h| {
            seen_only_entropy_loss(&forward_head(&feats, h).unwrap())
                .unwrap()
                .loss
        });
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn config_validation() {
        assert!(AdaptConfig::default().validate().is_ok());
        let bad = AdaptConfig {
            tau1: 0.7,
            ..AdaptConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AdaptConfig {
            iterations: 0,
            ..AdaptConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(
            AdaptConfig::identity().effective_bn_mode(),
            BnMode::TrainOnly
        );
    }
}
