//! Independent oracles and fixtures shared by the integration tests.

#![allow(dead_code)]

use atta_core::adapt::{
    anomaly_entropy_loss, build_pseudo_labels, seen_only_entropy_loss, ClassWeight,
};
use atta_core::calibration::{calibrate_image, fit_gmm_1d, CalibMode, GmmFit, GmmOptions};
use atta_core::checkpoint::ModelCheckpoint;
use atta_core::dataset::{generate_dataset, Dataset, DatasetSpec};
use atta_core::metrics::ScoredPixels;
use atta_core::nn::{forward_head, head_gradient, Architecture, HeadParams};
use atta_core::ood::{self, ScoreKind};
use atta_core::train::{train, TrainConfig};
use atta_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Random labelled scores with at least one pixel of each class; about half
/// the instances draw from a handful of values so ties are common.
pub fn random_metric_instance(rng: &mut ChaCha8Rng) -> ScoredPixels {
    let n = rng.random_range(2..=100);
    let tied = rng.random_bool(0.5);
    let mut scores: Vec<f64> = (0..n)
        .map(|_| {
            if tied {
                rng.random_range(0..5) as f64 * 0.25
            } else {
                rng.random_range(-3.0..3.0)
            }
        })
        .collect();
    let mut is_ood: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
    is_ood[0] = true;
    is_ood[1] = false;
    // Shift positives a little so AUROC is not always near one half.
    for (s, &o) in scores.iter_mut().zip(&is_ood) {
        if o && !tied {
            *s += 0.5;
        }
    }
    ScoredPixels::new(scores, is_ood).unwrap()
}

/// All pairs: a positive scoring above a negative counts 1, a tie 1/2.
pub fn brute_auroc(sp: &ScoredPixels) -> f64 {
    let mut twice: u64 = 0;
    let (mut p, mut n) = (0u64, 0u64);
    for (i, &oi) in sp.is_ood.iter().enumerate() {
        if oi {
            p += 1;
        } else {
            n += 1;
        }
        if !oi {
            continue;
        }
        for (j, &oj) in sp.is_ood.iter().enumerate() {
            if oj {
                continue;
            }
            if sp.scores[i] > sp.scores[j] {
                twice += 2;
            } else if sp.scores[i] == sp.scores[j] {
                twice += 1;
            }
        }
    }
    twice as f64 / (2 * p * n) as f64
}

fn distinct_thresholds_desc(sp: &ScoredPixels) -> Vec<f64> {
    let mut t = sp.scores.clone();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

/// `(tp, fp)` when predicting OOD for every score `>= t`.
fn counts_at(sp: &ScoredPixels, t: f64) -> (u64, u64) {
    let mut tp = 0;
    let mut fp = 0;
    for (&s, &o) in sp.scores.iter().zip(&sp.is_ood) {
        if s >= t {
            if o {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    (tp, fp)
}

pub fn brute_ap(sp: &ScoredPixels) -> f64 {
    let p = sp.is_ood.iter().filter(|&&o| o).count() as u64;
    let mut prev_tp = 0;
    let mut ap = 0.0;
    for t in distinct_thresholds_desc(sp) {
        let (tp, fp) = counts_at(sp, t);
        if tp > prev_tp {
            ap += ((tp - prev_tp) as f64 / p as f64) * (tp as f64 / (tp + fp) as f64);
        }
        prev_tp = tp;
    }
    ap
}

pub fn brute_fpr95(sp: &ScoredPixels) -> f64 {
    let p = sp.is_ood.iter().filter(|&&o| o).count() as u64;
    let n = sp.is_ood.len() as u64 - p;
    distinct_thresholds_desc(sp)
        .into_iter()
        .map(|t| counts_at(sp, t))
        .filter(|&(tp, _)| 20 * tp >= 19 * p)
        .map(|(_, fp)| fp as f64 / n as f64)
        .fold(f64::INFINITY, f64::min)
}

/// `n` samples, half from each of `N(-2, 0.3^2)` and `N(2, 0.3^2)`.
pub fn bimodal_samples(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Normal::new(-2.0, 0.3).unwrap();
    let b = Normal::new(2.0, 0.3).unwrap();
    (0..n)
        .map(|i| {
            if i % 2 == 0 {
                a.sample(&mut rng)
            } else {
                b.sample(&mut rng)
            }
        })
        .collect()
}

/// Fit a random two-component mixture sample; `None` unless the fit
/// converged without collapsing.
pub fn random_converged_fit(rng: &mut ChaCha8Rng) -> Option<GmmFit> {
    let mu1 = rng.random_range(-3.0..0.0);
    let mu2 = mu1 + rng.random_range(1.5..5.0);
    let s1 = rng.random_range(0.2..1.0);
    let s2 = rng.random_range(0.2..1.0);
    let w = rng.random_range(0.2..0.8);
    let n = rng.random_range(300..2000);
    let c1 = Normal::new(mu1, s1).unwrap();
    let c2 = Normal::new(mu2, s2).unwrap();
    let xs: Vec<f64> = (0..n)
        .map(|_| {
            if rng.random_bool(w) {
                c1.sample(rng)
            } else {
                c2.sample(rng)
            }
        })
        .collect();
    let fit = fit_gmm_1d(&xs, &GmmOptions::default()).ok()?;
    (fit.converged && !fit.collapsed).then_some(fit)
}

/// Random features `[k, side, side]` in `[0, 1.5)` and a random head.
pub fn random_head_instance(seed: u64, k: usize, c: usize, side: usize) -> (Tensor, HeadParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feats: Vec<f32> = (0..k * side * side)
        .map(|_| rng.random_range(0.0..1.5))
        .collect();
    let mut head = HeadParams::zeros(k, c);
    head.weight
        .iter_mut()
        .for_each(|w| *w = rng.random_range(-1.0..1.0));
    head.bias
        .iter_mut()
        .for_each(|b| *b = rng.random_range(-0.5..0.5));
    (Tensor::new(vec![k, side, side], feats).unwrap(), head)
}

/// Worst relative error between the analytic head gradient and central
/// differences of `loss`.
pub fn worst_fd_error(
    head: &HeadParams,
    analytic: &[f64],
    loss: impl Fn(&HeadParams) -> f64,
) -> f64 {
    let step = 1e-5;
    let nw = head.weight.len();
    let mut worst: f64 = 0.0;
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
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
    }
    worst
}

/// Gradient check of the anomaly-aware loss on one seeded instance, with
/// the calibration frozen at the instance's initial scores.
pub fn anomaly_gradient_error(seed: u64, kind: ScoreKind) -> f64 {
    let (feats, head) = random_head_instance(seed, 8, 4, 8);
    let z = forward_head(&feats, &head).unwrap();
    let scores = ood::score(&z, kind).scores;
    let cal = calibrate_image(&scores, CalibMode::Zscore, seed, &GmmOptions::default()).unwrap();
    let labels = build_pseudo_labels(&cal.gbar, 0.3, 0.6, ClassWeight::Auto);
    assert!(!labels.is_empty());
    let out = anomaly_entropy_loss(&z, kind, &cal.params, &labels).unwrap();
    let g = head_gradient(&feats, &head, &out.dlogits).unwrap();
    let analytic: Vec<f64> = g.weight.iter().chain(&g.bias).copied().collect();
    worst_fd_error(&head, &analytic, |h| {
        let z = forward_head(&feats, h).unwrap();
        anomaly_entropy_loss(&z, kind, &cal.params, &labels)
            .unwrap()
            .loss
    })
}

pub fn seen_only_gradient_error(seed: u64) -> f64 {
    let (feats, head) = random_head_instance(seed, 8, 4, 8);
    let out = seen_only_entropy_loss(&forward_head(&feats, &head).unwrap()).unwrap();
    let g = head_gradient(&feats, &head, &out.dlogits).unwrap();
    let analytic: Vec<f64> = g.weight.iter().chain(&g.bias).copied().collect();
    worst_fd_error(&head, &analytic, |h| {
        seen_only_entropy_loss(&forward_head(&feats, h).unwrap())
            .unwrap()
            .loss
    })
}

/// Small dataset and a briefly trained checkpoint for contract tests.
pub fn small_fixture() -> (Dataset, ModelCheckpoint) {
    let spec = DatasetSpec {
        width: 24,
        height: 24,
        n_train: 24,
        n_test: 6,
        seed: 3,
        ..DatasetSpec::default()
    };
    let ds = generate_dataset(&spec).unwrap();
    let config = TrainConfig {
        epochs: 3,
        seed: 3,
        ..TrainConfig::default()
    };
    let out = train(&ds.train, &Architecture::default(), &config).unwrap();
    (ds, out.checkpoint)
}
