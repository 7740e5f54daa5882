//! Per-image calibration of OOD scores into outlier probabilities: a
//! two-component 1-D Gaussian mixture locates the inlier/outlier crossing,
//! which becomes the shift of a Platt-style sigmoid.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selective_bn::sigmoid;

pub const MIN_GMM_SAMPLES: usize = 50;
/// Smallest Platt scale used when an image's scores are all equal.
pub const PLATT_SCALE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmOptions {
    pub bins: usize,
    pub smoothing_window: usize,
    pub max_iter: usize,
    /// Stop once the mean log-likelihood improves by less than this.
    pub tol: f64,
    pub subsample_cap: usize,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            bins: 50,
            smoothing_window: 3,
            max_iter: 100,
            tol: 1e-6,
            subsample_cap: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub pi1: f64,
    pub pi2: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    /// Mean per-sample log-likelihood at the returned parameters.
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub collapsed: bool,
    /// Mean log-likelihood after every E-step, in order.
    pub ll_trace: Vec<f64>,
}

impl GmmFit {
    pub fn density(&self, x: f64) -> (f64, f64) {
        (
            self.pi1 * normal_pdf(x, self.mu1, self.sigma1),
            self.pi2 * normal_pdf(x, self.mu2, self.sigma2),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    #[default]
    None,
    Midpoint,
    Zscore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub a_x: f64,
    pub b_x: f64,
    pub fallback_used: Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibMode {
    #[default]
    Gmm,
    Zscore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageCalibration {
    pub gbar: Vec<f64>,
    pub params: CalibrationParams,
    pub fit: Option<GmmFit>,
}

pub fn normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

fn log_normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Initial means from the smoothed histogram: the right-most local peak and
/// the global peak.
fn peak_init(xs: &[f64], lo: f64, hi: f64, std: f64, opts: &GmmOptions) -> (f64, f64) {
    let bins = opts.bins.max(2);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0.0f64; bins];
    for &x in xs {
        let b = (((x - lo) / width) as usize).min(bins - 1);
        counts[b] += 1.0;
    }
    let half = opts.smoothing_window / 2;
    let smooth: Vec<f64> = (0..bins)
        .map(|i| {
            let a = i.saturating_sub(half);
            let b = (i + half).min(bins - 1);
            counts[a..=b].iter().sum::<f64>() / (b - a + 1) as f64
        })
        .collect();
    let center = |i: usize| lo + width * (i as f64 + 0.5);
    let global = (0..bins).fold(0, |best, i| if smooth[i] > smooth[best] { i } else { best });
    let is_peak = |i: usize| {
        smooth[i] > 0.0
            && (i == 0 || smooth[i] > smooth[i - 1])
            && (i + 1 == bins || smooth[i] >= smooth[i + 1])
    };
    let rightmost = (0..bins).rev().find(|&i| is_peak(i)).unwrap_or(global);
    if rightmost > global {
        (center(global), center(rightmost))
    } else {
        // Single dominant peak: start the second component one std to its right.
        (center(global), center(global) + std)
    }
}

pub fn fit_gmm_1d(xs: &[f64], opts: &GmmOptions) -> Result<GmmFit> {
    if xs.len() < MIN_GMM_SAMPLES {
        return Err(Error::InsufficientData {
            required: MIN_GMM_SAMPLES,
            actual: xs.len(),
        });
    }
    if let Some(x) = xs.iter().find(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite score {x}")));
    }
    let (mean, std) = mean_std(xs);
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sigma_floor = 1e-4 * std;
    if !(hi > lo) || std == 0.0 {
        return Ok(GmmFit {
            pi1: 0.5,
            pi2: 0.5,
            mu1: mean,
            mu2: mean,
            sigma1: sigma_floor,
            sigma2: sigma_floor,
            log_likelihood: f64::NAN,
            iterations: 0,
            converged: false,
            collapsed: true,
            ll_trace: Vec::new(),
        });
    }

    let (mut mu1, mut mu2) = peak_init(xs, lo, hi, std, opts);
    let (mut s1, mut s2) = (std / 2.0, std / 2.0);
    let (mut p1, mut p2) = (0.5f64, 0.5f64);
    let n = xs.len() as f64;
    let mut resp = vec![0.0f64; xs.len()];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut collapsed = false;
    let mut iterations = 0;

    loop {
        // E-step: responsibilities of component 2 and the mean log-likelihood.
        let (lp1, lp2) = (p1.ln(), p2.ln());
        let mut ll = 0.0;
        for (r, &x) in resp.iter_mut().zip(xs) {
            let a = lp1 + log_normal_pdf(x, mu1, s1);
            let b = lp2 + log_normal_pdf(x, mu2, s2);
            let m = a.max(b);
            let lse = m + ((a - m).exp() + (b - m).exp()).ln();
            *r = (b - lse).exp();
            ll += lse;
        }
        ll /= n;
        if let Some(&prev) = trace.last() {
            if ll - prev < opts.tol {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
        if iterations == opts.max_iter {
            break;
        }
        iterations += 1;

        // M-step.
        let n2: f64 = resp.iter().sum();
        let n1 = n - n2;
        p1 = n1 / n;
        p2 = n2 / n;
        if p1 < 1e-3 || p2 < 1e-3 {
            collapsed = true;
            break;
        }
        mu1 = xs
            .iter()
            .zip(&resp)
            .map(|(x, r)| (1.0 - r) * x)
            .sum::<f64>()
            / n1;
        mu2 = xs.iter().zip(&resp).map(|(x, r)| r * x).sum::<f64>() / n2;
        s1 = (xs
            .iter()
            .zip(&resp)
            .map(|(x, r)| (1.0 - r) * (x - mu1) * (x - mu1))
            .sum::<f64>()
            / n1)
            .sqrt();
        s2 = (xs
            .iter()
            .zip(&resp)
            .map(|(x, r)| r * (x - mu2) * (x - mu2))
            .sum::<f64>()
            / n2)
            .sqrt();
        if s1 < sigma_floor || s2 < sigma_floor {
            s1 = s1.max(sigma_floor);
            s2 = s2.max(sigma_floor);
            collapsed = true;
            break;
        }
    }

    let mut fit = GmmFit {
        pi1: p1,
        pi2: p2,
        mu1,
        mu2,
        sigma1: s1,
        sigma2: s2,
        log_likelihood: *trace.last().expect("at least one E-step"),
        iterations,
        converged: converged && !collapsed,
        collapsed,
        ll_trace: trace,
    };
    if fit.mu1 > fit.mu2 {
        std::mem::swap(&mut fit.pi1, &mut fit.pi2);
        std::mem::swap(&mut fit.mu1, &mut fit.mu2);
        std::mem::swap(&mut fit.sigma1, &mut fit.sigma2);
    }
    Ok(fit)
}

/// Largest score at which the two weighted component densities are equal.
///
/// Equating log-densities gives `A a^2 + B a + C = 0`. Roots outside
/// `[mu1 - 3 sigma1, mu2 + 3 sigma2]`, or no real root, fall back to the
/// midpoint of the means.
pub fn crossing_point(fit: &GmmFit) -> (f64, Fallback) {
    let (m1, m2, s1, s2) = (fit.mu1, fit.mu2, fit.sigma1, fit.sigma2);
    let v1 = s1 * s1;
    let v2 = s2 * s2;
    let a = 1.0 / (2.0 * v2) - 1.0 / (2.0 * v1);
    let b = m1 / v1 - m2 / v2;
    let c = m2 * m2 / (2.0 * v2) - m1 * m1 / (2.0 * v1) + (fit.pi1 * s2 / (fit.pi2 * s1)).ln();
    let midpoint = 0.5 * (m1 + m2);

    let scale = 1.0 / (2.0 * v1) + 1.0 / (2.0 * v2);
    let root = if a.abs() <= 1e-12 * scale {
        if b == 0.0 {
            None
        } else {
            Some(-c / b)
        }
    } else {
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            None
        } else {
            let q = -0.5 * (b + b.signum() * disc.sqrt());
            let r1 = q / a;
            let r2 = if q != 0.0 { c / q } else { r1 };
            Some(r1.max(r2))
        }
    };
    let Some(mut x) = root.filter(|r| r.is_finite()) else {
        return (midpoint, Fallback::Midpoint);
    };
    // Polish on the quadratic to squeeze out cancellation error.
    for _ in 0..2 {
        let f = (a * x + b) * x + c;
        let df = 2.0 * a * x + b;
        if df != 0.0 {
            x -= f / df;
        }
    }
    if x < m1 - 3.0 * s1 || x > m2 + 3.0 * s2 {
        return (midpoint, Fallback::Midpoint);
    }
    (x, Fallback::None)
}

/// `sigmoid((G_i - a_x) / b_x)` per pixel.
pub fn platt_calibrate(scores: &[f64], params: &CalibrationParams) -> Vec<f64> {
    scores
        .iter()
        .map(|&g| sigmoid((g - params.a_x) / params.b_x))
        .collect()
}

/// Seeded uniform subsample without replacement, order-preserving.
fn subsample(scores: &[f64], cap: usize, seed: u64) -> Vec<f64> {
    if scores.len() <= cap {
        return scores.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, scores.len(), cap).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| scores[i]).collect()
}

pub fn calibrate_image(
    scores: &[f64],
    mode: CalibMode,
    seed: u64,
    opts: &GmmOptions,
) -> Result<ImageCalibration> {
    if scores.len() < MIN_GMM_SAMPLES {
        return Err(Error::InsufficientData {
            required: MIN_GMM_SAMPLES,
            actual: scores.len(),
        });
    }
    let (mean, std) = mean_std(scores);
    let b_x = std.max(PLATT_SCALE_FLOOR);
    let zscore = CalibrationParams {
        a_x: mean,
        b_x,
        fallback_used: Fallback::None,
    };
    let (params, fit) = match mode {
        CalibMode::Zscore => (zscore, None),
        CalibMode::Gmm => {
            let sample = subsample(scores, opts.subsample_cap, seed);
            let fit = fit_gmm_1d(&sample, opts)?;
            let params = if fit.collapsed {
                CalibrationParams {
                    fallback_used: Fallback::Zscore,
                    ..zscore
                }
            } else {
                let (a_x, fallback_used) = crossing_point(&fit);
                CalibrationParams {
                    a_x,
                    b_x,
                    fallback_used,
                }
            };
            (params, Some(fit))
        }
    };
    Ok(ImageCalibration {
        gbar: platt_calibrate(scores, &params),
        params,
        fit,
    })
}
