//! Domain-shift detection from BN feature statistics, and probability-weighted
//! mixing of training and test-image normalization statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::BnStats;

/// Floor applied to a test-image channel std before it enters a KL term or
/// the mixed statistics.
pub const TEST_SIGMA_FLOOR: f64 = 1e-6;

/// How per-channel KL terms are reduced within one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlReduction {
    #[default]
    Mean,
    Sum,
}

/// Parameters `(a, b)` of the detector `sigmoid((kl_sum + a) / b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainCalibration {
    pub a: f64,
    pub b: f64,
    #[serde(default)]
    pub reduction: KlReduction,
}

impl Default for DomainCalibration {
    fn default() -> Self {
        Self {
            a: 0.0,
            b: 1.0,
            reduction: KlReduction::Mean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainShiftEstimate {
    pub kl_sum: f64,
    /// `P(z = 1 | x)`: probability that the image comes from a shifted domain.
    pub probability: f64,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `KL(N(mu1, sigma1^2) || N(mu2, sigma2^2))`.
pub fn gaussian_kl(mu1: f64, sigma1: f64, mu2: f64, sigma2: f64) -> Result<f64> {
    if !(sigma1 > 0.0) || !(sigma2 > 0.0) {
        return Err(Error::InvalidInput(format!(
            "KL needs positive standard deviations, got {sigma1} and {sigma2}"
        )));
    }
    let d = mu1 - mu2;
    let kl = (sigma2 / sigma1).ln() + (sigma1 * sigma1 + d * d) / (2.0 * sigma2 * sigma2) - 0.5;
    Ok(kl.max(0.0))
}

fn check_shapes(a: &[BnStats], b: &[BnStats]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "{} vs {} BN layers",
            a.len(),
            b.len()
        )));
    }
    for (l, (x, y)) in a.iter().zip(b).enumerate() {
        if x.mean.len() != y.mean.len() || x.std.len() != y.std.len() || x.mean.len() != x.std.len()
        {
            return Err(Error::Shape(format!("layer {l}: channel counts differ")));
        }
    }
    Ok(())
}

/// Sum over layers of the per-layer (mean-reduced) channel KL between the
/// image's statistics and the training statistics.
pub fn kl_sum(batch_stats: &[BnStats], train_stats: &[BnStats]) -> Result<f64> {
    kl_sum_with(batch_stats, train_stats, KlReduction::Mean)
}

pub fn kl_sum_with(
    batch_stats: &[BnStats],
    train_stats: &[BnStats],
    reduction: KlReduction,
) -> Result<f64> {
    check_shapes(batch_stats, train_stats)?;
    let mut total = 0.0;
    for (batch, train) in batch_stats.iter().zip(train_stats) {
        let mut layer = 0.0;
        for c in 0..batch.channels() {
            layer += gaussian_kl(
                batch.mean[c],
                batch.std[c].max(TEST_SIGMA_FLOOR),
                train.mean[c],
                train.std[c],
            )?;
        }
        total += match reduction {
            KlReduction::Mean => layer / batch.channels().max(1) as f64,
            KlReduction::Sum => layer,
        };
    }
    Ok(total)
}

pub fn domain_shift_probability(kl_sum: f64, calibration: &DomainCalibration) -> f64 {
    sigmoid((kl_sum + calibration.a) / calibration.b)
}

pub fn estimate_domain_shift(
    batch_stats: &[BnStats],
    train_stats: &[BnStats],
    calibration: &DomainCalibration,
) -> Result<DomainShiftEstimate> {
    let kl = kl_sum_with(batch_stats, train_stats, calibration.reduction)?;
    Ok(DomainShiftEstimate {
        kl_sum: kl,
        probability: domain_shift_probability(kl, calibration),
    })
}

/// Mix training and image statistics with weight `p` on the image:
/// means mix linearly, standard deviations mix in variance space.
///
/// Written as `train + p * (image - train)` so equal inputs come back
/// bit-for-bit; `p = 0` and `p = 1` return exact copies.
pub fn mix_bn_statistics(
    train_stats: &[BnStats],
    batch_stats: &[BnStats],
    p: f64,
) -> Result<Vec<BnStats>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidInput(format!(
            "mixing probability {p} outside [0, 1]"
        )));
    }
    check_shapes(batch_stats, train_stats)?;
    if p == 0.0 {
        return Ok(train_stats.to_vec());
    }
    let floored = |s: &BnStats| BnStats {
        mean: s.mean.clone(),
        std: s.std.iter().map(|&v| v.max(TEST_SIGMA_FLOOR)).collect(),
    };
    if p == 1.0 {
        return Ok(batch_stats.iter().map(floored).collect());
    }
    Ok(train_stats
        .iter()
        .zip(batch_stats)
        .map(|(train, batch)| {
            let batch = floored(batch);
            let mean = train
                .mean
                .iter()
                .zip(&batch.mean)
                .map(|(&mt, &mb)| mt + p * (mb - mt))
                .collect();
            let std = train
                .std
                .iter()
                .zip(&batch.std)
                .map(|(&st, &sb)| {
                    let vt = st * st;
                    (vt + p * (sb * sb - vt)).sqrt()
                })
                .collect();
            BnStats { mean, std }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stats(mean: Vec<f64>, std: Vec<f64>) -> BnStats {
        BnStats { mean, std }
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(gaussian_kl(0.0, 1.0, 0.0, 1.0).unwrap(), 0.0);
        assert!((gaussian_kl(1.0, 1.0, 0.0, 1.0).unwrap() - 0.5).abs() < 1e-12);
        let expected = 2.0 - 0.5 - 2.0f64.ln();
        assert!((gaussian_kl(0.0, 2.0, 0.0, 1.0).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.8069).abs() < 1e-4);
        assert!(gaussian_kl(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(gaussian_kl(0.0, 1.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn kl_sum_averages_channels_and_sums_layers() {
        let train = vec![
            stats(vec![0.0, 0.0], vec![1.0, 1.0]),
            stats(vec![0.5], vec![2.0]),
        ];
        assert_eq!(kl_sum(&train, &train).unwrap(), 0.0);
        // Channel KLs 0.5 and 1.5 (means 1 and sqrt(3) away, unit variance).
        let batch = vec![
            stats(vec![1.0, 3.0f64.sqrt()], vec![1.0, 1.0]),
            train[1].clone(),
        ];
        assert!((kl_sum(&batch, &train).unwrap() - 1.0).abs() < 1e-12);
        assert!((kl_sum_with(&batch, &train, KlReduction::Sum).unwrap() - 2.0).abs() < 1e-12);
        assert!(kl_sum(&batch[..1], &train).is_err());
    }

    #[test]
    fn kl_sum_grows_as_a_mean_moves_away() {
        let train = vec![
            stats(vec![0.2, -0.1], vec![0.7, 1.3]),
            stats(vec![1.0], vec![0.5]),
        ];
        let mut last = -1.0;
        for step in 0..40 {
            let mut batch = train.clone();
            batch[0].mean[1] = -0.1 + 0.05 * step as f64;
            let v = kl_sum(&batch, &train).unwrap();
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn zero_test_sigma_is_floored() {
        let train = vec![stats(vec![0.0], vec![1.0])];
        let batch = vec![stats(vec![0.0], vec![0.0])];
        assert!(kl_sum(&batch, &train).unwrap().is_finite());
        let mixed = mix_bn_statistics(&train, &batch, 1.0).unwrap();
        assert_eq!(mixed[0].std[0], TEST_SIGMA_FLOOR);
    }

    #[test]
    fn detector_spot_values() {
        let cal = DomainCalibration {
            a: -2.0,
            b: 0.5,
            reduction: KlReduction::Mean,
        };
        assert_eq!(domain_shift_probability(2.0, &cal), 0.5);
        assert!((domain_shift_probability(2.5, &cal) - 0.731_058_578_6).abs() < 1e-9);
        assert!(domain_shift_probability(2.6, &cal) > domain_shift_probability(2.5, &cal));
    }

    #[test]
    fn mixing_boundaries_and_midpoint() {
        let train = vec![stats(vec![0.0], vec![1.0])];
        let batch = vec![stats(vec![2.0], vec![3.0])];
        assert_eq!(mix_bn_statistics(&train, &batch, 0.0).unwrap(), train);
        assert_eq!(mix_bn_statistics(&train, &batch, 1.0).unwrap(), batch);
        let half = mix_bn_statistics(&train, &batch, 0.5).unwrap();
        assert!((half[0].mean[0] - 1.0).abs() < 1e-12);
        assert!((half[0].std[0] - 5.0f64.sqrt()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn mixing_is_convex(mt in -3.0f64..3.0, mb in -3.0f64..3.0, st in 0.01f64..4.0, sb in 0.01f64..4.0, p in 0.0f64..=1.0) {
            let train = vec![stats(vec![mt], vec![st])];
            let batch = vec![stats(vec![mb], vec![sb])];
            let m = &mix_bn_statistics(&train, &batch, p).unwrap()[0];
            prop_assert!(m.mean[0] >= mt.min(mb) - 1e-12 && m.mean[0] <= mt.max(mb) + 1e-12);
            let v = m.std[0] * m.std[0];
            prop_assert!(v >= (st * st).min(sb * sb) * (1.0 - 1e-12) && v <= (st * st).max(sb * sb) * (1.0 + 1e-12));
            prop_assert!(m.std[0] > 0.0);
        }

        #[test]
        fn identical_stats_survive_mixing_bitwise(mt in -3.0f64..3.0, st in 0.01f64..4.0, p in 0.0f64..=1.0) {
            let train = vec![stats(vec![mt], vec![st])];
            prop_assert_eq!(mix_bn_statistics(&train, &train, p).unwrap(), train);
        }

        #[test]
        fn kl_is_nonnegative(m1 in -5.0f64..5.0, s1 in 0.01f64..5.0, m2 in -5.0f64..5.0, s2 in 0.01f64..5.0) {
            prop_assert!(gaussian_kl(m1, s1, m2, s2).unwrap() >= 0.0);
        }
    }
}
