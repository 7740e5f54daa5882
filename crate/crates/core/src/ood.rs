//! Per-pixel OOD scores derived from the classifier logits, and the
//! anomaly-aware (C+1)-way output distribution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Negative free energy, `-log sum_c exp(logit_c)`.
    #[default]
    Energy,
    /// Negated largest logit.
    MaxLogit,
}

impl ScoreKind {
    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Energy => "energy",
            ScoreKind::MaxLogit => "max_logit",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "energy" => Ok(ScoreKind::Energy),
            "max_logit" | "maxlogit" => Ok(ScoreKind::MaxLogit),
            other => Err(Error::Config(format!("unknown score kind {other:?}"))),
        }
    }
}

/// Outlier scores, one per pixel; higher means more anomalous.
#[derive(Debug, Clone, PartialEq)]
pub struct OodScoreMap {
    pub kind: ScoreKind,
    pub scores: Vec<f64>,
}

impl OodScoreMap {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

pub fn score(logits: &Tensor<f64>, kind: ScoreKind) -> OodScoreMap {
    match kind {
        ScoreKind::Energy => energy_score(logits),
        ScoreKind::MaxLogit => max_logit_score(logits),
    }
}

/// `G_i = -log sum_c exp(logit_{c,i})`, evaluated with max subtraction.
pub fn energy_score(logits: &Tensor<f64>) -> OodScoreMap {
    let classes = logits.channels();
    let d = logits.pixels();
    let z = logits.data();
    let scores = (0..d)
        .map(|i| {
            let max = (0..classes)
                .map(|c| z[c * d + i])
                .fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..classes).map(|c| (z[c * d + i] - max).exp()).sum();
            -(max + sum.ln())
        })
        .collect();
    OodScoreMap {
        kind: ScoreKind::Energy,
        scores,
    }
}

/// `G_i = -max_c logit_{c,i}`.
pub fn max_logit_score(logits: &Tensor<f64>) -> OodScoreMap {
    let classes = logits.channels();
    let d = logits.pixels();
    let z = logits.data();
    let scores = (0..d)
        .map(|i| {
            -(0..classes)
                .map(|c| z[c * d + i])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    OodScoreMap {
        kind: ScoreKind::MaxLogit,
        scores,
    }
}

/// 1-based predicted seen-class label per pixel (first maximum wins).
pub fn argmax_labels(logits: &Tensor<f64>) -> Vec<u8> {
    let classes = logits.channels();
    let d = logits.pixels();
    let z = logits.data();
    (0..d)
        .map(|i| {
            let mut best = 0;
            for c in 1..classes {
                if z[c * d + i] > z[best * d + i] {
                    best = c;
                }
            }
            best as u8 + 1
        })
        .collect()
}

/// `(C+1) x d` distribution: seen classes scaled by `1 - outlier`, outlier
/// probability appended as the last class.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyAwareDistribution {
    pub probs: Tensor<f64>,
}

pub fn anomaly_aware_distribution(
    inlier_probs: &Tensor<f64>,
    outlier_prob: &[f64],
) -> Result<AnomalyAwareDistribution> {
    let classes = inlier_probs.channels();
    let d = inlier_probs.pixels();
    if outlier_prob.len() != d {
        return Err(Error::Shape(format!(
            "{} outlier probabilities for {d} pixels",
            outlier_prob.len()
        )));
    }
    if let Some(p) = outlier_prob.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidInput(format!(
            "outlier probability {p} outside [0, 1]"
        )));
    }
    let f = inlier_probs.data();
    let mut out = vec![0.0; (classes + 1) * d];
    for c in 0..classes {
        for i in 0..d {
            out[c * d + i] = f[c * d + i] * (1.0 - outlier_prob[i]);
        }
    }
    out[classes * d..].copy_from_slice(outlier_prob);
    let mut shape = inlier_probs.shape().to_vec();
    shape[0] = classes + 1;
    Ok(AnomalyAwareDistribution {
        probs: Tensor::new(shape, out)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::softmax_per_pixel;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logits(classes: usize, values: Vec<f64>) -> Tensor<f64> {
        let d = values.len() / classes;
        Tensor::new(vec![classes, 1, d], values).unwrap()
    }

    #[test]
    fn energy_closed_forms() {
        let g = energy_score(&logits(2, vec![0.0, 0.0]));
        assert!((g.scores[0] + 2.0f64.ln()).abs() < 1e-12);
        // One dominant logit: G -> -M.
        let g = energy_score(&logits(3, vec![50.0, -40.0, -45.0]));
        assert!((g.scores[0] + 50.0).abs() < 1e-12);
    }

    #[test]
    fn max_logit_spot_value_and_brute_force() {
        assert_eq!(
            max_logit_score(&logits(3, vec![3.0, 1.0, -2.0])).scores,
            vec![-3.0]
        );
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (c, d) = (5, 37);
        let z: Vec<f64> = (0..c * d).map(|_| rng.random_range(-4.0..4.0)).collect();
        let t = Tensor::new(vec![c, 1, d], z.clone()).unwrap();
        let g = max_logit_score(&t);
        for i in 0..d {
            let mut best = f64::NEG_INFINITY;
            for k in 0..c {
                if z[k * d + i] > best {
                    best = z[k * d + i];
                }
            }
            assert_eq!(g.scores[i], -best);
        }
    }

    #[test]
    fn anomaly_aware_boundaries() {
        let f = logits(2, vec![0.5, 0.5]);
        let y = anomaly_aware_distribution(&f, &[0.2]).unwrap();
        let expected = [0.4, 0.4, 0.2];
        for (a, b) in y.probs.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let y = anomaly_aware_distribution(&f, &[0.0]).unwrap();
        assert_eq!(y.probs.data(), &[0.5, 0.5, 0.0]);
        let y = anomaly_aware_distribution(&f, &[1.0]).unwrap();
        assert_eq!(y.probs.data(), &[0.0, 0.0, 1.0]);
        assert!(anomaly_aware_distribution(&f, &[1.5]).is_err());
    }

    proptest! {
        #[test]
        fn energy_shift_and_permutation(a in -10.0f64..10.0, b in -10.0f64..10.0, c in -10.0f64..10.0, t in -20.0f64..20.0) {
            let base = energy_score(&logits(3, vec![a, b, c])).scores[0];
            let shifted = energy_score(&logits(3, vec![a + t, b + t, c + t])).scores[0];
            prop_assert!((shifted - (base - t)).abs() < 1e-9);
            let perm = energy_score(&logits(3, vec![c, a, b])).scores[0];
            prop_assert!((perm - base).abs() < 1e-12);
            let ml = max_logit_score(&logits(3, vec![a, b, c])).scores[0];
            prop_assert_eq!(ml, max_logit_score(&logits(3, vec![b, c, a])).scores[0]);
        }

        #[test]
        fn softmax_shift_invariance(a in -10.0f64..10.0, b in -10.0f64..10.0, t in -30.0f64..30.0) {
            let p = softmax_per_pixel(&logits(2, vec![a, b]));
            let q = softmax_per_pixel(&logits(2, vec![a + t, b + t]));
            for (x, y) in p.data().iter().zip(q.data()) {
                prop_assert!((x - y).abs() < 1e-7);
            }
            prop_assert!((p.data()[0] + p.data()[1] - 1.0).abs() < 1e-6);
        }

        #[test]
        fn marginalization_identity(z in proptest::collection::vec(-5.0f64..5.0, 4), g in 0.0f64..=1.0) {
            let f = softmax_per_pixel(&logits(4, z));
            let y = anomaly_aware_distribution(&f, &[g]).unwrap();
            let seen: f64 = y.probs.data()[..4].iter().sum();
            prop_assert!((seen - (1.0 - y.probs.data()[4])).abs() < 1e-7);
            prop_assert!(y.probs.data().iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }
}
