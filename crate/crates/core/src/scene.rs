//! Synthetic segmentation scenes: horizontal class bands with wavy
//! boundaries, optional novel-class blobs, optional domain-shift corruption.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corrupt::{apply_corruptions, CorruptionSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Label reserved for pixels excluded from every metric.
pub const IGNORE_LABEL: u8 = 0;

/// Per-pixel texture noise added to every base color.
pub const TEXTURE_SIGMA: f64 = 0.03;

/// Base colors of the seen classes: corners of the color cube, every channel
/// at 0.15 or 0.85.
pub const SEEN_PALETTE: [[f32; 3]; 8] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.85, 0.15],
    [0.15, 0.15, 0.85],
    [0.85, 0.85, 0.15],
    [0.85, 0.15, 0.85],
    [0.15, 0.85, 0.85],
    [0.85, 0.85, 0.85],
    [0.15, 0.15, 0.15],
];

/// Colors of novel-class objects, inside the cube: every channel lies in
/// [0.4, 0.6], so each channel is at least 0.25 away from every seen base
/// color.
pub const OOD_PALETTE: [[f32; 3]; 8] = [
    [0.50, 0.50, 0.50],
    [0.60, 0.40, 0.40],
    [0.40, 0.60, 0.40],
    [0.40, 0.40, 0.60],
    [0.60, 0.60, 0.40],
    [0.60, 0.40, 0.60],
    [0.40, 0.60, 0.60],
    [0.45, 0.55, 0.50],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub num_seen_classes: usize,
    pub ood_enabled: bool,
    /// Target fraction of the image covered by novel-class objects.
    pub ood_area_fraction_range: (f64, f64),
    pub corruption: CorruptionSpec,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            num_seen_classes: 4,
            ood_enabled: false,
            ood_area_fraction_range: (0.02, 0.10),
            corruption: CorruptionSpec::disabled(),
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.ood_area_fraction_range;
        if !(0.0..=0.5).contains(&lo) || !(0.0..=0.5).contains(&hi) || lo > hi {
            return Err(Error::Config(format!(
                "ood area fraction range must satisfy 0 <= lo <= hi <= 0.5, got ({lo}, {hi})"
            )));
        }
        if self.width < 16 || self.height < 16 {
            return Err(Error::Config(format!(
                "scene must be at least 16x16, got {}x{}",
                self.width, self.height
            )));
        }
        if self.num_seen_classes == 0 || self.num_seen_classes > SEEN_PALETTE.len() {
            return Err(Error::Config(format!(
                "num_seen_classes must be in 1..={}, got {}",
                SEEN_PALETTE.len(),
                self.num_seen_classes
            )));
        }
        self.corruption.validate()
    }

    /// Label of novel-class pixels (`C + 1`).
    pub fn ood_label(&self) -> u8 {
        self.num_seen_classes as u8 + 1
    }
}

/// Integer class labels, row-major `height x width`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    /// `[3, H, W]`, values in [0, 1].
    pub image: Tensor,
    pub labels: LabelMap,
    pub ood_mask: Vec<bool>,
    pub num_seen_classes: usize,
    /// Names of the corruptions applied to `image`.
    pub applied: Vec<String>,
}

impl LabeledScene {
    pub fn ood_fraction(&self) -> f64 {
        self.ood_mask.iter().filter(|&&m| m).count() as f64 / self.ood_mask.len() as f64
    }
}

/// Seed of the corruption stream of a scene, distinct from its layout stream.
pub fn corruption_seed(scene_seed: u64) -> u64 {
    split_seed(scene_seed, 0xc0, 0)
}

/// Derive an independent child seed (splitmix64 finalizer).
pub fn split_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Boundary {
    base: f64,
    amplitude: f64,
    frequency: f64,
    phase: f64,
}

impl Boundary {
    fn at(&self, x: f64, width: f64) -> f64 {
        self.base
            + self.amplitude
                * (std::f64::consts::TAU * self.frequency * x / width + self.phase).sin()
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    semi_a: f64,
    semi_b: f64,
    cos: f64,
    sin: f64,
    color: [f32; 3],
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (dx * self.cos + dy * self.sin) / self.semi_a;
        let v = (-dx * self.sin + dy * self.cos) / self.semi_b;
        u * u + v * v <= 1.0
    }
}

pub fn generate_scene(spec: &SceneSpec) -> Result<LabeledScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width, spec.height);
    let classes = spec.num_seen_classes;

    let mut order: Vec<u8> = (1..=classes as u8).collect();
    order.shuffle(&mut rng);
    let band = h as f64 / classes as f64;
    let boundaries: Vec<Boundary> = (1..classes)
        .map(|k| Boundary {
            base: k as f64 * band + rng.random_range(-0.2..0.2) * band,
            amplitude: rng.random_range(1.0..(0.06 * h as f64).max(1.5)),
            frequency: rng.random_range(0.5..2.0),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        })
        .collect();

    let mut labels = vec![0u8; w * h];
    for x in 0..w {
        let cuts: Vec<f64> = boundaries
            .iter()
            .map(|b| b.at(x as f64, w as f64))
            .collect();
        for y in 0..h {
            let idx = cuts.iter().filter(|&&c| (y as f64) >= c).count();
            labels[y * w + x] = order[idx];
        }
    }

    let ellipses = if spec.ood_enabled {
        sample_ellipses(spec, &mut rng)
    } else {
        Vec::new()
    };
    let mut ood_color = vec![None; w * h];
    for e in &ellipses {
        for y in 0..h {
            for x in 0..w {
                if e.contains(x as f64, y as f64) {
                    ood_color[y * w + x] = Some(e.color);
                }
            }
        }
    }
    // Every sampled object covers at least its center pixel.
    for e in &ellipses {
        let (x, y) = (e.cx.round() as usize, e.cy.round() as usize);
        let (x, y) = (x.min(w - 1), y.min(h - 1));
        if ood_color[y * w + x].is_none() {
            ood_color[y * w + x] = Some(e.color);
        }
    }

    let noise = Normal::new(0.0, TEXTURE_SIGMA).expect("positive sigma");
    let mut data = vec![0.0f32; 3 * w * h];
    let mut ood_mask = vec![false; w * h];
    let ood_label = spec.ood_label();
    for i in 0..w * h {
        let color = match ood_color[i] {
            Some(c) => {
                labels[i] = ood_label;
                ood_mask[i] = true;
                c
            }
            None => SEEN_PALETTE[labels[i] as usize - 1],
        };
        for ch in 0..3 {
            let v = color[ch] as f64 + noise.sample(&mut rng);
            data[ch * w * h + i] = v.clamp(0.0, 1.0) as f32;
        }
    }

    let mut image = Tensor::new(vec![3, h, w], data)?;
    let mut applied = Vec::new();
    if spec.corruption.enabled {
        let (corrupted, names) =
            apply_corruptions(&image, &spec.corruption, corruption_seed(spec.seed))?;
        image = corrupted;
        applied = names;
    }
    Ok(LabeledScene {
        image,
        labels: LabelMap {
            width: w,
            height: h,
            labels,
        },
        ood_mask,
        num_seen_classes: classes,
        applied,
    })
}

fn sample_ellipses(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Ellipse> {
    let (lo, hi) = spec.ood_area_fraction_range;
    let fraction = if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    };
    let count = rng.random_range(1..=3usize);
    if fraction <= 0.0 {
        return Vec::new();
    }
    let (w, h) = (spec.width as f64, spec.height as f64);
    let area = fraction * w * h / count as f64;
    (0..count)
        .map(|_| {
            let ratio: f64 = rng.random_range(0.6..1.6);
            let semi_a = (area / (std::f64::consts::PI * ratio)).sqrt();
            let semi_b = ratio * semi_a;
            let reach = semi_a.max(semi_b);
            let cx = centered_range(rng, reach, w);
            let cy = centered_range(rng, reach, h);
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let color = OOD_PALETTE[rng.random_range(0..OOD_PALETTE.len())];
            Ellipse {
                cx,
                cy,
                semi_a,
                semi_b,
                cos: angle.cos(),
                sin: angle.sin(),
                color,
            }
        })
        .collect()
}

fn centered_range(rng: &mut ChaCha8Rng, reach: f64, extent: f64) -> f64 {
    let lo = reach.min(extent / 2.0);
    let hi = (extent - 1.0 - reach).max(lo);
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palettes_are_disjoint() {
        for s in SEEN_PALETTE {
            for o in OOD_PALETTE {
                let min_dist = (0..3)
                    .map(|c| (s[c] - o[c]).abs())
                    .fold(f32::INFINITY, f32::min);
                assert!(min_dist >= 0.25, "{s:?} vs {o:?}");
            }
        }
    }

    #[test]
    fn no_ood_when_disabled() {
        for seed in 0..5 {
            let scene = generate_scene(&SceneSpec {
                seed,
                ..SceneSpec::default()
            })
            .unwrap();
            assert!(scene.ood_mask.iter().all(|&m| !m));
            assert!(scene.labels.labels.iter().all(|&l| (1..=4).contains(&l)));
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let spec = SceneSpec {
            ood_enabled: true,
            corruption: CorruptionSpec::default(),
            seed: 77,
            ..SceneSpec::default()
        };
        assert_eq!(
            generate_scene(&spec).unwrap(),
            generate_scene(&spec).unwrap()
        );
    }

    #[test]
    fn image_is_in_unit_range_and_mask_matches_labels() {
        let spec = SceneSpec {
            ood_enabled: true,
            seed: 3,
            ..SceneSpec::default()
        };
        let scene = generate_scene(&spec).unwrap();
        assert!(scene.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        for (l, m) in scene.labels.labels.iter().zip(&scene.ood_mask) {
            assert_eq!(*l == spec.ood_label(), *m);
        }
        assert!(scene.ood_mask.iter().any(|&m| m));
    }

    #[test]
    fn mean_ood_fraction_tracks_requested_range() {
        let n = 100;
        let mean: f64 = (0..n)
            .map(|seed| {
                let spec = SceneSpec {
                    ood_enabled: true,
                    ood_area_fraction_range: (0.02, 0.10),
                    seed,
                    ..SceneSpec::default()
                };
                generate_scene(&spec).unwrap().ood_fraction()
            })
            .sum::<f64>()
            / n as f64;
        assert!((0.02..=0.10).contains(&mean), "mean OOD fraction {mean}");
    }

    #[test]
    fn rejects_invalid_specs() {
        let bad_range = SceneSpec {
            ood_area_fraction_range: (0.3, 0.2),
            ..SceneSpec::default()
        };
        assert!(bad_range.validate().is_err());
        let too_small = SceneSpec {
            width: 8,
            ..SceneSpec::default()
        };
        assert!(too_small.validate().is_err());
    }
}
