//! Domain-shift corruptions: fog, color shift and Gaussian blur, each applied
//! independently with its own probability.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gray level the fog blends toward.
pub const FOG_GRAY: f32 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub enabled: bool,
    pub fog_prob: f64,
    pub color_prob: f64,
    pub blur_prob: f64,
    /// Blend weight toward gray at the top row.
    pub fog_strength: (f64, f64),
    /// Fraction of the fog weight lost between the top and the bottom row.
    #[serde(default = "default_fog_falloff")]
    pub fog_falloff: f64,
    /// Per-channel multiplicative scale.
    pub color_jitter_range: (f64, f64),
    /// Maximum absolute hue rotation (radians) about the gray axis.
    pub hue_rotation_max: f64,
    pub blur_sigma_range: (f64, f64),
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            fog_prob: 0.5,
            color_prob: 0.5,
            blur_prob: 0.5,
            fog_strength: (0.5, 0.8),
            fog_falloff: default_fog_falloff(),
            color_jitter_range: (0.6, 1.4),
            hue_rotation_max: 0.3,
            blur_sigma_range: (1.0, 2.0),
        }
    }
}

fn default_fog_falloff() -> f64 {
    0.5
}

impl CorruptionSpec {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("fog_prob", self.fog_prob),
            ("color_prob", self.color_prob),
            ("blur_prob", self.blur_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        for (name, (lo, hi)) in [
            ("fog_strength", self.fog_strength),
            ("color_jitter_range", self.color_jitter_range),
            ("blur_sigma_range", self.blur_sigma_range),
        ] {
            if !(lo <= hi) || lo < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be a nonnegative (lo, hi) range"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.fog_falloff) {
            return Err(Error::Config("fog_falloff must be in [0, 1]".into()));
        }
        if self.fog_strength.1 > 1.0 {
            return Err(Error::Config("fog_strength must not exceed 1".into()));
        }
        if self.blur_sigma_range.0 <= 0.0 {
            return Err(Error::Config("blur sigma must be positive".into()));
        }
        Ok(())
    }
}

fn sample(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    let u: f64 = rng.random();
    lo + (hi - lo) * u
}

/// Apply the corruption protocol to a `[3, H, W]` image in [0, 1].
///
/// All random draws are made up front in a fixed order, so the parameters of
/// one transform do not depend on whether another one fired.
pub fn apply_corruptions(
    image: &Tensor,
    spec: &CorruptionSpec,
    seed: u64,
) -> Result<(Tensor, Vec<String>)> {
    if !spec.enabled {
        return Ok((image.clone(), Vec::new()));
    }
    spec.validate()?;
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::InvalidInput(format!(
            "expected a [3, H, W] image, got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fire_fog = rng.random::<f64>() < spec.fog_prob;
    let fire_color = rng.random::<f64>() < spec.color_prob;
    let fire_blur = rng.random::<f64>() < spec.blur_prob;
    let strength = sample(&mut rng, spec.fog_strength);
    let scales = [
        sample(&mut rng, spec.color_jitter_range),
        sample(&mut rng, spec.color_jitter_range),
        sample(&mut rng, spec.color_jitter_range),
    ];
    let hue = sample(&mut rng, (-spec.hue_rotation_max, spec.hue_rotation_max));
    let sigma = sample(&mut rng, spec.blur_sigma_range);

    let mut out = image.clone();
    let mut applied = Vec::new();
    if fire_fog {
        fog(&mut out, h, w, strength, spec.fog_falloff);
        applied.push("fog".to_string());
    }
    if fire_color {
        color_shift(&mut out, scales, hue);
        applied.push("color".to_string());
    }
    if fire_blur {
        gaussian_blur(&mut out, h, w, sigma);
        applied.push("blur".to_string());
    }
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok((out, applied))
}

/// Convex blend toward [`FOG_GRAY`]; the weight is `strength` at the top row
/// and falls linearly to `strength * (1 - falloff)` at the bottom row.
pub fn fog(image: &mut Tensor, h: usize, w: usize, strength: f64, falloff: f64) {
    for ch in 0..image.channels() {
        let plane = image.channel_mut(ch);
        for y in 0..h {
            let t = if h > 1 {
                y as f64 / (h - 1) as f64
            } else {
                0.0
            };
            let weight = strength * (1.0 - falloff * t);
            for v in &mut plane[y * w..(y + 1) * w] {
                *v = ((1.0 - weight) * *v as f64 + weight * FOG_GRAY as f64) as f32;
            }
        }
    }
}

/// Per-channel scaling followed by a rotation about the gray axis.
pub fn color_shift(image: &mut Tensor, scales: [f64; 3], hue: f64) {
    let (c, s) = (hue.cos(), hue.sin());
    let k = 1.0 / 3.0f64.sqrt();
    let t = (1.0 - c) / 3.0;
    // Rodrigues rotation about (1, 1, 1) / sqrt(3).
    let rot = [
        [c + t, t - s * k, t + s * k],
        [t + s * k, c + t, t - s * k],
        [t - s * k, t + s * k, c + t],
    ];
    let d = image.pixels();
    let data = image.data_mut();
    for i in 0..d {
        let v = [
            data[i] as f64 * scales[0],
            data[d + i] as f64 * scales[1],
            data[2 * d + i] as f64 * scales[2],
        ];
        for (row, r) in rot.iter().enumerate() {
            data[row * d + i] = (r[0] * v[0] + r[1] * v[1] + r[2] * v[2]) as f32;
        }
    }
}

/// Normalized 1-D Gaussian kernel with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(image: &mut Tensor, h: usize, w: usize, sigma: f64) {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0f64; h * w];
    for ch in 0..image.channels() {
        let plane = image.channel_mut(ch);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in kernel.iter().enumerate() {
                    let sx = (x as isize + j as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += kv * plane[y * w + sx] as f64;
                }
                tmp[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in kernel.iter().enumerate() {
                    let sy = (y as isize + j as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[sy * w + x];
                }
                plane[y * w + x] = acc as f32;
            }
        }
    }
}
