//! Random flips, small rotations and brightness jitter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sample::{binarize, SegSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sampling ranges for [`AugmentParams::draw`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub hflip_p: f64,
    pub vflip_p: f64,
    /// Rotation is uniform in `±max_rotation_deg`.
    pub max_rotation_deg: f64,
    /// Brightness scale is uniform in `1 ± brightness`.
    pub brightness: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { hflip_p: 0.5, vflip_p: 0.5, max_rotation_deg: 10.0, brightness: 0.1 }
    }
}

impl AugmentConfig {
    /// Every draw is the identity.
    pub fn none() -> Self {
        AugmentConfig { hflip_p: 0.0, vflip_p: 0.0, max_rotation_deg: 0.0, brightness: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let probs_ok = (0.0..=1.0).contains(&self.hflip_p) && (0.0..=1.0).contains(&self.vflip_p);
        if !probs_ok || !(self.max_rotation_deg >= 0.0) || !(0.0..1.0).contains(&self.brightness) {
            return Err(Error::Config(format!("invalid augmentation ranges {self:?}")));
        }
        Ok(())
    }
}

/// One concrete transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    pub rotation_deg: f64,
    pub brightness_scale: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams =
        AugmentParams { hflip: false, vflip: false, rotation_deg: 0.0, brightness_scale: 1.0 };

    pub fn draw(config: &AugmentConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hflip = rng.random_bool(config.hflip_p);
        let vflip = rng.random_bool(config.vflip_p);
        let mut uniform = |half: f64| if half > 0.0 { rng.random_range(-half..=half) } else { 0.0 };
        let rotation_deg = uniform(config.max_rotation_deg);
        let brightness_scale = 1.0 + uniform(config.brightness);
        AugmentParams { hflip, vflip, rotation_deg, brightness_scale }
    }
}

/// Flips, then rotates about the centre with bilinear sampling and zero fill.
pub fn transform_plane(plane: &[f32], size: usize, p: &AugmentParams) -> Vec<f32> {
    let mut out = plane.to_vec();
    if p.hflip {
        for row in out.chunks_mut(size) {
            row.reverse();
        }
    }
    if p.vflip {
        let flipped: Vec<f32> = out.chunks(size).rev().flatten().copied().collect();
        out = flipped;
    }
    if p.rotation_deg == 0.0 {
        return out;
    }
    let (sin, cos) = p.rotation_deg.to_radians().sin_cos();
    let c = (size as f64 - 1.0) / 2.0;
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= size as isize || x >= size as isize {
            0.0
        } else {
            out[y as usize * size + x as usize] as f64
        }
    };
    let mut rotated = vec![0.0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 - c, x as f64 - c);
            let sx = cos * dx + sin * dy + c;
            let sy = -sin * dx + cos * dy + c;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
            rotated[y * size + x] = v as f32;
        }
    }
    rotated
}

/// Applies `p` to the image and mask with the same geometry.
pub fn apply_augment(sample: &SegSample, p: &AugmentParams) -> SegSample {
    let s = sample.resolution();
    let plane = s * s;
    let scale = p.brightness_scale as f32;
    let image: Vec<f32> = sample
        .image
        .data()
        .chunks(plane)
        .flat_map(|ch| transform_plane(ch, s, p))
        .map(|v| (v * scale).clamp(0.0, 1.0))
        .collect();
    let mask: Vec<f32> = transform_plane(sample.mask.data(), s, p).into_iter().map(binarize).collect();
    SegSample {
        image: Tensor::from_vec(sample.image.shape(), image).expect("shape preserved"),
        mask: Tensor::from_vec(sample.mask.shape(), mask).expect("shape preserved"),
        class_label: sample.class_label,
    }
}

/// Draws a transform from `config` with `seed` and applies it.
pub fn augment_with(sample: &SegSample, config: &AugmentConfig, seed: u64) -> SegSample {
    apply_augment(sample, &AugmentParams::draw(config, seed))
}

/// Default augmentation: flips with p = 0.5, ±10° rotation, ±10% brightness.
pub fn augment(sample: &SegSample, seed: u64) -> SegSample {
    augment_with(sample, &AugmentConfig::default(), seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::records::ClassLabel;

    fn fixture(size: usize, seed: u64) -> SegSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<f32> = (0..size * size).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let image: Vec<f32> = (0..3 * size * size).map(|_| rng.random_range(0.0..1.0)).collect();
        SegSample {
            image: Tensor::from_vec(&[3, size, size], image).unwrap(),
            mask: Tensor::from_vec(&[1, size, size], mask).unwrap(),
            class_label: ClassLabel::Benign,
        }
    }

    #[test]
    fn identity_draws_leave_sample_unchanged() {
        let s = fixture(9, 1);
        for seed in 0..5 {
            assert_eq!(augment_with(&s, &AugmentConfig::none(), seed), s);
        }
        assert_eq!(apply_augment(&s, &AugmentParams::IDENTITY), s);
    }

    #[test]
    fn double_flip_is_identity() {
        let s = fixture(8, 2);
        for p in [
            AugmentParams { hflip: true, ..AugmentParams::IDENTITY },
            AugmentParams { vflip: true, ..AugmentParams::IDENTITY },
        ] {
            let once = apply_augment(&s, &p);
            assert_ne!(once, s);
            assert_eq!(apply_augment(&once, &p), s);
            assert_eq!(once.foreground_pixels(), s.foreground_pixels());
        }
    }

    #[test]
    fn draws_respect_ranges() {
        let cfg = AugmentConfig::default();
        let mut flips = 0;
        for seed in 0..200 {
            let p = AugmentParams::draw(&cfg, seed);
            assert!(p.rotation_deg.abs() <= 10.0);
            assert!((p.brightness_scale - 1.0).abs() <= 0.1);
            flips += p.hflip as usize;
        }
        assert!((60..140).contains(&flips));
    }

    #[test]
    fn mask_stays_aligned_with_image() {
        let mut s = fixture(16, 3);
        let mut replicated = s.mask.data().to_vec();
        replicated.extend_from_within(..);
        replicated.extend_from_within(..256);
        s.image = Tensor::from_vec(&[3, 16, 16], replicated).unwrap();
        let cfg = AugmentConfig { brightness: 0.0, ..AugmentConfig::default() };
        for seed in 0..10 {
            let out = augment_with(&s, &cfg, seed);
            let from_image: Vec<f32> = out.image.data()[..256].iter().map(|&v| binarize(v)).collect();
            assert_eq!(from_image, out.mask.data());
        }
    }

    #[test]
    fn small_rotation_keeps_masks_binary() {
        let s = fixture(12, 4);
        let p = AugmentParams { rotation_deg: 7.5, ..AugmentParams::IDENTITY };
        let out = apply_augment(&s, &p);
        out.validate().unwrap();
    }
}
