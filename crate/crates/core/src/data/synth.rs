//! Synthetic ultrasound-like lesions for desk-scale experiments.
//!
//! Benign images carry one dark ellipse with a sharp edge over mildly noisy
//! tissue. Malignant images carry an irregular star polygon whose edge is
//! Gaussian blurred under heavier multiplicative speckle. Masks are the
//! rasterized generating shape.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::records::{ClassLabel, DatasetRecord};
use super::sample::{save_gray_png, SegSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bounds every generated mask's foreground fraction lies strictly within.
pub const FG_FRACTION_RANGE: (f64, f64) = (0.02, 0.5);

fn ellipse_mask(size: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let s = size as f64;
    let (cy, cx) = (rng.random_range(0.35..0.65) * s, rng.random_range(0.35..0.65) * s);
    let (a, b) = (rng.random_range(0.12..0.25) * s, rng.random_range(0.12..0.25) * s);
    let theta = rng.random_range(0.0..PI);
    let (sin, cos) = theta.sin_cos();
    (0..size * size)
        .map(|i| {
            let (dy, dx) = ((i / size) as f64 + 0.5 - cy, (i % size) as f64 + 0.5 - cx);
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            (u / a).powi(2) + (v / b).powi(2) <= 1.0
        })
        .collect()
}

fn star_mask(size: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let s = size as f64;
    let (cy, cx) = (rng.random_range(0.35..0.65) * s, rng.random_range(0.35..0.65) * s);
    let spikes = rng.random_range(6..=11usize);
    let outer = rng.random_range(0.16..0.27) * s;
    let n = 2 * spikes;
    let phase = rng.random_range(0.0..2.0 * PI);
    let verts: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let jitter = rng.random_range(-0.3..0.3) * PI / n as f64;
            let angle = phase + 2.0 * PI * k as f64 / n as f64 + jitter;
            let r = if k % 2 == 0 {
                outer * rng.random_range(0.8..1.0)
            } else {
                outer * rng.random_range(0.5..0.75)
            };
            (cy + r * angle.sin(), cx + r * angle.cos())
        })
        .collect();
    (0..size * size)
        .map(|i| {
            let (py, px) = ((i / size) as f64 + 0.5, (i % size) as f64 + 0.5);
            let mut inside = false;
            for k in 0..n {
                let (y1, x1) = verts[k];
                let (y2, x2) = verts[(k + 1) % n];
                if (y1 > py) != (y2 > py) && px < x1 + (py - y1) * (x2 - x1) / (y2 - y1) {
                    inside = !inside;
                }
            }
            inside
        })
        .collect()
}

/// Keeps only the largest 4-connected component.
fn largest_component(mask: &[bool], size: usize) -> Vec<bool> {
    let mut label = vec![0usize; mask.len()];
    let mut best = (0usize, 0usize);
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        stack.push(start);
        let mut count = 0;
        while let Some(i) = stack.pop() {
            count += 1;
            let (y, x) = (i / size, i % size);
            let mut visit = |j: usize| {
                if mask[j] && label[j] == 0 {
                    label[j] = next;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - size);
            }
            if y + 1 < size {
                visit(i + size);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < size {
                visit(i + 1);
            }
        }
        if count > best.1 {
            best = (next, count);
        }
    }
    label.iter().map(|&l| l != 0 && l == best.0).collect()
}

/// Number of 4-connected foreground components of a binary plane.
pub fn connected_components(mask: &[f32], size: usize) -> usize {
    let mut remaining: Vec<bool> = mask.iter().map(|&v| v > 0.5).collect();
    let mut count = 0;
    while remaining.iter().any(|&b| b) {
        let comp = largest_component(&remaining, size);
        for (r, c) in remaining.iter_mut().zip(comp) {
            *r &= !c;
        }
        count += 1;
    }
    count
}

fn gaussian_blur(plane: &[f32], size: usize, sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut out = vec![0.0f32; src.len()];
        for y in 0..size {
            for x in 0..size {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let d = k as isize - radius;
                    let (sy, sx) = if horizontal { (y as isize, x as isize + d) } else { (y as isize + d, x as isize) };
                    let sy = sy.clamp(0, size as isize - 1) as usize;
                    let sx = sx.clamp(0, size as isize - 1) as usize;
                    acc += w * src[sy * size + sx] as f64;
                }
                out[y * size + x] = (acc / norm) as f32;
            }
        }
        out
    };
    pass(&pass(plane, true), false)
}

fn generate_one(kind: ClassLabel, size: usize, rng: &mut ChaCha8Rng) -> SegSample {
    let area = (size * size) as f64;
    let shape = loop {
        let raw = match kind {
            ClassLabel::Malignant => star_mask(size, rng),
            _ => ellipse_mask(size, rng),
        };
        let m = largest_component(&raw, size);
        let frac = m.iter().filter(|&&b| b).count() as f64 / area;
        if frac > FG_FRACTION_RANGE.0 && frac < FG_FRACTION_RANGE.1 {
            break m;
        }
    };
    let mask: Vec<f32> = shape.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();

    let background = rng.random_range(0.5..0.65);
    let lesion = rng.random_range(0.1..0.2);
    // A gentle vertical gain ramp like time-gain compensation.
    let ramp = rng.random_range(-0.1..0.1);
    let (edge, additive, speckle) = match kind {
        ClassLabel::Malignant => (gaussian_blur(&mask, size, size as f64 / 64.0), 0.05, 0.3),
        _ => (mask.clone(), 0.03, 0.08),
    };
    let add = Normal::new(0.0, additive).expect("positive sigma");
    let mul = Normal::new(1.0, speckle).expect("positive sigma");
    let image: Vec<f32> = edge
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            let depth = (i / size) as f64 / size as f64;
            let tissue = background * (1.0 + ramp * (depth - 0.5));
            let base = tissue + (lesion - tissue) * e as f64;
            (base * mul.sample(rng) + add.sample(rng)).clamp(0.0, 1.0) as f32
        })
        .collect();

    let mut rgb = Vec::with_capacity(3 * size * size);
    for _ in 0..3 {
        rgb.extend_from_slice(&image);
    }
    SegSample {
        image: Tensor::from_vec(&[3, size, size], rgb).expect("sized above"),
        mask: Tensor::from_vec(&[1, size, size], mask).expect("sized above"),
        class_label: kind,
    }
}

/// Generates `n` samples of one class; sample `i` depends only on `seed`,
/// `kind`, `resolution` and `i`.
pub fn synth_generate(n: usize, kind: ClassLabel, resolution: usize, seed: u64) -> Result<Vec<SegSample>> {
    if n == 0 {
        return Err(Error::Config("synthetic dataset size must be at least 1".into()));
    }
    if resolution < 16 {
        return Err(Error::Config(format!("synthetic resolution {resolution} is below 16")));
    }
    if kind == ClassLabel::Normal {
        return Err(Error::Config("synthetic data covers benign and malignant lesions only".into()));
    }
    let stream_base = match kind {
        ClassLabel::Malignant => 1u64 << 32,
        _ => 0,
    };
    Ok((0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream_base + i as u64);
            generate_one(kind, resolution, &mut rng)
        })
        .collect())
}

/// Benign samples followed by malignant samples.
pub fn synth_mixed(benign: usize, malignant: usize, resolution: usize, seed: u64) -> Result<Vec<SegSample>> {
    let mut out = Vec::with_capacity(benign + malignant);
    if benign > 0 {
        out.extend(synth_generate(benign, ClassLabel::Benign, resolution, seed)?);
    }
    if malignant > 0 {
        out.extend(synth_generate(malignant, ClassLabel::Malignant, resolution, seed)?);
    }
    Ok(out)
}

/// Writes samples as `<class>/<class> (<n>).png` with `_mask.png` siblings,
/// numbering each class from 1, and returns the matching records.
pub fn write_busi_layout(root: &Path, samples: &[SegSample]) -> Result<Vec<DatasetRecord>> {
    let mut counters = [0usize; 3];
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let class = s.class_label;
        let dir = root.join(class.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let slot = ClassLabel::ALL.iter().position(|&c| c == class).expect("listed");
        counters[slot] += 1;
        let stem = format!("{class} ({})", counters[slot]);
        let size = s.resolution();
        let image_path = dir.join(format!("{stem}.png"));
        let mask_path = dir.join(format!("{stem}_mask.png"));
        save_gray_png(&image_path, &s.image.data()[..size * size], size)?;
        save_gray_png(&mask_path, s.mask.data(), size)?;
        records.push(DatasetRecord { image_path, mask_paths: vec![mask_path], class_label: class, split: None });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::records::scan_busi;
    use crate::data::sample::load_sample;

    #[test]
    fn benign_masks_are_single_components() {
        let samples = synth_generate(8, ClassLabel::Benign, 128, 3).unwrap();
        assert_eq!(samples.len(), 8);
        for s in &samples {
            s.validate().unwrap();
            assert_eq!(connected_components(s.mask.data(), 128), 1);
        }
    }

    #[test]
    fn foreground_fraction_in_range() {
        for kind in [ClassLabel::Benign, ClassLabel::Malignant] {
            for s in synth_generate(20, kind, 64, 11).unwrap() {
                let frac = s.foreground_pixels() as f64 / (64.0 * 64.0);
                assert!(frac > 0.02 && frac < 0.5, "{kind} {frac}");
                assert_eq!(connected_components(s.mask.data(), 64), 1);
            }
        }
    }

    #[test]
    fn deterministic_and_prefix_stable() {
        let a = synth_generate(4, ClassLabel::Malignant, 32, 5).unwrap();
        let b = synth_generate(6, ClassLabel::Malignant, 32, 5).unwrap();
        assert_eq!(a[..], b[..4]);
        assert_ne!(a, synth_generate(4, ClassLabel::Malignant, 32, 6).unwrap());
    }

    #[test]
    fn lesions_are_darker_than_tissue() {
        for s in synth_mixed(3, 3, 64, 1).unwrap() {
            let plane = &s.image.data()[..64 * 64];
            let mean = |fg: bool| {
                let v: Vec<f32> = plane.iter().zip(s.mask.data()).filter(|(_, &m)| (m > 0.5) == fg).map(|(&p, _)| p).collect();
                v.iter().sum::<f32>() / v.len() as f32
            };
            assert!(mean(true) + 0.2 < mean(false));
        }
    }

    #[test]
    fn component_counter() {
        let mut m = vec![0.0f32; 25];
        m[0] = 1.0;
        m[6] = 1.0;
        m[24] = 1.0;
        assert_eq!(connected_components(&m, 5), 3);
    }

    #[test]
    fn busi_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let samples = synth_mixed(2, 3, 32, 8).unwrap();
        let written = write_busi_layout(tmp.path(), &samples).unwrap();
        let scanned = scan_busi(tmp.path(), false).unwrap();
        assert!(scanned.rejects.is_empty());
        assert_eq!(scanned.records.len(), 5);
        for r in &written {
            assert!(scanned.records.contains(r));
        }
        for (r, s) in written.iter().zip(&samples) {
            let loaded = load_sample(r, 32).unwrap();
            assert_eq!(loaded.mask, s.mask);
            let err = loaded.image.data().iter().zip(s.image.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(err <= 0.5 / 255.0 + 1e-6);
        }
    }
}
