//! Decoded image/mask pairs, batching and PNG I/O.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageReader};

use super::records::{ClassLabel, DatasetRecord};
use crate::error::{Error, Result};
use crate::ops::{resize_plane_bilinear, resize_plane_nearest};
use crate::tensor::Tensor;

/// One training or test example at a fixed square resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    /// `(3, S, S)` with values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `(1, S, S)` with values exactly 0 or 1.
    pub mask: Tensor<f32>,
    pub class_label: ClassLabel,
}

impl SegSample {
    pub fn resolution(&self) -> usize {
        self.mask.shape()[2]
    }

    pub fn foreground_pixels(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v > 0.5).count()
    }

    /// Checks shapes, the image range and mask binarity.
    pub fn validate(&self) -> Result<()> {
        let s = self.mask.shape().get(2).copied().unwrap_or(0);
        if self.image.shape() != [3, s, s] || self.mask.shape() != [1, s, s] {
            return Err(Error::Structural(format!(
                "sample image {:?} and mask {:?} are not (3,S,S) and (1,S,S)",
                self.image.shape(),
                self.mask.shape()
            )));
        }
        if !self.image.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::Validation("image values outside [0, 1]".into()));
        }
        if !self.mask.data().iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(Error::Validation("mask is not binary".into()));
        }
        Ok(())
    }
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image { path: path.to_path_buf(), source },
    })
}

pub fn binarize(v: f32) -> f32 {
    if v >= 0.5 {
        1.0
    } else {
        0.0
    }
}

/// Decodes a record and resizes it to `resolution × resolution`.
///
/// Grayscale images are replicated to three channels. Masks are resampled
/// with nearest neighbour, merged by union and thresholded at 0.5.
pub fn load_sample(record: &DatasetRecord, resolution: usize) -> Result<SegSample> {
    if resolution == 0 {
        return Err(Error::Config("resolution must be positive".into()));
    }
    if record.mask_paths.is_empty() {
        return Err(Error::Validation(format!("{} has no mask", record.image_path.display())));
    }
    let rgb = decode(&record.image_path)?.into_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.into_raw();
    let mut image = Vec::with_capacity(3 * resolution * resolution);
    for c in 0..3 {
        let plane: Vec<f32> = raw.iter().skip(c).step_by(3).copied().collect();
        let resized = resize_plane_bilinear(&plane, h, w, resolution, resolution);
        image.extend(resized.into_iter().map(|v| v.clamp(0.0, 1.0)));
    }

    let mut mask = vec![0.0f32; resolution * resolution];
    for path in &record.mask_paths {
        let gray = decode(path)?.to_luma32f();
        let (mw, mh) = (gray.width() as usize, gray.height() as usize);
        let resized = resize_plane_nearest(gray.as_raw(), mh, mw, resolution, resolution);
        for (m, v) in mask.iter_mut().zip(resized) {
            *m = m.max(binarize(v));
        }
    }

    Ok(SegSample {
        image: Tensor::from_vec(&[3, resolution, resolution], image)?,
        mask: Tensor::from_vec(&[1, resolution, resolution], mask)?,
        class_label: record.class_label,
    })
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes the first image channel as an 8-bit grayscale PNG.
pub fn save_gray_png(path: &Path, plane: &[f32], size: usize) -> Result<()> {
    let img = GrayImage::from_raw(size as u32, size as u32, plane.iter().map(|&v| to_u8(v)).collect())
        .ok_or_else(|| Error::Structural(format!("plane of {} values is not {size}×{size}", plane.len())))?;
    img.save(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image { path: path.to_path_buf(), source },
    })
}

/// A stacked mini-batch.
#[derive(Clone, Debug)]
pub struct SegBatch {
    /// `(B, 3, S, S)`.
    pub images: Tensor<f32>,
    /// `(B, 1, S, S)`.
    pub masks: Tensor<f32>,
    pub labels: Vec<ClassLabel>,
}

impl SegBatch {
    pub fn from_samples(samples: &[SegSample]) -> Result<Self> {
        let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
        let masks: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
        Ok(SegBatch {
            images: Tensor::stack(&images)?,
            masks: Tensor::stack(&masks)?,
            labels: samples.iter().map(|s| s.class_label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Indexed access to samples, either held in memory or decoded on demand.
pub trait SampleSource {
    fn len(&self) -> usize;

    fn class_label(&self, index: usize) -> ClassLabel;

    fn sample(&self, index: usize) -> Result<SegSample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [SegSample] {
    fn len(&self) -> usize {
        <[SegSample]>::len(self)
    }

    fn class_label(&self, index: usize) -> ClassLabel {
        self[index].class_label
    }

    fn sample(&self, index: usize) -> Result<SegSample> {
        Ok(self[index].clone())
    }
}

impl SampleSource for Vec<SegSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn class_label(&self, index: usize) -> ClassLabel {
        self[index].class_label
    }

    fn sample(&self, index: usize) -> Result<SegSample> {
        Ok(self[index].clone())
    }
}

/// Loads records lazily at a fixed resolution.
#[derive(Clone, Debug)]
pub struct RecordSource {
    pub records: Vec<DatasetRecord>,
    pub resolution: usize,
}

impl SampleSource for RecordSource {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn class_label(&self, index: usize) -> ClassLabel {
        self.records[index].class_label
    }

    fn sample(&self, index: usize) -> Result<SegSample> {
        load_sample(&self.records[index], self.resolution)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::RgbImage;
    use std::path::PathBuf;

    fn write_mask(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> bool) {
        GrayImage::from_fn(w, h, |x, y| image::Luma([if f(x, y) { 255 } else { 0 }]))
            .save(path)
            .unwrap();
    }

    fn record(image: PathBuf, masks: Vec<PathBuf>) -> DatasetRecord {
        DatasetRecord { image_path: image, mask_paths: masks, class_label: ClassLabel::Benign, split: None }
    }

    #[test]
    fn union_of_disjoint_masks_adds_areas() {
        let tmp = tempfile::tempdir().unwrap();
        let img = tmp.path().join("i.png");
        GrayImage::from_pixel(32, 32, image::Luma([90])).save(&img).unwrap();
        let (a, b) = (tmp.path().join("a.png"), tmp.path().join("b.png"));
        write_mask(&a, 32, 32, |x, y| x < 8 && y < 8);
        write_mask(&b, 32, 32, |x, y| x >= 20 && y >= 24);
        let s = load_sample(&record(img, vec![a, b]), 32).unwrap();
        assert_eq!(s.foreground_pixels(), 64 + 12 * 8);
        s.validate().unwrap();
        let expected = 90.0 / 255.0;
        assert!(s.image.data().iter().all(|v| (v - expected).abs() < 1e-6));
    }

    #[test]
    fn non_square_input_is_resized_to_resolution() {
        let tmp = tempfile::tempdir().unwrap();
        let img = tmp.path().join("i.png");
        RgbImage::from_fn(100, 80, |x, y| image::Rgb([x as u8, y as u8, 200])).save(&img).unwrap();
        let m = tmp.path().join("m.png");
        write_mask(&m, 100, 80, |x, y| (x / 3 + y / 3) % 2 == 0);
        let s = load_sample(&record(img, vec![m]), 48).unwrap();
        assert_eq!(s.image.shape(), &[3, 48, 48]);
        assert_eq!(s.mask.shape(), &[1, 48, 48]);
        s.validate().unwrap();
    }

    #[test]
    fn missing_and_corrupt_files_name_the_path() {
        let tmp = tempfile::tempdir().unwrap();
        let missing = tmp.path().join("nope.png");
        let err = load_sample(&record(missing.clone(), vec![missing.clone()]), 8).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("nope.png"));

        let corrupt = tmp.path().join("bad.png");
        std::fs::write(&corrupt, b"\x89PNG\r\n\x1a\nnot really").unwrap();
        let err = load_sample(&record(corrupt, vec![missing]), 8).unwrap_err();
        assert!(err.to_string().contains("bad.png"), "{err}");
    }

    #[test]
    fn batch_stacks_samples() {
        let s = SegSample {
            image: Tensor::zeros(&[3, 4, 4]),
            mask: Tensor::zeros(&[1, 4, 4]),
            class_label: ClassLabel::Malignant,
        };
        let b = SegBatch::from_samples(&[s.clone(), s]).unwrap();
        assert_eq!(b.images.shape(), &[2, 3, 4, 4]);
        assert_eq!(b.masks.shape(), &[2, 1, 4, 4]);
        assert_eq!(b.len(), 2);
    }
}
