//! Corpus ingestion and preprocessing.
//!
//! A corpus is a directory with an image subdirectory (PNG/JPEG) and a
//! mask subdirectory (PNG), paired by filename stem. Masks binarize at
//! threshold 128: source label >= 128 is the positive class.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::imgproc::{
    adjust_brightness, adjust_contrast, adjust_saturation, flip_chw, resize_chw, ResizeFilter,
    NORM_MEAN, NORM_STD,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("unpaired corpus entries; images without masks: {missing_masks:?}, masks without images: {missing_images:?}")]
    Unpaired { missing_masks: Vec<String>, missing_images: Vec<String> },
    #[error("stem {stem} appears more than once in {dir}")]
    DuplicateStem { stem: String, dir: PathBuf },
    #[error("sample {id}: image is {image:?} but mask is {mask:?}")]
    SizeMismatch { id: String, image: (u32, u32), mask: (u32, u32) },
    #[error("invalid augment config: {0}")]
    Config(String),
}

/// An RGB image and its binary ground-truth mask (1 = source label >= 128).
#[derive(Clone)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    /// Values are 0 or 1.
    pub mask: GrayImage,
}

/// Threshold-128 binarization in the 8-bit file domain; idempotent.
pub fn binarize(v: u8) -> u8 {
    if v >= 128 {
        255
    } else {
        0
    }
}

#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub root: PathBuf,
    pub image_dir: String,
    pub mask_dir: String,
}

impl CorpusSpec {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        CorpusSpec { root: root.into(), image_dir: "image".into(), mask_dir: "mask".into() }
    }

    pub fn image_path(&self) -> PathBuf {
        self.root.join(&self.image_dir)
    }

    pub fn mask_path(&self) -> PathBuf {
        self.root.join(&self.mask_dir)
    }
}

fn list_stems(dir: &Path, exts: &[&str]) -> Result<BTreeMap<String, PathBuf>, DataError> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|source| DataError::Io { path: dir.to_path_buf(), source })?;
    for entry in entries {
        let entry = entry.map_err(|source| DataError::Io { path: dir.to_path_buf(), source })?;
        let path = entry.path();
        let Some(ext) = path.extension().and_then(|e| e.to_str()) else { continue };
        if !exts.iter().any(|e| ext.eq_ignore_ascii_case(e)) {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        if out.insert(stem.clone(), path).is_some() {
            return Err(DataError::DuplicateStem { stem, dir: dir.to_path_buf() });
        }
    }
    Ok(out)
}

/// Load a paired image/mask corpus in lexicographic stem order. Masks are
/// binarized at threshold 128. Every image must have exactly one mask
/// partner; offenders are reported by stem.
pub fn load_corpus(spec: &CorpusSpec) -> Result<Vec<Sample>, DataError> {
    let images = list_stems(&spec.image_path(), &["png", "jpg", "jpeg"])?;
    let masks = list_stems(&spec.mask_path(), &["png", "jpg", "jpeg"])?;

    let missing_masks: Vec<String> = images.keys().filter(|k| !masks.contains_key(*k)).cloned().collect();
    let missing_images: Vec<String> = masks.keys().filter(|k| !images.contains_key(*k)).cloned().collect();
    if !missing_masks.is_empty() || !missing_images.is_empty() {
        return Err(DataError::Unpaired { missing_masks, missing_images });
    }

    let mut samples = Vec::with_capacity(images.len());
    for (stem, img_path) in &images {
        let image = image::open(img_path)
            .map_err(|e| DataError::Decode { path: img_path.clone(), message: e.to_string() })?
            .to_rgb8();
        let mask_path = &masks[stem];
        let mask_img = image::open(mask_path)
            .map_err(|e| DataError::Decode { path: mask_path.clone(), message: e.to_string() })?
            .to_luma8();
        if image.dimensions() != mask_img.dimensions() {
            return Err(DataError::SizeMismatch {
                id: stem.clone(),
                image: image.dimensions(),
                mask: mask_img.dimensions(),
            });
        }
        let mut mask = mask_img;
        for p in mask.pixels_mut() {
            p.0[0] = binarize(p.0[0]) / 255;
        }
        samples.push(Sample { id: stem.clone(), image, mask });
    }
    log::info!("loaded {} image/mask pairs from {}", samples.len(), spec.root.display());
    Ok(samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipAxis {
    Vertical,
    Horizontal,
    None,
}

#[derive(Debug, Clone)]
pub struct AugmentConfig {
    pub flip_axis: FlipAxis,
    pub flip_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// (H, W), divisible by 32.
    pub target_size: (usize, usize),
}

impl AugmentConfig {
    /// Training defaults: 50% vertical flip, +-0.2 color jitter.
    pub fn train(target_size: (usize, usize)) -> Self {
        AugmentConfig {
            flip_axis: FlipAxis::Vertical,
            flip_prob: 0.5,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            target_size,
        }
    }

    /// Deterministic resize + normalize only.
    pub fn eval(target_size: (usize, usize)) -> Self {
        AugmentConfig {
            flip_axis: FlipAxis::None,
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            target_size,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(DataError::Config(format!("flip_prob {} outside [0,1]", self.flip_prob)));
        }
        let (h, w) = self.target_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(DataError::Config(format!("target size {h}x{w} must be a multiple of 32")));
        }
        for (name, v) in [("brightness", self.brightness), ("contrast", self.contrast), ("saturation", self.saturation)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DataError::Config(format!("{name} range {v} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// Image (3, H, W) in [0, 1] before normalization.
fn image_to_chw(image: &RgbImage) -> Array3<f32> {
    let (w, h) = image.dimensions();
    let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, p) in image.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = p.0[c] as f32 / 255.0;
        }
    }
    out
}

fn mask_to_chw(mask: &GrayImage) -> Array3<f32> {
    let (w, h) = mask.dimensions();
    let mut out = Array3::<f32>::zeros((1, h as usize, w as usize));
    for (x, y, p) in mask.enumerate_pixels() {
        out[[0, y as usize, x as usize]] = p.0[0] as f32;
    }
    out
}

/// Preprocess one sample into a normalized image tensor (3, H, W) and a
/// binary mask tensor (1, H, W).
///
/// Pipeline, in order: bilinear-resize image / nearest-resize mask to the
/// target, joint flip with the configured probability, color jitter on the
/// image only, per-channel normalization. All randomness comes from `rng`;
/// the flip coin and the three jitter factors are always drawn, in that
/// order, so the rng stream advances identically whether or not a step
/// applies.
pub fn preprocess(
    sample: &Sample,
    aug: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> (Array3<f32>, Array3<f32>) {
    let (th, tw) = aug.target_size;
    let mut img = resize_chw(&image_to_chw(&sample.image), th, tw, ResizeFilter::Bilinear);
    let mut mask = resize_chw(&mask_to_chw(&sample.mask), th, tw, ResizeFilter::Nearest);

    let coin: f64 = rng.gen();
    let unit = |rng: &mut ChaCha8Rng, range: f64| {
        let u: f64 = rng.gen();
        (1.0 - range + 2.0 * range * u) as f32
    };
    let b = unit(rng, aug.brightness);
    let c = unit(rng, aug.contrast);
    let s = unit(rng, aug.saturation);

    if coin < aug.flip_prob && aug.flip_axis != FlipAxis::None {
        let vertical = aug.flip_axis == FlipAxis::Vertical;
        flip_chw(&mut img, vertical);
        flip_chw(&mut mask, vertical);
    }
    adjust_brightness(&mut img, b);
    adjust_contrast(&mut img, c);
    adjust_saturation(&mut img, s);

    for ci in 0..3 {
        let mean = NORM_MEAN[ci];
        let std = NORM_STD[ci];
        img.index_axis_mut(ndarray::Axis(0), ci)
            .mapv_inplace(|v| (v - mean) / std);
    }
    (img, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngutil::{stream_rng, Purpose};

    fn checker_sample(id: &str, w: u32, h: u32) -> Sample {
        let image = RgbImage::from_fn(w, h, |x, y| {
            image::Rgb([(x * 37 % 256) as u8, (y * 11 % 256) as u8, ((x + y) % 256) as u8])
        });
        let mask = GrayImage::from_fn(w, h, |x, _| image::Luma([u8::from(x < w / 2)]));
        Sample { id: id.into(), image, mask }
    }

    fn write_sample(dir: &Path, spec: &CorpusSpec, s: &Sample, mask_values: impl Fn(u8) -> u8) {
        std::fs::create_dir_all(dir.join(&spec.image_dir)).unwrap();
        std::fs::create_dir_all(dir.join(&spec.mask_dir)).unwrap();
        s.image.save(dir.join(&spec.image_dir).join(format!("{}.png", s.id))).unwrap();
        let mut m = s.mask.clone();
        for p in m.pixels_mut() {
            p.0[0] = mask_values(p.0[0]);
        }
        m.save(dir.join(&spec.mask_dir).join(format!("{}.png", s.id))).unwrap();
    }

    #[test]
    fn corpus_loads_in_lexicographic_order_and_binarizes_at_128() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec::new(dir.path());
        for id in ["b", "a", "c"] {
            // Positive pixels become 200 (-> 1), negatives 100 (-> 0).
            write_sample(dir.path(), &spec, &checker_sample(id, 8, 6), |v| if v > 0 { 200 } else { 100 });
        }
        let samples = load_corpus(&spec).unwrap();
        assert_eq!(samples.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
        for s in &samples {
            assert!(s.mask.pixels().any(|p| p.0[0] == 1));
            assert!(s.mask.pixels().all(|p| p.0[0] <= 1));
        }
    }

    #[test]
    fn unpaired_images_are_reported_by_stem() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec::new(dir.path());
        write_sample(dir.path(), &spec, &checker_sample("a", 4, 4), |v| v * 255);
        let orphan = checker_sample("orphan", 4, 4);
        std::fs::create_dir_all(dir.path().join(&spec.image_dir)).unwrap();
        orphan
            .image
            .save(dir.path().join(&spec.image_dir).join("orphan.png"))
            .unwrap();
        match load_corpus(&spec) {
            Err(DataError::Unpaired { missing_masks, missing_images }) => {
                assert_eq!(missing_masks, vec!["orphan".to_string()]);
                assert!(missing_images.is_empty());
            }
            other => panic!("expected unpaired error, got {:?}", other.map(|v| v.len())),
        }
    }

    #[test]
    fn binarize_is_idempotent() {
        for v in 0..=255u8 {
            assert_eq!(binarize(binarize(v)), binarize(v));
        }
        assert_eq!(binarize(200), 255);
        assert_eq!(binarize(100), 0);
        assert_eq!(binarize(128), 255);
    }

    #[test]
    fn preprocess_resizes_and_is_deterministic_without_augmentation() {
        let sample = checker_sample("s", 64, 48);
        let aug = AugmentConfig::eval((32, 32));
        let mut r1 = stream_rng(1, Purpose::Augment, 0);
        let mut r2 = stream_rng(99, Purpose::Augment, 12345);
        let (i1, m1) = preprocess(&sample, &aug, &mut r1);
        let (i2, m2) = preprocess(&sample, &aug, &mut r2);
        assert_eq!(i1.dim(), (3, 32, 32));
        assert_eq!(m1.dim(), (1, 32, 32));
        assert_eq!(i1, i2);
        assert_eq!(m1, m2);
        assert!(m1.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn flip_moves_image_and_mask_together() {
        // Mark the top-left corner in both image and mask and force a flip.
        let mut sample = checker_sample("s", 32, 32);
        sample.image = RgbImage::from_fn(32, 32, |x, y| {
            image::Rgb(if x < 4 && y < 4 { [255, 255, 255] } else { [0, 0, 0] })
        });
        sample.mask = GrayImage::from_fn(32, 32, |x, y| image::Luma([u8::from(x < 4 && y < 4)]));
        let mut aug = AugmentConfig::train((32, 32));
        aug.flip_prob = 1.0;
        aug.brightness = 0.0;
        aug.contrast = 0.0;
        aug.saturation = 0.0;
        let mut rng = stream_rng(7, Purpose::Augment, 3);
        let (img, mask) = preprocess(&sample, &aug, &mut rng);
        // Vertical flip sends the marker to the bottom-left.
        assert!(mask[[0, 31, 0]] == 1.0 && mask[[0, 0, 0]] == 0.0);
        let bright_corner = img[[0, 31, 0]];
        let dark_corner = img[[0, 0, 0]];
        assert!(bright_corner > dark_corner);
    }
}
