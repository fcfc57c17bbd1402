//! Procedurally rendered shapes: a small, fast, fully deterministic stand-in
//! for the benchmark datasets.
//!
//! Each class is a parametric pattern (disk, cross, stripes, ...) drawn with
//! a jittered center and scale, random foreground/background colors and
//! additive Gaussian noise. Colors vary independently of the class, so raw
//! pixel distances are a poor class signal while the shape is easy for a
//! small conv net.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DatasetSplit, ImageSet};
use crate::error::{Error, Result};

pub const MAX_SYNTHETIC_CLASSES: usize = 10;
const NOISE_STD: f64 = 0.08;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticConfig {
    pub class_count: usize,
    /// Train examples per class.
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Validation and test examples per class; defaults to `per_class / 4`.
    pub holdout_per_class: Option<usize>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            class_count: 3,
            per_class: 200,
            image_size: 16,
            seed: 7,
            holdout_per_class: None,
        }
    }
}

impl SyntheticConfig {
    pub fn holdout(&self) -> usize {
        self.holdout_per_class.unwrap_or((self.per_class / 4).max(1))
    }
}

/// `class_count * per_class` train images plus validation/test holdouts.
pub fn synthetic_shapes(class_count: usize, per_class: usize, image_size: usize, seed: u64) -> Result<DatasetSplit> {
    render(&SyntheticConfig {
        class_count,
        per_class,
        image_size,
        seed,
        holdout_per_class: None,
    })
}

/// Pattern membership for class `class` at offset `(u, v)` from the center,
/// in units of the shape radius.
fn inside(class: usize, u: f64, v: f64) -> bool {
    let box1 = u.abs() <= 1.0 && v.abs() <= 1.0;
    let r = (u * u + v * v).sqrt();
    match class {
        0 => r <= 1.0,
        1 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        2 => box1 && ((v + 1.0) * 2.5).floor() as i64 % 2 == 0,
        3 => (0.55..=1.0).contains(&r),
        4 => box1 && u.abs().max(v.abs()) >= 0.6,
        5 => box1 && ((u + 1.0) * 2.5).floor() as i64 % 2 == 0,
        6 => box1 && (u.abs() - v.abs()).abs() <= 0.3,
        7 => v.abs() <= 1.0 && u.abs() <= (v + 1.0) / 2.0,
        8 => box1 && (((u + 1.0) * 2.0).floor() as i64 + ((v + 1.0) * 2.0).floor() as i64) % 2 == 0,
        _ => (u - 0.5).powi(2) + v * v <= 0.16 || (u + 0.5).powi(2) + v * v <= 0.16,
    }
}

fn render_image(class: usize, size: usize, rng: &mut ChaCha8Rng, noise: &Normal<f64>) -> Vec<u8> {
    let s = size as f64;
    let jitter = s / 8.0;
    let cx = s / 2.0 + rng.random_range(-jitter..=jitter);
    let cy = s / 2.0 + rng.random_range(-jitter..=jitter);
    let radius = rng.random_range(0.55..=0.8) * s / 2.0;
    let fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..=1.0));
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..=0.35));
    // 2x2 supersampled coverage
    let mut coverage = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0;
            for (dy, dx) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let u = (x as f64 + dx - cx) / radius;
                let v = (y as f64 + dy - cy) / radius;
                if inside(class, u, v) {
                    hits += 1;
                }
            }
            coverage[y * size + x] = f64::from(hits) / 4.0;
        }
    }
    let mut out = Vec::with_capacity(3 * size * size);
    for ch in 0..3 {
        for &a in &coverage {
            let v = bg[ch] + a * (fg[ch] - bg[ch]) + noise.sample(rng);
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

fn render_set(cfg: &SyntheticConfig, per_class: usize, stream: u64) -> Result<ImageSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let total = per_class * cfg.class_count;
    let mut pixels = Vec::with_capacity(total * 3 * cfg.image_size * cfg.image_size);
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let class = i % cfg.class_count;
        pixels.extend(render_image(class, cfg.image_size, &mut rng, &noise));
        labels.push(class);
    }
    if total == 0 {
        return Ok(ImageSet::empty([3, cfg.image_size, cfg.image_size]));
    }
    ImageSet::new([3, cfg.image_size, cfg.image_size], pixels, labels)
}

pub(crate) fn render(cfg: &SyntheticConfig) -> Result<DatasetSplit> {
    if cfg.class_count < 2 {
        return Err(Error::Usage(format!(
            "synthetic data needs at least 2 classes for triplets, got {}",
            cfg.class_count
        )));
    }
    if cfg.class_count > MAX_SYNTHETIC_CLASSES {
        return Err(Error::Usage(format!(
            "synthetic data has {MAX_SYNTHETIC_CLASSES} patterns, {} classes requested",
            cfg.class_count
        )));
    }
    if cfg.image_size < 8 {
        return Err(Error::Usage(format!("synthetic image size {} below 8", cfg.image_size)));
    }
    if cfg.per_class == 0 {
        return Err(Error::Usage("synthetic per_class must be positive".into()));
    }
    Ok(DatasetSplit {
        name: "synthetic".into(),
        train: render_set(cfg, cfg.per_class, 0)?,
        validation: render_set(cfg, cfg.holdout(), 1)?,
        test: render_set(cfg, cfg.holdout(), 2)?,
        class_count: cfg.class_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_follow_the_arguments() {
        let split = synthetic_shapes(3, 200, 16, 7).unwrap();
        assert_eq!(split.train.len(), 600);
        assert_eq!(split.class_count, 3);
        assert_eq!(split.train.class_counts(3), vec![200; 3]);
        assert_eq!(split.test.len(), 150);
        assert_eq!(split.image_shape(), [3, 16, 16]);
        split.check_invariants().unwrap();
    }

    #[test]
    fn same_seed_is_bit_identical() {
        assert_eq!(synthetic_shapes(4, 10, 12, 3).unwrap(), synthetic_shapes(4, 10, 12, 3).unwrap());
        assert_ne!(synthetic_shapes(4, 10, 12, 3).unwrap(), synthetic_shapes(4, 10, 12, 4).unwrap());
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(synthetic_shapes(1, 10, 16, 0).is_err());
        assert!(synthetic_shapes(3, 10, 4, 0).is_err());
        assert!(synthetic_shapes(11, 10, 16, 0).is_err());
    }

    #[test]
    fn class_means_differ_in_shape_not_just_noise() {
        // average coverage masks of two classes differ noticeably
        let split = synthetic_shapes(2, 100, 16, 1).unwrap();
        let mean = |class: usize| -> Vec<f64> {
            let idx: Vec<usize> = (0..split.train.len()).filter(|&i| split.train.label(i) == class).collect();
            let b = split.train.batch(&idx);
            let per = b.row_len();
            (0..per).map(|j| (0..idx.len()).map(|i| b.row(i)[j]).sum::<f64>() / idx.len() as f64).collect()
        };
        let (a, b) = (mean(0), mean(1));
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
        assert!(diff > 0.01, "mean abs difference {diff}");
    }
}
