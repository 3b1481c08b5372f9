//! Procedural single-channel image classification data.
//!
//! Each class is a family of patterns (bars of some orientation, blobs,
//! checkerboards, rings) with random frequency, phase and position, plus
//! Gaussian pixel noise. Pixels are clamped to `[0, 1]`.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::DataConfig;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

pub const MAX_CLASSES: usize = 6;

/// Fraction of samples in the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    /// `(n, size, size, 1)`.
    pub images: Tensor4<f32>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gather the listed samples into a batch.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Tensor4<T>, Vec<usize>) {
        let [_, h, w, c] = self.images.shape();
        let item = h * w * c;
        let mut data = Vec::with_capacity(indices.len() * item);
        for &i in indices {
            data.extend(self.images.item(i).iter().map(|&v| T::of(v as f64)));
        }
        let x = Tensor4::from_vec([indices.len(), h, w, c], data).expect("consistent batch");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub train: Split,
    pub test: Split,
    pub classes: usize,
}

fn pattern(class: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = size as f64;
    let period = rng.random_range(3.0..5.0);
    let phase = rng.random_range(0.0..period);
    let bars = |t: f64| 0.5 + 0.5 * (2.0 * PI * (t + phase) / period).sin();
    let (cx, cy) = (rng.random_range(0.25 * s..0.75 * s), rng.random_range(0.25 * s..0.75 * s));
    let spread = rng.random_range(0.12 * s..0.2 * s);
    let cell = rng.random_range(2..=3);
    let (px, py) = (rng.random_range(0..cell), rng.random_range(0..cell));
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let d2 = (xf - cx).powi(2) + (yf - cy).powi(2);
            out.push(match class {
                0 => bars(yf),
                1 => bars(xf),
                2 => (-d2 / (2.0 * spread * spread)).exp(),
                3 => (((x + px) / cell + (y + py) / cell) % 2) as f64,
                4 => bars((xf + yf) / std::f64::consts::SQRT_2),
                _ => 0.5 + 0.5 * (2.0 * PI * d2.sqrt() / period).cos(),
            });
        }
    }
    out
}

/// Deterministic dataset for `cfg`, split 80/20 into train and held-out sets.
pub fn generate_dataset(cfg: &DataConfig) -> Result<SyntheticDataset> {
    if cfg.classes < 2 || cfg.classes > MAX_CLASSES {
        return Err(Error::config(
            "data.classes",
            format!("must lie in 2..={MAX_CLASSES}"),
        ));
    }
    if cfg.samples < cfg.classes {
        return Err(Error::config("data.samples", "must be at least data.classes"));
    }
    if cfg.size < 4 {
        return Err(Error::config("data.size", "must be at least 4"));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::config("data.noise", "must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut labels: Vec<usize> = (0..cfg.samples).map(|i| i % cfg.classes).collect();
    labels.shuffle(&mut rng);
    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let px = cfg.size * cfg.size;
    let mut pixels = Vec::with_capacity(cfg.samples * px);
    for &label in &labels {
        for v in pattern(label, cfg.size, &mut rng) {
            let n = if cfg.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            pixels.push((v + n).clamp(0.0, 1.0) as f32);
        }
    }
    let n_train = ((cfg.samples as f64 * TRAIN_FRACTION).round() as usize).clamp(1, cfg.samples);
    let split = |range: std::ops::Range<usize>| Split {
        images: Tensor4::from_vec(
            [range.len(), cfg.size, cfg.size, 1],
            pixels[range.start * px..range.end * px].to_vec(),
        )
        .expect("consistent split"),
        labels: labels[range].to_vec(),
    };
    Ok(SyntheticDataset {
        train: split(0..n_train),
        test: split(n_train..cfg.samples),
        classes: cfg.classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let cfg = DataConfig::default();
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 320);
        assert_eq!(a.test.len(), 80);
        let mut counts = [0usize; 4];
        for &l in a.train.labels.iter().chain(&a.test.labels) {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c.abs_diff(100) <= 1));
        assert!(a.train.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let other = generate_dataset(&DataConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn rejects_bad_sizes() {
        let bad = DataConfig {
            classes: 1,
            ..DataConfig::default()
        };
        assert!(matches!(generate_dataset(&bad), Err(Error::Config { .. })));
        let few = DataConfig {
            samples: 2,
            ..DataConfig::default()
        };
        assert!(generate_dataset(&few).is_err());
    }
}
