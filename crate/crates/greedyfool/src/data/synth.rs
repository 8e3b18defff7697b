//! Deterministic synthetic image classification data.
//!
//! All classes share one smooth background field; each class adds a few
//! localized intensity blobs at class-specific positions. Samples are
//! shifted, brightness-jittered, noisy copies. The class evidence is
//! concentrated in a small fraction of the pixels, so a small CNN
//! separates the classes easily while sparse attacks stay genuinely
//! sparse — the operating regime the attack experiments assume.

use super::LabeledImageSet;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct SynthConfig {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
    /// Class-specific blobs per prototype.
    pub blobs: usize,
    /// Blob radius in pixels (gaussian falloff scale).
    pub blob_radius: f64,
    /// Peak amplitude of the strongest blob.
    pub blob_amplitude: f64,
    /// Geometric decay of successive blob amplitudes; a value below 1
    /// gives each class evidence at several strengths, so pixel
    /// importance spans orders of magnitude like in natural images.
    pub blob_decay: f64,
    /// Uniform per-pixel noise amplitude.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 10,
            height: 28,
            width: 28,
            train: 3000,
            test: 1000,
            seed: 42,
            blobs: 8,
            blob_radius: 1.1,
            blob_amplitude: 90.0,
            blob_decay: 0.7,
            noise: 12.0,
        }
    }
}

/// Bilinear upsample of a coarse grid to (h, w).
fn upsample(coarse: &[f64], ch: usize, cw: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = y as f64 / (h - 1) as f64 * (ch - 1) as f64;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(ch - 1);
        let ty = fy - y0 as f64;
        for x in 0..w {
            let fx = x as f64 / (w - 1) as f64 * (cw - 1) as f64;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(cw - 1);
            let tx = fx - x0 as f64;
            let a = coarse[y0 * cw + x0] * (1.0 - tx) + coarse[y0 * cw + x1] * tx;
            let b = coarse[y1 * cw + x0] * (1.0 - tx) + coarse[y1 * cw + x1] * tx;
            out[y * w + x] = a * (1.0 - ty) + b * ty;
        }
    }
    out
}

fn prototypes(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    // one shared gently varying mid-tone background for every class; the
    // gain jitter in `sample` forces classifiers to ignore its level, so
    // class evidence lives almost entirely in the blobs
    let coarse: Vec<f64> = (0..49).map(|_| rng.gen_range(120.0..136.0)).collect();
    let base = upsample(&coarse, 7, 7, cfg.height, cfg.width);
    let margin = cfg.blob_radius.ceil() as usize + 2;
    (0..cfg.classes)
        .map(|_| {
            let mut proto = base.clone();
            for b in 0..cfg.blobs {
                let cy = rng.gen_range(margin..cfg.height - margin) as f64;
                let cx = rng.gen_range(margin..cfg.width - margin) as f64;
                let strength = cfg.blob_amplitude * cfg.blob_decay.powi(b as i32);
                let amp = if rng.gen_bool(0.5) { strength } else { -strength };
                for y in 0..cfg.height {
                    for x in 0..cfg.width {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        let fall = (-d2 / (2.0 * cfg.blob_radius * cfg.blob_radius)).exp();
                        proto[y * cfg.width + x] += amp * fall;
                    }
                }
            }
            proto
        })
        .collect()
}

fn sample(proto: &[f64], cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (h, w) = (cfg.height, cfg.width);
    let dy = rng.gen_range(-2isize..=2);
    let dx = rng.gen_range(-2isize..=2);
    let gain = rng.gen_range(0.92..1.08);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
            let sx = (x as isize - dx).rem_euclid(w as isize) as usize;
            let noise = rng.gen_range(-cfg.noise..cfg.noise);
            out[y * w + x] = (proto[sy * w + sx] * gain + noise).clamp(0.0, 255.0);
        }
    }
    out
}

/// Generate a (train, test) pair of labeled sets.
pub fn generate(cfg: &SynthConfig) -> (LabeledImageSet, LabeledImageSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let protos = prototypes(cfg, &mut rng);
    let make = |count: usize, split: &str, rng: &mut ChaCha8Rng| {
        let mut images = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let class = i % cfg.classes;
            let data = sample(&protos[class], cfg, rng);
            images.push(Tensor::new(vec![1, cfg.height, cfg.width], data).expect("synth shape"));
            labels.push(class);
        }
        LabeledImageSet::new(images, labels, cfg.classes, split, "synthetic").unwrap()
    };
    let train = make(cfg.train, "train", &mut rng);
    let test = make(cfg.test, "test", &mut rng);
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_fixed_seed() {
        let cfg = SynthConfig {
            train: 20,
            test: 10,
            ..Default::default()
        };
        let (a, _) = generate(&cfg);
        let (b, _) = generate(&cfg);
        assert_eq!(a.images[7].data(), b.images[7].data());
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn values_in_range_and_shapes_consistent() {
        let cfg = SynthConfig {
            train: 30,
            test: 5,
            ..Default::default()
        };
        let (train, test) = generate(&cfg);
        assert_eq!(train.len(), 30);
        assert_eq!(test.len(), 5);
        for im in train.images.iter().chain(&test.images) {
            assert_eq!(im.shape(), &[1, 28, 28]);
            assert!(im.data().iter().all(|&v| (0.0..=255.0).contains(&v)));
        }
    }

    #[test]
    fn classes_differ_only_locally() {
        // blob construction: most pixels of two class prototypes agree
        let cfg = SynthConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let protos = prototypes(&cfg, &mut rng);
        let near = protos[0]
            .iter()
            .zip(&protos[1])
            .filter(|(a, b)| (*a - *b).abs() < 1.0)
            .count();
        assert!(near > 28 * 28 / 2, "blobs cover too much: {near}");
    }
}
