//! Per-pixel modification-visibility maps, produced either by a small
//! GAN (generator learns where noise hides) or by a hand-crafted
//! local-variance fallback.

use crate::data::LabeledImageSet;
use crate::nn::{Arch, InputSpec, Model, Optimizer, TrainConfig};
use crate::tape::Tape;
use crate::tensor::{Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Clamp applied inside log terms.
const SCORE_ETA: f64 = 1e-6;
/// Squash bounds keeping the variance map inside the open interval.
const RHO_ETA: f64 = 0.01;

#[derive(Debug, Error)]
pub enum DistortionError {
    #[error("map value {value} at ({row},{col}) outside (0,1)")]
    OutOfRange { value: f64, row: usize, col: usize },
    #[error("map must be [H,W], got {shape:?}")]
    BadShape { shape: Vec<usize> },
    #[error("GAN training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Per-pixel visibility of modification; higher means edits there are
/// easier to see. Strictly inside (0,1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistortionMap {
    values: Tensor,
}

impl DistortionMap {
    pub fn new(values: Tensor) -> Result<Self, DistortionError> {
        if values.shape().len() != 2 {
            return Err(DistortionError::BadShape {
                shape: values.shape().to_vec(),
            });
        }
        let w = values.shape()[1];
        for (i, &v) in values.data().iter().enumerate() {
            if !(v > 0.0 && v < 1.0) {
                return Err(DistortionError::OutOfRange {
                    value: v,
                    row: i / w,
                    col: i % w,
                });
            }
        }
        Ok(DistortionMap { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn mean(&self) -> f64 {
        self.values.mean()
    }

    /// Grayscale [1,H,W] rendering on the [0,255] scale for export.
    pub fn to_image(&self) -> Tensor {
        let (h, w) = (self.height(), self.width());
        Tensor::new(
            vec![1, h, w],
            self.values.data().iter().map(|&v| v * 255.0).collect(),
        )
        .expect("map image")
    }
}

/// Training knobs for the distortion GAN. Noise amplitude and images are
/// on the [0,1] scale inside this module.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GanConfig {
    /// Uniform noise amplitude, default 8/255.
    pub delta: f64,
    /// Regularization weight on the mean map value, default 1e-5.
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Generator/discriminator base feature width.
    pub features: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            delta: 8.0 / 255.0,
            lambda: 1e-5,
            learning_rate: 2e-3,
            batch_size: 16,
            epochs: 20,
            seed: 42,
            features: 8,
        }
    }
}

/// x' = Clip((1 - rho) * n + x) into [0,1]. x is [C,H,W] on the [0,1]
/// scale, noise n has the same shape, rho broadcasts across channels.
pub fn perturb_for_training(
    x: &Tensor,
    rho: &DistortionMap,
    n: &Tensor,
) -> Result<Tensor, TensorError> {
    if x.shape() != n.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "perturb_for_training",
            lhs: x.shape().to_vec(),
            rhs: n.shape().to_vec(),
        });
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if rho.height() != h || rho.width() != w {
        return Err(TensorError::ShapeMismatch {
            op: "perturb_for_training",
            lhs: x.shape().to_vec(),
            rhs: rho.values().shape().to_vec(),
        });
    }
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h * w {
            let idx = ch * h * w + i;
            let v = x.data()[idx] + (1.0 - rho.values().data()[i]) * n.data()[idx];
            out[idx] = v.clamp(0.0, 1.0);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn clamp_score(s: f64) -> f64 {
    s.clamp(SCORE_ETA, 1.0 - SCORE_ETA)
}

/// L_D = -(2 log D(x) + log(1 - D(x')) + log(1 - D(x''))).
pub fn discriminator_loss(score_real: f64, score_partial: f64, score_global: f64) -> f64 {
    let (dr, dp, dg) = (
        clamp_score(score_real),
        clamp_score(score_partial),
        clamp_score(score_global),
    );
    -(2.0 * dr.ln() + (1.0 - dp).ln() + (1.0 - dg).ln())
}

/// L_G = -log D(x') + lambda * mean(rho).
pub fn generator_loss(score_partial: f64, rho_mean: f64, lambda: f64) -> f64 {
    -clamp_score(score_partial).ln() + lambda * rho_mean
}

/// Run the generator over one [C,H,W] image on the [0,255] scale.
pub fn generate_map(generator: &Model, x: &Tensor) -> Result<DistortionMap, DistortionError> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let x01 = Tensor::new(
        vec![1, c, h, w],
        x.data().iter().map(|&v| v / 255.0).collect(),
    )?;
    let out = generator.forward_nograd(&x01)?;
    let values = out.reshape(&[h, w])?;
    // sigmoid keeps values in (0,1); saturation to exactly 0/1 cannot
    // happen in finite arithmetic, but clamp defensively before the
    // invariant check
    let values = values.map(|v| v.clamp(SCORE_ETA, 1.0 - SCORE_ETA));
    DistortionMap::new(values)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GanTrainReport {
    pub epoch_d_losses: Vec<f64>,
    pub epoch_g_losses: Vec<f64>,
    pub initial_mean_rho: f64,
    pub final_mean_rho: f64,
}

fn mean_rho_over(generator: &Model, set: &LabeledImageSet) -> f64 {
    let mut total = 0.0;
    for im in &set.images {
        total += generate_map(generator, im).map(|m| m.mean()).unwrap_or(0.5);
    }
    total / set.len() as f64
}

/// Minimax training of the distortion generator: the
/// discriminator separates clean from partially/globally perturbed
/// images; the generator learns where noise can hide.
pub fn train_distortion_gan(
    set: &LabeledImageSet,
    cfg: &GanConfig,
) -> Result<(Model, GanTrainReport), DistortionError> {
    assert!(!set.is_empty(), "empty dataset");
    let shape = set.image_shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let spec01 = InputSpec {
        channels: c,
        height: h,
        width: w,
        scale: 1.0,
    };
    let mut generator = Model::new(spec01, Arch::Generator { features: cfg.features }, cfg.seed);
    let mut discriminator = Model::new(
        spec01,
        Arch::Discriminator { features: cfg.features },
        cfg.seed.wrapping_add(1),
    );

    let train_cfg = TrainConfig {
        learning_rate: cfg.learning_rate,
        ..Default::default()
    };
    let mut g_opt = Optimizer::new(&train_cfg);
    let mut d_opt = Optimizer::new(&train_cfg);

    let initial_mean_rho = mean_rho_over(&generator, set);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x67616e));
    let mut epoch_d_losses = Vec::new();
    let mut epoch_g_losses = Vec::new();

    let per_image = c * h * w;
    for epoch in 0..cfg.epochs {
        let mut d_total = 0.0;
        let mut g_total = 0.0;
        let mut batches = 0usize;
        let mut i = 0;
        while i < set.len() {
            let idx: Vec<usize> = (i..(i + cfg.batch_size).min(set.len())).collect();
            i += cfg.batch_size;
            let b = idx.len();
            let raw = set.batch(&idx);
            let x01 = raw.map(|v| v / 255.0);
            let noise = Tensor::new(
                x01.shape().to_vec(),
                (0..b * per_image)
                    .map(|_| rng.gen_range(-cfg.delta..cfg.delta))
                    .collect(),
            )?;

            // ---- discriminator step (generator frozen) ----
            let rho = generator.forward_nograd(&x01)?; // [B,1,H,W]
            let mut x_partial = vec![0.0; b * per_image];
            for bi in 0..b {
                for ch in 0..c {
                    for p in 0..h * w {
                        let idx = (bi * c + ch) * h * w + p;
                        let r = rho.data()[bi * h * w + p];
                        x_partial[idx] =
                            (x01.data()[idx] + (1.0 - r) * noise.data()[idx]).clamp(0.0, 1.0);
                    }
                }
            }
            let x_partial = Tensor::new(x01.shape().to_vec(), x_partial)?;
            let x_global = x01.zip_map(&noise, "gan_global", |a, b| a + b)?;

            let mut tape = Tape::new();
            let real = discriminator.forward_on_tape(&mut tape, &x01)?;
            let partial = discriminator.forward_on_tape(&mut tape, &x_partial)?;
            let global = discriminator.forward_on_tape(&mut tape, &x_global)?;
            let log_real = {
                let cl = tape.clamp(real.output, SCORE_ETA, 1.0 - SCORE_ETA);
                let lg = tape.log(cl);
                tape.reduce_mean(lg)
            };
            let log_one_minus = |tape: &mut Tape, node| {
                let ones = tape.input(Tensor::ones(&[b, 1]));
                let diff = tape.sub(ones, node).expect("shape");
                let cl = tape.clamp(diff, SCORE_ETA, 1.0 - SCORE_ETA);
                let lg = tape.log(cl);
                tape.reduce_mean(lg)
            };
            let lp = log_one_minus(&mut tape, partial.output);
            let lg = log_one_minus(&mut tape, global.output);
            let two_real = tape.scalar_mul(log_real, 2.0);
            let s1 = tape.add(two_real, lp)?;
            let s2 = tape.add(s1, lg)?;
            let d_loss = tape.scalar_mul(s2, -1.0);
            let d_loss_val = tape.value(d_loss).item();
            if !d_loss_val.is_finite() {
                return Err(DistortionError::Diverged { epoch });
            }
            let mut grads = tape.backward(d_loss, &Tensor::scalar(1.0))?;
            let mut d_grads = std::collections::BTreeMap::new();
            for pass in [&real, &partial, &global] {
                for (name, node) in &pass.params {
                    let g = grads.take(&tape, *node);
                    d_grads
                        .entry(name.clone())
                        .and_modify(|acc: &mut Tensor| {
                            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        })
                        .or_insert(g);
                }
            }
            d_opt.step(&mut discriminator.params, &d_grads);

            // ---- generator step (discriminator frozen) ----
            let mut tape = Tape::new();
            let gen = generator.forward_on_tape(&mut tape, &x01)?;
            let rho_full = tape.repeat_channels(gen.output, c)?;
            let ones = tape.input(Tensor::ones(&[b, c, h, w]));
            let inv_rho = tape.sub(ones, rho_full)?;
            let n_node = tape.input(noise.clone());
            let scaled_noise = tape.mul(inv_rho, n_node)?;
            let x_node = tape.input(x01.clone());
            let perturbed = tape.add(x_node, scaled_noise)?;
            let clipped = tape.clamp(perturbed, 0.0, 1.0);
            // rebuild the discriminator graph on the perturbed node so
            // gradients flow into the generator; forward_on_tape would
            // re-insert the input as a leaf
            let d_pass = discriminator_forward_linked(&discriminator, &mut tape, clipped)?;
            let cl = tape.clamp(d_pass, SCORE_ETA, 1.0 - SCORE_ETA);
            let lg = tape.log(cl);
            let adv_term = {
                let m = tape.reduce_mean(lg);
                tape.scalar_mul(m, -1.0)
            };
            let reg_term = {
                let m = tape.reduce_mean(gen.output);
                tape.scalar_mul(m, cfg.lambda)
            };
            let g_loss = tape.add(adv_term, reg_term)?;
            let g_loss_val = tape.value(g_loss).item();
            if !g_loss_val.is_finite() {
                return Err(DistortionError::Diverged { epoch });
            }
            let mut grads = tape.backward(g_loss, &Tensor::scalar(1.0))?;
            let mut g_grads = std::collections::BTreeMap::new();
            for (name, node) in &gen.params {
                g_grads.insert(name.clone(), grads.take(&tape, *node));
            }
            g_opt.step(&mut generator.params, &g_grads);

            d_total += d_loss_val;
            g_total += g_loss_val;
            batches += 1;
        }
        epoch_d_losses.push(d_total / batches.max(1) as f64);
        epoch_g_losses.push(g_total / batches.max(1) as f64);
    }

    let final_mean_rho = mean_rho_over(&generator, set);
    Ok((
        generator,
        GanTrainReport {
            epoch_d_losses,
            epoch_g_losses,
            initial_mean_rho,
            final_mean_rho,
        },
    ))
}

/// Discriminator forward where the input is an existing tape node, so the
/// generator upstream of it receives gradients.
fn discriminator_forward_linked(
    disc: &Model,
    tape: &mut Tape,
    input: crate::tape::NodeId,
) -> Result<crate::tape::NodeId, TensorError> {
    let p = |tape: &mut Tape, name: &str| tape.input(disc.params[name].clone());
    let w1 = p(tape, "d1.w");
    let b1 = p(tape, "d1.b");
    let w2 = p(tape, "d2.w");
    let b2 = p(tape, "d2.b");
    let w3 = p(tape, "d3.w");
    let b3 = p(tape, "d3.b");
    let fw = p(tape, "fc.w");
    let fb = p(tape, "fc.b");
    let mut h = tape.conv2d(input, w1, 2, 1)?;
    h = tape.bias_add_channels(h, b1)?;
    h = tape.leaky_relu(h, 0.2);
    h = tape.conv2d(h, w2, 2, 1)?;
    h = tape.bias_add_channels(h, b2)?;
    h = tape.leaky_relu(h, 0.2);
    h = tape.conv2d(h, w3, 2, 1)?;
    h = tape.bias_add_channels(h, b3)?;
    h = tape.leaky_relu(h, 0.2);
    h = tape.flatten(h)?;
    h = tape.matmul(h, fw)?;
    h = tape.bias_add_rows(h, fb)?;
    Ok(tape.sigmoid(h))
}

/// Hand-crafted fallback: low local 3x3 luminance variance means edits
/// are visible (flat areas show noise), so distortion is high there.
pub fn variance_distortion(x: &Tensor) -> DistortionMap {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    // luminance on [0,1]
    let mut lum = vec![0.0; h * w];
    for ch in 0..c {
        for i in 0..h * w {
            lum[i] += x.data()[ch * h * w + i] / (255.0 * c as f64);
        }
    }
    let mut std_dev = vec![0.0; h * w];
    for y in 0..h {
        for x0 in 0..w {
            let mut vals = Vec::with_capacity(9);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let yy = y as i64 + dy;
                    let xx = x0 as i64 + dx;
                    if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                        vals.push(lum[yy as usize * w + xx as usize]);
                    }
                }
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / vals.len() as f64;
            std_dev[y * w + x0] = var.sqrt();
        }
    }
    let max_std = std_dev.iter().cloned().fold(0.0_f64, f64::max);
    let values: Vec<f64> = std_dev
        .iter()
        .map(|&s| {
            let norm = if max_std > 0.0 { s / max_std } else { 0.0 };
            // high variance -> low distortion; squash into (RHO_ETA, 1-RHO_ETA)
            RHO_ETA + (1.0 - 2.0 * RHO_ETA) * (1.0 - norm)
        })
        .collect();
    DistortionMap::new(Tensor::new(vec![h, w], values).expect("map shape")).expect("squashed range")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perturb_limits() {
        let x = Tensor::new(vec![1, 2, 2], vec![0.5, 0.5, 0.5, 1.0]).unwrap();
        let n = Tensor::new(vec![1, 2, 2], vec![0.04, 0.04, 0.04, 0.02]).unwrap();
        // rho = 0.5 everywhere: x' = x + 0.5 * n
        let rho = DistortionMap::new(Tensor::filled(&[2, 2], 0.5)).unwrap();
        let out = perturb_for_training(&x, &rho, &n).unwrap();
        assert!((out.data()[0] - 0.52).abs() < 1e-12);
        // pixel at 1.0 with positive noise stays clipped at 1.0
        assert_eq!(out.data()[3], 1.0);

        // rho -> 1 kills the noise
        let rho1 = DistortionMap::new(Tensor::filled(&[2, 2], 1.0 - 1e-9)).unwrap();
        let out = perturb_for_training(&x, &rho1, &n).unwrap();
        for (a, b) in out.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn discriminator_loss_arithmetic() {
        // all scores 0.5 -> 4 log 2
        let l = discriminator_loss(0.5, 0.5, 0.5);
        assert!((l - 4.0 * 2.0_f64.ln()).abs() < 1e-12);
        // perfect discriminator limit -> 0 (up to the eta clamp)
        let l = discriminator_loss(1.0, 0.0, 0.0);
        assert!(l.abs() < 1e-4);
    }

    #[test]
    fn generator_loss_arithmetic() {
        assert!((generator_loss(0.5, 1.0, 0.0) - 2.0_f64.ln()).abs() < 1e-12);
        assert!((generator_loss(0.5, 1.0, 1e-5) - (2.0_f64.ln() + 1e-5)).abs() < 1e-12);
    }

    #[test]
    fn losses_match_independent_formula_on_random_scores() {
        // second, direct transcription of the formulas as oracle
        let oracle_d = |a: f64, b: f64, c: f64| {
            -(2.0 * a.ln() + (1.0 - b).ln() + (1.0 - c).ln())
        };
        let oracle_g = |s: f64, r: f64, l: f64| -(s.ln()) + l * r;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (a, b, c) = (
                rng.gen_range(0.01..0.99),
                rng.gen_range(0.01..0.99),
                rng.gen_range(0.01..0.99),
            );
            assert!((discriminator_loss(a, b, c) - oracle_d(a, b, c)).abs() < 1e-9);
            let r = rng.gen_range(0.0..1.0);
            assert!((generator_loss(a, r, 1e-5) - oracle_g(a, r, 1e-5)).abs() < 1e-9);
        }
    }

    #[test]
    fn variance_map_flat_vs_textured() {
        // constant image: maximal distortion everywhere
        let flat = Tensor::filled(&[1, 8, 8], 100.0);
        let m = variance_distortion(&flat);
        assert!(m.values().data().iter().all(|&v| v > 0.98 && v < 1.0));

        // checkerboard: near-minimal distortion everywhere
        let mut data = vec![0.0; 64];
        for y in 0..8 {
            for x in 0..8 {
                data[y * 8 + x] = if (x + y) % 2 == 0 { 255.0 } else { 0.0 };
            }
        }
        let check = Tensor::new(vec![1, 8, 8], data).unwrap();
        let m = variance_distortion(&check);
        let interior_mean: f64 = (1..7)
            .flat_map(|y| (1..7).map(move |x| (y, x)))
            .map(|(y, x)| m.values().data()[y * 8 + x])
            .sum::<f64>()
            / 36.0;
        assert!(interior_mean < 0.1, "interior mean {interior_mean}");
    }

    #[test]
    fn variance_map_half_flat_half_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut data = vec![128.0; 16 * 16];
        for y in 0..16 {
            for x in 8..16 {
                data[y * 16 + x] = rng.gen_range(0.0..255.0);
            }
        }
        let img = Tensor::new(vec![1, 16, 16], data).unwrap();
        let m = variance_distortion(&img);
        let left: f64 = (0..16)
            .flat_map(|y| (0..6).map(move |x| (y, x)))
            .map(|(y, x)| m.values().data()[y * 16 + x])
            .sum::<f64>()
            / (16.0 * 6.0);
        let right: f64 = (0..16)
            .flat_map(|y| (9..16).map(move |x| (y, x)))
            .map(|(y, x)| m.values().data()[y * 16 + x])
            .sum::<f64>()
            / (16.0 * 7.0);
        assert!(left > right, "flat {left} vs noisy {right}");
    }

    #[test]
    fn map_invariant_enforced() {
        assert!(DistortionMap::new(Tensor::filled(&[2, 2], 0.0)).is_err());
        assert!(DistortionMap::new(Tensor::filled(&[2, 2], 1.0)).is_err());
        assert!(DistortionMap::new(Tensor::filled(&[2, 2], 0.5)).is_ok());
    }
}
