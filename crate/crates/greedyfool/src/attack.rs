//! The two-stage greedy sparse attack: distortion-weighted greedy pixel
//! accumulation until adversarial, then greedy pixel dropping with a
//! uniform step-size sweep.

use crate::distortion::DistortionMap;
use crate::loss::{self, LossSpec};
use crate::nn::Model;
use crate::tensor::{Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

pub use crate::loss::{margin_loss, raw_margin, target_margin_loss};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("input to reduce stage is not adversarial")]
    NotAdversarial,
    #[error("non-finite gradient at iteration {iteration}")]
    NanGradient { iteration: usize },
    #[error("direction scaling needs a nonzero perturbation")]
    ZeroPerturbation,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// All knobs of the attack. Epsilon and pixel values live on the 0-255
/// scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Max per-channel perturbation.
    pub epsilon: f64,
    /// Iteration budget for the increase stage.
    pub max_iterations: usize,
    /// Confidence margin; > 0 demands extra logit gap and disables reduce.
    pub kappa: f64,
    /// Increase-stage step size; defaults to epsilon / 2.
    pub step_size: Option<f64>,
    /// Percentiles of the distortion map defining the weight map (hi, lo).
    pub tau_percentiles: (f64, f64),
    /// Target class for a targeted attack.
    pub target: Option<usize>,
    /// Direction ablation knob q: 0 keeps gradient direction, 100
    /// degrades to the sign direction.
    pub direction_percentile: f64,
    /// Run the reduce stage (ignored when kappa > 0).
    pub reduce: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 255.0,
            max_iterations: 200,
            kappa: 0.0,
            step_size: None,
            tau_percentiles: (70.0, 25.0),
            target: None,
            direction_percentile: 0.0,
            reduce: true,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.epsilon > 0.0 && self.epsilon <= 255.0) {
            return Err(AttackError::InvalidConfig(format!(
                "epsilon {} outside (0, 255]",
                self.epsilon
            )));
        }
        if self.max_iterations == 0 {
            return Err(AttackError::InvalidConfig("max_iterations must be >= 1".into()));
        }
        if self.kappa < 0.0 {
            return Err(AttackError::InvalidConfig("kappa must be >= 0".into()));
        }
        if !(0.0..=100.0).contains(&self.direction_percentile) {
            return Err(AttackError::InvalidConfig(
                "direction percentile outside [0, 100]".into(),
            ));
        }
        if self.tau_percentiles.0 <= self.tau_percentiles.1 {
            return Err(AttackError::InvalidConfig(
                "tau_1 percentile must exceed tau_2 percentile".into(),
            ));
        }
        Ok(())
    }

    fn alpha(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / 2.0)
    }

    /// Pixels added per iteration: fixed 1 for large epsilon, otherwise
    /// growing by 1 each iteration.
    pub fn k_at(&self, iteration: usize) -> usize {
        if self.epsilon >= 128.0 {
            1
        } else {
            iteration + 1
        }
    }

}

/// Binary field over pixels; selected pixels may carry perturbation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    pub height: usize,
    pub width: usize,
    bits: Vec<bool>,
}

impl PixelMask {
    pub fn new(height: usize, width: usize) -> Self {
        PixelMask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn set(&mut self, idx: usize) {
        self.bits[idx] = true;
    }

    pub fn get(&self, idx: usize) -> bool {
        self.bits[idx]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &PixelMask) -> bool {
        self.bits
            .iter()
            .zip(&other.bits)
            .all(|(&a, &b)| !a || b)
    }
}

/// Piecewise remap of the distortion map gating pixel selection
/// (0 above tau_1, 1 below tau_2, linear in between).
#[derive(Debug, Clone)]
pub struct PerturbWeightMap {
    pub values: Tensor,
    /// True when the map degenerated (tau_1 == tau_2) and p fell back to 1.
    pub degenerate: bool,
}

/// Linear-interpolation percentile of a sample (q in [0,100], ascending).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    debug_assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    sorted[lo] * (1.0 - t) + sorted[hi] * t
}

/// Build the perturbation weight map from a distortion map.
pub fn weight_map(rho: &DistortionMap, tau_percentiles: (f64, f64)) -> PerturbWeightMap {
    let vals = rho.values().data();
    let tau1 = percentile(vals, tau_percentiles.0);
    let tau2 = percentile(vals, tau_percentiles.1);
    if tau1 <= tau2 {
        log::warn!("degenerate distortion map (tau1 == tau2); weight map falls back to 1");
        return PerturbWeightMap {
            values: Tensor::ones(rho.values().shape()),
            degenerate: true,
        };
    }
    let values = rho.values().map(|r| {
        if r >= tau1 {
            0.0
        } else if r <= tau2 {
            1.0
        } else {
            (tau1 - r) / (tau1 - tau2)
        }
    });
    PerturbWeightMap {
        values,
        degenerate: false,
    }
}

/// Rescale a perturbation by the q-th percentile of its descending-sorted
/// nonzero magnitudes and clamp to [-1, 1]. q=0 divides by the largest
/// magnitude (pure direction); q=100 divides by the smallest (signs).
pub fn direction_ablation(r: &Tensor, q: f64) -> Result<Tensor, AttackError> {
    let mut mags: Vec<f64> = r.data().iter().filter(|v| **v != 0.0).map(|v| v.abs()).collect();
    if mags.is_empty() {
        return Err(AttackError::ZeroPerturbation);
    }
    mags.sort_by(|a, b| b.partial_cmp(a).unwrap()); // descending
    let idx = ((q / 100.0) * (mags.len() - 1) as f64).round() as usize;
    let scale = mags[idx];
    Ok(r.map(|v| (v / scale).clamp(-1.0, 1.0)))
}

/// Outcome record of one attack.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub adversarial: Tensor,
    pub perturbation: Tensor,
    pub success: bool,
    pub pixel_count: usize,
    pub increase_iterations: usize,
    pub reduce_iterations: usize,
    pub final_class: usize,
    pub final_margin: f64,
    pub increase_ms: f64,
    pub reduce_ms: f64,
    pub mask: PixelMask,
}

fn success_for(scores: &[f64], y: usize, target: Option<usize>, kappa: f64) -> bool {
    let mut argmax = 0;
    for (i, &v) in scores.iter().enumerate() {
        if v > scores[argmax] {
            argmax = i;
        }
    }
    match target {
        Some(t) => argmax == t && loss::raw_margin(scores, t) >= kappa,
        None => argmax != y && loss::raw_margin(scores, y) <= -kappa,
    }
}

/// Count pixels with any nonzero channel.
pub fn pixel_count(perturbation: &Tensor) -> usize {
    let (c, h, w) = (
        perturbation.shape()[0],
        perturbation.shape()[1],
        perturbation.shape()[2],
    );
    (0..h * w)
        .filter(|&p| (0..c).any(|ch| perturbation.data()[ch * h * w + p] != 0.0))
        .count()
}

fn mask_from_perturbation(perturbation: &Tensor) -> PixelMask {
    let (c, h, w) = (
        perturbation.shape()[0],
        perturbation.shape()[1],
        perturbation.shape()[2],
    );
    let mut m = PixelMask::new(h, w);
    for p in 0..h * w {
        if (0..c).any(|ch| perturbation.data()[ch * h * w + p] != 0.0) {
            m.set(p);
        }
    }
    m
}

/// Project candidate onto the L-inf ball of radius eps around x,
/// intersected with [0, 255].
fn clip_to_ball(x: &Tensor, candidate: &Tensor, eps: f64) -> Tensor {
    candidate
        .zip_map(x, "clip_ball", |c, orig| {
            c.clamp(orig - eps, orig + eps).clamp(0.0, 255.0)
        })
        .expect("same shape")
}

/// Snap a float trajectory point to an emittable image: the perturbation
/// is rounded to whole gray levels, so pixels nudged by less than half a
/// level revert to their original value. Success and pixel counts are
/// always judged on this quantized image — it is the one that survives
/// being written to disk.
fn quantize(x: &Tensor, x_adv: &Tensor, eps: f64) -> Tensor {
    let rounded = x_adv
        .zip_map(x, "quantize", |a, orig| orig + (a - orig).round())
        .expect("same shape");
    clip_to_ball(x, &rounded, eps)
}

pub struct IncreaseOutcome {
    pub x_adv: Tensor,
    pub mask: PixelMask,
    pub iterations: usize,
    pub success: bool,
}

/// Stage 1: greedily add top-saliency pixels and step all selected pixels
/// along the (masked, max-normalized) descent direction until adversarial.
pub fn increase_stage(
    model: &Model,
    x: &Tensor,
    y: usize,
    config: &AttackConfig,
    rho: Option<&DistortionMap>,
) -> Result<IncreaseOutcome, AttackError> {
    config.validate()?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let p_map = rho.map(|r| weight_map(r, config.tau_percentiles));
    let p_values: Vec<f64> = match &p_map {
        Some(pm) => pm.values.data().to_vec(),
        None => vec![1.0; h * w],
    };
    let alpha = config.alpha();
    // descend the unclamped margin: success is judged on the quantized
    // image, which can lag the float trajectory across the -kappa
    // boundary, and the clamped loss has zero gradient there
    let spec = match config.target {
        Some(target) => LossSpec::TargetMargin {
            target,
            kappa: f64::INFINITY,
        },
        None => LossSpec::Margin {
            label: y,
            kappa: f64::INFINITY,
        },
    };

    let mut x_adv = x.clone();
    let mut mask = PixelMask::new(h, w);
    let mut t = 0usize;
    loop {
        // judge success (and hand back results) on the quantized image
        let x_q = quantize(x, &x_adv, config.epsilon);
        let scores = model.logits(&x_q)?;
        if success_for(scores.data(), y, config.target, config.kappa) {
            return Ok(IncreaseOutcome {
                x_adv: x_q,
                mask,
                iterations: t,
                success: true,
            });
        }
        if t >= config.max_iterations {
            return Ok(IncreaseOutcome {
                x_adv: x_q,
                mask,
                iterations: t,
                success: false,
            });
        }
        let g = model.input_gradient(&x_adv, spec)?;
        if !g.is_finite() {
            return Err(AttackError::NanGradient { iteration: t });
        }

        // saliency per pixel: p * (1 - m) * sum of channel |g|
        let mut saliency: Vec<(f64, usize)> = Vec::with_capacity(h * w);
        for p in 0..h * w {
            if mask.get(p) || p_values[p] == 0.0 {
                continue;
            }
            let s: f64 = (0..c).map(|ch| g.data()[ch * h * w + p].abs()).sum();
            let s = s * p_values[p];
            if s > 0.0 {
                saliency.push((s, p));
            }
        }
        // descending saliency, lowest pixel index wins ties
        saliency.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, p) in saliency.iter().take(config.k_at(t)) {
            mask.set(p);
        }

        // masked gradient, scalar max-normalized, preserving direction
        let mut gm = vec![0.0; c * h * w];
        let mut max_abs = 0.0_f64;
        for p in 0..h * w {
            if !mask.get(p) {
                continue;
            }
            for ch in 0..c {
                let v = g.data()[ch * h * w + p];
                gm[ch * h * w + p] = v;
                max_abs = max_abs.max(v.abs());
            }
        }
        if max_abs == 0.0 {
            // nothing selectable can move the loss
            return Ok(IncreaseOutcome {
                x_adv: quantize(x, &x_adv, config.epsilon),
                mask,
                iterations: t,
                success: false,
            });
        }
        let gm = Tensor::new(x.shape().to_vec(), gm)?;
        let dir = direction_ablation(&gm, config.direction_percentile)?;
        let stepped = x_adv
            .zip_map(&dir, "increase_step", |xv, dv| xv - alpha * dv)
            .expect("same shape");
        x_adv = clip_to_ball(x, &stepped, config.epsilon);
        t += 1;
    }
}

/// Stage 2: repeatedly drop the least-magnitude perturbed pixel, then
/// re-verify with a uniform alpha' sweep of sign steps; keep the pixel
/// only if every sweep candidate fails.
pub fn reduce_stage(
    model: &Model,
    x: &Tensor,
    x_adv: &Tensor,
    y: usize,
    config: &AttackConfig,
) -> Result<(Tensor, usize), AttackError> {
    config.validate()?;
    let scores = model.logits(x_adv)?;
    if !success_for(scores.data(), y, config.target, config.kappa) {
        return Err(AttackError::NotAdversarial);
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut r = x_adv.zip_map(x, "residual", |a, b| a - b)?;
    let mut x_cur = x_adv.clone();
    let budget = pixel_count(&r);
    let mut kept = vec![false; h * w]; // the necessary set R
    let mut t = 0usize;
    let sweep_max = config.epsilon.floor() as usize;

    while t < budget {
        // least-magnitude nonzero pixel outside R, lowest index on ties
        let mut pick: Option<(f64, usize)> = None;
        for p in 0..h * w {
            if kept[p] {
                continue;
            }
            let mag: f64 = (0..c).map(|ch| r.data()[ch * h * w + p].abs()).sum();
            if mag == 0.0 {
                continue;
            }
            if pick.map_or(true, |(m, _)| mag < m) {
                pick = Some((mag, p));
            }
        }
        let Some((_, drop)) = pick else { break };

        let mut r_trial = r.clone();
        for ch in 0..c {
            r_trial.data_mut()[ch * h * w + drop] = 0.0;
        }

        // batched ascending sweep of uniform sign steps, early exit on
        // the first (smallest-alpha') adversarial candidate
        // note: f64::signum maps 0.0 to 1.0, so zero must stay zero here
        let sign: Vec<f64> = r_trial
            .data()
            .iter()
            .map(|&v| if v == 0.0 { 0.0 } else { v.signum() })
            .collect();
        let mut found: Option<Tensor> = None;
        let chunk = 16usize;
        let mut alpha_prime = 1usize;
        'sweep: while alpha_prime <= sweep_max {
            let hi = (alpha_prime + chunk - 1).min(sweep_max);
            let count = hi - alpha_prime + 1;
            let mut batch = Vec::with_capacity(count * c * h * w);
            for a in alpha_prime..=hi {
                for (i, &s) in sign.iter().enumerate() {
                    let v = (x.data()[i] + a as f64 * s).clamp(0.0, 255.0);
                    batch.push(v);
                }
            }
            let batch_t = Tensor::new(vec![count, c, h, w], batch)?;
            let logits = model.logits_batch(&batch_t)?;
            let k = logits.shape()[1];
            for row in 0..count {
                let scores = &logits.data()[row * k..(row + 1) * k];
                if success_for(scores, y, config.target, config.kappa) {
                    let start = row * c * h * w;
                    let cand = Tensor::new(
                        x.shape().to_vec(),
                        batch_t.data()[start..start + c * h * w].to_vec(),
                    )?;
                    found = Some(cand);
                    break 'sweep;
                }
            }
            alpha_prime = hi + 1;
        }

        match found {
            Some(cand) => {
                r = cand.zip_map(x, "residual", |a, b| a - b)?;
                x_cur = cand;
            }
            None => kept[drop] = true,
        }
        t += 1;
    }
    Ok((x_cur, t))
}

/// The full attack: increase stage, then (at kappa == 0) the reduce stage.
pub fn greedyfool(
    model: &Model,
    x: &Tensor,
    y: usize,
    config: &AttackConfig,
    rho: Option<&DistortionMap>,
) -> Result<AttackResult, AttackError> {
    config.validate()?;
    let t0 = Instant::now();
    let inc = increase_stage(model, x, y, config, rho)?;
    let increase_ms = t0.elapsed().as_secs_f64() * 1e3;

    let mut x_adv = inc.x_adv;
    let mut reduce_iterations = 0usize;
    let mut reduce_ms = 0.0;
    // kappa > 0 keeps the confidence margin, which pixel dropping would
    // destroy, so the reduce stage only runs at kappa == 0
    if inc.success && config.reduce && config.kappa == 0.0 {
        let t1 = Instant::now();
        let (reduced, iters) = reduce_stage(model, x, &x_adv, y, config)?;
        reduce_ms = t1.elapsed().as_secs_f64() * 1e3;
        x_adv = reduced;
        reduce_iterations = iters;
    }

    let perturbation = x_adv.zip_map(x, "residual", |a, b| a - b)?;
    let scores = model.logits(&x_adv)?;
    let final_class = scores.argmax();
    let final_margin = match config.target {
        Some(t) => -loss::raw_margin(scores.data(), t),
        None => loss::raw_margin(scores.data(), y),
    };
    let mask = mask_from_perturbation(&perturbation);
    Ok(AttackResult {
        pixel_count: pixel_count(&perturbation),
        success: inc.success,
        increase_iterations: inc.iterations,
        reduce_iterations,
        final_class,
        final_margin,
        increase_ms,
        reduce_ms,
        mask,
        adversarial: x_adv,
        perturbation,
    })
}

impl AttackResult {
    /// Check every output invariant against the source image; returns a
    /// description of the first violation.
    pub fn check_invariants(
        &self,
        x: &Tensor,
        y: usize,
        config: &AttackConfig,
    ) -> Result<(), String> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        for p in 0..h * w {
            let nonzero = (0..c).any(|ch| self.perturbation.data()[ch * h * w + p] != 0.0);
            if nonzero && !self.mask.get(p) {
                return Err(format!("pixel {p} perturbed but not in mask"));
            }
        }
        let tol = 1e-9;
        for i in 0..c * h * w {
            let (xv, av) = (x.data()[i], self.adversarial.data()[i]);
            if (av - xv).abs() > config.epsilon + tol {
                return Err(format!("L-inf violation at {i}: |{av} - {xv}| > {}", config.epsilon));
            }
            if !(-tol..=255.0 + tol).contains(&av) {
                return Err(format!("range violation at {i}: {av}"));
            }
            let rv = self.perturbation.data()[i];
            if (av - xv - rv).abs() > tol {
                return Err(format!("perturbation inconsistent at {i}"));
            }
        }
        if self.success {
            if self.final_margin > -config.kappa + tol {
                return Err(format!(
                    "margin {} exceeds -kappa {}",
                    self.final_margin, -config.kappa
                ));
            }
            match config.target {
                Some(t) => {
                    if self.final_class != t {
                        return Err(format!("final class {} != target {t}", self.final_class));
                    }
                }
                None => {
                    if self.final_class == y {
                        return Err("success flagged but still classified as y".into());
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Arch, InputSpec, Model};

    /// Linear 2-class model on a 4x4 single-channel input with scale 1.
    /// Class score difference is w_diff . x, so everything is analyzable.
    fn linear_model(weights_diff: &[f64]) -> Model {
        let mut m = Model::new(
            InputSpec {
                channels: 1,
                height: 4,
                width: 4,
                scale: 1.0,
            },
            Arch::Linear { classes: 2 },
            0,
        );
        // class 0 gets +diff/2, class 1 gets -diff/2
        let mut w = Tensor::zeros(&[16, 2]);
        for i in 0..16 {
            w.data_mut()[i * 2] = weights_diff[i] / 2.0;
            w.data_mut()[i * 2 + 1] = -weights_diff[i] / 2.0;
        }
        m.params.insert("fc.w".into(), w);
        m.params.insert("fc.b".into(), Tensor::zeros(&[2]));
        m
    }

    #[test]
    fn weight_map_percentile_semantics() {
        // uniform grid over (0,1): ~30% of pixels land at 0, ~25% at 1
        let n = 100;
        let vals: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let rho = DistortionMap::new(Tensor::new(vec![10, 10], vals).unwrap()).unwrap();
        let pm = weight_map(&rho, (70.0, 25.0));
        let zeros = pm.values.data().iter().filter(|&&v| v == 0.0).count();
        let ones = pm.values.data().iter().filter(|&&v| v == 1.0).count();
        assert!((28..=33).contains(&zeros), "zeros {zeros}");
        assert!((23..=28).contains(&ones), "ones {ones}");
        assert!(!pm.degenerate);

        // boundary and midpoint of the linear branch
        let tau1 = percentile(rho.values().data(), 70.0);
        let tau2 = percentile(rho.values().data(), 25.0);
        let mid = (tau1 + tau2) / 2.0;
        let probe = DistortionMap::new(Tensor::new(vec![1, 3], vec![tau2, mid, 0.5]).unwrap());
        // reuse the formula directly for the probe values
        let p_of = |r: f64| {
            if r >= tau1 {
                0.0
            } else if r <= tau2 {
                1.0
            } else {
                (tau1 - r) / (tau1 - tau2)
            }
        };
        assert_eq!(p_of(tau2), 1.0);
        assert!((p_of(mid) - 0.5).abs() < 1e-12);
        drop(probe);
    }

    #[test]
    fn weight_map_degenerate_falls_back_to_one() {
        let rho = DistortionMap::new(Tensor::filled(&[4, 4], 0.5)).unwrap();
        let pm = weight_map(&rho, (70.0, 25.0));
        assert!(pm.degenerate);
        assert!(pm.values.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn direction_ablation_limits() {
        let r = Tensor::from_vec(vec![3.0, -1.0]);
        let signs = direction_ablation(&r, 100.0).unwrap();
        assert_eq!(signs.data(), &[1.0, -1.0]);
        let dir = direction_ablation(&r, 0.0).unwrap();
        assert_eq!(dir.data()[0], 1.0);
        assert!((dir.data()[1] + 1.0 / 3.0).abs() < 1e-12);
        assert!(direction_ablation(&Tensor::zeros(&[3]), 50.0).is_err());
    }

    #[test]
    fn direction_cosine_non_increasing_in_q() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let r = Tensor::from_vec((0..50).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let cos = |a: &Tensor, b: &Tensor| {
                let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
                let na: f64 = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb: f64 = b.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                dot / (na * nb)
            };
            let mut prev = f64::INFINITY;
            for q in [0.0, 25.0, 50.0, 75.0, 100.0] {
                let out = direction_ablation(&r, q).unwrap();
                let c = cos(&r, &out);
                assert!(c <= prev + 1e-9, "cosine increased at q={q}");
                prev = c;
            }
        }
    }

    #[test]
    fn increase_picks_argmax_saliency_pixel_on_linear_model() {
        // unique max-|w| pixel must be selected first (k = 1)
        let mut diff = vec![-0.1; 16];
        diff[9] = 5.0;
        let model = linear_model(&diff);
        let x = Tensor::filled(&[1, 4, 4], 128.0);
        let y = model.predict(&x).unwrap();
        let cfg = AttackConfig {
            epsilon: 255.0,
            ..Default::default()
        };
        let out = increase_stage(&model, &x, y, &cfg, None).unwrap();
        assert!(out.success);
        assert!(out.mask.get(9), "argmax pixel not selected");
        // brute force: pixel 9 is the argmax of per-pixel |w_diff|
        let best = (0..16).max_by(|&a, &b| diff[a].abs().partial_cmp(&diff[b].abs()).unwrap());
        assert_eq!(best, Some(9));
    }

    #[test]
    fn already_misclassified_returns_immediately() {
        let diff = vec![1.0; 16];
        let model = linear_model(&diff);
        let x = Tensor::filled(&[1, 4, 4], 10.0);
        // true label deliberately wrong
        let wrong_y = 1 - model.predict(&x).unwrap();
        let cfg = AttackConfig::default();
        let res = greedyfool(&model, &x, wrong_y, &cfg, None).unwrap();
        assert!(res.success);
        assert_eq!(res.pixel_count, 0);
        assert_eq!(res.increase_iterations, 0);
    }

    #[test]
    fn zero_weight_pixels_never_enter_mask() {
        let mut diff = vec![-1.0; 16];
        diff[3] = 4.0;
        let model = linear_model(&diff);
        let x = Tensor::filled(&[1, 4, 4], 128.0);
        let y = model.predict(&x).unwrap();
        // spread-out distortion map putting p = 0 on pixel 3 (above tau_1)
        let mut vals: Vec<f64> = (0..16).map(|i| 0.05 + 0.03 * i as f64).collect();
        vals[3] = 0.95;
        let rho = DistortionMap::new(Tensor::new(vec![4, 4], vals).unwrap()).unwrap();
        let cfg = AttackConfig::default();
        let res = greedyfool(&model, &x, y, &cfg, Some(&rho)).unwrap();
        assert!(!res.mask.get(3), "gated pixel was perturbed");
        res.check_invariants(&x, y, &cfg).unwrap();
    }

    #[test]
    fn reduce_removes_redundant_pixel() {
        // pixel 0 alone suffices; pixel 5 is a redundant duplicate
        let mut diff = vec![0.0; 16];
        diff[0] = 2.0;
        diff[5] = 2.0;
        diff[1] = -3.0;
        let model = linear_model(&diff);
        let x = Tensor::filled(&[1, 4, 4], 128.0);
        let y = model.predict(&x).unwrap();
        assert_eq!(y, 0);
        // construct adversarial with both pixels pushed down
        let mut xa = x.clone();
        xa.data_mut()[0] = 0.0;
        xa.data_mut()[5] = 0.0;
        let cfg = AttackConfig {
            epsilon: 255.0,
            ..Default::default()
        };
        assert!(success_for(model.logits(&xa).unwrap().data(), y, None, 0.0));
        let (reduced, _) = reduce_stage(&model, &x, &xa, y, &cfg).unwrap();
        let r = reduced.zip_map(&x, "r", |a, b| a - b).unwrap();
        assert_eq!(pixel_count(&r), 1);
        assert!(success_for(model.logits(&reduced).unwrap().data(), y, None, 0.0));
    }

    #[test]
    fn reduce_rejects_non_adversarial_input() {
        let model = linear_model(&vec![1.0; 16]);
        let x = Tensor::filled(&[1, 4, 4], 128.0);
        let y = model.predict(&x).unwrap();
        let err = reduce_stage(&model, &x, &x, y, &AttackConfig::default());
        assert!(matches!(err, Err(AttackError::NotAdversarial)));
    }

    #[test]
    fn reduce_never_increases_pixel_count() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for trial in 0..10 {
            let diff: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let model = linear_model(&diff);
            let x = Tensor::new(
                vec![1, 4, 4],
                (0..16).map(|_| rng.gen_range(50.0..200.0)).collect(),
            )
            .unwrap();
            let y = model.predict(&x).unwrap();
            let cfg = AttackConfig::default();
            let inc = increase_stage(&model, &x, y, &cfg, None).unwrap();
            if !inc.success {
                continue;
            }
            let before = pixel_count(&inc.x_adv.zip_map(&x, "r", |a, b| a - b).unwrap());
            let (reduced, _) = reduce_stage(&model, &x, &inc.x_adv, y, &cfg).unwrap();
            let after = pixel_count(&reduced.zip_map(&x, "r", |a, b| a - b).unwrap());
            assert!(after <= before, "trial {trial}: {after} > {before}");
        }
    }

    #[test]
    fn greedyfool_deterministic() {
        let diff: Vec<f64> = (0..16).map(|i| ((i * 7 % 13) as f64 - 6.0) / 3.0).collect();
        let model = linear_model(&diff);
        let x = Tensor::new(vec![1, 4, 4], (0..16).map(|i| (i * 15) as f64).collect()).unwrap();
        let y = model.predict(&x).unwrap();
        let cfg = AttackConfig::default();
        let a = greedyfool(&model, &x, y, &cfg, None).unwrap();
        let b = greedyfool(&model, &x, y, &cfg, None).unwrap();
        assert_eq!(a.adversarial.data(), b.adversarial.data());
        assert_eq!(a.pixel_count, b.pixel_count);
    }

    #[test]
    fn kappa_skips_reduce_and_hits_margin() {
        let mut diff = vec![-0.5; 16];
        diff[2] = 3.0;
        let model = linear_model(&diff);
        let x = Tensor::filled(&[1, 4, 4], 128.0);
        let y = model.predict(&x).unwrap();
        let cfg = AttackConfig {
            kappa: 50.0,
            ..Default::default()
        };
        let res = greedyfool(&model, &x, y, &cfg, None).unwrap();
        assert!(res.success);
        assert_eq!(res.reduce_iterations, 0);
        assert!(res.final_margin <= -50.0 + 1e-9);
        res.check_invariants(&x, y, &cfg).unwrap();
    }
}
