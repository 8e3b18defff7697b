//! Margin losses over raw logits, shared by the attack and by
//! input-gradient computation.

use serde::{Deserialize, Serialize};

/// Scalar loss over a logit vector, used to drive input gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LossSpec {
    /// max(z_y - max_{i != y} z_i, -kappa); minimizing it drives the true
    /// class below the runner-up by kappa.
    Margin { label: usize, kappa: f64 },
    /// max(max_{i != tar} z_i - z_tar, -kappa); minimizing it drives the
    /// target class on top by kappa.
    TargetMargin { target: usize, kappa: f64 },
    /// Mean softmax cross-entropy against the label (training use).
    CrossEntropy { label: usize },
}

fn best_other(scores: &[f64], skip: usize) -> usize {
    let mut best = usize::MAX;
    for (i, &v) in scores.iter().enumerate() {
        if i == skip {
            continue;
        }
        if best == usize::MAX || v > scores[best] {
            best = i;
        }
    }
    best
}

/// Unclamped logit gap z_y - max_{i != y} z_i.
pub fn raw_margin(scores: &[f64], y: usize) -> f64 {
    scores[y] - scores[best_other(scores, y)]
}

pub fn margin_loss(scores: &[f64], y: usize, kappa: f64) -> f64 {
    raw_margin(scores, y).max(-kappa)
}

pub fn target_margin_loss(scores: &[f64], target: usize, kappa: f64) -> f64 {
    (-raw_margin(scores, target)).max(-kappa)
}

/// Gradient of `margin_loss` with respect to the logits. Zero on the
/// -kappa plateau.
pub fn margin_loss_grad(scores: &[f64], y: usize, kappa: f64) -> Vec<f64> {
    let mut g = vec![0.0; scores.len()];
    let j = best_other(scores, y);
    if scores[y] - scores[j] > -kappa {
        g[y] = 1.0;
        g[j] = -1.0;
    }
    g
}

/// Gradient of `target_margin_loss` with respect to the logits.
pub fn target_margin_loss_grad(scores: &[f64], target: usize, kappa: f64) -> Vec<f64> {
    let mut g = vec![0.0; scores.len()];
    let j = best_other(scores, target);
    if scores[j] - scores[target] > -kappa {
        g[j] = 1.0;
        g[target] = -1.0;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn margin_basic() {
        assert_eq!(margin_loss(&[3.0, 1.0, 0.0], 0, 0.0), 2.0);
        // already misclassified, clamps at -kappa = 0
        assert_eq!(margin_loss(&[0.0, 5.0], 0, 0.0), 0.0);
        // tie with kappa
        assert_eq!(margin_loss(&[2.0, 2.0], 0, 1.0), 0.0);
    }

    #[test]
    fn target_margin_basic() {
        assert_eq!(target_margin_loss(&[3.0, 1.0], 1, 0.0), 2.0);
        assert_eq!(target_margin_loss(&[0.0, 9.0], 1, 0.0), 0.0);
    }

    #[test]
    fn two_class_symmetry() {
        // on 2 classes, targeting the other class equals the non-target loss
        let scores = [1.3, -0.4];
        assert_eq!(
            margin_loss(&scores, 0, 0.5),
            target_margin_loss(&scores, 1, 0.5)
        );
    }

    #[test]
    fn grad_zero_on_plateau() {
        let g = margin_loss_grad(&[0.0, 5.0], 0, 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
        let g = margin_loss_grad(&[3.0, 1.0], 0, 0.0);
        assert_eq!(g, vec![1.0, -1.0]);
    }
}
