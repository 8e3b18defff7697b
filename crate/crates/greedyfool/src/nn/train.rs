//! Parameter training: SGD with momentum and Adam, a classifier trainer,
//! and the binary clean-vs-adversarial detector used for invisibility
//! measurements.

use super::Model;
use crate::data::LabeledImageSet;
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 6,
            seed: 42,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate < 0.0 {
            return Err(TrainError::InvalidConfig("learning rate < 0".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-parameter optimizer state keyed by parameter name.
pub struct Optimizer {
    kind: OptimizerKind,
    pub learning_rate: f64,
    weight_decay: f64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    t: usize,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig) -> Self {
        Optimizer {
            kind: cfg.optimizer,
            learning_rate: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>) {
        self.t += 1;
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let wd = self.weight_decay;
            match self.kind {
                OptimizerKind::SgdMomentum { momentum } => {
                    let vel = self
                        .m
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(p.shape()));
                    for ((pv, vv), &gv) in
                        p.data_mut().iter_mut().zip(vel.data_mut()).zip(g.data())
                    {
                        let gv = gv + wd * *pv;
                        *vv = momentum * *vv + gv;
                        *pv -= self.learning_rate * *vv;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let m = self
                        .m
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(p.shape()));
                    let v = self
                        .v
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(p.shape()));
                    let bc1 = 1.0 - beta1.powi(self.t as i32);
                    let bc2 = 1.0 - beta2.powi(self.t as i32);
                    for (((pv, mv), vv), &gv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                        .zip(g.data())
                    {
                        let gv = gv + wd * *pv;
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        let mh = *mv / bc1;
                        let vh = *vv / bc2;
                        *pv -= self.learning_rate * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

/// Fraction of the set the model classifies correctly.
pub fn accuracy(model: &Model, set: &LabeledImageSet) -> f64 {
    if set.is_empty() {
        return 0.0;
    }
    let mut correct = 0usize;
    let bs = 64;
    let mut i = 0;
    while i < set.len() {
        let idx: Vec<usize> = (i..(i + bs).min(set.len())).collect();
        let batch = set.batch(&idx);
        let logits = model.logits_batch(&batch).expect("accuracy forward");
        let k = logits.shape()[1];
        for (row, &gi) in idx.iter().enumerate() {
            let scores = &logits.data()[row * k..(row + 1) * k];
            let mut best = 0;
            for (j, &v) in scores.iter().enumerate() {
                if v > scores[best] {
                    best = j;
                }
            }
            if best == set.labels[gi] {
                correct += 1;
            }
        }
        i += bs;
    }
    correct as f64 / set.len() as f64
}

/// One optimization pass over the set with softmax cross-entropy.
fn run_epochs(
    model: &mut Model,
    set: &LabeledImageSet,
    cfg: &TrainConfig,
) -> Result<Vec<f64>, TrainError> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x7261_696e));
    let mut opt = Optimizer::new(cfg);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..set.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let x = set.batch(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| set.labels[i]).collect();
            let mut tape = Tape::new();
            let fwd = model.forward_on_tape(&mut tape, &x)?;
            let loss = tape.softmax_cross_entropy(fwd.output, &labels)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            total += lv;
            batches += 1;
            let mut grads_all = tape.backward(loss, &Tensor::scalar(1.0))?;
            let mut grads = BTreeMap::new();
            for (name, node) in &fwd.params {
                grads.insert(name.clone(), grads_all.take(&tape, *node));
            }
            opt.step(&mut model.params, &grads);
        }
        epoch_losses.push(total / batches.max(1) as f64);
    }
    Ok(epoch_losses)
}

/// Train a classifier in place; reports per-epoch losses and accuracies.
pub fn train_classifier(
    model: &mut Model,
    train: &LabeledImageSet,
    test: Option<&LabeledImageSet>,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    let epoch_losses = run_epochs(model, train, cfg)?;
    let train_accuracy = accuracy(model, train);
    let test_accuracy = test.map(|t| accuracy(model, t));
    model.meta.trained_epochs = cfg.epochs;
    model.meta.train_accuracy = Some(train_accuracy);
    model.meta.test_accuracy = test_accuracy;
    Ok(TrainReport {
        epoch_losses,
        train_accuracy,
        test_accuracy,
    })
}

/// Train a 2-class clean-vs-adversarial detector on an 80/20 split.
/// Returns the detector and its held-out accuracy; 0.5 means the two
/// sets are indistinguishable to it.
pub fn train_binary_detector(
    clean: &[Tensor],
    adversarial: &[Tensor],
    cfg: &TrainConfig,
) -> Result<(Model, f64), TrainError> {
    if clean.is_empty() || adversarial.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let shape = clean[0].shape().to_vec();
    let mut images: Vec<Tensor> = Vec::with_capacity(clean.len() + adversarial.len());
    let mut labels = Vec::with_capacity(clean.len() + adversarial.len());
    images.extend_from_slice(clean);
    labels.extend(std::iter::repeat(0usize).take(clean.len()));
    images.extend_from_slice(adversarial);
    labels.extend(std::iter::repeat(1usize).take(adversarial.len()));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x6465_7463));
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut rng);
    let holdout_n = (images.len() / 5).max(1);
    let (hold_idx, train_idx) = order.split_at(holdout_n);

    let pick = |idx: &[usize], split: &str| {
        LabeledImageSet::new(
            idx.iter().map(|&i| images[i].clone()).collect(),
            idx.iter().map(|&i| labels[i]).collect(),
            2,
            split,
            "detector",
        )
        .expect("detector set")
    };
    let train_set = pick(train_idx, "train");
    let hold_set = pick(hold_idx, "holdout");

    let mut model = Model::new(
        super::InputSpec {
            channels: shape[0],
            height: shape[1],
            width: shape[2],
            scale: 255.0,
        },
        super::Arch::ConvNet {
            conv1: 6,
            conv2: 12,
            hidden: 32,
            classes: 2,
        },
        cfg.seed,
    );
    train_classifier(&mut model, &train_set, Some(&hold_set), cfg)?;
    let acc = accuracy(&model, &hold_set);
    Ok((model, acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Arch, InputSpec};
    use rand::Rng;

    fn tiny_set(n: usize, seed: u64) -> LabeledImageSet {
        // class 0: bright left half, class 1: bright right half
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let class = i % 2;
            let mut data = vec![0.0; 64];
            for y in 0..8 {
                for x in 0..8 {
                    let lit = if class == 0 { x < 4 } else { x >= 4 };
                    data[y * 8 + x] = if lit {
                        200.0 + rng.gen_range(-20.0..20.0)
                    } else {
                        30.0 + rng.gen_range(-20.0..20.0)
                    };
                }
            }
            images.push(Tensor::new(vec![1, 8, 8], data).unwrap());
            labels.push(class);
        }
        LabeledImageSet::new(images, labels, 2, "train", "tiny").unwrap()
    }

    fn tiny_model(seed: u64) -> Model {
        Model::new(
            InputSpec {
                channels: 1,
                height: 8,
                width: 8,
                scale: 255.0,
            },
            Arch::ConvNet {
                conv1: 2,
                conv2: 4,
                hidden: 8,
                classes: 2,
            },
            seed,
        )
    }

    #[test]
    fn memorizes_single_sample() {
        let set = tiny_set(1, 3);
        let mut model = tiny_model(1);
        let cfg = TrainConfig {
            epochs: 60,
            batch_size: 1,
            ..Default::default()
        };
        train_classifier(&mut model, &set, None, &cfg).unwrap();
        assert_eq!(accuracy(&model, &set), 1.0);
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let set = tiny_set(8, 3);
        let mut model = tiny_model(1);
        let before = model.params.clone();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            ..Default::default()
        };
        train_classifier(&mut model, &set, None, &cfg).unwrap();
        for (name, p) in &model.params {
            assert_eq!(p.data(), before[name].data(), "{name}");
        }
    }

    #[test]
    fn identical_seeds_give_identical_parameters() {
        let set = tiny_set(16, 3);
        let cfg = TrainConfig {
            epochs: 2,
            ..Default::default()
        };
        let mut m1 = tiny_model(5);
        let mut m2 = tiny_model(5);
        train_classifier(&mut m1, &set, None, &cfg).unwrap();
        train_classifier(&mut m2, &set, None, &cfg).unwrap();
        for (name, p) in &m1.params {
            assert_eq!(p.data(), m2.params[name].data(), "{name}");
        }
    }

    #[test]
    fn detector_on_identical_sets_is_near_chance() {
        let set = tiny_set(60, 9);
        let imgs = set.images.clone();
        let cfg = TrainConfig {
            epochs: 3,
            ..Default::default()
        };
        let (_m, acc) = train_binary_detector(&imgs, &imgs, &cfg).unwrap();
        assert!((acc - 0.5).abs() <= 0.2, "holdout accuracy {acc}");
    }

    #[test]
    fn detector_separates_constant_patch() {
        let set = tiny_set(60, 9);
        let clean = set.images.clone();
        let marked: Vec<Tensor> = clean
            .iter()
            .map(|im| {
                let mut m = im.clone();
                for i in 0..16 {
                    m.data_mut()[i] = 255.0;
                }
                m
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 8,
            ..Default::default()
        };
        let (_m, acc) = train_binary_detector(&clean, &marked, &cfg).unwrap();
        assert!(acc >= 0.95, "holdout accuracy {acc}");
    }
}
