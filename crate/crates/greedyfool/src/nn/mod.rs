//! Small concrete architectures and the differentiable-model surface the
//! attack consumes: logits and input-gradients of scalar losses.

mod checkpoint;
pub mod train;

pub use checkpoint::{load_model, save_model};
pub use checkpoint::CheckpointError;
pub use train::{
    accuracy, train_binary_detector, train_classifier, Optimizer, OptimizerKind, TrainConfig,
    TrainError, TrainReport,
};

use crate::kernels;
use crate::loss::{self, LossSpec};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Expected input layout and value scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Inputs are divided by this in the first layer (255 for images on
    /// the 0-255 scale, 1 for nets fed [0,1] data).
    pub scale: f64,
}

impl InputSpec {
    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Architecture description; parameter names and shapes derive from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Arch {
    /// conv3x3 -> relu -> pool2 -> conv3x3 -> relu -> pool2 -> dense -> relu -> dense
    ConvNet {
        conv1: usize,
        conv2: usize,
        hidden: usize,
        classes: usize,
    },
    /// flatten -> dense
    Linear { classes: usize },
    /// conv3x3 stack ending in a 1-channel sigmoid map [N,1,H,W]
    Generator { features: usize },
    /// strided conv3x3 stack -> dense -> sigmoid score [N,1]
    Discriminator { features: usize },
}

impl Arch {
    pub fn classes(&self) -> usize {
        match self {
            Arch::ConvNet { classes, .. } | Arch::Linear { classes } => *classes,
            Arch::Generator { .. } | Arch::Discriminator { .. } => 0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ModelMeta {
    pub trained_epochs: usize,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub seed: Option<u64>,
}

/// A concrete model: architecture plus named parameter tensors.
/// Immutable after training; safe to share across threads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub input: InputSpec,
    pub arch: Arch,
    pub params: BTreeMap<String, Tensor>,
    pub meta: ModelMeta,
}

/// Handles into a tape after a recorded forward pass.
pub struct ForwardPass {
    pub input: NodeId,
    pub output: NodeId,
    pub params: Vec<(String, NodeId)>,
}

fn he_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    // Box-Muller from uniform draws keeps this independent of rand_distr
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

impl Model {
    /// Build a model with seeded parameter initialization.
    pub fn new(input: InputSpec, arch: Arch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let c = input.channels;
        match &arch {
            Arch::ConvNet {
                conv1,
                conv2,
                hidden,
                classes,
            } => {
                let (h, w) = (input.height, input.width);
                let flat = conv2 * (h / 4) * (w / 4);
                params.insert("conv1.w".into(), he_init(&mut rng, &[*conv1, c, 3, 3], c * 9));
                params.insert("conv1.b".into(), Tensor::zeros(&[*conv1]));
                params.insert(
                    "conv2.w".into(),
                    he_init(&mut rng, &[*conv2, *conv1, 3, 3], conv1 * 9),
                );
                params.insert("conv2.b".into(), Tensor::zeros(&[*conv2]));
                params.insert("fc1.w".into(), he_init(&mut rng, &[flat, *hidden], flat));
                params.insert("fc1.b".into(), Tensor::zeros(&[*hidden]));
                params.insert("fc2.w".into(), he_init(&mut rng, &[*hidden, *classes], *hidden));
                params.insert("fc2.b".into(), Tensor::zeros(&[*classes]));
            }
            Arch::Linear { classes } => {
                let flat = input.numel();
                params.insert("fc.w".into(), he_init(&mut rng, &[flat, *classes], flat));
                params.insert("fc.b".into(), Tensor::zeros(&[*classes]));
            }
            Arch::Generator { features } => {
                params.insert("g1.w".into(), he_init(&mut rng, &[*features, c, 3, 3], c * 9));
                params.insert("g1.b".into(), Tensor::zeros(&[*features]));
                params.insert(
                    "g2.w".into(),
                    he_init(&mut rng, &[*features, *features, 3, 3], features * 9),
                );
                params.insert("g2.b".into(), Tensor::zeros(&[*features]));
                params.insert(
                    "g3.w".into(),
                    he_init(&mut rng, &[1, *features, 3, 3], features * 9),
                );
                params.insert("g3.b".into(), Tensor::zeros(&[1]));
            }
            Arch::Discriminator { features } => {
                let f = *features;
                let mut dims = (input.height, input.width);
                params.insert("d1.w".into(), he_init(&mut rng, &[f, c, 3, 3], c * 9));
                params.insert("d1.b".into(), Tensor::zeros(&[f]));
                dims = (
                    kernels::out_dim(dims.0, 3, 2, 1),
                    kernels::out_dim(dims.1, 3, 2, 1),
                );
                params.insert("d2.w".into(), he_init(&mut rng, &[2 * f, f, 3, 3], f * 9));
                params.insert("d2.b".into(), Tensor::zeros(&[2 * f]));
                dims = (
                    kernels::out_dim(dims.0, 3, 2, 1),
                    kernels::out_dim(dims.1, 3, 2, 1),
                );
                params.insert("d3.w".into(), he_init(&mut rng, &[4 * f, 2 * f, 3, 3], 2 * f * 9));
                params.insert("d3.b".into(), Tensor::zeros(&[4 * f]));
                dims = (
                    kernels::out_dim(dims.0, 3, 2, 1),
                    kernels::out_dim(dims.1, 3, 2, 1),
                );
                let flat = 4 * f * dims.0 * dims.1;
                params.insert("fc.w".into(), he_init(&mut rng, &[flat, 1], flat));
                params.insert("fc.b".into(), Tensor::zeros(&[1]));
            }
        }
        Model {
            input,
            arch,
            params,
            meta: ModelMeta {
                seed: Some(seed),
                ..Default::default()
            },
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<(), TensorError> {
        let s = x.shape();
        let ok = s.len() == 4
            && s[1] == self.input.channels
            && s[2] == self.input.height
            && s[3] == self.input.width;
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "model_input",
                lhs: s.to_vec(),
                rhs: vec![0, self.input.channels, self.input.height, self.input.width],
            });
        }
        Ok(())
    }

    /// Record the forward pass on a tape. Input is a [N,C,H,W] batch.
    pub fn forward_on_tape(&self, tape: &mut Tape, x: &Tensor) -> Result<ForwardPass, TensorError> {
        self.check_input(x)?;
        let input = tape.input(x.clone());
        let mut param_nodes = Vec::new();
        let mut node_of = |tape: &mut Tape, name: &str| -> NodeId {
            let id = tape.input(self.params[name].clone());
            param_nodes.push((name.to_string(), id));
            id
        };
        let scaled = if self.input.scale != 1.0 {
            tape.scalar_mul(input, 1.0 / self.input.scale)
        } else {
            input
        };
        let output = match &self.arch {
            Arch::ConvNet { .. } => {
                let w1 = node_of(tape, "conv1.w");
                let b1 = node_of(tape, "conv1.b");
                let w2 = node_of(tape, "conv2.w");
                let b2 = node_of(tape, "conv2.b");
                let fw1 = node_of(tape, "fc1.w");
                let fb1 = node_of(tape, "fc1.b");
                let fw2 = node_of(tape, "fc2.w");
                let fb2 = node_of(tape, "fc2.b");
                let mut h = tape.conv2d(scaled, w1, 1, 1)?;
                h = tape.bias_add_channels(h, b1)?;
                h = tape.relu(h);
                h = tape.max_pool2d(h, 2)?;
                h = tape.conv2d(h, w2, 1, 1)?;
                h = tape.bias_add_channels(h, b2)?;
                h = tape.relu(h);
                h = tape.max_pool2d(h, 2)?;
                h = tape.flatten(h)?;
                h = tape.matmul(h, fw1)?;
                h = tape.bias_add_rows(h, fb1)?;
                h = tape.relu(h);
                h = tape.matmul(h, fw2)?;
                tape.bias_add_rows(h, fb2)?
            }
            Arch::Linear { .. } => {
                let w = node_of(tape, "fc.w");
                let b = node_of(tape, "fc.b");
                let h = tape.flatten(scaled)?;
                let h = tape.matmul(h, w)?;
                tape.bias_add_rows(h, b)?
            }
            Arch::Generator { .. } => {
                let w1 = node_of(tape, "g1.w");
                let b1 = node_of(tape, "g1.b");
                let w2 = node_of(tape, "g2.w");
                let b2 = node_of(tape, "g2.b");
                let w3 = node_of(tape, "g3.w");
                let b3 = node_of(tape, "g3.b");
                let mut h = tape.conv2d(scaled, w1, 1, 1)?;
                h = tape.bias_add_channels(h, b1)?;
                h = tape.leaky_relu(h, 0.2);
                h = tape.conv2d(h, w2, 1, 1)?;
                h = tape.bias_add_channels(h, b2)?;
                h = tape.leaky_relu(h, 0.2);
                h = tape.conv2d(h, w3, 1, 1)?;
                h = tape.bias_add_channels(h, b3)?;
                tape.sigmoid(h)
            }
            Arch::Discriminator { .. } => {
                let w1 = node_of(tape, "d1.w");
                let b1 = node_of(tape, "d1.b");
                let w2 = node_of(tape, "d2.w");
                let b2 = node_of(tape, "d2.b");
                let w3 = node_of(tape, "d3.w");
                let b3 = node_of(tape, "d3.b");
                let fw = node_of(tape, "fc.w");
                let fb = node_of(tape, "fc.b");
                let mut h = tape.conv2d(scaled, w1, 2, 1)?;
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
                tape.sigmoid(h)
            }
        };
        Ok(ForwardPass {
            input,
            output,
            params: param_nodes,
        })
    }

    /// Tape-free forward pass; the hot path of the attack's candidate
    /// evaluation. Output matches `forward_on_tape` bit for bit.
    pub fn forward_nograd(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        self.check_input(x)?;
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let mut buf: Vec<f64> = if self.input.scale != 1.0 {
            x.data().iter().map(|&v| v * (1.0 / self.input.scale)).collect()
        } else {
            x.data().to_vec()
        };

        let conv = |buf: &[f64],
                    n: usize,
                    c: usize,
                    h: usize,
                    w: usize,
                    wname: &str,
                    bname: &str,
                    stride: usize|
         -> (Vec<f64>, usize, usize, usize) {
            let wt = &self.params[wname];
            let bt = &self.params[bname];
            let (oc, kh, kw) = (wt.shape()[0], wt.shape()[2], wt.shape()[3]);
            let mut out = kernels::conv2d(buf, wt.data(), n, c, h, w, oc, kh, kw, stride, 1);
            let oh = kernels::out_dim(h, kh, stride, 1);
            let ow = kernels::out_dim(w, kw, stride, 1);
            for i in 0..n {
                for ch in 0..oc {
                    let bv = bt.data()[ch];
                    for v in &mut out[(i * oc + ch) * oh * ow..(i * oc + ch + 1) * oh * ow] {
                        *v += bv;
                    }
                }
            }
            (out, oc, oh, ow)
        };
        let dense = |buf: &[f64], rows: usize, wname: &str, bname: &str| -> Vec<f64> {
            let wt = &self.params[wname];
            let bt = &self.params[bname];
            let (k, m) = (wt.shape()[0], wt.shape()[1]);
            let mut out = kernels::matmul(buf, wt.data(), rows, k, m);
            for r in 0..rows {
                for (v, &bv) in out[r * m..(r + 1) * m].iter_mut().zip(bt.data()) {
                    *v += bv;
                }
            }
            out
        };

        match &self.arch {
            Arch::ConvNet { classes, .. } => {
                let (mut out, mut cc, mut hh, mut ww) =
                    conv(&buf, n, c, h, w, "conv1.w", "conv1.b", 1);
                out.iter_mut().for_each(|v| *v = v.max(0.0));
                let (pooled, _) = kernels::max_pool2d(&out, n, cc, hh, ww, 2);
                hh /= 2;
                ww /= 2;
                let (mut out, c2, h2, w2) = conv(&pooled, n, cc, hh, ww, "conv2.w", "conv2.b", 1);
                out.iter_mut().for_each(|v| *v = v.max(0.0));
                let (pooled, _) = kernels::max_pool2d(&out, n, c2, h2, w2, 2);
                cc = c2;
                hh = h2 / 2;
                ww = w2 / 2;
                let mut out = dense(&pooled, n, "fc1.w", "fc1.b");
                out.iter_mut().for_each(|v| *v = v.max(0.0));
                let _ = (cc, hh, ww);
                let out = dense(&out, n, "fc2.w", "fc2.b");
                Tensor::new(vec![n, *classes], out)
            }
            Arch::Linear { classes } => {
                let out = dense(&buf, n, "fc.w", "fc.b");
                Tensor::new(vec![n, *classes], out)
            }
            Arch::Generator { .. } => {
                let lrelu = |v: &mut Vec<f64>| {
                    v.iter_mut().for_each(|x| {
                        if *x < 0.0 {
                            *x *= 0.2
                        }
                    })
                };
                let (mut out, f, hh, ww) = conv(&buf, n, c, h, w, "g1.w", "g1.b", 1);
                lrelu(&mut out);
                let (mut out, f2, _, _) = conv(&out, n, f, hh, ww, "g2.w", "g2.b", 1);
                lrelu(&mut out);
                let (mut out, _, _, _) = conv(&out, n, f2, hh, ww, "g3.w", "g3.b", 1);
                out.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
                Tensor::new(vec![n, 1, hh, ww], out)
            }
            Arch::Discriminator { .. } => {
                let lrelu = |v: &mut Vec<f64>| {
                    v.iter_mut().for_each(|x| {
                        if *x < 0.0 {
                            *x *= 0.2
                        }
                    })
                };
                let (mut out, f1, h1, w1) = conv(&buf, n, c, h, w, "d1.w", "d1.b", 2);
                lrelu(&mut out);
                let (mut out, f2, h2, w2) = conv(&out, n, f1, h1, w1, "d2.w", "d2.b", 2);
                lrelu(&mut out);
                let (mut out, _f3, _h3, _w3) = conv(&out, n, f2, h2, w2, "d3.w", "d3.b", 2);
                lrelu(&mut out);
                let mut out = dense(&out, n, "fc.w", "fc.b");
                out.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
                buf.clear();
                Tensor::new(vec![n, 1], out)
            }
        }
    }

    /// Raw class scores for a single [C,H,W] image.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let mut s = vec![1];
        s.extend_from_slice(x.shape());
        let batch = x.reshape(&s)?;
        let out = self.forward_nograd(&batch)?;
        out.reshape(&[out.numel()])
    }

    /// Raw class scores for a [N,C,H,W] batch.
    pub fn logits_batch(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        self.forward_nograd(x)
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize, TensorError> {
        Ok(self.logits(x)?.argmax())
    }

    /// Gradient of a scalar loss with respect to a single [C,H,W] input.
    /// Parameters are untouched.
    pub fn input_gradient(&self, x: &Tensor, spec: LossSpec) -> Result<Tensor, TensorError> {
        let mut s = vec![1];
        s.extend_from_slice(x.shape());
        let batch = x.reshape(&s)?;
        let mut tape = Tape::new();
        let fwd = self.forward_on_tape(&mut tape, &batch)?;
        let scores = tape.value(fwd.output).data().to_vec();
        let (node, seed) = match spec {
            LossSpec::Margin { label, kappa } => {
                let g = loss::margin_loss_grad(&scores, label, kappa);
                (fwd.output, Tensor::new(vec![1, scores.len()], g)?)
            }
            LossSpec::TargetMargin { target, kappa } => {
                let g = loss::target_margin_loss_grad(&scores, target, kappa);
                (fwd.output, Tensor::new(vec![1, scores.len()], g)?)
            }
            LossSpec::CrossEntropy { label } => {
                let node = tape.softmax_cross_entropy(fwd.output, &[label])?;
                (node, Tensor::scalar(1.0))
            }
        };
        let grads = tape.backward(node, &seed)?;
        grads.wrt(&tape, fwd.input).reshape(x.shape())
    }

    /// Sum of all parameter values; cheap fingerprint for purity checks.
    pub fn param_checksum(&self) -> f64 {
        self.params.values().map(|t| t.sum()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(c: usize, h: usize, w: usize) -> InputSpec {
        InputSpec {
            channels: c,
            height: h,
            width: w,
            scale: 255.0,
        }
    }

    #[test]
    fn zero_weight_linear_gives_zero_scores() {
        let mut m = Model::new(spec(1, 4, 4), Arch::Linear { classes: 3 }, 0);
        for p in m.params.values_mut() {
            *p = Tensor::zeros(p.shape());
        }
        let x = Tensor::filled(&[1, 4, 4], 100.0);
        assert_eq!(m.logits(&x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn one_pixel_model_scores_that_pixel() {
        // weight 1 on one pixel per class (scale 1 so scores = pixel value)
        let mut m = Model::new(
            InputSpec {
                channels: 1,
                height: 2,
                width: 2,
                scale: 1.0,
            },
            Arch::Linear { classes: 2 },
            0,
        );
        let mut w = Tensor::zeros(&[4, 2]);
        w.data_mut()[0 * 2] = 1.0; // class 0 reads pixel 0
        w.data_mut()[3 * 2 + 1] = 1.0; // class 1 reads pixel 3
        m.params.insert("fc.w".into(), w);
        m.params.insert("fc.b".into(), Tensor::zeros(&[2]));
        let x = Tensor::new(vec![1, 2, 2], vec![7.0, 0.0, 0.0, 3.0]).unwrap();
        assert_eq!(m.logits(&x).unwrap().data(), &[7.0, 3.0]);
    }

    #[test]
    fn linear_margin_gradient_is_weight_difference() {
        let m = Model::new(
            InputSpec {
                channels: 1,
                height: 2,
                width: 2,
                scale: 1.0,
            },
            Arch::Linear { classes: 2 },
            9,
        );
        let x = Tensor::filled(&[1, 2, 2], 0.5);
        let scores = m.logits(&x).unwrap();
        let y = scores.argmax();
        let other = 1 - y;
        let g = m
            .input_gradient(&x, LossSpec::Margin { label: y, kappa: 0.0 })
            .unwrap();
        let w = &m.params["fc.w"];
        for i in 0..4 {
            let expect = w.data()[i * 2 + y] - w.data()[i * 2 + other];
            assert!((g.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_zero_on_margin_plateau() {
        let m = Model::new(spec(1, 8, 8), Arch::Linear { classes: 3 }, 3);
        let x = Tensor::filled(&[1, 8, 8], 128.0);
        let scores = m.logits(&x).unwrap();
        let wrong = (scores.argmax() + 1) % 3;
        // loss already clamped at -kappa for a misclassified label
        let g = m
            .input_gradient(&x, LossSpec::Margin { label: wrong, kappa: 0.0 })
            .unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nograd_matches_tape_forward() {
        let m = Model::new(
            spec(1, 12, 12),
            Arch::ConvNet {
                conv1: 3,
                conv2: 4,
                hidden: 8,
                classes: 5,
            },
            11,
        );
        let x = Tensor::new(
            vec![2, 1, 12, 12],
            (0..288).map(|i| (i % 251) as f64).collect(),
        )
        .unwrap();
        let fast = m.forward_nograd(&x).unwrap();
        let mut tape = Tape::new();
        let fwd = m.forward_on_tape(&mut tape, &x).unwrap();
        assert_eq!(fast.data(), tape.value(fwd.output).data());
    }

    #[test]
    fn input_gradient_does_not_mutate_params() {
        let m = Model::new(spec(1, 8, 8), Arch::ConvNet { conv1: 2, conv2: 2, hidden: 4, classes: 3 }, 5);
        let before = m.param_checksum();
        let x = Tensor::filled(&[1, 8, 8], 99.0);
        let _ = m.input_gradient(&x, LossSpec::Margin { label: 0, kappa: 0.0 }).unwrap();
        assert_eq!(m.param_checksum(), before);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let m = Model::new(spec(1, 8, 8), Arch::Linear { classes: 2 }, 0);
        assert!(m.logits(&Tensor::zeros(&[1, 7, 8])).is_err());
    }
}
