//! Reverse-mode differentiation over a linear operation record.
//!
//! Each primitive appends one node holding its output value and whatever the
//! backward pass needs. Nodes only reference earlier nodes, so reverse index
//! order is a reverse topological order and gradients accumulate additively
//! across fan-out.

use crate::kernels;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    MatMul(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        stride: usize,
        pad: usize,
    },
    BiasAddRows(NodeId, NodeId),
    BiasAddChannels(NodeId, NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    MaxPool2d {
        input: NodeId,
        argmax: Vec<usize>,
    },
    AvgPool2d {
        input: NodeId,
        win: usize,
    },
    Reshape(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
    },
    MaxElem(NodeId, NodeId),
    RepeatChannels(NodeId, usize),
    ReduceSum(NodeId),
    ReduceMean(NodeId),
    Clamp(NodeId, f64, f64),
    Log(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Recorded forward computation; replayed in reverse for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient of the seeded output with respect to every node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient tensor for a node; zero for nodes the output does not
    /// depend on.
    pub fn wrt(&self, tape: &Tape, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(id).shape()),
        }
    }

    pub fn take(&mut self, tape: &Tape, id: NodeId) -> Tensor {
        self.grads[id.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape()))
    }
}

fn require_rank(t: &Tensor, rank: usize, op: &'static str) -> Result<(), TensorError> {
    if t.shape().len() != rank {
        return Err(TensorError::BadRank {
            op,
            expected: rank,
            shape: t.shape().to_vec(),
        });
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scalar_mul(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        self.push(Op::ScalarMul(a, s), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        require_rank(ta, 2, "matmul")?;
        require_rank(tb, 2, "matmul")?;
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, n) = (tb.shape()[0], tb.shape()[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = kernels::matmul(ta.data(), tb.data(), m, k, n);
        let v = Tensor::new(vec![m, n], data).expect("matmul shape");
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, TensorError> {
        let (ti, tw) = (self.value(input), self.value(weight));
        require_rank(ti, 4, "conv2d")?;
        require_rank(tw, 4, "conv2d")?;
        let (n, c, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2], ti.shape()[3]);
        let (oc, ic, kh, kw) = (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
        if ic != c || kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: ti.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let oh = kernels::out_dim(h, kh, stride, pad);
        let ow = kernels::out_dim(w, kw, stride, pad);
        let data = kernels::conv2d(ti.data(), tw.data(), n, c, h, w, oc, kh, kw, stride, pad);
        let v = Tensor::new(vec![n, oc, oh, ow], data).expect("conv shape");
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                stride,
                pad,
            },
            v,
        ))
    }

    /// [rows, m] + [m], bias broadcast over rows.
    pub fn bias_add_rows(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (ta, tb) = (self.value(a), self.value(bias));
        require_rank(ta, 2, "bias_add_rows")?;
        require_rank(tb, 1, "bias_add_rows")?;
        let (rows, m) = (ta.shape()[0], ta.shape()[1]);
        if tb.shape()[0] != m {
            return Err(TensorError::ShapeMismatch {
                op: "bias_add_rows",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = ta.data().to_vec();
        for r in 0..rows {
            for (d, &bv) in data[r * m..(r + 1) * m].iter_mut().zip(tb.data()) {
                *d += bv;
            }
        }
        let v = Tensor::new(vec![rows, m], data).expect("shape");
        Ok(self.push(Op::BiasAddRows(a, bias), v))
    }

    /// [N,C,H,W] + [C], bias broadcast over batch and spatial dims.
    pub fn bias_add_channels(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (ta, tb) = (self.value(a), self.value(bias));
        require_rank(ta, 4, "bias_add_channels")?;
        require_rank(tb, 1, "bias_add_channels")?;
        let (n, c, h, w) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], ta.shape()[3]);
        if tb.shape()[0] != c {
            return Err(TensorError::ShapeMismatch {
                op: "bias_add_channels",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = ta.data().to_vec();
        for i in 0..n {
            for ch in 0..c {
                let bv = tb.data()[ch];
                for d in &mut data[(i * c + ch) * h * w..(i * c + ch + 1) * h * w] {
                    *d += bv;
                }
            }
        }
        let v = Tensor::new(ta.shape().to_vec(), data).expect("shape");
        Ok(self.push(Op::BiasAddChannels(a, bias), v))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(Op::LeakyRelu(a, slope), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(Op::Sigmoid(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn max_pool2d(&mut self, input: NodeId, win: usize) -> Result<NodeId, TensorError> {
        let ti = self.value(input);
        require_rank(ti, 4, "max_pool2d")?;
        let (n, c, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2], ti.shape()[3]);
        let (data, argmax) = kernels::max_pool2d(ti.data(), n, c, h, w, win);
        let v = Tensor::new(vec![n, c, h / win, w / win], data).expect("shape");
        Ok(self.push(Op::MaxPool2d { input, argmax }, v))
    }

    pub fn avg_pool2d(&mut self, input: NodeId, win: usize) -> Result<NodeId, TensorError> {
        let ti = self.value(input);
        require_rank(ti, 4, "avg_pool2d")?;
        let (n, c, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2], ti.shape()[3]);
        let data = kernels::avg_pool2d(ti.data(), n, c, h, w, win);
        let v = Tensor::new(vec![n, c, h / win, w / win], data).expect("shape");
        Ok(self.push(Op::AvgPool2d { input, win }, v))
    }

    /// Flatten to [batch, rest] (or an arbitrary reshape of equal size).
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape(a), v))
    }

    pub fn flatten(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let s = self.value(a).shape();
        let batch = s[0];
        let rest: usize = s[1..].iter().product();
        self.reshape(a, &[batch, rest])
    }

    /// Mean softmax cross-entropy over a batch of logits [n, k].
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, TensorError> {
        let tl = self.value(logits);
        require_rank(tl, 2, "softmax_cross_entropy")?;
        let (n, k) = (tl.shape()[0], tl.shape()[1]);
        if labels.len() != n || labels.iter().any(|&y| y >= k) {
            return Err(TensorError::Invalid {
                op: "softmax_cross_entropy",
                msg: format!("{} labels for {} rows of {} classes", labels.len(), n, k),
            });
        }
        let probs = kernels::softmax_rows(tl.data(), n, k);
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            loss -= probs[i * k + y].max(1e-300).ln();
        }
        loss /= n as f64;
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            Tensor::scalar(loss),
        ))
    }

    pub fn max_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self
            .value(a)
            .zip_map(self.value(b), "max_elem", f64::max)?;
        Ok(self.push(Op::MaxElem(a, b), v))
    }

    /// Tile a [N,1,H,W] map across `c` channels, giving [N,c,H,W].
    pub fn repeat_channels(&mut self, a: NodeId, c: usize) -> Result<NodeId, TensorError> {
        let ta = self.value(a);
        require_rank(ta, 4, "repeat_channels")?;
        if ta.shape()[1] != 1 {
            return Err(TensorError::BadRank {
                op: "repeat_channels",
                expected: 1,
                shape: ta.shape().to_vec(),
            });
        }
        let (n, h, w) = (ta.shape()[0], ta.shape()[2], ta.shape()[3]);
        let mut data = Vec::with_capacity(n * c * h * w);
        for i in 0..n {
            let plane = &ta.data()[i * h * w..(i + 1) * h * w];
            for _ in 0..c {
                data.extend_from_slice(plane);
            }
        }
        let v = Tensor::new(vec![n, c, h, w], data).expect("shape");
        Ok(self.push(Op::RepeatChannels(a, c), v))
    }

    pub fn reduce_sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::ReduceSum(a), v)
    }

    pub fn reduce_mean(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(Op::ReduceMean(a), v)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), v)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log(a), v)
    }

    /// Reverse sweep from `output` with gradient `seed`.
    pub fn backward(&self, output: NodeId, seed: &Tensor) -> Result<Gradients, TensorError> {
        if self.nodes.is_empty() {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: "empty record".into(),
            });
        }
        if seed.shape() != self.value(output).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                lhs: seed.shape().to_vec(),
                rhs: self.value(output).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed.clone());

        for idx in (0..=output.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        match &mut grads[id.0] {
            Some(g) => {
                let gd = g.data_mut();
                for (a, b) in gd.iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[idx].op {
            Op::Input => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let da = g.zip_map(self.value(*b), "mul_bwd", |x, y| x * y).unwrap();
                let db = g.zip_map(self.value(*a), "mul_bwd", |x, y| x * y).unwrap();
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::ScalarMul(a, s) => {
                let s = *s;
                self.acc(grads, *a, g.map(|x| x * s));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                let mut da = vec![0.0; m * k];
                kernels::matmul_a_bt_acc(g.data(), tb.data(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                kernels::matmul_at_b_acc(ta.data(), g.data(), &mut db, m, k, n);
                self.acc(grads, *a, Tensor::new(vec![m, k], da).unwrap());
                self.acc(grads, *b, Tensor::new(vec![k, n], db).unwrap());
            }
            Op::Conv2d {
                input,
                weight,
                stride,
                pad,
            } => {
                let (ti, tw) = (self.value(*input), self.value(*weight));
                let (n, c, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2], ti.shape()[3]);
                let (oc, _, kh, kw) =
                    (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
                let (din, dw) = kernels::conv2d_backward(
                    ti.data(),
                    tw.data(),
                    g.data(),
                    n,
                    c,
                    h,
                    w,
                    oc,
                    kh,
                    kw,
                    *stride,
                    *pad,
                );
                self.acc(grads, *input, Tensor::new(ti.shape().to_vec(), din).unwrap());
                self.acc(grads, *weight, Tensor::new(tw.shape().to_vec(), dw).unwrap());
            }
            Op::BiasAddRows(a, bias) => {
                let ta = self.value(*a);
                let (rows, m) = (ta.shape()[0], ta.shape()[1]);
                let mut db = vec![0.0; m];
                for r in 0..rows {
                    for (dv, &gv) in db.iter_mut().zip(&g.data()[r * m..(r + 1) * m]) {
                        *dv += gv;
                    }
                }
                self.acc(grads, *a, g.clone());
                self.acc(grads, *bias, Tensor::new(vec![m], db).unwrap());
            }
            Op::BiasAddChannels(a, bias) => {
                let ta = self.value(*a);
                let (n, c, h, w) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], ta.shape()[3]);
                let mut db = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        db[ch] += g.data()[(i * c + ch) * h * w..(i * c + ch + 1) * h * w]
                            .iter()
                            .sum::<f64>();
                    }
                }
                self.acc(grads, *a, g.clone());
                self.acc(grads, *bias, Tensor::new(vec![c], db).unwrap());
            }
            Op::Relu(a) => {
                let da = g
                    .zip_map(self.value(*a), "relu_bwd", |gv, x| if x > 0.0 { gv } else { 0.0 })
                    .unwrap();
                self.acc(grads, *a, da);
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let da = g
                    .zip_map(self.value(*a), "lrelu_bwd", |gv, x| {
                        if x > 0.0 {
                            gv
                        } else {
                            s * gv
                        }
                    })
                    .unwrap();
                self.acc(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                let da = g
                    .zip_map(y, "sigmoid_bwd", |gv, yv| gv * yv * (1.0 - yv))
                    .unwrap();
                self.acc(grads, *a, da);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[idx].value;
                let da = g
                    .zip_map(y, "tanh_bwd", |gv, yv| gv * (1.0 - yv * yv))
                    .unwrap();
                self.acc(grads, *a, da);
            }
            Op::MaxPool2d { input, argmax } => {
                let ti = self.value(*input);
                let mut din = vec![0.0; ti.numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    din[src] += g.data()[o];
                }
                self.acc(grads, *input, Tensor::new(ti.shape().to_vec(), din).unwrap());
            }
            Op::AvgPool2d { input, win } => {
                let ti = self.value(*input);
                let (n, c, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2], ti.shape()[3]);
                let (oh, ow) = (h / win, w / win);
                let inv = 1.0 / (win * win) as f64;
                let mut din = vec![0.0; ti.numel()];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * h * w;
                        let obase = (i * c + ch) * oh * ow;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g.data()[obase + oy * ow + ox] * inv;
                                for ky in 0..*win {
                                    for kx in 0..*win {
                                        din[base + (oy * win + ky) * w + ox * win + kx] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *input, Tensor::new(ti.shape().to_vec(), din).unwrap());
            }
            Op::Reshape(a) => {
                let da = g.reshape(self.value(*a).shape()).unwrap();
                self.acc(grads, *a, da);
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let tl = self.value(*logits);
                let (n, k) = (tl.shape()[0], tl.shape()[1]);
                let mut probs = kernels::softmax_rows(tl.data(), n, k);
                let scale = g.item() / n as f64;
                for (i, &y) in labels.iter().enumerate() {
                    probs[i * k + y] -= 1.0;
                }
                probs.iter_mut().for_each(|v| *v *= scale);
                self.acc(grads, *logits, Tensor::new(vec![n, k], probs).unwrap());
            }
            Op::MaxElem(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = Tensor::new(
                    ta.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(ta.data().iter().zip(tb.data()))
                        .map(|(&gv, (&x, &y))| if x >= y { gv } else { 0.0 })
                        .collect(),
                )
                .unwrap();
                let db = Tensor::new(
                    tb.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(ta.data().iter().zip(tb.data()))
                        .map(|(&gv, (&x, &y))| if x < y { gv } else { 0.0 })
                        .collect(),
                )
                .unwrap();
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::RepeatChannels(a, c) => {
                let ta = self.value(*a);
                let (n, h, w) = (ta.shape()[0], ta.shape()[2], ta.shape()[3]);
                let mut da = vec![0.0; n * h * w];
                for i in 0..n {
                    for ch in 0..*c {
                        let src = &g.data()[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
                        for (dv, &gv) in da[i * h * w..(i + 1) * h * w].iter_mut().zip(src) {
                            *dv += gv;
                        }
                    }
                }
                self.acc(grads, *a, Tensor::new(ta.shape().to_vec(), da).unwrap());
            }
            Op::ReduceSum(a) => {
                let gv = g.item();
                self.acc(grads, *a, Tensor::filled(self.value(*a).shape(), gv));
            }
            Op::ReduceMean(a) => {
                let ta = self.value(*a);
                let gv = g.item() / ta.numel() as f64;
                self.acc(grads, *a, Tensor::filled(ta.shape(), gv));
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let da = g
                    .zip_map(self.value(*a), "clamp_bwd", |gv, x| {
                        if x >= lo && x <= hi {
                            gv
                        } else {
                            0.0
                        }
                    })
                    .unwrap();
                self.acc(grads, *a, da);
            }
            Op::Log(a) => {
                let da = g
                    .zip_map(self.value(*a), "log_bwd", |gv, x| gv / x)
                    .unwrap();
                self.acc(grads, *a, da);
            }
        }
    }
}
