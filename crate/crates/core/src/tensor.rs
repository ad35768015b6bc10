//! Dense `f64` tensors and a tape-based reverse-mode autodiff engine.
//!
//! A [`Tape`] is an append-only arena of nodes. Every op pushes one node
//! holding its forward value, its parents and whatever it saved for the
//! backward pass; arena order is therefore a topological order and
//! [`Tape::backward`] walks it once in reverse. Tapes are single-threaded;
//! batch parallelism uses one tape per example.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Row-major dense array.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Ln(Var),
    Exp(Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SqL2(Var, Var),
    NormL2(Var),
    Pick {
        input: Var,
        index: Vec<usize>,
    },
    MaxAll {
        input: Var,
        arg: usize,
    },
    MinAll {
        input: Var,
        arg: usize,
    },
    MaxRows {
        input: Var,
        args: Vec<usize>,
    },
    SmallestMean {
        input: Var,
        picked: Vec<usize>,
    },
    Concat(Vec<Var>),
    MatVec {
        matrix: Var,
        vector: Var,
    },
    PairwiseSqDist {
        a: Var,
        b: Var,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    SoftmaxCe {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Wengert-style tape. See module docs.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var], name: &'static str) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated at `v` by the last [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape.clone(),
            data: g.clone(),
        })
    }

    /// Like [`Tape::grad`] but returns zeros for nodes the loss did not reach.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(&self.nodes[v.0].value.shape))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (&self.value(a).shape, &self.value(b).shape);
        if sa != sb {
            return shape_err(format!("{op}: {sa:?} vs {sb:?}"));
        }
        Ok(())
    }

    fn map(&mut self, a: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(out, op, &[a], name)
    }

    /// Elementwise binary op; a one-element operand broadcasts against the other.
    fn zip(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let out = if x.shape == y.shape {
            Tensor {
                shape: x.shape.clone(),
                data: x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect(),
            }
        } else if y.is_scalar() {
            let q = y.data[0];
            Tensor {
                shape: x.shape.clone(),
                data: x.data.iter().map(|&p| f(p, q)).collect(),
            }
        } else if x.is_scalar() {
            let p = x.data[0];
            Tensor {
                shape: y.shape.clone(),
                data: y.data.iter().map(|&q| f(p, q)).collect(),
            }
        } else {
            return shape_err(format!("{name}: {:?} vs {:?}", x.shape, y.shape));
        };
        self.push(out, op, &[a, b], name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), "add", |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), "sub", |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), "mul", |p, q| p * q)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Neg(a), "neg", |v| -v)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map(a, Op::Scale(a, s), "scale", |v| v * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map(a, Op::AddScalar(a), "add_scalar", |v| v + s)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Ln(a), "ln", f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a), "exp", f64::exp)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a), "relu", |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a), "sigmoid", sigmoid)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return shape_err("mean of empty tensor");
        }
        let m = x.data.iter().sum::<f64>() / x.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), &[a], "mean")
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push(out, Op::Reshape(a), &[a], "reshape")
    }

    /// Squared Euclidean distance between same-shape tensors.
    pub fn sq_l2(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sq_l2")?;
        let s = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(p, q)| (p - q) * (p - q))
            .sum();
        self.push(Tensor::scalar(s), Op::SqL2(a, b), &[a, b], "sq_l2")
    }

    /// Euclidean norm of the flattened tensor. The gradient at zero is taken as zero.
    pub fn norm_l2(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push(Tensor::scalar(s), Op::NormL2(a), &[a], "norm_l2")
    }

    /// Gather flat indices into a 1-D tensor.
    pub fn pick(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= x.len()) {
            return Err(Error::Index(format!("pick index {bad} out of {}", x.len())));
        }
        let out = Tensor::vector(index.iter().map(|&i| x.data[i]).collect());
        self.push(
            out,
            Op::Pick {
                input: a,
                index: index.to_vec(),
            },
            &[a],
            "pick",
        )
    }

    /// Maximum over all entries with the first (row-major) index attaining it.
    pub fn max_with_argmax(&mut self, a: Var) -> Result<(Var, usize)> {
        let x = self.value(a);
        let arg = argmax(&x.data).ok_or_else(|| Error::Shape("max of empty tensor".into()))?;
        let v = Tensor::scalar(x.data[arg]);
        let out = self.push(v, Op::MaxAll { input: a, arg }, &[a], "max")?;
        Ok((out, arg))
    }

    /// Minimum over all entries with the first index attaining it.
    pub fn min_with_argmin(&mut self, a: Var) -> Result<(Var, usize)> {
        let x = self.value(a);
        let arg = argmin(&x.data).ok_or_else(|| Error::Shape("min of empty tensor".into()))?;
        let v = Tensor::scalar(x.data[arg]);
        let out = self.push(v, Op::MinAll { input: a, arg }, &[a], "min")?;
        Ok((out, arg))
    }

    /// Per-row maximum of a 2-D tensor, first-index ties.
    pub fn max_rows(&mut self, a: Var) -> Result<(Var, Vec<usize>)> {
        let x = self.value(a);
        if x.shape.len() != 2 || x.shape[1] == 0 {
            return shape_err(format!(
                "max_rows needs a non-empty 2-D tensor, got {:?}",
                x.shape
            ));
        }
        let cols = x.shape[1];
        let args: Vec<usize> = x
            .data
            .chunks(cols)
            .map(|r| argmax(r).expect("non-empty row"))
            .collect();
        let vals = args
            .iter()
            .enumerate()
            .map(|(i, &j)| x.data[i * cols + j])
            .collect();
        let out = self.push(
            Tensor::vector(vals),
            Op::MaxRows {
                input: a,
                args: args.clone(),
            },
            &[a],
            "max_rows",
        )?;
        Ok((out, args))
    }

    /// Mean of the `k` smallest entries (stable: earlier indices win ties).
    /// `k = 1` is the minimum.
    pub fn smallest_mean(&mut self, a: Var, k: usize) -> Result<Var> {
        let x = self.value(a);
        if k == 0 || k > x.len() {
            return shape_err(format!("smallest_mean: k = {k} with {} entries", x.len()));
        }
        let picked = smallest_indices(&x.data, k);
        let m = picked.iter().map(|&i| x.data[i]).sum::<f64>() / k as f64;
        self.push(
            Tensor::scalar(m),
            Op::SmallestMean { input: a, picked },
            &[a],
            "smallest_mean",
        )
    }

    /// Flatten and concatenate.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let data: Vec<f64> = parts
            .iter()
            .flat_map(|&p| self.value(p).data.iter().copied())
            .collect();
        self.push(
            Tensor::vector(data),
            Op::Concat(parts.to_vec()),
            parts,
            "concat",
        )
    }

    /// `[r, c] x [c] -> [r]`.
    pub fn matvec(&mut self, matrix: Var, vector: Var) -> Result<Var> {
        let (m, v) = (self.value(matrix), self.value(vector));
        if m.shape.len() != 2 || v.len() != m.shape[1] {
            return shape_err(format!("matvec: {:?} x {:?}", m.shape, v.shape));
        }
        let out: Vec<f64> = m
            .data
            .chunks(m.shape[1])
            .map(|row| row.iter().zip(&v.data).map(|(a, b)| a * b).sum())
            .collect();
        self.push(
            Tensor::vector(out),
            Op::MatVec { matrix, vector },
            &[matrix, vector],
            "matvec",
        )
    }

    /// All squared distances between rows: `[m, d] x [n, d] -> [m, n]`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape.len() != 2 || y.shape.len() != 2 || x.shape[1] != y.shape[1] {
            return shape_err(format!("pairwise_sq_dist: {:?} vs {:?}", x.shape, y.shape));
        }
        let (m, n, d) = (x.shape[0], y.shape[0], x.shape[1]);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let xi = &x.data[i * d..(i + 1) * d];
            for j in 0..n {
                let yj = &y.data[j * d..(j + 1) * d];
                out.push(xi.iter().zip(yj).map(|(p, q)| (p - q) * (p - q)).sum());
            }
        }
        let t = Tensor {
            shape: vec![m, n],
            data: out,
        };
        self.push(t, Op::PairwiseSqDist { a, b }, &[a, b], "pairwise_sq_dist")
    }

    /// Valid (unpadded) 2-D convolution. `input` is `[rows, cols, channels]`,
    /// `kernel` is `[out, kh, kw, channels]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (x, k) = (self.value(input), self.value(kernel));
        let geom = ConvGeom::new(&x.shape, &k.shape, stride)?;
        let out = conv_forward(&geom, &x.data, &k.data);
        let t = Tensor {
            shape: vec![geom.oh, geom.ow, geom.co],
            data: out,
        };
        self.push(
            t,
            Op::Conv2d {
                input,
                kernel,
                stride,
            },
            &[input, kernel],
            "conv2d",
        )
    }

    /// Adds `bias[c]` to every position of a `[.., c]` tensor.
    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(input), self.value(bias));
        let c = *x.shape.last().unwrap_or(&0);
        if b.len() != c {
            return shape_err(format!("channel bias: {:?} vs {:?}", x.shape, b.shape));
        }
        let data = x
            .data
            .chunks(c)
            .flat_map(|px| px.iter().zip(&b.data).map(|(v, bb)| v + bb))
            .collect();
        let t = Tensor {
            shape: x.shape.clone(),
            data,
        };
        self.push(
            t,
            Op::ChannelBias { input, bias },
            &[input, bias],
            "channel_bias",
        )
    }

    /// `-log softmax(logits)[label]`, max-subtracted.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits);
        if label >= z.len() {
            return Err(Error::Index(format!(
                "label {label} with {} logits",
                z.len()
            )));
        }
        let probs = softmax(&z.data);
        let m = z.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.data.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let loss = lse - z.data[label];
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                label,
                probs,
            },
            &[logits],
            "softmax_cross_entropy",
        )
    }

    /// Reverse pass from a scalar. A second call requires [`Tape::zero_grad`] first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward called twice without zero_grad".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape
            )));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let out = std::mem::take(&mut self.nodes[i].value);
            self.propagate(&op, &out, &g);
            let node = &mut self.nodes[i];
            node.op = op;
            node.value = out;
            node.grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: impl FnOnce(&mut [f64])) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let n = node.value.len();
        let g = node.grad.get_or_insert_with(|| vec![0.0; n]);
        delta(g);
    }

    /// Gradient of a broadcasting binary op onto one operand.
    fn accumulate_broadcast(&mut self, v: Var, contrib: Vec<f64>) {
        let scalar = self.value(v).is_scalar() && contrib.len() != 1;
        self.accumulate(v, |g| {
            if scalar {
                g[0] += contrib.iter().sum::<f64>();
            } else {
                for (gi, c) in g.iter_mut().zip(&contrib) {
                    *gi += c;
                }
            }
        });
    }

    fn propagate(&mut self, op: &Op, out: &Tensor, g: &[f64]) {
        match op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                let g = g.to_vec();
                self.accumulate_broadcast(a, g.clone());
                self.accumulate_broadcast(b, g);
            }
            &Op::Sub(a, b) => {
                self.accumulate_broadcast(a, g.to_vec());
                self.accumulate_broadcast(b, g.iter().map(|v| -v).collect());
            }
            &Op::Mul(a, b) => {
                let n = g.len();
                let (x, y) = (&self.value(a).data, &self.value(b).data);
                let at = |d: &Vec<f64>, k: usize| if d.len() == 1 { d[0] } else { d[k] };
                let ga: Vec<f64> = (0..n).map(|k| g[k] * at(y, k)).collect();
                let gb: Vec<f64> = (0..n).map(|k| g[k] * at(x, k)).collect();
                self.accumulate_broadcast(a, ga);
                self.accumulate_broadcast(b, gb);
            }
            &Op::Neg(a) => self.accumulate(a, |ga| ga.iter_mut().zip(g).for_each(|(p, q)| *p -= q)),
            &Op::Scale(a, s) => {
                self.accumulate(a, |ga| ga.iter_mut().zip(g).for_each(|(p, q)| *p += s * q))
            }
            &Op::AddScalar(a) | &Op::Reshape(a) => {
                self.accumulate(a, |ga| ga.iter_mut().zip(g).for_each(|(p, q)| *p += q))
            }
            &Op::Ln(a) => {
                let d: Vec<f64> = self
                    .value(a)
                    .data
                    .iter()
                    .zip(g)
                    .map(|(x, q)| q / x)
                    .collect();
                self.accumulate(a, |ga| ga.iter_mut().zip(&d).for_each(|(p, q)| *p += q));
            }
            &Op::Exp(a) => {
                let d: Vec<f64> = out.data.iter().zip(g).map(|(y, q)| q * y).collect();
                self.accumulate(a, |ga| ga.iter_mut().zip(&d).for_each(|(p, q)| *p += q));
            }
            &Op::Relu(a) => {
                let d: Vec<f64> = self
                    .value(a)
                    .data
                    .iter()
                    .zip(g)
                    .map(|(x, q)| if *x > 0.0 { *q } else { 0.0 })
                    .collect();
                self.accumulate(a, |ga| ga.iter_mut().zip(&d).for_each(|(p, q)| *p += q));
            }
            &Op::Sigmoid(a) => {
                let d: Vec<f64> = out
                    .data
                    .iter()
                    .zip(g)
                    .map(|(y, q)| q * y * (1.0 - y))
                    .collect();
                self.accumulate(a, |ga| ga.iter_mut().zip(&d).for_each(|(p, q)| *p += q));
            }
            &Op::Sum(a) => {
                let q = g[0];
                self.accumulate(a, |ga| ga.iter_mut().for_each(|p| *p += q));
            }
            &Op::Mean(a) => {
                let q = g[0] / self.value(a).len() as f64;
                self.accumulate(a, |ga| ga.iter_mut().for_each(|p| *p += q));
            }
            &Op::SqL2(a, b) => {
                let q = g[0];
                let d: Vec<f64> = self
                    .value(a)
                    .data
                    .iter()
                    .zip(&self.value(b).data)
                    .map(|(x, y)| 2.0 * q * (x - y))
                    .collect();
                self.accumulate(a, |ga| ga.iter_mut().zip(&d).for_each(|(p, v)| *p += v));
                self.accumulate(b, |gb| gb.iter_mut().zip(&d).for_each(|(p, v)| *p -= v));
            }
            &Op::NormL2(a) => {
                let norm = out.data[0];
                if norm > 0.0 {
                    let s = g[0] / norm;
                    let d: Vec<f64> = self.value(a).data.iter().map(|x| s * x).collect();
                    self.accumulate(a, |ga| ga.iter_mut().zip(&d).for_each(|(p, v)| *p += v));
                }
            }
            Op::Pick { input, index } => {
                let (input, index) = (*input, index.clone());
                self.accumulate(input, |ga| {
                    for (k, &j) in index.iter().enumerate() {
                        ga[j] += g[k];
                    }
                });
            }
            &Op::MaxAll { input, arg } | &Op::MinAll { input, arg } => {
                self.accumulate(input, |ga| ga[arg] += g[0]);
            }
            Op::MaxRows { input, args } => {
                let (input, args) = (*input, args.clone());
                let cols = self.value(input).shape[1];
                self.accumulate(input, |ga| {
                    for (r, &c) in args.iter().enumerate() {
                        ga[r * cols + c] += g[r];
                    }
                });
            }
            Op::SmallestMean { input, picked } => {
                let (input, picked) = (*input, picked.clone());
                let q = g[0] / picked.len() as f64;
                self.accumulate(input, |ga| picked.iter().for_each(|&j| ga[j] += q));
            }
            Op::Concat(parts) => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let n = self.value(p).len();
                    let slice = g[off..off + n].to_vec();
                    self.accumulate(p, |gp| gp.iter_mut().zip(&slice).for_each(|(a, b)| *a += b));
                    off += n;
                }
            }
            &Op::MatVec { matrix, vector } => {
                let (m, v) = (self.value(matrix), self.value(vector));
                let cols = m.shape[1];
                let gm: Vec<f64> = (0..m.len())
                    .map(|k| g[k / cols] * v.data[k % cols])
                    .collect();
                let mut gv = vec![0.0; cols];
                for (r, row) in m.data.chunks(cols).enumerate() {
                    for (c, w) in row.iter().enumerate() {
                        gv[c] += g[r] * w;
                    }
                }
                self.accumulate(matrix, |ga| {
                    ga.iter_mut().zip(&gm).for_each(|(p, q)| *p += q)
                });
                self.accumulate(vector, |ga| {
                    ga.iter_mut().zip(&gv).for_each(|(p, q)| *p += q)
                });
            }
            &Op::PairwiseSqDist { a, b } => {
                let (x, y) = (self.value(a), self.value(b));
                let (m, n, d) = (x.shape[0], y.shape[0], x.shape[1]);
                let mut gx = vec![0.0; m * d];
                let mut gy = vec![0.0; n * d];
                for i in 0..m {
                    for j in 0..n {
                        let q = 2.0 * g[i * n + j];
                        if q == 0.0 {
                            continue;
                        }
                        for t in 0..d {
                            let diff = q * (x.data[i * d + t] - y.data[j * d + t]);
                            gx[i * d + t] += diff;
                            gy[j * d + t] -= diff;
                        }
                    }
                }
                self.accumulate(a, |ga| ga.iter_mut().zip(&gx).for_each(|(p, q)| *p += q));
                self.accumulate(b, |gb| gb.iter_mut().zip(&gy).for_each(|(p, q)| *p += q));
            }
            &Op::Conv2d {
                input,
                kernel,
                stride,
            } => {
                let (x, k) = (self.value(input), self.value(kernel));
                let geom = ConvGeom::new(&x.shape, &k.shape, stride).expect("checked in forward");
                let need_x = self.nodes[input.0].requires_grad;
                let need_k = self.nodes[kernel.0].requires_grad;
                let (gx, gk) = conv_backward(&geom, &x.data, &k.data, g, need_x, need_k);
                if let Some(gx) = gx {
                    self.accumulate(input, |ga| {
                        ga.iter_mut().zip(&gx).for_each(|(p, q)| *p += q)
                    });
                }
                if let Some(gk) = gk {
                    self.accumulate(kernel, |ga| {
                        ga.iter_mut().zip(&gk).for_each(|(p, q)| *p += q)
                    });
                }
            }
            &Op::ChannelBias { input, bias } => {
                let c = self.value(bias).len();
                let mut gb = vec![0.0; c];
                for px in g.chunks(c) {
                    gb.iter_mut().zip(px).for_each(|(p, q)| *p += q);
                }
                self.accumulate(input, |ga| ga.iter_mut().zip(g).for_each(|(p, q)| *p += q));
                self.accumulate(bias, |ga| ga.iter_mut().zip(&gb).for_each(|(p, q)| *p += q));
            }
            Op::SoftmaxCe {
                logits,
                label,
                probs,
            } => {
                let (logits, label) = (*logits, *label);
                let q = g[0];
                let d: Vec<f64> = probs
                    .iter()
                    .enumerate()
                    .map(|(j, p)| q * (p - if j == label { 1.0 } else { 0.0 }))
                    .collect();
                self.accumulate(logits, |ga| {
                    ga.iter_mut().zip(&d).for_each(|(p, v)| *p += v)
                });
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// First index of the maximum; `None` for empty input.
pub fn argmax(xs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in xs.iter().enumerate() {
        if best.map_or(true, |b| v > xs[b]) {
            best = Some(i);
        }
    }
    best
}

pub fn argmin(xs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in xs.iter().enumerate() {
        if best.map_or(true, |b| v < xs[b]) {
            best = Some(i);
        }
    }
    best
}

fn smallest_indices(xs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    idx.truncate(k);
    idx
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    h: usize,
    w: usize,
    ci: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(x: &[usize], k: &[usize], stride: usize) -> Result<Self> {
        if x.len() != 3 || k.len() != 4 {
            return shape_err(format!("conv2d: input {x:?}, kernel {k:?}"));
        }
        if stride == 0 {
            return shape_err("conv2d: stride must be >= 1");
        }
        let (h, w, ci) = (x[0], x[1], x[2]);
        let (co, kh, kw, kc) = (k[0], k[1], k[2], k[3]);
        if kc != ci {
            return shape_err(format!("conv2d: kernel depth {kc} vs input depth {ci}"));
        }
        if kh > h || kw > w {
            return shape_err(format!(
                "conv2d: kernel {kh}x{kw} larger than input {h}x{w}"
            ));
        }
        Ok(Self {
            h,
            w,
            ci,
            co,
            kh,
            kw,
            stride,
            oh: (h - kh) / stride + 1,
            ow: (w - kw) / stride + 1,
        })
    }
}

fn conv_forward(g: &ConvGeom, x: &[f64], k: &[f64]) -> Vec<f64> {
    let span = g.kw * g.ci;
    let mut out = vec![0.0; g.oh * g.ow * g.co];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let base = (oy * g.ow + ox) * g.co;
            for o in 0..g.co {
                let mut acc = 0.0;
                for ky in 0..g.kh {
                    let xs = ((oy * g.stride + ky) * g.w + ox * g.stride) * g.ci;
                    let ks = (o * g.kh + ky) * span;
                    acc += x[xs..xs + span]
                        .iter()
                        .zip(&k[ks..ks + span])
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                }
                out[base + o] = acc;
            }
        }
    }
    out
}

fn conv_backward(
    g: &ConvGeom,
    x: &[f64],
    k: &[f64],
    grad: &[f64],
    need_x: bool,
    need_k: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let span = g.kw * g.ci;
    let mut gx = need_x.then(|| vec![0.0; g.h * g.w * g.ci]);
    let mut gk = need_k.then(|| vec![0.0; k.len()]);
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let base = (oy * g.ow + ox) * g.co;
            for o in 0..g.co {
                let q = grad[base + o];
                if q == 0.0 {
                    continue;
                }
                for ky in 0..g.kh {
                    let xs = ((oy * g.stride + ky) * g.w + ox * g.stride) * g.ci;
                    let ks = (o * g.kh + ky) * span;
                    if let Some(gx) = gx.as_mut() {
                        for (d, kv) in gx[xs..xs + span].iter_mut().zip(&k[ks..ks + span]) {
                            *d += q * kv;
                        }
                    }
                    if let Some(gk) = gk.as_mut() {
                        for (d, xv) in gk[ks..ks + span].iter_mut().zip(&x[xs..xs + span]) {
                            *d += q * xv;
                        }
                    }
                }
            }
        }
    }
    (gx, gk)
}
