//! Append-only Wengert tape for reverse-mode differentiation.
//!
//! Every primitive appends one node holding its output value; inputs always
//! precede outputs, so a reverse sweep over the node list is a valid
//! topological order for the backward pass.

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CausalAttention {
        qkv: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    MeanOf(Vec<Var>),
    MeanRows(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn cols(shape: &[usize]) -> usize {
    *shape.last().expect("non-empty shape")
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

    /// Records `t` as a leaf; it participates in backward iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_unchecked(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push_unchecked(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push_unchecked(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are finite")
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any) into `t`'s gradient buffer.
    pub fn write_grad(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }

    fn push_unchecked(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(shape, value, op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a), self.value(b), &mut out, m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push("add", self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b])
    }

    /// Adds a vector to every row; the only broadcast the tape supports.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = cols(self.shape(x));
        if self.shape(bias) != [c] {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(v, w)| v + w))
            .collect();
        self.push("add_bias", self.shape(x).to_vec(), out, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push("mul", self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * c).collect();
        self.push("scale", self.shape(x).to_vec(), out, Op::Scale(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        self.push("relu", self.shape(x).to_vec(), out, Op::Relu(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        self.push("gelu", self.shape(x).to_vec(), out, Op::Gelu(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let m = cols(&shape);
        if m < 2 {
            return Err(Error::DegenerateNorm(m));
        }
        if !(eps > 0.0) {
            return Err(Error::Contract(format!("layer_norm eps must be positive, got {eps}")));
        }
        for p in [gain, bias] {
            if self.shape(p) != [m] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (xhat, rstd) = kernels::normalize_rows(self.value(x), m, eps);
        let (g, b) = (self.value(gain), self.value(bias));
        let out = xhat
            .chunks(m)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((v, g), b)| v * g + b))
            .collect();
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        self.push("layer_norm", shape, out, op, &[x, gain, bias])
    }

    /// Gathers rows of `table` (shape `[V, m]`).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::Contract("embedding table must be 2-D".into()));
        }
        let (v, m) = (shape[0], shape[1]);
        if ids.is_empty() {
            return Err(Error::Contract("embedding lookup of an empty sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index {
                what: "embedding table",
                index: bad,
                bound: v,
            });
        }
        let tab = self.value(table);
        let out = ids.iter().flat_map(|&i| tab[i * m..(i + 1) * m].iter().copied()).collect();
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        self.push("embedding", vec![ids.len(), m], out, op, &[table])
    }

    /// Multi-head causal self-attention over a packed `[t, 3m]` query/key/value block.
    pub fn causal_attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(qkv).to_vec();
        if shape.len() != 2 || shape[1] % 3 != 0 || heads == 0 || (shape[1] / 3) % heads != 0 {
            return Err(Error::Dimension {
                op: "causal_attention",
                lhs: shape,
                rhs: vec![heads],
            });
        }
        let (t, m) = (shape[0], shape[1] / 3);
        let (out, probs) = kernels::attention_forward(self.value(qkv), t, m, heads);
        let op = Op::CausalAttention { qkv, heads, probs };
        self.push("causal_attention", vec![t, m], out, op, &[qkv])
    }

    /// Mean next-token negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                lhs: shape,
                rhs: vec![targets.len()],
            });
        }
        let v = shape[1];
        if let Some(&bad) = targets.iter().find(|&&i| i >= v) {
            return Err(Error::Index {
                what: "vocabulary",
                index: bad,
                bound: v,
            });
        }
        let probs = kernels::softmax_rows(self.value(logits), v);
        let nll = kernels::row_nll(self.value(logits), v, targets);
        let loss = nll.iter().sum::<f64>() / targets.len() as f64;
        let op = Op::SoftmaxCrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push("softmax_cross_entropy", vec![1], vec![loss], op, &[logits])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(x), &[x])
    }

    /// Element-wise arithmetic mean of same-shaped values (summed in order, divided by count).
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Contract("mean of an empty list".into()))?;
        for &x in &xs[1..] {
            self.same_shape("mean_of", first, x)?;
        }
        if xs.len() == 1 {
            return Ok(first);
        }
        let mut acc = self.value(first).to_vec();
        for &x in &xs[1..] {
            acc.iter_mut().zip(self.value(x)).for_each(|(a, v)| *a += v);
        }
        let n = xs.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        let shape = self.shape(first).to_vec();
        self.push("mean_of", shape, acc, Op::MeanOf(xs.to_vec()), xs)
    }

    /// Mean over rows of a 2-D value, giving a `[cols]` vector.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = cols(&shape);
        let rows = self.value(x).len() / c;
        let mut acc = vec![0.0; c];
        for row in self.value(x).chunks(c) {
            acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        acc.iter_mut().for_each(|a| *a /= rows as f64);
        self.push("mean_rows", vec![c], acc, Op::MeanRows(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`. Returns the number of operations visited.
    pub fn backward(&mut self, loss: Var) -> Result<usize> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            if !matches!(node.op, Op::Leaf) {
                visited += 1;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(visited)
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            let n = nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if needs(*a) {
                    let bv = &nodes[b.0].value;
                    acc(*a, &|da| kernels::matmul_grad_lhs(g, bv, da, m, k, n));
                }
                if needs(*b) {
                    let av = &nodes[a.0].value;
                    acc(*b, &|db| kernels::matmul_grad_rhs(av, g, db, m, k, n));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        acc(v, &|d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                    }
                }
            }
            Op::AddBias(x, b) => {
                if needs(*x) {
                    acc(*x, &|d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                }
                if needs(*b) {
                    let c = nodes[b.0].value.len();
                    acc(*b, &|d| {
                        for row in g.chunks(c) {
                            d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if needs(*a) {
                    acc(*a, &|d| {
                        for ((d, g), y) in d.iter_mut().zip(g).zip(bv) {
                            *d += g * y;
                        }
                    });
                }
                if needs(*b) {
                    acc(*b, &|d| {
                        for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                            *d += g * x;
                        }
                    });
                }
            }
            Op::Scale(x, c) => {
                acc(*x, &|d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * c));
            }
            Op::Relu(x) => {
                let xv = &nodes[x.0].value;
                acc(*x, &|d| {
                    for ((d, g), v) in d.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = &nodes[x.0].value;
                acc(*x, &|d| {
                    for ((d, g), v) in d.iter_mut().zip(g).zip(xv) {
                        *d += g * kernels::gelu_grad(*v);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let m = nodes[gain.0].value.len();
                let gv = &nodes[gain.0].value;
                if needs(*x) {
                    acc(*x, &|d| kernels::layer_norm_grad_input(g, gv, xhat, rstd, m, d));
                }
                if needs(*gain) {
                    acc(*gain, &|d| {
                        for (grow, xrow) in g.chunks(m).zip(xhat.chunks(m)) {
                            for ((d, g), xh) in d.iter_mut().zip(grow).zip(xrow) {
                                *d += g * xh;
                            }
                        }
                    });
                }
                if needs(*bias) {
                    acc(*bias, &|d| {
                        for grow in g.chunks(m) {
                            d.iter_mut().zip(grow).for_each(|(d, g)| *d += g);
                        }
                    });
                }
            }
            Op::Embedding { table, ids } => {
                let m = nodes[table.0].shape[1];
                acc(*table, &|d| {
                    for (row, &id) in g.chunks(m).zip(ids) {
                        d[id * m..(id + 1) * m]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::CausalAttention { qkv, heads, probs } => {
                let t = nodes[qkv.0].shape[0];
                let m = nodes[qkv.0].shape[1] / 3;
                let qv = &nodes[qkv.0].value;
                acc(*qkv, &|d| kernels::attention_backward(qv, probs, g, t, m, *heads, d));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = nodes[logits.0].shape[1];
                let scale = g[0] / targets.len() as f64;
                acc(*logits, &|d| {
                    for (r, &tgt) in targets.iter().enumerate() {
                        let row = &probs[r * v..(r + 1) * v];
                        let drow = &mut d[r * v..(r + 1) * v];
                        for (j, (d, p)) in drow.iter_mut().zip(row).enumerate() {
                            let onehot = if j == tgt { 1.0 } else { 0.0 };
                            *d += scale * (p - onehot);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &|d| d.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::MeanOf(xs) => {
                let n = xs.len() as f64;
                for &x in xs {
                    if needs(x) {
                        acc(x, &|d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g / n));
                    }
                }
            }
            Op::MeanRows(x) => {
                let c = g.len();
                let rows = (nodes[x.0].value.len() / c) as f64;
                acc(*x, &|d| {
                    for row in d.chunks_mut(c) {
                        row.iter_mut().zip(g).for_each(|(d, g)| *d += g / rows);
                    }
                });
            }
        }
    }
}
