//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Parameters
//! enter the graph by value from a [`ParamStore`]; [`Graph::backward`]
//! accumulates `d loss / d param` back into the store's gradient slots.

use crate::error::{arg_err, dim_err, Error, Result};
use crate::ops::{self, ConvGeom, PoolAxis, PoolGeom};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch-norm behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Affine {
        input: Var,
        weight: Var,
        bias: Var,
    },
    MatmulNt {
        a: Var,
        b: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Act {
        input: Var,
        kind: Activation,
    },
    AvgPoolAxes {
        input: Var,
        keep: PoolAxis,
    },
    Excite {
        input: Var,
        masks: [Option<Var>; 3],
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Sum {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    ConcatCols {
        inputs: Vec<(Var, usize)>,
    },
    L2NormalizeRows {
        input: Var,
        norms: Vec<f64>,
    },
    SubclusterXent {
        logits: Var,
        targets: Vec<f64>,
        n_sub: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of the non-parameter leaves, returned by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct LeafGrads {
    grads: Vec<(Var, Vec<f64>)>,
}

impl LeafGrads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.iter().find(|(k, _)| *k == v).map(|(_, g)| g.as_slice())
    }
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn add_into(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        None => *slot = Some(delta.to_vec()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Constant input; gradients do not flow into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copies a parameter's current value into the graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.tensor(id);
        let rg = p.requires_grad();
        let t = Tensor::from_parts(p.shape().to_vec(), p.data().to_vec());
        self.push(t, Op::Param(id), rg)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(dim_err!("conv2d input {xs:?} incompatible with kernel {ks:?}"));
        }
        if self.shape(bias) != [ks[0]] {
            return Err(dim_err!(
                "conv2d bias {:?} does not match kernel {ks:?}",
                self.shape(bias)
            ));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(arg_err!("conv2d stride must be positive, got {stride:?}"));
        }
        let (Some(out_h), Some(out_w)) = (
            ops::out_extent(xs[2], ks[2], stride.0, pad.0),
            ops::out_extent(xs[3], ks[3], stride.1, pad.1),
        ) else {
            return Err(dim_err!(
                "conv2d kernel {ks:?} does not fit input {xs:?} with padding {pad:?}"
            ));
        };
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            out_ch: ks[0],
            k_h: ks[2],
            k_w: ks[3],
            stride,
            pad,
            out_h,
            out_w,
        };
        let out = ops::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        let t = Tensor::from_parts(vec![geom.batch, geom.out_ch, out_h, out_w], out);
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn maxpool2d(&mut self, input: Var, window: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(dim_err!("maxpool2d expects [B,C,H,W], got {xs:?}"));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(arg_err!("maxpool2d stride must be positive, got {stride:?}"));
        }
        let (Some(out_h), Some(out_w)) = (
            ops::out_extent(xs[2], window.0, stride.0, 0),
            ops::out_extent(xs[3], window.1, stride.1, 0),
        ) else {
            return Err(dim_err!("maxpool2d window {window:?} larger than input {xs:?}"));
        };
        let geom = PoolGeom {
            planes: xs[0] * xs[1],
            in_h: xs[2],
            in_w: xs[3],
            k_h: window.0,
            k_w: window.1,
            stride,
            out_h,
            out_w,
        };
        let (out, argmax) = ops::maxpool2d_forward(&geom, self.value(input).data());
        let rg = self.rg(input);
        let t = Tensor::from_parts(vec![xs[0], xs[1], out_h, out_w], out);
        Ok(self.push(t, Op::MaxPool2d { input, argmax }, rg))
    }

    /// Max over the whole spatial extent, flattened to `[B,C]`.
    pub fn global_maxpool(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(dim_err!("global max pool expects [B,C,H,W], got {xs:?}"));
        }
        let p = self.maxpool2d(input, (xs[2], xs[3]), (xs[2], xs[3]))?;
        self.reshape(p, &[xs[0], xs[1]])
    }

    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || self.shape(bias) != [ws[1]] {
            return Err(dim_err!(
                "affine input {xs:?}, weight {ws:?}, bias {:?} are incompatible",
                self.shape(bias)
            ));
        }
        let out = ops::affine_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            xs[0],
            xs[1],
            ws[1],
        );
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            Tensor::from_parts(vec![xs[0], ws[1]], out),
            Op::Affine { input, weight, bias },
            rg,
        ))
    }

    /// `a · bᵀ` for `a: [N,D]`, `b: [K,D]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[1] {
            return Err(dim_err!("matmul_nt operands {as_:?} and {bs:?} are incompatible"));
        }
        let out = ops::matmul_nt(self.value(a).data(), self.value(b).data(), as_[0], as_[1], bs[0]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![as_[0], bs[0]], out), Op::MatmulNt { a, b }, rg))
    }

    /// Per-channel normalization of a `[B,C,H,W]` tensor.
    ///
    /// `running` holds the running mean followed by the running variance
    /// (length `2C`); train mode updates it in place with momentum
    /// [`BN_MOMENTUM`] using the unbiased batch variance.
    pub fn batch_norm2d(&mut self, input: Var, gamma: Var, beta: Var, running: &mut [f64], mode: Mode) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(dim_err!("batch_norm2d expects [B,C,H,W], got {xs:?}"));
        }
        let [b, c, h, w] = [xs[0], xs[1], xs[2], xs[3]];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || running.len() != 2 * c {
            return Err(dim_err!("batch_norm2d parameters do not match {c} channels"));
        }
        let plane = h * w;
        let n = (b * plane) as f64;
        let x = self.value(input).data();
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; c];
        for ci in 0..c {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut s = 0.0;
                    for bi in 0..b {
                        s += x[(bi * c + ci) * plane..][..plane].iter().sum::<f64>();
                    }
                    let mean = s / n;
                    let mut q = 0.0;
                    for bi in 0..b {
                        q += x[(bi * c + ci) * plane..][..plane]
                            .iter()
                            .map(|v| (v - mean) * (v - mean))
                            .sum::<f64>();
                    }
                    let var = q / n;
                    let unbiased = if n > 1.0 { q / (n - 1.0) } else { var };
                    running[ci] = (1.0 - BN_MOMENTUM) * running[ci] + BN_MOMENTUM * mean;
                    running[c + ci] = (1.0 - BN_MOMENTUM) * running[c + ci] + BN_MOMENTUM * unbiased;
                    (mean, var)
                }
                Mode::Eval => (running[ci], running[c + ci]),
            };
            let is = 1.0 / (var + BN_EPS).sqrt();
            inv_std[ci] = is;
            for bi in 0..b {
                let base = (bi * c + ci) * plane;
                for k in base..base + plane {
                    let xh = (x[k] - mean) * is;
                    xhat[k] = xh;
                    out[k] = gm[ci] * xh + bt[ci];
                }
            }
        }
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let op = Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            train: mode == Mode::Train,
        };
        Ok(self.push(Tensor::from_parts(xs, out), op, rg))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let x = self.value(input).data();
        let out: Vec<f64> = match kind {
            Activation::Relu => x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            Activation::Sigmoid => x.iter().map(|&v| ops::sigmoid(v)).collect(),
        };
        let shape = self.shape(input).to_vec();
        let rg = self.rg(input);
        self.push(Tensor::from_parts(shape, out), Op::Act { input, kind }, rg)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    /// Batched squeeze: `[B,C,H,W]` to `[B,L]` keeping one axis.
    pub fn avg_pool_axes(&mut self, input: Var, keep: PoolAxis) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(dim_err!("avg_pool_axes expects [B,C,H,W], got {xs:?}"));
        }
        let dims = [xs[0], xs[1], xs[2], xs[3]];
        let out = ops::avg_pool_axes(self.value(input).data(), dims, keep);
        let kept = out.len() / xs[0];
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::from_parts(vec![xs[0], kept], out),
            Op::AvgPoolAxes { input, keep },
            rg,
        ))
    }

    /// `y[b,c,h,w] = x[b,c,h,w] · (1 + wc[b,c] + wf[b,h] + wt[b,w])` over the masks present.
    pub fn excite(&mut self, input: Var, masks: [Option<Var>; 3]) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(dim_err!("excite expects [B,C,H,W], got {xs:?}"));
        }
        let [b, c, h, w] = [xs[0], xs[1], xs[2], xs[3]];
        let want = [c, h, w];
        for (m, len) in masks.iter().zip(want) {
            if let Some(m) = m {
                if self.shape(*m) != [b, len] {
                    return Err(dim_err!("mask {:?} does not match input {xs:?}", self.shape(*m)));
                }
            }
        }
        let factors = self.excite_factors(&xs, &masks);
        let x = self.value(input).data();
        let out: Vec<f64> = x.iter().zip(&factors).map(|(v, f)| v * f).collect();
        let rg = self.rg(input) || masks.iter().flatten().any(|m| self.rg(*m));
        Ok(self.push(Tensor::from_parts(xs, out), Op::Excite { input, masks }, rg))
    }

    fn excite_factors(&self, xs: &[usize], masks: &[Option<Var>; 3]) -> Vec<f64> {
        let [b, c, h, w] = [xs[0], xs[1], xs[2], xs[3]];
        let wc = masks[0].map(|m| self.value(m).data());
        let wf = masks[1].map(|m| self.value(m).data());
        let wt = masks[2].map(|m| self.value(m).data());
        let mut f = Vec::with_capacity(b * c * h * w);
        for bi in 0..b {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        let mut s = 1.0;
                        if let Some(m) = wc {
                            s += m[bi * c + ci];
                        }
                        if let Some(m) = wf {
                            s += m[bi * h + hi];
                        }
                        if let Some(m) = wt {
                            s += m[bi * w + wi];
                        }
                        f.push(s);
                    }
                }
            }
        }
        f
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(s, out), Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(s, out), Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let out = self.value(input).data().iter().map(|v| v * factor).collect();
        let s = self.shape(input).to_vec();
        let rg = self.rg(input);
        self.push(Tensor::from_parts(s, out), Op::Scale { input, factor }, rg)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum::<f64>();
        let rg = self.rg(input);
        self.push(Tensor::scalar(s), Op::Sum { input }, rg)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(input).len() {
            return Err(dim_err!("cannot reshape {:?} into {shape:?}", self.shape(input)));
        }
        let data = self.value(input).data().to_vec();
        let rg = self.rg(input);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Reshape { input }, rg))
    }

    /// Flattens everything after the batch axis.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let rest: usize = s[1..].iter().product();
        self.reshape(input, &[s[0], rest])
    }

    /// Concatenation of `[B,Di]` tensors along the feature axis.
    pub fn concat_cols(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(arg_err!("concat of zero tensors"));
        }
        let rows = self.shape(inputs[0])[0];
        let mut parts = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != 2 || s[0] != rows {
                return Err(dim_err!("concat operand {s:?} is not [{rows}, D]"));
            }
            parts.push((v, s[1]));
        }
        let total: usize = parts.iter().map(|p| p.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(v, d) in &parts {
                out.extend_from_slice(&self.value(v).data()[r * d..][..d]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::from_parts(vec![rows, total], out),
            Op::ConcatCols { inputs: parts },
            rg,
        ))
    }

    /// Scales each row of a `[B,D]` tensor to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 {
            return Err(dim_err!("l2_normalize_rows expects [B,D], got {s:?}"));
        }
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(x.len());
        let mut norms = Vec::with_capacity(s[0]);
        for (r, row) in x.chunks(s[1]).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::Numeric(format!("row {r} has norm {n}; cannot normalize")));
            }
            out.extend(row.iter().map(|v| v / n));
            norms.push(n);
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::from_parts(s, out), Op::L2NormalizeRows { input, norms }, rg))
    }

    /// Mean cross-entropy of soft `targets` (`[B, n_classes]`) against class
    /// probabilities obtained by summing a softmax over `n_sub` sub-cluster
    /// logits per class (`logits: [B, n_classes·n_sub]`, class-major).
    pub fn subcluster_xent(&mut self, logits: Var, targets: &Tensor, n_sub: usize) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        let ts = targets.shape();
        if ls.len() != 2 || ts.len() != 2 || ls[0] != ts[0] || n_sub == 0 || ls[1] != ts[1] * n_sub {
            return Err(dim_err!(
                "logits {ls:?} and targets {ts:?} with {n_sub} sub-clusters are incompatible"
            ));
        }
        let (b, k) = (ls[0], ls[1]);
        let n_cls = ts[1];
        let l = self.value(logits).data();
        let t = targets.data();
        let mut total = 0.0;
        for r in 0..b {
            let row = &l[r * k..][..k];
            let all = ops::log_sum_exp(row);
            let mut s = 0.0;
            for c in 0..n_cls {
                let y = t[r * n_cls + c];
                if y != 0.0 {
                    s -= y * (ops::log_sum_exp(&row[c * n_sub..][..n_sub]) - all);
                }
            }
            total += s;
        }
        let loss = total / b as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SubclusterXent {
                logits,
                targets: t.to_vec(),
                n_sub,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Parameter gradients are added into `store`; gradients of leaves created
    /// with [`Graph::leaf`] are returned.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<LeafGrads> {
        if self.value(loss).len() != 1 {
            return Err(arg_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        if !self.rg(loss) {
            return Err(Error::State(
                "loss does not depend on any tensor requiring gradients".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = LeafGrads::default();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads, store, &mut leaves)?;
        }
        Ok(leaves)
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        store: &mut ParamStore,
        leaves: &mut LeafGrads,
    ) -> Result<()> {
        let node = &self.nodes[idx];
        let mut send = |v: Var, delta: &[f64]| {
            if self.rg(v) {
                add_into(&mut grads[v.0], delta);
            }
        };
        match &node.op {
            Op::Leaf => leaves.grads.push((Var(idx), g.to_vec())),
            Op::Param(id) => store.tensor_mut(*id).accumulate_grad(g)?,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (gx, gk, gb) = ops::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                    self.rg(*input),
                );
                if let Some(gx) = gx {
                    send(*input, &gx);
                }
                send(*kernel, &gk);
                send(*bias, &gb);
            }
            Op::MaxPool2d { input, argmax } => {
                let mut gx = vec![0.0; self.value(*input).len()];
                for (&a, &gv) in argmax.iter().zip(g) {
                    gx[a] += gv;
                }
                send(*input, &gx);
            }
            Op::Affine { input, weight, bias } => {
                let xs = self.shape(*input);
                let (rows, inner) = (xs[0], xs[1]);
                let cols = self.shape(*weight)[1];
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                if self.rg(*input) {
                    let mut gx = vec![0.0; rows * inner];
                    for r in 0..rows {
                        let grow = &g[r * cols..][..cols];
                        for d in 0..inner {
                            let wrow = &w[d * cols..][..cols];
                            gx[r * inner + d] = grow.iter().zip(wrow).map(|(a, b)| a * b).sum();
                        }
                    }
                    send(*input, &gx);
                }
                let mut gw = vec![0.0; inner * cols];
                let mut gb = vec![0.0; cols];
                for r in 0..rows {
                    let grow = &g[r * cols..][..cols];
                    for d in 0..inner {
                        let xv = x[r * inner + d];
                        for (o, gv) in gw[d * cols..][..cols].iter_mut().zip(grow) {
                            *o += xv * gv;
                        }
                    }
                    for (o, gv) in gb.iter_mut().zip(grow) {
                        *o += gv;
                    }
                }
                send(*weight, &gw);
                send(*bias, &gb);
            }
            Op::MatmulNt { a, b } => {
                let (n, d) = (self.shape(*a)[0], self.shape(*a)[1]);
                let k = self.shape(*b)[0];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let mut ga = vec![0.0; n * d];
                let mut gb = vec![0.0; k * d];
                for i in 0..n {
                    for kk in 0..k {
                        let gv = g[i * k + kk];
                        for j in 0..d {
                            ga[i * d + j] += gv * bv[kk * d + j];
                            gb[kk * d + j] += gv * av[i * d + j];
                        }
                    }
                }
                send(*a, &ga);
                send(*b, &gb);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let xs = self.shape(*input);
                let [b, c, h, w] = [xs[0], xs[1], xs[2], xs[3]];
                let plane = h * w;
                let n = (b * plane) as f64;
                let gm = self.value(*gamma).data();
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for ci in 0..c {
                    for bi in 0..b {
                        let base = (bi * c + ci) * plane;
                        for k in base..base + plane {
                            ggamma[ci] += g[k] * xhat[k];
                            gbeta[ci] += g[k];
                        }
                    }
                }
                if self.rg(*input) {
                    let mut gx = vec![0.0; g.len()];
                    for ci in 0..c {
                        let scale = gm[ci] * inv_std[ci];
                        for bi in 0..b {
                            let base = (bi * c + ci) * plane;
                            for k in base..base + plane {
                                gx[k] = if *train {
                                    scale * (g[k] - gbeta[ci] / n - xhat[k] * ggamma[ci] / n)
                                } else {
                                    scale * g[k]
                                };
                            }
                        }
                    }
                    send(*input, &gx);
                }
                send(*gamma, &ggamma);
                send(*beta, &gbeta);
            }
            Op::Act { input, kind } => {
                let y = node.value.data();
                let gx: Vec<f64> = match kind {
                    Activation::Relu => g
                        .iter()
                        .zip(y)
                        .map(|(gv, yv)| if *yv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                    Activation::Sigmoid => g.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect(),
                };
                send(*input, &gx);
            }
            Op::AvgPoolAxes { input, keep } => {
                let xs = self.shape(*input);
                let [b, c, h, w] = [xs[0], xs[1], xs[2], xs[3]];
                let kept = match keep {
                    PoolAxis::Channel => c,
                    PoolAxis::Frequency => h,
                    PoolAxis::Time => w,
                };
                let count = (c * h * w / kept) as f64;
                let mut gx = vec![0.0; b * c * h * w];
                for bi in 0..b {
                    for ci in 0..c {
                        for hi in 0..h {
                            for wi in 0..w {
                                let k = match keep {
                                    PoolAxis::Channel => ci,
                                    PoolAxis::Frequency => hi,
                                    PoolAxis::Time => wi,
                                };
                                gx[((bi * c + ci) * h + hi) * w + wi] = g[bi * kept + k] / count;
                            }
                        }
                    }
                }
                send(*input, &gx);
            }
            Op::Excite { input, masks } => {
                let xs = self.shape(*input).to_vec();
                let [b, c, h, w] = [xs[0], xs[1], xs[2], xs[3]];
                let x = self.value(*input).data();
                if self.rg(*input) {
                    let f = self.excite_factors(&xs, masks);
                    let gx: Vec<f64> = g.iter().zip(&f).map(|(a, b)| a * b).collect();
                    send(*input, &gx);
                }
                let mut gm = [vec![0.0; b * c], vec![0.0; b * h], vec![0.0; b * w]];
                for bi in 0..b {
                    for ci in 0..c {
                        for hi in 0..h {
                            for wi in 0..w {
                                let k = ((bi * c + ci) * h + hi) * w + wi;
                                let gx = g[k] * x[k];
                                gm[0][bi * c + ci] += gx;
                                gm[1][bi * h + hi] += gx;
                                gm[2][bi * w + wi] += gx;
                            }
                        }
                    }
                }
                for (m, gmv) in masks.iter().zip(&gm) {
                    if let Some(m) = m {
                        send(*m, gmv);
                    }
                }
            }
            Op::Add { a, b } => {
                send(*a, g);
                send(*b, g);
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let ga: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                let gb: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                send(*a, &ga);
                send(*b, &gb);
            }
            Op::Scale { input, factor } => {
                let gx: Vec<f64> = g.iter().map(|v| v * factor).collect();
                send(*input, &gx);
            }
            Op::Sum { input } => {
                let gx = vec![g[0]; self.value(*input).len()];
                send(*input, &gx);
            }
            Op::Reshape { input } => send(*input, g),
            Op::ConcatCols { inputs } => {
                let rows = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut off = 0;
                for &(v, d) in inputs {
                    let mut gv = Vec::with_capacity(rows * d);
                    for r in 0..rows {
                        gv.extend_from_slice(&g[r * total + off..][..d]);
                    }
                    send(v, &gv);
                    off += d;
                }
            }
            Op::L2NormalizeRows { input, norms } => {
                let d = node.value.shape()[1];
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for (r, n) in norms.iter().enumerate() {
                    let yr = &y[r * d..][..d];
                    let gr = &g[r * d..][..d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                send(*input, &gx);
            }
            Op::SubclusterXent { logits, targets, n_sub } => {
                let n_sub = *n_sub;
                let ls = self.shape(*logits);
                let (b, k) = (ls[0], ls[1]);
                let n_cls = k / n_sub;
                let l = self.value(*logits).data();
                let mut gl = vec![0.0; b * k];
                let scale = g[0] / b as f64;
                for r in 0..b {
                    let row = &l[r * k..][..k];
                    let all = ops::log_sum_exp(row);
                    let ysum: f64 = targets[r * n_cls..][..n_cls].iter().sum();
                    for c in 0..n_cls {
                        let y = targets[r * n_cls + c];
                        let block = &row[c * n_sub..][..n_sub];
                        let lse_c = ops::log_sum_exp(block);
                        for s in 0..n_sub {
                            let kk = c * n_sub + s;
                            let p = (row[kk] - all).exp();
                            let q = if y != 0.0 { (row[kk] - lse_c).exp() } else { 0.0 };
                            gl[r * k + kk] = scale * (ysum * p - y * q);
                        }
                    }
                }
                send(*logits, &gl);
            }
        }
        Ok(())
    }
}
