//! Layer building blocks shared by the network branches.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, LeafGrads, Mode, Var};
use crate::error::Result;
use crate::ops;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// A graph under construction together with the parameters it reads.
pub struct Session<'a> {
    pub graph: Graph,
    pub store: &'a mut ParamStore,
    pub mode: Mode,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a mut ParamStore, mode: Mode) -> Self {
        Self {
            graph: Graph::new(),
            store,
            mode,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.graph.param(self.store, id)
    }

    pub fn backward(&mut self, loss: Var) -> Result<LeafGrads> {
        self.graph.backward(loss, self.store)
    }
}

pub(crate) fn he_normal<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// 2-D convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub kernel: (usize, usize),
    pub out_ch: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Self> {
        let w = he_normal(rng, &[out_ch, in_ch, kernel.0, kernel.1], in_ch * kernel.0 * kernel.1);
        let weight = store.add(&format!("{name}.weight"), w)?;
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[out_ch]))?;
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
            kernel,
            out_ch,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.graph.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn out_hw(&self, hw: (usize, usize)) -> Option<(usize, usize)> {
        Some((
            ops::out_extent(hw.0, self.kernel.0, self.stride.0, self.pad.0)?,
            ops::out_extent(hw.1, self.kernel.1, self.stride.1, self.pad.1)?,
        ))
    }
}

/// Per-channel batch normalization with running statistics stored as a buffer.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let gamma = store.add(&format!("{name}.gamma"), Tensor::ones(&[channels]))?;
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(&[channels]))?;
        let mut stats = vec![0.0; 2 * channels];
        stats[channels..].iter_mut().for_each(|v| *v = 1.0);
        let running = store.add_buffer(&format!("{name}.running"), Tensor::new(&[2, channels], stats)?)?;
        Ok(Self { gamma, beta, running })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        let mode = s.mode;
        let running = s.store.tensor_mut(self.running).data_mut();
        s.graph.batch_norm2d(x, g, b, running, mode)
    }
}

/// Fully connected layer, `y = x · W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = store.add(&format!("{name}.weight"), he_normal(rng, &[in_dim, out_dim], in_dim))?;
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[out_dim]))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.graph.affine(x, w, b)
    }
}

/// conv-bn-relu-conv-bn with an identity or projection shortcut, relu after the sum.
#[derive(Debug, Clone)]
pub struct ResBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    shortcut: Option<(Conv2d, BatchNorm)>,
}

impl ResBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    ) -> Result<Self> {
        let conv1 = Conv2d::new(
            store,
            rng,
            &format!("{name}.conv1"),
            in_ch,
            out_ch,
            (3, 3),
            (stride, stride),
            (1, 1),
        )?;
        let bn1 = BatchNorm::new(store, &format!("{name}.bn1"), out_ch)?;
        let conv2 = Conv2d::new(
            store,
            rng,
            &format!("{name}.conv2"),
            out_ch,
            out_ch,
            (3, 3),
            (1, 1),
            (1, 1),
        )?;
        let bn2 = BatchNorm::new(store, &format!("{name}.bn2"), out_ch)?;
        let shortcut = if stride != 1 || in_ch != out_ch {
            Some((
                Conv2d::new(
                    store,
                    rng,
                    &format!("{name}.proj"),
                    in_ch,
                    out_ch,
                    (1, 1),
                    (stride, stride),
                    (0, 0),
                )?,
                BatchNorm::new(store, &format!("{name}.proj_bn"), out_ch)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.conv1.forward(s, x)?;
        let h = self.bn1.forward(s, h)?;
        let h = s.graph.relu(h);
        let h = self.conv2.forward(s, h)?;
        let h = self.bn2.forward(s, h)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let p = conv.forward(s, x)?;
                bn.forward(s, p)?
            }
            None => x,
        };
        let sum = s.graph.add(h, skip)?;
        Ok(s.graph.relu(sum))
    }

    pub fn out_hw(&self, hw: (usize, usize)) -> Option<(usize, usize)> {
        self.conv2.out_hw(self.conv1.out_hw(hw)?)
    }

    pub fn out_ch(&self) -> usize {
        self.conv2.out_ch
    }
}
