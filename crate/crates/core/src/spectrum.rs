//! Utterance-spectrum pathway: three 1-D convolutions and five dense layers.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{arg_err, dim_err, Result};
use crate::nn::{BatchNorm, Conv2d, Linear, Session};
use crate::ops;
use crate::tensor::{ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpectrumNetConfig {
    pub conv_channels: Vec<usize>,
    pub conv_kernels: Vec<usize>,
    pub conv_strides: Vec<usize>,
    pub dense_widths: Vec<usize>,
}

impl SpectrumNetConfig {
    pub fn full() -> Self {
        Self {
            conv_channels: vec![32, 64, 128],
            conv_kernels: vec![11, 7, 5],
            conv_strides: vec![4, 4, 4],
            dense_widths: vec![512, 256, 256, 128, 128],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.len() != 3 || self.conv_kernels.len() != 3 || self.conv_strides.len() != 3 {
            return Err(arg_err!("spectrum net needs exactly 3 conv layers"));
        }
        if self.dense_widths.len() != 5 {
            return Err(arg_err!("spectrum net needs exactly 5 dense layers"));
        }
        let zero = |v: &[usize]| v.contains(&0);
        if zero(&self.conv_channels) || zero(&self.conv_kernels) || zero(&self.conv_strides) || zero(&self.dense_widths)
        {
            return Err(arg_err!("spectrum net sizes must be positive"));
        }
        Ok(())
    }

    pub fn out_dim(&self) -> usize {
        *self.dense_widths.last().expect("validated")
    }
}

#[derive(Debug, Clone)]
pub struct SpectrumNet {
    convs: Vec<(Conv2d, BatchNorm)>,
    dense: Vec<Linear>,
    input_len: usize,
    conv_lens: Vec<usize>,
}

impl SpectrumNet {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input_len: usize,
        cfg: &SpectrumNetConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut convs = Vec::new();
        let mut conv_lens = Vec::new();
        let mut ch = 1;
        let mut len = input_len;
        for i in 0..3 {
            let (c, k, st) = (cfg.conv_channels[i], cfg.conv_kernels[i], cfg.conv_strides[i]);
            let pad = k / 2;
            len = ops::out_extent(len, k, st, pad)
                .ok_or_else(|| dim_err!("spectrum of length {input_len} too short for conv layer {i}"))?;
            conv_lens.push(len);
            convs.push((
                Conv2d::new(store, rng, &format!("{name}.conv{i}"), ch, c, (1, k), (1, st), (0, pad))?,
                BatchNorm::new(store, &format!("{name}.conv{i}_bn"), c)?,
            ));
            ch = c;
        }
        let mut dense = Vec::new();
        let mut d = ch * len;
        for (i, &w) in cfg.dense_widths.iter().enumerate() {
            dense.push(Linear::new(store, rng, &format!("{name}.dense{i}"), d, w)?);
            d = w;
        }
        Ok(Self {
            convs,
            dense,
            input_len,
            conv_lens,
        })
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn out_dim(&self) -> usize {
        self.dense.last().expect("five layers").out_dim
    }

    /// Sequence length after each conv layer.
    pub fn conv_lens(&self) -> &[usize] {
        &self.conv_lens
    }

    /// Stacks `[L]` spectra into the `[B, 1, 1, L]` network input.
    pub fn batch_input(&self, spectra: &[&Tensor]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(spectra.len() * self.input_len);
        for s in spectra {
            if s.shape() != [self.input_len] {
                return Err(dim_err!(
                    "spectrum net expects length {}, got {:?}",
                    self.input_len,
                    s.shape()
                ));
            }
            data.extend_from_slice(s.data());
        }
        Tensor::new(&[spectra.len(), 1, 1, self.input_len], data)
    }

    /// `x: [B, 1, 1, L]` → `z_trum: [B, out_dim]`.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let xs = s.graph.shape(x);
        if xs.len() != 4 || xs[1..] != [1, 1, self.input_len] {
            return Err(dim_err!(
                "spectrum net expects [B, 1, 1, {}], got {xs:?}",
                self.input_len
            ));
        }
        let mut h = x;
        for (conv, bn) in &self.convs {
            h = conv.forward(s, h)?;
            h = bn.forward(s, h)?;
            h = s.graph.relu(h);
        }
        h = s.graph.flatten(h)?;
        let last = self.dense.len() - 1;
        for (i, layer) in self.dense.iter().enumerate() {
            h = layer.forward(s, h)?;
            if i != last {
                h = s.graph.relu(h);
            }
        }
        Ok(h)
    }
}
