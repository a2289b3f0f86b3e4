//! Excitation network with channel, frequency and time masks.
//!
//! For a feature map `x ∈ R^{C×H×W}` each enabled family `i` produces a mask
//! `w_i = sigmoid(a_i · W_iᵀ + b_i)` from the axis-mean `a_i`, and the block
//! output is `y = x · (1 + w_c + w_f + w_t)` with every mask broadcast along
//! its two complementary axes.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::{Graph, Mode, Var};
use crate::error::{arg_err, dim_err, Error, Result};
use crate::nn::{BatchNorm, Conv2d, ResBlock, Session};
use crate::ops::{self, PoolAxis};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Which mask families a modified SE block computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MaskSet {
    pub channel: bool,
    pub frequency: bool,
    pub time: bool,
}

impl MaskSet {
    pub const ALL: MaskSet = MaskSet {
        channel: true,
        frequency: true,
        time: true,
    };
    pub const CHANNEL: MaskSet = MaskSet {
        channel: true,
        frequency: false,
        time: false,
    };
    pub const NONE: MaskSet = MaskSet {
        channel: false,
        frequency: false,
        time: false,
    };

    pub fn is_empty(&self) -> bool {
        !(self.channel || self.frequency || self.time)
    }

    pub fn contains(&self, axis: PoolAxis) -> bool {
        match axis {
            PoolAxis::Channel => self.channel,
            PoolAxis::Frequency => self.frequency,
            PoolAxis::Time => self.time,
        }
    }
}

impl fmt::Display for MaskSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("none");
        }
        let parts: Vec<&str> = [(self.channel, "c"), (self.frequency, "f"), (self.time, "t")]
            .into_iter()
            .filter_map(|(on, s)| on.then_some(s))
            .collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for MaskSet {
    type Err = Error;

    /// Accepts `none` or a comma-separated subset of `c`, `f`, `t`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let mut m = MaskSet::NONE;
        if s == "none" || s.is_empty() {
            return Ok(m);
        }
        for part in s.split(',') {
            match part.trim() {
                "c" => m.channel = true,
                "f" => m.frequency = true,
                "t" => m.time = true,
                other => return Err(Error::Config(format!("unknown mask family `{other}` (use c, f, t)"))),
            }
        }
        Ok(m)
    }
}

/// Learned map of one mask family: `weight: [L, L]` (stored transposed, so
/// `a · weight` equals `a · Wᵀ`) and `bias: [L]`.
#[derive(Debug, Clone)]
struct MaskMap {
    weight: ParamId,
    bias: ParamId,
}

/// One modified squeeze-and-excitation block, sized for a fixed `(C, H, W)`.
#[derive(Debug, Clone)]
pub struct ModifiedSe {
    maps: [Option<MaskMap>; 3],
    dims: [usize; 3],
}

/// Intermediate values of one excitation block for inspection.
#[derive(Debug, Clone, Copy)]
pub struct SeTap {
    pub input: Var,
    pub output: Var,
    pub masks: [Option<Var>; 3],
}

impl ModifiedSe {
    /// Mask weights start at the identity and biases at zero, so an untrained
    /// block gates every position by the sigmoid of its own axis mean.
    pub fn new(store: &mut ParamStore, name: &str, dims: [usize; 3], masks: MaskSet) -> Result<Self> {
        let mut maps: [Option<MaskMap>; 3] = [None, None, None];
        for (k, axis) in PoolAxis::ALL.iter().enumerate() {
            if !masks.contains(*axis) {
                continue;
            }
            let l = dims[k];
            let tag = ["c", "f", "t"][k];
            let mut eye = vec![0.0; l * l];
            (0..l).for_each(|i| eye[i * l + i] = 1.0);
            maps[k] = Some(MaskMap {
                weight: store.add(&format!("{name}.w{tag}"), Tensor::new(&[l, l], eye)?)?,
                bias: store.add(&format!("{name}.b{tag}"), Tensor::zeros(&[l]))?,
            });
        }
        Ok(Self { maps, dims })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Batched masks for `x: [B, C, H, W]`, each `[B, L]`.
    pub fn masks(&self, s: &mut Session, x: Var) -> Result<[Option<Var>; 3]> {
        let xs = s.graph.shape(x);
        if xs.len() != 4 || xs[1..] != self.dims {
            return Err(dim_err!("excitation block sized for {:?} got input {xs:?}", self.dims));
        }
        let mut out = [None, None, None];
        for (k, axis) in PoolAxis::ALL.iter().enumerate() {
            if let Some(map) = &self.maps[k] {
                let a = s.graph.avg_pool_axes(x, *axis)?;
                let w = s.param(map.weight);
                let b = s.param(map.bias);
                let z = s.graph.affine(a, w, b)?;
                out[k] = Some(s.graph.sigmoid(z));
            }
        }
        Ok(out)
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<SeTap> {
        let masks = self.masks(s, x)?;
        let output = s.graph.excite(x, masks)?;
        Ok(SeTap {
            input: x,
            output,
            masks,
        })
    }

    /// Current parameter values.
    pub fn params(&self, store: &ParamStore) -> ExcitationParams {
        let get = |m: &Option<MaskMap>| {
            m.as_ref()
                .map(|m| (store.tensor(m.weight).clone(), store.tensor(m.bias).clone()))
        };
        ExcitationParams {
            channel: get(&self.maps[0]),
            frequency: get(&self.maps[1]),
            time: get(&self.maps[2]),
        }
    }
}

/// Per-family `(W, b)` with `W: [L, L]` applied as `a · W` and `b: [L]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationParams {
    pub channel: Option<(Tensor, Tensor)>,
    pub frequency: Option<(Tensor, Tensor)>,
    pub time: Option<(Tensor, Tensor)>,
}

impl ExcitationParams {
    /// All three families with the same constant weight and bias.
    pub fn constant(dims: [usize; 3], weight: f64, bias: f64) -> Self {
        let fam = |l: usize| Some((Tensor::full(&[l, l], weight), Tensor::full(&[l], bias)));
        Self {
            channel: fam(dims[0]),
            frequency: fam(dims[1]),
            time: fam(dims[2]),
        }
    }

    fn families(&self) -> [&Option<(Tensor, Tensor)>; 3] {
        [&self.channel, &self.frequency, &self.time]
    }
}

/// Masks of one `[C, H, W]` sample; absent families are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationMasks {
    pub channel: Option<Tensor>,
    pub frequency: Option<Tensor>,
    pub time: Option<Tensor>,
}

impl ExcitationMasks {
    fn as_array(&self) -> [&Option<Tensor>; 3] {
        [&self.channel, &self.frequency, &self.time]
    }
}

fn sample_as_batch(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(dim_err!("expected a [C, H, W] sample, got {:?}", x.shape()));
    }
    let s = x.shape();
    x.clone().reshape(&[1, s[0], s[1], s[2]])
}

/// Axis mean of one `[C, H, W]` sample keeping `keep`.
pub fn avg_pool_axes(x: &Tensor, keep: PoolAxis) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(dim_err!("avg_pool_axes needs rank 3, got {:?}", x.shape()));
    }
    let s = x.shape();
    let v = ops::avg_pool_axes(x.data(), [1, s[0], s[1], s[2]], keep);
    Ok(Tensor::vector(v))
}

/// `w_i = sigmoid(S_i(x) · W_i + b_i)` for each family present in `params`.
pub fn excitation_masks(x: &Tensor, params: &ExcitationParams) -> Result<ExcitationMasks> {
    let xb = sample_as_batch(x)?;
    let dims = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let mut g = Graph::new();
    let xv = g.input(xb);
    let mut out: [Option<Tensor>; 3] = [None, None, None];
    for (k, fam) in params.families().into_iter().enumerate() {
        let Some((w, b)) = fam else { continue };
        if w.shape() != [dims[k], dims[k]] || b.shape() != [dims[k]] {
            return Err(dim_err!(
                "mask parameters {:?}/{:?} do not fit axis length {}",
                w.shape(),
                b.shape(),
                dims[k]
            ));
        }
        let a = g.avg_pool_axes(xv, PoolAxis::ALL[k])?;
        let wv = g.input(w.clone());
        let bv = g.input(b.clone());
        let z = g.affine(a, wv, bv)?;
        let m = g.sigmoid(z);
        out[k] = Some(Tensor::vector(g.value(m).data().to_vec()));
    }
    let [channel, frequency, time] = out;
    Ok(ExcitationMasks {
        channel,
        frequency,
        time,
    })
}

/// `y = x · (1 + w_c + w_f + w_t)` for one `[C, H, W]` sample.
pub fn excited_aggregate(x: &Tensor, masks: &ExcitationMasks) -> Result<Tensor> {
    let xb = sample_as_batch(x)?;
    let mut g = Graph::new();
    let xv = g.input(xb);
    let mut mv = [None, None, None];
    for (k, m) in masks.as_array().into_iter().enumerate() {
        if let Some(m) = m {
            let len = m.len();
            mv[k] = Some(g.input(m.clone().reshape(&[1, len])?));
        }
    }
    let y = g.excite(xv, mv)?;
    g.value(y).clone().reshape(x.shape())
}

/// Channel widths of the excitation network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExcitationWidths {
    pub stem: usize,
    pub pair: usize,
    pub stages: Vec<usize>,
}

impl ExcitationWidths {
    /// 16-channel stem and pair, then stages of (32, 64, 128, 256).
    pub fn full() -> Self {
        Self {
            stem: 16,
            pair: 16,
            stages: vec![32, 64, 128, 256],
        }
    }

    pub fn out_dim(&self) -> usize {
        *self.stages.last().unwrap_or(&self.pair)
    }
}

/// SE → conv 7×7/2 → pool 3×3/2 → SE → [res → SE → res] → 4 × [res/2 → SE → res] → global max.
#[derive(Debug, Clone)]
pub struct ExcitationNetwork {
    se: Vec<Option<ModifiedSe>>,
    stem: Conv2d,
    stem_bn: BatchNorm,
    pair: [ResBlock; 2],
    stages: Vec<(ResBlock, ResBlock)>,
    input: [usize; 3],
    out_dim: usize,
    masks: MaskSet,
}

/// `(C, H, W)` seen by each excitation block, in order.
pub fn se_placements(input: [usize; 3], widths: &ExcitationWidths) -> Result<Vec<[usize; 3]>> {
    let bad = || dim_err!("input {input:?} too small for the excitation network");
    let ext = |n, k, s, p| ops::out_extent(n, k, s, p).ok_or_else(bad);
    let mut out = vec![input];
    let h = ext(ext(input[1], 7, 2, 3)?, 3, 2, 0)?;
    let w = ext(ext(input[2], 7, 2, 3)?, 3, 2, 0)?;
    out.push([widths.stem, h, w]);
    out.push([widths.pair, h, w]);
    let (mut h, mut w) = (h, w);
    for &c in &widths.stages {
        h = ext(h, 3, 2, 1)?;
        w = ext(w, 3, 2, 1)?;
        out.push([c, h, w]);
    }
    Ok(out)
}

impl ExcitationNetwork {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: [usize; 3],
        widths: &ExcitationWidths,
        masks: MaskSet,
    ) -> Result<Self> {
        let places = se_placements(input, widths)?;
        let mut se = Vec::with_capacity(places.len());
        for (i, dims) in places.iter().enumerate() {
            se.push(if masks.is_empty() {
                None
            } else {
                Some(ModifiedSe::new(store, &format!("{name}.se{i}"), *dims, masks)?)
            });
        }
        let stem = Conv2d::new(
            store,
            rng,
            &format!("{name}.stem"),
            input[0],
            widths.stem,
            (7, 7),
            (2, 2),
            (3, 3),
        )?;
        let stem_bn = BatchNorm::new(store, &format!("{name}.stem_bn"), widths.stem)?;
        let pair = [
            ResBlock::new(store, rng, &format!("{name}.pair0"), widths.stem, widths.pair, 1)?,
            ResBlock::new(store, rng, &format!("{name}.pair1"), widths.pair, widths.pair, 1)?,
        ];
        let mut stages = Vec::new();
        let mut ch = widths.pair;
        for (i, &c) in widths.stages.iter().enumerate() {
            let down = ResBlock::new(store, rng, &format!("{name}.stage{i}.down"), ch, c, 2)?;
            let keep = ResBlock::new(store, rng, &format!("{name}.stage{i}.keep"), c, c, 1)?;
            stages.push((down, keep));
            ch = c;
        }
        Ok(Self {
            se,
            stem,
            stem_bn,
            pair,
            stages,
            input,
            out_dim: widths.out_dim(),
            masks,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn input_dims(&self) -> [usize; 3] {
        self.input
    }

    pub fn mask_set(&self) -> MaskSet {
        self.masks
    }

    /// Number of excitation blocks (stages addressable by feature-map dumps).
    pub fn n_stages(&self) -> usize {
        self.se.len()
    }

    pub fn block(&self, stage: usize) -> Option<&ModifiedSe> {
        self.se.get(stage).and_then(|s| s.as_ref())
    }

    fn excite(&self, s: &mut Session, i: usize, x: Var, taps: &mut Vec<SeTap>) -> Result<Var> {
        match &self.se[i] {
            Some(se) => {
                let tap = se.forward(s, x)?;
                taps.push(tap);
                Ok(tap.output)
            }
            None => {
                taps.push(SeTap {
                    input: x,
                    output: x,
                    masks: [None, None, None],
                });
                Ok(x)
            }
        }
    }

    /// `x: [B, C0, H, W]` → `(z_s: [B, out_dim], taps)`.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<(Var, Vec<SeTap>)> {
        let xs = s.graph.shape(x);
        if xs.len() != 4 || xs[1..] != self.input {
            return Err(dim_err!("excitation network built for {:?}, got {xs:?}", self.input));
        }
        let mut taps = Vec::with_capacity(self.se.len());
        let h = self.excite(s, 0, x, &mut taps)?;
        let h = self.stem.forward(s, h)?;
        let h = self.stem_bn.forward(s, h)?;
        let h = s.graph.relu(h);
        let h = s.graph.maxpool2d(h, (3, 3), (2, 2))?;
        let h = self.excite(s, 1, h, &mut taps)?;
        let h = self.pair[0].forward(s, h)?;
        let h = self.excite(s, 2, h, &mut taps)?;
        let mut h = self.pair[1].forward(s, h)?;
        for (i, (down, keep)) in self.stages.iter().enumerate() {
            h = down.forward(s, h)?;
            h = self.excite(s, 3 + i, h, &mut taps)?;
            h = keep.forward(s, h)?;
        }
        let z = s.graph.global_maxpool(h)?;
        Ok((z, taps))
    }

    /// Shapes of every block output, for tracing. Runs a zero input in eval mode.
    pub fn shape_trace(&self, store: &mut ParamStore) -> Result<Vec<Vec<usize>>> {
        let mut s = Session::new(store, Mode::Eval);
        let [c, h, w] = self.input;
        let x = s.graph.input(Tensor::zeros(&[1, c, h, w]));
        let (z, taps) = self.forward(&mut s, x)?;
        let mut out: Vec<Vec<usize>> = taps.iter().map(|t| s.graph.shape(t.output).to_vec()).collect();
        out.push(s.graph.shape(z).to_vec());
        Ok(out)
    }
}

/// Validates a stage index against the network.
pub fn check_stage(net: &ExcitationNetwork, stage: usize) -> Result<()> {
    if stage >= net.n_stages() {
        return Err(arg_err!(
            "stage {stage} out of range; the network has {} excitation blocks",
            net.n_stages()
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_params_give_half_masks() {
        let x = Tensor::new(&[2, 3, 4], (0..24).map(|v| v as f64 - 7.0).collect()).unwrap();
        let m = excitation_masks(&x, &ExcitationParams::constant([2, 3, 4], 0.0, 0.0)).unwrap();
        for t in [&m.channel, &m.frequency, &m.time] {
            assert!(t.as_ref().unwrap().data().iter().all(|&v| v == 0.5));
        }
        let y = excited_aggregate(&x, &m).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, 2.5 * b);
        }
    }

    #[test]
    fn mask_lengths_follow_axes() {
        let x = Tensor::ones(&[16, 32, 64]);
        let m = excitation_masks(&x, &ExcitationParams::constant([16, 32, 64], 0.01, 0.0)).unwrap();
        assert_eq!(m.channel.unwrap().len(), 16);
        assert_eq!(m.frequency.unwrap().len(), 32);
        assert_eq!(m.time.unwrap().len(), 64);
    }

    #[test]
    fn mismatched_params_are_rejected() {
        let x = Tensor::ones(&[2, 3, 4]);
        assert!(excitation_masks(&x, &ExcitationParams::constant([2, 3, 5], 0.0, 0.0)).is_err());
        assert!(excitation_masks(&Tensor::ones(&[2, 3]), &ExcitationParams::constant([2, 3, 4], 0.0, 0.0)).is_err());
    }

    #[test]
    fn mask_set_parsing() {
        assert_eq!("c,f,t".parse::<MaskSet>().unwrap(), MaskSet::ALL);
        assert_eq!("c".parse::<MaskSet>().unwrap(), MaskSet::CHANNEL);
        assert_eq!("none".parse::<MaskSet>().unwrap(), MaskSet::NONE);
        assert!("c,x".parse::<MaskSet>().is_err());
        assert_eq!(MaskSet::ALL.to_string(), "c,f,t");
    }
}
