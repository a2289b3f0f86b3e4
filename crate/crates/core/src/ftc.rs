//! Frequency-and-time chunkwise encoder.
//!
//! The spectrogram is cut into `N` overlapping bands along one axis, the bands
//! are stacked as channels, and a small convolutional stack encodes the stack
//! into one vector. Two such pathways run side by side, one per axis.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{arg_err, dim_err, Result};
use crate::nn::{BatchNorm, Conv2d, ResBlock, Session};
use crate::ops;
use crate::tensor::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkAxis {
    Frequency,
    Time,
}

/// How one spectrogram axis is split into overlapping chunks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChunkSpec {
    pub n_chunks: usize,
    pub overlap: f64,
    pub axis: ChunkAxis,
}

/// Chunk extent and hop resolved for a concrete axis length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkLayout {
    pub extent: usize,
    pub hop: usize,
    /// Axis length after trailing zero padding.
    pub padded: usize,
}

impl ChunkLayout {
    pub fn starts(&self, n: usize) -> impl Iterator<Item = usize> + '_ {
        (0..n).map(move |k| k * self.hop)
    }
}

impl ChunkSpec {
    pub fn new(n_chunks: usize, overlap: f64, axis: ChunkAxis) -> Result<Self> {
        if n_chunks == 0 {
            return Err(arg_err!("chunk count must be at least 1"));
        }
        if !(0.0..1.0).contains(&overlap) {
            return Err(arg_err!("chunk overlap {overlap} outside [0, 1)"));
        }
        Ok(Self {
            n_chunks,
            overlap,
            axis,
        })
    }

    /// `extent = ceil(len / (N(1-ρ) + ρ))`, `hop = max(1, floor(extent(1-ρ)))`.
    ///
    /// When flooring the hop would leave the tail of the axis uncovered the
    /// extent grows until the last chunk reaches the end.
    pub fn layout(&self, len: usize) -> Result<ChunkLayout> {
        let n = self.n_chunks;
        if len < n {
            return Err(arg_err!("axis of length {len} cannot hold {n} chunks"));
        }
        let rho = self.overlap;
        let denom = n as f64 * (1.0 - rho) + rho;
        let mut extent = ((len as f64 / denom) - 1e-9).ceil().max(1.0) as usize;
        let hop = (((extent as f64) * (1.0 - rho)) + 1e-9).floor().max(1.0) as usize;
        let reach = (n - 1) * hop + extent;
        if reach < len {
            extent += len - reach;
        }
        Ok(ChunkLayout {
            extent,
            hop,
            padded: (n - 1) * hop + extent,
        })
    }
}

/// Stacks the chunks of a `[F, T]` spectrogram as channels:
/// `[N, extent, T]` for the frequency axis, `[N, F, extent]` for time.
pub fn chunk_axis(spectrogram: &Tensor, spec: &ChunkSpec) -> Result<Tensor> {
    if spectrogram.rank() != 2 {
        return Err(dim_err!("spectrogram must be [F, T], got {:?}", spectrogram.shape()));
    }
    let (f, t) = (spectrogram.shape()[0], spectrogram.shape()[1]);
    let x = spectrogram.data();
    let n = spec.n_chunks;
    match spec.axis {
        ChunkAxis::Frequency => {
            let lay = spec.layout(f)?;
            let c = lay.extent;
            let mut out = vec![0.0; n * c * t];
            for (k, start) in lay.starts(n).enumerate() {
                for r in 0..c {
                    let src = start + r;
                    if src < f {
                        out[(k * c + r) * t..][..t].copy_from_slice(&x[src * t..][..t]);
                    }
                }
            }
            Tensor::new(&[n, c, t], out)
        }
        ChunkAxis::Time => {
            let lay = spec.layout(t)?;
            let c = lay.extent;
            let mut out = vec![0.0; n * f * c];
            for (k, start) in lay.starts(n).enumerate() {
                for r in 0..f {
                    let avail = t.saturating_sub(start).min(c);
                    out[(k * f + r) * c..][..avail].copy_from_slice(&x[r * t + start..][..avail]);
                }
            }
            Tensor::new(&[n, f, c], out)
        }
    }
}

/// Shape of the chunk stack produced for an `[F, T]` spectrogram.
pub fn stack_shape(spec: &ChunkSpec, f: usize, t: usize) -> Result<[usize; 3]> {
    Ok(match spec.axis {
        ChunkAxis::Frequency => [spec.n_chunks, spec.layout(f)?.extent, t],
        ChunkAxis::Time => [spec.n_chunks, f, spec.layout(t)?.extent],
    })
}

/// Channel widths of the chunk-stack encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderWidths {
    pub stem: usize,
    pub blocks: Vec<usize>,
}

impl EncoderWidths {
    /// 32-channel 7×7 stem followed by blocks of (64, 128, 128, 128).
    pub fn full() -> Self {
        Self {
            stem: 32,
            blocks: vec![64, 128, 128, 128],
        }
    }

    pub fn out_dim(&self) -> usize {
        *self.blocks.last().unwrap_or(&self.stem)
    }
}

/// Conv 7×7/2 → max-pool 3×3/2 → stride-2 residual blocks → global max-pool.
#[derive(Debug, Clone)]
pub struct ChunkEncoder {
    stem: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<ResBlock>,
    in_ch: usize,
    out_dim: usize,
}

impl ChunkEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        widths: &EncoderWidths,
    ) -> Result<Self> {
        let stem = Conv2d::new(
            store,
            rng,
            &format!("{name}.stem"),
            in_ch,
            widths.stem,
            (7, 7),
            (2, 2),
            (3, 3),
        )?;
        let stem_bn = BatchNorm::new(store, &format!("{name}.stem_bn"), widths.stem)?;
        let mut blocks = Vec::new();
        let mut ch = widths.stem;
        for (i, &w) in widths.blocks.iter().enumerate() {
            blocks.push(ResBlock::new(store, rng, &format!("{name}.block{i}"), ch, w, 2)?);
            ch = w;
        }
        Ok(Self {
            stem,
            stem_bn,
            blocks,
            in_ch,
            out_dim: widths.out_dim(),
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    /// Spatial extent after the stem, the pool, and each block.
    pub fn shape_trace(&self, hw: (usize, usize)) -> Result<Vec<(usize, usize)>> {
        let bad = || dim_err!("input {hw:?} too small for the chunk encoder");
        let mut trace = Vec::new();
        let s = self.stem.out_hw(hw).ok_or_else(bad)?;
        trace.push(s);
        let p = (
            ops::out_extent(s.0, 3, 2, 0).ok_or_else(bad)?,
            ops::out_extent(s.1, 3, 2, 0).ok_or_else(bad)?,
        );
        trace.push(p);
        let mut cur = p;
        for b in &self.blocks {
            cur = b.out_hw(cur).ok_or_else(bad)?;
            trace.push(cur);
        }
        Ok(trace)
    }

    /// `x: [B, N, h, w]` → `[B, out_dim]`.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let c = s.graph.shape(x)[1];
        if c != self.in_ch {
            return Err(dim_err!("chunk encoder expects {} input channels, got {c}", self.in_ch));
        }
        let h = self.stem.forward(s, x)?;
        let h = self.stem_bn.forward(s, h)?;
        let h = s.graph.relu(h);
        let mut h = s.graph.maxpool2d(h, (3, 3), (2, 2))?;
        for b in &self.blocks {
            h = b.forward(s, h)?;
        }
        s.graph.global_maxpool(h)
    }
}

/// The two chunk pathways with independent parameters.
#[derive(Debug, Clone)]
pub struct FtcEncoder {
    pub freq_spec: ChunkSpec,
    pub time_spec: ChunkSpec,
    pub freq: ChunkEncoder,
    pub time: ChunkEncoder,
}

impl FtcEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        freq_spec: ChunkSpec,
        time_spec: ChunkSpec,
        widths: &EncoderWidths,
    ) -> Result<Self> {
        if freq_spec.axis != ChunkAxis::Frequency || time_spec.axis != ChunkAxis::Time {
            return Err(arg_err!("chunk specs must be (frequency, time)"));
        }
        let freq = ChunkEncoder::new(store, rng, &format!("{name}.freq"), freq_spec.n_chunks, widths)?;
        let time = ChunkEncoder::new(store, rng, &format!("{name}.time"), time_spec.n_chunks, widths)?;
        Ok(Self {
            freq_spec,
            time_spec,
            freq,
            time,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.freq.out_dim() + self.time.out_dim()
    }

    /// Builds the batched chunk stacks for a set of `[F, T]` spectrograms.
    pub fn stacks(&self, spectrograms: &[&Tensor]) -> Result<(Tensor, Tensor)> {
        Ok((
            batch_stacks(spectrograms, &self.freq_spec)?,
            batch_stacks(spectrograms, &self.time_spec)?,
        ))
    }

    /// Returns `(z_f, z_t)`, each `[B, d]`.
    pub fn forward(&self, s: &mut Session, spectrograms: &[&Tensor]) -> Result<(Var, Var)> {
        let (fs, ts) = self.stacks(spectrograms)?;
        let fx = s.graph.input(fs);
        let tx = s.graph.input(ts);
        let zf = self.freq.forward(s, fx)?;
        let zt = self.time.forward(s, tx)?;
        Ok((zf, zt))
    }
}

fn batch_stacks(spectrograms: &[&Tensor], spec: &ChunkSpec) -> Result<Tensor> {
    if spectrograms.is_empty() {
        return Err(arg_err!("empty batch"));
    }
    let mut data = Vec::new();
    let mut shape = None;
    for sg in spectrograms {
        let st = chunk_axis(sg, spec)?;
        match &shape {
            None => shape = Some(st.shape().to_vec()),
            Some(s) if s.as_slice() != st.shape() => {
                return Err(dim_err!("batch mixes chunk stacks {s:?} and {:?}", st.shape()));
            }
            _ => {}
        }
        data.extend_from_slice(st.data());
    }
    let s = shape.expect("non-empty");
    Tensor::new(&[spectrograms.len(), s[0], s[1], s[2]], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(f: usize, t: usize) -> Tensor {
        Tensor::new(&[f, t], (0..f * t).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn sixteen_bins_three_chunks() {
        let spec = ChunkSpec::new(3, 0.5, ChunkAxis::Frequency).unwrap();
        let lay = spec.layout(16).unwrap();
        assert_eq!((lay.extent, lay.hop, lay.padded), (8, 4, 16));
        assert_eq!(lay.starts(3).collect::<Vec<_>>(), vec![0, 4, 8]);
    }

    #[test]
    fn single_chunk_is_identity() {
        let x = ramp(7, 5);
        for rho in [0.0, 0.3, 0.9] {
            let st = chunk_axis(&x, &ChunkSpec::new(1, rho, ChunkAxis::Frequency).unwrap()).unwrap();
            assert_eq!(st.shape(), &[1, 7, 5]);
            assert_eq!(st.data(), x.data());
            let st = chunk_axis(&x, &ChunkSpec::new(1, rho, ChunkAxis::Time).unwrap()).unwrap();
            assert_eq!(st.data(), x.data());
        }
    }

    #[test]
    fn no_overlap_partitions() {
        let x = ramp(16, 3);
        let st = chunk_axis(&x, &ChunkSpec::new(4, 0.0, ChunkAxis::Frequency).unwrap()).unwrap();
        assert_eq!(st.shape(), &[4, 4, 3]);
        assert_eq!(st.data(), x.data());
    }

    #[test]
    fn too_few_cells() {
        let spec = ChunkSpec::new(5, 0.5, ChunkAxis::Time).unwrap();
        assert!(chunk_axis(&ramp(8, 4), &spec).is_err());
        assert!(ChunkSpec::new(0, 0.5, ChunkAxis::Time).is_err());
        assert!(ChunkSpec::new(2, 1.0, ChunkAxis::Time).is_err());
    }

    #[test]
    fn floor_gap_is_closed() {
        // 101 / 5.5 → 19, hop 9 reaches only 100 before the extent correction.
        let lay = ChunkSpec::new(10, 0.5, ChunkAxis::Frequency)
            .unwrap()
            .layout(101)
            .unwrap();
        assert!(lay.padded >= 101);
        assert_eq!(lay.padded, 9 * lay.hop + lay.extent);
    }
}
