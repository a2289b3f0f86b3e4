//! Slice-level forward and backward kernels behind the autograd graph.
//!
//! Every reduction has a fixed summation order so repeated runs are
//! bit-identical. Convolution accumulates, per output cell, over input channel
//! (outermost), kernel row, then kernel column (innermost), starting from zero;
//! the bias is added last.

/// Output extent of a strided window sweep.
pub fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output columns `j` whose input column `j*stride + tap - pad` lies in `[0, width)`.
#[inline]
fn valid_cols(out_w: usize, stride: usize, tap: usize, pad: usize, width: usize) -> (usize, usize) {
    let lo = if pad > tap { (pad - tap).div_ceil(stride) } else { 0 };
    if width + pad <= tap {
        return (0, 0);
    }
    let hi = ((width - 1 + pad - tap) / stride + 1).min(out_w);
    (lo.min(hi), hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub out_h: usize,
    pub out_w: usize,
}

pub fn conv2d_forward(g: &ConvGeom, x: &[f64], k: &[f64], bias: &[f64]) -> Vec<f64> {
    let (sh, sw) = g.stride;
    let (ph, pw) = g.pad;
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.batch * g.out_ch * plane];
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let acc = &mut out[(b * g.out_ch + o) * plane..][..plane];
            for c in 0..g.in_ch {
                let xp = &x[(b * g.in_ch + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                let kp = &k[(o * g.in_ch + c) * g.k_h * g.k_w..][..g.k_h * g.k_w];
                for u in 0..g.k_h {
                    for v in 0..g.k_w {
                        let kv = kp[u * g.k_w + v];
                        let (j0, j1) = valid_cols(g.out_w, sw, v, pw, g.in_w);
                        for i in 0..g.out_h {
                            let row = i * sh + u;
                            if row < ph || row - ph >= g.in_h {
                                continue;
                            }
                            let xrow = &xp[(row - ph) * g.in_w..][..g.in_w];
                            let orow = &mut acc[i * g.out_w..][..g.out_w];
                            if sw == 1 {
                                let off = v as isize - pw as isize;
                                let xs = &xrow[(j0 as isize + off) as usize..(j1 as isize + off) as usize];
                                for (o_, x_) in orow[j0..j1].iter_mut().zip(xs) {
                                    *o_ += x_ * kv;
                                }
                            } else {
                                for j in j0..j1 {
                                    orow[j] += xrow[j * sw + v - pw] * kv;
                                }
                            }
                        }
                    }
                }
            }
            let bo = bias[o];
            acc.iter_mut().for_each(|a| *a += bo);
        }
    }
    out
}

/// Returns `(grad_input, grad_kernel, grad_bias)`.
pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    k: &[f64],
    grad_out: &[f64],
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (sh, sw) = g.stride;
    let (ph, pw) = g.pad;
    let plane = g.out_h * g.out_w;
    let in_plane = g.in_h * g.in_w;
    let mut gx = need_input.then(|| vec![0.0; x.len()]);
    let mut gk = vec![0.0; k.len()];
    let mut gb = vec![0.0; g.out_ch];
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let go = &grad_out[(b * g.out_ch + o) * plane..][..plane];
            gb[o] += go.iter().sum::<f64>();
            for c in 0..g.in_ch {
                let xp = &x[(b * g.in_ch + c) * in_plane..][..in_plane];
                let kbase = (o * g.in_ch + c) * g.k_h * g.k_w;
                for u in 0..g.k_h {
                    for v in 0..g.k_w {
                        let kv = k[kbase + u * g.k_w + v];
                        let (j0, j1) = valid_cols(g.out_w, sw, v, pw, g.in_w);
                        let mut s = 0.0;
                        for i in 0..g.out_h {
                            let row = i * sh + u;
                            if row < ph || row - ph >= g.in_h {
                                continue;
                            }
                            let r = row - ph;
                            let grow = &go[i * g.out_w..][..g.out_w];
                            let xrow = &xp[r * g.in_w..][..g.in_w];
                            for j in j0..j1 {
                                s += grow[j] * xrow[j * sw + v - pw];
                            }
                            if let Some(gx) = gx.as_mut() {
                                let gxrow = &mut gx[(b * g.in_ch + c) * in_plane + r * g.in_w..][..g.in_w];
                                for j in j0..j1 {
                                    gxrow[j * sw + v - pw] += grow[j] * kv;
                                }
                            }
                        }
                        gk[kbase + u * g.k_w + v] += s;
                    }
                }
            }
        }
    }
    (gx, gk, gb)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub planes: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: (usize, usize),
    pub out_h: usize,
    pub out_w: usize,
}

/// Max pooling without padding. Returns values and the flat input index of each
/// window's maximum; on ties the first cell in row-major scan order wins.
pub fn maxpool2d_forward(g: &PoolGeom, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let n = g.planes * g.out_h * g.out_w;
    let mut out = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    for p in 0..g.planes {
        let base = p * g.in_h * g.in_w;
        for i in 0..g.out_h {
            for j in 0..g.out_w {
                let r0 = i * g.stride.0;
                let c0 = j * g.stride.1;
                let mut best = base + r0 * g.in_w + c0;
                let mut best_v = x[best];
                for u in 0..g.k_h {
                    for v in 0..g.k_w {
                        let idx = base + (r0 + u) * g.in_w + c0 + v;
                        if x[idx] > best_v {
                            best_v = x[idx];
                            best = idx;
                        }
                    }
                }
                out.push(best_v);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// `out[b,e] = sum_d x[b,d] w[d,e] + bias[e]`, accumulated over ascending `d`.
pub fn affine_forward(x: &[f64], w: &[f64], bias: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for b in 0..rows {
        let orow = &mut out[b * cols..][..cols];
        for d in 0..inner {
            let xv = x[b * inner + d];
            let wrow = &w[d * cols..][..cols];
            for (o, wv) in orow.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
        for (o, bv) in orow.iter_mut().zip(bias) {
            *o += bv;
        }
    }
    out
}

/// `out[i,k] = sum_d a[i,d] b[k,d]`.
pub fn matmul_nt(a: &[f64], b: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let ar = &a[i * inner..][..inner];
        for k in 0..cols {
            let br = &b[k * inner..][..inner];
            let mut s = 0.0;
            for d in 0..inner {
                s += ar[d] * br[d];
            }
            out[i * cols + k] = s;
        }
    }
    out
}

/// Numerically stable logistic function, kept strictly inside (0, 1).
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Axis kept by [`avg_pool_axes`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolAxis {
    Channel,
    Frequency,
    Time,
}

impl PoolAxis {
    pub const ALL: [PoolAxis; 3] = [PoolAxis::Channel, PoolAxis::Frequency, PoolAxis::Time];
}

/// Mean over the two axes other than `keep` for each sample of a `[B,C,H,W]`
/// block. Terms are summed in row-major order of the remaining axes.
pub fn avg_pool_axes(x: &[f64], dims: [usize; 4], keep: PoolAxis) -> Vec<f64> {
    let [b, c, h, w] = dims;
    let kept = match keep {
        PoolAxis::Channel => c,
        PoolAxis::Frequency => h,
        PoolAxis::Time => w,
    };
    let count = (c * h * w / kept) as f64;
    let mut out = vec![0.0; b * kept];
    for bi in 0..b {
        let acc = &mut out[bi * kept..][..kept];
        for ci in 0..c {
            for hi in 0..h {
                let row = &x[((bi * c + ci) * h + hi) * w..][..w];
                match keep {
                    PoolAxis::Channel => {
                        for v in row {
                            acc[ci] += v;
                        }
                    }
                    PoolAxis::Frequency => {
                        for v in row {
                            acc[hi] += v;
                        }
                    }
                    PoolAxis::Time => {
                        for (a, v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                }
            }
        }
        acc.iter_mut().for_each(|a| *a /= count);
    }
    out
}

/// Log of the summed exponentials, shifted by the maximum.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
