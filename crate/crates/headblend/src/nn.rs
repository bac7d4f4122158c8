//! Layer primitives on top of the tape: convolution as im2col gather plus
//! matmul, layout shuffles between planar `[C,h,w]` and token `[T,C]` views,
//! and nearest-neighbor upsampling. All index maps feed [`Tape::gather`],
//! whose scatter-add backward covers every reshape here.

use std::sync::Arc;

use crate::numerics::{NumericsError, Real, Tape, Vid};

/// Index map for im2col: rows are output positions, row entries ordered
/// (channel, ky, kx) to match a `[k*k*C, outC]` weight matrix. Returns
/// (map, oh, ow); map entries of -1 read as zero padding.
pub fn im2col_map(
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Arc<Vec<i64>>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut map = Vec::with_capacity(oh * ow * k * k * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as i64 - pad as i64;
                        let ix = (ox * stride + kx) as i64 - pad as i64;
                        if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                            map.push(-1);
                        } else {
                            map.push((ch * h * w) as i64 + iy * w as i64 + ix);
                        }
                    }
                }
            }
        }
    }
    (Arc::new(map), oh, ow)
}

/// `[oh*ow, outC]` → `[outC, oh, ow]` permutation.
fn cols_to_chw_map(oh: usize, ow: usize, out_c: usize) -> Arc<Vec<i64>> {
    let mut map = Vec::with_capacity(out_c * oh * ow);
    for ch in 0..out_c {
        for p in 0..oh * ow {
            map.push((p * out_c + ch) as i64);
        }
    }
    Arc::new(map)
}

/// 2-D convolution over a planar `[C,h,w]` input. Weight layout `[k*k*C, outC]`,
/// bias `[outC]`. Returns the `[outC, oh, ow]` output id.
pub fn conv2d<R: Real>(
    tape: &mut Tape<R>,
    x: Vid,
    weight: Vid,
    bias: Vid,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<Vid, NumericsError> {
    let shape = tape.shape(x).to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let out_c = tape.shape(weight)[1];
    let (map, oh, ow) = im2col_map(c, h, w, k, stride, pad);
    let cols = tape.gather(x, map, vec![oh * ow, k * k * c])?;
    let prod = tape.matmul(cols, weight)?;
    let biased = tape.add_row(prod, bias)?;
    tape.gather(biased, cols_to_chw_map(oh, ow, out_c), vec![out_c, oh, ow])
}

/// Planar `[C,h,w]` → token `[h*w, C]` view.
pub fn tokens_from_chw<R: Real>(tape: &mut Tape<R>, x: Vid) -> Result<Vid, NumericsError> {
    let shape = tape.shape(x).to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut map = Vec::with_capacity(c * h * w);
    for p in 0..h * w {
        for ch in 0..c {
            map.push((ch * h * w + p) as i64);
        }
    }
    tape.gather(x, Arc::new(map), vec![h * w, c])
}

/// Token `[T,C]` → planar `[C,h,w]` view (T must equal h*w).
pub fn chw_from_tokens<R: Real>(
    tape: &mut Tape<R>,
    x: Vid,
    h: usize,
    w: usize,
) -> Result<Vid, NumericsError> {
    let shape = tape.shape(x).to_vec();
    let (t, c) = (shape[0], shape[1]);
    debug_assert_eq!(t, h * w);
    let mut map = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for p in 0..h * w {
            map.push((p * c + ch) as i64);
        }
    }
    tape.gather(x, Arc::new(map), vec![c, h, w])
}

/// Rank-2 transpose as a permutation gather.
pub fn transpose2d<R: Real>(tape: &mut Tape<R>, x: Vid) -> Result<Vid, NumericsError> {
    let shape = tape.shape(x).to_vec();
    let (m, n) = (shape[0], shape[1]);
    let mut map = Vec::with_capacity(m * n);
    for j in 0..n {
        for i in 0..m {
            map.push((i * n + j) as i64);
        }
    }
    tape.gather(x, Arc::new(map), vec![n, m])
}

/// Nearest-neighbor upsampling of a planar `[C,h,w]` input by an integer factor.
pub fn upsample_nearest<R: Real>(
    tape: &mut Tape<R>,
    x: Vid,
    factor: usize,
) -> Result<Vid, NumericsError> {
    let shape = tape.shape(x).to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (nh, nw) = (h * factor, w * factor);
    let mut map = Vec::with_capacity(c * nh * nw);
    for ch in 0..c {
        for y in 0..nh {
            for x2 in 0..nw {
                map.push((ch * h * w + (y / factor) * w + x2 / factor) as i64);
            }
        }
    }
    tape.gather(x, Arc::new(map), vec![c, nh, nw])
}

/// Affine layer over row vectors: x `[rows, in]` · w `[in, out]` + b `[out]`.
pub fn linear<R: Real>(
    tape: &mut Tape<R>,
    x: Vid,
    weight: Vid,
    bias: Vid,
) -> Result<Vid, NumericsError> {
    let prod = tape.matmul(x, weight)?;
    tape.add_row(prod, bias)
}
