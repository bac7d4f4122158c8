//! Foreground-predictive masked attention.
//!
//! The body blender must complete occluded neck/body regions by looking only
//! at matching regions of the target body: foreground patches attend to
//! foreground patches, background to background. The pieces:
//!
//! 1. a small convolutional head predicts a soft foreground map from the
//!    colorizer features and thresholds it to a binary mask;
//! 2. the mask is patchified and patch means are thresholded by `tau` into
//!    body / non-body index sets;
//! 3. the partition yields an additive N×N attention mask with 0 for
//!    same-type pairs and -inf across the boundary;
//! 4. cross-attention applies that mask before the softmax.
//!
//! The threshold is not differentiated: the predictor trains only through
//! the mask loss on the soft map, and the attention mask is a constant
//! during each forward pass.

use std::sync::Arc;

use thiserror::Error;

use crate::mask::BinaryMask;
use crate::nn::{conv2d, transpose2d};
use crate::numerics::{NumericsError, Real, Tape, Vid};

#[derive(Debug, Error)]
pub enum FpatError {
    #[error("patch size {p} does not divide feature resolution {h}x{w}")]
    PatchMismatch { p: usize, h: usize, w: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Patch geometry over a `[C,h,w]` feature grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl PatchGrid {
    pub fn new(channels: usize, height: usize, width: usize, patch: usize) -> Result<Self, FpatError> {
        if patch == 0 || height % patch != 0 || width % patch != 0 {
            return Err(FpatError::PatchMismatch {
                p: patch,
                h: height,
                w: width,
            });
        }
        Ok(PatchGrid {
            channels,
            height,
            width,
            patch,
        })
    }

    /// Number of patches N = h·w / P².
    pub fn patch_count(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// Flattened patch dimension P²·C.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Gather map `[C,h,w]` → `[N, P²C]`; blocks in row-major block order,
    /// entries within a patch ordered (channel, py, px).
    pub fn patchify_map(&self) -> Arc<Vec<i64>> {
        let (c, h, w, p) = (self.channels, self.height, self.width, self.patch);
        let bw = w / p;
        let n = self.patch_count();
        let mut map = Vec::with_capacity(n * self.patch_dim());
        for bn in 0..n {
            let (by, bx) = (bn / bw, bn % bw);
            for ch in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        let y = by * p + py;
                        let x = bx * p + px;
                        map.push((ch * h * w + y * w + x) as i64);
                    }
                }
            }
        }
        Arc::new(map)
    }

    /// Inverse permutation `[N, P²C]` → `[C,h,w]`.
    pub fn unpatchify_map(&self) -> Arc<Vec<i64>> {
        let fwd = self.patchify_map();
        let mut inv = vec![0i64; fwd.len()];
        for (dst, &src) in fwd.iter().enumerate() {
            inv[src as usize] = dst as i64;
        }
        Arc::new(inv)
    }
}

/// Tape patchify: `[C,h,w]` → `[N, P²C]`.
pub fn patchify<R: Real>(
    tape: &mut Tape<R>,
    x: Vid,
    grid: &PatchGrid,
) -> Result<Vid, NumericsError> {
    tape.gather(x, grid.patchify_map(), vec![grid.patch_count(), grid.patch_dim()])
}

/// Tape unpatchify: `[N, P²C]` → `[C,h,w]`; exact inverse of [`patchify`].
pub fn unpatchify<R: Real>(
    tape: &mut Tape<R>,
    x: Vid,
    grid: &PatchGrid,
) -> Result<Vid, NumericsError> {
    tape.gather(
        x,
        grid.unpatchify_map(),
        vec![grid.channels, grid.height, grid.width],
    )
}

/// Patchify a binary mask at feature resolution into `[N, P²]` rows.
pub fn patchify_mask(m: &BinaryMask, patch: usize) -> Result<Vec<f64>, FpatError> {
    let grid = PatchGrid::new(1, m.height, m.width, patch)?;
    let map = grid.patchify_map();
    Ok(map.iter().map(|&ix| m.data[ix as usize] as f64).collect())
}

/// Mean of each patch row: `[N, P²]` → `[N]`.
pub fn average_mask_patches(m_p: &[f64], n: usize, p2: usize) -> Vec<f64> {
    assert_eq!(m_p.len(), n * p2, "patchified mask length");
    (0..n)
        .map(|i| m_p[i * p2..(i + 1) * p2].iter().sum::<f64>() / p2 as f64)
        .collect()
}

/// Disjoint, total split of patch indices into body (mean ≥ tau) and
/// non-body (mean < tau) sets.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPartition {
    pub s_b: Vec<usize>,
    pub s_nb: Vec<usize>,
    pub n: usize,
    pub tau: f64,
}

impl PatchPartition {
    /// Membership vector: true means body patch.
    pub fn is_body(&self) -> Vec<bool> {
        let mut v = vec![false; self.n];
        for &i in &self.s_b {
            v[i] = true;
        }
        v
    }
}

/// Threshold patch means by `tau`; the boundary value `m_avg[i] == tau`
/// belongs to the body set.
pub fn partition_patches(m_avg: &[f64], tau: f64) -> PatchPartition {
    let mut s_b = Vec::new();
    let mut s_nb = Vec::new();
    for (i, &v) in m_avg.iter().enumerate() {
        if v >= tau {
            s_b.push(i);
        } else {
            s_nb.push(i);
        }
    }
    PatchPartition {
        s_b,
        s_nb,
        n: m_avg.len(),
        tau,
    }
}

/// Additive N×N attention mask: 0 where query and key patches share a type,
/// -inf across the boundary. Symmetric by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub n: usize,
    pub data: Vec<f64>,
}

pub fn build_attention_mask(part: &PatchPartition) -> AttentionMask {
    let n = part.n;
    let body = part.is_body();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if body[i] != body[j] {
                data[i * n + j] = f64::NEG_INFINITY;
            }
        }
    }
    AttentionMask { n, data }
}

impl AttentionMask {
    /// Unrestricted attention (all patches one type).
    pub fn unmasked(n: usize) -> Self {
        AttentionMask {
            n,
            data: vec![0.0; n * n],
        }
    }

    fn as_real<R: Real>(&self) -> Vec<R> {
        self.data.iter().map(|&v| R::from_f64(v)).collect()
    }
}

/// Masked single-head cross-attention: query from `q_tokens`, key and value
/// from `kv_tokens`, scores scaled by 1/sqrt(d_k) and shifted by the
/// additive mask before the softmax. Returns (output, attention matrix).
/// Rows whose permitted set is empty fall back to uniform weights.
pub fn masked_cross_attention<R: Real>(
    tape: &mut Tape<R>,
    q_tokens: Vid,
    kv_tokens: Vid,
    mask: Option<&AttentionMask>,
    wq: Vid,
    wk: Vid,
    wv: Vid,
) -> Result<(Vid, Vid), NumericsError> {
    let d_k = tape.shape(wq)[1];
    let q = tape.matmul(q_tokens, wq)?;
    let k = tape.matmul(kv_tokens, wk)?;
    let v = tape.matmul(kv_tokens, wv)?;
    let k_t = transpose2d(tape, k)?;
    let scores = tape.matmul(q, k_t)?;
    let scaled = tape.scale(scores, R::from_f64(1.0 / (d_k as f64).sqrt()));
    let shifted = match mask {
        Some(m) => tape.add_const(scaled, &m.as_real::<R>())?,
        None => scaled,
    };
    let attn = tape.softmax_last(shifted)?;
    let out = tape.matmul(attn, v)?;
    Ok((out, attn))
}

/// Foreground-predictive attention: query from the colorized-head patches,
/// key/value from the target-body patches, attention restricted to
/// same-type patch pairs by the additive mask.
pub fn fpat_attention<R: Real>(
    tape: &mut Tape<R>,
    z_c_p: Vid,
    z_body_p: Vid,
    mask: &AttentionMask,
    wq: Vid,
    wk: Vid,
    wv: Vid,
) -> Result<(Vid, Vid), NumericsError> {
    masked_cross_attention(tape, z_c_p, z_body_p, Some(mask), wq, wk, wv)
}

/// Weight ids for one cross-attention transformer block.
#[derive(Debug, Clone, Copy)]
pub struct BlockWeights {
    /// Learned per-token bias added to the query-side input.
    pub q_pos: Vid,
    /// Learned per-token bias added to the key/value-side input.
    pub kv_pos: Vid,
    pub wq: Vid,
    pub wk: Vid,
    pub wv: Vid,
    /// Output projection; zero-initialized so a fresh block is the identity.
    pub wo: Vid,
    pub w1: Vid,
    pub b1: Vid,
    /// Second feedforward layer; zero-initialized like `wo`.
    pub w2: Vid,
    pub b2: Vid,
}

/// Cross-attention transformer block: attention with residual add, then a
/// per-token feedforward with residual add. With zero-initialized `wo` and
/// `w2` the block passes its query input through unchanged.
pub fn cross_attention_block<R: Real>(
    tape: &mut Tape<R>,
    x_tokens: Vid,
    cond_tokens: Vid,
    mask: Option<&AttentionMask>,
    w: &BlockWeights,
) -> Result<(Vid, Vid), NumericsError> {
    let q_in = tape.add(x_tokens, w.q_pos)?;
    let kv_in = tape.add(cond_tokens, w.kv_pos)?;
    let (attn_out, attn) = masked_cross_attention(tape, q_in, kv_in, mask, w.wq, w.wk, w.wv)?;
    let projected = tape.matmul(attn_out, w.wo)?;
    let h = tape.add(x_tokens, projected)?;
    let f1 = tape.matmul(h, w.w1)?;
    let f1b = tape.add_row(f1, w.b1)?;
    let act = tape.silu(f1b);
    let f2 = tape.matmul(act, w.w2)?;
    let f2b = tape.add_row(f2, w.b2)?;
    let out = tape.add(h, f2b)?;
    Ok((out, attn))
}

/// Head Colorizer block: plain (unmasked) cross-attention from the encoder
/// tokens to the embedded target-head tokens.
pub fn colorizer_cross_attention<R: Real>(
    tape: &mut Tape<R>,
    x_tokens: Vid,
    head_cond_tokens: Vid,
    w: &BlockWeights,
) -> Result<(Vid, Vid), NumericsError> {
    cross_attention_block(tape, x_tokens, head_cond_tokens, None, w)
}

/// Weight ids for the foreground-prediction head.
#[derive(Debug, Clone, Copy)]
pub struct PredictorWeights {
    pub w1: Vid,
    pub b1: Vid,
    pub w2: Vid,
    pub b2: Vid,
    pub mid_channels: usize,
}

/// Predict the foreground (body + neck) region from the colorizer features:
/// two 3x3 convolutions and a sigmoid give the soft map in `[0,1]`; the binary
/// mask thresholds it at 0.5. Gradient reaches the predictor only through
/// the returned soft-map id.
pub fn predict_foreground<R: Real>(
    tape: &mut Tape<R>,
    z_c: Vid,
    w: &PredictorWeights,
) -> Result<(Vid, BinaryMask), NumericsError> {
    let shape = tape.shape(z_c).to_vec();
    let (h, wd) = (shape[1], shape[2]);
    let mid = conv2d(tape, z_c, w.w1, w.b1, 3, 1, 1)?;
    let act = tape.silu(mid);
    let logits = conv2d(tape, act, w.w2, w.b2, 3, 1, 1)?;
    let soft = tape.sigmoid(logits);
    let half = R::from_f64(0.5);
    let data = tape
        .value(soft)
        .iter()
        .map(|&v| (v >= half) as u8)
        .collect();
    let mask = BinaryMask {
        height: h,
        width: wd,
        data,
    };
    Ok((soft, mask))
}

/// Partition pipeline from a predicted binary mask: patchify, average,
/// threshold by tau, build the additive mask.
pub fn attention_mask_from_binary(
    m: &BinaryMask,
    patch: usize,
    tau: f64,
) -> Result<(PatchPartition, AttentionMask), FpatError> {
    let grid = PatchGrid::new(1, m.height, m.width, patch)?;
    let m_p = patchify_mask(m, patch)?;
    let m_avg = average_mask_patches(&m_p, grid.patch_count(), patch * patch);
    let part = partition_patches(&m_avg, tau);
    let mask = build_attention_mask(&part);
    Ok((part, mask))
}
