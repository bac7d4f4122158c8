//! The end-to-end toy network: encoder, head colorizer, foreground
//! predictor, body blender, ToRGB branch, decoder, and discriminator.
//!
//! Layer choices are the smallest stack that exercises every mechanism:
//! the encoder is three conv blocks (one stride-1, two stride-2) taking the
//! input to a res/4 feature grid; one colorizer cross-attention block; one
//! masked-attention block for the body blender; a mirrored decoder with
//! nearest-neighbor upsampling; and a strided conv discriminator. Residual
//! projections start at zero so fresh attention blocks are identities.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fpat::{
    attention_mask_from_binary, cross_attention_block, patchify, predict_foreground, unpatchify,
    AttentionMask, BlockWeights, FpatError, PatchGrid, PatchPartition, PredictorWeights,
};
use crate::mask::{BinaryMask, Image};
use crate::nn::{chw_from_tokens, conv2d, linear, tokens_from_chw, upsample_nearest};
use crate::numerics::{NumericsError, Real, Rng, Tape, TensorData, Vid};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Fpat(#[from] FpatError),
    #[error("checkpoint {path}: {msg}")]
    Format { path: String, msg: String },
    #[error("checkpoint {path}: io error: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint mismatch: expected {expected}, found {found}")]
    Mismatch { expected: String, found: String },
}

/// Architecture-defining configuration. Two checkpoints are compatible only
/// if these fields (plus precision) agree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input image resolution (square). Must be divisible by 4 * patch.
    pub resolution: usize,
    /// Feature channels at the encoder output.
    pub channels: usize,
    /// FPAT patch size on the feature grid.
    pub patch: usize,
    /// Query/key/value width inside the body-blender attention.
    pub fpat_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            resolution: 64,
            channels: 32,
            patch: 4,
            fpat_dim: 64,
        }
    }
}

impl ModelConfig {
    /// Encoder output grid side: resolution / 4.
    pub fn grid(&self) -> usize {
        self.resolution / 4
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.resolution % (4 * self.patch) == 0
            && self.resolution % 8 == 0
            && self.channels >= 2
            && self.channels % 2 == 0
            && self.patch > 0
            && self.fpat_dim > 0;
        if !ok {
            return Err(ModelError::Format {
                path: String::new(),
                msg: format!("invalid model config {self:?}"),
            });
        }
        Ok(())
    }

    /// Patch geometry of the body blender on the feature grid.
    pub fn patch_grid(&self) -> PatchGrid {
        PatchGrid::new(self.channels, self.grid(), self.grid(), self.patch)
            .expect("validated config")
    }

    pub fn signature<R: Real>(&self) -> String {
        format!(
            "res={};ch={};patch={};fpat={};prec={}",
            self.resolution,
            self.channels,
            self.patch,
            self.fpat_dim,
            R::precision_tag()
        )
    }
}

/// All learnable weights, addressed by stable names. BTreeMap keeps
/// iteration (and therefore serialization and optimizer order)
/// deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<R: Real> {
    pub config: ModelConfig,
    pub entries: BTreeMap<String, TensorData<R>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    /// He-uniform fan-in scaling.
    He,
    /// Damped He-uniform for residual-branch projections: small enough that
    /// fresh blocks stay near the identity, nonzero so the conditioning path
    /// receives gradient from the first step.
    Residual,
    /// Exact zeros (biases; the discriminator's final layer).
    Zero,
}

/// (name, shape, init) triples describing every tensor in the model.
fn tensor_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let c = cfg.channels;
    let half = c / 2;
    let grid = cfg.grid();
    let tokens = grid * grid;
    let pg = cfg.patch_grid();
    let n = pg.patch_count();
    let pd = pg.patch_dim();
    let fd = cfg.fpat_dim;
    let dres = cfg.resolution / 8;

    let mut v: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: &str, shape: Vec<usize>, init: Init| {
        v.push((name.to_string(), shape, init));
    };

    // Shared conv encoder shape for the input path and the conditional
    // projection embedder.
    for prefix in ["enc", "cond"] {
        push(&format!("{prefix}.c1.w"), vec![9 * 3, half], Init::He);
        push(&format!("{prefix}.c1.b"), vec![half], Init::Zero);
        push(&format!("{prefix}.c2.w"), vec![9 * half, c], Init::He);
        push(&format!("{prefix}.c2.b"), vec![c], Init::Zero);
        push(&format!("{prefix}.c3.w"), vec![9 * c, c], Init::He);
        push(&format!("{prefix}.c3.b"), vec![c], Init::Zero);
    }

    // Head colorizer block over [tokens, c].
    push("col.q_pos", vec![tokens, c], Init::He);
    push("col.kv_pos", vec![tokens, c], Init::He);
    push("col.wq", vec![c, c], Init::He);
    push("col.wk", vec![c, c], Init::He);
    push("col.wv", vec![c, c], Init::He);
    push("col.wo", vec![c, c], Init::Residual);
    push("col.w1", vec![c, 4 * c], Init::He);
    push("col.b1", vec![4 * c], Init::Zero);
    push("col.w2", vec![4 * c, c], Init::Residual);
    push("col.b2", vec![c], Init::Zero);

    // Foreground predictor.
    push("pred.c1.w", vec![9 * c, half], Init::He);
    push("pred.c1.b", vec![half], Init::Zero);
    push("pred.c2.w", vec![9 * half, 1], Init::He);
    push("pred.c2.b", vec![1], Init::Zero);

    // Body blender (masked attention) block over [n, pd].
    push("fpat.q_pos", vec![n, pd], Init::He);
    push("fpat.kv_pos", vec![n, pd], Init::He);
    push("fpat.wq", vec![pd, fd], Init::He);
    push("fpat.wk", vec![pd, fd], Init::He);
    push("fpat.wv", vec![pd, fd], Init::He);
    push("fpat.wo", vec![fd, pd], Init::Residual);
    push("fpat.w1", vec![pd, pd], Init::He);
    push("fpat.b1", vec![pd], Init::Zero);
    push("fpat.w2", vec![pd, pd], Init::Residual);
    push("fpat.b2", vec![pd], Init::Zero);

    // ToRGB branch: 1x1 conv from the colorizer features.
    push("torgb.w", vec![c, 3], Init::He);
    push("torgb.b", vec![3], Init::Zero);

    // Global color conditioning: per-channel mean and spread of the target
    // head drive a scale/shift on the decoder features, so brightness and
    // saturation of the reference transfer directly. Zero-initialized:
    // identity until trained.
    push("film.ws", vec![6, c], Init::Zero);
    push("film.bs", vec![c], Init::Zero);
    push("film.wb", vec![6, c], Init::Zero);
    push("film.bb", vec![c], Init::Zero);
    push("film2.ws", vec![6, half], Init::Zero);
    push("film2.bs", vec![half], Init::Zero);
    push("film2.wb", vec![6, half], Init::Zero);
    push("film2.bb", vec![half], Init::Zero);

    // Decoder: concat(z_c, z_b) -> image. The full-resolution stage also
    // sees the encoder's first-block features (skip), so the head region is
    // reconstructed as recolorization rather than synthesis from the
    // coarse grid.
    push("dec.c1.w", vec![9 * 2 * c, c], Init::He);
    push("dec.c1.b", vec![c], Init::Zero);
    push("dec.c2.w", vec![9 * c, half], Init::He);
    push("dec.c2.b", vec![half], Init::Zero);
    push("dec.c3.w", vec![9 * (half + half), half], Init::He);
    push("dec.c3.b", vec![half], Init::Zero);
    push("dec.c4.w", vec![9 * half, 3], Init::He);
    push("dec.c4.b", vec![3], Init::Zero);

    // Discriminator: deliberately lean so its equilibrium push on the
    // generator stays well below the reconstruction signal.
    let dc = (c / 4).max(2);
    push("disc.c1.w", vec![9 * 3, dc], Init::He);
    push("disc.c1.b", vec![dc], Init::Zero);
    push("disc.c2.w", vec![9 * dc, dc], Init::He);
    push("disc.c2.b", vec![dc], Init::Zero);
    push("disc.c3.w", vec![9 * dc, dc], Init::He);
    push("disc.c3.b", vec![dc], Init::Zero);
    push("disc.fc.w", vec![dc * dres * dres, 1], Init::Zero);
    push("disc.fc.b", vec![1], Init::Zero);

    v
}

fn init_scale(name: &str, shape: &[usize]) -> f64 {
    if name.ends_with("q_pos") || name.ends_with("kv_pos") {
        return 1.0;
    }
    // weight layouts put fan-in first
    let fan_in = shape[0];
    (6.0 / fan_in as f64).sqrt()
}

impl<R: Real> ModelParams<R> {
    /// Training initialization: He-uniform weights, zero biases, damped
    /// random residual projections, zero discriminator head. Each tensor
    /// draws from an rng derived from the seed and its name, so
    /// initialization is order-independent.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        Self::build(cfg, seed, false)
    }

    /// Test/diagnostic initialization with no zero tensors, so every
    /// parameter influences the losses in a single forward pass.
    pub fn init_random_all(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        Self::build(cfg, seed, true)
    }

    fn build(cfg: &ModelConfig, seed: u64, randomize_zeros: bool) -> Result<Self, ModelError> {
        cfg.validate()?;
        let root = Rng::new(seed);
        let mut entries = BTreeMap::new();
        for (name, shape, init) in tensor_specs(cfg) {
            let mut rng = root.child(&format!("init.{name}"));
            let scale = match init {
                Init::He => init_scale(&name, &shape),
                Init::Residual => 0.3 * init_scale(&name, &shape),
                Init::Zero if randomize_zeros => 0.5 * init_scale(&name, &shape),
                Init::Zero => {
                    entries.insert(name, TensorData::zeros(&shape));
                    continue;
                }
            };
            entries.insert(name, TensorData::rand_uniform(&shape, scale, &mut rng));
        }
        // Tie the key side to the query side at init for both attention
        // blocks: with a shared positional bias and Wk == Wq the score
        // matrix starts diagonal-dominant, so attention begins as
        // "attend to the same position" and trains from there.
        if !randomize_zeros {
            for prefix in ["col", "fpat"] {
                let q_pos = entries[&format!("{prefix}.q_pos")].clone();
                entries.insert(format!("{prefix}.kv_pos"), q_pos);
                let wq = entries[&format!("{prefix}.wq")].clone();
                let wk = entries.get_mut(&format!("{prefix}.wk")).expect("declared tensor");
                if wk.shape == wq.shape {
                    *wk = wq;
                }
            }
        }
        Ok(ModelParams {
            config: cfg.clone(),
            entries,
        })
    }

    pub fn get(&self, name: &str) -> &TensorData<R> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Register every tensor on a tape; returns name → id.
    pub fn register(&self, tape: &mut Tape<R>) -> BTreeMap<String, Vid> {
        self.entries
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
            .collect()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }
}

/// Node ids of everything the forward pass exposes.
#[derive(Debug, Clone)]
pub struct ForwardIds {
    pub z_c: Vid,
    pub z_b: Vid,
    pub z: Vid,
    pub y_hat: Vid,
    pub to_rgb: Vid,
    pub soft_map: Vid,
    pub attn_colorizer: Vid,
    pub attn_fpat: Vid,
}

/// Forward products extracted from the tape.
#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    pub y_hat: Image,
    pub to_rgb: Image,
    /// Soft foreground map at feature resolution, row-major h×w.
    pub soft_map: Vec<f64>,
    pub foreground: BinaryMask,
    pub partition: PatchPartition,
    /// Per-block attention matrices (colorizer, body blender).
    pub attn_colorizer: TensorData<f64>,
    pub attn_fpat: TensorData<f64>,
}

pub fn image_to_leaf<R: Real>(tape: &mut Tape<R>, img: &Image) -> Vid {
    let data = img.data.iter().map(|&v| R::from_f64(v)).collect();
    tape.leaf(TensorData {
        shape: vec![3, img.height, img.width],
        data,
    })
}

pub fn leaf_to_image<R: Real>(tape: &Tape<R>, v: Vid) -> Image {
    let shape = tape.shape(v);
    debug_assert_eq!(shape[0], 3);
    Image {
        height: shape[1],
        width: shape[2],
        data: tape.value(v).iter().map(|&x| x.to_f64()).collect(),
    }
}

fn block_weights(ids: &BTreeMap<String, Vid>, prefix: &str) -> BlockWeights {
    let g = |suffix: &str| ids[&format!("{prefix}.{suffix}")];
    BlockWeights {
        q_pos: g("q_pos"),
        kv_pos: g("kv_pos"),
        wq: g("wq"),
        wk: g("wk"),
        wv: g("wv"),
        wo: g("wo"),
        w1: g("w1"),
        b1: g("b1"),
        w2: g("w2"),
        b2: g("b2"),
    }
}

/// Per-channel mean and mean absolute deviation of a masked conditioning
/// image over its support (pixels with any nonzero channel). Encodes the
/// reference's global brightness/saturation for the decoder conditioning.
fn color_stats(img: &Image) -> [f64; 6] {
    let hw = img.height * img.width;
    let mut support = Vec::new();
    for i in 0..hw {
        if img.data[i] > 0.0 || img.data[hw + i] > 0.0 || img.data[2 * hw + i] > 0.0 {
            support.push(i);
        }
    }
    let mut stats = [0.0; 6];
    if support.is_empty() {
        return stats;
    }
    let n = support.len() as f64;
    for c in 0..3 {
        let mean = support.iter().map(|&i| img.data[c * hw + i]).sum::<f64>() / n;
        let mad = support
            .iter()
            .map(|&i| (img.data[c * hw + i] - mean).abs())
            .sum::<f64>()
            / n;
        stats[c] = mean;
        stats[3 + c] = mad;
    }
    stats
}

/// Scale/shift a planar feature map by projections of the reference color
/// statistics: out = x + x * s + b with per-channel s, b. Zero-initialized
/// projections make it the identity until trained.
fn film_gate<R: Real>(
    tape: &mut Tape<R>,
    ids: &BTreeMap<String, Vid>,
    prefix: &str,
    stats_leaf: Vid,
    x: Vid,
    channels: usize,
    side: usize,
) -> Result<Vid, ModelError> {
    let s_vec = crate::nn::linear(tape, stats_leaf, ids[&format!("{prefix}.ws")], ids[&format!("{prefix}.bs")])?;
    let b_vec = crate::nn::linear(tape, stats_leaf, ids[&format!("{prefix}.wb")], ids[&format!("{prefix}.bb")])?;
    let mut bmap = Vec::with_capacity(channels * side * side);
    for ch in 0..channels {
        for _ in 0..side * side {
            bmap.push(ch as i64);
        }
    }
    let bmap = std::sync::Arc::new(bmap);
    let s_full = tape.gather(s_vec, bmap.clone(), vec![channels, side, side])?;
    let b_full = tape.gather(b_vec, bmap, vec![channels, side, side])?;
    let gated = tape.mul(x, s_full)?;
    let scaled = tape.add(x, gated)?;
    Ok(tape.add(scaled, b_full)?)
}

/// Three-block conv encoder: stride 1, 2, 2 with SiLU activations. Returns
/// the final grid features and the full-resolution first-block activation
/// (the decoder's skip input).
fn encode<R: Real>(
    tape: &mut Tape<R>,
    ids: &BTreeMap<String, Vid>,
    prefix: &str,
    x: Vid,
) -> Result<(Vid, Vid), ModelError> {
    let mut h = x;
    let mut skip = x;
    for (i, stride) in [(1, 1usize), (2, 2), (3, 2)] {
        let w = ids[&format!("{prefix}.c{i}.w")];
        let b = ids[&format!("{prefix}.c{i}.b")];
        h = conv2d(tape, h, w, b, 3, stride, 1)?;
        h = tape.silu(h);
        tape.ensure_finite(h, &format!("{prefix}.c{i}"))?;
        if i == 1 {
            skip = h;
        }
    }
    Ok((h, skip))
}

/// Full generator forward pass on an existing tape.
///
/// `x` is the composited network input, `head` the masked target head image
/// conditioning the colorizer, `body` the masked target body image feeding
/// the body blender.
pub fn forward_on_tape<R: Real>(
    tape: &mut Tape<R>,
    ids: &BTreeMap<String, Vid>,
    cfg: &ModelConfig,
    tau: f64,
    x: &Image,
    head: &Image,
    body: &Image,
) -> Result<(ForwardIds, PatchPartition, BinaryMask), ModelError> {
    let grid = cfg.grid();
    let x_in = image_to_leaf(tape, x);
    let head_in = image_to_leaf(tape, head);
    let body_in = image_to_leaf(tape, body);

    // Encoder over the composited input.
    let (feats, enc_skip) = encode(tape, ids, "enc", x_in)?;

    // Head colorizer: cross-attention from input tokens to embedded head.
    let (cond_feats, _) = encode(tape, ids, "cond", head_in)?;
    let x_tokens = tokens_from_chw(tape, feats)?;
    let cond_tokens = tokens_from_chw(tape, cond_feats)?;
    let col_w = block_weights(ids, "col");
    let (zc_tokens, attn_col) =
        cross_attention_block(tape, x_tokens, cond_tokens, None, &col_w)?;
    tape.ensure_finite(zc_tokens, "colorizer")?;
    let z_c = chw_from_tokens(tape, zc_tokens, grid, grid)?;

    // Foreground prediction and the patch partition it induces.
    let pred_w = PredictorWeights {
        w1: ids["pred.c1.w"],
        b1: ids["pred.c1.b"],
        w2: ids["pred.c2.w"],
        b2: ids["pred.c2.b"],
        mid_channels: cfg.channels / 2,
    };
    let (soft_map, fg_mask) = predict_foreground(tape, z_c, &pred_w)?;
    let (partition, attn_mask) = attention_mask_from_binary(&fg_mask, cfg.patch, tau)?;

    // Body blender: masked attention over patches.
    let (body_feats, _) = encode(tape, ids, "enc", body_in)?;
    let pg = cfg.patch_grid();
    let z_c_p = patchify(tape, z_c, &pg)?;
    let z_body_p = patchify(tape, body_feats, &pg)?;
    let fpat_w = block_weights(ids, "fpat");
    let (z_b_p, attn_fpat) =
        cross_attention_block(tape, z_c_p, z_body_p, Some(&attn_mask), &fpat_w)?;
    tape.ensure_finite(z_b_p, "body_blender")?;
    let z_b = unpatchify(tape, z_b_p, &pg)?;

    // Concatenate along channels and decode, with the reference color
    // statistics gating two decoder stages.
    let stats = color_stats(head);
    let stats_leaf = tape.leaf_from(&[1, 6], stats.iter().map(|&v| R::from_f64(v)).collect())?;
    let z = tape.concat2(z_c, z_b, vec![2 * cfg.channels, grid, grid])?;
    let up1 = upsample_nearest(tape, z, 2)?;
    let d1 = conv2d(tape, up1, ids["dec.c1.w"], ids["dec.c1.b"], 3, 1, 1)?;
    let d1f = film_gate(tape, ids, "film", stats_leaf, d1, cfg.channels, 2 * grid)?;
    let d1a = tape.silu(d1f);
    tape.ensure_finite(d1a, "decoder.c1")?;
    let up2 = upsample_nearest(tape, d1a, 2)?;
    let d2 = conv2d(tape, up2, ids["dec.c2.w"], ids["dec.c2.b"], 3, 1, 1)?;
    let d2a = tape.silu(d2);
    tape.ensure_finite(d2a, "decoder.c2")?;
    let half = cfg.channels / 2;
    let with_skip = tape.concat2(
        d2a,
        enc_skip,
        vec![half + half, cfg.resolution, cfg.resolution],
    )?;
    let d3 = conv2d(tape, with_skip, ids["dec.c3.w"], ids["dec.c3.b"], 3, 1, 1)?;
    let d3f = film_gate(tape, ids, "film2", stats_leaf, d3, half, cfg.resolution)?;
    let d3a = tape.silu(d3f);
    tape.ensure_finite(d3a, "decoder.c3")?;
    let d4 = conv2d(tape, d3a, ids["dec.c4.w"], ids["dec.c4.b"], 3, 1, 1)?;
    let y_hat = tape.sigmoid(d4);
    tape.ensure_finite(y_hat, "decoder.out")?;

    // ToRGB branch from the colorizer features.
    let rgb_feat = conv2d(tape, z_c, ids["torgb.w"], ids["torgb.b"], 1, 1, 0)?;
    let rgb_sig = tape.sigmoid(rgb_feat);
    let to_rgb = upsample_nearest(tape, rgb_sig, cfg.resolution / grid)?;
    tape.ensure_finite(to_rgb, "torgb")?;

    Ok((
        ForwardIds {
            z_c,
            z_b,
            z,
            y_hat,
            to_rgb,
            soft_map,
            attn_colorizer: attn_col,
            attn_fpat,
        },
        partition,
        fg_mask,
    ))
}

/// Standalone forward: fresh tape, values extracted. Pure in (inputs, params).
pub fn forward<R: Real>(
    params: &ModelParams<R>,
    tau: f64,
    x: &Image,
    head: &Image,
    body: &Image,
) -> Result<ForwardOutputs, ModelError> {
    let mut tape = Tape::new();
    let ids = params.register(&mut tape);
    let (f, partition, foreground) =
        forward_on_tape(&mut tape, &ids, &params.config, tau, x, head, body)?;
    let soft_shape = tape.shape(f.soft_map).to_vec();
    debug_assert_eq!(soft_shape[0], 1);
    Ok(ForwardOutputs {
        y_hat: leaf_to_image(&tape, f.y_hat),
        to_rgb: leaf_to_image(&tape, f.to_rgb),
        soft_map: tape.value(f.soft_map).iter().map(|&v| v.to_f64()).collect(),
        foreground,
        partition,
        attn_colorizer: to_f64_tensor(&tape, f.attn_colorizer),
        attn_fpat: to_f64_tensor(&tape, f.attn_fpat),
    })
}

fn to_f64_tensor<R: Real>(tape: &Tape<R>, v: Vid) -> TensorData<f64> {
    TensorData {
        shape: tape.shape(v).to_vec(),
        data: tape.value(v).iter().map(|&x| x.to_f64()).collect(),
    }
}

/// Discriminator forward on an existing tape; returns the (0,1) score id.
pub fn discriminate_on_tape<R: Real>(
    tape: &mut Tape<R>,
    ids: &BTreeMap<String, Vid>,
    img: Vid,
) -> Result<Vid, ModelError> {
    let mut h = img;
    for i in 1..=3 {
        let w = ids[&format!("disc.c{i}.w")];
        let b = ids[&format!("disc.c{i}.b")];
        h = conv2d(tape, h, w, b, 3, 2, 1)?;
        h = tape.silu(h);
        tape.ensure_finite(h, &format!("disc.c{i}"))?;
    }
    let shape = tape.shape(h).to_vec();
    let flat_len = shape.iter().product();
    let flat = tape.slice(h, 0, flat_len, vec![1, flat_len])?;
    let fc = linear(tape, flat, ids["disc.fc.w"], ids["disc.fc.b"])?;
    let sig = tape.sigmoid(fc);
    // [1,1] -> scalar shape so scores combine with the loss terms
    Ok(tape.slice(sig, 0, 1, vec![1])?)
}

/// Probability-of-real for an image under the given parameters.
pub fn discriminate<R: Real>(params: &ModelParams<R>, img: &Image) -> Result<f64, ModelError> {
    let mut tape = Tape::new();
    let ids = params.register(&mut tape);
    let leaf = image_to_leaf(&mut tape, img);
    let score = discriminate_on_tape(&mut tape, &ids, leaf)?;
    Ok(tape.scalar(score).to_f64())
}

// ── checkpoint format ────────────────────────────────────────────────
//
// magic "HBCP" | u32 LE header length | JSON header | raw LE scalar payload
// The header records the format version, precision tag, model config, and
// per-tensor (name, shape, element offset, element count).

const MAGIC: &[u8; 4] = b"HBCP";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    version: u32,
    precision: String,
    config: ModelConfig,
    tensors: Vec<CkptTensor>,
}

#[derive(Serialize, Deserialize)]
struct CkptTensor {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

fn io_err(path: &Path, source: std::io::Error) -> ModelError {
    ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> ModelError {
    ModelError::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

impl<R: Real> ModelParams<R> {
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut tensors = Vec::new();
        let mut offset = 0usize;
        for (name, t) in &self.entries {
            tensors.push(CkptTensor {
                name: name.clone(),
                shape: t.shape.clone(),
                offset,
                len: t.numel(),
            });
            offset += t.numel();
        }
        let header = CkptHeader {
            version: FORMAT_VERSION,
            precision: R::precision_tag().to_string(),
            config: self.config.clone(),
            tensors,
        };
        let header_json =
            serde_json::to_vec(&header).map_err(|e| format_err(path, e.to_string()))?;

        let mut out = Vec::with_capacity(8 + header_json.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_json);
        for t in self.entries.values() {
            for &v in &t.data {
                if R::precision_tag() == "f32" {
                    out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
                } else {
                    out.extend_from_slice(&v.to_f64().to_le_bytes());
                }
            }
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp).map_err(|e| io_err(path, e))?;
            f.write_all(&out).map_err(|e| io_err(path, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| io_err(path, e))?
            .read_to_end(&mut bytes)
            .map_err(|e| io_err(path, e))?;
        if bytes.len() < 8 || &bytes[0..4] != MAGIC {
            return Err(format_err(path, "not a checkpoint file (bad magic)"));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() < 8 + header_len {
            return Err(format_err(path, "truncated header"));
        }
        let header: CkptHeader = serde_json::from_slice(&bytes[8..8 + header_len])
            .map_err(|e| format_err(path, format!("bad header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(ModelError::Mismatch {
                expected: format!("format version {FORMAT_VERSION}"),
                found: format!("format version {}", header.version),
            });
        }
        if header.precision != R::precision_tag() {
            return Err(ModelError::Mismatch {
                expected: format!("precision {}", R::precision_tag()),
                found: format!("precision {}", header.precision),
            });
        }
        header.config.validate()?;

        let scalar_bytes = if header.precision == "f32" { 4 } else { 8 };
        let payload = &bytes[8 + header_len..];
        let total: usize = header.tensors.iter().map(|t| t.len).sum();
        if payload.len() != total * scalar_bytes {
            return Err(format_err(
                path,
                format!(
                    "payload length {} does not match declared {} scalars",
                    payload.len(),
                    total
                ),
            ));
        }

        // Cross-check against the architecture the config implies.
        let expected: BTreeMap<String, Vec<usize>> = tensor_specs(&header.config)
            .into_iter()
            .map(|(name, shape, _)| (name, shape))
            .collect();
        if expected.len() != header.tensors.len() {
            return Err(ModelError::Mismatch {
                expected: format!("{} tensors", expected.len()),
                found: format!("{} tensors", header.tensors.len()),
            });
        }

        let mut entries = BTreeMap::new();
        for t in &header.tensors {
            let expected_shape = expected.get(&t.name).ok_or_else(|| ModelError::Mismatch {
                expected: "a known tensor name".to_string(),
                found: t.name.clone(),
            })?;
            if expected_shape != &t.shape {
                return Err(ModelError::Mismatch {
                    expected: format!("{} shape {:?}", t.name, expected_shape),
                    found: format!("{} shape {:?}", t.name, t.shape),
                });
            }
            let numel: usize = t.shape.iter().product();
            if numel != t.len {
                return Err(format_err(path, format!("tensor {} length mismatch", t.name)));
            }
            let start = t.offset * scalar_bytes;
            let end = start + t.len * scalar_bytes;
            if end > payload.len() {
                return Err(format_err(path, "truncated payload"));
            }
            let mut data = Vec::with_capacity(t.len);
            for i in 0..t.len {
                let b = &payload[start + i * scalar_bytes..start + (i + 1) * scalar_bytes];
                let v = if scalar_bytes == 4 {
                    f32::from_le_bytes(b.try_into().unwrap()) as f64
                } else {
                    f64::from_le_bytes(b.try_into().unwrap())
                };
                data.push(R::from_f64(v));
            }
            entries.insert(
                t.name.clone(),
                TensorData {
                    shape: t.shape.clone(),
                    data,
                },
            );
        }
        Ok(ModelParams {
            config: header.config,
            entries,
        })
    }
}

/// Attention-mask shim so tests can build an unmasked pass directly.
pub fn unmasked(n: usize) -> AttentionMask {
    AttentionMask::unmasked(n)
}
