//! Head-shape and long-hair mask augmentation.
//!
//! Self-supervised training uses the same image as source and target, so the
//! union mask would always equal the source head and the network would never
//! see an inpainting region. These transforms fabricate diverse union masks:
//! a sampled affine warp plus dilation of the head mask, and a probabilistic
//! union with a long-hair silhouette drawn from a bank.

use crate::mask::{inpaint_mask, union, BinaryMask, MaskError};
use crate::numerics::Rng;

/// Sampling ranges for the head-shape warp. All ranges are inclusive and
/// well-ordered; collapse every range to a point (and dilation to zero) to
/// get the exact identity transform.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadShapeParams {
    /// Rotation about the head-bbox center, degrees.
    pub rotation_deg: (f64, f64),
    /// Isotropic scale factor.
    pub scale: (f64, f64),
    /// Extra per-axis squeeze/expand factors.
    pub squeeze: (f64, f64),
    /// Translation as a fraction of the head bounding box.
    pub translate_frac: (f64, f64),
    /// Disk dilation radius in pixels, sampled uniformly over the integer range.
    pub dilation_radius: (u32, u32),
}

impl Default for HeadShapeParams {
    fn default() -> Self {
        HeadShapeParams {
            rotation_deg: (-10.0, 10.0),
            scale: (0.9, 1.2),
            squeeze: (0.8, 1.25),
            translate_frac: (-0.05, 0.05),
            dilation_radius: (0, 7),
        }
    }
}

impl HeadShapeParams {
    /// Degenerate ranges: the warp becomes the identity and dilation is zero.
    pub fn identity() -> Self {
        HeadShapeParams {
            rotation_deg: (0.0, 0.0),
            scale: (1.0, 1.0),
            squeeze: (1.0, 1.0),
            translate_frac: (0.0, 0.0),
            dilation_radius: (0, 0),
        }
    }
}

/// Long-hair silhouettes sampled during augmentation.
#[derive(Debug, Clone, Default)]
pub struct HairBank {
    pub entries: Vec<BinaryMask>,
}

impl HairBank {
    pub fn new(entries: Vec<BinaryMask>) -> Self {
        HairBank { entries }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Sampled affine warp (rotation, scale, squeeze, translation about the head
/// bbox center) followed by disk dilation with a sampled radius. Nearest
/// neighbor resampling keeps the mask strictly binary. A warp that pushes
/// the whole mask off-canvas is retried up to 8 times before falling back to
/// the unchanged source mask.
pub fn head_shape_augment(m_src: &BinaryMask, p: &HeadShapeParams, rng: &mut Rng) -> BinaryMask {
    let Some((y0, x0, y1, x1)) = m_src.bbox() else {
        return m_src.clone();
    };
    let cy = (y0 + y1) as f64 / 2.0;
    let cx = (x0 + x1) as f64 / 2.0;
    let bh = (y1 - y0 + 1) as f64;
    let bw = (x1 - x0 + 1) as f64;

    for _ in 0..8 {
        let theta = rng.uniform_in(p.rotation_deg.0, p.rotation_deg.1).to_radians();
        let s = rng.uniform_in(p.scale.0, p.scale.1);
        let sx = s * rng.uniform_in(p.squeeze.0, p.squeeze.1);
        let sy = s * rng.uniform_in(p.squeeze.0, p.squeeze.1);
        let tx = bw * rng.uniform_in(p.translate_frac.0, p.translate_frac.1);
        let ty = bh * rng.uniform_in(p.translate_frac.0, p.translate_frac.1);
        let radius = if p.dilation_radius.1 > p.dilation_radius.0 {
            p.dilation_radius.0
                + rng.index((p.dilation_radius.1 - p.dilation_radius.0 + 1) as usize) as u32
        } else {
            p.dilation_radius.0
        };

        let warped = warp_nearest(m_src, cy, cx, theta, sx, sy, ty, tx);
        if warped.is_empty() {
            continue;
        }
        return dilate_disk(&warped, radius);
    }
    m_src.clone()
}

/// Inverse-map nearest-neighbor affine warp of a binary mask. The forward
/// transform rotates and scales about (cy,cx) then translates by (ty,tx).
fn warp_nearest(
    m: &BinaryMask,
    cy: f64,
    cx: f64,
    theta: f64,
    sx: f64,
    sy: f64,
    ty: f64,
    tx: f64,
) -> BinaryMask {
    let mut out = BinaryMask::zeros(m.height, m.width);
    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    for oy in 0..m.height {
        for ox in 0..m.width {
            // Undo translation, rotation, then scale.
            let dy = oy as f64 - cy - ty;
            let dx = ox as f64 - cx - tx;
            let ry = -sin_t * dx + cos_t * dy;
            let rx = cos_t * dx + sin_t * dy;
            let iy = (ry / sy + cy).round();
            let ix = (rx / sx + cx).round();
            if iy >= 0.0 && ix >= 0.0 && (iy as usize) < m.height && (ix as usize) < m.width {
                out.set(oy, ox, m.at(iy as usize, ix as usize));
            }
        }
    }
    out
}

/// Morphological dilation with a Euclidean disk: every pixel within distance
/// `radius` of a foreground pixel becomes foreground.
pub fn dilate_disk(m: &BinaryMask, radius: u32) -> BinaryMask {
    if radius == 0 {
        return m.clone();
    }
    let r = radius as i64;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                offsets.push((dy, dx));
            }
        }
    }
    let mut out = BinaryMask::zeros(m.height, m.width);
    for y in 0..m.height {
        for x in 0..m.width {
            if m.at(y, x) == 1 {
                for &(dy, dx) in &offsets {
                    let ny = y as i64 + dy;
                    let nx = x as i64 + dx;
                    if ny >= 0 && nx >= 0 && (ny as usize) < m.height && (nx as usize) < m.width {
                        out.set(ny as usize, nx as usize, 1);
                    }
                }
            }
        }
    }
    out
}

/// With probability `1 - eps` union the mask with a hair silhouette sampled
/// uniformly from the bank (branch taken when the uniform draw p >= eps).
/// The silhouette is resized to the working resolution and aligned so its
/// bbox top edge and horizontal bbox center match the head mask's.
pub fn long_hair_augment(
    m_h1: &BinaryMask,
    bank: &HairBank,
    eps: f64,
    rng: &mut Rng,
) -> BinaryMask {
    let p = rng.uniform();
    if p < eps {
        return m_h1.clone();
    }
    if bank.is_empty() {
        eprintln!("warning: long-hair branch taken but the hair bank is empty; keeping mask unchanged");
        return m_h1.clone();
    }
    let entry = &bank.entries[rng.index(bank.entries.len())];
    let hair = entry.resize_nearest(m_h1.height, m_h1.width);
    let aligned = align_to_head(&hair, m_h1);
    union(&aligned, m_h1).expect("aligned hair mask has the working resolution")
}

/// Translate `hair` so its bbox top row and horizontal bbox center coincide
/// with the head mask's; pixels shifted off-canvas are dropped.
fn align_to_head(hair: &BinaryMask, head: &BinaryMask) -> BinaryMask {
    let (Some(hb), Some(db)) = (hair.bbox(), head.bbox()) else {
        return hair.clone();
    };
    let dy = db.0 as i64 - hb.0 as i64;
    let hair_cx = (hb.1 + hb.3) as i64 / 2;
    let head_cx = (db.1 + db.3) as i64 / 2;
    let dx = head_cx - hair_cx;
    let mut out = BinaryMask::zeros(hair.height, hair.width);
    for y in 0..hair.height {
        for x in 0..hair.width {
            if hair.at(y, x) == 1 {
                let ny = y as i64 + dy;
                let nx = x as i64 + dx;
                if ny >= 0 && nx >= 0 && (ny as usize) < hair.height && (nx as usize) < hair.width
                {
                    out.set(ny as usize, nx as usize, 1);
                }
            }
        }
    }
    out
}

/// Full augmentation: warp + optional hair union, then union with the source
/// mask (so the union always contains the source head) and the derived
/// inpainting mask.
pub fn h2_union(
    m_src: &BinaryMask,
    p: &HeadShapeParams,
    bank: &HairBank,
    eps: f64,
    rng: &mut Rng,
) -> Result<(BinaryMask, BinaryMask), MaskError> {
    let m_h1 = head_shape_augment(m_src, p, rng);
    let m_h2 = long_hair_augment(&m_h1, bank, eps, rng);
    let m_union = union(&m_h2, m_src)?;
    let m_ip = inpaint_mask(&m_union, m_src)?;
    Ok((m_union, m_ip))
}
