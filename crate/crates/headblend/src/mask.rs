//! Binary-mask algebra and chroma-key compositing.
//!
//! Images are planar RGB rasters with values in `[0,1]`; masks are strictly
//! `{0,1}` byte rasters so every mask law is bit-testable. The compositing
//! operations here build the network input (gray source head over a
//! green-keyed target, with a pure-green inpainting region) and paste the
//! generated region back into the target.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("resolution mismatch in {op}: {a_h}x{a_w} vs {b_h}x{b_w}")]
    ResolutionMismatch {
        op: &'static str,
        a_h: usize,
        a_w: usize,
        b_h: usize,
        b_w: usize,
    },
    #[error("inconsistent masks: composited input exceeds 1 at pixel ({x},{y}) channel {c} (value {v})")]
    OverlappingSupports { x: usize, y: usize, c: usize, v: f64 },
    #[error("image value {v} outside [0,1]")]
    ValueOutOfRange { v: f64 },
    #[error("mask value {v} is not 0 or 1")]
    NotBinary { v: u8 },
}

/// RGB raster, planar layout: `data[c*h*w + y*w + x]`, values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, MaskError> {
        assert_eq!(data.len(), 3 * height * width, "image data length");
        for &v in &data {
            if !(0.0..=1.0).contains(&v) {
                return Err(MaskError::ValueOutOfRange { v });
            }
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[c * self.height * self.width + y * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[c * self.height * self.width + y * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    /// Bilinear resize (used when corpus images do not match the working
    /// resolution). Sampling at pixel centers keeps the result in `[0,1]`.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Image {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let mut out = Image::zeros(height, width);
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        for c in 0..3 {
            for y in 0..height {
                let fy = ((y as f64 + 0.5) * sy - 0.5).max(0.0);
                let y0 = (fy as usize).min(self.height - 1);
                let y1 = (y0 + 1).min(self.height - 1);
                let wy = fy - y0 as f64;
                for x in 0..width {
                    let fx = ((x as f64 + 0.5) * sx - 0.5).max(0.0);
                    let x0 = (fx as usize).min(self.width - 1);
                    let x1 = (x0 + 1).min(self.width - 1);
                    let wx = fx - x0 as f64;
                    let v = self.at(c, y0, x0) * (1.0 - wy) * (1.0 - wx)
                        + self.at(c, y0, x1) * (1.0 - wy) * wx
                        + self.at(c, y1, x0) * wy * (1.0 - wx)
                        + self.at(c, y1, x1) * wy * wx;
                    *out.at_mut(c, y, x) = v;
                }
            }
        }
        out
    }
}

/// Strictly binary raster: `data[y*w + x] ∈ {0,1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, MaskError> {
        assert_eq!(data.len(), height * width, "mask data length");
        for &v in &data {
            if v > 1 {
                return Err(MaskError::NotBinary { v });
            }
        }
        Ok(BinaryMask {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Tight bounding box of set pixels as (y0, x0, y1, x1) inclusive,
    /// or None when empty.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.at(y, x) == 1 {
                    any = true;
                    y0 = y0.min(y);
                    x0 = x0.min(x);
                    y1 = y1.max(y);
                    x1 = x1.max(x);
                }
            }
        }
        any.then_some((y0, x0, y1, x1))
    }

    /// Nearest-neighbor resize to a new resolution; output stays binary.
    pub fn resize_nearest(&self, height: usize, width: usize) -> BinaryMask {
        let mut out = BinaryMask::zeros(height, width);
        for y in 0..height {
            let sy = (y * self.height) / height;
            for x in 0..width {
                let sx = (x * self.width) / width;
                out.set(y, x, self.at(sy, sx));
            }
        }
        out
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    /// Downsample by an integer factor: each output pixel is 1 iff the mean
    /// coverage of its factor×factor block is at least 0.5.
    pub fn downsample_area_threshold(&self, factor: usize) -> BinaryMask {
        assert!(
            factor > 0 && self.height % factor == 0 && self.width % factor == 0,
            "downsample factor must divide the resolution"
        );
        let (nh, nw) = (self.height / factor, self.width / factor);
        let mut out = BinaryMask::zeros(nh, nw);
        let half = (factor * factor) as f64 / 2.0;
        for y in 0..nh {
            for x in 0..nw {
                let mut count = 0usize;
                for dy in 0..factor {
                    for dx in 0..factor {
                        count += self.at(y * factor + dy, x * factor + dx) as usize;
                    }
                }
                out.set(y, x, (count as f64 >= half) as u8);
            }
        }
        out
    }
}

/// Key color painted over backgrounds and inpainting regions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChromaColor(pub [f64; 3]);

impl Default for ChromaColor {
    fn default() -> Self {
        ChromaColor([0.0, 1.0, 0.0])
    }
}

fn check_res(
    op: &'static str,
    (a_h, a_w): (usize, usize),
    (b_h, b_w): (usize, usize),
) -> Result<(), MaskError> {
    if (a_h, a_w) != (b_h, b_w) {
        return Err(MaskError::ResolutionMismatch {
            op,
            a_h,
            a_w,
            b_h,
            b_w,
        });
    }
    Ok(())
}

/// Pixelwise logical OR.
pub fn union(a: &BinaryMask, b: &BinaryMask) -> Result<BinaryMask, MaskError> {
    check_res("union", (a.height, a.width), (b.height, b.width))?;
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| x | y)
        .collect();
    Ok(BinaryMask {
        height: a.height,
        width: a.width,
        data,
    })
}

/// Pixelwise AND (used by tests and disjointness checks).
pub fn intersect(a: &BinaryMask, b: &BinaryMask) -> Result<BinaryMask, MaskError> {
    check_res("intersect", (a.height, a.width), (b.height, b.width))?;
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| x & y)
        .collect();
    Ok(BinaryMask {
        height: a.height,
        width: a.width,
        data,
    })
}

/// Inpainting region: union minus source, with negatives clamped to zero
/// (augmented masks may shrink below the source head). The result is always
/// disjoint from `m_src`.
pub fn inpaint_mask(m_union: &BinaryMask, m_src: &BinaryMask) -> Result<BinaryMask, MaskError> {
    check_res(
        "inpaint_mask",
        (m_union.height, m_union.width),
        (m_src.height, m_src.width),
    )?;
    let data = m_union
        .data
        .iter()
        .zip(&m_src.data)
        .map(|(&u, &s)| u.saturating_sub(s))
        .collect();
    Ok(BinaryMask {
        height: m_union.height,
        width: m_union.width,
        data,
    })
}

/// Channelwise product with the broadcast mask.
pub fn apply_mask(img: &Image, m: &BinaryMask) -> Result<Image, MaskError> {
    check_res("apply_mask", (img.height, img.width), (m.height, m.width))?;
    let mut out = img.clone();
    let hw = img.height * img.width;
    for c in 0..3 {
        for i in 0..hw {
            if m.data[i] == 0 {
                out.data[c * hw + i] = 0.0;
            }
        }
    }
    Ok(out)
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Gray-scale the masked region with BT.601 luminance weights, replicated to
/// three equal channels; zero outside the mask.
pub fn grayscale(img: &Image, m: &BinaryMask) -> Result<Image, MaskError> {
    check_res("grayscale", (img.height, img.width), (m.height, m.width))?;
    let hw = img.height * img.width;
    let mut out = Image::zeros(img.height, img.width);
    for i in 0..hw {
        if m.data[i] == 1 {
            let y = LUMA[0] * img.data[i] + LUMA[1] * img.data[hw + i] + LUMA[2] * img.data[2 * hw + i];
            out.data[i] = y;
            out.data[hw + i] = y;
            out.data[2 * hw + i] = y;
        }
    }
    Ok(out)
}

/// Foreground pixels unchanged; background painted exactly `c`.
pub fn paint_background(
    img: &Image,
    fg: &BinaryMask,
    c: ChromaColor,
) -> Result<Image, MaskError> {
    check_res(
        "paint_background",
        (img.height, img.width),
        (fg.height, fg.width),
    )?;
    let hw = img.height * img.width;
    let mut out = img.clone();
    for i in 0..hw {
        if fg.data[i] == 0 {
            out.data[i] = c.0[0];
            out.data[hw + i] = c.0[1];
            out.data[2 * hw + i] = c.0[2];
        }
    }
    Ok(out)
}

/// Network input: gray source head, green-keyed target outside the union
/// mask, pure chroma color on the inpainting region. The three supports must
/// partition the canvas; overlapping supports that push a value above 1 are
/// rejected as inconsistent masks.
pub fn build_input(
    i_s_gray: &Image,
    i_t_green: &Image,
    m_union: &BinaryMask,
    m_ip: &BinaryMask,
    c: ChromaColor,
) -> Result<Image, MaskError> {
    check_res(
        "build_input",
        (i_s_gray.height, i_s_gray.width),
        (i_t_green.height, i_t_green.width),
    )?;
    check_res(
        "build_input",
        (i_s_gray.height, i_s_gray.width),
        (m_union.height, m_union.width),
    )?;
    check_res(
        "build_input",
        (i_s_gray.height, i_s_gray.width),
        (m_ip.height, m_ip.width),
    )?;
    let (h, w) = (i_s_gray.height, i_s_gray.width);
    let hw = h * w;
    let mut out = Image::zeros(h, w);
    for ch in 0..3 {
        for i in 0..hw {
            let mut v = i_s_gray.data[ch * hw + i];
            if m_union.data[i] == 0 {
                v += i_t_green.data[ch * hw + i];
            }
            if m_ip.data[i] == 1 {
                v += c.0[ch];
            }
            if v > 1.0 {
                return Err(MaskError::OverlappingSupports {
                    x: i % w,
                    y: i / w,
                    c: ch,
                    v,
                });
            }
            out.data[ch * hw + i] = v;
        }
    }
    Ok(out)
}

/// Final output: generated pixels inside the union mask, target pixels
/// bit-exactly outside it.
pub fn composite_output(
    y_hat: &Image,
    i_t: &Image,
    m_union: &BinaryMask,
) -> Result<Image, MaskError> {
    check_res(
        "composite_output",
        (y_hat.height, y_hat.width),
        (i_t.height, i_t.width),
    )?;
    check_res(
        "composite_output",
        (y_hat.height, y_hat.width),
        (m_union.height, m_union.width),
    )?;
    let hw = y_hat.height * y_hat.width;
    let mut out = i_t.clone();
    for c in 0..3 {
        for i in 0..hw {
            if m_union.data[i] == 1 {
                out.data[c * hw + i] = y_hat.data[c * hw + i];
            }
        }
    }
    Ok(out)
}


#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = BinaryMask> {
        proptest::collection::vec(0u8..=1, h * w)
            .prop_map(move |data| BinaryMask::new(h, w, data).unwrap())
    }

    proptest! {
        #[test]
        fn union_commutative(a in mask_strategy(8, 8), b in mask_strategy(8, 8)) {
            prop_assert_eq!(union(&a, &b).unwrap(), union(&b, &a).unwrap());
        }

        #[test]
        fn union_associative(
            a in mask_strategy(8, 8),
            b in mask_strategy(8, 8),
            c in mask_strategy(8, 8),
        ) {
            let left = union(&union(&a, &b).unwrap(), &c).unwrap();
            let right = union(&a, &union(&b, &c).unwrap()).unwrap();
            prop_assert_eq!(left, right);
        }

        #[test]
        fn inpaint_recovers_union_when_contained(
            s in mask_strategy(8, 8),
            extra in mask_strategy(8, 8),
        ) {
            let u = union(&s, &extra).unwrap();
            let ip = inpaint_mask(&u, &s).unwrap();
            prop_assert!(intersect(&ip, &s).unwrap().is_empty());
            prop_assert_eq!(union(&ip, &s).unwrap(), u);
        }
    }
}
