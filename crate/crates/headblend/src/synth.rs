//! Synthetic portrait corpus generator.
//!
//! Builds simple person-on-background images with matching parsing maps
//! (head ellipse, neck, body block) so the pipeline can be exercised end to
//! end without external data. Deterministic in the seed.

use std::path::Path;

use crate::io_png;
use crate::mask::{BinaryMask, Image};
use crate::numerics::Rng;
use crate::pipeline::{PipelineError, Sample, LABEL_BODY, LABEL_HEAD, LABEL_NECK};

/// One synthetic sample: smooth background, skin-toned head ellipse, neck
/// column, clothing block, with colors drawn from the seed.
pub fn synth_sample(resolution: usize, seed: u64, id: &str) -> Sample {
    let r = resolution as f64;
    let mut rng = Rng::new(seed);

    // portrait-crop geometry: the head fills a sizable part of the frame
    let head_cy = r * (0.32 + 0.06 * rng.uniform());
    let head_cx = r * (0.42 + 0.16 * rng.uniform());
    let head_ry = r * (0.19 + 0.06 * rng.uniform());
    let head_rx = r * (0.15 + 0.05 * rng.uniform());
    let neck_half_w = r * (0.07 + 0.03 * rng.uniform());
    let body_top = head_cy + head_ry * (1.15 + 0.2 * rng.uniform());
    let body_half_w = r * (0.28 + 0.1 * rng.uniform());

    // palette: skin-family head, dark-but-not-black hair, moderate clothing
    // and backgrounds (photographic mid-range rather than extremes)
    let skin = [
        0.65 + 0.25 * rng.uniform(),
        0.45 + 0.25 * rng.uniform(),
        0.35 + 0.2 * rng.uniform(),
    ];
    let hair = [
        0.2 + 0.3 * rng.uniform(),
        0.15 + 0.2 * rng.uniform(),
        0.1 + 0.15 * rng.uniform(),
    ];
    let cloth = [
        0.15 + 0.7 * rng.uniform(),
        0.15 + 0.7 * rng.uniform(),
        0.15 + 0.7 * rng.uniform(),
    ];
    let bg_a = [
        0.1 + 0.8 * rng.uniform(),
        0.1 + 0.8 * rng.uniform(),
        0.1 + 0.8 * rng.uniform(),
    ];
    let bg_b = [
        0.1 + 0.8 * rng.uniform(),
        0.1 + 0.8 * rng.uniform(),
        0.1 + 0.8 * rng.uniform(),
    ];

    let mut parsing = vec![0u8; resolution * resolution];
    let mut img = Image::zeros(resolution, resolution);
    let hw = resolution * resolution;

    // label and shaded color at a continuous point
    let shade_at = |yf: f64, xf: f64| -> (u8, [f64; 3]) {
        let dy = (yf - head_cy) / head_ry;
        let dx = (xf - head_cx) / head_rx;
        let in_head = dy * dy + dx * dx <= 1.0;
        let in_neck =
            !in_head && yf >= head_cy && yf < body_top && (xf - head_cx).abs() <= neck_half_w;
        let in_body =
            !in_head && !in_neck && yf >= body_top && (xf - head_cx).abs() <= body_half_w;
        let (label, base): (u8, [f64; 3]) = if in_head {
            // hair cap on the upper part of the ellipse
            if dy < -0.35 {
                (LABEL_HEAD, hair)
            } else {
                (LABEL_HEAD, skin)
            }
        } else if in_neck {
            (LABEL_NECK, skin)
        } else if in_body {
            (LABEL_BODY, cloth)
        } else {
            let t = (xf / r + yf / r) / 2.0;
            (
                0,
                [
                    bg_a[0] * (1.0 - t) + bg_b[0] * t,
                    bg_a[1] * (1.0 - t) + bg_b[1] * t,
                    bg_a[2] * (1.0 - t) + bg_b[2] * t,
                ],
            )
        };
        let shade = 0.92 + 0.08 * (yf / r);
        (
            label,
            [
                (base[0] * shade).clamp(0.0, 1.0),
                (base[1] * shade).clamp(0.0, 1.0),
                (base[2] * shade).clamp(0.0, 1.0),
            ],
        )
    };

    for y in 0..resolution {
        for x in 0..resolution {
            let i = y * resolution + x;
            let (label, _) = shade_at(y as f64, x as f64);
            parsing[i] = label;
            // 2x2 supersampling softens region edges the way camera optics
            // do; labels stay crisp at pixel centers
            let mut acc = [0.0f64; 3];
            for (oy, ox) in [(-0.25, -0.25), (-0.25, 0.25), (0.25, -0.25), (0.25, 0.25)] {
                let (_, col) = shade_at(y as f64 + oy, x as f64 + ox);
                for c in 0..3 {
                    acc[c] += col[c];
                }
            }
            for c in 0..3 {
                img.data[c * hw + i] = acc[c] / 4.0;
            }
        }
    }

    Sample::from_parts(
        id.to_string(),
        img,
        (resolution, resolution),
        parsing,
    )
    .expect("synthetic sample is well-formed")
}

/// Long-hair silhouette reaching from head height down over the shoulders.
pub fn synth_hair_mask(resolution: usize, seed: u64) -> BinaryMask {
    let r = resolution as f64;
    let mut rng = Rng::new(seed);
    let cy = r * (0.28 + 0.05 * rng.uniform());
    let cx = r * 0.5;
    let top_rx = r * (0.13 + 0.04 * rng.uniform());
    let length = r * (0.45 + 0.2 * rng.uniform());
    let flare = 1.3 + 0.6 * rng.uniform();
    let mut m = BinaryMask::zeros(resolution, resolution);
    for y in 0..resolution {
        for x in 0..resolution {
            let (yf, xf) = (y as f64, x as f64);
            if yf < cy - top_rx || yf > cy + length {
                continue;
            }
            let progress = ((yf - cy) / length).max(0.0);
            let half_w = top_rx * (1.0 + (flare - 1.0) * progress);
            if (xf - cx).abs() <= half_w {
                m.set(y, x, 1);
            }
        }
    }
    m
}

/// Write `count` synthetic samples under `<out>/<id>/{image,parsing}.png`
/// plus a small hair bank under `<out>/hair_bank/`.
pub fn write_corpus(
    out: &Path,
    count: usize,
    resolution: usize,
    seed: u64,
) -> Result<(), PipelineError> {
    let root = Rng::new(seed);
    for i in 0..count {
        let s = synth_sample(resolution, root.child_indexed("sample", i as u64).next_u64(), "");
        let dir = out.join(format!("{i:03}"));
        std::fs::create_dir_all(&dir).map_err(|source| PipelineError::FileIo {
            path: dir.display().to_string(),
            source,
        })?;
        io_png::write_rgb(&dir.join("image.png"), &s.image)?;
        io_png::write_labels(&dir.join("parsing.png"), resolution, resolution, &s.parsing)?;
    }
    let bank_dir = out.join("hair_bank");
    std::fs::create_dir_all(&bank_dir).map_err(|source| PipelineError::FileIo {
        path: bank_dir.display().to_string(),
        source,
    })?;
    for i in 0..3.min(count.max(1)) {
        let m = synth_hair_mask(resolution, root.child_indexed("hair", i as u64).next_u64());
        io_png::write_mask(&bank_dir.join(format!("hair_{i:02}.png")), &m)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_has_all_classes() {
        let s = synth_sample(32, 1, "a");
        assert!(!s.head.is_empty());
        assert!(!s.neck.is_empty());
        assert!(!s.body.is_empty());
        assert!(s.person.count_ones() > 0);
        // classes are disjoint by construction of the parsing map
        let overlap = crate::mask::intersect(&s.head, &s.body).unwrap();
        assert!(overlap.is_empty());
    }

    #[test]
    fn deterministic_in_seed() {
        let a = synth_sample(32, 7, "x");
        let b = synth_sample(32, 7, "x");
        assert_eq!(a.image, b.image);
        assert_eq!(a.parsing, b.parsing);
    }

    #[test]
    fn hair_mask_nonempty_and_binary() {
        let m = synth_hair_mask(32, 3);
        assert!(m.count_ones() > 10);
        assert!(m.data.iter().all(|&v| v <= 1));
    }
}
