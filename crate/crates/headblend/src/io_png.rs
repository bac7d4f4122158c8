//! PNG interchange for images, masks, and label rasters.
//!
//! Images are 8-bit RGB, converted to and from `[0,1]` by `/255` and
//! `round(v*255)`. Masks are single-channel PNGs with the strict mapping
//! 0 ↔ 0 and 255 ↔ 1 — anything else is rejected. Parsing maps are
//! single-channel label rasters with small class ids.

use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};
use thiserror::Error;

use crate::mask::{BinaryMask, Image};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Image {
        path: String,
        source: image::ImageError,
    },
    #[error("{path}: io error: {source}")]
    File {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: mask pixel value {value} is neither 0 nor 255")]
    BadMaskValue { path: String, value: u8 },
    #[error("{path}: parsing label {value} exceeds maximum class id {max}")]
    BadLabel { path: String, value: u8, max: u8 },
}

fn ctx(path: &Path) -> String {
    path.display().to_string()
}

pub fn read_rgb(path: &Path) -> Result<Image, IoError> {
    let img = ImageReader::open(path)
        .map_err(|source| IoError::File {
            path: ctx(path),
            source,
        })?
        .decode()
        .map_err(|source| IoError::Image {
            path: ctx(path),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let hw = h * w;
    let mut data = vec![0.0; 3 * hw];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * hw + i] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(Image {
        height: h,
        width: w,
        data,
    })
}

pub fn write_rgb(path: &Path, img: &Image) -> Result<(), IoError> {
    let (h, w) = (img.height, img.width);
    let hw = h * w;
    let mut out = RgbImage::new(w as u32, h as u32);
    for (i, px) in out.pixels_mut().enumerate() {
        for c in 0..3 {
            px.0[c] = (img.data[c * hw + i] * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    out.save(path).map_err(|source| IoError::Image {
        path: ctx(path),
        source,
    })
}

pub fn read_mask(path: &Path) -> Result<BinaryMask, IoError> {
    let img = decode_gray(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Vec::with_capacity(h * w);
    for px in img.pixels() {
        match px.0[0] {
            0 => data.push(0u8),
            255 => data.push(1u8),
            value => {
                return Err(IoError::BadMaskValue {
                    path: ctx(path),
                    value,
                })
            }
        }
    }
    Ok(BinaryMask {
        height: h,
        width: w,
        data,
    })
}

pub fn write_mask(path: &Path, m: &BinaryMask) -> Result<(), IoError> {
    let mut img = GrayImage::new(m.width as u32, m.height as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        px.0[0] = if m.data[i] == 1 { 255 } else { 0 };
    }
    img.save(path).map_err(|source| IoError::Image {
        path: ctx(path),
        source,
    })
}

/// Label raster with class ids `0..=max_label`, one byte per pixel.
pub fn read_labels(path: &Path, max_label: u8) -> Result<(usize, usize, Vec<u8>), IoError> {
    let img = decode_gray(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Vec::with_capacity(h * w);
    for px in img.pixels() {
        let v = px.0[0];
        if v > max_label {
            return Err(IoError::BadLabel {
                path: ctx(path),
                value: v,
                max: max_label,
            });
        }
        data.push(v);
    }
    Ok((h, w, data))
}

pub fn write_labels(path: &Path, h: usize, w: usize, labels: &[u8]) -> Result<(), IoError> {
    let mut img = GrayImage::new(w as u32, h as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        px.0[0] = labels[i];
    }
    img.save(path).map_err(|source| IoError::Image {
        path: ctx(path),
        source,
    })
}

/// Grayscale heatmap in `[0,1]` written as an 8-bit PNG (attention maps,
/// soft foreground maps).
pub fn write_heatmap(path: &Path, h: usize, w: usize, values: &[f64]) -> Result<(), IoError> {
    let mut img = GrayImage::new(w as u32, h as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        px.0[0] = (values[i] * 255.0).round().clamp(0.0, 255.0) as u8;
    }
    img.save(path).map_err(|source| IoError::Image {
        path: ctx(path),
        source,
    })
}

fn decode_gray(path: &Path) -> Result<GrayImage, IoError> {
    Ok(ImageReader::open(path)
        .map_err(|source| IoError::File {
            path: ctx(path),
            source,
        })?
        .decode()
        .map_err(|source| IoError::Image {
            path: ctx(path),
            source,
        })?
        .to_luma8())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn rgb_round_trip_is_exact_on_8bit_grid() {
        let dir = std::env::temp_dir().join("headblend_io_test_rgb");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("img.png");
        let mut rng = Rng::new(1);
        // Values on the 8-bit grid survive the round trip bit-exactly.
        let data: Vec<f64> = (0..3 * 16 * 16)
            .map(|_| (rng.index(256) as f64) / 255.0)
            .collect();
        let img = Image {
            height: 16,
            width: 16,
            data,
        };
        write_rgb(&path, &img).unwrap();
        let back = read_rgb(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn mask_round_trip_and_strictness() {
        let dir = std::env::temp_dir().join("headblend_io_test_mask");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.png");
        let mut rng = Rng::new(2);
        let data: Vec<u8> = (0..64).map(|_| (rng.uniform() < 0.5) as u8).collect();
        let m = BinaryMask::new(8, 8, data).unwrap();
        write_mask(&path, &m).unwrap();
        assert_eq!(read_mask(&path).unwrap(), m);

        // A gray pixel is rejected.
        let bad = dir.join("bad.png");
        let mut g = GrayImage::new(2, 2);
        g.put_pixel(0, 0, image::Luma([7]));
        g.save(&bad).unwrap();
        assert!(matches!(
            read_mask(&bad),
            Err(IoError::BadMaskValue { value: 7, .. })
        ));
    }

    #[test]
    fn labels_validate_range() {
        let dir = std::env::temp_dir().join("headblend_io_test_labels");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("p.png");
        write_labels(&path, 2, 2, &[0, 1, 2, 3]).unwrap();
        let (h, w, labels) = read_labels(&path, 3).unwrap();
        assert_eq!((h, w), (2, 2));
        assert_eq!(labels, vec![0, 1, 2, 3]);
        assert!(read_labels(&path, 2).is_err());
    }
}
