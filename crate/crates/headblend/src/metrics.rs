//! Image quality metrics: PSNR, SSIM, and mean absolute error.

use crate::mask::{BinaryMask, Image};

/// PSNR in dB over all channels, `10·log10(1/MSE)` for unit dynamic range,
/// capped at 100 dB (an exact match reports the cap).
pub fn psnr(a: &Image, b: &Image) -> f64 {
    assert_eq!((a.height, a.width), (b.height, b.width), "psnr resolution");
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        100.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(100.0)
    }
}

/// PSNR restricted to mask pixels (all three channels). An empty mask
/// reports the 100 dB cap.
pub fn masked_psnr(a: &Image, b: &Image, m: &BinaryMask) -> f64 {
    assert_eq!((a.height, a.width), (m.height, m.width), "masked_psnr resolution");
    let hw = a.height * a.width;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..hw {
        if m.data[i] == 1 {
            for c in 0..3 {
                let d = a.data[c * hw + i] - b.data[c * hw + i];
                sum += d * d;
            }
            count += 3;
        }
    }
    if count == 0 || sum == 0.0 {
        return 100.0;
    }
    (10.0 * (count as f64 / sum).log10()).min(100.0)
}

/// Mean absolute error over all channels.
pub fn l1(a: &Image, b: &Image) -> f64 {
    assert_eq!((a.height, a.width), (b.height, b.width), "l1 resolution");
    a.data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x - y).abs())
        .sum::<f64>()
        / a.data.len() as f64
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as i64;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for y in -half..=half {
        for x in -half..=half {
            w.push((-((x * x + y * y) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5), standard constants,
/// valid-region windows, averaged over the three channels.
pub fn ssim(a: &Image, b: &Image) -> f64 {
    assert_eq!((a.height, a.width), (b.height, b.width), "ssim resolution");
    let (h, w) = (a.height, a.width);
    assert!(
        h >= SSIM_WINDOW && w >= SSIM_WINDOW,
        "image smaller than the SSIM window"
    );
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0_f64).powi(2);
    let c2 = (SSIM_K2 * 1.0_f64).powi(2);
    let hw = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let pa = &a.data[c * hw..(c + 1) * hw];
        let pb = &b.data[c * hw..(c + 1) * hw];
        for y0 in 0..=(h - SSIM_WINDOW) {
            for x0 in 0..=(w - SSIM_WINDOW) {
                let (mut mu_a, mut mu_b) = (0.0, 0.0);
                let (mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0);
                let mut k = 0;
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let g = win[k];
                        k += 1;
                        let va = pa[(y0 + dy) * w + x0 + dx];
                        let vb = pb[(y0 + dy) * w + x0 + dx];
                        mu_a += g * va;
                        mu_b += g * vb;
                        aa += g * va * va;
                        bb += g * vb * vb;
                        ab += g * va * vb;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                total += s;
                count += 1;
            }
        }
    }
    total / count as f64
}

/// (PSNR dB, SSIM, L1) bundle, the per-pair evaluation unit.
pub fn metrics(y: &Image, gt: &Image) -> (f64, f64, f64) {
    (psnr(y, gt), ssim(y, gt), l1(y, gt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn rand_image(h: usize, w: usize, rng: &mut Rng) -> Image {
        Image {
            height: h,
            width: w,
            data: (0..3 * h * w).map(|_| rng.uniform()).collect(),
        }
    }

    #[test]
    fn identical_images() {
        let mut rng = Rng::new(1);
        let img = rand_image(16, 16, &mut rng);
        let (p, s, l) = metrics(&img, &img);
        assert_eq!(p, 100.0);
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(l, 0.0);
    }

    #[test]
    fn uniform_offset_psnr_is_20db() {
        let base = Image {
            height: 16,
            width: 16,
            data: vec![0.4; 3 * 256],
        };
        let off = Image {
            height: 16,
            width: 16,
            data: vec![0.5; 3 * 256],
        };
        assert!((psnr(&base, &off) - 20.0).abs() < 0.01);
    }

    #[test]
    fn ssim_symmetric() {
        let mut rng = Rng::new(2);
        let a = rand_image(16, 16, &mut rng);
        let b = rand_image(16, 16, &mut rng);
        assert!((ssim(&a, &b) - ssim(&b, &a)).abs() < 1e-12);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let mut rng = Rng::new(3);
        let base = rand_image(16, 16, &mut rng);
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.03, 0.06, 0.12, 0.2] {
            let mut noisy = base.clone();
            let mut nrng = Rng::new(4);
            for v in &mut noisy.data {
                *v = (*v + amp * (2.0 * nrng.uniform() - 1.0)).clamp(0.0, 1.0);
            }
            let p = psnr(&base, &noisy);
            assert!(p < last, "psnr {p} not below {last} at amp {amp}");
            last = p;
        }
    }

    #[test]
    fn masked_psnr_ignores_outside() {
        let mut rng = Rng::new(5);
        let a = rand_image(16, 16, &mut rng);
        let mut b = a.clone();
        // corrupt only the right half
        let hw = 256;
        for c in 0..3 {
            for y in 0..16 {
                for x in 8..16 {
                    b.data[c * hw + y * 16 + x] = rng.uniform();
                }
            }
        }
        let mut left = BinaryMask::zeros(16, 16);
        for y in 0..16 {
            for x in 0..8 {
                left.set(y, x, 1);
            }
        }
        assert_eq!(masked_psnr(&a, &b, &left), 100.0);
        assert!(masked_psnr(&a, &b, &BinaryMask::ones(16, 16)) < 100.0);
        assert_eq!(masked_psnr(&a, &b, &BinaryMask::zeros(16, 16)), 100.0);
    }
}
