//! Training objectives: masked reconstruction, ToRGB reconstruction, mask
//! supervision, perceptual distance, and the adversarial pair, combined into
//! one weighted total. All L1 terms are means over every element so the
//! weights stay comparable across resolutions.

use std::sync::Arc;

use crate::mask::{apply_mask, BinaryMask, Image, MaskError};
use crate::model::image_to_leaf;
use crate::numerics::{NumericsError, Real, Rng, Tape, TensorData, Vid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub rec: f64,
    pub hc: f64,
    pub mask: f64,
    pub per: f64,
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rec: 10.0,
            hc: 10.0,
            mask: 10.0,
            per: 1.0,
            adv: 1.0,
        }
    }
}

/// Scalar values of each loss plus the weighted total, extracted per step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub rec: f64,
    pub hc: f64,
    pub mask: f64,
    pub per: f64,
    /// Generator-side adversarial term (unbounded below).
    pub adv: f64,
    pub total: f64,
}

/// Masked L1: mean |y ⊗ m − target ⊗ m| over all H·W·3 elements. The mask
/// gates both sides; pixels outside it contribute zero.
pub fn loss_rec<R: Real>(
    tape: &mut Tape<R>,
    y: Vid,
    target: &Image,
    m_src: &BinaryMask,
) -> Result<Vid, LossError> {
    let masked_target = apply_mask(target, m_src)?;
    let hw = target.height * target.width;
    let mut mask3 = Vec::with_capacity(3 * hw);
    for _ in 0..3 {
        mask3.extend(m_src.data.iter().map(|&v| R::from_f64(v as f64)));
    }
    let y_masked = tape.mul_const(y, Arc::new(mask3))?;
    let neg_t: Vec<R> = masked_target
        .data
        .iter()
        .map(|&v| R::from_f64(-v))
        .collect();
    let diff = tape.add_const(y_masked, &neg_t)?;
    let a = tape.abs(diff);
    Ok(tape.mean(a))
}

/// Plain L1 between an on-tape image and a constant image.
pub fn loss_l1_to_const<R: Real>(
    tape: &mut Tape<R>,
    x: Vid,
    target: &[f64],
) -> Result<Vid, NumericsError> {
    let neg_t: Vec<R> = target.iter().map(|&v| R::from_f64(-v)).collect();
    let diff = tape.add_const(x, &neg_t)?;
    let a = tape.abs(diff);
    Ok(tape.mean(a))
}

/// ToRGB reconstruction: mean |to_rgb − I_T^hc|.
pub fn loss_hc<R: Real>(tape: &mut Tape<R>, to_rgb: Vid, i_t_hc: &Image) -> Result<Vid, LossError> {
    Ok(loss_l1_to_const(tape, to_rgb, &i_t_hc.data)?)
}

/// Mask supervision on the soft map: mean |M_gt − M_soft| at feature
/// resolution. Gradient flows into the soft map.
pub fn loss_mask<R: Real>(
    tape: &mut Tape<R>,
    soft_map: Vid,
    m_gt: &BinaryMask,
) -> Result<Vid, LossError> {
    let target: Vec<f64> = m_gt.data.iter().map(|&v| v as f64).collect();
    Ok(loss_l1_to_const(tape, soft_map, &target)?)
}

/// Frozen random conv stack standing in for a pretrained feature extractor.
/// Deterministic in the seed; three 3x3 conv layers with SiLU, strides
/// 1, 2, 2.
#[derive(Debug, Clone)]
pub struct PerceptualExtractor<R: Real> {
    pub seed: u64,
    layers: Vec<(TensorData<R>, TensorData<R>, usize)>,
}

impl<R: Real> PerceptualExtractor<R> {
    pub fn from_seed(seed: u64) -> Self {
        let root = Rng::new(seed);
        let dims = [(3usize, 8usize, 1usize), (8, 8, 2), (8, 8, 2)];
        let layers = dims
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, stride))| {
                let mut rng = root.child(&format!("per.{i}"));
                let scale = (2.0 / (9.0 * cin as f64)).sqrt();
                (
                    TensorData::rand_uniform(&[9 * cin, cout], scale, &mut rng),
                    TensorData::rand_uniform(&[cout], 0.05, &mut rng),
                    stride,
                )
            })
            .collect();
        PerceptualExtractor { seed, layers }
    }

    /// Layer activations for an on-tape image.
    pub fn features(&self, tape: &mut Tape<R>, img: Vid) -> Result<Vec<Vid>, NumericsError> {
        let mut feats = Vec::new();
        let mut h = img;
        for (w, b, stride) in &self.layers {
            let wv = tape.leaf(w.clone());
            let bv = tape.leaf(b.clone());
            h = crate::nn::conv2d(tape, h, wv, bv, 3, *stride, 1)?;
            h = tape.silu(h);
            feats.push(h);
        }
        Ok(feats)
    }
}

/// Sum over layers of mean absolute feature differences between the on-tape
/// image and a constant reference image.
pub fn loss_perceptual<R: Real>(
    tape: &mut Tape<R>,
    y: Vid,
    reference: &Image,
    extractor: &PerceptualExtractor<R>,
) -> Result<Vid, LossError> {
    let ref_leaf = image_to_leaf(tape, reference);
    let y_feats = extractor.features(tape, y)?;
    let r_feats = extractor.features(tape, ref_leaf)?;
    let mut total: Option<Vid> = None;
    for (yf, rf) in y_feats.into_iter().zip(r_feats) {
        let diff = tape.sub(yf, rf)?;
        let a = tape.abs(diff);
        let m = tape.mean(a);
        total = Some(match total {
            None => m,
            Some(t) => tape.add(t, m)?,
        });
    }
    Ok(total.expect("extractor has at least one layer"))
}

/// Log inputs are clamped to [1e-7, 1 - 1e-7] before the adversarial logs.
pub const ADV_CLAMP: f64 = 1e-7;

/// Non-saturating discriminator loss and the generator score term:
/// d_loss = −log D(real) − log(1 − D(fake)); g_loss = −D(fake).
pub fn loss_adversarial<R: Real>(
    tape: &mut Tape<R>,
    d_real: Vid,
    d_fake: Vid,
) -> Result<(Vid, Vid), LossError> {
    let lo = R::from_f64(ADV_CLAMP);
    let hi = R::from_f64(1.0 - ADV_CLAMP);
    let r_c = tape.clamp(d_real, lo, hi);
    let ln_r = tape.ln(r_c);
    let neg_fake = tape.scale(d_fake, -R::ONE);
    let one_minus = tape.add_const(neg_fake, &[R::ONE])?;
    let f_c = tape.clamp(one_minus, lo, hi);
    let ln_f = tape.ln(f_c);
    let s = tape.add(ln_r, ln_f)?;
    let d_loss = tape.scale(s, -R::ONE);
    let g_loss = tape.scale(d_fake, -R::ONE);
    Ok((d_loss, g_loss))
}

/// Ids of the individual generator-side loss terms on one tape.
#[derive(Debug, Clone, Copy)]
pub struct LossIds {
    pub rec: Vid,
    pub hc: Vid,
    pub mask: Vid,
    pub per: Vid,
    pub adv: Vid,
    pub total: Vid,
}

/// Weighted total in a fixed left-fold order:
/// ((((λ_rec·rec + λ_hc·hc) + λ_mask·mask) + λ_per·per) + λ_adv·adv).
pub fn loss_total<R: Real>(
    tape: &mut Tape<R>,
    rec: Vid,
    hc: Vid,
    mask: Vid,
    per: Vid,
    adv: Vid,
    w: &LossWeights,
) -> Result<LossIds, LossError> {
    let s_rec = tape.scale(rec, R::from_f64(w.rec));
    let s_hc = tape.scale(hc, R::from_f64(w.hc));
    let s_mask = tape.scale(mask, R::from_f64(w.mask));
    let s_per = tape.scale(per, R::from_f64(w.per));
    let s_adv = tape.scale(adv, R::from_f64(w.adv));
    let mut total = tape.add(s_rec, s_hc)?;
    total = tape.add(total, s_mask)?;
    total = tape.add(total, s_per)?;
    total = tape.add(total, s_adv)?;
    Ok(LossIds {
        rec,
        hc,
        mask,
        per,
        adv,
        total,
    })
}

impl LossReport {
    pub fn from_tape<R: Real>(tape: &Tape<R>, ids: &LossIds) -> Self {
        LossReport {
            rec: tape.scalar(ids.rec).to_f64(),
            hc: tape.scalar(ids.hc).to_f64(),
            mask: tape.scalar(ids.mask).to_f64(),
            per: tape.scalar(ids.per).to_f64(),
            adv: tape.scalar(ids.adv).to_f64(),
            total: tape.scalar(ids.total).to_f64(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, max_rel_err};

    fn image_from(h: usize, w: usize, f: impl Fn(usize) -> f64) -> Image {
        Image {
            height: h,
            width: w,
            data: (0..3 * h * w).map(f).collect(),
        }
    }

    fn rand_image(h: usize, w: usize, rng: &mut Rng) -> Image {
        Image {
            height: h,
            width: w,
            data: (0..3 * h * w).map(|_| rng.uniform()).collect(),
        }
    }

    #[test]
    fn rec_zero_for_identical_and_empty_mask() {
        let mut rng = Rng::new(1);
        let img = rand_image(8, 8, &mut rng);
        let mask = BinaryMask::ones(8, 8);
        let mut t = Tape::<f64>::new();
        let y = image_to_leaf(&mut t, &img);
        let l = loss_rec(&mut t, y, &img, &mask).unwrap();
        assert_eq!(t.scalar(l), 0.0);

        let other = rand_image(8, 8, &mut rng);
        let empty = BinaryMask::zeros(8, 8);
        let y = image_to_leaf(&mut t, &other);
        let l = loss_rec(&mut t, y, &img, &empty).unwrap();
        assert_eq!(t.scalar(l), 0.0);
    }

    #[test]
    fn rec_closed_form_quarter_mask() {
        // y = target + 0.1 inside a mask covering 25% of pixels: mean over
        // all elements is 0.1 * 0.25.
        let (h, w) = (8, 8);
        let target = image_from(h, w, |_| 0.3);
        let mut mask = BinaryMask::zeros(h, w);
        for y in 0..4 {
            for x in 0..4 {
                mask.set(y, x, 1);
            }
        }
        assert_eq!(mask.count_ones() * 4, h * w);
        let mut y_img = target.clone();
        for c in 0..3 {
            for yy in 0..4 {
                for xx in 0..4 {
                    *y_img.at_mut(c, yy, xx) += 0.1;
                }
            }
        }
        let mut t = Tape::<f64>::new();
        let y = image_to_leaf(&mut t, &y_img);
        let l = loss_rec(&mut t, y, &target, &mask).unwrap();
        assert!((t.scalar(l) - 0.025).abs() < 1e-12);
    }

    #[test]
    fn hc_offset_and_symmetry() {
        let a = image_from(4, 4, |_| 0.5);
        let b = image_from(4, 4, |_| 0.7);
        let mut t = Tape::<f64>::new();
        let av = image_to_leaf(&mut t, &a);
        let bv = image_to_leaf(&mut t, &b);
        let l_ab = loss_hc(&mut t, av, &b).unwrap();
        let l_ba = loss_hc(&mut t, bv, &a).unwrap();
        assert!((t.scalar(l_ab) - 0.2).abs() < 1e-12);
        assert_eq!(t.scalar(l_ab), t.scalar(l_ba));
        let l_aa = loss_hc(&mut t, av, &a).unwrap();
        assert_eq!(t.scalar(l_aa), 0.0);
    }

    #[test]
    fn mask_loss_values_and_descent() {
        let mut m_gt = BinaryMask::zeros(4, 4);
        for i in 0..8 {
            m_gt.data[i] = 1;
        }
        // soft map == gt -> 0
        let gt_soft: Vec<f64> = m_gt.data.iter().map(|&v| v as f64).collect();
        let mut t = Tape::<f64>::new();
        let s = t.leaf_from(&[1, 4, 4], gt_soft).unwrap();
        let l = loss_mask(&mut t, s, &m_gt).unwrap();
        assert_eq!(t.scalar(l), 0.0);

        // constant 0.5 soft map -> 0.5
        let mut t = Tape::<f64>::new();
        let s = t.leaf_from(&[1, 4, 4], vec![0.5; 16]).unwrap();
        let l = loss_mask(&mut t, s, &m_gt).unwrap();
        assert_eq!(t.scalar(l), 0.5);

        // ten steps of gradient descent strictly decrease the loss
        let mut soft = vec![0.5; 16];
        let mut last = f64::INFINITY;
        for _ in 0..10 {
            let mut t = Tape::<f64>::new();
            let s = t.leaf_from(&[1, 4, 4], soft.clone()).unwrap();
            let l = loss_mask(&mut t, s, &m_gt).unwrap();
            let value = t.scalar(l);
            assert!(value < last, "not strictly decreasing: {value} vs {last}");
            last = value;
            t.backward(l).unwrap();
            let g = t.grad(s).unwrap();
            for (x, gi) in soft.iter_mut().zip(g) {
                *x -= 0.01 * gi;
            }
        }
    }

    #[test]
    fn perceptual_zero_nonneg_and_layer_order() {
        let mut rng = Rng::new(2);
        let img = rand_image(8, 8, &mut rng);
        let ex = PerceptualExtractor::<f64>::from_seed(7777);
        let mut t = Tape::new();
        let y = image_to_leaf(&mut t, &img);
        let l = loss_perceptual(&mut t, y, &img, &ex).unwrap();
        assert_eq!(t.scalar(l), 0.0);

        let other = rand_image(8, 8, &mut rng);
        let y2 = image_to_leaf(&mut t, &other);
        let l2 = loss_perceptual(&mut t, y2, &img, &ex).unwrap();
        assert!(t.scalar(l2) >= 0.0);

        // Permuting layer order leaves the sum unchanged: compute per-layer
        // terms and sum in reverse.
        let mut t2 = Tape::<f64>::new();
        let y3 = image_to_leaf(&mut t2, &other);
        let ref_leaf = image_to_leaf(&mut t2, &img);
        let yf = ex.features(&mut t2, y3).unwrap();
        let rf = ex.features(&mut t2, ref_leaf).unwrap();
        let mut terms = Vec::new();
        for (a, b) in yf.into_iter().zip(rf) {
            let d = t2.sub(a, b).unwrap();
            let ab = t2.abs(d);
            terms.push(t2.mean(ab));
        }
        let fwd: f64 = terms.iter().map(|&v| t2.scalar(v)).sum();
        let rev: f64 = terms.iter().rev().map(|&v| t2.scalar(v)).sum();
        assert!((fwd - rev).abs() < 1e-15);
        assert!((fwd - t.scalar(l2)).abs() < 1e-12);
    }

    #[test]
    fn adversarial_closed_forms() {
        let mut t = Tape::<f64>::new();
        let perfect_r = t.leaf_from(&[1], vec![1.0 - 1e-7]).unwrap();
        let perfect_f = t.leaf_from(&[1], vec![1e-7]).unwrap();
        let (d_loss, _) = loss_adversarial(&mut t, perfect_r, perfect_f).unwrap();
        assert!(t.scalar(d_loss).abs() < 1e-6);

        let half_r = t.leaf_from(&[1], vec![0.5]).unwrap();
        let half_f = t.leaf_from(&[1], vec![0.5]).unwrap();
        let (d_loss, g_loss) = loss_adversarial(&mut t, half_r, half_f).unwrap();
        assert!((t.scalar(d_loss) - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(t.scalar(g_loss), -0.5);

        // g_loss monotone decreasing in d_fake
        let mut prev = f64::INFINITY;
        for v in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let f = t.leaf_from(&[1], vec![v]).unwrap();
            let r = t.leaf_from(&[1], vec![0.5]).unwrap();
            let (_, g) = loss_adversarial(&mut t, r, f).unwrap();
            assert!(t.scalar(g) < prev);
            prev = t.scalar(g);
        }
    }

    #[test]
    fn total_linearity_and_defaults() {
        let mk = |t: &mut Tape<f64>, v: f64| t.leaf_from(&[1], vec![v]).unwrap();
        let w = LossWeights::default();
        let mut t = Tape::new();
        let zero = mk(&mut t, 0.0);
        let ids = loss_total(&mut t, zero, zero, zero, zero, zero, &w).unwrap();
        assert_eq!(t.scalar(ids.total), 0.0);

        // single nonzero rec with default weights -> 10
        let one = mk(&mut t, 1.0);
        let ids = loss_total(&mut t, one, zero, zero, zero, zero, &w).unwrap();
        assert_eq!(t.scalar(ids.total), 10.0);

        // doubling every weight doubles the total
        let (r, h, m, p, a) = (0.3, 0.2, 0.11, 0.07, -0.4);
        let ids1 = {
            let rv = mk(&mut t, r);
            let hv = mk(&mut t, h);
            let mv = mk(&mut t, m);
            let pv = mk(&mut t, p);
            let av = mk(&mut t, a);
            loss_total(&mut t, rv, hv, mv, pv, av, &w).unwrap()
        };
        let w2 = LossWeights {
            rec: 2.0 * w.rec,
            hc: 2.0 * w.hc,
            mask: 2.0 * w.mask,
            per: 2.0 * w.per,
            adv: 2.0 * w.adv,
        };
        let ids2 = {
            let rv = mk(&mut t, r);
            let hv = mk(&mut t, h);
            let mv = mk(&mut t, m);
            let pv = mk(&mut t, p);
            let av = mk(&mut t, a);
            loss_total(&mut t, rv, hv, mv, pv, av, &w2).unwrap()
        };
        assert!((2.0 * t.scalar(ids1.total) - t.scalar(ids2.total)).abs() < 1e-12);

        // report total equals the same left-fold sum exactly
        let report = LossReport::from_tape(&t, &ids1);
        let recomputed =
            w.rec * report.rec + w.hc * report.hc + w.mask * report.mask + w.per * report.per
                + w.adv * report.adv;
        assert_eq!(report.total, recomputed);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = Rng::new(3);
        let (h, w) = (6, 6);
        let target = rand_image(h, w, &mut rng);
        // keep |y - target| away from the L1 kink
        let y0 = Image {
            height: h,
            width: w,
            data: target
                .data
                .iter()
                .map(|&v| (v + 0.17 + 0.1 * rng.uniform()).min(1.0))
                .collect(),
        };
        let mask = {
            let mut m = BinaryMask::zeros(h, w);
            for i in 0..h * w / 2 {
                m.data[i] = 1;
            }
            m
        };
        let m_gt = {
            let mut m = BinaryMask::zeros(h, w);
            for i in h * w / 3..h * w {
                m.data[i] = 1;
            }
            m
        };
        let ex = PerceptualExtractor::<f64>::from_seed(7777);

        type LossBuilder<'a> = Box<dyn Fn(&mut Tape<f64>, Vid) -> Vid + 'a>;
        let cases: Vec<(&str, LossBuilder)> = vec![
            (
                "rec",
                Box::new(|t, y| loss_rec(t, y, &target, &mask).unwrap()),
            ),
            ("hc", Box::new(|t, y| loss_hc(t, y, &target).unwrap())),
            (
                "per",
                Box::new(|t, y| loss_perceptual(t, y, &target, &ex).unwrap()),
            ),
        ];
        for (name, build) in &cases {
            let run = |vals: &[f64]| {
                let mut t = Tape::new();
                let y = t.leaf_from(&[3, h, w], vals.to_vec()).unwrap();
                let l = build(&mut t, y);
                t.scalar(l)
            };
            let mut t = Tape::new();
            let y = t.leaf_from(&[3, h, w], y0.data.clone()).unwrap();
            let l = build(&mut t, y);
            t.backward(l).unwrap();
            let analytic = t.grad(y).unwrap().to_vec();
            let numeric = finite_difference_gradient(run, &y0.data, 1e-5).unwrap();
            let err = max_rel_err(&analytic, &numeric);
            assert!(err <= 1e-4, "{name}: rel err {err}");
        }

        // mask loss on the soft map
        let soft0: Vec<f64> = (0..h * w).map(|_| 0.2 + 0.6 * rng.uniform()).collect();
        let run = |vals: &[f64]| {
            let mut t = Tape::<f64>::new();
            let s = t.leaf_from(&[1, h, w], vals.to_vec()).unwrap();
            let l = loss_mask(&mut t, s, &m_gt).unwrap();
            t.scalar(l)
        };
        let mut t = Tape::<f64>::new();
        let s = t.leaf_from(&[1, h, w], soft0.clone()).unwrap();
        let l = loss_mask(&mut t, s, &m_gt).unwrap();
        t.backward(l).unwrap();
        let analytic = t.grad(s).unwrap().to_vec();
        let numeric = finite_difference_gradient(run, &soft0, 1e-5).unwrap();
        assert!(max_rel_err(&analytic, &numeric) <= 1e-4);

        // adversarial terms w.r.t. the two scores
        let scores0 = [0.62, 0.38];
        let run_d = |vals: &[f64]| {
            let mut t = Tape::<f64>::new();
            let r = t.leaf_from(&[1], vec![vals[0]]).unwrap();
            let f = t.leaf_from(&[1], vec![vals[1]]).unwrap();
            let (d, _) = loss_adversarial(&mut t, r, f).unwrap();
            t.scalar(d)
        };
        let mut t = Tape::<f64>::new();
        let r = t.leaf_from(&[1], vec![scores0[0]]).unwrap();
        let f = t.leaf_from(&[1], vec![scores0[1]]).unwrap();
        let (d, _) = loss_adversarial(&mut t, r, f).unwrap();
        t.backward(d).unwrap();
        let analytic = vec![t.grad(r).unwrap()[0], t.grad(f).unwrap()[0]];
        let numeric = finite_difference_gradient(run_d, &scores0, 1e-6).unwrap();
        assert!(max_rel_err(&analytic, &numeric) <= 1e-4);
    }
}
