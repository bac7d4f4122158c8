//! Training-behavior integration tests: overfit oracles, the adversarial
//! ablation equivalence, gradient reach, and the f32 switch.

use std::collections::BTreeMap;

use headblend::augment::{HairBank, HeadShapeParams};
use headblend::config::TrainConfig;
use headblend::loss::loss_mask;
use headblend::mask::intersect;
use headblend::metrics::psnr;
use headblend::model::{forward_on_tape, ModelParams};
use headblend::numerics::{Rng, Tape};
use headblend::optim::Adam;
use headblend::pipeline::{infer, make_training_sample, train};
use headblend::synth::{synth_hair_mask, synth_sample};

fn small_cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        resolution: 32,
        steps,
        checkpoint_every: 0,
        ..TrainConfig::default()
    }
}

/// Self-identity inference with an overfit checkpoint reconstructs the
/// sample to at least 35 dB (the background is exact, the union region is
/// memorized).
#[test]
fn overfit_single_sample_infer_psnr() {
    let corpus = vec![synth_sample(32, 4001, "o")];
    let mut cfg = small_cfg(1200);
    // Single-sample memorization: keep the task deterministic.
    cfg.jitter_enabled = false;
    cfg.head_shape = HeadShapeParams {
        dilation_radius: (0, 3),
        ..HeadShapeParams::identity()
    };
    let dir = std::env::temp_dir().join("headblend_overfit_infer");
    let _ = std::fs::remove_dir_all(&dir);
    let arts = train::<f64>(&corpus, &cfg, &HairBank::default(), &dir).unwrap();
    let params = ModelParams::<f64>::load(&arts.checkpoint).unwrap();
    let s = &corpus[0];
    let out = infer(s, s, &params, cfg.tau).unwrap();
    let p = psnr(&out.y, &s.image);
    assert!(p >= 35.0, "overfit self-identity PSNR {p:.2} dB < 35 dB");
}

/// With lambda_adv = 0 and the discriminator idle, per-step generator losses
/// equal a run with the adversarial path removed.
#[test]
fn adversarial_ablation_equivalence() {
    let corpus: Vec<_> = (0..2)
        .map(|i| synth_sample(32, 4100 + i, &format!("a{i}")))
        .collect();
    let bank = HairBank::new(vec![synth_hair_mask(32, 4109)]);

    let mut cfg_zero = small_cfg(12);
    cfg_zero.weights.adv = 0.0; // adversarial path present, weighted zero
    let mut cfg_off = cfg_zero.clone();
    cfg_off.adversarial = false; // adversarial path removed

    let base = std::env::temp_dir().join("headblend_ablation");
    let _ = std::fs::remove_dir_all(&base);
    let run_zero = train::<f64>(&corpus, &cfg_zero, &bank, &base.join("zero")).unwrap();
    let run_off = train::<f64>(&corpus, &cfg_off, &bank, &base.join("off")).unwrap();

    assert_eq!(run_zero.reports.len(), run_off.reports.len());
    for (a, b) in run_zero.reports.iter().zip(&run_off.reports) {
        assert_eq!(a.rec, b.rec, "rec diverged");
        assert_eq!(a.hc, b.hc, "hc diverged");
        assert_eq!(a.mask, b.mask, "mask diverged");
        assert_eq!(a.per, b.per, "per diverged");
        assert_eq!(a.total, b.total, "total diverged");
    }
}

/// Every parameter accumulates nonzero gradient within a few steps, except
/// the foreground predictor, which trains only through the mask loss.
#[test]
fn no_dead_branches() {
    let corpus: Vec<_> = (0..2)
        .map(|i| synth_sample(32, 4200 + i, &format!("b{i}")))
        .collect();
    let cfg = small_cfg(6);
    let bank = HairBank::new(vec![synth_hair_mask(32, 4209)]);
    let dir = std::env::temp_dir().join("headblend_dead_branches");
    let _ = std::fs::remove_dir_all(&dir);
    // Train a few steps, then measure gradient magnitude per parameter over
    // one more manual step.
    let arts = train::<f64>(&corpus, &cfg, &bank, &dir).unwrap();
    let params = ModelParams::<f64>::load(&arts.checkpoint).unwrap();

    let mut accum: BTreeMap<String, f64> = BTreeMap::new();
    for trial in 0..3 {
        let mut rng = Rng::new(4300 + trial);
        let ts = make_training_sample(&corpus[trial as usize % 2], &cfg, &bank, &mut rng).unwrap();
        let mut tape = Tape::<f64>::new();
        let ids = params.register(&mut tape);
        let (f, _, _) = forward_on_tape(
            &mut tape,
            &ids,
            &cfg.model_config(),
            cfg.tau,
            &ts.x,
            &ts.head_cond,
            &ts.body_cond,
        )
        .unwrap();
        // Composite + all generator losses + adversarial with differentiable
        // discriminator leaves, so disc.* gradients are exercised here too.
        let hw = 32 * 32;
        let mut mask3 = Vec::with_capacity(3 * hw);
        for _ in 0..3 {
            mask3.extend(ts.m_union.data.iter().map(|&v| v as f64));
        }
        let masked = tape
            .mul_const(f.y_hat, std::sync::Arc::new(mask3))
            .unwrap();
        let mut bg = Vec::with_capacity(3 * hw);
        for c in 0..3 {
            for i in 0..hw {
                bg.push(if ts.m_union.data[i] == 0 {
                    ts.target.data[c * hw + i]
                } else {
                    0.0
                });
            }
        }
        let y_comp = tape.add_const(masked, &bg).unwrap();
        let rec = headblend::loss::loss_rec(&mut tape, y_comp, &ts.target, &ts.m_src).unwrap();
        let hc = headblend::loss::loss_hc(&mut tape, f.to_rgb, &ts.target_hc).unwrap();
        let mask_l = loss_mask(&mut tape, f.soft_map, &ts.m_gt_feature).unwrap();
        let ex = headblend::loss::PerceptualExtractor::<f64>::from_seed(cfg.percep_seed);
        let per = headblend::loss::loss_perceptual(&mut tape, y_comp, &ts.target, &ex).unwrap();
        let d_fake =
            headblend::model::discriminate_on_tape(&mut tape, &ids, y_comp).unwrap();
        let adv = tape.scale(d_fake, -1.0);
        let totals =
            headblend::loss::loss_total(&mut tape, rec, hc, mask_l, per, adv, &cfg.weights)
                .unwrap();
        tape.backward(totals.total).unwrap();
        for (name, &vid) in &ids {
            let g = tape
                .grad(vid)
                .map(|g| g.iter().map(|x| x.abs()).sum::<f64>())
                .unwrap_or(0.0);
            *accum.entry(name.clone()).or_insert(0.0) += g;
        }
    }
    for (name, g) in &accum {
        assert!(
            *g > 0.0,
            "parameter {name} received zero gradient across trials"
        );
    }
}

/// The predictor head alone overfits a single sample's silhouette to
/// IoU >= 0.9 at feature resolution.
#[test]
fn predictor_overfit_iou() {
    let cfg = small_cfg(1);
    let s = synth_sample(32, 4400, "p");
    let bank = HairBank::default();
    let mut rng = Rng::new(4401);
    let ts = make_training_sample(&s, &cfg, &bank, &mut rng).unwrap();
    let mut params = ModelParams::<f64>::init(&cfg.model_config(), 4402).unwrap();
    let mut adam = Adam::<f64>::new(3e-3, 0.9, 0.999, 1e-8);

    let mut final_mask = None;
    for _ in 0..400 {
        let mut tape = Tape::<f64>::new();
        let ids = params.register(&mut tape);
        let (f, _, fg) = forward_on_tape(
            &mut tape,
            &ids,
            &cfg.model_config(),
            cfg.tau,
            &ts.x,
            &ts.head_cond,
            &ts.body_cond,
        )
        .unwrap();
        let l = loss_mask(&mut tape, f.soft_map, &ts.m_gt_feature).unwrap();
        tape.backward(l).unwrap();
        let mut grads = BTreeMap::new();
        for (name, &vid) in &ids {
            if name.starts_with("pred.") {
                if let Some(g) = tape.grad(vid) {
                    grads.insert(name.clone(), g.to_vec());
                }
            }
        }
        adam.step(&mut params, &grads);
        final_mask = Some(fg);
    }
    let fg = final_mask.unwrap();
    let inter = intersect(&fg, &ts.m_gt_feature).unwrap().count_ones() as f64;
    let uni = headblend::mask::union(&fg, &ts.m_gt_feature)
        .unwrap()
        .count_ones() as f64;
    let iou = inter / uni.max(1.0);
    assert!(iou >= 0.9, "predictor IoU {iou:.3} < 0.9");
}

/// Discriminator trained alone separates real from fake on the training set.
#[test]
fn discriminator_overfit_separates() {
    let cfg = small_cfg(1);
    let real: Vec<_> = (0..4)
        .map(|i| synth_sample(32, 4500 + i, &format!("r{i}")))
        .collect();
    // Fakes: blurry mixes of two reals.
    let fakes: Vec<_> = (0..4)
        .map(|i| {
            let a = &real[i].image;
            let b = &real[(i + 1) % 4].image;
            headblend::mask::Image {
                height: a.height,
                width: a.width,
                data: a
                    .data
                    .iter()
                    .zip(&b.data)
                    .map(|(&x, &y)| 0.5 * x + 0.5 * y)
                    .collect(),
            }
        })
        .collect();
    let mut params = ModelParams::<f64>::init(&cfg.model_config(), 4510).unwrap();
    let mut adam = Adam::<f64>::new(1e-3, 0.9, 0.999, 1e-8);
    for step in 0..300 {
        let r = &real[step % 4].image;
        let f = &fakes[step % 4];
        let mut tape = Tape::<f64>::new();
        let ids = params.register(&mut tape);
        let r_leaf = headblend::model::image_to_leaf(&mut tape, r);
        let f_leaf = headblend::model::image_to_leaf(&mut tape, f);
        let d_r = headblend::model::discriminate_on_tape(&mut tape, &ids, r_leaf).unwrap();
        let d_f = headblend::model::discriminate_on_tape(&mut tape, &ids, f_leaf).unwrap();
        let (d_loss, _) = headblend::loss::loss_adversarial(&mut tape, d_r, d_f).unwrap();
        tape.backward(d_loss).unwrap();
        let mut grads = BTreeMap::new();
        for (name, &vid) in &ids {
            if name.starts_with("disc.") {
                if let Some(g) = tape.grad(vid) {
                    grads.insert(name.clone(), g.to_vec());
                }
            }
        }
        adam.step(&mut params, &grads);
    }
    let mut wins = 0;
    for i in 0..4 {
        let dr = headblend::model::discriminate(&params, &real[i].image).unwrap();
        let df = headblend::model::discriminate(&params, &fakes[i]).unwrap();
        if dr > df {
            wins += 1;
        }
    }
    assert!(wins >= 3, "discriminator separates only {wins}/4 pairs");
}

/// Full-model reconstruction-loss gradient on a 16x16 toy sample matches
/// central finite differences to 1e-4 on a sampled coordinate subset.
#[test]
fn full_model_rec_gradient_at_16() {
    let cfg = TrainConfig {
        resolution: 16,
        steps: 1,
        ..TrainConfig::default()
    };
    let mcfg = cfg.model_config();
    let params = ModelParams::<f64>::init_random_all(&mcfg, 909).unwrap();
    let s = synth_sample(16, 910, "g16");
    let mut rng = Rng::new(911);
    let ts = make_training_sample(&s, &cfg, &HairBank::default(), &mut rng).unwrap();

    let rec_of = |p: &ModelParams<f64>, want_grads: bool| {
        let mut tape = Tape::<f64>::new();
        let ids = p.register(&mut tape);
        let (f, _, _) = forward_on_tape(
            &mut tape,
            &ids,
            &mcfg,
            cfg.tau,
            &ts.x,
            &ts.head_cond,
            &ts.body_cond,
        )
        .unwrap();
        let hw = 16 * 16;
        let mut mask3 = Vec::with_capacity(3 * hw);
        for _ in 0..3 {
            mask3.extend(ts.m_union.data.iter().map(|&v| v as f64));
        }
        let masked = tape
            .mul_const(f.y_hat, std::sync::Arc::new(mask3))
            .unwrap();
        let mut bg = Vec::with_capacity(3 * hw);
        for c in 0..3 {
            for i in 0..hw {
                bg.push(if ts.m_union.data[i] == 0 {
                    ts.target.data[c * hw + i]
                } else {
                    0.0
                });
            }
        }
        let y_comp = tape.add_const(masked, &bg).unwrap();
        let rec = headblend::loss::loss_rec(&mut tape, y_comp, &ts.target, &ts.m_src).unwrap();
        let value = tape.scalar(rec);
        if !want_grads {
            return (value, None);
        }
        tape.backward(rec).unwrap();
        let grads: BTreeMap<String, Vec<f64>> = ids
            .iter()
            .filter_map(|(name, &vid)| tape.grad(vid).map(|g| (name.clone(), g.to_vec())))
            .collect();
        (value, Some(grads))
    };

    let (_, grads) = rec_of(&params, true);
    let grads = grads.unwrap();

    // 60 sampled coordinates across tensors that receive reconstruction
    // gradient (the predictor and discriminator sit outside the rec path).
    let names: Vec<String> = grads
        .iter()
        .filter(|(n, g)| {
            !n.starts_with("pred.") && !n.starts_with("disc.") && g.iter().any(|&x| x != 0.0)
        })
        .map(|(n, _)| n.clone())
        .collect();
    let mut rng = Rng::new(912);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..60 {
        let name = &names[k % names.len()];
        let idx = rng.index(params.entries[name].numel());
        let x0 = params.entries[name].data[idx];
        let mut plus = params.clone();
        plus.entries.get_mut(name).unwrap().data[idx] = x0 + h;
        let mut minus = params.clone();
        minus.entries.get_mut(name).unwrap().data[idx] = x0 - h;
        let fd = (rec_of(&plus, false).0 - rec_of(&minus, false).0) / (2.0 * h);
        let an = grads[name][idx];
        let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(err);
    }
    assert!(worst <= 1e-4, "max rel err {worst:.3e}");
}

/// An exploding run aborts with an error while retaining the checkpoints
/// already written.
#[test]
fn diverging_run_aborts_and_keeps_checkpoints() {
    let corpus = vec![synth_sample(32, 4700, "x")];
    let mut cfg = small_cfg(60);
    // One step at this rate pushes parameters to the f64 boundary; the next
    // forward overflows and must abort cleanly.
    cfg.lr_g = 1e308;
    cfg.checkpoint_every = 1;
    let dir = std::env::temp_dir().join("headblend_divergence");
    let _ = std::fs::remove_dir_all(&dir);
    let result = train::<f64>(&corpus, &cfg, &HairBank::default(), &dir);
    assert!(result.is_err(), "expected the run to abort");
    // The checkpoint written before the failure survives the abort.
    assert!(
        dir.join("ckpt_00001.ckpt").is_file(),
        "periodic checkpoint missing after abort"
    );
    // And the loss CSV holds the rows recorded before the failure.
    let csv = std::fs::read_to_string(dir.join("losses.csv")).unwrap();
    assert!(csv.lines().count() >= 2, "csv lost its rows: {csv}");
}

/// The f32 switch trains without blowing up and reduces the loss.
#[test]
fn f32_training_smoke() {
    let corpus = vec![synth_sample(32, 4600, "f")];
    let mut cfg = small_cfg(40);
    cfg.precision = headblend::config::Precision::F32;
    let dir = std::env::temp_dir().join("headblend_f32_smoke");
    let _ = std::fs::remove_dir_all(&dir);
    let arts = train::<f32>(&corpus, &cfg, &HairBank::default(), &dir).unwrap();
    assert!(arts.reports.iter().all(|r| r.total.is_finite()));
    let first = arts.reports[0].total;
    let last = arts.reports.last().unwrap().total;
    assert!(last < first, "f32 loss did not decrease: {first} -> {last}");
}
