//! Corpus ingestion, self-supervised training, and cross-identity inference.
//!
//! Training is self-driven: source and target are the same image, and the
//! head-shape/long-hair augmentation fabricates the union and inpainting
//! masks a cross-identity pair would produce. The test path differs only in
//! the union-mask branch (source head OR target head); both paths build the
//! network input through [`crate::mask::build_input`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::augment::{h2_union, HairBank};
use crate::config::TrainConfig;
use crate::fpat::PatchPartition;
use crate::io_png::{self, IoError};
use crate::loss::{
    loss_adversarial, loss_hc, loss_mask, loss_perceptual, loss_rec, loss_total, LossError,
    LossIds, LossReport, PerceptualExtractor,
};
use crate::mask::{
    apply_mask, build_input, composite_output, grayscale, inpaint_mask, paint_background, union,
    BinaryMask, ChromaColor, Image, MaskError,
};
use crate::model::{
    discriminate_on_tape, forward_on_tape, image_to_leaf, leaf_to_image, ModelError, ModelParams,
};
use crate::numerics::{Real, Rng, Tape, TensorData, Vid};
use crate::optim::Adam;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("sample {id}: parsing resolution {p_h}x{p_w} does not match image {i_h}x{i_w}")]
    ParsingMismatch {
        id: String,
        p_h: usize,
        p_w: usize,
        i_h: usize,
        i_w: usize,
    },
    #[error("sample {id}: empty head mask")]
    EmptyHead { id: String },
    #[error("corpus {root}: no samples found")]
    EmptyCorpus { root: String },
    #[error("corpus {root}: {source}")]
    CorpusIo {
        root: String,
        source: std::io::Error,
    },
    #[error("non-finite loss at step {step}; last good checkpoint: {last:?}")]
    NonFiniteLoss { step: usize, last: Option<PathBuf> },
    #[error("{path}: {source}")]
    FileIo {
        path: String,
        source: std::io::Error,
    },
}

/// Parsing-map class ids.
pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_HEAD: u8 = 1;
pub const LABEL_NECK: u8 = 2;
pub const LABEL_BODY: u8 = 3;

/// One corpus entry: an image plus its parsing map and the masks derived
/// from it. The person mask (head ∪ neck ∪ body) is the mask-loss target.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub parsing: Vec<u8>,
    pub head: BinaryMask,
    pub neck: BinaryMask,
    pub body: BinaryMask,
    pub person: BinaryMask,
}

impl Sample {
    pub fn from_parts(
        id: String,
        image: Image,
        parsing_res: (usize, usize),
        parsing: Vec<u8>,
    ) -> Result<Self, PipelineError> {
        if parsing_res != (image.height, image.width) {
            return Err(PipelineError::ParsingMismatch {
                id,
                p_h: parsing_res.0,
                p_w: parsing_res.1,
                i_h: image.height,
                i_w: image.width,
            });
        }
        let (h, w) = (image.height, image.width);
        let class_mask = |label: u8| -> BinaryMask {
            BinaryMask {
                height: h,
                width: w,
                data: parsing.iter().map(|&v| (v == label) as u8).collect(),
            }
        };
        let head = class_mask(LABEL_HEAD);
        let neck = class_mask(LABEL_NECK);
        let body = class_mask(LABEL_BODY);
        let person = BinaryMask {
            height: h,
            width: w,
            data: parsing.iter().map(|&v| (v != LABEL_BACKGROUND) as u8).collect(),
        };
        Ok(Sample {
            id,
            image,
            parsing,
            head,
            neck,
            body,
            person,
        })
    }

    /// Load `<dir>/image.png` + `<dir>/parsing.png`.
    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let image = io_png::read_rgb(&dir.join("image.png"))?;
        let (ph, pw, parsing) = io_png::read_labels(&dir.join("parsing.png"), LABEL_BODY)?;
        Sample::from_parts(id, image, (ph, pw), parsing)
    }

    /// Resize to the working resolution: image bilinear, parsing nearest.
    pub fn resized(&self, resolution: usize) -> Result<Sample, PipelineError> {
        if self.image.height == resolution && self.image.width == resolution {
            return Ok(self.clone());
        }
        let image = self.image.resize_bilinear(resolution, resolution);
        let src = BinaryMask {
            height: self.image.height,
            width: self.image.width,
            data: self.parsing.clone(),
        };
        // Nearest-neighbor label resize via the mask helper (labels are
        // small ids, not strictly binary, so resample manually).
        let mut parsing = vec![0u8; resolution * resolution];
        for y in 0..resolution {
            let sy = (y * src.height) / resolution;
            for x in 0..resolution {
                let sx = (x * src.width) / resolution;
                parsing[y * resolution + x] = self.parsing[sy * src.width + sx];
            }
        }
        Sample::from_parts(self.id.clone(), image, (resolution, resolution), parsing)
    }
}

/// Load every `<root>/<id>/` directory containing image.png + parsing.png,
/// sorted by id for a deterministic iteration order.
pub fn load_corpus(root: &Path) -> Result<Vec<Sample>, PipelineError> {
    let rd = std::fs::read_dir(root).map_err(|source| PipelineError::CorpusIo {
        root: root.display().to_string(),
        source,
    })?;
    let mut dirs: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join("image.png").is_file() && p.join("parsing.png").is_file())
        .collect();
    dirs.sort();
    let mut samples = Vec::new();
    for dir in dirs {
        samples.push(Sample::load(&dir)?);
    }
    if samples.is_empty() {
        return Err(PipelineError::EmptyCorpus {
            root: root.display().to_string(),
        });
    }
    Ok(samples)
}

/// Load a hair bank from a directory of mask PNGs (sorted order).
pub fn load_hair_bank(dir: &Path) -> Result<HairBank, PipelineError> {
    let rd = std::fs::read_dir(dir).map_err(|source| PipelineError::CorpusIo {
        root: dir.display().to_string(),
        source,
    })?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    files.sort();
    let mut entries = Vec::new();
    for f in files {
        entries.push(io_png::read_mask(&f)?);
    }
    Ok(HairBank::new(entries))
}

// ── color jitter ─────────────────────────────────────────────────────

/// One jitter draw: brightness, contrast, saturation factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl JitterParams {
    pub fn identity() -> Self {
        JitterParams {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
        }
    }
}

pub fn sample_jitter(range: (f64, f64), rng: &mut Rng) -> JitterParams {
    JitterParams {
        brightness: rng.uniform_in(range.0, range.1),
        contrast: rng.uniform_in(range.0, range.1),
        saturation: rng.uniform_in(range.0, range.1),
    }
}

/// Brightness, then contrast about 0.5, then saturation toward the BT.601
/// gray, clamped to `[0,1]`. Identity parameters return the input bit-exactly.
pub fn apply_jitter(img: &Image, j: &JitterParams) -> Image {
    if *j == JitterParams::identity() {
        return img.clone();
    }
    let hw = img.height * img.width;
    let mut out = img.clone();
    for i in 0..hw {
        let mut rgb = [0.0f64; 3];
        for c in 0..3 {
            let v = img.data[c * hw + i] * j.brightness;
            let v = (v - 0.5) * j.contrast + 0.5;
            rgb[c] = v;
        }
        let gray = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
        for c in 0..3 {
            let v = gray + (rgb[c] - gray) * j.saturation;
            out.data[c * hw + i] = v.clamp(0.0, 1.0);
        }
    }
    out
}

// ── training-sample construction ─────────────────────────────────────

/// Everything one training step needs for one sample.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub x: Image,
    /// Target head conditioning (jittered target masked to the head).
    pub head_cond: Image,
    /// Target body conditioning (jittered target masked to the body class).
    pub body_cond: Image,
    /// Ground-truth target (jittered).
    pub target: Image,
    pub target_green: Image,
    /// Target with the completion region keyed out (ToRGB supervision).
    pub target_hc: Image,
    pub m_src: BinaryMask,
    pub m_union: BinaryMask,
    pub m_ip: BinaryMask,
    /// Person silhouette at feature resolution (mask-loss target).
    pub m_gt_feature: BinaryMask,
    /// Jitter draw applied to the green-keyed target.
    pub jitter_green: JitterParams,
    /// Jitter draw applied to the ground truth (same draw by construction).
    pub jitter_gt: JitterParams,
}

/// Self-supervised sample preparation: source = target = `s`. The jitter is
/// drawn once and applied to every target-derived product; the gray source
/// head stays unjittered so the colorizer must pull color from the
/// conditioning. Draw order: head-shape warp, hair branch, jitter.
pub fn make_training_sample(
    s: &Sample,
    cfg: &TrainConfig,
    bank: &HairBank,
    rng: &mut Rng,
) -> Result<TrainingSample, PipelineError> {
    if s.head.is_empty() {
        return Err(PipelineError::EmptyHead { id: s.id.clone() });
    }
    let green = ChromaColor::default();
    let (m_union, m_ip) = h2_union(&s.head, &cfg.head_shape, bank, cfg.eps, rng)?;

    let jitter = if cfg.jitter_enabled {
        sample_jitter(cfg.jitter_range, rng)
    } else {
        JitterParams::identity()
    };
    let jittered = apply_jitter(&s.image, &jitter);

    let target_green = paint_background(&jittered, &s.person, green)?;
    let head_cond = apply_mask(&jittered, &s.head)?;
    let body_cond = apply_mask(&jittered, &s.body)?;
    let target_hc = paint_background(&jittered, &m_ip.complement(), green)?;

    let i_s_gray = grayscale(&s.image, &s.head)?;
    let x = build_input(&i_s_gray, &target_green, &m_union, &m_ip, green)?;

    let m_gt_feature = s.person.downsample_area_threshold(4);

    Ok(TrainingSample {
        x,
        head_cond,
        body_cond,
        target: jittered,
        target_green,
        target_hc,
        m_src: s.head.clone(),
        m_union,
        m_ip,
        m_gt_feature,
        jitter_green: jitter,
        jitter_gt: jitter,
    })
}

// ── training loop ────────────────────────────────────────────────────

pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub reports: Vec<LossReport>,
}

/// Composite the generated image over the target on-tape:
/// y_hat ⊗ m_union + target ⊗ (1 − m_union). Differentiable in y_hat.
fn composite_on_tape<R: Real>(
    tape: &mut Tape<R>,
    y_hat: Vid,
    target: &Image,
    m_union: &BinaryMask,
) -> Result<Vid, PipelineError> {
    let hw = target.height * target.width;
    let mut mask3 = Vec::with_capacity(3 * hw);
    for _ in 0..3 {
        mask3.extend(m_union.data.iter().map(|&v| R::from_f64(v as f64)));
    }
    let masked = tape.mul_const(y_hat, Arc::new(mask3)).map_err(LossError::from)?;
    let mut bg = Vec::with_capacity(3 * hw);
    for c in 0..3 {
        for i in 0..hw {
            let keep = if m_union.data[i] == 0 {
                target.data[c * hw + i]
            } else {
                0.0
            };
            bg.push(R::from_f64(keep));
        }
    }
    Ok(tape.add_const(masked, &bg).map_err(LossError::from)?)
}

/// Generator-side losses for one prepared sample on one tape. Returns the
/// loss ids plus the composited output id.
#[allow(clippy::too_many_arguments)]
fn sample_losses<R: Real>(
    tape: &mut Tape<R>,
    ids: &BTreeMap<String, Vid>,
    cfg: &TrainConfig,
    extractor: &PerceptualExtractor<R>,
    ts: &TrainingSample,
) -> Result<(SampleLossIds, Vid), PipelineError> {
    let (f, _partition, _fg) = forward_on_tape(
        tape,
        ids,
        &cfg.model_config(),
        cfg.tau,
        &ts.x,
        &ts.head_cond,
        &ts.body_cond,
    )?;
    let y_comp = composite_on_tape(tape, f.y_hat, &ts.target, &ts.m_union)?;
    let rec = loss_rec(tape, y_comp, &ts.target, &ts.m_src)?;
    let hc = loss_hc(tape, f.to_rgb, &ts.target_hc)?;
    let mask = loss_mask(tape, f.soft_map, &ts.m_gt_feature)?;
    let per = loss_perceptual(tape, y_comp, &ts.target, extractor)?;
    Ok((
        SampleLossIds {
            rec,
            hc,
            mask,
            per,
            y_comp,
        },
        f.y_hat,
    ))
}

struct SampleLossIds {
    rec: Vid,
    hc: Vid,
    mask: Vid,
    per: Vid,
    y_comp: Vid,
}

fn mean_of<R: Real>(tape: &mut Tape<R>, ids: &[Vid]) -> Result<Vid, PipelineError> {
    let mut acc = ids[0];
    for &v in &ids[1..] {
        acc = tape.add(acc, v).map_err(LossError::from)?;
    }
    Ok(tape.scale(acc, R::from_f64(1.0 / ids.len() as f64)))
}

/// The exact parameters a training run with this config starts from
/// (step-0 model). Baselines compare against this.
pub fn initial_params<R: Real>(cfg: &TrainConfig) -> Result<ModelParams<R>, PipelineError> {
    let init_seed = Rng::new(cfg.seed).child("model").next_u64();
    Ok(ModelParams::<R>::init(&cfg.model_config(), init_seed)?)
}

/// Self-supervised training. Alternates a discriminator update on
/// (real target, detached fake) with a generator update on the full
/// objective, using Adam with separate learning rates. Deterministic in
/// (corpus order, config, seed): per-purpose rng streams, ordered
/// parameters, serial steps.
pub fn train<R: Real>(
    corpus: &[Sample],
    cfg: &TrainConfig,
    bank: &HairBank,
    out_dir: &Path,
) -> Result<TrainArtifacts, PipelineError> {
    std::fs::create_dir_all(out_dir).map_err(|source| PipelineError::FileIo {
        path: out_dir.display().to_string(),
        source,
    })?;
    let samples: Vec<Sample> = {
        let mut v = Vec::new();
        for s in corpus {
            v.push(s.resized(cfg.resolution)?);
        }
        v
    };
    let root = Rng::new(cfg.seed);
    let mut params = initial_params::<R>(cfg)?;
    let extractor = PerceptualExtractor::<R>::from_seed(cfg.percep_seed);

    let mut adam_g = Adam::<R>::new(cfg.lr_g, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut adam_d = Adam::<R>::new(cfg.lr_d, cfg.beta1, cfg.beta2, cfg.adam_eps);

    let update_disc = cfg.adversarial && cfg.weights.adv != 0.0;
    let csv_path = out_dir.join("losses.csv");
    let mut csv = std::io::BufWriter::new(std::fs::File::create(&csv_path).map_err(
        |source| PipelineError::FileIo {
            path: csv_path.display().to_string(),
            source,
        },
    )?);
    let csv_io = |source: std::io::Error| PipelineError::FileIo {
        path: csv_path.display().to_string(),
        source,
    };
    use std::io::Write as _;
    writeln!(csv, "step,loss_rec,loss_hc,loss_mask,loss_per,loss_adv,loss_adv_d,total")
        .map_err(csv_io)?;
    let mut reports = Vec::with_capacity(cfg.steps);
    let mut last_ckpt: Option<PathBuf> = None;

    for step in 0..cfg.steps {
        // Prepare the batch, skipping degenerate samples.
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for b in 0..cfg.batch_size {
            let idx = (step * cfg.batch_size + b) % samples.len();
            let mut rng = root.child_indexed("data", (step * cfg.batch_size + b) as u64);
            match make_training_sample(&samples[idx], cfg, bank, &mut rng) {
                Ok(ts) => batch.push(ts),
                Err(PipelineError::EmptyHead { id }) => {
                    eprintln!("warning: skipping sample {id} (empty head mask) at step {step}");
                }
                Err(e) => return Err(e),
            }
        }
        if batch.is_empty() {
            eprintln!("warning: step {step} has no usable samples; skipping step");
            continue;
        }

        // Generator tape: forward all samples, hold the composited outputs.
        let mut tape = Tape::<R>::new();
        let ids = params.register(&mut tape);
        let mut per_sample = Vec::new();
        for ts in &batch {
            let (sl, _y_hat) = sample_losses(&mut tape, &ids, cfg, &extractor, ts)?;
            per_sample.push(sl);
        }

        // Discriminator update on (real, detached fake).
        let mut d_loss_value = 0.0;
        if update_disc {
            let fakes: Vec<Image> = per_sample
                .iter()
                .map(|sl| leaf_to_image(&tape, sl.y_comp))
                .collect();
            let mut d_tape = Tape::<R>::new();
            let d_ids = params.register(&mut d_tape);
            let mut d_losses = Vec::new();
            for (ts, fake) in batch.iter().zip(&fakes) {
                let real_leaf = image_to_leaf(&mut d_tape, &ts.target);
                let fake_leaf = image_to_leaf(&mut d_tape, fake);
                let d_real = discriminate_on_tape(&mut d_tape, &d_ids, real_leaf)?;
                let d_fake = discriminate_on_tape(&mut d_tape, &d_ids, fake_leaf)?;
                let (d_loss, _) = loss_adversarial(&mut d_tape, d_real, d_fake)?;
                d_losses.push(d_loss);
            }
            let d_total = mean_of(&mut d_tape, &d_losses)?;
            d_loss_value = d_tape.scalar(d_total).to_f64();
            d_tape.backward(d_total).map_err(LossError::from)?;
            let mut grads = BTreeMap::new();
            for (name, &vid) in &d_ids {
                if name.starts_with("disc.") {
                    if let Some(g) = d_tape.grad(vid) {
                        grads.insert(name.clone(), g.to_vec());
                    }
                }
            }
            adam_d.step(&mut params, &grads);
        }

        // Generator losses; the adversarial term sees the just-updated
        // discriminator as constants.
        let (rec_ids, hc_ids, mask_ids, per_ids): (Vec<_>, Vec<_>, Vec<_>, Vec<_>) = (
            per_sample.iter().map(|s| s.rec).collect(),
            per_sample.iter().map(|s| s.hc).collect(),
            per_sample.iter().map(|s| s.mask).collect(),
            per_sample.iter().map(|s| s.per).collect(),
        );
        let rec = mean_of(&mut tape, &rec_ids)?;
        let hc = mean_of(&mut tape, &hc_ids)?;
        let mask = mean_of(&mut tape, &mask_ids)?;
        let per = mean_of(&mut tape, &per_ids)?;
        let adv = if cfg.adversarial {
            let disc_now: BTreeMap<String, TensorData<R>> = params
                .entries
                .iter()
                .filter(|(n, _)| n.starts_with("disc."))
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect();
            let disc_ids: BTreeMap<String, Vid> = disc_now
                .iter()
                .map(|(n, t)| (n.clone(), tape.leaf(t.clone())))
                .collect();
            let mut g_terms = Vec::new();
            for sl in &per_sample {
                let d_fake = discriminate_on_tape(&mut tape, &disc_ids, sl.y_comp)?;
                let g_term = tape.scale(d_fake, -R::ONE);
                g_terms.push(g_term);
            }
            mean_of(&mut tape, &g_terms)?
        } else {
            tape.leaf(TensorData {
                shape: vec![1],
                data: vec![R::ZERO],
            })
        };

        let totals: LossIds = loss_total(&mut tape, rec, hc, mask, per, adv, &cfg.weights)?;
        let report = LossReport::from_tape(&tape, &totals);
        if !report.total.is_finite() {
            let _ = csv.flush();
            return Err(PipelineError::NonFiniteLoss {
                step,
                last: last_ckpt,
            });
        }

        tape.backward(totals.total).map_err(LossError::from)?;
        let mut grads = BTreeMap::new();
        for (name, &vid) in &ids {
            if !name.starts_with("disc.") {
                if let Some(g) = tape.grad(vid) {
                    grads.insert(name.clone(), g.to_vec());
                }
            }
        }
        adam_g.step(&mut params, &grads);

        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            step, report.rec, report.hc, report.mask, report.per, report.adv, d_loss_value,
            report.total
        )
        .map_err(csv_io)?;
        reports.push(report);

        let done = step + 1 == cfg.steps;
        if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) || done {
            let path = if done {
                out_dir.join("model.ckpt")
            } else {
                out_dir.join(format!("ckpt_{:05}.ckpt", step + 1))
            };
            params.save(&path)?;
            last_ckpt = Some(path);
        }
    }

    csv.flush().map_err(csv_io)?;
    Ok(TrainArtifacts {
        checkpoint: last_ckpt.expect("training ran at least one step"),
        loss_csv: csv_path,
        reports,
    })
}

// ── inference ────────────────────────────────────────────────────────

pub struct InferResult {
    /// Final composited output.
    pub y: Image,
    /// Network input that produced it.
    pub x: Image,
    pub m_union: BinaryMask,
    /// Predicted foreground at feature resolution.
    pub foreground: BinaryMask,
    pub soft_map: Vec<f64>,
    pub partition: PatchPartition,
    pub attn_colorizer: TensorData<f64>,
    pub attn_fpat: TensorData<f64>,
}

/// Cross-identity head blending: union mask is source-head OR target-head,
/// the input is built over the green-keyed target, and the output is pasted
/// into the target frame (bit-identical outside the union mask).
pub fn infer<R: Real>(
    source: &Sample,
    target: &Sample,
    params: &ModelParams<R>,
    tau: f64,
) -> Result<InferResult, PipelineError> {
    let res = params.config.resolution;
    let src = source.resized(res)?;
    let tgt = target.resized(res)?;
    let green = ChromaColor::default();

    let m_union = union(&src.head, &tgt.head)?;
    let m_ip = inpaint_mask(&m_union, &src.head)?;
    let target_green = paint_background(&tgt.image, &tgt.person, green)?;
    let i_s_gray = grayscale(&src.image, &src.head)?;
    let x = build_input(&i_s_gray, &target_green, &m_union, &m_ip, green)?;
    let head_cond = apply_mask(&tgt.image, &tgt.head)?;
    let body_cond = apply_mask(&tgt.image, &tgt.body)?;

    let out = crate::model::forward(params, tau, &x, &head_cond, &body_cond)?;
    let y = composite_output(&out.y_hat, &tgt.image, &m_union)?;
    Ok(InferResult {
        y,
        x,
        m_union,
        foreground: out.foreground,
        soft_map: out.soft_map,
        partition: out.partition,
        attn_colorizer: out.attn_colorizer,
        attn_fpat: out.attn_fpat,
    })
}

/// Emit augmentation products (x, m_union, m_ip) for every sample;
/// deterministic in the seed and sorted corpus order.
pub fn augment_corpus(
    corpus: &[Sample],
    cfg: &TrainConfig,
    bank: &HairBank,
    out_dir: &Path,
) -> Result<(), PipelineError> {
    let root = Rng::new(cfg.seed);
    for (i, s) in corpus.iter().enumerate() {
        let s = s.resized(cfg.resolution)?;
        let mut rng = root.child_indexed("augment", i as u64);
        let ts = match make_training_sample(&s, cfg, bank, &mut rng) {
            Ok(ts) => ts,
            Err(PipelineError::EmptyHead { id }) => {
                eprintln!("warning: skipping sample {id} (empty head mask)");
                continue;
            }
            Err(e) => return Err(e),
        };
        let dir = out_dir.join(&s.id);
        std::fs::create_dir_all(&dir).map_err(|source| PipelineError::FileIo {
            path: dir.display().to_string(),
            source,
        })?;
        io_png::write_rgb(&dir.join("x.png"), &ts.x)?;
        io_png::write_mask(&dir.join("m_union.png"), &ts.m_union)?;
        io_png::write_mask(&dir.join("m_ip.png"), &ts.m_ip)?;
        io_png::write_rgb(&dir.join("target_green.png"), &ts.target_green)?;
    }
    Ok(())
}
