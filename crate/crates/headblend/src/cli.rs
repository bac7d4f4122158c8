//! Command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numeric
//! failure during a run.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::augment::HairBank;
use crate::config::{ConfigError, Precision, TrainConfig};
use crate::io_png;
use crate::mask::BinaryMask;
use crate::metrics::metrics;
use crate::model::{ModelError, ModelParams};
use crate::numerics::{NumericsError, TensorData};
use crate::pipeline::{
    augment_corpus, infer, load_corpus, load_hair_bank, train, InferResult, PipelineError, Sample,
};
use crate::synth;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser)]
#[command(
    name = "headblend",
    about = "Chroma-key head blending: augmentation, training, inference, and metrics on small corpora",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Plain-text `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Additional `key=value` overrides, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic demo corpus (images + parsing maps + hair bank).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        res: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Emit augmented masks and network inputs for a corpus.
    Augment {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Self-supervised training; writes checkpoints and a loss CSV.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Blend a source head onto a target; writes Y.png, M.png, attention maps.
    Infer {
        /// Source sample directory (image.png + parsing.png).
        #[arg(long)]
        source: PathBuf,
        /// Target sample directory.
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Dump per-block attention heatmaps and the predicted foreground mask.
    VizAttn {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// PSNR / SSIM / L1 between equally named PNGs in two directories.
    Metrics {
        dir_a: PathBuf,
        dir_b: PathBuf,
    },
}

/// Entry point shared by the binary and the tests.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own usage/help text; help requests are success.
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] io_png::IoError),
    #[error("{0}")]
    Data(String),
}

fn exit_code_for(e: &CliError) -> i32 {
    use crate::loss::LossError;
    let numeric = matches!(
        e,
        CliError::Pipeline(PipelineError::NonFiniteLoss { .. })
            | CliError::Pipeline(PipelineError::Model(ModelError::Numerics(
                NumericsError::NonFinite { .. },
            )))
            | CliError::Pipeline(PipelineError::Loss(LossError::Numerics(
                NumericsError::NonFinite { .. },
            )))
            | CliError::Model(ModelError::Numerics(NumericsError::NonFinite { .. }))
    );
    if numeric {
        EXIT_NUMERIC
    } else {
        EXIT_DATA
    }
}

fn build_config(args: &ConfigArgs) -> Result<TrainConfig, CliError> {
    let mut overrides: Vec<(String, String)> = Vec::new();
    if let Some(seed) = args.seed {
        overrides.push(("seed".to_string(), seed.to_string()));
    }
    for kv in &args.set {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(CliError::Data(format!("--set expects key=value, got `{kv}`")));
        };
        overrides.push((k.to_string(), v.to_string()));
    }
    Ok(TrainConfig::load(args.config.as_deref(), &overrides)?)
}

fn hair_bank_for(cfg: &TrainConfig) -> Result<HairBank, CliError> {
    match &cfg.hair_bank {
        Some(dir) => Ok(load_hair_bank(Path::new(dir))?),
        None => Ok(HairBank::default()),
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Synth {
            out,
            count,
            res,
            seed,
        } => {
            synth::write_corpus(&out, count, res, seed)?;
            println!("wrote {count} samples at {res}x{res} under {}", out.display());
            Ok(())
        }
        Command::Augment { corpus, out, cfg } => {
            let cfg = build_config(&cfg)?;
            let bank = hair_bank_for(&cfg)?;
            let samples = load_corpus(&corpus)?;
            augment_corpus(&samples, &cfg, &bank, &out)?;
            println!("augmented {} samples into {}", samples.len(), out.display());
            Ok(())
        }
        Command::Train { corpus, out, cfg } => {
            let cfg = build_config(&cfg)?;
            let bank = hair_bank_for(&cfg)?;
            let samples = load_corpus(&corpus)?;
            let arts = match cfg.precision {
                Precision::F64 => train::<f64>(&samples, &cfg, &bank, &out)?,
                Precision::F32 => train::<f32>(&samples, &cfg, &bank, &out)?,
            };
            let last = arts.reports.last().expect("at least one step");
            println!(
                "trained {} steps; final total {:.6}; checkpoint {}",
                arts.reports.len(),
                last.total,
                arts.checkpoint.display()
            );
            Ok(())
        }
        Command::Infer {
            source,
            target,
            ckpt,
            out,
            cfg,
        } => {
            let cfg = build_config(&cfg)?;
            let source = Sample::load(&source)?;
            let target = Sample::load(&target)?;
            let result = match cfg.precision {
                Precision::F64 => {
                    let params = ModelParams::<f64>::load(&ckpt)?;
                    infer(&source, &target, &params, cfg.tau)?
                }
                Precision::F32 => {
                    let params = ModelParams::<f32>::load(&ckpt)?;
                    infer(&source, &target, &params, cfg.tau)?
                }
            };
            write_infer_outputs(&out, &result)?;
            println!("wrote blended output under {}", out.display());
            Ok(())
        }
        Command::VizAttn {
            source,
            target,
            ckpt,
            out,
            cfg,
        } => {
            let cfg = build_config(&cfg)?;
            let source = Sample::load(&source)?;
            let target = Sample::load(&target)?;
            let result = match cfg.precision {
                Precision::F64 => {
                    let params = ModelParams::<f64>::load(&ckpt)?;
                    infer(&source, &target, &params, cfg.tau)?
                }
                Precision::F32 => {
                    let params = ModelParams::<f32>::load(&ckpt)?;
                    infer(&source, &target, &params, cfg.tau)?
                }
            };
            std::fs::create_dir_all(&out).map_err(|source| PipelineError::FileIo {
                path: out.display().to_string(),
                source,
            })?;
            write_attention_maps(&out, &result)?;
            let up = result
                .foreground
                .resize_nearest(result.y.height, result.y.width);
            io_png::write_mask(&out.join("m_pred.png"), &up)?;
            let soft_h = result.foreground.height;
            io_png::write_heatmap(&out.join("m_soft.png"), soft_h, soft_h, &result.soft_map)?;
            println!("wrote attention maps under {}", out.display());
            Ok(())
        }
        Command::Metrics { dir_a, dir_b } => run_metrics(&dir_a, &dir_b),
    }
}

fn write_infer_outputs(out: &Path, result: &InferResult) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|source| PipelineError::FileIo {
        path: out.display().to_string(),
        source,
    })?;
    io_png::write_rgb(&out.join("Y.png"), &result.y)?;
    io_png::write_rgb(&out.join("X.png"), &result.x)?;
    let m_up: BinaryMask = result
        .foreground
        .resize_nearest(result.y.height, result.y.width);
    io_png::write_mask(&out.join("M.png"), &m_up)?;
    io_png::write_mask(&out.join("m_union.png"), &result.m_union)?;
    write_attention_maps(out, result)?;
    Ok(())
}

fn write_attention_maps(out: &Path, result: &InferResult) -> Result<(), CliError> {
    for (name, attn) in [
        ("attn_colorizer.png", &result.attn_colorizer),
        ("attn_fpat.png", &result.attn_fpat),
    ] {
        io_png::write_heatmap(&out.join(name), attn.shape[0], attn.shape[1], &normalized(attn))?;
    }
    Ok(())
}

/// Scale an attention matrix by its maximum for visibility.
fn normalized(t: &TensorData<f64>) -> Vec<f64> {
    let mx = t.data.iter().cloned().fold(0.0_f64, f64::max);
    if mx <= 0.0 {
        return vec![0.0; t.data.len()];
    }
    t.data.iter().map(|&v| v / mx).collect()
}

fn run_metrics(dir_a: &Path, dir_b: &Path) -> Result<(), CliError> {
    let mut names: Vec<String> = std::fs::read_dir(dir_a)
        .map_err(|source| PipelineError::CorpusIo {
            root: dir_a.display().to_string(),
            source,
        })?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "png"))
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(CliError::Data(format!(
            "no PNG files in {}",
            dir_a.display()
        )));
    }
    let (mut p_sum, mut s_sum, mut l_sum) = (0.0, 0.0, 0.0);
    let mut count = 0usize;
    for name in &names {
        let b_path = dir_b.join(name);
        if !b_path.is_file() {
            return Err(CliError::Data(format!(
                "{} has no counterpart in {}",
                name,
                dir_b.display()
            )));
        }
        let a = io_png::read_rgb(&dir_a.join(name))?;
        let b = io_png::read_rgb(&b_path)?;
        if (a.height, a.width) != (b.height, b.width) {
            return Err(CliError::Data(format!(
                "{name}: resolution mismatch {}x{} vs {}x{}",
                a.height, a.width, b.height, b.width
            )));
        }
        let (p, s, l) = metrics(&a, &b);
        println!("{name}  psnr {p:.3}  ssim {s:.6}  l1 {l:.6}");
        p_sum += p;
        s_sum += s;
        l_sum += l;
        count += 1;
    }
    let n = count as f64;
    println!(
        "mean  psnr {:.3}  ssim {:.6}  l1 {:.6}",
        p_sum / n,
        s_sum / n,
        l_sum / n
    );
    Ok(())
}
