//! `perco`: batch entry points for data generation, training, coding and
//! evaluation.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use perco_core::bitstream::{bpp_total, bpp_with_header, read_stream, write_stream};
use perco_core::diffusion::{GuidanceConfig, GuidanceMode};
use perco_core::eval::{curves_svg, emit_curves, frechet_proxy, ms_ssim, parse_curves_csv, psnr, sweep_steps, EvalOptions, FeatureExtractor, RandomConvFeatures, FeatureStats, CURVE_METRICS, FEATURE_SEED};
use perco_core::models::{ModelBundle, ModelConfig};
use perco_core::pipeline::{
    caption_for, decode_image, decode_samples, encode_image, generate_dataset, model_guidance, pretrain_ae, read_ppm, train_codec, write_ppm, AeTrainConfig, PretrainedAe, Sample,
    ToyDatasetSpec, TrainConfig,
};
use perco_core::CodecError;
use perco_tensor::TensorError;

#[derive(Parser, Debug)]
#[command(name = "perco", version, about = "Perceptual image codec with a diffusion decoder")]
struct Cli {
    /// Seed for corpus generation, training or decoding.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// File of `key = value` model settings applied over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct CorpusArgs {
    /// Directory of P6 images with optional `.txt` captions; the toy corpus when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Toy corpus size.
    #[arg(long, default_value_t = 512)]
    count: usize,
    /// Toy image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Toy corpus seed.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the procedural toy corpus as numbered `.ppm` files with `.txt` captions.
    GenData {
        #[arg(long, default_value_t = 512)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Pretrain the tiny autoencoder and write its parameters.
    PretrainAe {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, default_value_t = 1500)]
        steps: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 2e-3)]
        lr: f64,
        #[arg(long, default_value = "ae.pckp")]
        out: PathBuf,
    },
    /// Train hyper-encoder, codebook and denoiser; writes a model directory.
    Train {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 200)]
        warmup: usize,
        #[arg(long, default_value_t = 0.01)]
        weight_decay: f64,
        /// Text-drop probability; the model's `drop_p` when absent.
        #[arg(long)]
        text_drop_p: Option<f64>,
        /// Save an intermediate checkpoint every N steps (0 = never).
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
        /// Weight of the optional SSIM auxiliary term (not part of the base objective).
        #[arg(long, default_value_t = 0.0)]
        ssim_weight: f64,
        /// Pretrained autoencoder, required when `ae_enabled = true`.
        #[arg(long)]
        ae: Option<PathBuf>,
        /// Extra `key=value` model settings, applied after `--config`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, default_value = "model")]
        out: PathBuf,
    },
    /// Compress one image to a PERC stream.
    Encode {
        #[arg(long = "in")]
        input: PathBuf,
        /// Caption file; otherwise a sidecar `.txt`, then `--caption`.
        #[arg(long)]
        caption_file: Option<PathBuf>,
        #[arg(long)]
        caption: Option<String>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "out.perc")]
        out: PathBuf,
    },
    /// Reconstruct an image from a PERC stream.
    Decode {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Denoising steps; 20 below 0.05 bpp and 5 otherwise when absent.
        #[arg(long)]
        steps: Option<usize>,
        /// none, text_only or text_and_spatial; the model's mode when absent.
        #[arg(long)]
        guidance: Option<GuidanceMode>,
        /// Guidance scale; the model's when absent.
        #[arg(long)]
        lambda: Option<f64>,
        /// Number of reconstructions; more than one writes `<stem>_<i>.ppm`.
        #[arg(long, default_value_t = 1)]
        samples: usize,
        #[arg(long, default_value = "rec.ppm")]
        out: PathBuf,
    },
    /// Score reconstructions against originals, one CSV row per image.
    Eval {
        /// Directory of reconstructed `.ppm` files.
        #[arg(long)]
        dir: PathBuf,
        /// Directory of originals with the same file names.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Directory of `<stem>.perc` streams for the rate column; `--dir` when absent.
        #[arg(long)]
        streams: Option<PathBuf>,
        /// Count container header bytes in the rate.
        #[arg(long)]
        bpp_with_header: bool,
        #[arg(long, default_value = "metrics.csv")]
        out: PathBuf,
    },
    /// Evaluate models over step counts and guidance modes; writes curves.
    Sweep {
        /// Model directory; repeat for several rate points.
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        /// Reference corpus for the realism proxy.
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Held-out directory; a toy corpus from `--eval-seed` when absent.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        eval_count: usize,
        #[arg(long, default_value_t = 1)]
        eval_seed: u64,
        /// Comma-separated step counts; the model default when absent.
        #[arg(long, value_delimiter = ',')]
        steps: Vec<usize>,
        /// Comma-separated guidance modes; the model's mode when absent.
        #[arg(long, value_delimiter = ',')]
        guidance: Vec<GuidanceMode>,
        #[arg(long, default_value_t = 8)]
        diversity_samples: usize,
        #[arg(long, default_value_t = 8)]
        diversity_images: usize,
        #[arg(long)]
        bpp_with_header: bool,
        #[arg(long, default_value = "curves")]
        out: PathBuf,
    },
    /// Render SVG curves from a sweep CSV.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value = "curves")]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Codec(CodecError),
}

impl From<CodecError> for Failure {
    fn from(e: CodecError) -> Self {
        Failure::Codec(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Codec(CodecError::Io(e))
    }
}

impl Failure {
    fn code_and_kind(&self) -> (u8, &'static str) {
        match self {
            Failure::Usage(_) => (2, "usage"),
            Failure::Codec(e) => match e {
                CodecError::Invalid(_) => (2, "invalid"),
                CodecError::Io(_) => (3, "io"),
                CodecError::Format { .. } => (3, "format"),
                CodecError::Mismatch(_) => (4, "mismatch"),
                CodecError::NonFinite(_) => (5, "nonfinite"),
                CodecError::Tensor(t) => match t {
                    TensorError::Io(_) => (3, "io"),
                    TensorError::Checkpoint(_) => (3, "format"),
                    TensorError::NonFiniteGradient { .. } => (5, "nonfinite"),
                    TensorError::Invalid { .. } => (2, "invalid"),
                    TensorError::Shape { .. } | TensorError::NonScalarLoss(_) => (4, "mismatch"),
                },
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) => m.clone(),
            Failure::Codec(e) => e.to_string(),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            return report(&Failure::Usage(first));
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Some(n) = std::env::var("PERCO_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    info!("resolved arguments: {cli:?}");
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(&f),
    }
}

/// One line on stderr: `error code=<n> kind=<kind> msg="<text>"`.
fn report(f: &Failure) -> ExitCode {
    let (code, kind) = f.code_and_kind();
    let msg = f.message().replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
    let _ = writeln!(std::io::stderr(), "error code={code} kind={kind} msg=\"{msg}\"");
    ExitCode::from(code)
}

fn run(cli: Cli) -> Outcome {
    let overrides = match &cli.config {
        Some(p) => Some(std::fs::read_to_string(p)?),
        None => None,
    };
    match cli.command {
        Command::GenData { count, size, out } => gen_data(count, size, cli.seed, &out),
        Command::PretrainAe { corpus, steps, batch, lr, out } => {
            let mut mc = ModelConfig::default();
            if let Some(text) = &overrides {
                mc.apply_text(text)?;
            }
            let cfg = AeTrainConfig {
                steps,
                batch,
                lr,
                seed: cli.seed,
                latent_channels: mc.ae_channels,
            };
            info!("autoencoder config: {cfg:?}");
            let data = load_corpus(&corpus)?;
            let ae = pretrain_ae(&data, &cfg, |step, loss| {
                if step % 100 == 0 || step == steps {
                    info!("step {step} mse {loss:.6}");
                }
            })?;
            create_parent(&out)?;
            std::fs::write(&out, ae.checkpoint_bytes()?)?;
            info!("wrote {}", out.display());
            Ok(())
        }
        Command::Train {
            corpus,
            steps,
            batch,
            lr,
            warmup,
            weight_decay,
            text_drop_p,
            checkpoint_every,
            ssim_weight,
            ae,
            set,
            out,
        } => {
            let mut mc = ModelConfig::default();
            if let Some(text) = &overrides {
                mc.apply_text(text)?;
            }
            for kv in &set {
                let (k, v) = kv.split_once('=').ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
                mc.set(k.trim(), v.trim())?;
            }
            mc.validate()?;
            let cfg = TrainConfig {
                steps,
                batch,
                lr,
                weight_decay,
                warmup: warmup.min(steps),
                text_drop_p,
                seed: cli.seed,
                checkpoint_every,
                checkpoint_dir: (checkpoint_every > 0).then(|| out.join("checkpoints")),
                ssim_weight,
                ..TrainConfig::default()
            };
            train(mc, cfg, &corpus, ae.as_deref(), &out)
        }
        Command::Encode { input, caption_file, caption, model, out } => {
            let bundle = load_model(&model, overrides.as_deref())?;
            let image = read_ppm(&input)?;
            let text = match caption_file {
                Some(p) => std::fs::read_to_string(p)?.trim().to_string(),
                None => caption_for(&input, caption.as_deref())?,
            };
            info!("caption: {text:?}");
            let ci = encode_image(&image, &text, &bundle)?;
            create_parent(&out)?;
            std::fs::write(&out, write_stream(&ci)?)?;
            info!("wrote {} ({:.6} bpp, {:.6} with header)", out.display(), bpp_total(&ci), bpp_with_header(&ci)?);
            Ok(())
        }
        Command::Decode {
            input,
            model,
            steps,
            guidance,
            lambda,
            samples,
            out,
        } => {
            let bundle = load_model(&model, overrides.as_deref())?;
            let ci = read_stream(&std::fs::read(&input)?)?;
            let n_steps = steps.unwrap_or_else(|| bundle.config.default_decode_steps());
            let mut g = model_guidance(&bundle);
            g.mode = guidance.unwrap_or(g.mode);
            g.lambda_s = lambda.unwrap_or(g.lambda_s);
            info!("decode: steps {n_steps}, guidance {}, lambda {}, seed {}, samples {samples}", g.mode, g.lambda_s, cli.seed);
            decode(&ci, &bundle, n_steps, cli.seed, g, samples, &out)
        }
        Command::Eval {
            dir,
            reference,
            streams,
            bpp_with_header,
            out,
        } => eval_dirs(&dir, &reference, streams.as_deref().unwrap_or(&dir), bpp_with_header, &out),
        Command::Sweep {
            models,
            corpus,
            eval_data,
            eval_count,
            eval_seed,
            steps,
            guidance,
            diversity_samples,
            diversity_images,
            bpp_with_header,
            out,
        } => {
            let reference = load_corpus(&corpus)?;
            let held_out = match eval_data {
                Some(d) => load_dir(&d)?,
                None => generate_dataset(&ToyDatasetSpec {
                    size: corpus.size,
                    count: eval_count,
                    seed: eval_seed,
                }),
            };
            let ref_images: Vec<_> = reference.iter().map(|s| s.image.clone()).collect();
            let mut reports = Vec::new();
            for dir in &models {
                let bundle = load_model(dir, overrides.as_deref())?;
                let label = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
                let ref_stats = FeatureExtractor::for_bundle(&bundle).stats(&ref_images)?;
                let steps_list = if steps.is_empty() { vec![bundle.config.default_decode_steps()] } else { steps.clone() };
                let modes = if guidance.is_empty() { vec![bundle.config.guidance] } else { guidance.clone() };
                for &mode in &modes {
                    let opts = EvalOptions {
                        guidance: GuidanceConfig {
                            lambda_s: bundle.config.lambda_s,
                            mode,
                        },
                        seed: cli.seed,
                        diversity_samples,
                        diversity_images,
                        with_header: bpp_with_header,
                        ..EvalOptions::default()
                    };
                    for r in sweep_steps(&bundle, &label, &held_out, &ref_stats, &steps_list, &opts)? {
                        info!("{}", r.summary());
                        reports.push(r);
                    }
                }
            }
            emit_curves(&reports, &out, "sweep")?;
            info!("wrote {}", out.join("sweep.csv").display());
            Ok(())
        }
        Command::Plot { csv, out } => {
            let reports = parse_curves_csv(&std::fs::read_to_string(&csv)?)?;
            std::fs::create_dir_all(&out)?;
            for m in CURVE_METRICS {
                std::fs::write(out.join(format!("curves_{m}.svg")), curves_svg(&reports, m))?;
            }
            info!("wrote {} curves to {}", CURVE_METRICS.len(), out.display());
            Ok(())
        }
    }
}

fn create_parent(path: &Path) -> std::io::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p),
        _ => Ok(()),
    }
}

fn gen_data(count: usize, size: usize, seed: u64, out: &Path) -> Outcome {
    if count == 0 || size == 0 {
        return Err(Failure::Usage("count and size must be positive".into()));
    }
    std::fs::create_dir_all(out)?;
    for (i, s) in generate_dataset(&ToyDatasetSpec { size, count, seed }).iter().enumerate() {
        write_ppm(&s.image, &out.join(format!("{i:05}.ppm")))?;
        std::fs::write(out.join(format!("{i:05}.txt")), format!("{}\n", s.caption))?;
    }
    info!("wrote {count} images to {}", out.display());
    Ok(())
}

fn sorted_ppms(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    paths.sort();
    Ok(paths)
}

fn load_dir(dir: &Path) -> Result<Vec<Sample>, Failure> {
    let paths = sorted_ppms(dir)?;
    if paths.is_empty() {
        return Err(CodecError::Invalid(format!("no .ppm files in {}", dir.display())).into());
    }
    paths
        .iter()
        .map(|p| {
            Ok(Sample {
                image: read_ppm(p)?,
                caption: caption_for(p, None)?,
                scene: None,
            })
        })
        .collect()
}

fn load_corpus(args: &CorpusArgs) -> Result<Vec<Sample>, Failure> {
    match &args.data {
        Some(d) => load_dir(d),
        None => Ok(generate_dataset(&ToyDatasetSpec {
            size: args.size,
            count: args.count,
            seed: args.data_seed,
        })),
    }
}

/// Load a model directory; `--config` may only change decode-time settings.
fn load_model(dir: &Path, overrides: Option<&str>) -> Result<ModelBundle<f32>, Failure> {
    let mut bundle = ModelBundle::<f32>::load(dir)?;
    if let Some(text) = overrides {
        let mut mc = bundle.config.clone();
        mc.apply_text(text)?;
        let decode_only = ModelConfig {
            lambda_s: bundle.config.lambda_s,
            guidance: bundle.config.guidance,
            ..mc.clone()
        };
        if decode_only != bundle.config {
            return Err(CodecError::Mismatch("--config may only set lambda_s and guidance for a trained model".into()).into());
        }
        bundle.config = mc;
    }
    for (k, v) in bundle.config.entries() {
        info!("model {k} = {v}");
    }
    Ok(bundle)
}

fn train(mc: ModelConfig, cfg: TrainConfig, corpus: &CorpusArgs, ae: Option<&Path>, out: &Path) -> Outcome {
    for (k, v) in mc.entries() {
        info!("model {k} = {v}");
    }
    for (k, v) in cfg.entries() {
        info!("train {k} = {v}");
    }
    let data = load_corpus(corpus)?;
    let mut bundle = ModelBundle::<f32>::new(mc, cfg.seed)?;
    match (bundle.config.ae_enabled, ae) {
        (true, Some(p)) => {
            let pre = PretrainedAe::from_checkpoint(&std::fs::read(p)?, bundle.config.ae_channels)?;
            bundle.load_autoencoder(&pre.params)?;
        }
        (true, None) => return Err(Failure::Usage("ae_enabled requires --ae".into())),
        (false, Some(_)) => return Err(Failure::Usage("--ae given but ae_enabled is false".into())),
        (false, None) => {}
    }
    let total = cfg.steps;
    let log = train_codec(&mut bundle, &data, &cfg, |r| {
        if r.step % 50 == 0 || r.step == total {
            info!("step {} loss {:.5} commit {:.5} usage {:.3} lr {:.2e}", r.step, r.loss, r.commit_loss, r.codebook_usage, r.lr);
        }
    })?;
    bundle.save(out)?;
    std::fs::write(out.join("train_log.csv"), log.to_csv())?;
    info!(
        "done: text-drop fraction {:.3}, final codebook usage {:.3}, {} dead-code resets",
        log.drop_fraction(),
        log.final_usage,
        log.resets.len()
    );
    info!("wrote {}", out.display());
    Ok(())
}

fn decode(ci: &perco_core::bitstream::CompressedImage, bundle: &ModelBundle<f32>, n_steps: usize, seed: u64, g: GuidanceConfig, samples: usize, out: &Path) -> Outcome {
    create_parent(out)?;
    match samples {
        0 => Err(Failure::Usage("--samples must be at least 1".into())),
        1 => {
            write_ppm(&decode_image(ci, bundle, n_steps, seed, g)?, out)?;
            info!("wrote {}", out.display());
            Ok(())
        }
        k => {
            let stem = out.file_stem().map_or("rec".into(), |s| s.to_string_lossy().into_owned());
            let ext = out.extension().map_or("ppm".into(), |s| s.to_string_lossy().into_owned());
            for (i, img) in decode_samples(ci, bundle, n_steps, seed, g, k)?.iter().enumerate() {
                let p = out.with_file_name(format!("{stem}_{i}.{ext}"));
                write_ppm(img, &p)?;
                info!("wrote {}", p.display());
            }
            Ok(())
        }
    }
}

fn eval_dirs(dir: &Path, reference: &Path, streams: &Path, with_header: bool, out: &Path) -> Outcome {
    let recon_paths = sorted_ppms(dir)?;
    if recon_paths.is_empty() {
        return Err(CodecError::Invalid(format!("no .ppm files in {}", dir.display())).into());
    }
    let mut csv = String::from("image,bpp,psnr,ms_ssim,ms_ssim_scales\n");
    let (mut recon, mut originals) = (Vec::new(), Vec::new());
    for p in &recon_paths {
        let name = p.file_name().unwrap();
        let rec = read_ppm(p)?;
        let orig = read_ppm(&reference.join(name))?;
        let stream = streams.join(Path::new(name).with_extension("perc"));
        let bpp = if stream.is_file() {
            let ci = read_stream(&std::fs::read(&stream)?)?;
            let b = if with_header { bpp_with_header(&ci)? } else { bpp_total(&ci) };
            b.to_string()
        } else {
            String::new()
        };
        let p_ = psnr(&orig, &rec)?;
        let m = ms_ssim(&orig, &rec)?;
        csv.push_str(&format!("{},{bpp},{p_},{},{}\n", name.to_string_lossy(), m.value, m.scales));
        recon.push(rec);
        originals.push(orig);
    }
    if recon.len() >= 2 {
        let fx = RandomConvFeatures::new(FEATURE_SEED);
        let a = FeatureStats::from_features(&fx.features(&recon)?)?;
        let b = FeatureStats::from_features(&fx.features(&originals)?)?;
        info!("realism proxy over {} images: {:.6}", recon.len(), frechet_proxy(&a, &b)?);
    }
    create_parent(out)?;
    std::fs::write(out, csv)?;
    info!("wrote {}", out.display());
    Ok(())
}
