//! `hdrcycle` command-line interface: training, inference in both
//! directions, tone mapping, saliency map export and paired evaluation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hdrcycle_core::imagecore::{
    load_image, save_image, HdrImage, ImageKind, LdrImage, LoadedImage, UnpairedDataset,
};
use hdrcycle_core::perception::{
    heuristic_artifact_mask, heuristic_exposure_masks, remote::RemoteProvider, HeuristicParams,
    HeuristicProvider, PerceptionProvider,
};
use hdrcycle_core::tonemap::{inverse_mu_law, mu_law, normalize_peak, reinhard, ToneMapParams};
use hdrcycle_core::trainer::{
    evaluate, load_training_state, train, Models, Optimizers, TrainConfig,
};
use hdrcycle_core::generator::FusionInputs;
use ndarray::Array3;

#[derive(Parser)]
#[command(name = "hdrcycle", version, about = "Unpaired LDR<->HDR translation toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file applied before flag overrides.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Square working resolution.
    #[arg(long, global = true)]
    size: Option<usize>,
    /// Compute device (only `cpu` is available).
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    #[arg(long, global = true, value_enum, default_value_t = Provider::Heuristic)]
    provider: Provider,
    /// Shrunken model profile.
    #[arg(long, global = true)]
    toy: bool,
    /// Disable the contrastive loss.
    #[arg(long = "no-con", global = true)]
    no_con: bool,
    /// Disable the semantic segmentation loss.
    #[arg(long = "no-sem", global = true)]
    no_sem: bool,
    /// Disable the perception loss.
    #[arg(long = "no-llm", global = true)]
    no_llm: bool,
    /// Disable the identity loss.
    #[arg(long = "no-id", global = true)]
    no_id: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Provider {
    Heuristic,
    Remote,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full model on unpaired LDR/HDR directories.
    Train {
        #[arg(long)]
        ldr: PathBuf,
        #[arg(long)]
        hdr: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Translate an LDR image (PNG/JPEG) to HDR (.pfm or .hdr).
    Ldr2hdr {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Translate an HDR image (.pfm or .hdr) to LDR (PNG).
    Hdr2ldr {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tone-map between HDR and LDR files.
    Tonemap {
        #[arg(long, value_enum)]
        op: TonemapOp,
        #[arg(long, default_value_t = 5000.0)]
        mu: f32,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write heuristic saliency maps (artifact/over/under) as PNGs.
    Saliency {
        #[arg(long = "in")]
        input: PathBuf,
        /// Output prefix; `<prefix>_artifact.png` etc. are written.
        #[arg(long)]
        out_prefix: PathBuf,
    },
    /// Evaluate a checkpoint on paired LDR/HDR directories (sorted order).
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        ldr: PathBuf,
        #[arg(long)]
        hdr: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TonemapOp {
    /// mu-law HDR -> LDR.
    Mu,
    /// Inverse mu-law LDR -> HDR.
    InverseMu,
    /// Reinhard HDR -> LDR.
    Reinhard,
}

fn build_config(common: &Common) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    if common.toy {
        cfg.toy = true;
        if common.config.is_none() && common.size.is_none() {
            cfg.image_size = 64;
        }
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    } else if let Ok(env_seed) = std::env::var("HDRCYCLE_SEED") {
        cfg.seed = env_seed.parse().context("bad HDRCYCLE_SEED")?;
    }
    if let Some(size) = common.size {
        cfg.image_size = size;
    }
    cfg.ablation.con = cfg.ablation.con && !common.no_con;
    cfg.ablation.sem = cfg.ablation.sem && !common.no_sem;
    cfg.ablation.llm = cfg.ablation.llm && !common.no_llm;
    cfg.ablation.id = cfg.ablation.id && !common.no_id;
    if common.device != "cpu" {
        bail!("unsupported device {:?}; only `cpu` is available", common.device);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn make_provider(common: &Common) -> anyhow::Result<Box<dyn PerceptionProvider>> {
    Ok(match common.provider {
        Provider::Heuristic => Box::new(HeuristicProvider::default()),
        Provider::Remote => Box::new(RemoteProvider::from_env(HeuristicProvider::default())?),
    })
}

fn load_models(ckpt: &Path, cfg: &TrainConfig) -> anyhow::Result<Models> {
    let models = Models::new(cfg)?;
    let mut opts = Optimizers::new();
    load_training_state(ckpt, &models, &mut opts)
        .with_context(|| format!("loading checkpoint {} (is --toy/--size right?)", ckpt.display()))?;
    Ok(models)
}

fn load_ldr_file(path: &Path) -> anyhow::Result<LdrImage> {
    match load_image(path, ImageKind::Ldr)? {
        LoadedImage::Ldr(img) => Ok(img),
        LoadedImage::Hdr(_) => bail!("{} is not an LDR image", path.display()),
    }
}

fn load_hdr_file(path: &Path) -> anyhow::Result<HdrImage> {
    match load_image(path, ImageKind::Hdr)? {
        LoadedImage::Hdr(img) => Ok(img),
        LoadedImage::Ldr(_) => bail!("{} is not an HDR image", path.display()),
    }
}

fn sorted_images(dir: &Path, kind: ImageKind) -> anyhow::Result<Vec<PathBuf>> {
    let exts: &[&str] = match kind {
        ImageKind::Ldr => &["png", "jpg", "jpeg"],
        ImageKind::Hdr => &["pfm", "hdr"],
    };
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| exts.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn mask_to_ldr(mask: &ndarray::Array2<f32>) -> anyhow::Result<LdrImage> {
    let (h, w) = mask.dim();
    let pixels = Array3::from_shape_fn((3, h, w), |(_, y, x)| mask[[y, x]].clamp(0.0, 1.0));
    Ok(LdrImage::new(pixels, 8)?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = build_config(&cli.common)?;
    match cli.command {
        Command::Train { ldr, hdr, out, resume } => {
            let dataset = UnpairedDataset::from_dirs(&ldr, &hdr, cfg.seed)?;
            let provider = make_provider(&cli.common)?;
            let outcome = train(&cfg, &dataset, provider.as_ref(), &out, resume.as_deref())?;
            eprintln!(
                "trained {} steps; checkpoint {}",
                outcome.steps,
                outcome.checkpoint_path.display()
            );
        }
        Command::Ldr2hdr { ckpt, input, out } => {
            let models = load_models(&ckpt, &cfg)?;
            let img =
                hdrcycle_core::imagecore::resize_ldr(&load_ldr_file(&input)?, cfg.image_size, cfg.image_size)?;
            let pixels = models.gen_y.infer(img.pixels(), &FusionInputs::neutral())?;
            save_image(&LoadedImage::Hdr(HdrImage::new(pixels)?), &out)?;
        }
        Command::Hdr2ldr { ckpt, input, out } => {
            let models = load_models(&ckpt, &cfg)?;
            let img = hdrcycle_core::imagecore::resize_hdr(
                &load_hdr_file(&input)?,
                cfg.image_size,
                cfg.image_size,
            )?;
            let tm = hdrcycle_core::trainer::tone_map_hdr(&img, cfg.mu)?;
            let pixels = models.gen_x.infer(&tm, &FusionInputs::neutral())?;
            save_image(&LoadedImage::Ldr(LdrImage::new(pixels, 8)?), &out)?;
        }
        Command::Tonemap { op, mu, input, out } => match op {
            TonemapOp::Mu => {
                let (scaled, _) = normalize_peak(&load_hdr_file(&input)?);
                let ldr = mu_law(&scaled, ToneMapParams::new(mu)?)?;
                save_image(&LoadedImage::Ldr(ldr), &out)?;
            }
            TonemapOp::InverseMu => {
                let hdr = inverse_mu_law(&load_ldr_file(&input)?, ToneMapParams::new(mu)?)?;
                save_image(&LoadedImage::Hdr(hdr), &out)?;
            }
            TonemapOp::Reinhard => {
                let ldr = reinhard(&load_hdr_file(&input)?);
                save_image(&LoadedImage::Ldr(ldr), &out)?;
            }
        },
        Command::Saliency { input, out_prefix } => {
            let img = load_ldr_file(&input)?;
            let p = HeuristicParams::default();
            let artifact = heuristic_artifact_mask(img.pixels(), p.blur_sigma, p.lap_threshold)?;
            let (over, under) = heuristic_exposure_masks(img.pixels(), p.t_over, p.t_under)?;
            let prefix = out_prefix.to_string_lossy();
            for (name, mask) in
                [("artifact", &artifact), ("over", &over), ("under", &under)]
            {
                save_image(
                    &LoadedImage::Ldr(mask_to_ldr(mask)?),
                    Path::new(&format!("{prefix}_{name}.png")),
                )?;
            }
        }
        Command::Eval { ckpt, ldr, hdr } => {
            let models = load_models(&ckpt, &cfg)?;
            let ldr_files = sorted_images(&ldr, ImageKind::Ldr)?;
            let hdr_files = sorted_images(&hdr, ImageKind::Hdr)?;
            if ldr_files.len() != hdr_files.len() {
                bail!(
                    "paired evaluation needs equal counts: {} LDR vs {} HDR",
                    ldr_files.len(),
                    hdr_files.len()
                );
            }
            let mut pairs = Vec::new();
            for (lp, hp) in ldr_files.iter().zip(&hdr_files) {
                pairs.push((load_ldr_file(lp)?, load_hdr_file(hp)?));
            }
            let report = evaluate(&models, &pairs, &cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // usage problems exit 1; --help/--version exit 0
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
