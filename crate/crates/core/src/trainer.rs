//! Optimization loop: alternating discriminator/generator updates, LR
//! schedule, per-epoch perception refresh, checkpointing and evaluation.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayD, Axis, IxDyn};
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{CoreError, Result};
use crate::generator::{Direction, FusionInputs, Generator, GeneratorConfig, OutputEmbedder};
use crate::imagecore::{
    equalize_histogram, resize_hdr, resize_ldr, Batch, HdrImage, LdrImage, UnpairedDataset,
};
use crate::losses::{
    adversarial_losses, contrastive_loss_var, cycle_loss, identity_loss, llm_loss_var,
    semantic_loss, soft_fractions_var, total_loss, Ablation, LossBreakdown, LossParts, LossWeights,
};
use crate::metrics::{psnr, ssim};
use crate::nn::{init_rng, Adam, Param, ParamStore};
use crate::perception::{
    refresh_cache, HeuristicParams, PerceptionCache, PerceptionProvider, Role, SaliencyTriplet,
};
use crate::semantics::{
    miou, EmbeddingEncoder, ProjectionFusion, Segmenter, StandInEncoder, StubSegmenter,
};
use crate::tonemap::{mu_law, normalize_peak, normalized_mu_law_var, ToneMapParams};

/// Adam moments for adversarial training.
pub const ADAM_BETAS: (f32, f32) = (0.5, 0.999);

/// Full run configuration. Defaults follow the published training protocol;
/// [`TrainConfig::toy_profile`] shrinks everything to CPU test scale.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    /// LR held constant this many epochs, then decays linearly to 0.
    pub constant_epochs: usize,
    pub lr_g: f32,
    pub lr_d: f32,
    pub batch: usize,
    pub image_size: usize,
    pub seed: u64,
    pub mu: f32,
    pub checkpoint_every: usize,
    /// Shrunken model profile for CPU smoke runs.
    pub toy: bool,
    pub weights: LossWeights,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 170,
            constant_epochs: 100,
            lr_g: 4e-4,
            lr_d: 2e-4,
            batch: 4,
            image_size: 512,
            seed: 0,
            mu: 5000.0,
            checkpoint_every: 10,
            toy: false,
            weights: LossWeights::default(),
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn toy_profile() -> Self {
        TrainConfig { image_size: 64, toy: true, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(CoreError::Parameter("epochs must be >= 1".into()));
        }
        if self.constant_epochs > self.epochs {
            return Err(CoreError::Parameter(format!(
                "constant_epochs {} exceeds epochs {}",
                self.constant_epochs, self.epochs
            )));
        }
        if self.batch < 2 {
            return Err(CoreError::Parameter(
                "batch must be >= 2 (contrastive loss needs in-batch negatives)".into(),
            ));
        }
        if self.lr_g <= 0.0 || self.lr_d <= 0.0 {
            return Err(CoreError::Parameter("learning rates must be positive".into()));
        }
        let s = self.image_size;
        if s < 32 || s % 16 != 0 || !(s / 16).is_power_of_two() {
            return Err(CoreError::Parameter(format!(
                "image_size must be 16*2^k and >= 32, got {s}"
            )));
        }
        if self.checkpoint_every == 0 {
            return Err(CoreError::Parameter("checkpoint_every must be >= 1".into()));
        }
        self.weights.validate()
    }

    /// Apply one `key=value` override (config file line or CLI flag).
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| CoreError::Config(format!("bad value {value:?} for key {key:?}")))
        }
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "constant_epochs" => self.constant_epochs = num(key, value)?,
            "lr_g" => self.lr_g = num(key, value)?,
            "lr_d" => self.lr_d = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "image_size" => self.image_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "mu" => self.mu = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "toy" => self.toy = num(key, value)?,
            "con" => self.ablation.con = num(key, value)?,
            "sem" => self.ablation.sem = num(key, value)?,
            "llm" => self.ablation.llm = num(key, value)?,
            "id" => self.ablation.id = num(key, value)?,
            "fusion" => self.ablation.fusion = num(key, value)?,
            "saturating_gan" => self.ablation.saturating_gan = num(key, value)?,
            "lambda_cyc" => self.weights.lambda_cyc = num(key, value)?,
            "id_weight" => self.weights.id_weight = num(key, value)?,
            "alpha" => self.weights.alpha = num(key, value)?,
            "beta" => self.weights.beta = num(key, value)?,
            "delta1" => self.weights.delta1 = num(key, value)?,
            "delta2" => self.weights.delta2 = num(key, value)?,
            "delta3" => self.weights.delta3 = num(key, value)?,
            "tau" => self.weights.tau = num(key, value)?,
            "llm_weight" => self.weights.llm_weight = num(key, value)?,
            _ => return Err(CoreError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Load a flat `key = value` config file on top of the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let text = std::fs::read_to_string(path)?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CoreError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            cfg.apply_kv(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrWhich {
    Generator,
    Discriminator,
}

/// Constant base LR through `constant_epochs`, then linear decay reaching 0
/// at `epochs`. `epoch == epochs` is allowed and yields 0.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig, which: LrWhich) -> Result<f32> {
    if epoch > cfg.epochs {
        return Err(CoreError::Parameter(format!(
            "epoch {epoch} out of range 0..={}",
            cfg.epochs
        )));
    }
    let base = match which {
        LrWhich::Generator => cfg.lr_g,
        LrWhich::Discriminator => cfg.lr_d,
    };
    if epoch < cfg.constant_epochs {
        return Ok(base);
    }
    let span = cfg.epochs - cfg.constant_epochs;
    if span == 0 {
        return Ok(0.0);
    }
    Ok(base * (cfg.epochs - epoch) as f32 / span as f32)
}

/// The four networks plus the shared embedding machinery, all parameters in
/// one store (`gY/`, `gX/`, `dY/`, `dX/`, `fusion/` prefixes).
pub struct Models {
    pub store: ParamStore,
    pub gen_y: Generator,
    pub gen_x: Generator,
    pub disc_y: Discriminator,
    pub disc_x: Discriminator,
    pub fusion: ProjectionFusion,
    pub encoder: StandInEncoder,
    pub segmenter: StubSegmenter,
}

impl Models {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = init_rng(cfg.seed);
        let (gy_cfg, gx_cfg, d_cfg) = if cfg.toy {
            (
                GeneratorConfig::toy(Direction::LdrToHdr),
                GeneratorConfig::toy(Direction::HdrToLdr),
                DiscriminatorConfig::toy(),
            )
        } else {
            (
                GeneratorConfig::with_direction(Direction::LdrToHdr),
                GeneratorConfig::with_direction(Direction::HdrToLdr),
                DiscriminatorConfig::default(),
            )
        };
        let gen_y = Generator::new(&mut store, "gY", gy_cfg, &mut rng)?;
        let gen_x = Generator::new(&mut store, "gX", gx_cfg, &mut rng)?;
        let disc_y = Discriminator::new(&mut store, "dY", d_cfg.clone(), &mut rng)?;
        let disc_x = Discriminator::new(&mut store, "dX", d_cfg, &mut rng)?;
        let fusion = ProjectionFusion::new(&mut store, "fusion/proj", &mut rng);
        Ok(Models {
            store,
            gen_y,
            gen_x,
            disc_y,
            disc_x,
            fusion,
            encoder: StandInEncoder::new(cfg.seed),
            segmenter: StubSegmenter::default(),
        })
    }

    fn params_with_prefixes<'a>(
        &'a self,
        prefixes: &'a [&'a str],
    ) -> impl Iterator<Item = &'a Param> {
        self.store
            .trainable()
            .filter(move |p| prefixes.iter().any(|pre| p.name().starts_with(pre)))
    }

    pub fn generator_params(&self) -> impl Iterator<Item = &Param> {
        self.params_with_prefixes(&["gY/", "gX/", "fusion/"])
    }
}

pub struct Optimizers {
    pub adam_g: Adam,
    pub adam_d: Adam,
}

impl Optimizers {
    pub fn new() -> Self {
        Optimizers {
            adam_g: Adam::new(ADAM_BETAS.0, ADAM_BETAS.1),
            adam_d: Adam::new(ADAM_BETAS.0, ADAM_BETAS.1),
        }
    }
}

impl Default for Optimizers {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-iteration embedding of intermediate generator outputs: detach,
/// tone-map HDR outputs into `[0,1]`, encode, project to the fused width.
struct OutputEmbed<'a> {
    fusion: &'a ProjectionFusion,
    encoder: &'a StandInEncoder,
    tone_map_mu: Option<f32>,
}

impl OutputEmbedder for OutputEmbed<'_> {
    fn embed(&self, g: &Graph, output: &Var) -> Result<Var> {
        let mut o = output.detach();
        if let Some(mu) = self.tone_map_mu {
            o = normalized_mu_law_var(&o, mu);
        }
        let e = self.encoder.encode_var(g, &o)?;
        Ok(self.fusion.project(g, &e))
    }
}

fn stack_images(imgs: &[Array3<f32>]) -> ArrayD<f32> {
    let (c, h, w) = imgs[0].dim();
    let mut out = ArrayD::zeros(IxDyn(&[imgs.len(), c, h, w]));
    for (i, img) in imgs.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&img.clone().into_dyn());
    }
    out
}

fn sample_pixels(batch: &Var, i: usize) -> Array3<f32> {
    batch
        .value()
        .index_axis_move(Axis(0), i)
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap()
}

/// Per-image peak normalization plus mu-law, as plain pixels.
pub fn tone_map_hdr(img: &HdrImage, mu: f32) -> Result<Array3<f32>> {
    let (scaled, _) = normalize_peak(img);
    Ok(mu_law(&scaled, ToneMapParams::new(mu)?)?.into_pixels())
}

fn check_finite_grads(models: &Models, stage: &str) -> Result<()> {
    for p in models.store.trainable() {
        if p.grad().iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Diverged(format!(
                "non-finite gradient for {} during {stage} update",
                p.name()
            )));
        }
    }
    Ok(())
}

struct PreparedBatch {
    x: Vec<Array3<f32>>,
    x_eq: Vec<LdrImage>,
    y_tm: Vec<Array3<f32>>,
    x_keys: Vec<String>,
    y_keys: Vec<String>,
}

fn prepare_batch(batch: &Batch, cfg: &TrainConfig) -> Result<PreparedBatch> {
    if batch.ldr.len() != batch.hdr.len() {
        return Err(CoreError::Batch(format!(
            "unbalanced batch: {} LDR vs {} HDR",
            batch.ldr.len(),
            batch.hdr.len()
        )));
    }
    if batch.ldr.len() < 2 {
        return Err(CoreError::Batch("batch must contain at least 2 samples".into()));
    }
    let s = cfg.image_size;
    let mut x = Vec::new();
    let mut x_eq = Vec::new();
    let mut y_tm = Vec::new();
    let mut x_keys = Vec::new();
    let mut y_keys = Vec::new();
    for (id, img) in &batch.ldr {
        let img = resize_ldr(img, s, s)?;
        x_eq.push(equalize_histogram(&img));
        x.push(img.into_pixels());
        x_keys.push(format!("x{id}"));
    }
    for (id, img) in &batch.hdr {
        let img = resize_hdr(img, s, s)?;
        y_tm.push(tone_map_hdr(&img, cfg.mu)?);
        y_keys.push(format!("y{id}"));
    }
    Ok(PreparedBatch { x, x_eq, y_tm, x_keys, y_keys })
}

fn cached_saliency(
    cache: &PerceptionCache,
    keys: &[String],
    size: usize,
) -> Option<Vec<SaliencyTriplet>> {
    cache.epoch()?;
    Some(keys.iter().map(|k| cache.saliency_or_neutral(k, size, size)).collect())
}

/// One optimization step: D_Y, then D_X, then both generators jointly.
pub fn train_step(
    models: &Models,
    opts: &mut Optimizers,
    cache: &PerceptionCache,
    cfg: &TrainConfig,
    batch: &Batch,
    lr_g: f32,
    lr_d: f32,
) -> Result<LossBreakdown> {
    let prep = prepare_batch(batch, cfg)?;
    let s = cfg.image_size;
    let g = Graph::new();
    let w = &cfg.weights;
    let ab = &cfg.ablation;

    let x_v = g.constant(stack_images(&prep.x));
    let x_eq_v = g.constant(stack_images(
        &prep.x_eq.iter().map(|i| i.pixels().clone()).collect::<Vec<_>>(),
    ));
    let y_tm_v = g.constant(stack_images(&prep.y_tm));

    let embed_y = OutputEmbed {
        fusion: &models.fusion,
        encoder: &models.encoder,
        tone_map_mu: Some(cfg.mu),
    };
    let embed_x =
        OutputEmbed { fusion: &models.fusion, encoder: &models.encoder, tone_map_mu: None };
    let (embedder_y, embedder_x): (Option<&dyn OutputEmbedder>, Option<&dyn OutputEmbedder>) =
        if ab.fusion { (Some(&embed_y), Some(&embed_x)) } else { (None, None) };

    let input_embed = |input: &Var| -> Result<Option<Var>> {
        if !ab.fusion {
            return Ok(None);
        }
        let e = models.encoder.encode_var(&g, &input.detach())?;
        Ok(Some(models.fusion.project(&g, &e)))
    };

    // forward cycle: x -> fake_y -> x_rt
    let fus_xy = FusionInputs {
        saliency: cached_saliency(cache, &prep.x_keys, s),
        input_embedding: input_embed(&x_v)?,
    };
    let fake_y = models.gen_y.forward(&g, &x_v, &fus_xy, embedder_y, true)?.output;
    let fake_y_tm = normalized_mu_law_var(&fake_y, cfg.mu);
    let fus_rt_x =
        FusionInputs { saliency: None, input_embedding: input_embed(&fake_y_tm)? };
    let x_rt = models.gen_x.forward(&g, &fake_y_tm, &fus_rt_x, embedder_x, true)?.output;

    // backward cycle: y -> fake_x -> y_rt
    let fus_yx = FusionInputs {
        saliency: cached_saliency(cache, &prep.y_keys, s),
        input_embedding: input_embed(&y_tm_v)?,
    };
    let fake_x = models.gen_x.forward(&g, &y_tm_v, &fus_yx, embedder_x, true)?.output;
    let fus_rt_y = FusionInputs { saliency: None, input_embedding: input_embed(&fake_x)? };
    let y_rt = models.gen_y.forward(&g, &fake_x, &fus_rt_y, embedder_y, true)?.output;
    let y_rt_tm = normalized_mu_law_var(&y_rt, cfg.mu);

    // discriminators: reals, detached fakes (D update), live fakes (G update)
    let d_real_y = models.disc_y.forward(&g, &y_tm_v, true)?;
    let d_fake_y_det = models.disc_y.forward(&g, &fake_y_tm.detach(), true)?;
    let d_fake_y = models.disc_y.forward(&g, &fake_y_tm, true)?;
    let d_real_x = models.disc_x.forward(&g, &x_v, true)?;
    let d_fake_x_det = models.disc_x.forward(&g, &fake_x.detach(), true)?;
    let d_fake_x = models.disc_x.forward(&g, &fake_x, true)?;

    let (d_loss_y, _) = adversarial_losses(&d_real_y, &d_fake_y_det, ab.saturating_gan);
    let (_, gan_g_y) = adversarial_losses(&d_real_y, &d_fake_y, ab.saturating_gan);
    let (d_loss_x, _) = adversarial_losses(&d_real_x, &d_fake_x_det, ab.saturating_gan);
    let (_, gan_g_x) = adversarial_losses(&d_real_x, &d_fake_x, ab.saturating_gan);

    let cycle = cycle_loss(&x_v, &x_rt, &y_tm_v, &y_rt_tm)?;

    let identity = if ab.id {
        let fus_id_y = FusionInputs { saliency: None, input_embedding: input_embed(&y_tm_v)? };
        let gy_on_y = models.gen_y.forward(&g, &y_tm_v, &fus_id_y, embedder_y, true)?.output;
        let fus_id_x = FusionInputs { saliency: None, input_embedding: input_embed(&x_v)? };
        let gx_on_x = models.gen_x.forward(&g, &x_v, &fus_id_x, embedder_x, true)?.output;
        Some(identity_loss(&normalized_mu_law_var(&gy_on_y, cfg.mu), &y_tm_v, &gx_on_x, &x_v)?)
    } else {
        None
    };

    let contrastive = if ab.con {
        let con_f = contrastive_loss_var(
            &g,
            &models.encoder.encode_var(&g, &x_eq_v)?,
            &models.encoder.encode_var(&g, &fake_y_tm)?,
            w.tau,
        )?;
        let con_b = contrastive_loss_var(
            &g,
            &models.encoder.encode_var(&g, &fake_x)?,
            &models.encoder.encode_var(&g, &y_tm_v)?,
            w.tau,
        )?;
        Some(con_f.add(&con_b).mul_scalar(0.5))
    } else {
        None
    };

    let semantic = if ab.sem {
        let n = prep.x.len();
        let mut acc = 0.0f32;
        for i in 0..n {
            let seg_x = models.segmenter.segment(prep.x_eq[i].pixels())?;
            let seg_fy = models.segmenter.segment(&sample_pixels(&fake_y_tm, i))?;
            acc += semantic_loss(&seg_x, &seg_fy)?;
            let fx = sample_pixels(&fake_x, i);
            let fx_eq = equalize_histogram(&LdrImage::new(fx, 8)?);
            let seg_fx = models.segmenter.segment(fx_eq.pixels())?;
            let seg_y = models.segmenter.segment(&prep.y_tm[i])?;
            acc += semantic_loss(&seg_fx, &seg_y)?;
        }
        Some(acc / (2 * n) as f32)
    } else {
        None
    };

    // perception loss waits for the first cache refresh; epoch 0 runs neutral
    let llm = if ab.llm && cache.epoch().is_some() {
        let p = HeuristicParams::default();
        let (af_y, ox_y, ux_y) = soft_fractions_var(&g, &fake_y_tm, &p)?;
        let (af_x, ox_x, ux_x) = soft_fractions_var(&g, &fake_x, &p)?;
        let l_y = llm_loss_var(&af_y, &ox_y, &ux_y, w, Role::HdrOutput);
        let l_x = llm_loss_var(&af_x, &ox_x, &ux_x, w, Role::LdrOutput);
        Some(l_y.add(&l_x).mul_scalar(0.5))
    } else {
        None
    };

    let parts = LossParts {
        gan_g_y,
        gan_g_x,
        cycle,
        identity,
        contrastive,
        semantic,
        llm,
    };
    let total = total_loss(&g, &parts, w);

    let breakdown = LossBreakdown {
        d_y: d_loss_y.scalar_value(),
        d_x: d_loss_x.scalar_value(),
        gan_g_y: parts.gan_g_y.scalar_value(),
        gan_g_x: parts.gan_g_x.scalar_value(),
        cycle: parts.cycle.scalar_value(),
        identity: parts.identity.as_ref().map_or(0.0, Var::scalar_value),
        contrastive: parts.contrastive.as_ref().map_or(0.0, Var::scalar_value),
        semantic: parts.semantic.unwrap_or(0.0),
        llm: parts.llm.as_ref().map_or(0.0, Var::scalar_value),
        total: total.scalar_value(),
    };
    if !breakdown.total.is_finite() || !breakdown.d_y.is_finite() || !breakdown.d_x.is_finite() {
        return Err(CoreError::Diverged(format!("non-finite loss: {breakdown:?}")));
    }

    models.store.zero_grads();
    g.backward(&d_loss_y);
    check_finite_grads(models, "D_Y")?;
    opts.adam_d.step(models.params_with_prefixes(&["dY/"]), lr_d);

    models.store.zero_grads();
    g.backward(&d_loss_x);
    check_finite_grads(models, "D_X")?;
    opts.adam_d.step(models.params_with_prefixes(&["dX/"]), lr_d);

    models.store.zero_grads();
    g.backward(&total);
    check_finite_grads(models, "generator")?;
    opts.adam_g.step(models.generator_params(), lr_g);
    models.store.zero_grads();

    Ok(breakdown)
}

/// Re-run both generators over the whole dataset and refresh the perception
/// cache from their current outputs.
pub fn refresh_perception(
    models: &Models,
    dataset: &UnpairedDataset,
    provider: &dyn PerceptionProvider,
    cache: &mut PerceptionCache,
    cfg: &TrainConfig,
    epoch: u64,
) -> Result<()> {
    let s = cfg.image_size;
    let mut outputs = Vec::new();
    for id in 0..dataset.ldr_len() {
        let img = resize_ldr(&dataset.load_ldr(id)?, s, s)?;
        let out = models.gen_y.infer(img.pixels(), &FusionInputs::neutral())?;
        let out_tm = tone_map_hdr(&HdrImage::new(out)?, cfg.mu)?;
        outputs.push((format!("x{id}"), out_tm, Role::HdrOutput));
    }
    for id in 0..dataset.hdr_len() {
        let img = resize_hdr(&dataset.load_hdr(id)?, s, s)?;
        let tm = tone_map_hdr(&img, cfg.mu)?;
        let out = models.gen_x.infer(&tm, &FusionInputs::neutral())?;
        outputs.push((format!("y{id}"), out, Role::LdrOutput));
    }
    refresh_cache(cache, &outputs, provider, epoch)
}

#[derive(Debug, Clone, Serialize)]
struct LogRecord {
    epoch: usize,
    step: u64,
    lr_g: f32,
    lr_d: f32,
    #[serde(flatten)]
    losses: LossBreakdown,
}

/// Outcome summary of a [`train`] run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub steps: u64,
    pub last: Option<LossBreakdown>,
    pub log_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

fn checkpoint_tensors(models: &Models, opts: &Optimizers) -> Vec<(String, ArrayD<f32>)> {
    let mut tensors: Vec<(String, ArrayD<f32>)> =
        models.store.iter().map(|p| (p.name(), p.value().clone())).collect();
    let (_, g_state) = opts.adam_g.export_state();
    for (name, m, v) in g_state {
        tensors.push((format!("adam_g/m/{name}"), m));
        tensors.push((format!("adam_g/v/{name}"), v));
    }
    let (_, d_state) = opts.adam_d.export_state();
    for (name, m, v) in d_state {
        tensors.push((format!("adam_d/m/{name}"), m));
        tensors.push((format!("adam_d/v/{name}"), v));
    }
    tensors
}

/// Write a checkpoint capturing models, both optimizers and progress.
pub fn save_training_state(
    path: &Path,
    models: &Models,
    opts: &Optimizers,
    cfg: &TrainConfig,
    epoch: usize,
    step: u64,
) -> Result<()> {
    let meta = CheckpointMeta {
        seed: cfg.seed,
        epoch,
        step,
        adam_g_step: opts.adam_g.step_count(),
        adam_d_step: opts.adam_d.step_count(),
    };
    save_checkpoint(path, &meta, &checkpoint_tensors(models, opts))
}

/// Restore models and optimizers from a checkpoint; returns its metadata.
pub fn load_training_state(
    path: &Path,
    models: &Models,
    opts: &mut Optimizers,
) -> Result<CheckpointMeta> {
    let (meta, tensors) = load_checkpoint(path)?;
    let mut adam_g = Vec::new();
    let mut adam_d = Vec::new();
    let mut moments: std::collections::HashMap<String, (Option<ArrayD<f32>>, Option<ArrayD<f32>>)> =
        std::collections::HashMap::new();
    for (name, arr) in tensors {
        if let Some(rest) = name.strip_prefix("adam_g/m/").or(name.strip_prefix("adam_d/m/")) {
            moments.entry(format!("{}/{rest}", &name[..6])).or_default().0 = Some(arr);
        } else if let Some(rest) =
            name.strip_prefix("adam_g/v/").or(name.strip_prefix("adam_d/v/"))
        {
            moments.entry(format!("{}/{rest}", &name[..6])).or_default().1 = Some(arr);
        } else {
            let p = models.store.get(&name).ok_or_else(|| {
                CoreError::Checkpoint(format!("checkpoint tensor {name} has no matching parameter"))
            })?;
            if p.value().shape() != arr.shape() {
                return Err(CoreError::Checkpoint(format!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    p.value().shape(),
                    arr.shape()
                )));
            }
            p.set_value(arr);
        }
    }
    for (key, (m, v)) in moments {
        let (which, name) = key.split_at(7);
        let m = m.ok_or_else(|| CoreError::Checkpoint(format!("missing first moment for {name}")))?;
        let v =
            v.ok_or_else(|| CoreError::Checkpoint(format!("missing second moment for {name}")))?;
        if which.starts_with("adam_g") {
            adam_g.push((name.to_string(), m, v));
        } else {
            adam_d.push((name.to_string(), m, v));
        }
    }
    adam_g.sort_by(|a, b| a.0.cmp(&b.0));
    adam_d.sort_by(|a, b| a.0.cmp(&b.0));
    opts.adam_g.import_state(meta.adam_g_step, adam_g);
    opts.adam_d.import_state(meta.adam_d_step, adam_d);
    Ok(meta)
}

/// Full training run. Resumable: pass the checkpoint written by a previous
/// run to continue from its epoch with identical subsequent behaviour.
pub fn train(
    cfg: &TrainConfig,
    dataset: &UnpairedDataset,
    provider: &dyn PerceptionProvider,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.batches_per_epoch(cfg.batch) == 0 {
        return Err(CoreError::Dataset(format!(
            "dataset too small for batch size {}: {} LDR / {} HDR images",
            cfg.batch,
            dataset.ldr_len(),
            dataset.hdr_len()
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let models = Models::new(cfg)?;
    let mut opts = Optimizers::new();
    let mut cache = PerceptionCache::new();
    let mut step: u64 = 0;
    let mut start_epoch = 0usize;
    if let Some(path) = resume {
        let meta = load_training_state(path, &models, &mut opts)?;
        start_epoch = meta.epoch;
        step = meta.step;
        if start_epoch > 0 {
            refresh_perception(&models, dataset, provider, &mut cache, cfg, start_epoch as u64 - 1)?;
        }
    }

    let log_path = out_dir.join("log.jsonl");
    let mut log = BufWriter::new(if start_epoch == 0 {
        File::create(&log_path)?
    } else {
        File::options().append(true).create(true).open(&log_path)?
    });
    let ckpt_path = out_dir.join("latest.ckpt");
    let mut last = None;
    for epoch in start_epoch..cfg.epochs {
        let lr_g = lr_schedule(epoch, cfg, LrWhich::Generator)?;
        let lr_d = lr_schedule(epoch, cfg, LrWhich::Discriminator)?;
        for batch in dataset.epoch_batches(epoch as u64, cfg.batch) {
            let breakdown = train_step(&models, &mut opts, &cache, cfg, &batch?, lr_g, lr_d)?;
            step += 1;
            let record = LogRecord { epoch, step, lr_g, lr_d, losses: breakdown.clone() };
            serde_json::to_writer(&mut log, &record)
                .map_err(|e| CoreError::Io(std::io::Error::other(e)))?;
            log.write_all(b"\n")?;
            last = Some(breakdown);
        }
        log.flush()?;
        refresh_perception(&models, dataset, provider, &mut cache, cfg, epoch as u64)?;
        if (epoch + 1) % cfg.checkpoint_every == 0 || epoch + 1 == cfg.epochs {
            save_training_state(&ckpt_path, &models, &opts, cfg, epoch + 1, step)?;
        }
    }
    Ok(TrainOutcome { steps: step, last, log_path, checkpoint_path: ckpt_path })
}

/// Paired-evaluation metrics.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub psnr: f32,
    pub ssim: f32,
    pub miou: f32,
    pub count: usize,
}

/// Evaluate the LDR->HDR direction on paired data: PSNR/SSIM on mu-law
/// tone-mapped pairs, mIoU between segmentations of the tone-mapped images.
pub fn evaluate(models: &Models, pairs: &[(LdrImage, HdrImage)], cfg: &TrainConfig) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(CoreError::Parameter("empty evaluation set".into()));
    }
    let s = cfg.image_size;
    let mut p_acc = 0.0f64;
    let mut s_acc = 0.0f64;
    let mut m_acc = 0.0f64;
    for (ldr, hdr) in pairs {
        let x = resize_ldr(ldr, s, s)?;
        let y = resize_hdr(hdr, s, s)?;
        let fake = models.gen_y.infer(x.pixels(), &FusionInputs::neutral())?;
        let fake_tm = tone_map_hdr(&HdrImage::new(fake)?, cfg.mu)?;
        let y_tm = tone_map_hdr(&y, cfg.mu)?;
        p_acc += psnr(&fake_tm, &y_tm)? as f64;
        s_acc += ssim(&fake_tm, &y_tm)? as f64;
        let seg_f = models.segmenter.segment(&fake_tm)?;
        let seg_y = models.segmenter.segment(&y_tm)?;
        m_acc += miou(&seg_f, &seg_y)? as f64;
    }
    let n = pairs.len() as f64;
    Ok(EvalReport {
        psnr: (p_acc / n) as f32,
        ssim: (s_acc / n) as f32,
        miou: (m_acc / n) as f32,
        count: pairs.len(),
    })
}
