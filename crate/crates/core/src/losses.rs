//! The six training objectives and the total loss.
//!
//! Every term is independently callable and toggleable. HDR-domain images are
//! tone-mapped by the caller before entering the L1 terms; LDR inputs to the
//! contrastive/semantic terms are histogram-equalized by the caller. The
//! perception loss uses differentiable soft mask fractions; hard pixel counts
//! feed the reported (non-differentiable) value.

use ndarray::{ArrayD, IxDyn};

use crate::autograd::{Graph, Var};
use crate::error::{CoreError, Result};
use crate::perception::{HeuristicParams, PixelCounts, Role};
use crate::semantics::{miou, SegMask};

pub const PROB_EPS: f32 = 1e-7;

/// Objective weights; all must be positive.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda_cyc: f32,
    pub id_weight: f32,
    pub alpha: f32,
    pub beta: f32,
    pub delta1: f32,
    pub delta2: f32,
    pub delta3: f32,
    pub tau: f32,
    pub llm_weight: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cyc: 10.0,
            id_weight: 0.5,
            alpha: 2.0,
            beta: 2.0,
            delta1: 3.0,
            delta2: 2.0,
            delta3: 1.5,
            tau: 0.08,
            llm_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_cyc,
            self.id_weight,
            self.alpha,
            self.beta,
            self.delta1,
            self.delta2,
            self.delta3,
            self.tau,
            self.llm_weight,
        ];
        if all.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(CoreError::Parameter("loss weights must all be > 0".into()));
        }
        Ok(())
    }
}

/// Term toggles for ablation runs; everything on by default.
#[derive(Debug, Clone, Copy)]
pub struct Ablation {
    pub con: bool,
    pub sem: bool,
    pub llm: bool,
    pub id: bool,
    /// Embedding fusion into the generator bottleneck.
    pub fusion: bool,
    /// Saturating (literal min-max) generator adversarial term.
    pub saturating_gan: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            con: true,
            sem: true,
            llm: true,
            id: true,
            fusion: true,
            saturating_gan: false,
        }
    }
}

fn l1_mean(a: &Var, b: &Var) -> Var {
    a.sub(b).abs().mean_all()
}

// ---------------------------------------------------------------------------
// perception (LLM) loss

/// Weighted defect fractions: `d1*f_af + d2*f_ox + d3*f_ux`. An LDR output is
/// judged on artifacts only.
pub fn llm_loss_var(f_af: &Var, f_ox: &Var, f_ux: &Var, w: &LossWeights, role: Role) -> Var {
    let af = f_af.mul_scalar(w.delta1);
    match role {
        Role::HdrOutput => af.add(&f_ox.mul_scalar(w.delta2)).add(&f_ux.mul_scalar(w.delta3)),
        Role::LdrOutput => af,
    }
}

/// Hard-count variant for reporting.
pub fn llm_loss_counts(counts: &PixelCounts, w: &LossWeights, role: Role) -> f32 {
    let t = counts.total as f32;
    let af = w.delta1 * counts.artifact as f32 / t;
    match role {
        Role::HdrOutput => af + w.delta2 * counts.over as f32 / t + w.delta3 * counts.under as f32 / t,
        Role::LdrOutput => af,
    }
}

/// In-graph luminance of a `(N,3,H,W)` node.
pub fn luminance_var(x: &Var) -> Var {
    let r = x.narrow_channels(0, 1).mul_scalar(0.2126);
    let g = x.narrow_channels(1, 1).mul_scalar(0.7152);
    let b = x.narrow_channels(2, 1).mul_scalar(0.0722);
    r.add(&g).add(&b)
}

/// Differentiable soft defect fractions of a `(N,3,H,W)` image in `[0,1]`.
///
/// Exposure fractions are sigmoid-thresholded luminance means. The artifact
/// fraction is the mean sigmoid response of an |LoG| filter computed with
/// valid (border-free) convolutions, so it is taken over the interior.
pub fn soft_fractions_var(g: &Graph, img: &Var, p: &HeuristicParams) -> Result<(Var, Var, Var)> {
    p.validate()?;
    let lum = luminance_var(img);
    let inv_t = 1.0 / p.temperature;
    let f_ox = lum.add_scalar(-p.t_over).mul_scalar(inv_t).sigmoid().mean_all();
    let f_ux = lum.neg().add_scalar(p.t_under).mul_scalar(inv_t).sigmoid().mean_all();

    let taps = crate::perception::gaussian_kernel_1d(p.blur_sigma);
    let k = taps.len();
    let shape = img.shape();
    let (h, w) = (shape[2], shape[3]);
    if h < k + 2 || w < k + 2 {
        return Err(CoreError::Shape(format!("image {h}x{w} too small for a {k}-tap blur")));
    }
    let mut gauss = ArrayD::zeros(IxDyn(&[1, 1, k, k]));
    for (i, &a) in taps.iter().enumerate() {
        for (j, &b) in taps.iter().enumerate() {
            gauss[[0, 0, i, j]] = a * b;
        }
    }
    let lap = ArrayD::from_shape_vec(
        IxDyn(&[1, 1, 3, 3]),
        vec![0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0],
    )
    .unwrap();
    let blurred = lum.conv2d(&g.constant(gauss), 1, 0, 1);
    let log = blurred.conv2d(&g.constant(lap), 1, 0, 1);
    let f_af = log
        .abs()
        .add_scalar(-p.lap_threshold)
        .mul_scalar(inv_t)
        .sigmoid()
        .mean_all();
    Ok((f_af, f_ox, f_ux))
}

// ---------------------------------------------------------------------------
// contrastive loss

/// InfoNCE over paired embedding batches, log-sum-exp stabilized. Both inputs
/// are `(N, D)` row-normalized; the denominator for sample i sums
/// `exp(sim(x_i,x_j)/tau) + exp(sim(x_i,y_j)/tau)` over `j != i`.
pub fn contrastive_loss_var(g: &Graph, x_embs: &Var, y_embs: &Var, tau: f32) -> Result<Var> {
    let shape = x_embs.shape();
    if shape != y_embs.shape() || shape.len() != 2 {
        return Err(CoreError::Shape(format!(
            "embedding batches must match, got {shape:?} vs {:?}",
            y_embs.shape()
        )));
    }
    let n = shape[0];
    if n < 2 {
        return Err(CoreError::Batch(format!("contrastive loss needs N >= 2, got {n}")));
    }
    if tau <= 0.0 {
        return Err(CoreError::Parameter(format!("tau must be > 0, got {tau}")));
    }
    let s_xy = x_embs.matmul_nt(y_embs).mul_scalar(1.0 / tau); // (N, N)
    let s_xx = x_embs.matmul_nt(x_embs).mul_scalar(1.0 / tau);

    // off-diagonal mask and per-row max over masked entries (constants)
    let mut mask = ArrayD::from_elem(IxDyn(&[n, n]), 1.0f32);
    for i in 0..n {
        mask[[i, i]] = 0.0;
    }
    let vx = s_xx.value();
    let vy = s_xy.value();
    let mut row_max = vec![f32::NEG_INFINITY; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                row_max[i] = row_max[i].max(vx[[i, j]]).max(vy[[i, j]]);
            }
        }
    }
    let mut shift = ArrayD::zeros(IxDyn(&[n, n]));
    for i in 0..n {
        for j in 0..n {
            shift[[i, j]] = row_max[i];
        }
    }
    let mask = g.constant(mask);
    let shift = g.constant(shift);
    let ex = s_xx.sub(&shift).exp().mul(&mask);
    let ey = s_xy.sub(&shift).exp().mul(&mask);
    let denom = ex.add(&ey).sum_axis(1); // (N,)
    let max_v = g.constant(ArrayD::from_shape_vec(IxDyn(&[n]), row_max).unwrap());
    let log_denom = denom.ln().add(&max_v);

    // positives: diagonal of s_xy
    let mut eye = ArrayD::zeros(IxDyn(&[n, n]));
    for i in 0..n {
        eye[[i, i]] = 1.0;
    }
    let pos = s_xy.mul(&g.constant(eye)).sum_axis(1); // (N,)
    Ok(log_denom.sub(&pos).mean_all())
}

// ---------------------------------------------------------------------------
// remaining terms

/// `1 - mIoU`; value-only (segmentation is not differentiable here).
pub fn semantic_loss(a: &SegMask, b: &SegMask) -> Result<f32> {
    Ok(1.0 - miou(a, b)?)
}

/// Discriminator and generator adversarial terms from probability maps.
/// `d_loss = -mean log d_real - mean log(1 - d_fake)`; the generator term is
/// non-saturating `-mean log d_fake` unless `saturating` requests the literal
/// min-max form `mean log(1 - d_fake)`.
pub fn adversarial_losses(d_real: &Var, d_fake: &Var, saturating: bool) -> (Var, Var) {
    let real = d_real.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let fake = d_fake.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let one_minus_fake = fake.neg().add_scalar(1.0);
    let d_loss = real.ln().mean_all().neg().sub(&one_minus_fake.ln().mean_all());
    let g_loss = if saturating {
        one_minus_fake.ln().mean_all()
    } else {
        fake.ln().mean_all().neg()
    };
    (d_loss, g_loss)
}

/// L1 cycle consistency; HDR legs must already be tone-mapped.
pub fn cycle_loss(x: &Var, x_rt: &Var, y_tm: &Var, y_rt_tm: &Var) -> Result<Var> {
    if x.shape() != x_rt.shape() || y_tm.shape() != y_rt_tm.shape() {
        return Err(CoreError::Shape("cycle legs must match in shape".into()));
    }
    Ok(l1_mean(x_rt, x).add(&l1_mean(y_rt_tm, y_tm)))
}

/// L1 identity terms; the HDR-side pair must already be tone-mapped.
pub fn identity_loss(gy_on_y_tm: &Var, y_tm: &Var, gx_on_x: &Var, x: &Var) -> Result<Var> {
    if gy_on_y_tm.shape() != y_tm.shape() || gx_on_x.shape() != x.shape() {
        return Err(CoreError::Shape("identity legs must match in shape".into()));
    }
    Ok(l1_mean(gy_on_y_tm, y_tm).add(&l1_mean(gx_on_x, x)))
}

/// All generator-side terms of one step, pre-weighting.
pub struct LossParts {
    pub gan_g_y: Var,
    pub gan_g_x: Var,
    pub cycle: Var,
    pub identity: Option<Var>,
    pub contrastive: Option<Var>,
    /// Value-only (no gradient); still enters the reported total.
    pub semantic: Option<f32>,
    pub llm: Option<Var>,
}

/// Weighted total:
/// `gan_y + gan_x + lambda*(cycle + id_weight*identity) + alpha*con + beta*sem + llm`.
pub fn total_loss(g: &Graph, parts: &LossParts, w: &LossWeights) -> Var {
    let mut total = parts.gan_g_y.add(&parts.gan_g_x);
    let mut cyc_id = parts.cycle.clone();
    if let Some(id) = &parts.identity {
        cyc_id = cyc_id.add(&id.mul_scalar(w.id_weight));
    }
    total = total.add(&cyc_id.mul_scalar(w.lambda_cyc));
    if let Some(con) = &parts.contrastive {
        total = total.add(&con.mul_scalar(w.alpha));
    }
    if let Some(sem) = parts.semantic {
        total = total.add(&g.scalar(w.beta * sem));
    }
    if let Some(llm) = &parts.llm {
        total = total.add(&llm.mul_scalar(w.llm_weight));
    }
    total
}

/// Scalar loss values of one step, for logging.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub d_y: f32,
    pub d_x: f32,
    pub gan_g_y: f32,
    pub gan_g_x: f32,
    pub cycle: f32,
    pub identity: f32,
    pub contrastive: f32,
    pub semantic: f32,
    pub llm: f32,
    pub total: f32,
}
