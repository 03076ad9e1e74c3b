//! Semantic machinery: embedding encoders, embedding projection/fusion,
//! cosine similarity, segmentation interface with a deterministic stub,
//! class matching and mIoU.
//!
//! The default encoder is a seeded random projection of downsampled pixels
//! (hermetic, deterministic); a pretrained CLIP-style encoder can be plugged
//! in behind the same trait at run time. Likewise the stub segmenter stands
//! in for an external segmentation model.

use ndarray::{Array1, Array2, Array3, IxDyn};
use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{CoreError, Result};
use crate::imagecore::{luminance, resize_pixels};
use crate::nn::{InitRng, Linear, ParamStore};

pub const EMBED_DIM: usize = 512;
pub const FUSED_DIM: usize = 256;

/// Unit-L2-norm 512-d semantic vector.
#[derive(Debug, Clone)]
pub struct Embedding(pub Array1<f32>);

impl Embedding {
    pub fn new(v: Array1<f32>) -> Result<Self> {
        if v.len() != EMBED_DIM {
            return Err(CoreError::Shape(format!("embedding must be {EMBED_DIM}-d, got {}", v.len())));
        }
        let norm = v.mapv(|x| x * x).sum().sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(CoreError::Domain(format!("embedding must be unit-norm, got {norm}")));
        }
        Ok(Embedding(v))
    }
}

/// Cosine similarity `a.b / (|a||b|)`; errors on zero vectors.
pub fn cosine_sim(a: &Array1<f32>, b: &Array1<f32>) -> Result<f32> {
    let na = a.mapv(|x| x * x).sum().sqrt();
    let nb = b.mapv(|x| x * x).sum().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(CoreError::Domain("cosine similarity of zero vector".into()));
    }
    Ok(a.dot(b) / (na * nb))
}

/// Image-to-embedding interface.
pub trait EmbeddingEncoder {
    fn id(&self) -> &str;

    /// Encode one `(3,H,W)` image in `[0,1]` range.
    fn encode(&self, pixels: &Array3<f32>) -> Result<Embedding>;

    /// Differentiable batch path over a `(N,3,H,W)` tape node; output is a
    /// row-normalized `(N, 512)` node. `H`,`W` must be `16 * 2^k`.
    fn encode_var(&self, g: &Graph, x: &Var) -> Result<Var>;
}

const PATCH: usize = 16;

/// Deterministic stand-in encoder: average-pool to 16x16, flatten, fixed
/// seeded random projection to 512, L2 normalize.
pub struct StandInEncoder {
    projection: Array2<f32>, // (768, 512)
    seed: u64,
}

impl StandInEncoder {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = 3 * PATCH * PATCH;
        let scale = 1.0 / (rows as f32).sqrt();
        let data: Vec<f32> = (0..rows * EMBED_DIM)
            .map(|_| {
                // Box-Muller
                let u1 = (rng.next_u32() as f64 + 1.0) / (u32::MAX as f64 + 2.0);
                let u2 = rng.next_u32() as f64 / (u32::MAX as f64 + 1.0);
                ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32 * scale
            })
            .collect();
        StandInEncoder {
            projection: Array2::from_shape_vec((rows, EMBED_DIM), data).unwrap(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

fn pool_factor(h: usize, w: usize) -> Option<u32> {
    if h != w || h < PATCH {
        return None;
    }
    let ratio = h / PATCH;
    (h % PATCH == 0 && ratio.is_power_of_two()).then(|| ratio.trailing_zeros())
}

impl EmbeddingEncoder for StandInEncoder {
    fn id(&self) -> &str {
        "standin"
    }

    fn encode(&self, pixels: &Array3<f32>) -> Result<Embedding> {
        let (_, h, w) = pixels.dim();
        let small = if pool_factor(h, w).is_some() {
            // match the differentiable path exactly
            let g = Graph::new();
            let x = g.constant(
                pixels
                    .clone()
                    .into_shape(IxDyn(&[1, 3, h, w]))
                    .unwrap(),
            );
            let mut v = x;
            for _ in 0..pool_factor(h, w).unwrap() {
                v = v.avg_pool2();
            }
            v.value()
                .into_shape(IxDyn(&[3, PATCH, PATCH]))
                .unwrap()
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap()
        } else {
            resize_pixels(pixels, PATCH, PATCH)?
        };
        let flat = Array1::from_iter(small.iter().copied());
        let mut v = flat.dot(&self.projection);
        let norm = v.mapv(|x| x * x).sum().sqrt().max(1e-8);
        v /= norm;
        Embedding::new(v)
    }

    fn encode_var(&self, g: &Graph, x: &Var) -> Result<Var> {
        let shape = x.shape();
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let k = pool_factor(h, w).ok_or_else(|| {
            CoreError::Shape(format!("stand-in encoder needs square 16*2^k input, got {h}x{w}"))
        })?;
        let mut v = x.clone();
        for _ in 0..k {
            v = v.avg_pool2();
        }
        let flat = v.reshape(&[n, 3 * PATCH * PATCH]);
        let proj = g.constant(self.projection.clone().into_dyn());
        Ok(flat.matmul(&proj).normalize_rows(1e-8))
    }
}

/// Learned shared projection `P: 512 -> 256` (no bias) with additive fusion:
/// `fuse(e1, e2) = P(e1) + P(e2)`.
pub struct ProjectionFusion {
    pub proj: Linear,
}

impl ProjectionFusion {
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut InitRng) -> Self {
        ProjectionFusion {
            proj: Linear::new(store, name, EMBED_DIM, FUSED_DIM, false, rng),
        }
    }

    /// Fuse two `(N, 512)` embedding batches into a `(N, 256)` feature.
    pub fn fuse(&self, g: &Graph, e1: &Var, e2: &Var) -> Var {
        self.proj.forward(g, e1).add(&self.proj.forward(g, e2))
    }

    pub fn project(&self, g: &Graph, e: &Var) -> Var {
        self.proj.forward(g, e)
    }
}

/// Per-pixel integer class labels plus class inventory.
#[derive(Debug, Clone)]
pub struct SegMask {
    labels: Array2<u32>,
    class_count: u32,
}

impl SegMask {
    pub fn new(labels: Array2<u32>, class_count: u32) -> Result<Self> {
        if class_count == 0 {
            return Err(CoreError::Parameter("class_count must be >= 1".into()));
        }
        if labels.iter().any(|&l| l >= class_count) {
            return Err(CoreError::Domain("label exceeds class_count".into()));
        }
        Ok(SegMask { labels, class_count })
    }

    pub fn labels(&self) -> &Array2<u32> {
        &self.labels
    }

    pub fn class_count(&self) -> u32 {
        self.class_count
    }

    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }
}

/// Image-to-label-map interface.
pub trait Segmenter {
    fn id(&self) -> &str;

    /// Segment one `(3,H,W)` LDR-range image.
    fn segment(&self, pixels: &Array3<f32>) -> Result<SegMask>;
}

/// Deterministic stub: luminance quantile bucketing into `k` bands, then
/// 4-connected components, largest `max_classes` kept and the rest merged
/// into the largest component of the same band.
pub struct StubSegmenter {
    pub bands: usize,
    pub max_classes: usize,
}

impl Default for StubSegmenter {
    fn default() -> Self {
        StubSegmenter { bands: 4, max_classes: 16 }
    }
}

impl Segmenter for StubSegmenter {
    fn id(&self) -> &str {
        "stub"
    }

    fn segment(&self, pixels: &Array3<f32>) -> Result<SegMask> {
        let lum = luminance(pixels);
        let (h, w) = lum.dim();
        let mut sorted: Vec<f32> = lum.iter().copied().collect();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let n = sorted.len();
        let thresholds: Vec<f32> = (1..self.bands)
            .map(|i| sorted[(n * i / self.bands).min(n - 1)])
            .collect();
        let band = lum.mapv(|v| thresholds.iter().filter(|&&t| v > t).count() as u32);

        // 4-connected components per band
        let mut comp = Array2::<i64>::from_elem((h, w), -1);
        let mut comp_sizes: Vec<usize> = Vec::new();
        let mut comp_band: Vec<u32> = Vec::new();
        let mut stack = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if comp[[y, x]] >= 0 {
                    continue;
                }
                let id = comp_sizes.len() as i64;
                let b = band[[y, x]];
                let mut size = 0usize;
                stack.push((y, x));
                comp[[y, x]] = id;
                while let Some((cy, cx)) = stack.pop() {
                    size += 1;
                    let neighbors = [
                        (cy.wrapping_sub(1), cx),
                        (cy + 1, cx),
                        (cy, cx.wrapping_sub(1)),
                        (cy, cx + 1),
                    ];
                    for (ny, nx) in neighbors {
                        if ny < h && nx < w && comp[[ny, nx]] < 0 && band[[ny, nx]] == b {
                            comp[[ny, nx]] = id;
                            stack.push((ny, nx));
                        }
                    }
                }
                comp_sizes.push(size);
                comp_band.push(b);
            }
        }

        // keep the largest components as classes, merge the rest
        let mut order: Vec<usize> = (0..comp_sizes.len()).collect();
        order.sort_by(|&a, &b| comp_sizes[b].cmp(&comp_sizes[a]).then(a.cmp(&b)));
        let kept = &order[..order.len().min(self.max_classes)];
        let mut class_of = vec![u32::MAX; comp_sizes.len()];
        for (cls, &cid) in kept.iter().enumerate() {
            class_of[cid] = cls as u32;
        }
        for &cid in &order[kept.len()..] {
            // largest kept component of the same band, else the largest overall
            let target = kept
                .iter()
                .find(|&&k| comp_band[k] == comp_band[cid])
                .copied()
                .unwrap_or(kept[0]);
            class_of[cid] = class_of[target];
        }
        let labels = comp.mapv(|c| class_of[c as usize]);
        let class_count = kept.len() as u32;
        SegMask::new(labels, class_count)
    }
}

/// One matched class pair with its IoU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMatch {
    pub label_a: u32,
    pub label_b: u32,
    pub iou: f64,
}

fn iou_matrix(a: &SegMask, b: &SegMask) -> Result<Vec<Vec<f64>>> {
    if a.dim() != b.dim() {
        return Err(CoreError::Shape(format!(
            "mask size mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (ca, cb) = (a.class_count as usize, b.class_count as usize);
    let mut inter = vec![vec![0u64; cb]; ca];
    let mut count_a = vec![0u64; ca];
    let mut count_b = vec![0u64; cb];
    for (&la, &lb) in a.labels.iter().zip(b.labels.iter()) {
        inter[la as usize][lb as usize] += 1;
        count_a[la as usize] += 1;
        count_b[lb as usize] += 1;
    }
    let mut m = vec![vec![0f64; cb]; ca];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let union = count_a[i] + count_b[j] - inter[i][j];
            *cell = if union == 0 { 0.0 } else { inter[i][j] as f64 / union as f64 };
        }
    }
    Ok(m)
}

/// Optimal total over injective matchings of `rows` into `cols` (bitmask DP
/// over the column set).
fn best_total(m: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    let nc = cols.len();
    let mut dp = vec![0.0f64; 1 << nc];
    for &r in rows.iter().rev() {
        let mut next = vec![0.0f64; 1 << nc];
        for mask in 0..(1usize << nc) {
            let mut best = dp[mask]; // row left unmatched
            for (ci, &c) in cols.iter().enumerate() {
                if mask & (1 << ci) == 0 {
                    best = best.max(m[r][c] + dp[mask | (1 << ci)]);
                }
            }
            next[mask] = best;
        }
        dp = next;
    }
    dp[0]
}

const DP_TOL: f64 = 1e-9;

/// Maximum-total-IoU bipartite matching between the label sets of two masks.
///
/// Among pairs, the highest-IoU pair consistent with some optimal completion
/// is committed first; ties break on `(min(a,b), max(a,b))` so swapping the
/// masks mirrors the matching. The DP behind the optimality check is
/// exponential in the smaller class count, so masks above 12 classes on both
/// sides fall back to plain greedy selection.
pub fn match_classes(a: &SegMask, b: &SegMask) -> Result<Vec<ClassMatch>> {
    let m = iou_matrix(a, b)?;
    let (ca, cb) = (a.class_count as usize, b.class_count as usize);
    let mut pairs: Vec<(u32, u32)> = (0..ca)
        .flat_map(|i| (0..cb).map(move |j| (i as u32, j as u32)))
        .collect();
    pairs.sort_by(|&(a1, b1), &(a2, b2)| {
        let i1 = m[a1 as usize][b1 as usize];
        let i2 = m[a2 as usize][b2 as usize];
        i2.total_cmp(&i1)
            .then(a1.min(b1).cmp(&a2.min(b2)))
            .then(a1.max(b1).cmp(&a2.max(b2)))
            .then(a1.cmp(&a2))
    });
    let exact = ca.min(cb) <= 12;
    // orient the DP so the bitmask covers the smaller side
    let total = |free_a: &[usize], free_b: &[usize]| {
        if free_a.len() <= free_b.len() {
            let mt: Vec<Vec<f64>> = (0..cb).map(|j| (0..ca).map(|i| m[i][j]).collect()).collect();
            best_total(&mt, free_b, free_a)
        } else {
            best_total(&m, free_a, free_b)
        }
    };
    let mut used_a = vec![false; ca];
    let mut used_b = vec![false; cb];
    let mut matches = Vec::new();
    for (la, lb) in pairs {
        let (ia, ib) = (la as usize, lb as usize);
        if used_a[ia] || used_b[ib] {
            continue;
        }
        if exact {
            // commit only if some optimal completion contains this pair
            let free_a: Vec<usize> = (0..ca).filter(|&i| !used_a[i]).collect();
            let free_b: Vec<usize> = (0..cb).filter(|&j| !used_b[j]).collect();
            let best = total(&free_a, &free_b);
            let rest_a: Vec<usize> = free_a.iter().copied().filter(|&i| i != ia).collect();
            let rest_b: Vec<usize> = free_b.iter().copied().filter(|&j| j != ib).collect();
            if m[ia][ib] + total(&rest_a, &rest_b) < best - DP_TOL {
                continue;
            }
        }
        used_a[ia] = true;
        used_b[ib] = true;
        matches.push(ClassMatch {
            label_a: la,
            label_b: lb,
            iou: m[ia][ib],
        });
    }
    Ok(matches)
}

/// Mean IoU over matched classes; the denominator is the larger of
/// the two class counts, so unmatched classes contribute zero.
pub fn miou(a: &SegMask, b: &SegMask) -> Result<f32> {
    let matches = match_classes(a, b)?;
    let c = a.class_count.max(b.class_count) as f64;
    let total: f64 = matches.iter().map(|m| m.iou).sum();
    Ok((total / c) as f32)
}
