//! Feedback U-Net generators.
//!
//! The encoder runs once per sample; the bottleneck fusion, ConvLSTM feedback
//! block (with dilated dense refinement) and decoder are unrolled over the
//! configured number of feedback iterations, carrying hidden state across
//! iterations. Saliency maps gate features by broadcast multiplication:
//! the artifact map gates the features entering the feedback block; in the
//! LDR->HDR direction the overexposure map additionally gates the bottleneck
//! input and the underexposure map the skip connections of levels 1-3.
//! A fused 256-d semantic embedding is broadcast over the bottleneck grid and
//! concatenated with the bottleneck input features.

use ndarray::{Array2, Array3, ArrayD, IxDyn};

use crate::autograd::{Arr, Graph, Var};
use crate::error::{CoreError, Result};
use crate::imagecore::resize_pixels;
use crate::nn::{BatchNorm2d, Conv2d, ConvLstmCell, InitRng, ParamStore};
use crate::perception::SaliencyTriplet;
use crate::semantics::FUSED_DIM;

/// Translation direction; decides the output activation and which saliency
/// maps participate in gating.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    LdrToHdr,
    HdrToLdr,
}

#[derive(Debug, Clone)]
pub struct GeneratorConfig {
    /// Total U-Net levels: encoder levels with skips, the bottleneck level and
    /// the decoder levels. Must be odd; (levels-1)/2 downsampling stages.
    pub levels: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub feedback_iterations: usize,
    pub dilation_rate: usize,
    pub dilated_blocks: usize,
    pub direction: Direction,
    /// Block gradients from the feedback/decoder stack into the encoder.
    pub freeze_encoder: bool,
}

impl GeneratorConfig {
    pub fn with_direction(direction: Direction) -> Self {
        GeneratorConfig {
            levels: 7,
            base_channels: 32,
            max_channels: 512,
            feedback_iterations: 4,
            dilation_rate: 3,
            dilated_blocks: 3,
            direction,
            freeze_encoder: false,
        }
    }

    /// Shrunken profile for CPU smoke tests; same topology.
    pub fn toy(direction: Direction) -> Self {
        GeneratorConfig {
            base_channels: 8,
            max_channels: 64,
            ..Self::with_direction(direction)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 3 || self.levels % 2 == 0 {
            return Err(CoreError::Construction(format!(
                "levels must be odd and >= 3, got {}",
                self.levels
            )));
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return Err(CoreError::Construction(format!(
                "bad channel config: base {} max {}",
                self.base_channels, self.max_channels
            )));
        }
        if self.feedback_iterations == 0 {
            return Err(CoreError::Construction("feedback_iterations must be >= 1".into()));
        }
        if self.dilation_rate == 0 || self.dilated_blocks == 0 {
            return Err(CoreError::Construction("dilated block config must be >= 1".into()));
        }
        Ok(())
    }

    /// Downsampling stages (encoder levels below full resolution plus the
    /// bottleneck level).
    pub fn downsamples(&self) -> usize {
        (self.levels - 1) / 2
    }

    /// Input dims must be divisible by this.
    pub fn size_divisor(&self) -> usize {
        1 << self.downsamples()
    }

    /// Encoder/bottleneck channel widths, doubling from base and capped.
    pub fn channel_progression(&self) -> Vec<usize> {
        (0..=self.downsamples() + 1)
            .map(|i| (self.base_channels << i).min(self.max_channels))
            .collect()
    }

    pub fn bottleneck_channels(&self) -> usize {
        *self.channel_progression().last().unwrap()
    }
}

/// Per-sample saliency maps for a batch, same spatial size as the input.
#[derive(Clone)]
pub struct FusionInputs {
    /// One triplet per sample; `None` means neutral (gating disabled).
    pub saliency: Option<Vec<SaliencyTriplet>>,
    /// `(N, 256)` fused input embedding `P(E(x))`; `None` means zero.
    pub input_embedding: Option<Var>,
}

impl FusionInputs {
    pub fn neutral() -> Self {
        FusionInputs { saliency: None, input_embedding: None }
    }
}

/// Embeds an iteration output into the fused 256-d space; iteration k >= 1
/// adds this to the input embedding. Implementations should detach the output
/// so the embedding path does not multiply the unrolled graph.
pub trait OutputEmbedder {
    fn embed(&self, g: &Graph, output: &Var) -> Result<Var>;
}

struct ConvBlock {
    c1: Conv2d,
    b1: BatchNorm2d,
    c2: Conv2d,
    b2: BatchNorm2d,
}

impl ConvBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
        rng: &mut InitRng,
    ) -> Self {
        ConvBlock {
            c1: Conv2d::new(store, &format!("{name}/c1"), in_c, out_c, 3, stride, 1, 1, true, rng),
            b1: BatchNorm2d::new(store, &format!("{name}/bn1"), out_c),
            c2: Conv2d::new(store, &format!("{name}/c2"), out_c, out_c, 3, 1, 1, 1, true, rng),
            b2: BatchNorm2d::new(store, &format!("{name}/bn2"), out_c),
        }
    }

    fn forward(&self, g: &Graph, x: &Var, train: bool) -> Var {
        let y = self.b1.forward(g, &self.c1.forward(g, x).relu(), train);
        self.b2.forward(g, &self.c2.forward(g, &y).relu(), train)
    }
}

/// Resample one map to `(h, w)` bilinearly.
fn resize_map(map: &Array2<f32>, h: usize, w: usize) -> Array2<f32> {
    let (mh, mw) = map.dim();
    if (mh, mw) == (h, w) {
        return map.clone();
    }
    let src = map.clone().insert_axis(ndarray::Axis(0));
    let out = resize_pixels(&src.into_dimensionality::<ndarray::Ix3>().unwrap(), h, w).unwrap();
    out.index_axis_move(ndarray::Axis(0), 0)
}

/// `out[c,i,j] = features[c,i,j] * map[i,j]`, map resampled to the feature
/// grid and broadcast over channels.
pub fn gate_features(g: &Graph, features: &Var, maps: &[Array2<f32>]) -> Var {
    let shape = features.shape();
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    assert_eq!(n, maps.len(), "one gate map per sample");
    let mut m = ArrayD::zeros(IxDyn(&[n, 1, h, w]));
    for (i, map) in maps.iter().enumerate() {
        let r = resize_map(map, h, w);
        m.slice_mut(ndarray::s![i, 0, .., ..]).assign(&r);
    }
    features.mul_channel_broadcast(&g.constant(m))
}

fn all_ones(maps: &[&Array2<f32>]) -> bool {
    maps.iter().all(|m| m.iter().all(|&v| v == 1.0))
}

/// One direction of the translation pair.
pub struct Generator {
    pub cfg: GeneratorConfig,
    enc: Vec<ConvBlock>,    // levels 1..=downsamples, stride 2 from level 2 on
    bott_in: ConvBlock,     // final downsample into the bottleneck level
    fuse: Conv2d,           // (bottleneck-in + embedding) -> bottleneck width
    fuse_bn: BatchNorm2d,
    lstm: ConvLstmCell,
    dense: Vec<Conv2d>,     // dilated dense refinement
    dec: Vec<ConvBlock>,
    out: Conv2d,
}

/// Forward products: final output, all per-iteration outputs, and the gated
/// feedback-block inputs (for gating introspection).
pub struct GeneratorOutput {
    pub output: Var,
    pub iterations: Vec<Var>,
    pub feedback_inputs: Vec<Arr>,
}

impl Generator {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: GeneratorConfig, rng: &mut InitRng) -> Result<Self> {
        cfg.validate()?;
        let prog = cfg.channel_progression();
        let d = cfg.downsamples();
        let cb = cfg.bottleneck_channels();
        let mut enc = Vec::new();
        for lvl in 0..d {
            let in_c = if lvl == 0 { 3 } else { prog[lvl - 1] };
            let stride = if lvl == 0 { 1 } else { 2 };
            enc.push(ConvBlock::new(store, &format!("{prefix}/enc{}", lvl + 1), in_c, prog[lvl], stride, rng));
        }
        let bott_in = ConvBlock::new(store, &format!("{prefix}/bott_in"), prog[d - 1], prog[d], 2, rng);
        let fuse = Conv2d::new(store, &format!("{prefix}/fuse"), prog[d] + FUSED_DIM, cb, 3, 1, 1, 1, true, rng);
        let fuse_bn = BatchNorm2d::new(store, &format!("{prefix}/fuse_bn"), cb);
        let lstm = ConvLstmCell::new(store, &format!("{prefix}/lstm"), cb, cb, rng);
        let mut dense = Vec::new();
        for b in 0..cfg.dilated_blocks {
            dense.push(Conv2d::new(
                store,
                &format!("{prefix}/dense{}", b + 1),
                cb * (b + 1),
                cb,
                3,
                1,
                cfg.dilation_rate,
                cfg.dilation_rate,
                true,
                rng,
            ));
        }
        let mut dec = Vec::new();
        for lvl in 0..d {
            // decoder level consuming skip from encoder level d-lvl
            let skip_c = prog[d - 1 - lvl];
            let in_c = if lvl == 0 { cb } else { prog[d - lvl] };
            dec.push(ConvBlock::new(
                store,
                &format!("{prefix}/dec{}", lvl + 1),
                in_c + skip_c,
                skip_c,
                1,
                rng,
            ));
        }
        let out = Conv2d::new(store, &format!("{prefix}/out"), prog[0], 3, 3, 1, 1, 1, true, rng);
        Ok(Generator { cfg, enc, bott_in, fuse, fuse_bn, lstm, dense, dec, out })
    }

    fn output_activation(&self, x: &Var) -> Var {
        match self.cfg.direction {
            Direction::HdrToLdr => x.sigmoid(),
            Direction::LdrToHdr => x.softplus(),
        }
    }

    /// Run the network on a `(N,3,H,W)` batch.
    pub fn forward(
        &self,
        g: &Graph,
        x: &Var,
        fusion: &FusionInputs,
        embedder: Option<&dyn OutputEmbedder>,
        train: bool,
    ) -> Result<GeneratorOutput> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(CoreError::Shape(format!("generator input must be (N,3,H,W), got {shape:?}")));
        }
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let div = self.cfg.size_divisor();
        if h % div != 0 || w % div != 0 {
            return Err(CoreError::Shape(format!("input dims {h}x{w} must be divisible by {div}")));
        }
        if let Some(sal) = &fusion.saliency {
            if sal.len() != n {
                return Err(CoreError::Shape(format!("{} saliency triplets for batch of {n}", sal.len())));
            }
            for t in sal {
                if t.artifact.dim() != (h, w) || t.over.dim() != (h, w) || t.under.dim() != (h, w) {
                    return Err(CoreError::Shape("saliency maps must match input dims".into()));
                }
            }
        }

        // encoder: once per sample
        let mut skips = Vec::new();
        let mut feat = x.clone();
        for block in &self.enc {
            feat = block.forward(g, &feat, train);
            skips.push(feat.clone());
        }
        let mut b_in = self.bott_in.forward(g, &skips.last().unwrap().clone(), train);
        if self.cfg.freeze_encoder {
            b_in = b_in.detach();
            for s in &mut skips {
                *s = s.detach();
            }
        }

        let gating = self.cfg.direction == Direction::LdrToHdr;
        let sal = fusion.saliency.as_ref();
        // overexposure map gates the bottleneck input (LDR->HDR only)
        if gating {
            if let Some(sal) = sal {
                let over: Vec<&Array2<f32>> = sal.iter().map(|t| &t.over).collect();
                if !all_ones(&over) {
                    let maps: Vec<Array2<f32>> = sal.iter().map(|t| t.over.clone()).collect();
                    b_in = gate_features(g, &b_in, &maps);
                }
            }
            // underexposure map gates the skip connections (levels 1..=3)
            if let Some(sal) = sal {
                let under: Vec<&Array2<f32>> = sal.iter().map(|t| &t.under).collect();
                if !all_ones(&under) {
                    let maps: Vec<Array2<f32>> = sal.iter().map(|t| t.under.clone()).collect();
                    for s in &mut skips {
                        *s = gate_features(g, s, &maps);
                    }
                }
            }
        }

        let (bh, bw) = (h / div, w / div);
        let artifact_maps: Option<Vec<Array2<f32>>> = sal.and_then(|sal| {
            let art: Vec<&Array2<f32>> = sal.iter().map(|t| &t.artifact).collect();
            (!all_ones(&art)).then(|| sal.iter().map(|t| t.artifact.clone()).collect())
        });

        let mut state = None;
        let mut iterations: Vec<Var> = Vec::new();
        let mut feedback_inputs = Vec::new();
        for iter in 0..self.cfg.feedback_iterations {
            // fused embedding for this iteration
            let mut embed = match &fusion.input_embedding {
                Some(e) => e.clone(),
                None => g.constant(ArrayD::zeros(IxDyn(&[n, FUSED_DIM]))),
            };
            if iter > 0 {
                if let Some(embedder) = embedder {
                    embed = embed.add(&embedder.embed(g, iterations.last().unwrap())?);
                }
            }
            let stacked = Var::concat_channels(&[b_in.clone(), embed.broadcast_spatial(bh, bw)]);
            let bott = self.fuse_bn.forward(g, &self.fuse.forward(g, &stacked).relu(), train);

            // artifact map gates the features entering the feedback block
            let fb_in = match &artifact_maps {
                Some(maps) => gate_features(g, &bott, maps),
                None => bott,
            };
            feedback_inputs.push(fb_in.value());
            let (h_new, c_new) = self.lstm.forward(g, &fb_in, state.take());
            state = Some((h_new.clone(), c_new));

            // dilated dense refinement
            let mut parts = vec![h_new];
            for conv in &self.dense {
                let stacked = Var::concat_channels(&parts);
                parts.push(conv.forward(g, &stacked).relu());
            }
            let mut feat = parts.pop().unwrap();

            // decoder with skip connections
            for (lvl, block) in self.dec.iter().enumerate() {
                let skip = &skips[skips.len() - 1 - lvl];
                let up = feat.upsample_nearest2();
                feat = block.forward(g, &Var::concat_channels(&[up, skip.clone()]), train);
            }
            iterations.push(self.output_activation(&self.out.forward(g, &feat)));
        }
        Ok(GeneratorOutput {
            output: iterations.last().unwrap().clone(),
            iterations,
            feedback_inputs,
        })
    }

    /// Convenience single-image inference on raw pixels.
    pub fn infer(&self, pixels: &Array3<f32>, fusion: &FusionInputs) -> Result<Array3<f32>> {
        let (c, h, w) = pixels.dim();
        let g = Graph::new();
        let x = g.constant(pixels.clone().into_shape(IxDyn(&[1, c, h, w])).unwrap());
        let out = self.forward(&g, &x, fusion, None, false)?;
        Ok(out
            .output
            .value()
            .into_shape(IxDyn(&[c, h, w]))
            .unwrap()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap())
    }
}
