//! Patch discriminators: 5-layer 4x4 conv stack, strides 2,2,2,1,1, LeakyReLU
//! activations, batch norm on all but the first layer, sigmoid output map.

use crate::autograd::{conv_out_size, Graph, Var};
use crate::error::{CoreError, Result};
use crate::nn::{BatchNorm2d, Conv2d, InitRng, ParamStore};

pub const LEAKY_SLOPE: f32 = 0.2;

#[derive(Debug, Clone)]
pub struct DiscriminatorConfig {
    pub kernel: usize,
    pub strides: Vec<usize>,
    pub channels: Vec<usize>,
    pub padding: usize,
    /// Smallest accepted input dimension.
    pub min_input: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            kernel: 4,
            strides: vec![2, 2, 2, 1, 1],
            channels: vec![64, 128, 256, 512, 1],
            padding: 1,
            min_input: 64,
        }
    }
}

impl DiscriminatorConfig {
    /// Shrunken profile for CPU smoke tests; same layer structure.
    pub fn toy() -> Self {
        DiscriminatorConfig {
            channels: vec![16, 32, 64, 64, 1],
            min_input: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strides.len() != self.channels.len() || self.strides.is_empty() {
            return Err(CoreError::Construction(format!(
                "strides ({}) and channels ({}) must be non-empty and equal length",
                self.strides.len(),
                self.channels.len()
            )));
        }
        if *self.channels.last().unwrap() != 1 {
            return Err(CoreError::Construction("final layer must emit 1 channel".into()));
        }
        if self.kernel == 0 || self.strides.iter().any(|&s| s == 0) {
            return Err(CoreError::Construction("kernel and strides must be >= 1".into()));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.strides.len()
    }

    /// Output map size by plain convolution arithmetic.
    pub fn output_size(&self, mut h: usize, mut w: usize) -> (usize, usize) {
        for &s in &self.strides {
            h = conv_out_size(h, self.kernel, s, self.padding, 1);
            w = conv_out_size(w, self.kernel, s, self.padding, 1);
        }
        (h, w)
    }
}

pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    convs: Vec<Conv2d>,
    norms: Vec<Option<BatchNorm2d>>,
}

impl Discriminator {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: DiscriminatorConfig, rng: &mut InitRng) -> Result<Self> {
        cfg.validate()?;
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut in_c = 3;
        for (i, (&stride, &out_c)) in cfg.strides.iter().zip(&cfg.channels).enumerate() {
            convs.push(Conv2d::new(
                store,
                &format!("{prefix}/conv{}", i + 1),
                in_c,
                out_c,
                cfg.kernel,
                stride,
                cfg.padding,
                1,
                true,
                rng,
            ));
            // batch norm on every layer except the first and the 1-channel output
            let normed = i != 0 && i != cfg.layers() - 1;
            norms.push(normed.then(|| BatchNorm2d::new(store, &format!("{prefix}/bn{}", i + 1), out_c)));
            in_c = out_c;
        }
        Ok(Discriminator { cfg, convs, norms })
    }

    /// `(N,3,H,W)` -> `(N,1,h',w')` probability map in (0,1).
    pub fn forward(&self, g: &Graph, x: &Var, train: bool) -> Result<Var> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(CoreError::Shape(format!("discriminator input must be (N,3,H,W), got {shape:?}")));
        }
        if shape[2] < self.cfg.min_input || shape[3] < self.cfg.min_input {
            return Err(CoreError::Shape(format!(
                "discriminator input {}x{} below the {} floor",
                shape[2], shape[3], self.cfg.min_input
            )));
        }
        let last = self.convs.len() - 1;
        let mut feat = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            feat = conv.forward(g, &feat);
            if let Some(bn) = &self.norms[i] {
                feat = bn.forward(g, &feat, train);
            }
            feat = if i == last { feat.sigmoid() } else { feat.leaky_relu(LEAKY_SLOPE) };
        }
        Ok(feat)
    }
}
