//! Decode space, task heads and the full forward pass.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::{build_dual_backbone, BackboneConfig, DualBackbone, NUM_STAGES};
use crate::error::{ModelError, Result};
use crate::fusion::{FusedPyramid, Fusion};
use crate::nn::{self, ChannelNorm, Conv2d};
use crate::params::{ParamStore, INIT_STD};

pub const DEFAULT_TEMPERATURE: f64 = 0.5;
pub const SWEEP_TEMPERATURES: [f64; 4] = [0.05, 0.1, 0.5, 1.0];

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(ModelError::Config(format!("temperature must be positive, got {t}")))
    }
}

/// `2·sigmoid(x/t) − 1`, evaluated as `tanh(x / 2t)`.
pub fn soft_threshold(x: f64, t: f64) -> Result<f64> {
    check_temperature(t)?;
    Ok((x / (2.0 * t)).tanh())
}

/// Derivative of [`soft_threshold`] with respect to `x`.
pub fn soft_threshold_grad(x: f64, t: f64) -> Result<f64> {
    check_temperature(t)?;
    let c = (x / (2.0 * t)).cosh();
    Ok(1.0 / (2.0 * t * c * c))
}

/// Sign with `T_h(0) = 0`.
pub fn hard_threshold(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn soft_threshold_tensor(x: &Tensor, t: f64) -> Result<Tensor> {
    check_temperature(t)?;
    Ok((x * (0.5 / t))?.tanh()?)
}

/// `(B, 1, H, W)` scalar in (−1, 1) to `(B, 3, H, W)` probabilities ordered
/// unchanged, positive, negative.
pub fn pseudo_probs(s: &Tensor) -> Result<Tensor> {
    let unchanged = (s.abs()?.neg()? + 1.0)?;
    let positive = s.relu()?;
    let negative = s.neg()?.relu()?;
    Ok(Tensor::cat(&[&unchanged, &positive, &negative], 1)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub decode_dim: usize,
    pub head_hidden: usize,
    pub temperature: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { decode_dim: 128, head_hidden: 32, temperature: DEFAULT_TEMPERATURE }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.decode_dim == 0 || self.head_hidden == 0 {
            return Err(ModelError::Config("decode_dim and head_hidden must be positive".into()));
        }
        check_temperature(self.temperature)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskGates {
    pub semantic: bool,
    pub height: bool,
    pub pseudo: bool,
}

impl Default for TaskGates {
    fn default() -> Self {
        Self::ALL
    }
}

impl TaskGates {
    pub const ALL: TaskGates = TaskGates { semantic: true, height: true, pseudo: true };

    /// Ablation rows: semantic only, height only, both, height with pseudo, all three.
    pub const ABLATION_ROWS: [TaskGates; 5] = [
        TaskGates { semantic: true, height: false, pseudo: false },
        TaskGates { semantic: false, height: true, pseudo: false },
        TaskGates { semantic: true, height: true, pseudo: false },
        TaskGates { semantic: false, height: true, pseudo: true },
        TaskGates::ALL,
    ];

    pub fn any(&self) -> bool {
        self.semantic || self.height || self.pseudo
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.semantic {
            parts.push("semantic");
        }
        if self.height {
            parts.push("height");
        }
        if self.pseudo {
            parts.push("pseudo");
        }
        parts.join("+")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub share_weights: bool,
    pub decoder: DecoderConfig,
    pub gates: TaskGates,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.decoder.validate()?;
        if !self.gates.any() {
            return Err(ModelError::Config("at least one task head must be enabled".into()));
        }
        Ok(())
    }
}

/// `x + conv(gelu(norm(conv(x))))` at constant width.
#[derive(Clone)]
pub struct ResidualBlock {
    conv1: Conv2d,
    norm: ChannelNorm,
    conv2: Conv2d,
}

impl ResidualBlock {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), channels, channels, 3, 1, 1)?,
            norm: ChannelNorm::new(ps, &format!("{name}.norm"), channels)?,
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), channels, channels, 3, 1, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.norm.forward(&self.conv1.forward(x)?)?.gelu()?;
        Ok((x + self.conv2.forward(&y)?)?)
    }
}

/// Per-level projection into the decode space, bilinear resampling to the
/// finest grid, summation and one residual refinement.
#[derive(Clone)]
pub struct MlpDecoder {
    proj: Vec<Conv2d>,
    refine: ResidualBlock,
}

impl MlpDecoder {
    pub fn new(ps: &mut ParamStore, name: &str, embed_dims: &[usize; NUM_STAGES], decode_dim: usize) -> Result<Self> {
        let proj = embed_dims
            .iter()
            .enumerate()
            .map(|(n, &d)| Conv2d::new(ps, &format!("{name}.proj{}", n + 1), d, decode_dim, 1, 1, 0))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { proj, refine: ResidualBlock::new(ps, &format!("{name}.refine"), decode_dim)? })
    }

    pub fn forward(&self, fused: &FusedPyramid) -> Result<Tensor> {
        if fused.levels.len() != NUM_STAGES {
            return Err(ModelError::Shape(format!("decoder needs {NUM_STAGES} levels, got {}", fused.levels.len())));
        }
        let (_, _, h, w) = fused.levels[0].dims4()?;
        let mut acc: Option<Tensor> = None;
        for (level, proj) in fused.levels.iter().zip(&self.proj) {
            let y = nn::resize_bilinear(&proj.forward(level)?, h, w)?;
            acc = Some(match acc {
                Some(a) => (a + y)?,
                None => y,
            });
        }
        self.refine.forward(&acc.unwrap())
    }
}

pub fn mlp_decode(decoder: &MlpDecoder, fused: &FusedPyramid) -> Result<Tensor> {
    decoder.forward(fused)
}

/// Width reduction, bilinear upsampling to the input grid, one residual
/// block and a final 3x3 convolution.
#[derive(Clone)]
pub struct Head {
    reduce: Conv2d,
    block: ResidualBlock,
    out: Conv2d,
}

impl Head {
    pub fn new(ps: &mut ParamStore, name: &str, decode_dim: usize, hidden: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            reduce: Conv2d::new(ps, &format!("{name}.reduce"), decode_dim, hidden, 1, 1, 0)?,
            block: ResidualBlock::new(ps, &format!("{name}.block"), hidden)?,
            out: Conv2d::with_std(ps, &format!("{name}.out"), hidden, out_ch, 3, 1, 1, INIT_STD)?,
        })
    }

    pub fn forward(&self, feat: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
        let y = nn::resize_bilinear(&self.reduce.forward(feat)?, out_h, out_w)?;
        self.out.forward(&self.block.forward(&y)?)
    }
}

pub fn semantic_head(head: &Head, feat: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    head.forward(feat, out_h, out_w)
}

pub fn height_head(head: &Head, feat: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    Ok(head.forward(feat, out_h, out_w)?.tanh()?)
}

/// Returns `(pseudo_scalar, pseudo_probs)`.
pub fn pseudo_head(head: &Head, feat: &Tensor, t: f64, out_h: usize, out_w: usize) -> Result<(Tensor, Tensor)> {
    let s = soft_threshold_tensor(&head.forward(feat, out_h, out_w)?, t)?;
    let p = pseudo_probs(&s)?;
    Ok((s, p))
}

/// Full-resolution outputs; disabled tasks are `None`.
#[derive(Debug, Clone)]
pub struct ModelOutputs {
    pub sem_logits: Option<Tensor>,
    pub height_norm: Option<Tensor>,
    pub pseudo_scalar: Option<Tensor>,
    pub pseudo_probs: Option<Tensor>,
}

#[derive(Clone)]
pub struct Model {
    pub backbone: DualBackbone,
    pub fusion: Fusion,
    pub decoder: MlpDecoder,
    pub semantic: Option<Head>,
    pub height: Option<Head>,
    pub pseudo: Option<Head>,
    config: ModelConfig,
}

impl Model {
    pub fn new(ps: &mut ParamStore, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let bb = &config.backbone;
        let dc = &config.decoder;
        let backbone = build_dual_backbone(ps, "backbone", bb, config.share_weights)?;
        let fusion = Fusion::new(ps, "fusion", bb)?;
        let decoder = MlpDecoder::new(ps, "decoder", &bb.embed_dims, dc.decode_dim)?;
        let gates = config.gates;
        let head = |ps: &mut ParamStore, on: bool, name: &str, out: usize| -> Result<Option<Head>> {
            if on {
                Ok(Some(Head::new(ps, name, dc.decode_dim, dc.head_hidden, out)?))
            } else {
                Ok(None)
            }
        };
        Ok(Self {
            semantic: head(ps, gates.semantic, "head.semantic", 3)?,
            height: head(ps, gates.height, "head.height", 1)?,
            pseudo: head(ps, gates.pseudo, "head.pseudo", 1)?,
            backbone,
            fusion,
            decoder,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn decode(&self, dsm: &Tensor, image: &Tensor) -> Result<Tensor> {
        let (bd, _, h, w) = dsm.dims4()?;
        let (bi, _, hi, wi) = image.dims4()?;
        if (bd, h, w) != (bi, hi, wi) {
            return Err(ModelError::Shape(format!("DSM {:?} and image {:?} are not aligned", dsm.dims(), image.dims())));
        }
        let xh = self.backbone.forward_dsm(dsm)?;
        let xi = self.backbone.forward_image(image)?;
        let fused = self.fusion.forward(&xh, &xi)?;
        self.decoder.forward(&fused)
    }

    /// `dsm` is `(B, 1, H, W)`, `image` is `(B, 3, H, W)`, both normalized.
    pub fn forward(&self, dsm: &Tensor, image: &Tensor) -> Result<ModelOutputs> {
        let (_, _, h, w) = dsm.dims4()?;
        let feat = self.decode(dsm, image)?;
        let sem_logits = self.semantic.as_ref().map(|hd| semantic_head(hd, &feat, h, w)).transpose()?;
        let height_norm = self.height.as_ref().map(|hd| height_head(hd, &feat, h, w)).transpose()?;
        let (pseudo_scalar, pseudo_probs) = match &self.pseudo {
            Some(hd) => {
                let (s, p) = pseudo_head(hd, &feat, self.config.decoder.temperature, h, w)?;
                (Some(s), Some(p))
            }
            None => (None, None),
        };
        Ok(ModelOutputs { sem_logits, height_norm, pseudo_scalar, pseudo_probs })
    }
}

pub fn forward(model: &Model, dsm_pre: &Tensor, image_post: &Tensor) -> Result<ModelOutputs> {
    model.forward(dsm_pre, image_post)
}
