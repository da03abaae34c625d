//! Dual-branch pyramid Transformer encoder with sequence-reduction attention.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::nn::{self, Conv2d, DepthwiseConv3x3, LayerNorm, Linear};
use crate::params::ParamStore;

pub const NUM_STAGES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub embed_dims: [usize; NUM_STAGES],
    pub depths: [usize; NUM_STAGES],
    pub num_heads: [usize; NUM_STAGES],
    pub sr_ratios: [usize; NUM_STAGES],
    pub patch_strides: [usize; NUM_STAGES],
    pub patch_kernels: [usize; NUM_STAGES],
    pub mlp_ratio: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            embed_dims: [32, 64, 160, 256],
            depths: [2, 2, 2, 2],
            num_heads: [1, 2, 5, 8],
            sr_ratios: [8, 4, 2, 1],
            patch_strides: [4, 2, 2, 2],
            patch_kernels: [7, 3, 3, 3],
            mlp_ratio: 4.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        for n in 0..NUM_STAGES {
            let (d, heads) = (self.embed_dims[n], self.num_heads[n]);
            if d == 0 || heads == 0 || d % heads != 0 {
                return Err(ModelError::Config(format!(
                    "stage {}: embed dim {d} is not divisible by {heads} heads",
                    n + 1
                )));
            }
            if self.sr_ratios[n] == 0 || self.patch_strides[n] == 0 {
                return Err(ModelError::Config(format!("stage {}: ratios and strides must be ≥ 1", n + 1)));
            }
            if self.patch_kernels[n] % 2 == 0 || self.patch_kernels[n] < self.patch_strides[n] {
                return Err(ModelError::Config(format!(
                    "stage {}: patch kernel must be odd and at least the stride",
                    n + 1
                )));
            }
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(ModelError::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Cumulative downsampling of each level.
    pub fn level_strides(&self) -> [usize; NUM_STAGES] {
        let mut out = [1; NUM_STAGES];
        let mut acc = 1;
        for n in 0..NUM_STAGES {
            acc *= self.patch_strides[n];
            out[n] = acc;
        }
        out
    }

    pub fn total_stride(&self) -> usize {
        self.level_strides()[NUM_STAGES - 1]
    }

    pub fn hidden_dim(&self, stage: usize) -> usize {
        (self.embed_dims[stage] as f64 * self.mlp_ratio).round() as usize
    }

    /// Input sizes must tile the coarsest grid and every reduction window.
    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let strides = self.level_strides();
        let total = self.total_stride();
        let ok = height % total == 0
            && width % total == 0
            && height > 0
            && width > 0
            && (0..NUM_STAGES)
                .all(|n| (height / strides[n]) % self.sr_ratios[n] == 0 && (width / strides[n]) % self.sr_ratios[n] == 0);
        if !ok {
            return Err(ModelError::Shape(format!(
                "input {height}x{width} is not divisible by the total stride {total} and reduction windows"
            )));
        }
        Ok(())
    }
}

/// Multi-head attention whose keys and values are computed from a spatially
/// reduced copy of the key/value source.
#[derive(Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    reduce: Option<(Linear, LayerNorm)>,
    heads: usize,
    sr_ratio: usize,
}

impl Attention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, sr_ratio: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(ModelError::Config(format!("{name}: {dim} channels over {heads} heads")));
        }
        let reduce = if sr_ratio > 1 {
            Some((
                Linear::new(ps, &format!("{name}.sr"), dim * sr_ratio * sr_ratio, dim)?,
                LayerNorm::new(ps, &format!("{name}.sr_norm"), dim)?,
            ))
        } else {
            None
        };
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(ps, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(ps, &format!("{name}.v"), dim, dim)?,
            proj: Linear::new(ps, &format!("{name}.proj"), dim, dim)?,
            reduce,
            heads,
            sr_ratio,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn sr_ratio(&self) -> usize {
        self.sr_ratio
    }

    /// `(B, H*W, C)` to `(B, H*W/s², C)` through a strided patch projection.
    fn reduced(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let Some((lin, norm)) = &self.reduce else {
            return Ok(x.clone());
        };
        let s = self.sr_ratio;
        if h % s != 0 || w % s != 0 {
            return Err(ModelError::Shape(format!("{h}x{w} grid does not tile reduction windows of {s}")));
        }
        let (b, _, c) = x.dims3()?;
        let patches = nn::to_map(x, h, w)?
            .reshape((b, c, h / s, s, w / s, s))?
            .permute((0, 2, 4, 1, 3, 5))?
            .reshape((b, (h / s) * (w / s), c * s * s))?;
        norm.forward(&lin.forward(&patches)?)
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, c / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    /// Per-head attention weights `(B, heads, N, M)`.
    pub fn weights(&self, xq: &Tensor, xkv: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (q, k, _) = self.qkv(xq, xkv, h, w)?;
        self.scores(&q, &k)
    }

    fn qkv(&self, xq: &Tensor, xkv: &Tensor, h: usize, w: usize) -> Result<(Tensor, Tensor, Tensor)> {
        let (bq, nq, cq) = xq.dims3()?;
        let (bk, nk, ck) = xkv.dims3()?;
        if (bq, nq, cq) != (bk, nk, ck) {
            return Err(ModelError::Shape(format!(
                "query {:?} and key/value {:?} features differ",
                xq.dims(),
                xkv.dims()
            )));
        }
        if nq != h * w {
            return Err(ModelError::Shape(format!("sequence of {nq} tokens does not tile a {h}x{w} grid")));
        }
        let kv_src = self.reduced(xkv, h, w)?;
        let q = self.split_heads(&self.q.forward(xq)?)?;
        let k = self.split_heads(&self.k.forward(&kv_src)?)?;
        let v = self.split_heads(&self.v.forward(&kv_src)?)?;
        Ok((q, k, v))
    }

    fn scores(&self, q: &Tensor, k: &Tensor) -> Result<Tensor> {
        let d_head = q.dim(3)?;
        let logits = (q.matmul(&k.t()?)? * (1.0 / (d_head as f64).sqrt()))?;
        nn::softmax_last(&logits)
    }

    /// Queries from `xq`, keys and values from `xkv`; both `(B, H*W, C)`.
    pub fn forward(&self, xq: &Tensor, xkv: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (q, k, v) = self.qkv(xq, xkv, h, w)?;
        let attn = self.scores(&q, &k)?;
        let (b, heads, n, dh) = q.dims4()?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, heads * dh))?;
        self.proj.forward(&out)
    }
}

pub fn self_attention(attn: &Attention, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    attn.forward(x, x, h, w)
}

/// Feed-forward block with a depthwise 3x3 convolution between the projections.
#[derive(Clone)]
pub struct MixFfn {
    fc1: Linear,
    dw: DepthwiseConv3x3,
    fc2: Linear,
}

impl MixFfn {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, hidden)?,
            dw: DepthwiseConv3x3::new(ps, &format!("{name}.dw"), hidden)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let y = self.fc1.forward(x)?;
        let y = self.dw.forward(&nn::to_map(&y, h, w)?)?.gelu()?;
        self.fc2.forward(&nn::to_tokens(&y)?)
    }
}

#[derive(Clone)]
pub struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    ffn: MixFfn,
}

impl Block {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, sr: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), dim)?,
            attn: Attention::new(ps, &format!("{name}.attn"), dim, heads, sr)?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), dim)?,
            ffn: MixFfn::new(ps, &format!("{name}.ffn"), dim, hidden)?,
        })
    }

    pub fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let n = self.norm1.forward(x)?;
        let x = (x + self_attention(&self.attn, &n, h, w)?)?;
        let y = self.ffn.forward(&self.norm2.forward(&x)?, h, w)?;
        Ok((x + y)?)
    }
}

#[derive(Clone)]
pub struct Stage {
    patch: Conv2d,
    patch_norm: LayerNorm,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl Stage {
    /// `(B, C_in, H, W)` to `(B, C, H/stride, W/stride)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.patch.forward(x)?;
        let (_, _, h, w) = y.dims4()?;
        let mut t = self.patch_norm.forward(&nn::to_tokens(&y)?)?;
        for block in &self.blocks {
            t = block.forward(&t, h, w)?;
        }
        nn::to_map(&self.norm.forward(&t)?, h, w)
    }
}

/// Four encoder levels ordered finest first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

#[derive(Clone)]
pub struct Branch {
    stages: Vec<Stage>,
    in_channels: usize,
    config: BackboneConfig,
}

impl Branch {
    pub fn new(ps: &mut ParamStore, name: &str, in_channels: usize, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut prev = in_channels;
        for n in 0..NUM_STAGES {
            let d = config.embed_dims[n];
            let prefix = format!("{name}.stage{}", n + 1);
            let k = config.patch_kernels[n];
            let patch = Conv2d::new(ps, &format!("{prefix}.patch"), prev, d, k, config.patch_strides[n], k / 2)?;
            let patch_norm = LayerNorm::new(ps, &format!("{prefix}.patch_norm"), d)?;
            let blocks = (0..config.depths[n])
                .map(|i| {
                    Block::new(
                        ps,
                        &format!("{prefix}.block{i}"),
                        d,
                        config.num_heads[n],
                        config.sr_ratios[n],
                        config.hidden_dim(n),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let norm = LayerNorm::new(ps, &format!("{prefix}.norm"), d)?;
            stages.push(Stage { patch, patch_norm, blocks, norm });
            prev = d;
        }
        Ok(Self { stages, in_channels, config: config.clone() })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn forward(&self, x: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(ModelError::Shape(format!("branch expects {} channels, got {c}", self.in_channels)));
        }
        self.config.check_input(h, w)?;
        let mut levels = Vec::with_capacity(NUM_STAGES);
        let mut cur = x.clone();
        for stage in &self.stages {
            cur = stage.forward(&cur)?;
            levels.push(cur.clone());
        }
        Ok(FeaturePyramid { levels })
    }
}

pub fn forward_branch(branch: &Branch, input: &Tensor) -> Result<FeaturePyramid> {
    branch.forward(input)
}

/// The DSM and image encoders.
#[derive(Clone)]
pub struct DualBackbone {
    pub dsm: Branch,
    pub image: Branch,
    shared: bool,
}

impl DualBackbone {
    pub fn is_shared(&self) -> bool {
        self.shared
    }

    /// With shared weights the single-channel DSM is repeated to three channels.
    pub fn forward_dsm(&self, dsm: &Tensor) -> Result<FeaturePyramid> {
        if self.shared && dsm.dim(1)? == 1 {
            self.dsm.forward(&dsm.repeat((1, 3, 1, 1))?)
        } else {
            self.dsm.forward(dsm)
        }
    }

    pub fn forward_image(&self, image: &Tensor) -> Result<FeaturePyramid> {
        self.image.forward(image)
    }
}

pub fn build_dual_backbone(
    ps: &mut ParamStore,
    name: &str,
    config: &BackboneConfig,
    share_weights: bool,
) -> Result<DualBackbone> {
    if share_weights {
        let branch = Branch::new(ps, &format!("{name}.shared"), 3, config)?;
        return Ok(DualBackbone { dsm: branch.clone(), image: branch, shared: true });
    }
    Ok(DualBackbone {
        dsm: Branch::new(ps, &format!("{name}.dsm"), 1, config)?,
        image: Branch::new(ps, &format!("{name}.image"), 3, config)?,
        shared: false,
    })
}
