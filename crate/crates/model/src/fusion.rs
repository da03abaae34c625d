//! Cross-modal fusion of aligned DSM and image pyramid levels.

use candle_core::Tensor;

use crate::backbone::{Attention, BackboneConfig, FeaturePyramid, NUM_STAGES};
use crate::error::{ModelError, Result};
use crate::nn::{self, ChannelNorm, Conv2d, LayerNorm, Linear};
use crate::params::ParamStore;

/// Queries from `query_feats`, keys and values from `kv_feats`; token layout `(B, H*W, C)`.
pub fn cross_attention(attn: &Attention, query_feats: &Tensor, kv_feats: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    attn.forward(query_feats, kv_feats, h, w)
}

/// One fusion level.
#[derive(Clone)]
pub struct Cfm {
    norm_h: LayerNorm,
    norm_i: LayerNorm,
    attn_h: Attention,
    attn_i: Attention,
    mlp1: Linear,
    mlp2: Linear,
    conv: Conv2d,
    conv_norm: ChannelNorm,
    residual: Option<Conv2d>,
    dim: usize,
}

impl Cfm {
    /// `prev_dim` is the width of the next-finer fused level, `None` at the first level.
    /// `tie_cross` makes both directions use the same attention and norm parameters.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        prev_dim: Option<usize>,
        heads: usize,
        sr_ratio: usize,
        tie_cross: bool,
    ) -> Result<Self> {
        let other = if tie_cross { "h" } else { "i" };
        Ok(Self {
            norm_h: LayerNorm::new(ps, &format!("{name}.norm_h"), dim)?,
            norm_i: LayerNorm::new(ps, &format!("{name}.norm_{other}"), dim)?,
            attn_h: Attention::new(ps, &format!("{name}.attn_h"), dim, heads, sr_ratio)?,
            attn_i: Attention::new(ps, &format!("{name}.attn_{other}"), dim, heads, sr_ratio)?,
            mlp1: Linear::new(ps, &format!("{name}.mlp1"), 2 * dim, dim)?,
            mlp2: Linear::new(ps, &format!("{name}.mlp2"), dim, dim)?,
            conv: Conv2d::new(ps, &format!("{name}.conv"), dim, dim, 3, 1, 1)?,
            conv_norm: ChannelNorm::new(ps, &format!("{name}.conv_norm"), dim)?,
            residual: match prev_dim {
                Some(p) => Some(Conv2d::new(ps, &format!("{name}.residual"), p, dim, 1, 1, 0)?),
                None => None,
            },
            dim,
        })
    }

    /// The two attended streams `(a, b)` in token layout: `a` queries with the
    /// DSM features, `b` with the image features. Each keeps its query as a
    /// residual.
    pub fn cross_pair(&self, x_h: &Tensor, x_i: &Tensor) -> Result<(Tensor, Tensor)> {
        if x_h.dims() != x_i.dims() {
            return Err(ModelError::Shape(format!(
                "fusion inputs are misaligned: {:?} vs {:?}",
                x_h.dims(),
                x_i.dims()
            )));
        }
        let (_, c, h, w) = x_h.dims4()?;
        if c != self.dim {
            return Err(ModelError::Shape(format!("fusion level expects {} channels, got {c}", self.dim)));
        }
        let th = nn::to_tokens(x_h)?;
        let ti = nn::to_tokens(x_i)?;
        let nh = self.norm_h.forward(&th)?;
        let ni = self.norm_i.forward(&ti)?;
        let a = (&th + cross_attention(&self.attn_h, &nh, &ni, h, w)?)?;
        let b = (&ti + cross_attention(&self.attn_i, &ni, &nh, h, w)?)?;
        Ok((a, b))
    }

    /// Merged features before the cross-scale residual.
    pub fn merge(&self, a: &Tensor, b: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let m = self.mlp2.forward(&self.mlp1.forward(&Tensor::cat(&[a, b], 2)?)?.gelu()?)?;
        let m = self.conv.forward(&nn::to_map(&m, h, w)?)?;
        Ok(self.conv_norm.forward(&m)?.gelu()?)
    }

    pub fn forward(&self, x_h: &Tensor, x_i: &Tensor, f_prev: Option<&Tensor>) -> Result<Tensor> {
        let (_, _, h, w) = x_h.dims4()?;
        let (a, b) = self.cross_pair(x_h, x_i)?;
        let merged = self.merge(&a, &b, h, w)?;
        match (f_prev, &self.residual) {
            (None, _) => Ok(merged),
            (Some(prev), Some(proj)) => {
                let (_, _, ph, pw) = prev.dims4()?;
                if ph % h != 0 || pw % w != 0 || ph / h != pw / w {
                    return Err(ModelError::Shape(format!("previous level {ph}x{pw} does not pool onto {h}x{w}")));
                }
                let r = nn::avg_pool(&proj.forward(prev)?, ph / h)?;
                Ok((merged + r)?)
            }
            (Some(_), None) => Err(ModelError::Shape("first fusion level takes no previous level".into())),
        }
    }
}

pub fn cfm(module: &Cfm, x_h: &Tensor, x_i: &Tensor, f_prev: Option<&Tensor>) -> Result<Tensor> {
    module.forward(x_h, x_i, f_prev)
}

/// Fused levels f¹..f⁴, finest first.
#[derive(Debug, Clone)]
pub struct FusedPyramid {
    pub levels: Vec<Tensor>,
}

#[derive(Clone)]
pub struct Fusion {
    levels: Vec<Cfm>,
}

impl Fusion {
    pub fn new(ps: &mut ParamStore, name: &str, config: &BackboneConfig) -> Result<Self> {
        let levels = (0..NUM_STAGES)
            .map(|n| {
                Cfm::new(
                    ps,
                    &format!("{name}.level{}", n + 1),
                    config.embed_dims[n],
                    (n > 0).then(|| config.embed_dims[n - 1]),
                    config.num_heads[n],
                    config.sr_ratios[n],
                    false,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { levels })
    }

    pub fn forward(&self, dsm: &FeaturePyramid, image: &FeaturePyramid) -> Result<FusedPyramid> {
        if dsm.levels.len() != NUM_STAGES || image.levels.len() != NUM_STAGES {
            return Err(ModelError::Shape("fusion needs four levels from each branch".into()));
        }
        let mut out: Vec<Tensor> = Vec::with_capacity(NUM_STAGES);
        for (n, module) in self.levels.iter().enumerate() {
            let f = module.forward(&dsm.levels[n], &image.levels[n], out.last())?;
            out.push(f);
        }
        Ok(FusedPyramid { levels: out })
    }
}
