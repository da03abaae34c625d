//! Training losses and the semantic/pseudo consistency functional.

use candle_core::{DType, Device, Tensor};
use mmcd_core::classes::NUM_CLASSES;
use mmcd_core::datapipe::Batch;
use serde::{Deserialize, Serialize};

use crate::decoder::ModelOutputs;
use crate::error::{ModelError, Result};
use crate::nn;

pub const PROB_FLOOR: f64 = 1e-7;

/// Weights on the pseudo, height and semantic losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.2, lambda2: 0.2, lambda3: 0.6 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3];
        if all.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) || all.iter().all(|&l| l == 0.0) {
            return Err(ModelError::Config(format!("loss weights {all:?} must be non-negative with one positive")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w_background: f64,
    pub w_demolished: f64,
    pub w_newlybuilt: f64,
}

impl Default for ClassWeights {
    fn default() -> Self {
        Self { w_background: 0.05, w_demolished: 0.95, w_newlybuilt: 0.95 }
    }
}

impl ClassWeights {
    pub fn as_array(&self) -> [f64; NUM_CLASSES] {
        [self.w_background, self.w_demolished, self.w_newlybuilt]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.as_array();
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || w.iter().all(|&v| v == 0.0) {
            return Err(ModelError::Config(format!("class weights {w:?} must be non-negative and not all zero")));
        }
        Ok(())
    }

    fn tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.as_array().to_vec(), (1, NUM_CLASSES, 1, 1), device)?.to_dtype(dtype)?)
    }
}

/// `(B, H, W)` integer labels to a `(B, 3, H, W)` indicator in `dtype`.
pub fn one_hot(labels: &Tensor, dtype: DType) -> Result<Tensor> {
    let max = labels.to_dtype(DType::U32)?.flatten_all()?.max(0)?.to_scalar::<u32>()?;
    if max as usize >= NUM_CLASSES {
        return Err(ModelError::Shape(format!("label {max} is outside 0..{NUM_CLASSES}")));
    }
    let classes = Tensor::arange(0u32, NUM_CLASSES as u32, labels.device())?.reshape((1, NUM_CLASSES, 1, 1))?;
    Ok(labels.to_dtype(DType::U32)?.unsqueeze(1)?.broadcast_eq(&classes)?.to_dtype(dtype)?)
}

fn check_map(pred: &Tensor, labels: &Tensor) -> Result<()> {
    let (b, c, h, w) = pred.dims4()?;
    if c != NUM_CLASSES || labels.dims() != [b, h, w] {
        return Err(ModelError::Shape(format!(
            "predictions {:?} do not match labels {:?}",
            pred.dims(),
            labels.dims()
        )));
    }
    Ok(())
}

fn weighted_nll(log_p: &Tensor, labels: &Tensor, weights: &ClassWeights) -> Result<Tensor> {
    let onehot = one_hot(labels, log_p.dtype())?;
    let w = weights.tensor(log_p.dtype(), log_p.device())?;
    let per_pixel = (onehot.broadcast_mul(&w)? * log_p)?.sum(1)?.neg()?;
    Ok(per_pixel.mean_all()?)
}

/// Mean over pixels of `w_label · −log softmax(logits)_label`.
pub fn weighted_ce_logits(logits: &Tensor, labels: &Tensor, weights: &ClassWeights) -> Result<Tensor> {
    check_map(logits, labels)?;
    let m = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&m)?;
    let log_p = shifted.broadcast_sub(&shifted.exp()?.sum_keepdim(1)?.log()?)?;
    weighted_nll(&log_p, labels, weights)
}

/// Same as [`weighted_ce_logits`] for probabilities, floored at [`PROB_FLOOR`].
pub fn weighted_ce_probs(probs: &Tensor, labels: &Tensor, weights: &ClassWeights) -> Result<Tensor> {
    check_map(probs, labels)?;
    weighted_nll(&probs.clamp(PROB_FLOOR, 1.0)?.log()?, labels, weights)
}

pub fn mse_height(pred_norm: &Tensor, gt_norm: &Tensor) -> Result<Tensor> {
    if pred_norm.dims() != gt_norm.dims() {
        return Err(ModelError::Shape(format!(
            "height prediction {:?} vs target {:?}",
            pred_norm.dims(),
            gt_norm.dims()
        )));
    }
    Ok((pred_norm - gt_norm)?.sqr()?.mean_all()?)
}

/// Mean over `overlap` pixels of the L1 distance between pseudo probabilities
/// (unchanged, positive, negative) and semantic probabilities reordered to
/// (background, newly built, demolished). Zero when the mask is empty.
pub fn consistency(pred_psc: &Tensor, pred_sc: &Tensor, overlap: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = pred_psc.dims4()?;
    if pred_sc.dims() != pred_psc.dims() || c != NUM_CLASSES {
        return Err(ModelError::Shape(format!("{:?} vs {:?}", pred_psc.dims(), pred_sc.dims())));
    }
    let mask = overlap.reshape((b, 1, h, w))?.to_dtype(pred_psc.dtype())?;
    let count = mask.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if count == 0.0 {
        return Ok(Tensor::zeros((), pred_psc.dtype(), pred_psc.device())?);
    }
    let order = Tensor::new(&[0u32, 2, 1], pred_sc.device())?;
    let paired = pred_sc.index_select(&order, 1)?;
    let l1 = (pred_psc - paired)?.abs()?.sum_keepdim(1)?;
    Ok(((l1 * mask)?.sum_all()? / count)?)
}

/// `λ1·pseudo + λ2·height + λ3·semantic` over the present components.
pub fn total_loss(l_pseudo: Option<f64>, l_height: Option<f64>, l_semantic: Option<f64>, lw: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for (name, value, lambda) in [
        ("pseudo", l_pseudo, lw.lambda1),
        ("height", l_height, lw.lambda2),
        ("semantic", l_semantic, lw.lambda3),
    ] {
        if let Some(v) = value {
            if !v.is_finite() {
                return Err(ModelError::NonFinite(format!("{name} loss is {v}")));
            }
            total += lambda * v;
        }
    }
    Ok(total)
}

/// Supervision tensors for one batch.
#[derive(Debug, Clone)]
pub struct Targets {
    /// `(B, H, W)` u8
    pub semantic: Tensor,
    pub pseudo: Tensor,
    /// `(B, 1, H, W)`
    pub height_norm: Tensor,
    pub overlap: Tensor,
}

impl Targets {
    pub fn from_batch(batch: &Batch, dtype: DType, device: &Device) -> Result<Self> {
        let (b, h, w) = (batch.size, batch.height, batch.width);
        Ok(Self {
            semantic: Tensor::from_vec(batch.semantic.clone(), (b, h, w), device)?,
            pseudo: Tensor::from_vec(batch.pseudo.clone(), (b, h, w), device)?,
            height_norm: Tensor::from_vec(batch.height_norm.clone(), (b, 1, h, w), device)?.to_dtype(dtype)?,
            overlap: Tensor::from_vec(batch.overlap.iter().map(|&m| u8::from(m)).collect::<Vec<_>>(), (b, 1, h, w), device)?
                .to_dtype(dtype)?,
        })
    }
}

/// Inputs for one batch in `(B, C, H, W)` layout.
pub fn batch_inputs(batch: &Batch, dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
    let (b, h, w) = (batch.size, batch.height, batch.width);
    let dsm = Tensor::from_vec(batch.dsm.clone(), (b, 1, h, w), device)?.to_dtype(dtype)?;
    let image = Tensor::from_vec(batch.image.clone(), (b, 3, h, w), device)?.to_dtype(dtype)?;
    Ok((dsm, image))
}

#[derive(Debug, Clone)]
pub struct LossTerms {
    pub pseudo: Option<Tensor>,
    pub height: Option<Tensor>,
    pub semantic: Option<Tensor>,
    /// Present when both the semantic and pseudo heads are enabled.
    pub consistency: Option<Tensor>,
    pub total: Tensor,
}

/// Loss terms for one forward pass. The consistency term joins the total
/// only with a positive `mu`; otherwise it is computed on detached outputs.
pub fn compute_losses(
    outputs: &ModelOutputs,
    targets: &Targets,
    lw: &LossWeights,
    cw: &ClassWeights,
    mu: f64,
) -> Result<LossTerms> {
    let semantic = outputs
        .sem_logits
        .as_ref()
        .map(|l| weighted_ce_logits(l, &targets.semantic, cw))
        .transpose()?;
    let height = outputs
        .height_norm
        .as_ref()
        .map(|p| mse_height(p, &targets.height_norm))
        .transpose()?;
    let pseudo = outputs
        .pseudo_probs
        .as_ref()
        .map(|p| weighted_ce_probs(p, &targets.pseudo, cw))
        .transpose()?;
    let consistency = match (&outputs.pseudo_probs, &outputs.sem_logits) {
        (Some(p), Some(l)) if mu > 0.0 => Some(consistency(p, &nn::softmax_channels(l)?, &targets.overlap)?),
        (Some(p), Some(l)) => Some(consistency(&p.detach(), &nn::softmax_channels(&l.detach())?, &targets.overlap)?),
        _ => None,
    };
    let device = targets.height_norm.device();
    let mut total = Tensor::zeros((), targets.height_norm.dtype(), device)?;
    for (term, lambda) in [(&pseudo, lw.lambda1), (&height, lw.lambda2), (&semantic, lw.lambda3)] {
        if let Some(t) = term {
            if lambda != 0.0 {
                total = (total + (t * lambda)?)?;
            }
        }
    }
    if mu > 0.0 {
        if let Some(c) = &consistency {
            total = (total + (c * mu)?)?;
        }
    }
    Ok(LossTerms { pseudo, height, semantic, consistency, total })
}
