//! Sample records, ground-truth derivation, normalization and batching.

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classes::{BACKGROUND, DEMOLISHED, NEGATIVE, NEWLY_BUILT, POSITIVE, UNCHANGED};
use crate::error::{Error, Result};
use crate::raster::{ClassMap, Mask, Raster, RasterTile};

/// One co-registered training/evaluation sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub id: String,
    /// Pre-period DSM in meters.
    pub dsm_pre: RasterTile,
    /// Post-period image as stored on disk (8-bit, 3 channels); scaled to
    /// `[0, 1]` by [`normalize_inputs`].
    pub image_post: Raster<u8>,
    pub gt_semantic: ClassMap,
    /// Height change in meters.
    pub gt_height: RasterTile,
    /// Sign classes of `gt_height`, see [`derive_pseudo_gt`].
    pub gt_pseudo: ClassMap,
    pub overlap_mask: Mask,
    pub relevance: Raster<i8>,
}

impl SamplePair {
    /// Assembles a sample and derives its pseudo-change map and overlap mask.
    pub fn new(
        id: String,
        dsm_pre: RasterTile,
        image_post: Raster<u8>,
        gt_semantic: ClassMap,
        gt_height: RasterTile,
        relevance: Raster<i8>,
    ) -> Result<Self> {
        dsm_pre.ensure_same_dims(&gt_semantic)?;
        dsm_pre.ensure_same_dims(&gt_height)?;
        dsm_pre.ensure_same_dims(&relevance)?;
        dsm_pre.ensure_same_grid(&image_post)?;
        if image_post.channels() != 3 {
            return Err(Error::InvalidValue(format!(
                "post image must have 3 channels, got {}",
                image_post.channels()
            )));
        }
        if let Some(c) = gt_semantic.as_slice().iter().find(|&&c| c > NEWLY_BUILT) {
            return Err(Error::InvalidValue(format!("semantic class {c} outside {{0, 1, 2}}")));
        }
        let gt_pseudo = derive_pseudo_gt(&gt_height)?;
        let overlap = overlap_mask(&gt_semantic, &gt_pseudo)?;
        Ok(Self {
            id,
            dsm_pre,
            image_post,
            gt_semantic,
            gt_height,
            gt_pseudo,
            overlap_mask: overlap.mask,
            relevance,
        })
    }

    pub fn height(&self) -> usize {
        self.dsm_pre.height()
    }

    pub fn width(&self) -> usize {
        self.dsm_pre.width()
    }

    pub fn has_change(&self) -> bool {
        self.gt_semantic.as_slice().iter().any(|&c| c != BACKGROUND)
    }
}

/// Hard thresholding of a height-change map at zero.
pub fn derive_pseudo_gt(gt_height: &RasterTile) -> Result<ClassMap> {
    if gt_height.as_slice().iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidValue("height map contains NaN".into()));
    }
    Ok(gt_height.map(|v| {
        if v > 0.0 {
            POSITIVE
        } else if v < 0.0 {
            NEGATIVE
        } else {
            UNCHANGED
        }
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Overlap {
    pub mask: Mask,
    pub intersection: usize,
    pub union: usize,
}

impl Overlap {
    /// `|mask| / |semantic ∪ pseudo|`; two change-free maps agree fully.
    pub fn rate(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

fn sign_pairs(semantic: u8, pseudo: u8) -> bool {
    matches!((semantic, pseudo), (DEMOLISHED, NEGATIVE) | (NEWLY_BUILT, POSITIVE))
}

/// Pixels where the semantic and pseudo labels mark the same kind of change.
pub fn overlap_mask(gt_semantic: &ClassMap, gt_pseudo: &ClassMap) -> Result<Overlap> {
    gt_semantic.ensure_same_dims(gt_pseudo)?;
    let mut union = 0;
    let mut intersection = 0;
    let data: Vec<bool> = gt_semantic
        .as_slice()
        .iter()
        .zip(gt_pseudo.as_slice())
        .map(|(&s, &p)| {
            if s != BACKGROUND || p != UNCHANGED {
                union += 1;
            }
            let hit = sign_pairs(s, p);
            intersection += usize::from(hit);
            hit
        })
        .collect();
    let (c, h, w) = gt_semantic.dims();
    Ok(Overlap {
        mask: Raster::from_vec(c, h, w, data)?,
        intersection,
        union,
    })
}

/// Elevation interval mapped affinely onto `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeightScale {
    pub min_m: f64,
    pub max_m: f64,
}

impl HeightScale {
    pub fn new(min_m: f64, max_m: f64) -> Result<Self> {
        if !(min_m <= max_m) {
            return Err(Error::InvalidValue(format!("height scale min {min_m} exceeds max {max_m}")));
        }
        Ok(Self { min_m, max_m })
    }

    fn span(&self) -> Result<f64> {
        let span = self.max_m - self.min_m;
        if span > 0.0 {
            Ok(span)
        } else {
            Err(Error::InvalidValue(format!(
                "degenerate height scale ({}, {})",
                self.min_m, self.max_m
            )))
        }
    }

    /// Meters to `[-1, 1]`, clamping out-of-range heights.
    pub fn normalize(&self, h_m: f64) -> Result<f64> {
        let span = self.span()?;
        Ok((2.0 * (h_m - self.min_m) / span - 1.0).clamp(-1.0, 1.0))
    }

    pub fn denormalize(&self, v: f64) -> Result<f64> {
        let span = self.span()?;
        Ok(self.min_m + (v + 1.0) * 0.5 * span)
    }
}

pub fn normalize_height(h_m: f64, scale: &HeightScale) -> Result<f64> {
    scale.normalize(h_m)
}

pub fn denormalize_height(v: f64, scale: &HeightScale) -> Result<f64> {
    scale.denormalize(v)
}

/// Standardization statistics of the model inputs, computed on the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputStats {
    pub dsm_mean: f64,
    pub dsm_std: f64,
    /// Per channel, on the `[0, 1]` intensity scale.
    pub image_mean: [f64; 3],
    pub image_std: [f64; 3],
}

struct Moments {
    n: f64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn new() -> Self {
        Self { n: 0.0, sum: 0.0, sum_sq: 0.0 }
    }

    fn push(&mut self, v: f64) {
        self.n += 1.0;
        self.sum += v;
        self.sum_sq += v * v;
    }

    fn mean_std(&self) -> (f64, f64) {
        let mean = self.sum / self.n;
        let var = (self.sum_sq / self.n - mean * mean).max(0.0);
        (mean, var.sqrt())
    }
}

impl InputStats {
    pub fn from_tiles(tiles: &[SamplePair]) -> Result<Self> {
        if tiles.is_empty() {
            return Err(Error::EmptyInput("input statistics need at least one tile"));
        }
        let mut dsm = Moments::new();
        let mut image = [Moments::new(), Moments::new(), Moments::new()];
        for t in tiles {
            t.dsm_pre.as_slice().iter().for_each(|&v| dsm.push(f64::from(v)));
            for (c, m) in image.iter_mut().enumerate() {
                t.image_post.channel(c).iter().for_each(|&v| m.push(f64::from(v) / 255.0));
            }
        }
        let (dsm_mean, dsm_std) = dsm.mean_std();
        let mut image_mean = [0.0; 3];
        let mut image_std = [0.0; 3];
        for c in 0..3 {
            (image_mean[c], image_std[c]) = image[c].mean_std();
        }
        Ok(Self { dsm_mean, dsm_std, image_mean, image_std })
    }
}

/// Model-ready inputs: standardized DSM and image.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedPair {
    pub dsm: RasterTile,
    pub image: RasterTile,
}

fn standardize(values: impl Iterator<Item = f64>, mean: f64, std: f64, out: &mut Vec<f32>) {
    if std > 0.0 {
        out.extend(values.map(|v| ((v - mean) / std) as f32));
    } else {
        out.extend(values.map(|v| v as f32));
    }
}

pub fn normalize_inputs(dsm_pre: &RasterTile, image_post: &Raster<u8>, stats: &InputStats) -> Result<NormalizedPair> {
    dsm_pre.ensure_same_grid(image_post)?;
    if stats.dsm_std <= 0.0 {
        warn!("zero-variance DSM statistics; DSM channel left unstandardized");
    }
    let mut dsm = Vec::with_capacity(dsm_pre.as_slice().len());
    standardize(dsm_pre.as_slice().iter().map(|&v| f64::from(v)), stats.dsm_mean, stats.dsm_std, &mut dsm);

    let mut image = Vec::with_capacity(image_post.as_slice().len());
    for c in 0..image_post.channels() {
        if stats.image_std[c] <= 0.0 {
            warn!("zero-variance image channel {c}; left unstandardized");
        }
        standardize(
            image_post.channel(c).iter().map(|&v| f64::from(v) / 255.0),
            stats.image_mean[c],
            stats.image_std[c],
            &mut image,
        );
    }
    Ok(NormalizedPair {
        dsm: Raster::from_vec(1, dsm_pre.height(), dsm_pre.width(), dsm)?,
        image: Raster::from_vec(image_post.channels(), image_post.height(), image_post.width(), image)?,
    })
}

/// Sample indices grouped into batches; the last batch may be short.
pub fn make_batches(num_samples: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Vec<usize>>> {
    if batch_size < 1 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    if num_samples == 0 {
        return Err(Error::EmptyInput("cannot batch an empty dataset"));
    }
    let mut order: Vec<usize> = (0..num_samples).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Stacked, normalized arrays for one batch in `N×C×H×W` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub size: usize,
    pub height: usize,
    pub width: usize,
    /// `N×1×H×W`
    pub dsm: Vec<f32>,
    /// `N×3×H×W`
    pub image: Vec<f32>,
    /// `N×H×W` class codes.
    pub semantic: Vec<u8>,
    /// `N×H×W` heights on the `[-1, 1]` scale.
    pub height_norm: Vec<f32>,
    pub pseudo: Vec<u8>,
    pub overlap: Vec<bool>,
}

impl Batch {
    pub fn collate(samples: &[&SamplePair], stats: &InputStats, scale: &HeightScale) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptyInput("empty batch"))?;
        let (height, width) = (first.height(), first.width());
        let mut batch = Batch {
            ids: Vec::with_capacity(samples.len()),
            size: samples.len(),
            height,
            width,
            dsm: Vec::new(),
            image: Vec::new(),
            semantic: Vec::new(),
            height_norm: Vec::new(),
            pseudo: Vec::new(),
            overlap: Vec::new(),
        };
        for s in samples {
            first.dsm_pre.ensure_same_dims(&s.dsm_pre)?;
            let inputs = normalize_inputs(&s.dsm_pre, &s.image_post, stats)?;
            batch.ids.push(s.id.clone());
            batch.dsm.extend_from_slice(inputs.dsm.as_slice());
            batch.image.extend_from_slice(inputs.image.as_slice());
            batch.semantic.extend_from_slice(s.gt_semantic.as_slice());
            for &h in s.gt_height.as_slice() {
                batch.height_norm.push(scale.normalize(f64::from(h))? as f32);
            }
            batch.pseudo.extend_from_slice(s.gt_pseudo.as_slice());
            batch.overlap.extend_from_slice(s.overlap_mask.as_slice());
        }
        Ok(batch)
    }
}
