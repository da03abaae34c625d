//! On-disk dataset layout.
//!
//! ```text
//! <root>/<split>/ids.txt            one sample id per line
//! <root>/<split>/stats.json         SplitStats
//! <root>/<split>/<id>/dsm_pre.npy        f32, 1×H×W, meters
//! <root>/<split>/<id>/image_post.npy     u8,  3×H×W
//! <root>/<split>/<id>/sem_change.npy     u8,  1×H×W, {0, 1, 2}
//! <root>/<split>/<id>/height_change.npy  f32, 1×H×W, meters
//! <root>/<split>/<id>/relevance.npy      u8,  1×H×W, 0 → -1, 1 → +1
//! ```
//!
//! NPY stores the raw little-endian buffers, so float channels round-trip
//! bit-exactly.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use ndarray_npy::{read_npy, write_npy, ReadableElement, WritableElement};
use serde::{Deserialize, Serialize};

use crate::classes::NUM_CLASSES;
use crate::datapipe::{overlap_mask, HeightScale, InputStats, SamplePair};
use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::synthcity::compute_normalization_stats;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
pub const DEFAULT_COVERAGE: f64 = 0.995;
pub const STATS_FILE: &str = "stats.json";
pub const IDS_FILE: &str = "ids.txt";

/// Split-level statistics document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub tiles: usize,
    pub coverage: f64,
    pub height_scale: HeightScale,
    pub input_stats: InputStats,
    /// Pixel counts of background, demolished and newly built.
    pub class_pixel_counts: [u64; NUM_CLASSES],
    /// Agreement between semantic and pseudo-change supports over the split.
    pub intersection_rate: f64,
}

impl SplitStats {
    pub fn compute(tiles: &[SamplePair], coverage: f64) -> Result<Self> {
        let height_scale = compute_normalization_stats(tiles, coverage)?;
        let input_stats = InputStats::from_tiles(tiles)?;
        let mut class_pixel_counts = [0u64; NUM_CLASSES];
        let (mut inter, mut union) = (0usize, 0usize);
        for t in tiles {
            for &c in t.gt_semantic.as_slice() {
                class_pixel_counts[c as usize] += 1;
            }
            let o = overlap_mask(&t.gt_semantic, &t.gt_pseudo)?;
            inter += o.intersection;
            union += o.union;
        }
        Ok(Self {
            tiles: tiles.len(),
            coverage,
            height_scale,
            input_stats,
            class_pixel_counts,
            intersection_rate: if union == 0 { 1.0 } else { inter as f64 / union as f64 },
        })
    }
}

/// Tile counts per split: train is floored, validation rounded, and the
/// remainder goes to test.
pub fn split_counts(total: usize, train_fraction: f64, val_fraction: f64) -> Result<(usize, usize, usize)> {
    if !(0.0..=1.0).contains(&train_fraction)
        || !(0.0..=1.0).contains(&val_fraction)
        || train_fraction + val_fraction > 1.0
    {
        return Err(Error::InvalidConfig(format!(
            "split fractions train={train_fraction} val={val_fraction} are not a partition"
        )));
    }
    let train = (train_fraction * total as f64).floor() as usize;
    let val = ((val_fraction * total as f64).round() as usize).min(total - train);
    Ok((train, val, total - train - val))
}

fn write_array<T: WritableElement + Copy>(path: PathBuf, raster: &Raster<T>) -> Result<()> {
    let (c, h, w) = raster.dims();
    let array = Array3::from_shape_vec((c, h, w), raster.as_slice().to_vec())
        .map_err(|e| Error::Codec { path: path.clone(), message: e.to_string() })?;
    write_npy(&path, &array).map_err(|e| Error::Codec { path, message: e.to_string() })
}

fn read_array<T: ReadableElement + Copy>(path: PathBuf) -> Result<Raster<T>> {
    let array: Array3<T> = read_npy(&path).map_err(|e| Error::Codec { path: path.clone(), message: e.to_string() })?;
    let (c, h, w) = array.dim();
    let data = if array.is_standard_layout() {
        array.into_raw_vec_and_offset().0
    } else {
        array.iter().copied().collect()
    };
    Raster::from_vec(c, h, w, data)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json { path: path.into(), source: e })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })
}

pub fn write_sample(dir: &Path, sample: &SamplePair) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_array(dir.join("dsm_pre.npy"), &sample.dsm_pre)?;
    write_array(dir.join("image_post.npy"), &sample.image_post)?;
    write_array(dir.join("sem_change.npy"), &sample.gt_semantic)?;
    write_array(dir.join("height_change.npy"), &sample.gt_height)?;
    write_array(dir.join("relevance.npy"), &sample.relevance.map(|m| u8::from(m > 0)))
}

pub fn read_sample(dir: &Path, id: &str) -> Result<SamplePair> {
    let relevance: Raster<u8> = read_array(dir.join("relevance.npy"))?;
    if relevance.as_slice().iter().any(|&v| v > 1) {
        return Err(Error::Codec {
            path: dir.join("relevance.npy"),
            message: "relevance must be encoded as 0/1".into(),
        });
    }
    SamplePair::new(
        id.to_string(),
        read_array(dir.join("dsm_pre.npy"))?,
        read_array(dir.join("image_post.npy"))?,
        read_array(dir.join("sem_change.npy"))?,
        read_array(dir.join("height_change.npy"))?,
        relevance.map(|v| if v == 1 { 1 } else { -1 }),
    )
}

/// Writes every tile of a split plus its id manifest and statistics.
pub fn write_split(root: &Path, split: &str, tiles: &[SamplePair], coverage: f64) -> Result<Option<SplitStats>> {
    let dir = root.join(split);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut ids = String::new();
    for t in tiles {
        write_sample(&dir.join(&t.id), t)?;
        ids.push_str(&t.id);
        ids.push('\n');
    }
    fs::write(dir.join(IDS_FILE), ids).map_err(|e| Error::io(dir.join(IDS_FILE), e))?;
    if tiles.is_empty() {
        return Ok(None);
    }
    let stats = SplitStats::compute(tiles, coverage)?;
    write_json(&dir.join(STATS_FILE), &stats)?;
    Ok(Some(stats))
}

pub fn read_ids(root: &Path, split: &str) -> Result<Vec<String>> {
    let path = root.join(split).join(IDS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

pub fn read_split(root: &Path, split: &str) -> Result<Vec<SamplePair>> {
    let dir = root.join(split);
    read_ids(root, split)?
        .iter()
        .map(|id| read_sample(&dir.join(id), id))
        .collect()
}

pub fn read_stats(root: &Path, split: &str) -> Result<SplitStats> {
    read_json(&root.join(split).join(STATS_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_counts(20, 0.68, 0.08).unwrap(), (13, 2, 5));
        assert_eq!(split_counts(1, 0.68, 0.08).unwrap(), (0, 0, 1));
        assert_eq!(split_counts(100, 0.68, 0.08).unwrap(), (68, 8, 24));
        assert!(split_counts(10, 0.9, 0.2).is_err());
    }
}
