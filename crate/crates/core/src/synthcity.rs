//! Procedural toy cities and the change-annotation rules applied to them.
//!
//! A scene is a flat ground plane at elevation zero carrying axis-aligned
//! rectangular buildings with constant rooftop heights. Buildings are static,
//! newly built, demolished, or rebuilt (demolished and replaced by an
//! overlapping building of a different height). The post-period image is a
//! shaded rendering of the post-period DSM, so the two input modalities are
//! correlated without being equal.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::classes::{BACKGROUND, DEMOLISHED, NEWLY_BUILT};
use crate::datapipe::{HeightScale, SamplePair};
use crate::error::{Error, Result};
use crate::raster::{label_components, ClassMap, Mask, Raster, RasterTile};

/// Change magnitudes below this many noise sigmas are treated as zero.
pub const NOISE_THRESHOLD_SIGMAS: f32 = 3.0;

/// Per-DSM sensor noise is truncated at this many sigmas, so that the
/// difference of two noisy DSMs never exceeds the labeling threshold.
const NOISE_TRUNCATION_SIGMAS: f32 = 1.5;

const MAX_PLACEMENT_ATTEMPTS: usize = 2000;
const MAX_FOOTPRINT_COVERAGE: f64 = 0.8;

const SUN_AZIMUTH_DEG: f32 = 315.0;
const SUN_ALTITUDE_DEG: f32 = 45.0;
const SHADOW_FACTOR: f32 = 0.35;
const TEXTURE_SIGMA: f32 = 0.03;
const GROUND_ALBEDO: [f32; 3] = [0.46, 0.44, 0.38];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Buildings present in both periods with unchanged height.
    pub num_buildings_pre: usize,
    pub num_new: usize,
    pub num_demolished: usize,
    pub num_rebuilt: usize,
    /// Rooftop height interval in meters.
    pub height_range: (f32, f32),
    /// Side-length interval of footprints in pixels.
    pub footprint_range: (usize, usize),
    /// Footprint corners and sides are multiples of this many pixels.
    pub footprint_snap: usize,
    /// Fraction of new/demolished buildings whose relevance is flipped to -1.
    pub occlusion_rate: f64,
    /// DSM sensor noise in meters.
    pub noise_sigma: f32,
    /// Ground sampling distance in meters, used by the shading model.
    pub pixel_size_m: f32,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            num_buildings_pre: 4,
            num_new: 3,
            num_demolished: 2,
            num_rebuilt: 1,
            height_range: (3.0, 24.0),
            footprint_range: (10, 24),
            footprint_snap: 1,
            occlusion_rate: 0.15,
            noise_sigma: 0.1,
            pixel_size_m: 0.5,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.width == 0 || self.height == 0 {
            return bad("scene width and height must be positive".into());
        }
        let (hmin, hmax) = self.height_range;
        if !(hmin > 0.0) || !(hmin <= hmax) || !hmax.is_finite() {
            return bad(format!("invalid height_range ({hmin}, {hmax})"));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad(format!("invalid noise_sigma {}", self.noise_sigma));
        }
        if hmin <= 2.0 * NOISE_THRESHOLD_SIGMAS * self.noise_sigma {
            return bad(format!(
                "minimum height {hmin} m does not clear the noise threshold for sigma {}",
                self.noise_sigma
            ));
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return bad(format!("occlusion_rate {} outside [0, 1]", self.occlusion_rate));
        }
        if !(self.pixel_size_m > 0.0) {
            return bad(format!("pixel_size_m must be positive, got {}", self.pixel_size_m));
        }
        let (fmin, fmax) = self.footprint_range;
        if self.footprint_snap == 0 {
            return bad("footprint_snap must be at least 1".into());
        }
        if fmin == 0 || fmin > fmax || fmax > self.width.min(self.height) {
            return bad(format!("invalid footprint_range ({fmin}, {fmax})"));
        }
        if self.side_choices().is_empty() {
            return bad(format!(
                "no multiple of footprint_snap {} lies in footprint_range ({fmin}, {fmax})",
                self.footprint_snap
            ));
        }
        let footprints = self.num_buildings_pre
            + self.num_new
            + self.num_demolished
            + 2 * self.num_rebuilt;
        let worst_area = (footprints * fmax * fmax) as f64;
        let scene_area = (self.width * self.height) as f64;
        if worst_area > MAX_FOOTPRINT_COVERAGE * scene_area {
            return bad(format!(
                "{footprints} footprints of up to {fmax}x{fmax} px may cover more than {:.0}% of the scene",
                MAX_FOOTPRINT_COVERAGE * 100.0
            ));
        }
        Ok(())
    }

    /// Threshold below which a height difference counts as noise.
    pub fn noise_threshold(&self) -> f32 {
        NOISE_THRESHOLD_SIGMAS * self.noise_sigma
    }

    fn side_choices(&self) -> Vec<usize> {
        let (fmin, fmax) = self.footprint_range;
        (fmin..=fmax)
            .filter(|s| s % self.footprint_snap == 0)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        x >= self.x && x < self.x + self.width && y >= self.y && y < self.y + self.height
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    /// True when the rectangles overlap or come closer than `gap` pixels.
    fn near(&self, other: &Rect, gap: usize) -> bool {
        self.x < other.x + other.width + gap
            && other.x < self.x + self.width + gap
            && self.y < other.y + other.height + gap
            && other.y < self.y + self.height + gap
    }

    fn intersects(&self, other: &Rect) -> bool {
        self.near(other, 0)
    }

    fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.y..self.y + self.height).flat_map(move |y| (self.x..self.x + self.width).map(move |x| (y, x)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FootprintKind {
    Static,
    New,
    Demolished,
    /// Pre-period footprint of a rebuilt site.
    RebuiltOld,
    /// Post-period footprint of a rebuilt site.
    RebuiltNew,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub rect: Rect,
    pub kind: FootprintKind,
    pub height_m: f32,
    /// Relevance flipped to -1 over this footprint.
    pub occluded: bool,
}

impl Footprint {
    pub fn in_pre(&self) -> bool {
        matches!(
            self.kind,
            FootprintKind::Static | FootprintKind::Demolished | FootprintKind::RebuiltOld
        )
    }

    pub fn in_post(&self) -> bool {
        matches!(
            self.kind,
            FootprintKind::Static | FootprintKind::New | FootprintKind::RebuiltNew
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub dsm_pre: RasterTile,
    pub dsm_post: RasterTile,
    /// 8-bit, 3-channel rendering of `dsm_post`.
    pub image_post: Raster<u8>,
    pub buildings_pre: Mask,
    pub buildings_post: Mask,
    /// Per-pixel relevance, values in {-1, +1}.
    pub relevance: Raster<i8>,
    pub footprints: Vec<Footprint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChangeLabels {
    /// Class codes from [`crate::classes`].
    pub semantic: ClassMap,
    /// Height change in meters on labeled pixels, zero elsewhere.
    pub height_change: RasterTile,
    pub raw_delta_h: RasterTile,
}

struct Placer<'a> {
    config: &'a SceneConfig,
    sides: Vec<usize>,
    /// Occupied rectangles tagged with the site they belong to.
    occupied: Vec<(usize, Rect)>,
    gap: usize,
}

impl<'a> Placer<'a> {
    fn new(config: &'a SceneConfig) -> Self {
        Self {
            config,
            sides: config.side_choices(),
            occupied: Vec::new(),
            gap: config.footprint_snap.max(1),
        }
    }

    fn snapped(&self, rng: &mut ChaCha8Rng, lo: isize, hi: isize) -> Option<usize> {
        let snap = self.config.footprint_snap as isize;
        let lo = lo.max(0);
        let first = (lo + snap - 1) / snap;
        let last = hi.div_euclid(snap);
        if hi < 0 || first > last {
            return None;
        }
        Some((rng.gen_range(first..=last) * snap) as usize)
    }

    fn free(&self, site: usize, rect: &Rect) -> bool {
        self.occupied
            .iter()
            .all(|(s, r)| *s == site || !r.near(rect, self.gap))
    }

    fn sample_rect(&self, rng: &mut ChaCha8Rng) -> Option<Rect> {
        let width = *self.sides.choose(rng)?;
        let height = *self.sides.choose(rng)?;
        let x = self.snapped(rng, 0, self.config.width as isize - width as isize)?;
        let y = self.snapped(rng, 0, self.config.height as isize - height as isize)?;
        Some(Rect { x, y, width, height })
    }

    fn place(&mut self, rng: &mut ChaCha8Rng, site: usize) -> Result<Rect> {
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            if let Some(rect) = self.sample_rect(rng) {
                if self.free(site, &rect) {
                    self.occupied.push((site, rect));
                    return Ok(rect);
                }
            }
        }
        Err(Error::Placement(format!(
            "no free position for footprint {site} after {MAX_PLACEMENT_ATTEMPTS} attempts"
        )))
    }

    /// Places a footprint that overlaps `old` and stays clear of other sites.
    fn place_overlapping(&mut self, rng: &mut ChaCha8Rng, site: usize, old: Rect) -> Result<Rect> {
        let snap = self.config.footprint_snap as isize;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let (Some(&width), Some(&height)) = (self.sides.choose(rng), self.sides.choose(rng)) else {
                break;
            };
            let (w, h) = (width as isize, height as isize);
            let x_lo = old.x as isize - w + snap;
            let x_hi = (old.x + old.width) as isize - snap;
            let y_lo = old.y as isize - h + snap;
            let y_hi = (old.y + old.height) as isize - snap;
            let x_max = self.config.width as isize - w;
            let y_max = self.config.height as isize - h;
            let (Some(x), Some(y)) = (
                self.snapped(rng, x_lo, x_hi.min(x_max)),
                self.snapped(rng, y_lo, y_hi.min(y_max)),
            ) else {
                continue;
            };
            let rect = Rect { x, y, width, height };
            if rect.intersects(&old) && self.free(site, &rect) {
                self.occupied.push((site, rect));
                return Ok(rect);
            }
        }
        Err(Error::Placement(format!(
            "no overlapping replacement for rebuilt site {site}"
        )))
    }
}

fn sample_height(rng: &mut ChaCha8Rng, (lo, hi): (f32, f32)) -> f32 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Replacement height differing from `old` by at least `min_delta`.
fn sample_rebuilt_height(rng: &mut ChaCha8Rng, old: f32, (lo, hi): (f32, f32), min_delta: f32) -> f32 {
    let can_rise = old + min_delta <= hi;
    let can_fall = old - min_delta >= lo;
    match (can_rise, can_fall) {
        (true, true) if rng.gen_bool(0.5) => rng.gen_range(old + min_delta..=hi),
        (true, _) => rng.gen_range(old + min_delta..=hi),
        (false, true) => rng.gen_range(lo..=old - min_delta),
        (false, false) => old + min_delta,
    }
}

fn noise_field(rng: &mut ChaCha8Rng, height: usize, width: usize, sigma: f32) -> RasterTile {
    if sigma == 0.0 {
        return Raster::filled(1, height, width, 0.0);
    }
    let normal = Normal::new(0.0f32, sigma).expect("finite sigma");
    let limit = NOISE_TRUNCATION_SIGMAS * sigma;
    Raster::from_fn(1, height, width, |_, _, _| loop {
        let v = normal.sample(rng);
        if v.abs() < limit {
            break v;
        }
    })
}

/// Builds a scene from `config`; identical configs give bit-identical scenes.
pub fn generate_scene(config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut placer = Placer::new(config);
    let mut footprints = Vec::new();
    let min_delta = 2.0 * NOISE_THRESHOLD_SIGMAS * config.noise_sigma + 1.0;
    let mut site = 0;

    for _ in 0..config.num_rebuilt {
        let old = placer.place(&mut rng, site)?;
        let new = placer.place_overlapping(&mut rng, site, old)?;
        let h_old = sample_height(&mut rng, config.height_range);
        let h_new = sample_rebuilt_height(&mut rng, h_old, config.height_range, min_delta);
        footprints.push(Footprint { rect: old, kind: FootprintKind::RebuiltOld, height_m: h_old, occluded: false });
        footprints.push(Footprint { rect: new, kind: FootprintKind::RebuiltNew, height_m: h_new, occluded: false });
        site += 1;
    }
    for (count, kind) in [
        (config.num_demolished, FootprintKind::Demolished),
        (config.num_new, FootprintKind::New),
        (config.num_buildings_pre, FootprintKind::Static),
    ] {
        for _ in 0..count {
            let rect = placer.place(&mut rng, site)?;
            let height_m = sample_height(&mut rng, config.height_range);
            footprints.push(Footprint { rect, kind, height_m, occluded: false });
            site += 1;
        }
    }

    // Occlusion only touches pure new/demolished sites: a flipped relevance on
    // a rebuilt overlap would label a height loss as newly built.
    let mut candidates: Vec<usize> = footprints
        .iter()
        .enumerate()
        .filter(|(_, f)| matches!(f.kind, FootprintKind::New | FootprintKind::Demolished))
        .map(|(i, _)| i)
        .collect();
    candidates.shuffle(&mut rng);
    let flips = (config.occlusion_rate * candidates.len() as f64).round() as usize;
    for &i in candidates.iter().take(flips) {
        footprints[i].occluded = true;
    }

    let (h, w) = (config.height, config.width);
    let mut dsm_pre = noise_field(&mut rng, h, w, config.noise_sigma);
    let mut dsm_post = noise_field(&mut rng, h, w, config.noise_sigma);
    let mut buildings_pre = Raster::filled(1, h, w, false);
    let mut buildings_post = Raster::filled(1, h, w, false);
    let mut relevance = Raster::filled(1, h, w, 1i8);
    for f in &footprints {
        for (y, x) in f.rect.pixels() {
            if f.in_pre() {
                buildings_pre.set(0, y, x, true);
                let v = dsm_pre.get(0, y, x) + f.height_m;
                dsm_pre.set(0, y, x, v);
            }
            if f.in_post() {
                buildings_post.set(0, y, x, true);
                let v = dsm_post.get(0, y, x) + f.height_m;
                dsm_post.set(0, y, x, v);
            }
            if f.occluded {
                relevance.set(0, y, x, -1);
            }
        }
    }

    let image_post = render_image(&mut rng, &dsm_post, &footprints, config.pixel_size_m);
    Ok(Scene {
        dsm_pre,
        dsm_post,
        image_post,
        buildings_pre,
        buildings_post,
        relevance,
        footprints,
    })
}

fn hillshade(dsm: &RasterTile, cell: f32) -> Raster<f32> {
    let (h, w) = (dsm.height() as isize, dsm.width() as isize);
    let at = |y: isize, x: isize| dsm.get(0, y.clamp(0, h - 1) as usize, x.clamp(0, w - 1) as usize);
    let zenith = (90.0 - SUN_ALTITUDE_DEG).to_radians();
    let azimuth = (360.0 - SUN_AZIMUTH_DEG + 90.0).to_radians();
    Raster::from_fn(1, h as usize, w as usize, |_, y, x| {
        let (y, x) = (y as isize, x as isize);
        let (a, b, c) = (at(y - 1, x - 1), at(y - 1, x), at(y - 1, x + 1));
        let (d, f) = (at(y, x - 1), at(y, x + 1));
        let (g, hh, i) = (at(y + 1, x - 1), at(y + 1, x), at(y + 1, x + 1));
        let dzdx = ((c + 2.0 * f + i) - (a + 2.0 * d + g)) / (8.0 * cell);
        let dzdy = ((g + 2.0 * hh + i) - (a + 2.0 * b + c)) / (8.0 * cell);
        let slope = (dzdx * dzdx + dzdy * dzdy).sqrt().atan();
        let aspect = dzdy.atan2(-dzdx);
        let shade = zenith.cos() * slope.cos() + zenith.sin() * slope.sin() * (azimuth - aspect).cos();
        shade.max(0.0) / zenith.cos()
    })
}

fn cast_shadows(dsm: &RasterTile, cell: f32) -> Mask {
    let (h, w) = (dsm.height(), dsm.width());
    let az = SUN_AZIMUTH_DEG.to_radians();
    let (dx, dy) = (az.sin(), -az.cos());
    let rise = SUN_ALTITUDE_DEG.to_radians().tan() * cell;
    let top = dsm.as_slice().iter().copied().fold(f32::MIN, f32::max);
    Raster::from_fn(1, h, w, |_, y, x| {
        let base = dsm.get(0, y, x);
        let mut k = 1.0f32;
        loop {
            let sx = (x as f32 + k * dx).round();
            let sy = (y as f32 + k * dy).round();
            if sx < 0.0 || sy < 0.0 || sx >= w as f32 || sy >= h as f32 || base + k * rise > top {
                return false;
            }
            if dsm.get(0, sy as usize, sx as usize) - base > k * rise {
                return true;
            }
            k += 1.0;
        }
    })
}

fn render_image(rng: &mut ChaCha8Rng, dsm: &RasterTile, footprints: &[Footprint], cell: f32) -> Raster<u8> {
    let (h, w) = (dsm.height(), dsm.width());
    let mut albedo = Raster::from_fn(3, h, w, |c, _, _| GROUND_ALBEDO[c]);
    for f in footprints.iter().filter(|f| f.in_post()) {
        let tint: [f32; 3] = [rng.gen_range(0.3..0.95), rng.gen_range(0.3..0.95), rng.gen_range(0.3..0.95)];
        for (y, x) in f.rect.pixels() {
            for (c, &t) in tint.iter().enumerate() {
                albedo.set(c, y, x, t);
            }
        }
    }
    let shade = hillshade(dsm, cell);
    let shadow = cast_shadows(dsm, cell);
    let texture = Normal::new(0.0f32, TEXTURE_SIGMA).expect("finite sigma");
    Raster::from_fn(3, h, w, |c, y, x| {
        let lit = if shadow.get(0, y, x) { SHADOW_FACTOR } else { 1.0 };
        let v = albedo.get(c, y, x) * shade.get(0, y, x) * lit + texture.sample(rng);
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    })
}

/// Per-pixel `post - pre` in meters.
pub fn compute_height_change(dsm_pre: &RasterTile, dsm_post: &RasterTile) -> Result<RasterTile> {
    dsm_pre.ensure_same_dims(dsm_post)?;
    let data = dsm_post
        .as_slice()
        .iter()
        .zip(dsm_pre.as_slice())
        .map(|(post, pre)| post - pre)
        .collect();
    Raster::from_vec(dsm_pre.channels(), dsm_pre.height(), dsm_pre.width(), data)
}

/// Applies the relevance-weighted change rule to every pixel.
///
/// A pixel is demolished when `ΔH·M < 0` on a pre-period building, newly
/// built when `ΔH·M > 0` on a post-period building, and background otherwise.
/// `|ΔH| < noise_threshold` counts as `ΔH = 0`.
pub fn generate_change_map(
    delta_h: &RasterTile,
    relevance: &Raster<i8>,
    buildings_pre: &Mask,
    buildings_post: &Mask,
    noise_threshold: f32,
) -> Result<ChangeLabels> {
    delta_h.ensure_same_dims(relevance)?;
    delta_h.ensure_same_dims(buildings_pre)?;
    delta_h.ensure_same_dims(buildings_post)?;
    if let Some(v) = relevance.as_slice().iter().find(|&&m| m != 1 && m != -1) {
        return Err(Error::InvalidValue(format!("relevance value {v} outside {{-1, +1}}")));
    }

    let n = delta_h.as_slice().len();
    let mut semantic = Vec::with_capacity(n);
    let mut height_change = Vec::with_capacity(n);
    for i in 0..n {
        let raw = delta_h.as_slice()[i];
        let dh = if raw.abs() < noise_threshold { 0.0 } else { raw };
        let signed = dh * f32::from(relevance.as_slice()[i]);
        let class = if signed < 0.0 && buildings_pre.as_slice()[i] {
            DEMOLISHED
        } else if signed > 0.0 && buildings_post.as_slice()[i] {
            NEWLY_BUILT
        } else {
            BACKGROUND
        };
        semantic.push(class);
        height_change.push(if class == BACKGROUND { 0.0 } else { raw });
    }
    let (c, h, w) = delta_h.dims();
    Ok(ChangeLabels {
        semantic: Raster::from_vec(c, h, w, semantic)?,
        height_change: Raster::from_vec(c, h, w, height_change)?,
        raw_delta_h: delta_h.clone(),
    })
}

/// Runs the annotation procedure on a generated scene.
pub fn annotate_scene(scene: &Scene, noise_threshold: f32) -> Result<ChangeLabels> {
    let delta_h = compute_height_change(&scene.dsm_pre, &scene.dsm_post)?;
    generate_change_map(
        &delta_h,
        &scene.relevance,
        &scene.buildings_pre,
        &scene.buildings_post,
        noise_threshold,
    )
}

/// Cuts a labeled scene into non-overlapping `tile_size` squares.
///
/// Tiles are produced in raster-scan order with ids `r{row}c{col}`. With
/// `keep_empty == false`, tiles without any changed pixel are dropped.
pub fn split_tiles(
    scene: &Scene,
    labels: &ChangeLabels,
    tile_size: usize,
    keep_empty: bool,
) -> Result<Vec<SamplePair>> {
    let (h, w) = (scene.dsm_pre.height(), scene.dsm_pre.width());
    if tile_size == 0 || h % tile_size != 0 || w % tile_size != 0 {
        return Err(Error::InvalidConfig(format!(
            "tile size {tile_size} does not divide scene {h}x{w}"
        )));
    }
    scene.dsm_pre.ensure_same_grid(&labels.semantic)?;
    scene.dsm_pre.ensure_same_grid(&scene.image_post)?;

    let mut tiles = Vec::new();
    for row in 0..h / tile_size {
        for col in 0..w / tile_size {
            let (y0, x0) = (row * tile_size, col * tile_size);
            let crop = |r: &RasterTile| r.crop(y0, x0, tile_size, tile_size);
            let semantic = labels.semantic.crop(y0, x0, tile_size, tile_size)?;
            if !keep_empty && semantic.as_slice().iter().all(|&c| c == BACKGROUND) {
                continue;
            }
            tiles.push(SamplePair::new(
                format!("r{row:02}c{col:02}"),
                crop(&scene.dsm_pre)?,
                scene.image_post.crop(y0, x0, tile_size, tile_size)?,
                semantic,
                crop(&labels.height_change)?,
                scene.relevance.crop(y0, x0, tile_size, tile_size)?,
            )?);
        }
    }
    Ok(tiles)
}

/// Symmetric quantile interval of training height changes covering `coverage`
/// of all pixels, zeros included.
pub fn compute_normalization_stats(tiles: &[SamplePair], coverage: f64) -> Result<HeightScale> {
    if tiles.is_empty() {
        return Err(Error::EmptyInput("normalization statistics need at least one tile"));
    }
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::InvalidValue(format!("coverage {coverage} outside (0, 1]")));
    }
    let mut values: Vec<f32> = tiles
        .iter()
        .flat_map(|t| t.gt_height.as_slice().iter().copied())
        .collect();
    let tail = (1.0 - coverage) / 2.0;
    let lo = quantile_in_place(&mut values, tail);
    let hi = quantile_in_place(&mut values, 1.0 - tail);
    HeightScale::new(lo as f64, hi as f64)
}

/// Nearest-rank quantile at index `round(q·(n-1))`.
fn quantile_in_place(values: &mut [f32], q: f64) -> f32 {
    let idx = (q * (values.len() - 1) as f64).round() as usize;
    *values.select_nth_unstable_by(idx, f32::total_cmp).1
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CumulativeBin {
    /// Upper edge of the bin in meters of |height change|.
    pub upper_m: f64,
    pub cumulative_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub tiles: usize,
    pub tiles_with_change: usize,
    pub total_pixels: u64,
    pub demolished_objects: usize,
    pub newly_built_objects: usize,
    pub demolished_pixels: u64,
    pub newly_built_pixels: u64,
    /// Changed pixels as a percentage of all pixels.
    pub changed_percent: f64,
    pub demolished_height_cdf: Vec<CumulativeBin>,
    pub newly_built_height_cdf: Vec<CumulativeBin>,
}

const CDF_BIN_M: f64 = 1.0;

fn height_cdf(mut magnitudes: Vec<f64>) -> Vec<CumulativeBin> {
    if magnitudes.is_empty() {
        return Vec::new();
    }
    magnitudes.sort_by(f64::total_cmp);
    let n = magnitudes.len() as f64;
    let top = magnitudes[magnitudes.len() - 1];
    let bins = ((top / CDF_BIN_M).ceil() as usize).max(1);
    let mut out = Vec::with_capacity(bins);
    let mut seen = 0usize;
    for b in 1..=bins {
        let upper = b as f64 * CDF_BIN_M;
        while seen < magnitudes.len() && magnitudes[seen] <= upper {
            seen += 1;
        }
        out.push(CumulativeBin { upper_m: upper, cumulative_fraction: seen as f64 / n });
    }
    out
}

/// Object counts, pixel proportions and cumulative height tables per class.
pub fn dataset_stats(tiles: &[SamplePair]) -> DatasetStats {
    let mut stats = DatasetStats { tiles: tiles.len(), ..Default::default() };
    let mut demolished_heights = Vec::new();
    let mut new_heights = Vec::new();
    for tile in tiles {
        stats.total_pixels += tile.gt_semantic.pixel_count() as u64;
        let mut has_change = false;
        for (&class, &dh) in tile.gt_semantic.as_slice().iter().zip(tile.gt_height.as_slice()) {
            match class {
                DEMOLISHED => {
                    stats.demolished_pixels += 1;
                    demolished_heights.push(f64::from(dh.abs()));
                    has_change = true;
                }
                NEWLY_BUILT => {
                    stats.newly_built_pixels += 1;
                    new_heights.push(f64::from(dh.abs()));
                    has_change = true;
                }
                _ => {}
            }
        }
        if has_change {
            stats.tiles_with_change += 1;
            stats.demolished_objects += label_components(&tile.gt_semantic.map(|c| c == DEMOLISHED)).1;
            stats.newly_built_objects += label_components(&tile.gt_semantic.map(|c| c == NEWLY_BUILT)).1;
        }
    }
    if stats.total_pixels > 0 {
        stats.changed_percent = 100.0 * (stats.demolished_pixels + stats.newly_built_pixels) as f64
            / stats.total_pixels as f64;
    }
    stats.demolished_height_cdf = height_cdf(demolished_heights);
    stats.newly_built_height_cdf = height_cdf(new_heights);
    stats
}
