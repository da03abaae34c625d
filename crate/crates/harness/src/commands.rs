//! The CLI operations. Every command writes only below its output directory
//! and produces identical files when re-run with the same configuration.

use std::fs;
use std::path::{Path, PathBuf};

use mmcd_core::datapipe::{HeightScale, SamplePair};
use mmcd_core::dataset::{read_json, read_split, read_stats, split_counts, write_json, write_split, SplitStats, SPLITS};
use mmcd_core::metrics::{change_mask, height_histogram, ConfusionMatrix, HeightAccumulator, HistogramTable, MetricReport};
use mmcd_core::synthcity::{annotate_scene, dataset_stats, generate_scene, split_tiles, DatasetStats, SceneConfig};
use mmcd_model::infer::{Prediction, Predictor};
use mmcd_model::train::{read_log, train, StepRecord, TrainSummary, LOG_FILE};
use mmcd_model::TaskGates;
use serde::{Deserialize, Serialize};

use crate::config::{check_temperatures, RunConfig};
use crate::error::{HarnessError, Result};

pub const DATASET_MANIFEST: &str = "dataset.json";
pub const REPORT_FILE: &str = "report.json";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_TEXT: &str = "ablation.md";
pub const SWEEP_INDEX: &str = "index.json";
pub const MISSING_CELL: &str = "−";

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| HarnessError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

/// Summary written next to the splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub scene: SceneConfig,
    pub num_scenes: usize,
    pub tile_size: usize,
    /// Scenes per split in train, val, test order.
    pub scenes: [usize; 3],
    pub tiles: [usize; 3],
    pub stats: DatasetStats,
}

/// Generates `num_scenes` scenes, tiles them and assigns whole scenes to
/// splits so no scene contributes tiles to two splits.
pub fn cmd_generate(config: &RunConfig, out: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    if out.exists() {
        let occupied = fs::read_dir(out).map_err(|e| HarnessError::io(out, e))?.next().is_some();
        if occupied && !out.join(DATASET_MANIFEST).exists() {
            return Err(HarnessError::Config(format!(
                "{} exists and is not a dataset directory",
                out.display()
            )));
        }
        for split in SPLITS {
            let dir = out.join(split);
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
            }
        }
    }
    create_dir(out)?;
    let (n_train, n_val, n_test) = split_counts(config.num_scenes, config.train_fraction, config.val_fraction)?;
    let tau = config.scene.noise_threshold();
    let mut splits: [Vec<SamplePair>; 3] = Default::default();
    for i in 0..config.num_scenes {
        let scene_config = SceneConfig { seed: config.scene.seed.wrapping_add(i as u64), ..config.scene.clone() };
        let scene = generate_scene(&scene_config)?;
        let labels = annotate_scene(&scene, tau)?;
        let slot = if i < n_train {
            0
        } else if i < n_train + n_val {
            1
        } else {
            2
        };
        for mut tile in split_tiles(&scene, &labels, config.tile_size, config.keep_empty_tiles)? {
            tile.id = format!("s{i:03}_{}", tile.id);
            splits[slot].push(tile);
        }
    }
    for (split, tiles) in SPLITS.iter().zip(&splits) {
        write_split(out, split, tiles, config.coverage)?;
    }
    let all: Vec<SamplePair> = splits.iter().flatten().cloned().collect();
    let manifest = DatasetManifest {
        scene: config.scene.clone(),
        num_scenes: config.num_scenes,
        tile_size: config.tile_size,
        scenes: [n_train, n_val, n_test],
        tiles: [splits[0].len(), splits[1].len(), splits[2].len()],
        stats: dataset_stats(&all),
    };
    write_json(&out.join(DATASET_MANIFEST), &manifest)?;
    log::info!("wrote {} tiles to {}", all.len(), out.display());
    Ok(manifest)
}

pub fn load_train_split(data: &Path) -> Result<(Vec<SamplePair>, SplitStats)> {
    let tiles = read_split(data, "train")?;
    if tiles.is_empty() {
        return Err(HarnessError::Config(format!("{} has an empty training split", data.display())));
    }
    let stats = read_stats(data, "train")?;
    Ok((tiles, stats))
}

pub fn cmd_train(config: &RunConfig, data: &Path, out: &Path) -> Result<TrainSummary> {
    config.validate()?;
    let (tiles, stats) = load_train_split(data)?;
    create_dir(out)?;
    write_json(&out.join("run_config.json"), config)?;
    Ok(train(&config.train, &tiles, &stats, out)?)
}

/// Training-split height scale used to bring predictions back to meters.
pub fn training_scale(data: &Path) -> Result<HeightScale> {
    let path = data.join("train").join(mmcd_core::dataset::STATS_FILE);
    if !path.exists() {
        return Err(HarnessError::Config(format!("height scale missing: {} not found", path.display())));
    }
    Ok(read_stats(data, "train")?.height_scale)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub split: String,
    pub tiles: usize,
    pub gates: TaskGates,
    pub report: MetricReport,
    pub histogram: Option<HistogramTable>,
}

/// Scores predictions against their tiles; heights are compared in meters.
pub fn score(
    tiles: &[SamplePair],
    predictions: &[Prediction],
    scale: &HeightScale,
    bins: usize,
    mparams: Option<f64>,
) -> Result<(MetricReport, Option<HistogramTable>)> {
    let mut confusion = ConfusionMatrix::new();
    let mut heights = HeightAccumulator::new();
    let (mut has_sem, mut has_height) = (false, false);
    let (mut changed_pred, mut changed_gt) = (Vec::new(), Vec::new());
    for (tile, pred) in tiles.iter().zip(predictions) {
        if tile.id != pred.id {
            return Err(HarnessError::Config(format!("prediction {} does not match tile {}", pred.id, tile.id)));
        }
        if let Some(sem) = &pred.semantic {
            confusion.accumulate(sem.as_slice(), tile.gt_semantic.as_slice())?;
            has_sem = true;
        }
        if let Some(h) = &pred.height_norm {
            let est = h.as_slice().iter().map(|&v| scale.denormalize(f64::from(v))).collect::<mmcd_core::Result<Vec<f64>>>()?;
            let reference: Vec<f64> = tile.gt_height.as_slice().iter().map(|&v| f64::from(v)).collect();
            let mask = change_mask(tile.gt_semantic.as_slice());
            heights.accumulate(&est, &reference, &mask)?;
            for i in 0..mask.len() {
                if mask[i] {
                    changed_pred.push(est[i]);
                    changed_gt.push(reference[i]);
                }
            }
            has_height = true;
        }
    }
    let semantic = if has_sem { Some(confusion.scores()?) } else { None };
    let height = if has_height { Some(heights.scores()?) } else { None };
    let histogram = if has_height && !changed_gt.is_empty() {
        Some(height_histogram(&changed_pred, &changed_gt, bins)?)
    } else {
        None
    };
    Ok((MetricReport::new(semantic, height, mparams), histogram))
}

pub fn cmd_eval(config: &RunConfig, checkpoint: &Path, data: &Path, split: &str, out: &Path) -> Result<EvalOutput> {
    let scale = training_scale(data)?;
    let predictor = Predictor::load(checkpoint)?;
    let tiles = read_split(data, split)?;
    if tiles.is_empty() {
        return Err(HarnessError::Config(format!("split {split} of {} is empty", data.display())));
    }
    let predictions = predictor.predict(&tiles, config.eval_batch_size)?;
    let mparams = predictor.params.num_params() as f64 / 1e6;
    let (report, histogram) = score(&tiles, &predictions, &scale, config.histogram_bins, Some(mparams))?;
    let output = EvalOutput {
        split: split.to_string(),
        tiles: tiles.len(),
        gates: predictor.model.config().gates,
        report,
        histogram,
    };
    create_dir(out)?;
    write_json(&out.join(REPORT_FILE), &output)?;
    match &output.histogram {
        Some(h) => write_text(&out.join(HISTOGRAM_FILE), &h.to_csv())?,
        None => {
            let stale = out.join(HISTOGRAM_FILE);
            if stale.exists() {
                fs::remove_file(&stale).map_err(|e| HarnessError::io(&stale, e))?;
            }
        }
    }
    Ok(output)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| MISSING_CELL.to_string(), |x| format!("{x:.4}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub gates: TaskGates,
    pub report: MetricReport,
}

pub const TABLE_COLUMNS: [&str; 9] = ["IoU_D", "IoU_N", "mIoU", "F1", "RMSE", "MAE", "cRMSE", "cRel", "cZNCC"];

pub fn table_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("row,{}\n", TABLE_COLUMNS.join(","));
    for r in rows {
        let cells: Vec<String> = r.report.columns().iter().map(|(_, v)| cell(*v)).collect();
        out.push_str(&format!("{},{}\n", r.label, cells.join(",")));
    }
    out
}

pub fn table_text(rows: &[AblationRow]) -> String {
    let mut out = format!("| tasks | {} |\n", TABLE_COLUMNS.join(" | "));
    out.push_str(&format!("|---|{}\n", "---|".repeat(TABLE_COLUMNS.len())));
    for r in rows {
        let cells: Vec<String> = r.report.columns().iter().map(|(_, v)| cell(*v)).collect();
        out.push_str(&format!("| {} | {} |\n", r.label, cells.join(" | ")));
    }
    out
}

fn write_table(out: &Path, rows: &[AblationRow]) -> Result<()> {
    write_json(&out.join(ABLATION_JSON), &rows)?;
    write_text(&out.join(ABLATION_CSV), &table_csv(rows))?;
    write_text(&out.join(ABLATION_TEXT), &table_text(rows))
}

/// Trains and evaluates the five task combinations. The table is rewritten
/// after every row so a failure leaves the completed rows on disk.
pub fn cmd_ablate(config: &RunConfig, data: &Path, out: &Path) -> Result<Vec<AblationRow>> {
    config.validate()?;
    create_dir(out)?;
    let mut rows = Vec::new();
    for gates in TaskGates::ABLATION_ROWS {
        let label = gates.label();
        let mut run = config.clone();
        run.train.model.gates = gates;
        let run_dir = out.join(&label);
        log::info!("ablation row {label}");
        cmd_train(&run, data, &run_dir)?;
        let eval = cmd_eval(&run, &run_dir, data, &run.eval_split, &run_dir)?;
        rows.push(AblationRow { label, gates, report: eval.report });
        write_table(out, &rows)?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub temperature: f64,
    pub run_dir: PathBuf,
    pub histogram: Option<PathBuf>,
    pub report: MetricReport,
}

pub fn temperature_label(t: f64) -> String {
    format!("t{t}")
}

/// Trains and evaluates one model per temperature and indexes the height histograms.
pub fn cmd_sweep_t(config: &RunConfig, temperatures: &[f64], data: &Path, out: &Path) -> Result<Vec<SweepEntry>> {
    check_temperatures(temperatures)?;
    config.validate()?;
    create_dir(out)?;
    let mut entries = Vec::new();
    for &t in temperatures {
        let mut run = config.clone();
        run.train.model.decoder.temperature = t;
        let name = temperature_label(t);
        let run_dir = out.join(&name);
        cmd_train(&run, data, &run_dir)?;
        let eval = cmd_eval(&run, &run_dir, data, &run.eval_split, &run_dir)?;
        let histogram = match &eval.histogram {
            Some(h) => {
                let file = PathBuf::from(format!("histogram_{name}.csv"));
                write_text(&out.join(&file), &h.to_csv())?;
                Some(file)
            }
            None => None,
        };
        entries.push(SweepEntry { temperature: t, run_dir: PathBuf::from(&name), histogram, report: eval.report });
        write_json(&out.join(SWEEP_INDEX), &entries)?;
    }
    Ok(entries)
}

/// Collects whatever results live under `input` into one markdown summary.
pub fn cmd_report(input: &Path, out: &Path) -> Result<String> {
    let mut text = String::new();
    if input.join(DATASET_MANIFEST).exists() {
        let m: DatasetManifest = read_json(&input.join(DATASET_MANIFEST))?;
        let s = &m.stats;
        text.push_str("## Dataset\n\n");
        text.push_str(&format!(
            "- scenes: {} (train/val/test {}/{}/{})\n- tiles: {} ({} with change)\n- changed pixels: {:.3}%\n- demolished objects: {} ({} px)\n- newly built objects: {} ({} px)\n\n",
            m.num_scenes, m.scenes[0], m.scenes[1], m.scenes[2], s.tiles, s.tiles_with_change, s.changed_percent,
            s.demolished_objects, s.demolished_pixels, s.newly_built_objects, s.newly_built_pixels
        ));
    }
    if input.join(LOG_FILE).exists() {
        let log: Vec<StepRecord> = read_log(&input.join(LOG_FILE))?;
        if let (Some(first), Some(last)) = (log.first(), log.last()) {
            text.push_str(&format!(
                "## Training\n\n- steps: {}\n- loss: {:.5} → {:.5}\n\n",
                log.len(),
                first.loss_total,
                last.loss_total
            ));
        }
    }
    if input.join(REPORT_FILE).exists() {
        let e: EvalOutput = read_json(&input.join(REPORT_FILE))?;
        let row = AblationRow { label: e.gates.label(), gates: e.gates, report: e.report };
        text.push_str(&format!("## Evaluation ({}, {} tiles)\n\n{}\n", e.split, e.tiles, table_text(&[row])));
    }
    if input.join(ABLATION_JSON).exists() {
        let rows: Vec<AblationRow> = read_json(&input.join(ABLATION_JSON))?;
        text.push_str(&format!("## Task ablation\n\n{}\n", table_text(&rows)));
    }
    if input.join(SWEEP_INDEX).exists() {
        let entries: Vec<SweepEntry> = read_json(&input.join(SWEEP_INDEX))?;
        let rows: Vec<AblationRow> = entries
            .iter()
            .map(|e| AblationRow { label: temperature_label(e.temperature), gates: TaskGates::ALL, report: e.report.clone() })
            .collect();
        text.push_str(&format!("## Temperature sweep\n\n{}\n", table_text(&rows)));
    }
    if text.is_empty() {
        return Err(HarnessError::Config(format!("no results found under {}", input.display())));
    }
    create_dir(out)?;
    write_text(&out.join("report.md"), &text)?;
    Ok(text)
}
