//! Optimization driver: AdamW with cosine decay, JSON-lines step log and
//! safetensors checkpoints.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use mmcd_core::datapipe::{make_batches, Batch, SamplePair};
use mmcd_core::dataset::{write_json, SplitStats};
use serde::{Deserialize, Serialize};

use crate::decoder::{Model, ModelConfig, TaskGates};
use crate::error::{ModelError, Result};
use crate::objective::{batch_inputs, compute_losses, total_loss, ClassWeights, LossWeights, Targets};
use crate::params::ParamStore;

pub const CHECKPOINT_FILE: &str = "model.safetensors";
pub const MODEL_CONFIG_FILE: &str = "model_config.json";
pub const NORMALIZATION_FILE: &str = "normalization.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const OBJECTIVE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Floor of the cosine schedule.
    pub min_learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, min_learning_rate: 0.0, weight_decay: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimizerConfig {
    /// Cosine decay from the base rate at step 0 to the floor at `total`.
    pub fn learning_rate_at(&self, step: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.learning_rate;
        }
        let progress = step as f64 / (total - 1) as f64;
        self.min_learning_rate
            + 0.5 * (self.learning_rate - self.min_learning_rate) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss_weights: LossWeights,
    pub class_weights: ClassWeights,
    /// Weight μ of the explicit consistency term; 0 keeps it a diagnostic.
    pub consistency_weight: f64,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    /// Stops early once this many optimizer steps have run.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    /// Micro-batches whose gradients are averaged per optimizer step.
    pub accumulation_steps: usize,
    pub shuffle: bool,
    pub seed: u64,
    /// Epoch interval for intermediate checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss_weights: LossWeights::default(),
            class_weights: ClassWeights::default(),
            consistency_weight: 0.0,
            optimizer: OptimizerConfig::default(),
            epochs: 50,
            max_steps: None,
            batch_size: 4,
            accumulation_steps: 2,
            shuffle: true,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Heads that are both enabled and carry a positive loss weight.
    pub fn active_gates(&self) -> TaskGates {
        let g = self.model.gates;
        let lw = &self.loss_weights;
        TaskGates {
            semantic: g.semantic && lw.lambda3 > 0.0,
            height: g.height && lw.lambda2 > 0.0,
            pseudo: g.pseudo && lw.lambda1 > 0.0,
        }
    }

    /// Loss weights with disabled tasks forced to zero.
    pub fn effective_loss_weights(&self) -> LossWeights {
        let g = self.active_gates();
        LossWeights {
            lambda1: if g.pseudo { self.loss_weights.lambda1 } else { 0.0 },
            lambda2: if g.height { self.loss_weights.lambda2 } else { 0.0 },
            lambda3: if g.semantic { self.loss_weights.lambda3 } else { 0.0 },
        }
    }

    /// Model configuration with inactive heads removed.
    pub fn effective_model(&self) -> ModelConfig {
        ModelConfig { gates: self.active_gates(), ..self.model.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights.validate()?;
        self.class_weights.validate()?;
        self.effective_model().validate()?;
        self.effective_loss_weights().validate()?;
        if self.batch_size == 0 || self.accumulation_steps == 0 {
            return Err(ModelError::Config("batch_size and accumulation_steps must be positive".into()));
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return Err(ModelError::Config("epochs must be positive".into()));
        }
        if !(self.consistency_weight >= 0.0) {
            return Err(ModelError::Config("consistency_weight must be non-negative".into()));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0) || o.min_learning_rate < 0.0 || o.min_learning_rate > o.learning_rate {
            return Err(ModelError::Config("learning rates must satisfy 0 ≤ min ≤ base, base > 0".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, num_tiles: usize) -> usize {
        num_tiles.div_ceil(self.batch_size).div_ceil(self.accumulation_steps)
    }

    pub fn total_steps(&self, num_tiles: usize) -> usize {
        let by_epochs = self.epochs * self.steps_per_epoch(num_tiles);
        match self.max_steps {
            Some(m) if self.epochs == 0 => m,
            Some(m) => m.min(by_epochs),
            None => by_epochs,
        }
    }
}

/// One JSON-lines record per optimizer step. Inactive components are omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_pseudo: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_height: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_semantic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub consistency: Option<f64>,
    /// |optimized total − weighted sum of the logged components|.
    pub objective_gap: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: usize,
    pub records: Vec<StepRecord>,
    pub out_dir: PathBuf,
}

/// Input normalization and height scale carried with a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub input_stats: mmcd_core::datapipe::InputStats,
    pub height_scale: mmcd_core::datapipe::HeightScale,
}

impl From<&SplitStats> for Normalization {
    fn from(s: &SplitStats) -> Self {
        Self { input_stats: s.input_stats.clone(), height_scale: s.height_scale }
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn accumulate(acc: &mut Option<GradStore>, grads: GradStore, vars: &[Var]) -> Result<()> {
    match acc {
        None => *acc = Some(grads),
        Some(a) => {
            for v in vars {
                if let Some(g) = grads.get(v.as_tensor()) {
                    let sum = match a.get(v.as_tensor()) {
                        Some(prev) => (prev + g)?,
                        None => g.clone(),
                    };
                    a.insert(v.as_tensor(), sum);
                }
            }
        }
    }
    Ok(())
}

fn scale_grads(grads: &mut GradStore, vars: &[Var], factor: f64) -> Result<()> {
    if factor == 1.0 {
        return Ok(());
    }
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            let scaled = (g * factor)?;
            grads.insert(v.as_tensor(), scaled);
        }
    }
    Ok(())
}

#[derive(Default)]
struct Running {
    n: usize,
    total: f64,
    pseudo: Option<f64>,
    height: Option<f64>,
    semantic: Option<f64>,
    consistency: Option<f64>,
}

fn add(slot: &mut Option<f64>, t: &Option<Tensor>) -> Result<()> {
    if let Some(t) = t {
        *slot = Some(slot.unwrap_or(0.0) + scalar(t)?);
    }
    Ok(())
}

fn write_snapshot(out_dir: &Path, ps: &ParamStore, step: usize, ids: &[String], message: &str) -> Result<PathBuf> {
    let dir = out_dir.join("nan_snapshot");
    fs::create_dir_all(&dir).map_err(|e| ModelError::io(&dir, e))?;
    ps.save(&dir.join(CHECKPOINT_FILE))?;
    let doc = serde_json::json!({ "step": step, "batch": ids, "error": message });
    write_json(&dir.join("snapshot.json"), &doc)?;
    Ok(dir)
}

pub fn save_checkpoint(dir: &Path, ps: &ParamStore, model: &ModelConfig, norm: &Normalization) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| ModelError::io(dir, e))?;
    ps.save(&dir.join(CHECKPOINT_FILE))?;
    write_json(&dir.join(MODEL_CONFIG_FILE), model)?;
    write_json(&dir.join(NORMALIZATION_FILE), norm)?;
    Ok(())
}

/// Trains on `tiles`, writing the step log and checkpoints under `out_dir`.
/// A non-finite loss stops training after saving a snapshot of the
/// parameters and the offending batch ids.
pub fn train(config: &TrainConfig, tiles: &[SamplePair], stats: &SplitStats, out_dir: &Path) -> Result<TrainSummary> {
    config.validate()?;
    if tiles.is_empty() {
        return Err(ModelError::Config("training split is empty".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| ModelError::io(out_dir, e))?;
    let device = Device::Cpu;
    let dtype = DType::F32;
    let model_config = config.effective_model();
    let lw = config.effective_loss_weights();
    let mu = config.consistency_weight;
    let norm = Normalization::from(stats);

    let mut ps = ParamStore::new(config.seed, dtype);
    let model = Model::new(&mut ps, &model_config)?;
    let vars = ps.vars();
    let o = &config.optimizer;
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW { lr: o.learning_rate, beta1: o.beta1, beta2: o.beta2, eps: o.eps, weight_decay: o.weight_decay },
    )?;
    log::info!("training {} parameters on {} tiles", ps.num_params(), tiles.len());

    let log_path = out_dir.join(LOG_FILE);
    let mut log_file = BufWriter::new(File::create(&log_path).map_err(|e| ModelError::io(&log_path, e))?);
    let total_steps = config.total_steps(tiles.len());
    let mut records = Vec::with_capacity(total_steps);
    let mut step = 0;
    let mut epoch = 0;
    while step < total_steps {
        let shuffle = config.shuffle.then(|| config.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64));
        let batches = make_batches(tiles.len(), config.batch_size, shuffle)?;
        for group in batches.chunks(config.accumulation_steps) {
            if step >= total_steps {
                break;
            }
            let lr = o.learning_rate_at(step, total_steps);
            let mut grads = None;
            let mut run = Running::default();
            for idx in group {
                let samples: Vec<&SamplePair> = idx.iter().map(|&i| &tiles[i]).collect();
                let batch = Batch::collate(&samples, &norm.input_stats, &norm.height_scale)?;
                let (dsm, image) = batch_inputs(&batch, dtype, &device)?;
                let targets = Targets::from_batch(&batch, dtype, &device)?;
                let outputs = model.forward(&dsm, &image)?;
                let terms = compute_losses(&outputs, &targets, &lw, &config.class_weights, mu)?;
                let total = scalar(&terms.total)?;
                if !total.is_finite() {
                    let msg = format!("loss {total} at step {step}");
                    let dir = write_snapshot(out_dir, &ps, step, &batch.ids, &msg)?;
                    return Err(ModelError::NonFinite(format!("{msg}; snapshot in {}", dir.display())));
                }
                run.n += 1;
                run.total += total;
                add(&mut run.pseudo, &terms.pseudo)?;
                add(&mut run.height, &terms.height)?;
                add(&mut run.semantic, &terms.semantic)?;
                add(&mut run.consistency, &terms.consistency)?;
                accumulate(&mut grads, terms.total.backward()?, &vars)?;
            }
            let n = run.n as f64;
            let mean = |v: Option<f64>| v.map(|x| x / n);
            let (pseudo, height, semantic, consistency) =
                (mean(run.pseudo), mean(run.height), mean(run.semantic), mean(run.consistency));
            let loss_total = run.total / n;
            let mut expected = total_loss(pseudo, height, semantic, &lw)?;
            if mu > 0.0 {
                expected += mu * consistency.unwrap_or(0.0);
            }
            let objective_gap = (loss_total - expected).abs();
            if objective_gap > OBJECTIVE_TOLERANCE * loss_total.abs().max(1.0) {
                log::warn!("step {step}: optimized loss {loss_total} differs from weighted components {expected}");
            }
            let mut grads = grads.expect("non-empty group");
            scale_grads(&mut grads, &vars, 1.0 / n)?;
            opt.set_learning_rate(lr);
            opt.step(&grads)?;

            let record = StepRecord {
                step,
                epoch,
                lr,
                loss_total,
                loss_pseudo: pseudo,
                loss_height: height,
                loss_semantic: semantic,
                consistency,
                objective_gap,
            };
            let line = serde_json::to_string(&record).expect("plain record");
            writeln!(log_file, "{line}").map_err(|e| ModelError::io(&log_path, e))?;
            log::debug!("{line}");
            records.push(record);
            step += 1;
        }
        epoch += 1;
        if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 && step < total_steps {
            ps.save(&out_dir.join(format!("checkpoint_epoch{epoch:04}.safetensors")))?;
        }
    }
    log_file.flush().map_err(|e| ModelError::io(&log_path, e))?;
    save_checkpoint(out_dir, &ps, &model_config, &norm)?;
    Ok(TrainSummary { steps: step, records, out_dir: out_dir.to_path_buf() })
}

pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| ModelError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| ModelError::Params(format!("{}: {e}", path.display()))))
        .collect()
}
