use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use mmcd_core::dataset::{read_split, SplitStats};
use mmcd_core::raster::Raster;
use mmcd_harness::commands::{cmd_eval, cmd_generate, cmd_report, cmd_train, score, DATASET_MANIFEST};
use mmcd_harness::error::{EXIT_CONFIG, EXIT_NUMERIC};
use mmcd_harness::{HarnessError, RunConfig};
use mmcd_model::backbone::BackboneConfig;
use mmcd_model::decoder::DecoderConfig;
use mmcd_model::infer::Prediction;
use mmcd_model::objective::LossWeights;
use mmcd_model::train::{read_log, LOG_FILE as LOG_FILE_NAME};
use mmcd_model::ModelError;

/// Toy scenes with a minimal network so training steps take well under a second.
fn quick_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::toy().with_seed(Some(seed));
    c.train.model.backbone = BackboneConfig {
        embed_dims: [8, 16, 32, 64],
        depths: [1, 1, 1, 1],
        num_heads: [1, 2, 4, 8],
        ..BackboneConfig::default()
    };
    c.train.model.decoder = DecoderConfig { decode_dim: 16, head_hidden: 8, ..DecoderConfig::default() };
    c
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn scenes_split_thirteen_two_five() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = quick_config(1);
    c.num_scenes = 20;
    let m = cmd_generate(&c, dir.path()).unwrap();
    assert_eq!(m.scenes, [13, 2, 5]);
    assert_eq!(m.tiles, [13, 2, 5]);
    let ids = read_split(dir.path(), "val").unwrap().into_iter().map(|t| t.id).collect::<Vec<_>>();
    assert_eq!(ids, vec!["s013_r00c00", "s014_r00c00"]);
}

#[test]
fn regeneration_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = quick_config(5);
    cmd_generate(&c, a.path()).unwrap();
    cmd_generate(&c, b.path()).unwrap();
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(ta.contains_key(DATASET_MANIFEST));
    assert_eq!(ta, tb);
    // regenerating in place replaces the previous dataset
    cmd_generate(&quick_config(6), a.path()).unwrap();
    assert_ne!(tree(a.path()), tb);
    cmd_generate(&c, a.path()).unwrap();
    assert_eq!(tree(a.path()), tb);
}

#[test]
fn refuses_to_overwrite_foreign_directories() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("notes.txt"), "keep me").unwrap();
    let err = cmd_generate(&quick_config(0), dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), EXIT_CONFIG);
    assert!(dir.path().join("notes.txt").exists());
}

#[test]
fn ground_truth_predictions_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    cmd_generate(&quick_config(2), dir.path()).unwrap();
    let tiles = read_split(dir.path(), "train").unwrap();
    let scale = SplitStats::compute(&tiles, 1.0).unwrap().height_scale;
    let predictions: Vec<Prediction> = tiles
        .iter()
        .map(|t| Prediction {
            id: t.id.clone(),
            semantic: Some(t.gt_semantic.clone()),
            height_norm: Some(t.gt_height.map(|v| scale.normalize(f64::from(v)).unwrap() as f32)),
            pseudo_scalar: None,
        })
        .collect();
    let (report, hist) = score(&tiles, &predictions, &scale, 10, None).unwrap();
    let r = &report;
    assert_eq!((r.iou_d, r.iou_n, r.miou, r.f1), (Some(100.0), Some(100.0), Some(100.0), Some(100.0)));
    assert!(r.rmse.unwrap() < 1e-4 && r.mae.unwrap() < 1e-4 && r.crmse.unwrap() < 1e-4);
    assert!((r.czncc.unwrap() - 1.0).abs() < 1e-6);
    let hist = hist.unwrap();
    assert_eq!(hist.pred, hist.gt);

    let mut shuffled = predictions.clone();
    shuffled.swap(0, 1);
    assert!(score(&tiles, &shuffled, &scale, 10, None).is_err());
    let blank = Prediction { semantic: Some(Raster::filled(1, 64, 64, 0)), height_norm: None, ..predictions[0].clone() };
    let (r, h) = score(&tiles[..1], &[blank], &scale, 10, None).unwrap();
    assert!(r.rmse.is_none() && r.czncc.is_none() && h.is_none());
}

#[test]
fn training_log_counts_steps_and_gates_columns() {
    let data = tempfile::tempdir().unwrap();
    let mut c = quick_config(3);
    cmd_generate(&c, data.path()).unwrap();
    let train_tiles = read_split(data.path(), "train").unwrap().len();
    assert_eq!(train_tiles, 5);

    c.train.epochs = 2;
    c.train.batch_size = 2;
    c.train.accumulation_steps = 1;
    let run = tempfile::tempdir().unwrap();
    let s = cmd_train(&c, data.path(), run.path()).unwrap();
    // five tiles in batches of two: three batches per epoch
    assert_eq!(s.steps, 6);
    let log = read_log(&run.path().join(LOG_FILE_NAME)).unwrap();
    assert_eq!(log.len(), 6);
    assert_eq!(log.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 0, 0, 1, 1, 1]);
    for r in &log {
        assert!(r.loss_pseudo.is_some() && r.loss_height.is_some() && r.loss_semantic.is_some());
        assert!(r.consistency.is_some());
        assert!(r.objective_gap <= 1e-6 * r.loss_total.abs().max(1.0));
    }
    assert!(log[0].lr > log[5].lr);

    c.train.accumulation_steps = 2;
    c.train.loss_weights = LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 1.0 };
    let run = tempfile::tempdir().unwrap();
    let s = cmd_train(&c, data.path(), run.path()).unwrap();
    assert_eq!(s.steps, 4);
    let text = fs::read_to_string(run.path().join(LOG_FILE_NAME)).unwrap();
    assert!(!text.contains("loss_pseudo") && !text.contains("loss_height") && !text.contains("consistency"));
    assert!(text.lines().all(|l| l.contains("loss_semantic")));

    let eval_dir = run.path().join("eval");
    let e = cmd_eval(&c, run.path(), data.path(), "test", &eval_dir).unwrap();
    assert!(e.report.rmse.is_none() && e.histogram.is_none());
    assert!(e.report.miou.is_some());
    let md = cmd_report(&eval_dir, &eval_dir).unwrap();
    assert!(md.contains("semantic") && md.contains('−'));
}

#[test]
fn error_kinds_map_to_exit_codes() {
    assert_eq!(HarnessError::Config("x".into()).exit_code(), EXIT_CONFIG);
    assert_eq!(HarnessError::from(ModelError::Config("x".into())).exit_code(), EXIT_CONFIG);
    assert_eq!(HarnessError::from(ModelError::NonFinite("nan".into())).exit_code(), EXIT_NUMERIC);
    assert_eq!(HarnessError::Numeric("x".into()).exit_code(), EXIT_NUMERIC);
    assert_eq!(HarnessError::io("/nowhere", std::io::Error::other("x")).exit_code(), 1);
}

#[test]
fn config_documents_merge_over_presets() {
    let c = RunConfig::from_value(serde_json::json!({"preset": "toy", "num_scenes": 3, "train": {"epochs": 7}})).unwrap();
    assert_eq!(c.num_scenes, 3);
    assert_eq!(c.train.epochs, 7);
    assert_eq!(c.train.model.backbone.embed_dims, RunConfig::toy().train.model.backbone.embed_dims);
    assert!(RunConfig::from_value(serde_json::json!({"preset": "huge"})).is_err());
    assert!(RunConfig::from_value(serde_json::json!({"sweep_temperatures": [0.1, -1.0]})).is_err());
    assert!(RunConfig::from_value(serde_json::json!({"tile_size": 100})).is_err());
    assert!(RunConfig::from_value(serde_json::json!({"train": {"loss_weights": {"lambda1": -1.0}}})).is_err());
}

fn mmcd(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mmcd")).args(args).env("RUST_LOG", "error").output().unwrap()
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let out = out.to_str().unwrap();
    assert_eq!(mmcd(&["generate", "--preset", "huge", "--out", out]).status.code(), Some(2));
    assert_eq!(mmcd(&["generate", "--bogus"]).status.code(), Some(2));
    assert_eq!(mmcd(&["train", "--preset", "toy", "--out", out]).status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(mmcd(&["generate", "--config", bad.to_str().unwrap(), "--out", out]).status.code(), Some(2));
    assert_eq!(
        mmcd(&["eval", "--preset", "toy", "--data", out, "--checkpoint", out, "--out", out]).status.code(),
        Some(2)
    );
    let data = dir.path().join("data");
    let ok = mmcd(&["generate", "--preset", "toy", "--seed", "4", "--out", data.to_str().unwrap()]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("tiles train/val/test: 5/1/2"));
    let missing = dir.path().join("nothing");
    assert_eq!(
        mmcd(&["eval", "--preset", "toy", "--data", data.to_str().unwrap(), "--checkpoint", missing.to_str().unwrap(), "--out", out])
            .status
            .code(),
        Some(1)
    );
}
