#![allow(dead_code)]

use mmcd_core::metrics::{CREL_MIN_REFERENCE_M, ZNCC_EPSILON};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-12)
}

/// Literal reading of the change rule, one pixel at a time.
pub fn rule_oracle(dh: f32, m: i8, pre: bool, post: bool, tau: f32) -> u8 {
    let dh = if dh.abs() < tau { 0.0f64 } else { dh as f64 };
    let product = dh * m as f64;
    if product < 0.0 && pre {
        1
    } else if product > 0.0 && post {
        2
    } else {
        0
    }
}

/// Two-pass per-pixel height metrics.
pub fn height_oracle(pred: &[f64], gt: &[f64], mask: &[bool]) -> [Option<f64>; 5] {
    let n = pred.len() as f64;
    let mut se = 0.0;
    let mut ae = 0.0;
    for i in 0..pred.len() {
        se += (gt[i] - pred[i]).powi(2);
        ae += (gt[i] - pred[i]).abs();
    }
    let idx: Vec<usize> = (0..pred.len()).filter(|&i| mask[i]).collect();
    if idx.is_empty() {
        return [Some((se / n).sqrt()), Some(ae / n), None, None, None];
    }
    let k = idx.len() as f64;
    let crmse = (idx.iter().map(|&i| (gt[i] - pred[i]).powi(2)).sum::<f64>() / k).sqrt();
    let rel: Vec<f64> = idx
        .iter()
        .filter(|&&i| gt[i].abs() >= CREL_MIN_REFERENCE_M)
        .map(|&i| (gt[i] - pred[i]).abs() / gt[i].abs())
        .collect();
    let crel = (!rel.is_empty()).then(|| rel.iter().sum::<f64>() / rel.len() as f64);
    let mr = idx.iter().map(|&i| gt[i]).sum::<f64>() / k;
    let me = idx.iter().map(|&i| pred[i]).sum::<f64>() / k;
    let sr = (idx.iter().map(|&i| (gt[i] - mr).powi(2)).sum::<f64>() / k).sqrt();
    let se_ = (idx.iter().map(|&i| (pred[i] - me).powi(2)).sum::<f64>() / k).sqrt();
    let zncc = idx
        .iter()
        .map(|&i| (gt[i] - mr) * (pred[i] - me) / ((sr + ZNCC_EPSILON) * (se_ + ZNCC_EPSILON)))
        .sum::<f64>()
        / k;
    [Some((se / n).sqrt()), Some(ae / n), Some(crmse), crel, Some(zncc)]
}

/// Direct |∩|/|∪| per class from the label maps.
pub fn iou_oracle(pred: &[u8], gt: &[u8], class: u8) -> Option<f64> {
    let inter = pred.iter().zip(gt).filter(|(&p, &g)| p == class && g == class).count();
    let union = pred.iter().zip(gt).filter(|(&p, &g)| p == class || g == class).count();
    (union > 0).then(|| 100.0 * inter as f64 / union as f64)
}

pub fn random_case(rng: &mut ChaCha8Rng, n: usize) -> (Vec<u8>, Vec<u8>, Vec<f64>, Vec<f64>) {
    let gt_c: Vec<u8> = (0..n).map(|_| rng.gen_range(0..3)).collect();
    let pred_c: Vec<u8> = (0..n).map(|_| rng.gen_range(0..3)).collect();
    let gt_h: Vec<f64> = gt_c
        .iter()
        .map(|&c| match c {
            1 => -rng.gen_range(0.05..30.0),
            2 => rng.gen_range(0.05..30.0),
            _ => 0.0,
        })
        .collect();
    let pred_h: Vec<f64> = gt_h.iter().map(|&h| h + rng.gen_range(-5.0..5.0)).collect();
    (pred_c, gt_c, pred_h, gt_h)
}
