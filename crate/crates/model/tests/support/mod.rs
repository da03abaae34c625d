#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use mmcd_model::backbone::{BackboneConfig, NUM_STAGES};
use mmcd_model::decoder::{DecoderConfig, ModelConfig, TaskGates};
use mmcd_model::objective::{compute_losses, ClassWeights, LossWeights, Targets, PROB_FLOOR};
use mmcd_model::{Model, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const NORM_EPS: f64 = 1e-6;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.dims(), b.dims());
    values(a).iter().zip(values(b)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn param(ps: &ParamStore, name: &str) -> Vec<f64> {
    values(ps.get(name).unwrap_or_else(|| panic!("missing {name}")).as_tensor())
}

/// `y = W x + b` with `W` stored row-major `(out, in)`.
fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, bo)| bo + (0..n_in).map(|i| w[o * n_in + i] * x[i]).sum::<f64>())
        .collect()
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().enumerate().map(|(i, v)| (v - mean) / (var + NORM_EPS).sqrt() * g[i] + b[i]).collect()
}

/// Plain-loop attention for a single batch item. `xq` and `xkv` are token
/// rows of length `dim` on an `h × w` grid; weights are read from `ps` under
/// `name`.
pub fn attention_oracle(
    ps: &ParamStore,
    name: &str,
    xq: &[Vec<f64>],
    xkv: &[Vec<f64>],
    h: usize,
    w: usize,
    heads: usize,
    sr: usize,
) -> Vec<Vec<f64>> {
    let dim = xq[0].len();
    let p = |s: &str| param(ps, &format!("{name}.{s}"));
    let kv_src: Vec<Vec<f64>> = if sr > 1 {
        let (wr, br) = (p("sr.weight"), p("sr.bias"));
        let (g, b) = (p("sr_norm.weight"), p("sr_norm.bias"));
        let mut out = Vec::new();
        for py in 0..h / sr {
            for px in 0..w / sr {
                let mut patch = Vec::with_capacity(dim * sr * sr);
                for c in 0..dim {
                    for sy in 0..sr {
                        for sx in 0..sr {
                            patch.push(xkv[(py * sr + sy) * w + px * sr + sx][c]);
                        }
                    }
                }
                out.push(layer_norm(&affine(&wr, &br, &patch), &g, &b));
            }
        }
        out
    } else {
        xkv.to_vec()
    };
    let q: Vec<Vec<f64>> = xq.iter().map(|x| affine(&p("q.weight"), &p("q.bias"), x)).collect();
    let k: Vec<Vec<f64>> = kv_src.iter().map(|x| affine(&p("k.weight"), &p("k.bias"), x)).collect();
    let v: Vec<Vec<f64>> = kv_src.iter().map(|x| affine(&p("v.weight"), &p("v.bias"), x)).collect();
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Vec::with_capacity(q.len());
    for qi in &q {
        let mut concat = vec![0.0; dim];
        for hd in 0..heads {
            let r = hd * dh..(hd + 1) * dh;
            let logits: Vec<f64> =
                k.iter().map(|kj| qi[r.clone()].iter().zip(&kj[r.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, vj) in v.iter().enumerate() {
                for c in r.clone() {
                    concat[c] += e[j] / z * vj[c];
                }
            }
        }
        out.push(affine(&p("proj.weight"), &p("proj.bias"), &concat));
    }
    out
}

/// `(1, N, C)` tensor to token rows.
pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (_, n, c) = t.dims3().unwrap();
    let v = values(t);
    (0..n).map(|i| v[i * c..(i + 1) * c].to_vec()).collect()
}

fn linear(i: usize, o: usize) -> usize {
    o * (i + 1)
}

fn conv(i: usize, o: usize, k: usize) -> usize {
    o * (i * k * k + 1)
}

fn norm(d: usize) -> usize {
    2 * d
}

fn attention(d: usize, sr: usize) -> usize {
    4 * linear(d, d) + if sr > 1 { linear(d * sr * sr, d) + norm(d) } else { 0 }
}

fn residual(c: usize) -> usize {
    2 * conv(c, c, 3) + norm(c)
}

fn branch(cfg: &BackboneConfig, in_ch: usize) -> usize {
    let mut total = 0;
    let mut prev = in_ch;
    for n in 0..NUM_STAGES {
        let d = cfg.embed_dims[n];
        let hidden = (d as f64 * cfg.mlp_ratio).round() as usize;
        let block = 2 * norm(d) + attention(d, cfg.sr_ratios[n]) + linear(d, hidden) + 10 * hidden + linear(hidden, d);
        total += conv(prev, d, cfg.patch_kernels[n]) + 2 * norm(d) + cfg.depths[n] * block;
        prev = d;
    }
    total
}

/// Closed-form trainable parameter count of the full model.
pub fn param_count_oracle(cfg: &ModelConfig) -> usize {
    let bb = &cfg.backbone;
    let encoders = if cfg.share_weights { branch(bb, 3) } else { branch(bb, 1) + branch(bb, 3) };
    let mut fusion = 0;
    for n in 0..NUM_STAGES {
        let d = bb.embed_dims[n];
        fusion += 2 * norm(d) + 2 * attention(d, bb.sr_ratios[n]) + linear(2 * d, d) + linear(d, d) + conv(d, d, 3) + norm(d);
        if n > 0 {
            fusion += conv(bb.embed_dims[n - 1], d, 1);
        }
    }
    let dd = cfg.decoder.decode_dim;
    let decoder: usize = bb.embed_dims.iter().map(|&d| conv(d, dd, 1)).sum::<usize>() + residual(dd);
    let hh = cfg.decoder.head_hidden;
    let head = |out: usize| conv(dd, hh, 1) + residual(hh) + conv(hh, out, 3);
    let g = cfg.gates;
    let heads = usize::from(g.semantic) * head(3) + usize::from(g.height) * head(1) + usize::from(g.pseudo) * head(1);
    encoders + fusion + decoder + heads
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            embed_dims: [8, 16, 32, 64],
            depths: [1, 1, 1, 1],
            num_heads: [1, 2, 4, 8],
            ..Default::default()
        },
        share_weights: false,
        decoder: DecoderConfig { decode_dim: 16, head_hidden: 8, temperature: 0.5 },
        gates: TaskGates::ALL,
    }
}

/// Derivative of `2·sigmoid(x/t) − 1` from a fourth-order central stencil
/// on the tail `q(u) = 2 / (1 + e^{u/t})`, which keeps full relative
/// precision where the function saturates. `T(x) = sign(x)·(1 − q(|x|))`,
/// so `T'(x) = −q'(|x|)`.
pub fn soft_threshold_fd(x: f64, t: f64) -> f64 {
    let q = |u: f64| 2.0 / (1.0 + (u / t).exp());
    let u = x.abs();
    let h = 1e-3 * t;
    -(-q(u + 2.0 * h) + 8.0 * q(u + h) - 8.0 * q(u - h) + q(u - 2.0 * h)) / (12.0 * h)
}

#[derive(Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub failures: Vec<String>,
    pub max_rel_err: f64,
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-3;
/// Gradient magnitudes below this are compared absolutely against it; the
/// f64 loss carries roughly 1e-15 of roundoff, i.e. 1e-10 after dividing by
/// the step.
pub const FD_GRAD_FLOOR: f64 = 1e-6;
pub const SINGULAR_SPREAD: f64 = 0.01;

struct Probe {
    loss: f64,
    pseudo_sign: Vec<i8>,
    above_floor: Vec<bool>,
    /// Pseudo probability of each pixel's target class.
    target_prob: Vec<f64>,
}

fn probe(model: &Model, dsm: &Tensor, image: &Tensor, targets: &Targets) -> Probe {
    let o = model.forward(dsm, image).unwrap();
    let terms = compute_losses(&o, targets, &LossWeights::default(), &ClassWeights::default(), 0.0).unwrap();
    let s = values(o.pseudo_scalar.as_ref().unwrap());
    let p = values(o.pseudo_probs.as_ref().unwrap());
    let labels: Vec<u8> = targets.pseudo.flatten_all().unwrap().to_vec1().unwrap();
    let n = labels.len();
    let target_prob = labels.iter().enumerate().map(|(i, &c)| p[c as usize * n + i]).collect();
    Probe {
        loss: terms.total.to_scalar::<f64>().unwrap(),
        pseudo_sign: s.iter().map(|v| if *v > 0.0 { 1 } else if *v < 0.0 { -1 } else { 0 }).collect(),
        above_floor: p.iter().map(|v| *v > PROB_FLOOR).collect(),
        target_prob,
    }
}

/// Central differences of the composite loss against backprop for
/// `per_tensor` random entries of every parameter tensor, in f64. Entries
/// whose ±step perturbation moves a pseudo output across a kink (sign change
/// or probability floor), or changes a target-class pseudo probability by
/// more than [`SINGULAR_SPREAD`] of itself (the log is then curved on the
/// scale of the step), are skipped.
pub fn gradient_check(seed: u64, per_tensor: usize) -> GradCheck {
    let cfg = tiny_config();
    let mut ps = ParamStore::new(seed, DType::F64);
    let model = Model::new(&mut ps, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (h, w) = (32, 32);
    let dsm = random_tensor(&mut rng, &[1, 1, h, w], -2.0, 2.0);
    let image = random_tensor(&mut rng, &[1, 3, h, w], -2.0, 2.0);
    let sem: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..3)).collect();
    let pse: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..3)).collect();
    let targets = Targets {
        semantic: Tensor::from_vec(sem, (1, h, w), &Device::Cpu).unwrap(),
        pseudo: Tensor::from_vec(pse, (1, h, w), &Device::Cpu).unwrap(),
        height_norm: random_tensor(&mut rng, &[1, 1, h, w], -1.0, 1.0),
        overlap: Tensor::from_vec((0..h * w).map(|_| f64::from(rng.gen_bool(0.3) as u8)).collect::<Vec<_>>(), (1, 1, h, w), &Device::Cpu)
            .unwrap(),
    };

    let o = model.forward(&dsm, &image).unwrap();
    let terms = compute_losses(&o, &targets, &LossWeights::default(), &ClassWeights::default(), 0.0).unwrap();
    let grads = terms.total.backward().unwrap();

    let mut report = GradCheck::default();
    let names: Vec<String> = ps.names().map(String::from).collect();
    for name in names {
        let var = ps.get(&name).unwrap().clone();
        let base = values(var.as_tensor());
        let shape = var.as_tensor().dims().to_vec();
        let analytic = grads.get(var.as_tensor()).map(values).unwrap_or_else(|| vec![0.0; base.len()]);
        for _ in 0..per_tensor {
            let i = rng.gen_range(0..base.len());
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
                probe(&model, &dsm, &image, &targets)
            };
            let plus = eval(FD_STEP);
            let minus = eval(-FD_STEP);
            var.set(&Tensor::from_vec(base.clone(), shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
            let singular = plus
                .target_prob
                .iter()
                .zip(&minus.target_prob)
                .any(|(a, b)| (a - b).abs() > SINGULAR_SPREAD * a.min(*b));
            if singular || plus.pseudo_sign != minus.pseudo_sign || plus.above_floor != minus.above_floor {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * FD_STEP);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_GRAD_FLOOR);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
            if rel > FD_REL_TOL {
                report.failures.push(format!("{name}[{i}]: analytic {a:e} vs numeric {numeric:e}"));
            }
        }
    }
    report
}
