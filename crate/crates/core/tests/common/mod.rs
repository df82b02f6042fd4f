//! Shared test helpers. The forward, metric and divergence oracles are plain
//! loops that never call the library's kernels; the finite-difference
//! harness at the bottom does, by design.

#![allow(dead_code)]

use trustlora_core::arithmetic::{extract_vector, LoraVector};
use trustlora_core::autodiff::Tape;
use trustlora_core::model::{BaseModel, LoraAdapter, ModelConfig, TrainMode};
use trustlora_core::objectives::{build_loss, Batch, Objective};
use trustlora_core::Matrix;

/// Per-layer `(a, b, scale)` branches as plain row-major vectors.
pub struct OracleBranch {
    pub layer: usize,
    pub a: Matrix,
    pub b: Matrix,
    pub scale: f64,
}

pub fn branches_of(adapter: &LoraAdapter, scale: f64) -> Vec<OracleBranch> {
    adapter
        .layers
        .iter()
        .map(|l| OracleBranch {
            layer: l.layer,
            a: l.a.clone(),
            b: l.b.clone(),
            scale,
        })
        .collect()
}

/// Pre-activation of layer `i` for one input row, with branches.
pub fn layer_pre(base: &BaseModel, i: usize, h: &[f64], branches: &[OracleBranch]) -> Vec<f64> {
    let w = &base.layers[i].weight;
    let bias = &base.layers[i].bias;
    let mut z: Vec<f64> = (0..w.rows())
        .map(|o| bias.get(0, o) + (0..w.cols()).map(|j| w.get(o, j) * h[j]).sum::<f64>())
        .collect();
    for br in branches.iter().filter(|b| b.layer == i) {
        let proj: Vec<f64> = (0..br.a.rows())
            .map(|k| (0..br.a.cols()).map(|j| br.a.get(k, j) * h[j]).sum())
            .collect();
        for (o, zo) in z.iter_mut().enumerate() {
            *zo += br.scale * (0..br.b.cols()).map(|k| br.b.get(o, k) * proj[k]).sum::<f64>();
        }
    }
    z
}

pub fn forward_row(base: &BaseModel, x: &[f64], branches: &[OracleBranch]) -> Vec<f64> {
    let last = base.layers.len() - 1;
    let mut h = x.to_vec();
    for i in 0..base.layers.len() {
        let z = layer_pre(base, i, &h, branches);
        h = if i == last {
            z
        } else {
            z.into_iter().map(|v| v.max(0.0)).collect()
        };
    }
    h
}

pub fn forward(base: &BaseModel, x: &Matrix, branches: &[OracleBranch]) -> Vec<Vec<f64>> {
    (0..x.rows()).map(|r| forward_row(base, x.row(r), branches)).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum()
}

pub fn js3(p0: &[f64], p1: &[f64], p2: &[f64]) -> f64 {
    let m: Vec<f64> = (0..p0.len()).map(|i| (p0[i] + p1[i] + p2[i]) / 3.0).collect();
    (kl(p0, &m) + kl(p1, &m) + kl(p2, &m)) / 3.0
}

pub fn mean_ce(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    probs.iter().zip(labels).map(|(p, &y)| -p[y].ln()).sum::<f64>() / probs.len() as f64
}

/// `|a - n| / max(|a|, |n|, 1e-4)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

/// A small net (at most 200 base + adapter parameters) with a random
/// nonzero adapter.
pub fn small_net(seed: u64, mode: TrainMode) -> (BaseModel, LoraAdapter) {
    let cfg = ModelConfig {
        input_dim: 3,
        hidden_dims: vec![8],
        num_classes: 3,
        lora_rank: 2,
        lora_seed: seed ^ 0x55,
        adapt_layers: Some(vec![0, 1]),
        train_mode: mode,
    };
    let base = BaseModel::init(&cfg, seed).unwrap();
    let mut adapter = LoraAdapter::from_config(&base, &cfg).unwrap();
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    for l in &mut adapter.layers {
        for v in l.b.data_mut() {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            *v = ((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 0.6;
        }
    }
    (base, adapter)
}

/// Deterministic pseudo-random matrix in `[-scale, scale]`.
pub fn lcg_matrix(seed: u64, rows: usize, cols: usize, scale: f64) -> Matrix {
    let mut state = seed ^ 0x9e37_79b9_7f4a_7c15;
    let data = (0..rows * cols)
        .map(|_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0) * scale
        })
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// A base and three trained-looking vectors sharing one projection seed.
pub fn setup(seed: u64) -> (BaseModel, LoraVector, LoraVector, LoraVector) {
    let (base, a1) = small_net(seed, TrainMode::BOnly);
    let fresh = LoraAdapter::new(&base, 2, seed ^ 0x55, &[0, 1], TrainMode::BOnly).unwrap();
    let mut vs = Vec::new();
    for (k, obj) in [Objective::CovAugmix, Objective::SemOe, Objective::CovAugmix]
        .into_iter()
        .enumerate()
    {
        let mut trained = a1.clone();
        for (i, l) in trained.layers.iter_mut().enumerate() {
            let (u, r) = l.b.shape();
            l.b = lcg_matrix(seed * 31 + (k * 7 + i) as u64, u, r, 0.5);
        }
        vs.push(extract_vector(&fresh, &trained, Some(obj), "base").unwrap());
    }
    let v3 = vs.pop().unwrap();
    let v2 = vs.pop().unwrap();
    let v1 = vs.pop().unwrap();
    (base, v1, v2, v3)
}

pub fn brute_matmul(b: &Matrix, a: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(b.rows(), a.cols());
    for i in 0..b.rows() {
        for j in 0..a.cols() {
            let mut s = 0.0;
            for k in 0..b.cols() {
                s += b.get(i, k) * a.get(k, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

/// Brute-force `P(pos > neg) + P(pos = neg) / 2` over all pairs.
pub fn auroc_pairs(pos: &[f64], neg: &[f64]) -> f64 {
    let mut twice = 0u64;
    for &p in pos {
        for &n in neg {
            twice += if p > n {
                2
            } else if p == n {
                1
            } else {
                0
            };
        }
    }
    (twice as f64 / 2.0) / (pos.len() as f64 * neg.len() as f64)
}

/// Scans every candidate threshold and keeps the largest with TPR >= 95%.
pub fn fpr95_scan(pos: &[f64], neg: &[f64]) -> f64 {
    let mut best: Option<f64> = None;
    for &t in pos.iter().chain(neg) {
        let tp = pos.iter().filter(|&&p| p >= t).count();
        if tp as f64 >= 0.95 * pos.len() as f64 && best.is_none_or(|b| t > b) {
            best = Some(t);
        }
    }
    let t = best.expect("the smallest positive always qualifies");
    neg.iter().filter(|&&n| n >= t).count() as f64 / neg.len() as f64
}

/// Mean prefix risk, each prefix found by counting elements ranked ahead
/// (higher score, or equal score and smaller index).
pub fn aurc_prefix(scores: &[f64], accept: &[bool]) -> f64 {
    let n = scores.len();
    let rank = |j: usize| {
        (0..n)
            .filter(|&l| scores[l] > scores[j] || (scores[l] == scores[j] && l < j))
            .count()
    };
    let ranks: Vec<usize> = (0..n).map(rank).collect();
    let mut total = 0.0;
    for i in 1..=n {
        let errors = (0..n).filter(|&j| ranks[j] < i && !accept[j]).count();
        total += errors as f64 / i as f64;
    }
    total / n as f64
}

pub const FD_STEP: f64 = 1e-6;

pub fn loss_value(base: &BaseModel, adapter: &LoraAdapter, batch: &Batch<'_>) -> f64 {
    let mut tape = Tape::new();
    let vars = base.register(&mut tape, false);
    let branches = adapter.register(&mut tape);
    let (loss, _) = build_loss(&mut tape, base, &vars, &branches, batch).unwrap();
    tape.value(loss).get(0, 0)
}

fn central(f: impl Fn(f64) -> f64, x0: f64) -> f64 {
    (f(x0 + FD_STEP) - f(x0 - FD_STEP)) / (2.0 * FD_STEP)
}

/// Largest relative error between analytic gradients and central finite
/// differences over every trainable entry. Base weights count as
/// trainable when `base_trainable`; A counts in A-and-B mode.
pub fn max_gradient_error(base: &BaseModel, adapter: &LoraAdapter, batch: &Batch<'_>, base_trainable: bool) -> f64 {
    let mut tape = Tape::new();
    let vars = base.register(&mut tape, base_trainable);
    let branches = adapter.register(&mut tape);
    let (loss, _) = build_loss(&mut tape, base, &vars, &branches, batch).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    if base_trainable {
        for (l, &(wv, bv)) in vars.layers.iter().enumerate() {
            for (var, is_bias) in [(wv, false), (bv, true)] {
                let g = grads.wrt(var);
                for idx in 0..g.len() {
                    let numeric = central(
                        |v| {
                            let mut m = base.clone();
                            let target = if is_bias {
                                &mut m.layers[l].bias
                            } else {
                                &mut m.layers[l].weight
                            };
                            target.data_mut()[idx] = v;
                            loss_value(&m, adapter, batch)
                        },
                        if is_bias {
                            base.layers[l].bias.data()[idx]
                        } else {
                            base.layers[l].weight.data()[idx]
                        },
                    );
                    worst = worst.max(rel_err(g.data()[idx], numeric));
                }
            }
        }
    }
    for (i, tb) in branches.iter().enumerate() {
        let mut targets = vec![(tb.b, false)];
        if adapter.train_mode == TrainMode::AAndB {
            targets.push((tb.a, true));
        }
        for (var, is_a) in targets {
            let g = grads.wrt(var);
            for idx in 0..g.len() {
                let x0 = if is_a {
                    adapter.layers[i].a.data()[idx]
                } else {
                    adapter.layers[i].b.data()[idx]
                };
                let numeric = central(
                    |v| {
                        let mut a = adapter.clone();
                        let target = if is_a { &mut a.layers[i].a } else { &mut a.layers[i].b };
                        target.data_mut()[idx] = v;
                        loss_value(base, &a, batch)
                    },
                    x0,
                );
                worst = worst.max(rel_err(g.data()[idx], numeric));
            }
        }
    }
    worst
}
