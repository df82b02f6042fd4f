//! Mini-batch SGD with momentum and a cosine learning-rate schedule, for
//! the base network and for LoRA adapters.

use std::f64::consts::PI;

use log::info;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{BaseModel, LoraAdapter, ModelConfig, TrainMode};
use crate::objectives::{build_loss, Augmenter, Batch, Objective, ObjectiveConfig};
use crate::rng::{seeded, shuffle, SeededRng};
use crate::tensor::Matrix;
use crate::wildbench::LabeledSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_init: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr_init: 0.001,
            momentum: 0.9,
            batch_size: 64,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr_init >= 0.0 && self.lr_init.is_finite()) {
            return Err(Error::config("lr_init must be a finite non-negative number"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// `lr_init * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(lr_init: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr_init;
    }
    lr_init * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

/// Heavy-ball SGD state: `v = mu * v + g; p -= lr * v`.
struct Sgd {
    momentum: f64,
    velocity: Vec<Matrix>,
}

impl Sgd {
    fn new(momentum: f64, shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        Sgd {
            momentum,
            velocity: shapes.into_iter().map(|(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix], lr: f64) {
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
    }
}

/// Batched iteration order for one epoch; the last partial batch is kept.
fn epoch_batches(rng: &mut SeededRng, n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    shuffle(rng, &mut order);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn correct(logits: &Matrix, labels: &[usize]) -> usize {
    logits.argmax_rows().iter().zip(labels).filter(|(p, y)| p == y).count()
}

fn check_loss(value: f64, epoch: usize, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "loss became {value} at epoch {epoch}, step {step}"
        )))
    }
}

/// Trains every base parameter with cross-entropy, starting from the
/// seeded He initialization.
pub fn train_base(
    model_config: &ModelConfig,
    init_seed: u64,
    config: &TrainConfig,
    data: &LabeledSet,
) -> Result<(BaseModel, Vec<EpochRecord>)> {
    config.validate()?;
    model_config.validate()?;
    let mut model = BaseModel::init(model_config, init_seed)?;
    if data.is_empty() {
        return Err(Error::contract("cannot train on an empty dataset"));
    }
    if data.inputs.cols() != model.input_dim() {
        return Err(Error::data(format!(
            "training inputs have {} features, model expects {}",
            data.inputs.cols(),
            model.input_dim()
        )));
    }
    let labels = data.class_labels()?;
    if let Some(&bad) = labels.iter().find(|&&y| y >= model.num_classes()) {
        return Err(Error::data(format!("label {bad} outside 0..{}", model.num_classes())));
    }

    let mut rng = seeded(config.rng_seed);
    let per_epoch = data.len().div_ceil(config.batch_size);
    let total = per_epoch * config.epochs;
    let shapes: Vec<(usize, usize)> = model
        .layers
        .iter()
        .flat_map(|l| [l.weight.shape(), l.bias.shape()])
        .collect();
    let mut sgd = Sgd::new(config.momentum, shapes);
    let mut records = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let (mut loss_sum, mut hits) = (0.0, 0);
        let mut lr = 0.0;
        for batch in epoch_batches(&mut rng, data.len(), config.batch_size) {
            let x = data.inputs.select_rows(&batch);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let vars = model.register(&mut tape, true);
            let (loss, logits) = build_loss(&mut tape, &model, &vars, &[], &Batch::Ce { x: &x, labels: &y })?;
            let value = tape.value(loss).get(0, 0);
            check_loss(value, epoch, step)?;
            loss_sum += value * batch.len() as f64;
            hits += correct(tape.value(logits), &y);
            let grads = tape.backward(loss)?;
            let g: Vec<Matrix> = vars
                .layers
                .iter()
                .flat_map(|&(w, b)| [grads.wrt(w), grads.wrt(b)])
                .collect();
            lr = cosine_lr(config.lr_init, step, total);
            let mut params: Vec<&mut Matrix> = model
                .layers
                .iter_mut()
                .flat_map(|l| [&mut l.weight, &mut l.bias])
                .collect();
            sgd.step(&mut params, &g, lr);
            step += 1;
        }
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: hits as f64 / data.len() as f64,
            lr,
        };
        info!(
            "phase=base epoch={} loss={:.6} acc={:.4} lr={:.6e}",
            rec.epoch, rec.loss, rec.accuracy, rec.lr
        );
        records.push(rec);
    }
    Ok((model, records))
}

/// Everything one adapter run draws from besides the frozen base.
pub struct LoraRun<'a> {
    pub objective: Objective,
    pub objectives: ObjectiveConfig,
    pub rank: usize,
    pub adapter_seed: u64,
    pub adapt_layers: Vec<usize>,
    pub train_mode: TrainMode,
    pub train: &'a LabeledSet,
    /// Required for the semantic objective.
    pub aux: Option<&'a Matrix>,
    /// Required for the covariate objective.
    pub augmenter: Option<&'a dyn Augmenter>,
}

fn lora_params(adapter: &mut LoraAdapter, mode: TrainMode) -> Vec<&mut Matrix> {
    let mut out = Vec::new();
    for l in &mut adapter.layers {
        if mode == TrainMode::AAndB {
            out.push(&mut l.a);
        }
        out.push(&mut l.b);
    }
    out
}

/// Trains a LoRA adapter on a frozen base. The base weights are never
/// touched; the returned adapter holds the trained factors.
pub fn train_lora(
    base: &BaseModel,
    run: &LoraRun<'_>,
    config: &TrainConfig,
) -> Result<(LoraAdapter, Vec<EpochRecord>)> {
    config.validate()?;
    run.objectives.validate()?;
    let mut adapter = LoraAdapter::new(base, run.rank, run.adapter_seed, &run.adapt_layers, run.train_mode)?;
    let data = run.train;
    if data.is_empty() {
        return Err(Error::contract("cannot train on an empty dataset"));
    }
    if data.inputs.cols() != base.input_dim() {
        return Err(Error::data(format!(
            "training inputs have {} features, model expects {}",
            data.inputs.cols(),
            base.input_dim()
        )));
    }
    let labels = data.class_labels()?;
    let aux = match run.objective {
        Objective::SemOe => {
            let aux = run
                .aux
                .ok_or_else(|| Error::config("the semantic objective needs an auxiliary outlier set"))?;
            if aux.rows() == 0 {
                return Err(Error::contract("outlier-exposure needs a non-empty auxiliary set"));
            }
            Some(aux)
        }
        _ => None,
    };
    let augmenter = match run.objective {
        Objective::CovAugmix => Some(
            run.augmenter
                .ok_or_else(|| Error::config("the covariate objective needs an augmenter"))?,
        ),
        _ => None,
    };

    let mut rng = seeded(config.rng_seed);
    let per_epoch = data.len().div_ceil(config.batch_size);
    let total = per_epoch * config.epochs;
    let shapes: Vec<(usize, usize)> = lora_params(&mut adapter, run.train_mode)
        .iter()
        .map(|m| m.shape())
        .collect();
    let mut sgd = Sgd::new(config.momentum, shapes);
    let mut records = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let (mut loss_sum, mut hits) = (0.0, 0);
        let mut lr = 0.0;
        let batches = epoch_batches(&mut rng, data.len(), config.batch_size);
        let aux_order = aux.map(|a| {
            let mut order: Vec<usize> = (0..a.rows()).collect();
            shuffle(&mut rng, &mut order);
            order
        });
        for (bi, batch) in batches.iter().enumerate() {
            let x = data.inputs.select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let vars = base.register(&mut tape, false);
            let branches = adapter.register(&mut tape);
            let (aug1, aug2, x_aux);
            let spec = match run.objective {
                Objective::BaseCe => Batch::Ce { x: &x, labels: &y },
                Objective::CovAugmix => {
                    let aug = augmenter.expect("checked above");
                    aug1 = aug.augment(&x, &mut rng)?;
                    aug2 = aug.augment(&x, &mut rng)?;
                    Batch::Augmix {
                        x: &x,
                        x_aug1: &aug1,
                        x_aug2: &aug2,
                        labels: &y,
                        lambda: run.objectives.lambda_cov,
                    }
                }
                Objective::SemOe => {
                    let (aux, order) = (aux.expect("checked above"), aux_order.as_ref().expect("set with aux"));
                    let rows: Vec<usize> = (0..config.batch_size)
                        .map(|k| order[(bi * config.batch_size + k) % order.len()])
                        .collect();
                    x_aux = aux.select_rows(&rows);
                    Batch::Oe {
                        x: &x,
                        labels: &y,
                        x_aux: &x_aux,
                        lambda: run.objectives.lambda_sem,
                    }
                }
            };
            let (loss, logits) = build_loss(&mut tape, base, &vars, &branches, &spec)?;
            let value = tape.value(loss).get(0, 0);
            check_loss(value, epoch, step)?;
            loss_sum += value * batch.len() as f64;
            hits += correct(tape.value(logits), &y);
            let grads = tape.backward(loss)?;
            let g: Vec<Matrix> = branches
                .iter()
                .flat_map(|br| {
                    let mut v: Vec<Var> = Vec::new();
                    if run.train_mode == TrainMode::AAndB {
                        v.push(br.a);
                    }
                    v.push(br.b);
                    v
                })
                .map(|v| grads.wrt(v))
                .collect();
            lr = cosine_lr(config.lr_init, step, total);
            sgd.step(&mut lora_params(&mut adapter, run.train_mode), &g, lr);
            step += 1;
        }
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: hits as f64 / data.len() as f64,
            lr,
        };
        info!(
            "phase=lora objective={} epoch={} loss={:.6} acc={:.4} lr={:.6e}",
            run.objective.as_str(),
            rec.epoch,
            rec.loss,
            rec.accuracy,
            rec.lr
        );
        records.push(rec);
    }
    Ok((adapter, records))
}
