//! MLP classifier with optional low-rank branches on its linear layers.
//!
//! Layer `i` maps `v → u` with weight `W: u×v` and bias `b: 1×u`. A batch
//! `x: n×v` goes through `z = x Wᵀ + b`, then for every branch attached to
//! that layer `z += (x Aᵀ)(s·B)ᵀ`, then ReLU on every layer but the last.

use serde::{Deserialize, Serialize};

use crate::autodiff::{relu, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{gaussian_matrix, seeded, standard_normal};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    /// A stays at its seeded random projection; only B is trained.
    #[serde(rename = "b-only")]
    BOnly,
    #[serde(rename = "ab")]
    AAndB,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::BOnly => "b-only",
            TrainMode::AAndB => "ab",
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "b-only" => Ok(TrainMode::BOnly),
            "ab" => Ok(TrainMode::AAndB),
            other => Err(Error::config(format!("unknown train mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub lora_rank: usize,
    pub lora_seed: u64,
    /// Layers that carry a branch. `None` selects every hidden layer whose
    /// shape admits the rank.
    #[serde(default)]
    pub adapt_layers: Option<Vec<usize>>,
    pub train_mode: TrainMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 8,
            hidden_dims: vec![64, 64],
            num_classes: 6,
            lora_rank: 4,
            lora_seed: 0,
            adapt_layers: None,
            train_mode: TrainMode::BOnly,
        }
    }
}

impl ModelConfig {
    /// `(u, v)` for every linear layer, input side first.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.num_classes);
        dims.windows(2).map(|w| (w[1], w[0])).collect()
    }

    pub fn resolved_adapt_layers(&self) -> Vec<usize> {
        match &self.adapt_layers {
            Some(layers) => layers.clone(),
            None => {
                let shapes = self.layer_shapes();
                (0..shapes.len() - 1)
                    .filter(|&i| self.lora_rank < shapes[i].0.min(shapes[i].1))
                    .collect()
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes < 2 || self.hidden_dims.contains(&0) {
            return Err(Error::config(
                "input_dim, hidden dims must be positive and num_classes at least 2",
            ));
        }
        if self.lora_rank == 0 {
            return Err(Error::config("lora_rank must be at least 1"));
        }
        let shapes = self.layer_shapes();
        let layers = self.resolved_adapt_layers();
        if layers.is_empty() {
            return Err(Error::config("no layer can carry an adapter at this rank"));
        }
        for &l in &layers {
            let Some(&(u, v)) = shapes.get(l) else {
                return Err(Error::config(format!(
                    "adapt layer {l} out of range ({} layers)",
                    shapes.len()
                )));
            };
            if self.lora_rank >= u.min(v) {
                return Err(Error::config(format!(
                    "rank {} must be below min(u, v) = {} on layer {l}",
                    self.lora_rank,
                    u.min(v)
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseModel {
    pub layers: Vec<Linear>,
}

/// One low-rank branch to evaluate: `scale · B · A` on `layer`.
#[derive(Clone, Copy, Debug)]
pub struct Branch<'a> {
    pub layer: usize,
    pub a: &'a Matrix,
    pub b: &'a Matrix,
    pub scale: f64,
}

impl BaseModel {
    /// He-normal weights and zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(u, v)| {
                let std = (2.0 / v as f64).sqrt();
                let data = (0..u * v).map(|_| std * standard_normal(&mut rng)).collect();
                Linear {
                    weight: Matrix::from_vec(u, v, data).expect("finite init"),
                    bias: Matrix::zeros(1, u),
                }
            })
            .collect();
        Ok(BaseModel { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("non-empty").weight.rows()
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.weight.rows())
            .collect()
    }

    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| l.weight.shape()).collect()
    }

    /// Σ u·v + u over all layers.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_branch(&self, br_layer: usize, a: &Matrix, b: &Matrix) -> Result<()> {
        let Some(layer) = self.layers.get(br_layer) else {
            return Err(Error::config(format!(
                "adapter layer index {br_layer} out of range ({} layers)",
                self.layers.len()
            )));
        };
        let (u, v) = layer.weight.shape();
        if a.cols() != v || b.rows() != u || b.cols() != a.rows() {
            return Err(Error::Dimension {
                op: "lora branch",
                left: b.shape(),
                right: a.shape(),
            });
        }
        Ok(())
    }

    /// Logits for a batch, with the given branches added to their layers.
    pub fn forward(&self, x: &Matrix, branches: &[Branch<'_>]) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::Dimension {
                op: "forward",
                left: x.shape(),
                right: self.layers[0].weight.shape(),
            });
        }
        for br in branches {
            self.check_branch(br.layer, br.a, br.b)?;
        }
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.matmul_t(&layer.weight)?.add_row(&layer.bias)?;
            for br in branches.iter().filter(|br| br.layer == i) {
                let proj = h.matmul_t(br.a)?;
                let delta = proj.matmul_t(&br.b.scale(br.scale))?;
                z = z.add(&delta)?;
            }
            h = if i == last { z } else { relu(&z) };
        }
        Ok(h)
    }

    /// Pre-activation output of one layer given that layer's input.
    pub fn layer_preactivation(&self, layer: usize, h: &Matrix, branches: &[Branch<'_>]) -> Result<Matrix> {
        let lin = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::config(format!("layer {layer} out of range")))?;
        let mut z = h.matmul_t(&lin.weight)?.add_row(&lin.bias)?;
        for br in branches.iter().filter(|br| br.layer == layer) {
            self.check_branch(br.layer, br.a, br.b)?;
            let proj = h.matmul_t(br.a)?;
            z = z.add(&proj.matmul_t(&br.b.scale(br.scale))?)?;
        }
        Ok(z)
    }

    /// Puts every weight and bias on the tape.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> BaseVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (tape.param(l.weight.clone()), tape.param(l.bias.clone()))
                } else {
                    (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
                }
            })
            .collect();
        BaseVars { layers }
    }

    /// Differentiable counterpart of [`BaseModel::forward`]; runs the same
    /// kernels in the same order, so values match bit for bit.
    pub fn forward_tape(&self, tape: &mut Tape, vars: &BaseVars, branches: &[TapeBranch], x: Var) -> Result<Var> {
        for br in branches {
            self.check_branch(br.layer, tape.value(br.a), tape.value(br.b))?;
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in vars.layers.iter().enumerate() {
            let z = tape.matmul_t(h, w)?;
            let mut z = tape.add_row(z, b)?;
            for br in branches.iter().filter(|br| br.layer == i) {
                let proj = tape.matmul_t(h, br.a)?;
                let delta = tape.matmul_t(proj, br.b)?;
                z = tape.add(z, delta)?;
            }
            h = if i == last { z } else { tape.relu(z) };
        }
        Ok(h)
    }

    /// Copies trained values back out of a tape after an update.
    pub fn set_params(&mut self, params: &[(Matrix, Matrix)]) {
        for (layer, (w, b)) in self.layers.iter_mut().zip(params) {
            layer.weight = w.clone();
            layer.bias = b.clone();
        }
    }
}

#[derive(Clone, Debug)]
pub struct BaseVars {
    pub layers: Vec<(Var, Var)>,
}

#[derive(Clone, Copy, Debug)]
pub struct TapeBranch {
    pub layer: usize,
    pub a: Var,
    pub b: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer {
    pub layer: usize,
    /// `r × v` projection.
    pub a: Matrix,
    /// `u × r` decoder.
    pub b: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub seed: u64,
    pub train_mode: TrainMode,
    /// Sorted by layer index.
    pub layers: Vec<LoraLayer>,
}

impl LoraAdapter {
    /// Fresh adapter: B is all zeros, A is drawn from the seed in ascending
    /// layer order, row-major, one standard normal per entry.
    pub fn new(base: &BaseModel, rank: usize, seed: u64, layers: &[usize], train_mode: TrainMode) -> Result<Self> {
        let mut sorted = layers.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let shapes = base.layer_shapes();
        let mut rng = seeded(seed);
        let mut out = Vec::with_capacity(sorted.len());
        for l in sorted {
            let &(u, v) = shapes.get(l).ok_or_else(|| {
                Error::config(format!(
                    "adapter layer index {l} out of range ({} layers)",
                    shapes.len()
                ))
            })?;
            if rank == 0 || rank >= u.min(v) {
                return Err(Error::config(format!(
                    "rank {rank} must satisfy 1 <= r < min(u, v) = {} on layer {l}",
                    u.min(v)
                )));
            }
            out.push(LoraLayer {
                layer: l,
                a: gaussian_matrix(&mut rng, rank, v),
                b: Matrix::zeros(u, rank),
            });
        }
        Ok(LoraAdapter {
            rank,
            seed,
            train_mode,
            layers: out,
        })
    }

    pub fn from_config(base: &BaseModel, config: &ModelConfig) -> Result<Self> {
        LoraAdapter::new(
            base,
            config.lora_rank,
            config.lora_seed,
            &config.resolved_adapt_layers(),
            config.train_mode,
        )
    }

    pub fn branches(&self, scale: f64) -> Vec<Branch<'_>> {
        self.layers
            .iter()
            .map(|l| Branch {
                layer: l.layer,
                a: &l.a,
                b: &l.b,
                scale,
            })
            .collect()
    }

    /// Registers A and B on the tape, marking them trainable per the mode.
    pub fn register(&self, tape: &mut Tape) -> Vec<TapeBranch> {
        self.layers
            .iter()
            .map(|l| {
                let a = match self.train_mode {
                    TrainMode::BOnly => tape.constant(l.a.clone()),
                    TrainMode::AAndB => tape.param(l.a.clone()),
                };
                let b = tape.param(l.b.clone());
                TapeBranch { layer: l.layer, a, b }
            })
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(|l| l.b.data().iter().all(|&v| v == 0.0))
    }
}

/// Counts of what a LoRA phase trains.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainableSummary {
    /// `(layer, "A" | "B")` for every trainable matrix.
    pub matrices: Vec<(usize, &'static str)>,
    pub count: usize,
    pub base_count: usize,
    pub ratio: f64,
}

/// The base is always frozen during LoRA phases.
pub fn trainable_parameters(base: &BaseModel, adapter: &LoraAdapter, mode: TrainMode) -> TrainableSummary {
    let mut matrices = Vec::new();
    let mut count = 0;
    for l in &adapter.layers {
        if mode == TrainMode::AAndB {
            matrices.push((l.layer, "A"));
            count += l.a.len();
        }
        matrices.push((l.layer, "B"));
        count += l.b.len();
    }
    let base_count = base.param_count();
    TrainableSummary {
        matrices,
        count,
        base_count,
        ratio: count as f64 / base_count as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            input_dim: 16,
            hidden_dims: vec![32],
            num_classes: 3,
            lora_rank: 4,
            lora_seed: 9,
            adapt_layers: Some(vec![0]),
            train_mode: TrainMode::BOnly,
        }
    }

    #[test]
    fn hand_evaluated_branch() {
        let base = BaseModel {
            layers: vec![Linear {
                weight: Matrix::identity(2),
                bias: Matrix::zeros(1, 2),
            }],
        };
        let a = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let x = Matrix::row_vector(&[3.0, 5.0]).unwrap();
        let z = base
            .forward(
                &x,
                &[Branch {
                    layer: 0,
                    a: &a,
                    b: &b,
                    scale: 1.0,
                }],
            )
            .unwrap();
        assert_eq!(z.data(), &[6.0, 5.0]);
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let cfg = ModelConfig::default();
        let base = BaseModel::init(&cfg, 1).unwrap();
        let adapter = LoraAdapter::from_config(&base, &cfg).unwrap();
        assert!(adapter.is_zero());
        let x = gaussian_matrix(&mut seeded(2), 256, cfg.input_dim);
        let plain = base.forward(&x, &[]).unwrap();
        let adapted = base.forward(&x, &adapter.branches(1.0)).unwrap();
        assert!(plain.bit_eq(&adapted));
    }

    #[test]
    fn doubling_b_doubles_the_branch_contribution() {
        let cfg = toy_config();
        let base = BaseModel::init(&cfg, 3).unwrap();
        let mut adapter = LoraAdapter::from_config(&base, &cfg).unwrap();
        adapter.layers[0].b = gaussian_matrix(&mut seeded(4), 32, 4);
        let x = gaussian_matrix(&mut seeded(5), 7, 16);
        let z0 = base.layer_preactivation(0, &x, &[]).unwrap();
        let z1 = base.layer_preactivation(0, &x, &adapter.branches(1.0)).unwrap();
        let z2 = base.layer_preactivation(0, &x, &adapter.branches(2.0)).unwrap();
        let d1 = z1.sub(&z0).unwrap().scale(2.0);
        let d2 = z2.sub(&z0).unwrap();
        assert!(d1.sub(&d2).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn equal_seed_equal_projection() {
        let cfg = toy_config();
        let base = BaseModel::init(&cfg, 3).unwrap();
        let a1 = LoraAdapter::from_config(&base, &cfg).unwrap();
        let a2 = LoraAdapter::from_config(&base, &cfg).unwrap();
        assert!(a1.layers[0].a.bit_eq(&a2.layers[0].a));
    }

    #[test]
    fn parameter_counts() {
        let cfg = toy_config();
        let base = BaseModel::init(&cfg, 3).unwrap();
        let adapter = LoraAdapter::from_config(&base, &cfg).unwrap();
        let b_only = trainable_parameters(&base, &adapter, TrainMode::BOnly);
        assert_eq!(b_only.count, 128);
        let ab = trainable_parameters(&base, &adapter, TrainMode::AAndB);
        assert_eq!(ab.count, 192);
        let base_count = 32 * 16 + 32 + 3 * 32 + 3;
        assert_eq!(b_only.base_count, base_count);
        assert_eq!(b_only.ratio, 128.0 / base_count as f64);
        assert_eq!(b_only.matrices, vec![(0, "B")]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = toy_config();
        cfg.lora_rank = 16;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = toy_config();
        cfg.adapt_layers = Some(vec![5]);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        // Default picks only hidden layers wide enough for the rank.
        let narrow = ModelConfig {
            input_dim: 2,
            ..ModelConfig::default()
        };
        assert_eq!(narrow.resolved_adapt_layers(), vec![1]);
        assert_eq!(ModelConfig::default().resolved_adapt_layers(), vec![0, 1]);
    }

    #[test]
    fn out_of_range_branch_is_config_error() {
        let cfg = toy_config();
        let base = BaseModel::init(&cfg, 3).unwrap();
        let a = Matrix::zeros(1, 16);
        let b = Matrix::zeros(32, 1);
        let x = Matrix::zeros(1, 16);
        let err = base
            .forward(
                &x,
                &[Branch {
                    layer: 7,
                    a: &a,
                    b: &b,
                    scale: 1.0,
                }],
            )
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = base.forward(&Matrix::zeros(1, 3), &[]).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let cfg = toy_config();
        let base = BaseModel::init(&cfg, 3).unwrap();
        let mut adapter = LoraAdapter::from_config(&base, &cfg).unwrap();
        adapter.layers[0].b = gaussian_matrix(&mut seeded(8), 32, 4);
        let x = gaussian_matrix(&mut seeded(5), 9, 16);
        let mut tape = Tape::new();
        let vars = base.register(&mut tape, false);
        let br = adapter.register(&mut tape);
        let xv = tape.constant(x.clone());
        let out = base.forward_tape(&mut tape, &vars, &br, xv).unwrap();
        let plain = base.forward(&x, &adapter.branches(1.0)).unwrap();
        assert!(tape.value(out).bit_eq(&plain));
    }
}
