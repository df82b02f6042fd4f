//! Training objectives for the reliability adapters.
//!
//! * covariate: `CE(f(x), y) + λ · JS(f(x); f(x₁); f(x₂))` over two stochastic
//!   augmentations of each sample;
//! * semantic: `CE(f(x), y) + λ · KL(f(x_aux) ‖ U[K])` over auxiliary outliers.
//!
//! Every batch term is an arithmetic mean and probabilities are floored at
//! [`crate::autodiff::PROB_FLOOR`] before logarithms.

use serde::{Deserialize, Serialize};

use crate::autodiff::{kl_div, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{BaseModel, BaseVars, LoraAdapter, TapeBranch};
use crate::rng::SeededRng;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum Objective {
    #[serde(rename = "base-ce")]
    BaseCe,
    #[serde(rename = "cov-augmix")]
    CovAugmix,
    #[serde(rename = "sem-oe")]
    SemOe,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::BaseCe => "base-ce",
            Objective::CovAugmix => "cov-augmix",
            Objective::SemOe => "sem-oe",
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub lambda_cov: f64,
    pub lambda_sem: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            lambda_cov: 12.0,
            lambda_sem: 0.5,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_cov > 0.0 && self.lambda_sem > 0.0) {
            return Err(Error::config("lambda_cov and lambda_sem must be strictly positive"));
        }
        Ok(())
    }
}

/// Produces stochastic variants of a batch.
pub trait Augmenter {
    fn augment(&self, x: &Matrix, rng: &mut SeededRng) -> Result<Matrix>;
}

/// Returns the batch unchanged.
pub struct IdentityAugmenter;

impl Augmenter for IdentityAugmenter {
    fn augment(&self, x: &Matrix, _rng: &mut SeededRng) -> Result<Matrix> {
        Ok(x.clone())
    }
}

/// `(a + b + c) / 3`, arranged so that three equal inputs return `a` exactly.
fn mixture(a: f64, b: f64, c: f64) -> f64 {
    a + ((b + c) + a * -2.0) * (1.0 / 3.0)
}

/// Three-way Jensen–Shannon consistency: the mean of `KL(pᵢ ‖ p̄)` with
/// `p̄ = (p₀ + p₁ + p₂) / 3`.
pub fn js_consistency(p0: &[f64], p1: &[f64], p2: &[f64]) -> Result<f64> {
    if p0.len() != p1.len() || p0.len() != p2.len() {
        return Err(Error::Dimension {
            op: "js_consistency",
            left: (p0.len(), p1.len()),
            right: (p2.len(), p0.len()),
        });
    }
    let mix: Vec<f64> = (0..p0.len()).map(|i| mixture(p0[i], p1[i], p2[i])).collect();
    Ok((kl_div(p0, &mix)? + kl_div(p1, &mix)? + kl_div(p2, &mix)?) / 3.0)
}

/// Batch-mean JS term on the tape.
pub fn js_on_tape(tape: &mut Tape, p0: Var, p1: Var, p2: Var) -> Result<Var> {
    let s = tape.add(p1, p2)?;
    let twice = tape.scale(p0, -2.0);
    let s = tape.add(s, twice)?;
    let s = tape.scale(s, 1.0 / 3.0);
    let mix = tape.add(p0, s)?;
    let k0 = tape.kl_rows(p0, mix)?;
    let k1 = tape.kl_rows(p1, mix)?;
    let k2 = tape.kl_rows(p2, mix)?;
    let total = tape.add(k0, k1)?;
    let total = tape.add(total, k2)?;
    Ok(tape.scale(total, 1.0 / 3.0))
}

/// One mini-batch for one objective.
pub enum Batch<'a> {
    Ce {
        x: &'a Matrix,
        labels: &'a [usize],
    },
    Augmix {
        x: &'a Matrix,
        x_aug1: &'a Matrix,
        x_aug2: &'a Matrix,
        labels: &'a [usize],
        lambda: f64,
    },
    Oe {
        x: &'a Matrix,
        labels: &'a [usize],
        x_aux: &'a Matrix,
        lambda: f64,
    },
}

/// Builds the scalar loss for `batch`; returns the loss node and the clean
/// logits node.
pub fn build_loss(
    tape: &mut Tape,
    base: &BaseModel,
    vars: &BaseVars,
    branches: &[TapeBranch],
    batch: &Batch<'_>,
) -> Result<(Var, Var)> {
    let posterior = |tape: &mut Tape, x: &Matrix| -> Result<(Var, Var)> {
        let xv = tape.constant(x.clone());
        let logits = base.forward_tape(tape, vars, branches, xv)?;
        Ok((logits, tape.softmax_rows(logits)?))
    };
    match *batch {
        Batch::Ce { x, labels } => {
            let (logits, p) = posterior(tape, x)?;
            Ok((tape.cross_entropy(p, labels)?, logits))
        }
        Batch::Augmix {
            x,
            x_aug1,
            x_aug2,
            labels,
            lambda,
        } => {
            if x_aug1.shape() != x.shape() || x_aug2.shape() != x.shape() {
                return Err(Error::data("augmenter changed the batch shape"));
            }
            let (logits, p0) = posterior(tape, x)?;
            let (_, p1) = posterior(tape, x_aug1)?;
            let (_, p2) = posterior(tape, x_aug2)?;
            let ce = tape.cross_entropy(p0, labels)?;
            let js = js_on_tape(tape, p0, p1, p2)?;
            let js = tape.scale(js, lambda);
            Ok((tape.add(ce, js)?, logits))
        }
        Batch::Oe {
            x,
            labels,
            x_aux,
            lambda,
        } => {
            if x_aux.rows() == 0 {
                return Err(Error::contract("outlier-exposure needs a non-empty auxiliary batch"));
            }
            let (logits, p) = posterior(tape, x)?;
            let (_, p_aux) = posterior(tape, x_aux)?;
            let k = base.num_classes();
            let uniform = tape.constant(Matrix::filled(x_aux.rows(), k, 1.0 / k as f64));
            let ce = tape.cross_entropy(p, labels)?;
            let kl = tape.kl_rows(p_aux, uniform)?;
            let kl = tape.scale(kl, lambda);
            Ok((tape.add(ce, kl)?, logits))
        }
    }
}

fn evaluate(base: &BaseModel, adapter: Option<&LoraAdapter>, batch: &Batch<'_>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = base.register(&mut tape, false);
    let branches = adapter.map(|a| a.register(&mut tape)).unwrap_or_default();
    let (loss, _) = build_loss(&mut tape, base, &vars, &branches, batch)?;
    Ok(tape.value(loss).get(0, 0))
}

/// Covariate objective value with fresh augmentations drawn from `rng`.
pub fn augmix_objective(
    base: &BaseModel,
    adapter: Option<&LoraAdapter>,
    x: &Matrix,
    labels: &[usize],
    augmenter: &dyn Augmenter,
    rng: &mut SeededRng,
    lambda: f64,
) -> Result<f64> {
    let x_aug1 = augmenter.augment(x, rng)?;
    let x_aug2 = augmenter.augment(x, rng)?;
    evaluate(
        base,
        adapter,
        &Batch::Augmix {
            x,
            x_aug1: &x_aug1,
            x_aug2: &x_aug2,
            labels,
            lambda,
        },
    )
}

/// Semantic objective value.
pub fn oe_objective(
    base: &BaseModel,
    adapter: Option<&LoraAdapter>,
    x: &Matrix,
    labels: &[usize],
    x_aux: &Matrix,
    lambda: f64,
) -> Result<f64> {
    evaluate(
        base,
        adapter,
        &Batch::Oe {
            x,
            labels,
            x_aux,
            lambda,
        },
    )
}

/// Batch-mean JS term alone, for before/after probes.
pub fn js_term(
    base: &BaseModel,
    adapter: Option<&LoraAdapter>,
    x: &Matrix,
    x_aug1: &Matrix,
    x_aug2: &Matrix,
) -> Result<f64> {
    let branches = adapter.map(|a| a.branches(1.0)).unwrap_or_default();
    let p0 = base.forward(x, &branches)?.softmax_rows()?;
    let p1 = base.forward(x_aug1, &branches)?.softmax_rows()?;
    let p2 = base.forward(x_aug2, &branches)?.softmax_rows()?;
    let mut total = 0.0;
    for r in 0..p0.rows() {
        total += js_consistency(p0.row(r), p1.row(r), p2.row(r))?;
    }
    Ok(total / p0.rows().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TrainMode};
    use crate::rng::{gaussian_matrix, seeded};

    #[test]
    fn js_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(js_consistency(&p, &p, &p).unwrap(), 0.0);
        let js = js_consistency(&[1.0, 0.0], &[0.0, 1.0], &[0.5, 0.5]).unwrap();
        assert!((js - 0.462_098_120_373_296_9).abs() < 1e-12);
        assert!(js_consistency(&[1.0], &[0.5, 0.5], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn js_is_symmetric() {
        let (a, b, c) = ([0.7, 0.2, 0.1], [0.1, 0.1, 0.8], [0.3, 0.4, 0.3]);
        let v = js_consistency(&a, &b, &c).unwrap();
        for perm in [(&b, &a, &c), (&c, &b, &a), (&a, &c, &b), (&b, &c, &a), (&c, &a, &b)] {
            assert!((js_consistency(perm.0, perm.1, perm.2).unwrap() - v).abs() < 1e-15);
        }
    }

    fn toy() -> (BaseModel, LoraAdapter, Matrix, Vec<usize>) {
        let cfg = ModelConfig {
            input_dim: 3,
            hidden_dims: vec![8],
            num_classes: 4,
            lora_rank: 2,
            lora_seed: 1,
            adapt_layers: None,
            train_mode: TrainMode::BOnly,
        };
        let base = BaseModel::init(&cfg, 7).unwrap();
        let mut adapter = LoraAdapter::from_config(&base, &cfg).unwrap();
        adapter.layers[0].b = gaussian_matrix(&mut seeded(3), 8, 2).scale(0.3);
        let x = gaussian_matrix(&mut seeded(4), 6, 3);
        (base, adapter, x, vec![0, 1, 2, 3, 0, 1])
    }

    #[test]
    fn identity_augmenter_reduces_to_ce() {
        let (base, adapter, x, y) = toy();
        let mut rng = seeded(0);
        let augmix = augmix_objective(&base, Some(&adapter), &x, &y, &IdentityAugmenter, &mut rng, 12.0).unwrap();
        let ce = evaluate(&base, Some(&adapter), &Batch::Ce { x: &x, labels: &y }).unwrap();
        assert_eq!(augmix, ce);
    }

    #[test]
    fn zero_lambda_reduces_to_ce() {
        let (base, adapter, x, y) = toy();
        let aux = gaussian_matrix(&mut seeded(9), 5, 3).scale(4.0);
        let ce = evaluate(&base, Some(&adapter), &Batch::Ce { x: &x, labels: &y }).unwrap();
        assert_eq!(oe_objective(&base, Some(&adapter), &x, &y, &aux, 0.0).unwrap(), ce);
        let shifted = x.map(|v| v + 0.5);
        let v = evaluate(
            &base,
            Some(&adapter),
            &Batch::Augmix {
                x: &x,
                x_aug1: &shifted,
                x_aug2: &x,
                labels: &y,
                lambda: 0.0,
            },
        )
        .unwrap();
        assert_eq!(v, ce);
    }

    #[test]
    fn objectives_nondecreasing_in_lambda() {
        let (base, adapter, x, y) = toy();
        let aux = gaussian_matrix(&mut seeded(9), 5, 3).scale(4.0);
        let shifted = x.map(|v| v * 1.7);
        let mut prev_oe = f64::NEG_INFINITY;
        let mut prev_js = f64::NEG_INFINITY;
        for lambda in [0.0, 0.1, 0.5, 1.0, 12.0] {
            let oe = oe_objective(&base, Some(&adapter), &x, &y, &aux, lambda).unwrap();
            let js = evaluate(
                &base,
                Some(&adapter),
                &Batch::Augmix {
                    x: &x,
                    x_aug1: &shifted,
                    x_aug2: &x,
                    labels: &y,
                    lambda,
                },
            )
            .unwrap();
            assert!(oe >= prev_oe && js >= prev_js);
            prev_oe = oe;
            prev_js = js;
        }
    }

    #[test]
    fn empty_aux_batch_is_rejected() {
        let (base, adapter, x, y) = toy();
        let err = oe_objective(&base, Some(&adapter), &x, &y, &Matrix::zeros(0, 3), 0.5).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn lambda_validation() {
        assert!(ObjectiveConfig::default().validate().is_ok());
        let bad = ObjectiveConfig {
            lambda_cov: 0.0,
            lambda_sem: 0.5,
        };
        assert!(bad.validate().is_err());
    }
}
