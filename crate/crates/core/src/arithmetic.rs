//! LoRA vectors and the arithmetic that combines them.
//!
//! A [`LoraVector`] is the weight delta `ΔW = B·A` a fine-tuning phase induced
//! on each adapted layer, kept in factored form. Vectors are combined in ΔW
//! space: a [`ComposedModel`] is a frozen base plus a list of
//! `(coefficient, vector)` terms and evaluates `W + Σ cᵢ·Bᵢ·Aᵢ` without ever
//! materializing the sum. Scaling a term scales its B only.
//!
//! Terms are kept canonical: one entry per vector id, sorted by id. Each term
//! remembers the individual contributions that make up its coefficient, and
//! adding the exact negation of an earlier contribution removes it instead
//! of summing. Add-then-negate therefore restores any model bit for bit, not
//! only the bare base, and a term with no contributions left is dropped.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{BaseModel, Branch, LoraAdapter, LoraLayer, TrainMode};
use crate::objectives::Objective;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct LoraVector {
    /// Content hash of the factored arrays.
    pub id: String,
    pub objective: Option<Objective>,
    /// Id of the checkpoint the vector was extracted from.
    pub source: String,
    pub rank: usize,
    /// Set when every A equals the projection regenerated from this seed.
    pub seed: Option<u64>,
    pub train_mode: TrainMode,
    /// Factored deltas sorted by layer: `b` is `u×k`, `a` is `k×v`.
    pub layers: Vec<LoraLayer>,
}

fn vector_id(layers: &[LoraLayer]) -> String {
    let mut h = Sha256::new();
    for l in layers {
        h.update((l.layer as u64).to_le_bytes());
        for m in [&l.b, &l.a] {
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for v in m.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

impl LoraVector {
    pub fn new(
        mut layers: Vec<LoraLayer>,
        rank: usize,
        seed: Option<u64>,
        train_mode: TrainMode,
        objective: Option<Objective>,
        source: impl Into<String>,
    ) -> Self {
        layers.sort_by_key(|l| l.layer);
        LoraVector {
            id: vector_id(&layers),
            objective,
            source: source.into(),
            rank,
            seed,
            train_mode,
            layers,
        }
    }

    /// The delta of an adapter trained from its fresh (B = 0) state.
    pub fn from_adapter(adapter: &LoraAdapter, objective: Option<Objective>, source: impl Into<String>) -> Self {
        let seed = (adapter.train_mode == TrainMode::BOnly).then_some(adapter.seed);
        LoraVector::new(
            adapter.layers.clone(),
            adapter.rank,
            seed,
            adapter.train_mode,
            objective,
            source,
        )
    }

    /// Factored element count `m`.
    pub fn element_count(&self) -> usize {
        self.layers.iter().map(|l| l.a.len() + l.b.len()).sum()
    }

    /// Dense `B·A` for one layer.
    pub fn dense(&self, layer: usize) -> Result<Option<Matrix>> {
        self.layers
            .iter()
            .find(|l| l.layer == layer)
            .map(|l| l.b.matmul(&l.a))
            .transpose()
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(|l| l.b.data().iter().all(|&v| v == 0.0))
    }

    pub fn check_compatible(&self, base: &BaseModel) -> Result<()> {
        let shapes = base.layer_shapes();
        for l in &self.layers {
            let Some(&(u, v)) = shapes.get(l.layer) else {
                return Err(Error::contract(format!(
                    "vector {} targets layer {} but the base has {} layers",
                    short(&self.id),
                    l.layer,
                    shapes.len()
                )));
            };
            if l.b.rows() != u || l.a.cols() != v || l.b.cols() != l.a.rows() {
                return Err(Error::contract(format!(
                    "vector {} layer {}: factors {:?}·{:?} do not fit weight {u}x{v}",
                    short(&self.id),
                    l.layer,
                    l.b.shape(),
                    l.a.shape()
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn short(id: &str) -> &str {
    &id[..id.len().min(12)]
}

/// The delta between two states of one adapter:
/// `ΔW = B_after·A_after − B_before·A_before`, kept factored.
pub fn extract_vector(
    before: &LoraAdapter,
    after: &LoraAdapter,
    objective: Option<Objective>,
    source: impl Into<String>,
) -> Result<LoraVector> {
    if before.layers.len() != after.layers.len() {
        return Err(Error::contract("adapter states cover different layer sets"));
    }
    let b_only = before.train_mode == TrainMode::BOnly || after.train_mode == TrainMode::BOnly;
    let mut layers = Vec::with_capacity(after.layers.len());
    let mut all_same_a = true;
    for (pre, post) in before.layers.iter().zip(&after.layers) {
        if pre.layer != post.layer || pre.a.shape() != post.a.shape() || pre.b.shape() != post.b.shape() {
            return Err(Error::contract(format!(
                "adapter states disagree on layer {} shapes",
                post.layer
            )));
        }
        let same_a = pre.a.bit_eq(&post.a);
        all_same_a &= same_a;
        if b_only && !same_a {
            return Err(Error::contract(format!(
                "B-only adapter states have different A on layer {}",
                post.layer
            )));
        }
        let pre_zero = pre.b.data().iter().all(|&v| v == 0.0);
        let layer = if same_a {
            LoraLayer {
                layer: post.layer,
                a: post.a.clone(),
                b: post.b.sub(&pre.b)?,
            }
        } else if pre_zero {
            post.clone()
        } else {
            // [B_after | -B_before] · [A_after ; A_before]
            let (u, r) = post.b.shape();
            let mut b = Matrix::zeros(u, 2 * r);
            for i in 0..u {
                for j in 0..r {
                    b.set(i, j, post.b.get(i, j));
                    b.set(i, r + j, -pre.b.get(i, j));
                }
            }
            LoraLayer {
                layer: post.layer,
                a: Matrix::vstack(&[&post.a, &pre.a])?,
                b,
            }
        };
        layers.push(layer);
    }
    let seed = (all_same_a && after.train_mode == TrainMode::BOnly && before.seed == after.seed).then_some(after.seed);
    let rank = layers.iter().map(|l| l.a.rows()).max().unwrap_or(after.rank);
    Ok(LoraVector::new(layers, rank, seed, after.train_mode, objective, source))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AppliedVector {
    /// Sum of `parts`, taken in ascending order.
    pub coefficient: f64,
    pub vector: LoraVector,
    parts: Vec<f64>,
}

impl AppliedVector {
    /// Nonzero contributions in the order they were applied.
    pub fn parts(&self) -> &[f64] {
        &self.parts
    }
}

fn ordered_sum(parts: &[f64]) -> f64 {
    let mut sorted = parts.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum()
}

/// A frozen base plus scaled LoRA vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ComposedModel {
    pub base: BaseModel,
    terms: Vec<AppliedVector>,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::contract(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

impl ComposedModel {
    pub fn new(base: BaseModel) -> Self {
        ComposedModel {
            base,
            terms: Vec::new(),
        }
    }

    pub fn terms(&self) -> &[AppliedVector] {
        &self.terms
    }

    /// Adds `coefficient · vector`, returning a new model.
    pub fn with_vector(&self, vector: &LoraVector, coefficient: f64) -> Result<ComposedModel> {
        if !coefficient.is_finite() {
            return Err(Error::contract("non-finite vector coefficient"));
        }
        vector.check_compatible(&self.base)?;
        let mut terms = self.terms.clone();
        if coefficient == 0.0 {
            return Ok(ComposedModel {
                base: self.base.clone(),
                terms,
            });
        }
        match terms.iter().position(|t| t.vector.id == vector.id) {
            Some(i) => {
                let parts = &mut terms[i].parts;
                match parts.iter().rposition(|&p| p == -coefficient) {
                    Some(j) => {
                        parts.remove(j);
                    }
                    None => parts.push(coefficient),
                }
                if parts.is_empty() {
                    terms.remove(i);
                } else {
                    terms[i].coefficient = ordered_sum(&terms[i].parts);
                }
            }
            None => {
                let at = terms.partition_point(|t| t.vector.id < vector.id);
                terms.insert(
                    at,
                    AppliedVector {
                        coefficient,
                        vector: vector.clone(),
                        parts: vec![coefficient],
                    },
                );
            }
        }
        Ok(ComposedModel {
            base: self.base.clone(),
            terms,
        })
    }

    pub fn branches(&self) -> Vec<Branch<'_>> {
        self.terms
            .iter()
            .flat_map(|t| {
                t.vector.layers.iter().map(move |l| Branch {
                    layer: l.layer,
                    a: &l.a,
                    b: &l.b,
                    scale: t.coefficient,
                })
            })
            .collect()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.base.forward(x, &self.branches())
    }

    /// `W + Σ cᵢ·Bᵢ·Aᵢ` for every layer, as dense matrices.
    pub fn effective_weights(&self) -> Result<Vec<Matrix>> {
        let mut out: Vec<Matrix> = self.base.layers.iter().map(|l| l.weight.clone()).collect();
        for t in &self.terms {
            for l in &t.vector.layers {
                let delta = l.b.matmul(&l.a)?.scale(t.coefficient);
                out[l.layer].add_assign(&delta)?;
            }
        }
        Ok(out)
    }

    /// The base with the dense effective weights written in.
    pub fn materialize(&self) -> Result<BaseModel> {
        let mut base = self.base.clone();
        for (layer, w) in base.layers.iter_mut().zip(self.effective_weights()?) {
            layer.weight = w;
        }
        Ok(base)
    }

    /// `(vector id, coefficient)` for every active term.
    pub fn net_vector(&self) -> Vec<(String, f64)> {
        self.terms
            .iter()
            .map(|t| (t.vector.id.clone(), t.coefficient))
            .collect()
    }

    /// Subtracts every active term, leaving the bare base.
    pub fn without_net_vector(&self) -> Result<ComposedModel> {
        let mut out = self.clone();
        for t in &self.terms {
            out = out.with_vector(&t.vector, -t.coefficient)?;
        }
        Ok(out)
    }
}

/// `θ_pre + (1−α)·τ_cov + α·τ_sem`, as a new model.
pub fn merge_add(
    base: &ComposedModel,
    tau_cov: &LoraVector,
    tau_sem: &LoraVector,
    alpha: f64,
) -> Result<ComposedModel> {
    check_alpha(alpha)?;
    base.with_vector(tau_cov, 1.0 - alpha)?.with_vector(tau_sem, alpha)
}

/// `θ − α·τ`, as a new model.
pub fn merge_negate(model: &ComposedModel, tau: &LoraVector, alpha: f64) -> Result<ComposedModel> {
    check_alpha(alpha)?;
    model.with_vector(tau, -alpha)
}
