//! On-disk checkpoints (`trustlora-ckpt-1`) and LoRA vectors
//! (`trustlora-vec-1`).
//!
//! A checkpoint stores the base weights followed by every applied vector's
//! factors. Vectors whose projection came straight from the seeded generator
//! store only `{seed, B}`; A is regenerated on load.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arithmetic::{ComposedModel, LoraVector};
use crate::container::{read_container, write_container, ArrayCursor};
use crate::error::{Error, LoadError, Result};
use crate::model::{BaseModel, Linear, LoraAdapter, LoraLayer, TrainMode};
use crate::objectives::Objective;
use crate::rng::PROJECTION_RNG;
use crate::tensor::Matrix;

pub const CHECKPOINT_FORMAT: &str = "trustlora-ckpt-1";
pub const VECTOR_FORMAT: &str = "trustlora-vec-1";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// `base`, `lora`, `merge`, `negate`, ...
    pub kind: String,
    pub objective: Option<Objective>,
    /// Ids of the artifacts this one was built from.
    pub parents: Vec<String>,
    pub alphas: Vec<f64>,
    pub config_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum AStorage {
    Seed,
    Explicit,
}

#[derive(Serialize, Deserialize)]
struct AdapterEntry {
    vector_id: String,
    coefficient: f64,
    /// Contributions summing to `coefficient`, in application order.
    parts: Vec<f64>,
    objective: Option<Objective>,
    source: String,
    rank: usize,
    seed: Option<u64>,
    train_mode: TrainMode,
    a_storage: AStorage,
    layers: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    id: String,
    architecture: Architecture,
    projection_rng: String,
    adapters: Vec<AdapterEntry>,
    provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ComposedModel,
    pub provenance: Provenance,
}

/// Content hash of a composed model: architecture, base weights and the
/// active `(vector id, coefficient)` terms. Provenance is not part of it.
pub fn model_id(model: &ComposedModel) -> String {
    let mut h = Sha256::new();
    h.update(b"trustlora-model");
    for layer in &model.base.layers {
        for m in [&layer.weight, &layer.bias] {
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for v in m.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    for t in model.terms() {
        h.update(t.vector.id.as_bytes());
        h.update(t.coefficient.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn architecture(base: &BaseModel) -> Architecture {
    Architecture {
        input_dim: base.input_dim(),
        hidden_dims: base.hidden_dims(),
        num_classes: base.num_classes(),
    }
}

/// Whether `vector`'s projections equal the ones its seed regenerates.
fn seed_reproduces(base: &BaseModel, vector: &LoraVector) -> bool {
    let Some(seed) = vector.seed else {
        return false;
    };
    let layers: Vec<usize> = vector.layers.iter().map(|l| l.layer).collect();
    match LoraAdapter::new(base, vector.rank, seed, &layers, vector.train_mode) {
        Ok(fresh) => fresh.layers.iter().zip(&vector.layers).all(|(f, v)| f.a.bit_eq(&v.a)),
        Err(_) => false,
    }
}

impl Checkpoint {
    pub fn new(model: ComposedModel, provenance: Provenance) -> Self {
        Checkpoint { model, provenance }
    }

    pub fn base(base: BaseModel, provenance: Provenance) -> Self {
        Checkpoint {
            model: ComposedModel::new(base),
            provenance,
        }
    }

    pub fn id(&self) -> String {
        model_id(&self.model)
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.model.forward(x)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let base = &self.model.base;
        let mut arrays: Vec<(String, &Matrix)> = Vec::new();
        for (i, layer) in base.layers.iter().enumerate() {
            arrays.push((format!("layer{i}.weight"), &layer.weight));
            arrays.push((format!("layer{i}.bias"), &layer.bias));
        }
        let mut adapters = Vec::new();
        for (j, term) in self.model.terms().iter().enumerate() {
            let v = &term.vector;
            let storage = if seed_reproduces(base, v) {
                AStorage::Seed
            } else {
                AStorage::Explicit
            };
            for l in &v.layers {
                arrays.push((format!("adapter{j}.layer{}.B", l.layer), &l.b));
                if storage == AStorage::Explicit {
                    arrays.push((format!("adapter{j}.layer{}.A", l.layer), &l.a));
                }
            }
            adapters.push(AdapterEntry {
                vector_id: v.id.clone(),
                coefficient: term.coefficient,
                parts: term.parts().to_vec(),
                objective: v.objective,
                source: v.source.clone(),
                rank: v.rank,
                seed: v.seed,
                train_mode: v.train_mode,
                a_storage: storage,
                layers: v.layers.iter().map(|l| l.layer).collect(),
            });
        }
        let manifest = CheckpointManifest {
            id: self.id(),
            architecture: architecture(base),
            projection_rng: PROJECTION_RNG.to_string(),
            adapters,
            provenance: self.provenance.clone(),
        };
        write_container(dir, CHECKPOINT_FORMAT, &manifest, &arrays)
    }

    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let (manifest, arrays): (CheckpointManifest, _) = read_container(dir, CHECKPOINT_FORMAT)?;
        if manifest.projection_rng != PROJECTION_RNG {
            return Err(LoadError::ManifestMismatch {
                field: "projection_rng".into(),
                expected: PROJECTION_RNG.into(),
                found: manifest.projection_rng,
            }
            .into());
        }
        let arch = &manifest.architecture;
        let mut dims = vec![arch.input_dim];
        dims.extend(&arch.hidden_dims);
        dims.push(arch.num_classes);
        let n_layers = dims.len() - 1;
        let mut cursor = ArrayCursor::new(arrays);
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let weight = cursor.take(&format!("layer{i}.weight"), None, "architecture")?;
            let (u, v) = (dims[i + 1], dims[i]);
            if weight.cols() != v {
                let field = if i == 0 { "input_dim" } else { "hidden_dims" };
                return Err(mismatch(field, v, weight.cols()));
            }
            if weight.rows() != u {
                let field = if i == n_layers - 1 {
                    "num_classes"
                } else {
                    "hidden_dims"
                };
                return Err(mismatch(field, u, weight.rows()));
            }
            let bias = cursor.take(&format!("layer{i}.bias"), Some((1, u)), "architecture")?;
            layers.push(Linear { weight, bias });
        }
        let base = BaseModel { layers };
        let mut model = ComposedModel::new(base.clone());
        for (j, entry) in manifest.adapters.iter().enumerate() {
            let regenerated = match entry.a_storage {
                AStorage::Seed => {
                    let seed = entry
                        .seed
                        .ok_or_else(|| LoadError::Malformed(format!("adapter {j} stores A by seed but has no seed")))?;
                    Some(LoraAdapter::new(
                        &base,
                        entry.rank,
                        seed,
                        &entry.layers,
                        entry.train_mode,
                    )?)
                }
                AStorage::Explicit => None,
            };
            let mut vlayers = Vec::with_capacity(entry.layers.len());
            for (k, &l) in entry.layers.iter().enumerate() {
                let (u, _) = base
                    .layer_shapes()
                    .get(l)
                    .copied()
                    .ok_or_else(|| mismatch(&format!("adapters[{j}].layers"), n_layers, l))?;
                let b = cursor.take(&format!("adapter{j}.layer{l}.B"), None, "adapters")?;
                if b.rows() != u {
                    return Err(mismatch(&format!("adapters[{j}].layers"), u, b.rows()));
                }
                let a = match &regenerated {
                    Some(fresh) => fresh.layers[k].a.clone(),
                    None => cursor.take(&format!("adapter{j}.layer{l}.A"), None, "adapters")?,
                };
                vlayers.push(LoraLayer { layer: l, a, b });
            }
            let vector = LoraVector::new(
                vlayers,
                entry.rank,
                entry.seed,
                entry.train_mode,
                entry.objective,
                entry.source.clone(),
            );
            if vector.id != entry.vector_id {
                return Err(LoadError::ManifestMismatch {
                    field: format!("adapters[{j}].vector_id"),
                    expected: entry.vector_id.clone(),
                    found: vector.id,
                }
                .into());
            }
            if entry.parts.is_empty() || entry.parts.contains(&0.0) {
                return Err(LoadError::Malformed(format!("adapter {j} has no nonzero contributions")).into());
            }
            for &part in &entry.parts {
                model = model.with_vector(&vector, part)?;
            }
            let applied = model
                .terms()
                .iter()
                .find(|t| t.vector.id == vector.id)
                .map(|t| t.coefficient);
            if applied.map(f64::to_bits) != Some(entry.coefficient.to_bits()) {
                return Err(mismatch(
                    &format!("adapters[{j}].coefficient"),
                    entry.coefficient,
                    applied.map_or("none".to_string(), |c| c.to_string()),
                ));
            }
        }
        cursor.finish()?;
        let ckpt = Checkpoint {
            model,
            provenance: manifest.provenance,
        };
        let id = ckpt.id();
        if id != manifest.id {
            return Err(LoadError::ManifestMismatch {
                field: "id".into(),
                expected: manifest.id,
                found: id,
            }
            .into());
        }
        Ok(ckpt)
    }
}

fn mismatch(field: &str, expected: impl ToString, found: impl ToString) -> Error {
    LoadError::ManifestMismatch {
        field: field.to_string(),
        expected: expected.to_string(),
        found: found.to_string(),
    }
    .into()
}

#[derive(Serialize, Deserialize)]
struct VectorManifest {
    id: String,
    objective: Option<Objective>,
    source: String,
    rank: usize,
    seed: Option<u64>,
    train_mode: TrainMode,
    layers: Vec<usize>,
    element_count: usize,
    provenance: Provenance,
}

pub fn save_vector(dir: &Path, vector: &LoraVector, provenance: &Provenance) -> Result<()> {
    let mut arrays: Vec<(String, &Matrix)> = Vec::new();
    for l in &vector.layers {
        arrays.push((format!("layer{}.B", l.layer), &l.b));
        arrays.push((format!("layer{}.A", l.layer), &l.a));
    }
    let manifest = VectorManifest {
        id: vector.id.clone(),
        objective: vector.objective,
        source: vector.source.clone(),
        rank: vector.rank,
        seed: vector.seed,
        train_mode: vector.train_mode,
        layers: vector.layers.iter().map(|l| l.layer).collect(),
        element_count: vector.element_count(),
        provenance: provenance.clone(),
    };
    write_container(dir, VECTOR_FORMAT, &manifest, &arrays)
}

pub fn load_vector(dir: &Path) -> Result<(LoraVector, Provenance)> {
    let (manifest, arrays): (VectorManifest, _) = read_container(dir, VECTOR_FORMAT)?;
    let mut cursor = ArrayCursor::new(arrays);
    let mut layers = Vec::new();
    for &l in &manifest.layers {
        let b = cursor.take(&format!("layer{l}.B"), None, "layers")?;
        let a = cursor.take(&format!("layer{l}.A"), None, "layers")?;
        if b.cols() != a.rows() {
            return Err(mismatch("rank", b.cols(), a.rows()));
        }
        layers.push(LoraLayer { layer: l, a, b });
    }
    cursor.finish()?;
    let vector = LoraVector::new(
        layers,
        manifest.rank,
        manifest.seed,
        manifest.train_mode,
        manifest.objective,
        manifest.source,
    );
    if vector.id != manifest.id {
        return Err(mismatch("id", manifest.id, vector.id));
    }
    Ok((vector, manifest.provenance))
}
