//! Experiment configuration and the end-to-end recipe: data, base model,
//! both adapters, merged and negated models, evaluation cells.

use std::path::Path;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arithmetic::{extract_vector, merge_add, merge_negate, ComposedModel, LoraVector};
use crate::checkpoint::{model_id, Checkpoint, Provenance};
use crate::container::sha256_hex;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_mixture, risk_coverage, scores, FailureReport, RiskCoverageCurve, ScoreKind};
use crate::model::{LoraAdapter, ModelConfig};
use crate::objectives::{Objective, ObjectiveConfig};
use crate::rng::derive_seed;
use crate::trainer::{train_base, train_lora, EpochRecord, LoraRun, TrainConfig};
use crate::wildbench::{
    build_wild_mixture, generate, CorruptionAugmenter, Family, LabeledSet, WildBench, WildBenchConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub families: Vec<Family>,
    pub max_severity: u8,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            families: Family::ALL.to_vec(),
            max_severity: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub score: ScoreKind,
    /// Merge coefficients evaluated besides the two single adapters.
    pub alphas: Vec<f64>,
    /// Coefficient used when negating the semantic vector.
    pub negate_alpha: f64,
    pub equal_counts: bool,
    pub include_clean: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            score: ScoreKind::Msp,
            alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            negate_alpha: 1.0,
            equal_counts: true,
            include_clean: false,
        }
    }
}

/// One experiment. Every seed inside the sub-configurations is replaced by
/// one derived from `seed` (see [`ExperimentConfig::resolved`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Where the command-line stages put their artifacts.
    pub out_dir: String,
    pub data: WildBenchConfig,
    pub model: ModelConfig,
    pub base_train: TrainConfig,
    pub lora_train: TrainConfig,
    pub objectives: ObjectiveConfig,
    pub augment: AugmentConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::reference(0)
    }
}

/// Seeds the recipe derives, by purpose.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub base_init: u64,
    pub mixture: u64,
}

impl ExperimentConfig {
    /// The reference recipe used by the shipped experiments.
    pub fn reference(seed: u64) -> Self {
        ExperimentConfig {
            seed,
            out_dir: "runs".into(),
            data: WildBenchConfig::default(),
            model: ModelConfig::default(),
            base_train: TrainConfig {
                epochs: 20,
                lr_init: 0.05,
                ..TrainConfig::default()
            },
            lora_train: TrainConfig {
                lr_init: 0.003,
                batch_size: 8,
                ..TrainConfig::default()
            },
            objectives: ObjectiveConfig::default(),
            augment: AugmentConfig::default(),
            eval: EvalConfig::default(),
        }
        .resolved()
    }

    /// Copy with every sub-seed derived from the master seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let s = self.seed;
        c.data.seed = derive_seed(s, "data");
        c.model.lora_seed = derive_seed(s, "lora-projection");
        c.base_train.rng_seed = derive_seed(s, "base-train");
        c.lora_train.rng_seed = derive_seed(s, "lora-train");
        c
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            base_init: derive_seed(self.seed, "base-init"),
            mixture: derive_seed(self.seed, "mixture"),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Canonical text form. Sub-seeds are written as zero: they are always
    /// re-derived from the master seed on load, and TOML integers cannot
    /// hold the full u64 range.
    pub fn to_toml(&self) -> String {
        let mut c = self.clone();
        c.data.seed = 0;
        c.model.lora_seed = 0;
        c.base_train.rng_seed = 0;
        c.lora_train.rng_seed = 0;
        toml::to_string(&c).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::config(format!("seed {} exceeds {}", self.seed, i64::MAX)));
        }
        self.data.validate()?;
        self.model.validate()?;
        self.base_train.validate()?;
        self.lora_train.validate()?;
        self.objectives.validate()?;
        if self.model.input_dim != self.data.input_dim || self.model.num_classes != self.data.num_classes {
            return Err(Error::config(format!(
                "model shape {}→{} does not match data {}→{}",
                self.model.input_dim, self.model.num_classes, self.data.input_dim, self.data.num_classes
            )));
        }
        if self.augment.max_severity == 0 || self.augment.max_severity > crate::wildbench::MAX_SEVERITY {
            return Err(Error::config("augment.max_severity must lie in 1..=5"));
        }
        if let Some(a) = self
            .eval
            .alphas
            .iter()
            .chain([&self.eval.negate_alpha])
            .find(|a| !(0.0..=1.0).contains(*a))
        {
            return Err(Error::contract(format!("alpha {a} outside [0, 1]")));
        }
        Ok(())
    }

    /// Hash of the resolved configuration text.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }
}

pub fn provenance(
    kind: &str,
    objective: Option<Objective>,
    parents: Vec<String>,
    alphas: Vec<f64>,
    config_hash: &str,
) -> Provenance {
    Provenance {
        kind: kind.into(),
        objective,
        parents,
        alphas,
        config_hash: Some(config_hash.into()),
    }
}

pub fn run_base(cfg: &ExperimentConfig, bench: &WildBench) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    let (base, records) = train_base(&cfg.model, cfg.seeds().base_init, &cfg.base_train, &bench.id_train)?;
    let prov = provenance("base", Some(Objective::BaseCe), vec![], vec![], &bench.config_hash);
    Ok((Checkpoint::base(base, prov), records))
}

/// Trains one adapter on the frozen base and returns its LoRA vector.
pub fn run_lora(
    cfg: &ExperimentConfig,
    base: &Checkpoint,
    train: &LabeledSet,
    aux: Option<&LabeledSet>,
    objective: Objective,
) -> Result<(LoraVector, Vec<EpochRecord>)> {
    if !base.model.terms().is_empty() {
        return Err(Error::contract("adapters train on a bare base checkpoint"));
    }
    let augmenter = CorruptionAugmenter {
        families: cfg.augment.families.clone(),
        max_severity: cfg.augment.max_severity,
    };
    let run = LoraRun {
        objective,
        objectives: cfg.objectives.clone(),
        rank: cfg.model.lora_rank,
        adapter_seed: cfg.model.lora_seed,
        adapt_layers: cfg.model.resolved_adapt_layers(),
        train_mode: cfg.model.train_mode,
        train,
        aux: aux.map(|a| &a.inputs),
        augmenter: Some(&augmenter),
    };
    let mut train_cfg = cfg.lora_train.clone();
    train_cfg.rng_seed = derive_seed(train_cfg.rng_seed, objective.as_str());
    let base_model = &base.model.base;
    let (trained, records) = train_lora(base_model, &run, &train_cfg)?;
    let fresh = LoraAdapter::new(
        base_model,
        run.rank,
        run.adapter_seed,
        &run.adapt_layers,
        run.train_mode,
    )?;
    let vector = extract_vector(&fresh, &trained, Some(objective), base.id())?;
    Ok((vector, records))
}

/// A named model under evaluation.
#[derive(Clone, Debug)]
pub struct Variant {
    pub name: String,
    pub alpha: Option<f64>,
    pub model: ComposedModel,
}

/// Base, each adapter alone, every merge coefficient, and the semantic
/// adapter model with its own vector negated.
pub fn variants(
    cfg: &ExperimentConfig,
    base: &Checkpoint,
    tau_cov: &LoraVector,
    tau_sem: &LoraVector,
) -> Result<Vec<Variant>> {
    let m = &base.model;
    let sem_model = m.with_vector(tau_sem, 1.0)?;
    let mut out = vec![
        Variant {
            name: "base".into(),
            alpha: None,
            model: m.clone(),
        },
        Variant {
            name: "cov".into(),
            alpha: None,
            model: m.with_vector(tau_cov, 1.0)?,
        },
        Variant {
            name: "sem".into(),
            alpha: None,
            model: sem_model.clone(),
        },
    ];
    for &alpha in &cfg.eval.alphas {
        out.push(Variant {
            name: format!("merge@{alpha}"),
            alpha: Some(alpha),
            model: merge_add(m, tau_cov, tau_sem, alpha)?,
        });
    }
    out.push(Variant {
        name: format!("sem-negate@{}", cfg.eval.negate_alpha),
        alpha: Some(cfg.eval.negate_alpha),
        model: merge_negate(&sem_model, tau_sem, cfg.eval.negate_alpha)?,
    });
    Ok(out)
}

/// One evaluation cell: a model on one shifted test set plus the semantic set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub model: String,
    pub model_id: String,
    pub alpha: Option<f64>,
    pub family: Family,
    pub severity: u8,
    pub equal_counts: bool,
    pub include_clean: bool,
    pub config_hash: String,
    pub report: FailureReport,
    /// Risk-coverage curve on a coverage grid of step 0.01, for plotting.
    #[serde(default)]
    pub curve: Vec<(f64, f64)>,
}

/// Risk at the first point reaching each coverage 0.01, 0.02, ..., 1.
fn coarse_curve(curve: &RiskCoverageCurve) -> Vec<(f64, f64)> {
    let n = curve.points.len();
    (1..=100)
        .map(|k| {
            let i = (k * n).div_ceil(100).clamp(1, n) - 1;
            curve.points[i]
        })
        .collect()
}

impl EvalRecord {
    pub fn mixture_spec(&self) -> String {
        format!(
            "cov-test:{}:{}+sem-test;equal_counts={};include_clean={}",
            self.family, self.severity, self.equal_counts, self.include_clean
        )
    }
}

pub struct EvalOptions {
    pub score: ScoreKind,
    pub equal_counts: bool,
    pub include_clean: bool,
    pub mixture_seed: u64,
}

impl EvalOptions {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        EvalOptions {
            score: cfg.eval.score,
            equal_counts: cfg.eval.equal_counts,
            include_clean: cfg.eval.include_clean,
            mixture_seed: cfg.seeds().mixture,
        }
    }
}

pub fn evaluate_cell(
    variant: &Variant,
    bench: &WildBench,
    cov_test: &LabeledSet,
    opts: &EvalOptions,
) -> Result<EvalRecord> {
    let crate::wildbench::Origin::CovTest { family, severity } = cov_test.origin else {
        return Err(Error::contract(format!(
            "{} is not a shifted test set",
            cov_test.origin
        )));
    };
    let clean = opts.include_clean.then_some(&bench.id_test);
    let mixture = build_wild_mixture(
        &variant.model,
        cov_test,
        &bench.sem_test,
        opts.equal_counts,
        clean,
        opts.mixture_seed,
    )?;
    let report = evaluate_mixture(&variant.model, &mixture, opts.score)?;
    let scores = scores(&variant.model.forward(&mixture.inputs)?, opts.score)?;
    let curve = coarse_curve(&risk_coverage(&scores, &mixture.accept)?);
    Ok(EvalRecord {
        model: variant.name.clone(),
        model_id: model_id(&variant.model),
        alpha: variant.alpha,
        family,
        severity,
        equal_counts: opts.equal_counts,
        include_clean: opts.include_clean,
        config_hash: bench.config_hash.clone(),
        report,
        curve,
    })
}

/// Every (variant, shifted set) cell, variants outer. Cells run in
/// parallel; the output order does not depend on scheduling.
pub fn evaluate_all(variants: &[Variant], bench: &WildBench, opts: &EvalOptions) -> Result<Vec<EvalRecord>> {
    let cells: Vec<(&Variant, &LabeledSet)> = variants
        .iter()
        .flat_map(|v| bench.cov_tests.iter().map(move |c| (v, c)))
        .collect();
    cells
        .par_iter()
        .map(|(v, c)| evaluate_cell(v, bench, c, opts))
        .collect()
}

pub struct Outcome {
    pub bench: WildBench,
    pub base: Checkpoint,
    pub tau_cov: LoraVector,
    pub tau_sem: LoraVector,
    pub variants: Vec<Variant>,
    pub records: Vec<EvalRecord>,
}

/// Runs the whole recipe in memory.
pub fn run(cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.validate()?;
    let bench = generate(&cfg.data)?;
    info!(
        "stage=data hash={} train={} sem={} aux={}",
        bench.config_hash,
        bench.id_train.len(),
        bench.sem_test.len(),
        bench.aux.len()
    );
    let (base, _) = run_base(cfg, &bench)?;
    info!("stage=base id={}", base.id());
    let (cov, sem) = rayon::join(
        || run_lora(cfg, &base, &bench.id_train, None, Objective::CovAugmix),
        || run_lora(cfg, &base, &bench.id_train, Some(&bench.aux), Objective::SemOe),
    );
    let (tau_cov, _) = cov?;
    let (tau_sem, _) = sem?;
    let variants = variants(cfg, &base, &tau_cov, &tau_sem)?;
    let records = evaluate_all(&variants, &bench, &EvalOptions::from_config(cfg))?;
    Ok(Outcome {
        bench,
        base,
        tau_cov,
        tau_sem,
        variants,
        records,
    })
}
