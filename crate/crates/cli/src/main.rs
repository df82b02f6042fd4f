mod store;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use trustlora_core::arithmetic::{merge_add, merge_negate};
use trustlora_core::checkpoint::Checkpoint;
use trustlora_core::container::write_atomic;
use trustlora_core::metrics::{RiskCoverageCurve, ScoreKind};
use trustlora_core::model::TrainMode;
use trustlora_core::objectives::Objective;
use trustlora_core::pipeline::{self, EvalOptions, ExperimentConfig, Variant};
use trustlora_core::report;
use trustlora_core::wildbench::{self, Family, LabeledSet, Origin};
use trustlora_core::{Error, Result};

use store::{Kind, Store};

/// Train, merge and evaluate reliability adapters on a synthetic
/// wild-shift benchmark.
///
/// Settings are taken from the built-in reference recipe, then the
/// `--config` file, then command-line flags, later sources winning.
#[derive(Parser)]
#[command(name = "trustlora", version)]
struct Cli {
    /// Experiment config (TOML). Defaults to the reference recipe.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; every sub-seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved config as TOML.
    Config,
    /// Generate the benchmark splits.
    GenData,
    /// Train the base classifier on the clean training split.
    TrainBase,
    /// Train one adapter on the frozen base and store its vector.
    TrainLora(TrainLoraArgs),
    /// Compose adapters into a new checkpoint.
    Merge(MergeArgs),
    /// Evaluate checkpoints on the wild mixtures.
    Eval(EvalArgs),
    /// Aggregate stored evaluation records into tables and plots.
    Report(ReportArgs),
    /// The whole recipe: data, base, both adapters, merges, eval, report.
    Run,
}

#[derive(Args)]
struct TrainLoraArgs {
    /// `cov` (augmentation consistency) or `sem` (outlier exposure).
    #[arg(long)]
    objective: ObjectiveArg,
    #[arg(long, default_value = "base")]
    base: String,
    #[arg(long)]
    rank: Option<usize>,
    /// `b-only` or `ab`.
    #[arg(long)]
    train_mode: Option<TrainMode>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ObjectiveArg {
    Cov,
    Sem,
}

impl ObjectiveArg {
    fn objective(self) -> Objective {
        match self {
            ObjectiveArg::Cov => Objective::CovAugmix,
            ObjectiveArg::Sem => Objective::SemOe,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ObjectiveArg::Cov => "cov",
            ObjectiveArg::Sem => "sem",
        }
    }
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    alpha: f64,
    /// Subtract alpha times `--vector` from `--model` instead of merging.
    #[arg(long)]
    negate: bool,
    #[arg(long, default_value = "base")]
    base: String,
    #[arg(long, default_value = "tau-cov")]
    cov: String,
    #[arg(long, default_value = "tau-sem")]
    sem: String,
    /// Checkpoint to negate from.
    #[arg(long, default_value = "sem")]
    model: String,
    /// Vector to negate.
    #[arg(long, default_value = "tau-sem")]
    vector: String,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoints to evaluate; defaults to every named checkpoint.
    #[arg(long = "model")]
    models: Vec<String>,
    #[arg(long)]
    score: Option<ScoreKind>,
    /// Shifted sets to use, e.g. `cov-test:rotation:2`. Defaults to all.
    #[arg(long = "mixture")]
    mixtures: Vec<String>,
    /// Comma-separated severities to keep.
    #[arg(long, value_delimiter = ',')]
    severity: Vec<u8>,
    /// Comma-separated families to keep.
    #[arg(long, value_delimiter = ',')]
    family: Vec<Family>,
    #[arg(long)]
    equal_counts: Option<bool>,
    #[arg(long)]
    include_clean: Option<bool>,
}

#[derive(Args)]
struct ReportArgs {
    /// Aggregate even when records come from different data configs.
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::reference(0),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg = cfg.resolved();
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let store = Store::new(&cfg.out_dir);
    match cli.command {
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
        Command::GenData => gen_data(&cfg, &store),
        Command::TrainBase => train_base(&cfg, &store),
        Command::TrainLora(args) => {
            let mut cfg = cfg;
            if let Some(r) = args.rank {
                cfg.model.lora_rank = r;
            }
            if let Some(m) = args.train_mode {
                cfg.model.train_mode = m;
            }
            cfg.validate()?;
            train_lora(&cfg, &store, args.objective, &args.base)
        }
        Command::Merge(args) => merge(&store, &args),
        Command::Eval(args) => eval(&cfg, &store, &args),
        Command::Report(args) => write_report(&store, args.force),
        Command::Run => run_all(&cfg, &store),
    }
}

fn gen_data(cfg: &ExperimentConfig, store: &Store) -> Result<()> {
    let bench = wildbench::generate(&cfg.data)?;
    let dir = store.data_dir();
    bench.save(&dir)?;
    bench.save_csv(&dir.join("csv"))?;
    write_atomic(&store.path("config.toml"), cfg.to_toml().as_bytes())?;
    println!("data {} {}", bench.config_hash, dir.display());
    Ok(())
}

/// Loads the stored benchmark and checks it belongs to this config.
fn load_data(cfg: &ExperimentConfig, store: &Store) -> Result<wildbench::WildBench> {
    let bench = store.load_data()?;
    let expected = wildbench::config_hash(&cfg.data);
    if bench.config_hash != expected {
        return Err(Error::data(format!(
            "stored data has config hash {} but this config expects {}; rerun gen-data",
            bench.config_hash, expected
        )));
    }
    Ok(bench)
}

fn train_base(cfg: &ExperimentConfig, store: &Store) -> Result<()> {
    let bench = load_data(cfg, store)?;
    let (ckpt, _) = pipeline::run_base(cfg, &bench)?;
    let id = store.save_checkpoint("base", &ckpt)?;
    println!("base {id}");
    Ok(())
}

fn train_lora(cfg: &ExperimentConfig, store: &Store, which: ObjectiveArg, base_ref: &str) -> Result<()> {
    let bench = load_data(cfg, store)?;
    let base = store.checkpoint(base_ref)?;
    let aux: Option<&LabeledSet> = matches!(which, ObjectiveArg::Sem).then_some(&bench.aux);
    let objective = which.objective();
    let (vector, _) = pipeline::run_lora(cfg, &base, &bench.id_train, aux, objective)?;
    let prov = pipeline::provenance("vector", Some(objective), vec![base.id()], vec![], &bench.config_hash);
    store.save_vector(&format!("tau-{}", which.name()), &vector, &prov)?;
    let applied = Checkpoint::new(
        base.model.with_vector(&vector, 1.0)?,
        pipeline::provenance(
            "adapter",
            Some(objective),
            vec![base.id(), vector.id.clone()],
            vec![1.0],
            &bench.config_hash,
        ),
    );
    let id = store.save_checkpoint(which.name(), &applied)?;
    println!("tau-{} {}", which.name(), vector.id);
    println!("{} {id}", which.name());
    Ok(())
}

fn merge(store: &Store, args: &MergeArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&args.alpha) {
        return Err(Error::contract(format!("alpha {} outside [0, 1]", args.alpha)));
    }
    let (name, ckpt) = if args.negate {
        let from = store.checkpoint(&args.model)?;
        let (tau, _) = store.vector(&args.vector)?;
        let model = merge_negate(&from.model, &tau, args.alpha)?;
        let prov = pipeline::provenance(
            "negate",
            None,
            vec![from.id(), tau.id.clone()],
            vec![args.alpha],
            from.provenance.config_hash.as_deref().unwrap_or_default(),
        );
        (
            format!("{}-negate@{}", args.model, args.alpha),
            Checkpoint::new(model, prov),
        )
    } else {
        let base = store.checkpoint(&args.base)?;
        let (cov, _) = store.vector(&args.cov)?;
        let (sem, _) = store.vector(&args.sem)?;
        let model = merge_add(&base.model, &cov, &sem, args.alpha)?;
        let prov = pipeline::provenance(
            "merge",
            None,
            vec![base.id(), cov.id.clone(), sem.id.clone()],
            vec![args.alpha],
            base.provenance.config_hash.as_deref().unwrap_or_default(),
        );
        (format!("merge@{}", args.alpha), Checkpoint::new(model, prov))
    };
    let id = store.save_checkpoint(&name, &ckpt)?;
    println!("{name} {id}");
    Ok(())
}

fn selected_sets<'a>(bench: &'a wildbench::WildBench, args: &EvalArgs) -> Result<Vec<&'a LabeledSet>> {
    let mut sets: Vec<&LabeledSet> = if args.mixtures.is_empty() {
        bench.cov_tests.iter().collect()
    } else {
        let mut out = Vec::new();
        for spec in &args.mixtures {
            match spec.parse::<Origin>()? {
                Origin::CovTest { family, severity } => out.push(bench.cov_test(family, severity)?),
                other => return Err(Error::config(format!("mixture `{other}` is not a shifted test set"))),
            }
        }
        out
    };
    sets.retain(|s| match s.origin {
        Origin::CovTest { family, severity } => {
            (args.severity.is_empty() || args.severity.contains(&severity))
                && (args.family.is_empty() || args.family.contains(&family))
        }
        _ => false,
    });
    if sets.is_empty() {
        return Err(Error::config("no shifted test set matches the selection"));
    }
    Ok(sets)
}

fn eval(cfg: &ExperimentConfig, store: &Store, args: &EvalArgs) -> Result<()> {
    let bench = load_data(cfg, store)?;
    let mut opts = EvalOptions::from_config(cfg);
    if let Some(s) = args.score {
        opts.score = s;
    }
    if let Some(b) = args.equal_counts {
        opts.equal_counts = b;
    }
    if let Some(b) = args.include_clean {
        opts.include_clean = b;
    }
    let names: Vec<String> = if args.models.is_empty() {
        store
            .refs()?
            .into_iter()
            .filter(|(_, r)| r.kind == Kind::Checkpoint)
            .map(|(name, _)| name)
            .collect()
    } else {
        args.models.clone()
    };
    if names.is_empty() {
        return Err(Error::Unresolved("no checkpoints to evaluate".into()));
    }
    let sets = selected_sets(&bench, args)?;
    for name in names {
        let ckpt = store.checkpoint(&name)?;
        let alpha = matches!(ckpt.provenance.kind.as_str(), "merge" | "negate")
            .then(|| ckpt.provenance.alphas.first().copied())
            .flatten();
        let variant = Variant {
            name: name.clone(),
            alpha,
            model: ckpt.model,
        };
        let records = sets
            .iter()
            .map(|s| pipeline::evaluate_cell(&variant, &bench, s, &opts))
            .collect::<Result<Vec<_>>>()?;
        let path = store.save_records(&name, opts.score.as_str(), &records)?;
        info!(
            "stage=eval model={name} cells={} file={}",
            records.len(),
            path.display()
        );
        print!("{}", report::render_records(&records));
    }
    Ok(())
}

/// Pointwise mean of the per-cell curves of one model.
fn mean_curve(records: &[&pipeline::EvalRecord]) -> RiskCoverageCurve {
    let n = records.iter().map(|r| r.curve.len()).min().unwrap_or(0);
    let points = (0..n)
        .map(|i| {
            let c = records.iter().map(|r| r.curve[i].0).sum::<f64>() / records.len() as f64;
            let r = records.iter().map(|r| r.curve[i].1).sum::<f64>() / records.len() as f64;
            (c, r)
        })
        .collect();
    RiskCoverageCurve { points }
}

fn write_report(store: &Store, force: bool) -> Result<()> {
    let records = store.records()?;
    if records.is_empty() {
        return Err(Error::Unresolved("no evaluation records; run eval first".into()));
    }
    if !force {
        report::check_config_hashes(&records)?;
    }
    let dir = store.report_dir();
    let text = report::render_records(&records);
    write_atomic(&dir.join("records.txt"), text.as_bytes())?;
    write_atomic(&dir.join("severity.csv"), report::severity_table(&records).as_bytes())?;
    write_atomic(&dir.join("alpha.csv"), report::alpha_table(&records).as_bytes())?;

    let mut scores: Vec<&str> = records.iter().map(|r| r.report.score.as_str()).collect();
    scores.sort_unstable();
    scores.dedup();
    for score in scores {
        let mut models: Vec<&str> = Vec::new();
        for r in records.iter().filter(|r| r.report.score.as_str() == score) {
            if !models.contains(&r.model.as_str()) {
                models.push(&r.model);
            }
        }
        let curves: Vec<(String, RiskCoverageCurve)> = models
            .iter()
            .map(|m| {
                let group: Vec<_> = records
                    .iter()
                    .filter(|r| r.report.score.as_str() == score && r.model == *m)
                    .collect();
                (m.to_string(), mean_curve(&group))
            })
            .collect();
        let svg = report::risk_coverage_svg(&format!("risk-coverage ({score})"), &curves);
        write_atomic(&dir.join(format!("risk_coverage_{score}.svg")), svg.as_bytes())?;
    }
    print!("{text}");
    info!("stage=report records={} dir={}", records.len(), dir.display());
    Ok(())
}

fn run_all(cfg: &ExperimentConfig, store: &Store) -> Result<()> {
    gen_data(cfg, store)?;
    train_base(cfg, store)?;
    train_lora(cfg, store, ObjectiveArg::Cov, "base")?;
    train_lora(cfg, store, ObjectiveArg::Sem, "base")?;
    for &alpha in &cfg.eval.alphas {
        merge(store, &merge_args(alpha, false))?;
    }
    merge(store, &merge_args(cfg.eval.negate_alpha, true))?;
    let args = EvalArgs {
        models: Vec::new(),
        score: None,
        mixtures: Vec::new(),
        severity: Vec::new(),
        family: Vec::new(),
        equal_counts: None,
        include_clean: None,
    };
    eval(cfg, store, &args)?;
    write_report(store, false)
}

fn merge_args(alpha: f64, negate: bool) -> MergeArgs {
    MergeArgs {
        alpha,
        negate,
        base: "base".into(),
        cov: "tau-cov".into(),
        sem: "tau-sem".into(),
        model: "sem".into(),
        vector: "tau-sem".into(),
    }
}
