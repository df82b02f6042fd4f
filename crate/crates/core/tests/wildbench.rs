mod common;

use trustlora_core::arithmetic::ComposedModel;
use trustlora_core::metrics::{evaluate_mixture, ScoreKind};
use trustlora_core::model::{BaseModel, ModelConfig, TrainMode};
use trustlora_core::rng::seeded;
use trustlora_core::wildbench::{
    build_wild_mixture, corrupt, generate, Family, LabeledSet, Source, WildBench, WildBenchConfig,
};
use trustlora_core::{Error, Matrix};

fn small_config(seed: u64) -> WildBenchConfig {
    WildBenchConfig {
        num_classes: 3,
        input_dim: 2,
        n_train: 300,
        n_test: 400,
        n_sem: 300,
        n_aux: 200,
        sem_classes: 2,
        severities: vec![0, 1, 3],
        seed,
        ..WildBenchConfig::default()
    }
}

fn small_model(seed: u64) -> ComposedModel {
    let cfg = ModelConfig {
        input_dim: 2,
        hidden_dims: vec![8],
        num_classes: 3,
        lora_rank: 1,
        lora_seed: 0,
        adapt_layers: None,
        train_mode: TrainMode::BOnly,
    };
    ComposedModel::new(BaseModel::init(&cfg, seed).unwrap())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn additive_noise_has_the_scheduled_spread() {
    let x = Matrix::zeros(10_000, 1);
    for s in 1..=5u8 {
        let y = corrupt(&x, Family::AdditiveGaussian, s, &mut seeded(u64::from(s))).unwrap();
        let n = y.len() as f64;
        let mean = y.data().iter().sum::<f64>() / n;
        let sd = (y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let want = Family::AdditiveGaussian.magnitude(s).unwrap();
        assert!((sd - want).abs() < 0.05 * want, "severity {s}: {sd} vs {want}");
    }
}

#[test]
fn scale_and_mask_follow_their_schedules() {
    let x = Matrix::filled(20_000, 1, 2.0);
    let scaled = corrupt(&x, Family::Scale, 2, &mut seeded(0)).unwrap();
    assert!(scaled.data().iter().all(|&v| v == 2.0 * 1.2));
    let masked = corrupt(&x, Family::Mask, 4, &mut seeded(0)).unwrap();
    let zeroed = masked.data().iter().filter(|&&v| v == 0.0).count() as f64 / 20_000.0;
    assert!((zeroed - 0.3).abs() < 0.015, "{zeroed}");
}

#[test]
fn generation_is_deterministic_and_seed_sensitive() {
    let a = generate(&small_config(4)).unwrap();
    let b = generate(&small_config(4)).unwrap();
    assert_eq!(a, b);
    let c = generate(&small_config(5)).unwrap();
    assert!(!a.id_train.inputs.bit_eq(&c.id_train.inputs));
}

#[test]
fn severity_zero_is_the_clean_test_set() {
    let bench = generate(&small_config(6)).unwrap();
    for f in Family::ALL {
        let s0 = bench.cov_test(f, 0).unwrap();
        assert!(s0.inputs.bit_eq(&bench.id_test.inputs));
        assert_eq!(s0.labels, bench.id_test.labels);
        // Higher severities move the points but keep the labels.
        let s3 = bench.cov_test(f, 3).unwrap();
        assert_eq!(s3.labels, bench.id_test.labels);
        assert!(!s3.inputs.bit_eq(&bench.id_test.inputs));
    }
}

#[test]
fn geometry_constraints_hold() {
    let cfg = small_config(7);
    let bench = generate(&cfg).unwrap();
    let rows = |m: &Matrix| (0..m.rows()).map(|r| m.row(r).to_vec()).collect::<Vec<_>>();
    let id = rows(&bench.id_centers);
    let sem = rows(&bench.sem_centers);
    for (i, a) in id.iter().enumerate() {
        assert!(a.iter().all(|v| v.abs() <= cfg.center_box));
        for b in &id[i + 1..] {
            assert!(dist(a, b) >= cfg.center_min_separation);
        }
        for s in &sem {
            assert!(dist(a, s) >= cfg.sem_min_distance);
        }
    }
    for r in 0..bench.aux.len() {
        let p = bench.aux.inputs.row(r);
        assert!(p.iter().all(|v| v.abs() <= cfg.aux_box));
        assert!(sem.iter().all(|s| dist(p, s) >= cfg.aux_exclusion));
    }
}

/// Recomputes accept flags from scratch: known-class and predicted right.
#[test]
fn accept_flags_match_a_direct_relabel() {
    let bench = generate(&small_config(8)).unwrap();
    let model = small_model(1);
    let cov = bench.cov_test(Family::Rotation, 3).unwrap();
    let m = build_wild_mixture(&model, cov, &bench.sem_test, false, Some(&bench.id_test), 0).unwrap();
    assert_eq!(m.len(), bench.id_test.len() + cov.len() + bench.sem_test.len());
    let br = [];
    let mut expected = Vec::new();
    for set in [&bench.id_test, cov, &bench.sem_test] {
        for (r, z) in common::forward(&model.base, &set.inputs, &br).iter().enumerate() {
            let pred = (0..z.len()).fold(0, |best, k| if z[k] > z[best] { k } else { best });
            expected.push(set.labels[r] == Some(pred));
        }
    }
    assert_eq!(m.accept, expected);
    assert!(m.sources[..bench.id_test.len()].iter().all(|&s| s == Source::Clean));
}

/// A model that is right on every shifted sample rejects exactly the
/// semantic outliers.
#[test]
fn perfect_classifier_rejects_only_outliers() {
    let bench = generate(&small_config(9)).unwrap();
    let model = small_model(2);
    let cov = bench.cov_test(Family::AdditiveGaussian, 3).unwrap();
    let pred = model.forward(&cov.inputs).unwrap().argmax_rows();
    let relabeled = LabeledSet {
        origin: cov.origin,
        inputs: cov.inputs.clone(),
        labels: pred.into_iter().map(Some).collect(),
    };
    let m = build_wild_mixture(&model, &relabeled, &bench.sem_test, false, None, 0).unwrap();
    for i in 0..m.len() {
        assert_eq!(!m.accept[i], m.sources[i] == Source::Sem);
    }
    assert_eq!(m.counts.cov_correct, cov.len());
    // Equal counts need at least one shifted error.
    let err = build_wild_mixture(&model, &relabeled, &bench.sem_test, true, None, 0);
    assert!(matches!(err, Err(Error::Protocol(_))));
}

#[test]
fn equal_counts_subsample_the_larger_side() {
    let bench = generate(&small_config(10)).unwrap();
    let model = small_model(3);
    let cov = bench.cov_test(Family::Scale, 1).unwrap();
    let pred = model.forward(&cov.inputs).unwrap().argmax_rows();
    // Exactly 120 shifted errors against 300 semantic samples.
    let labels = pred
        .iter()
        .enumerate()
        .map(|(i, &p)| Some(if i < 120 { (p + 1) % 3 } else { p }))
        .collect();
    let cov = LabeledSet {
        origin: cov.origin,
        inputs: cov.inputs.clone(),
        labels,
    };
    let a = build_wild_mixture(&model, &cov, &bench.sem_test, true, None, 77).unwrap();
    assert_eq!(a.counts.cov_misclassified_kept, 120);
    assert_eq!(a.counts.sem_kept, 120);
    assert_eq!(a.sources.iter().filter(|&&s| s == Source::Sem).count(), 120);
    assert_eq!(a.accept.iter().filter(|&&x| !x).count(), 240);
    let b = build_wild_mixture(&model, &cov, &bench.sem_test, true, None, 77).unwrap();
    assert!(a.inputs.bit_eq(&b.inputs));
    let c = build_wild_mixture(&model, &cov, &bench.sem_test, true, None, 78).unwrap();
    assert!(!a.inputs.bit_eq(&c.inputs));
}

#[test]
fn binary_and_csv_exports_give_identical_metrics() {
    let bench = generate(&small_config(11)).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    bench.save(&tmp.path().join("bin")).unwrap();
    bench.save_csv(&tmp.path().join("csv")).unwrap();
    let from_bin = WildBench::load(&tmp.path().join("bin")).unwrap();
    let from_csv = WildBench::load_csv(&tmp.path().join("csv"), &bench.config_hash).unwrap();
    assert_eq!(from_bin, bench);
    assert_eq!(from_csv.sets(), bench.sets());

    let model = small_model(4);
    let report = |b: &WildBench| {
        let cov = b.cov_test(Family::Mask, 3).unwrap();
        let m = build_wild_mixture(&model, cov, &b.sem_test, false, None, 0).unwrap();
        evaluate_mixture(&model, &m, ScoreKind::Energy).unwrap()
    };
    assert_eq!(report(&from_bin), report(&from_csv));
}
