use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"
seed = 1

[data]
num_classes = 3
input_dim = 4
n_train = 300
n_test = 200
n_sem = 100
n_aux = 200
sem_classes = 2
severities = [1, 3]
families = ["rotation", "mask"]

[model]
input_dim = 4
hidden_dims = [16]
num_classes = 3
lora_rank = 2

[base_train]
epochs = 3
lr_init = 0.05

[lora_train]
epochs = 1
lr_init = 0.01
batch_size = 16

[eval]
alphas = [0.0, 0.5, 1.0]
"#;

/// Runs the binary with the small config and `out` as the store.
fn cli(dir: &Path, out: &Path, args: &[&str]) -> Output {
    let config = dir.join("small.toml");
    if !config.exists() {
        fs::write(&config, SMALL).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_trustlora"))
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn refs(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("refs.json")).unwrap()).unwrap()
}

/// A store with data, base and both adapters.
fn trained(dir: &Path) -> std::path::PathBuf {
    let out = dir.join("out");
    for args in [
        &["gen-data"][..],
        &["train-base"],
        &["train-lora", "--objective", "cov"],
        &["train-lora", "--objective", "sem"],
    ] {
        ok(&cli(dir, &out, args));
    }
    out
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let oa = cli(tmp.path(), &a, &["gen-data"]);
    let ob = cli(tmp.path(), &b, &["gen-data"]);
    ok(&oa);
    ok(&ob);
    let hash = |o: &Output| {
        String::from_utf8_lossy(&o.stdout)
            .split_whitespace()
            .nth(1)
            .unwrap()
            .to_string()
    };
    assert_eq!(hash(&oa), hash(&ob));
    for f in ["manifest.json", "weights.bin"] {
        assert_eq!(
            fs::read(a.join("data").join(f)).unwrap(),
            fs::read(b.join("data").join(f)).unwrap()
        );
    }
}

#[test]
fn unwritable_output_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("blocker");
    fs::write(&blocker, b"a file, not a directory").unwrap();
    let o = cli(tmp.path(), &blocker.join("out"), &["gen-data"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("blocker"));
}

#[test]
fn bad_config_is_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    fs::write(&path, "seed = 1\nunknown_key = 3\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_trustlora"))
        .arg("--config")
        .arg(&path)
        .arg("config")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn staged_pipeline_behaves() {
    let tmp = tempfile::tempdir().unwrap();
    let out = trained(tmp.path());

    // Merging at alpha 0 is the covariate checkpoint itself.
    ok(&cli(tmp.path(), &out, &["merge", "--alpha", "0"]));
    let r = refs(&out);
    assert_eq!(r["merge@0"]["id"], r["cov"]["id"]);
    // Negating the full semantic vector gives back the base.
    ok(&cli(tmp.path(), &out, &["merge", "--negate", "--alpha", "1"]));
    assert_eq!(refs(&out)["sem-negate@1"]["id"], r["base"]["id"]);

    assert_eq!(
        cli(tmp.path(), &out, &["merge", "--alpha", "1.5"]).status.code(),
        Some(2)
    );
    assert_eq!(
        cli(
            tmp.path(),
            &out,
            &["merge", "--alpha", "0.5", "--cov", "no-such-vector"]
        )
        .status
        .code(),
        Some(3)
    );

    // Changing the score leaves everything but the score-dependent metrics alone.
    for score in ["msp", "energy"] {
        ok(&cli(
            tmp.path(),
            &out,
            &["eval", "--model", "cov", "--score", score, "--family", "rotation"],
        ));
    }
    let load = |score: &str| -> Vec<Value> {
        serde_json::from_str(&fs::read_to_string(out.join("eval").join(format!("cov.{score}.json"))).unwrap()).unwrap()
    };
    let (msp, energy) = (load("msp"), load("energy"));
    assert_eq!(msp.len(), 2);
    assert_eq!(msp.len(), energy.len());
    for (a, b) in msp.iter().zip(&energy) {
        for key in [
            "model",
            "model_id",
            "family",
            "severity",
            "equal_counts",
            "include_clean",
            "config_hash",
        ] {
            assert_eq!(a[key], b[key], "{key}");
        }
        for key in ["accuracy", "n", "n_accept"] {
            assert_eq!(a["report"][key], b["report"][key], "{key}");
        }
        assert_ne!(a["report"]["score"], b["report"]["score"]);
    }

    // Records from a different data config are refused without --force.
    ok(&cli(tmp.path(), &out, &["report"]));
    let mut foreign = msp.clone();
    for r in &mut foreign {
        r["config_hash"] = "0".repeat(64).into();
    }
    fs::write(
        out.join("eval").join("foreign.msp.json"),
        serde_json::to_string(&foreign).unwrap(),
    )
    .unwrap();
    assert_eq!(cli(tmp.path(), &out, &["report"]).status.code(), Some(3));
    ok(&cli(tmp.path(), &out, &["report", "--force"]));
    assert!(out.join("report").join("severity.csv").exists());
}
