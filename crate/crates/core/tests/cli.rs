use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
preset = "desk"
seed = 3
[model]
width = 0.25
[data]
source = "synthetic"
synthetic_train = 120
synthetic_test = 40
[optim]
epochs = 1
decay_epochs = []
batch_size = 40
[eval]
every = 1
limit = 40
[train_attack]
epsilon = 0.03137254901960784
step_size = 0.00784313725490196
steps = 2
restarts = 1
random_init = true
[eval_attack]
epsilon = 0.03137254901960784
step_size = 0.00784313725490196
steps = 3
restarts = 1
random_init = true
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualnorm"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

/// Accuracy columns of the single data row printed by `eval`.
fn accuracies(stdout: &str) -> (String, String) {
    let row: Vec<&str> = stdout.lines().nth(1).unwrap().split(',').collect();
    (row[3].to_string(), row[4].to_string())
}

#[test]
fn unknown_config_key_is_rejected_by_name() {
    let dir = workspace();
    fs::write(dir.path().join("bad.toml"), "[model]\nbogus_key = 1\n").unwrap();
    let out = run(dir.path(), &["--config", "bad.toml", "train", "--epochs", "0"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus_key"));
}

#[test]
fn training_is_reproducible_from_the_seed() {
    let dir = workspace();
    // The output directory is part of the embedded config, so both runs share it.
    ok(dir.path(), &["--config", "tiny.toml", "train", "--out", "run"]);
    let first = fs::read(dir.path().join("run/model.ckpt")).unwrap();
    let first_metrics = fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    ok(dir.path(), &["--config", "tiny.toml", "train", "--out", "run"]);
    assert_eq!(first, fs::read(dir.path().join("run/model.ckpt")).unwrap());
    let metrics = fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert_eq!(first_metrics, metrics);
    assert!(metrics.starts_with('#'));
    assert!(metrics.contains("epoch,regime,branch,clean_acc,pgd_acc,loss,lr"));
}

#[test]
fn explicit_routing_matches_branch_deployment() {
    let dir = workspace();
    ok(dir.path(), &["--config", "tiny.toml", "train", "--out", "run"]);
    let ck = "run/model.ckpt";
    for b in ["clean", "adv"] {
        let whole = ok(dir.path(), &["eval", "--checkpoint", ck, "--branch", b]);
        let explicit = ok(dir.path(), &["eval", "--checkpoint", ck, "--ns", b, "--ap", b]);
        assert_eq!(accuracies(&whole), accuracies(&explicit), "{b}");
    }
    let out = run(
        dir.path(),
        &["eval", "--checkpoint", ck, "--branch", "adv", "--ns", "clean"],
    );
    assert!(!out.status.success());
}

#[test]
fn probe_pipeline_writes_labelled_csvs() {
    let dir = workspace();
    ok(dir.path(), &["--config", "tiny.toml", "train", "--out", "run"]);
    let ck = "run/model.ckpt";
    let msg = ok(
        dir.path(),
        &[
            "recalibrate",
            "--checkpoint",
            ck,
            "--ap",
            "adv",
            "--data",
            "clean",
            "--out",
            "ns.json",
        ],
    );
    assert!(msg.starts_with("NS_clean^adv"));
    ok(
        dir.path(),
        &[
            "recalibrate",
            "--checkpoint",
            ck,
            "--ap",
            "clean",
            "--data",
            "noisy",
            "--max-passes",
            "2",
            "--out",
            "noisy.json",
        ],
    );

    let evalled = ok(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            ck,
            "--stats",
            "ns.json",
            "--ap",
            "adv",
            "--out",
            "eval.csv",
        ],
    );
    assert!(evalled.contains("NS_clean^adv,AP_adv"));
    let csv = fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert!(csv.lines().any(|l| l == "ns,ap,head,clean_acc,pgd_acc,samples"));

    ok(dir.path(), &["probe-gap", "--checkpoint", ck, "--out", "gap.csv"]);
    let gap = fs::read_to_string(dir.path().join("gap.csv")).unwrap();
    let rows: Vec<&str> = gap.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "layer_index,layer_name,d_mu,d_sigma,d_gamma,d_beta");
    // Every column is filled for a dual batch-norm model.
    assert!(rows[1..].iter().all(|r| r.split(',').all(|v| !v.is_empty())));

    ok(
        dir.path(),
        &[
            "probe-gap",
            "--checkpoint",
            ck,
            "--stats",
            "ns.json",
            "noisy.json",
            "--out",
            "gap2.csv",
        ],
    );
    ok(
        dir.path(),
        &[
            "export-channels",
            "--checkpoint",
            ck,
            "--layer",
            "conv1.norm",
            "--k",
            "3",
            "--stats",
            "ns.json",
            "--out",
            "ch.csv",
        ],
    );
    let ch = fs::read_to_string(dir.path().join("ch.csv")).unwrap();
    // 3 channels x (2 stored + 1 recalibrated NS + 2 AP) variants.
    assert_eq!(ch.lines().filter(|l| !l.starts_with('#')).count(), 1 + 3 * 5);
    let bad = run(
        dir.path(),
        &[
            "export-channels",
            "--checkpoint",
            ck,
            "--layer",
            "nope",
            "--out",
            "x.csv",
        ],
    );
    assert!(!bad.status.success());
}

#[test]
fn zero_epoch_checkpoint_evaluates_like_a_fresh_model() {
    use dualnorm::config::ExperimentConfig;
    use dualnorm::models::Routing;
    use dualnorm::normcore::BranchTag;

    let dir = workspace();
    ok(
        dir.path(),
        &["--config", "tiny.toml", "train", "--epochs", "0", "--out", "run"],
    );
    let printed = ok(
        dir.path(),
        &["eval", "--checkpoint", "run/model.ckpt", "--branch", "adv"],
    );

    let cfg = ExperimentConfig::from_toml_str(TINY).unwrap();
    let (_, test) = cfg.load_data().unwrap();
    let (c, s) = test.image_dims();
    let fresh = cfg.build_model(test.classes, c, s).unwrap();
    let pred = fresh.predict(&test.images, &Routing::eval(BranchTag::Adv)).unwrap();
    let hits = pred.iter().zip(&test.labels).filter(|(p, l)| p == l).count();
    assert_eq!(
        accuracies(&printed).0,
        format!("{:.6}", hits as f64 / test.len() as f64)
    );
}

#[test]
fn corrupted_checkpoint_fails_cleanly() {
    let dir = workspace();
    ok(
        dir.path(),
        &["--config", "tiny.toml", "train", "--epochs", "0", "--out", "run"],
    );
    let path = dir.path().join("run/model.ckpt");
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    fs::write(&path, bytes).unwrap();
    let out = run(dir.path(), &["eval", "--checkpoint", "run/model.ckpt"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
}
