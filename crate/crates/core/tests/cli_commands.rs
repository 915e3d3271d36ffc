use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
mode = "emoe"

[model]
d = 8
d_h = 8
n_experts = 8

[elastic]
k_train = 2
k_ideal = 4

[optimizer]
epochs = 1
batch_size = 32

[task]
n_clusters = 4
d = 8
n_classes = 4
m_per_cluster = 30
"#;

fn emoe(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emoe"))
        .args(args)
        .env("EMOE_OUTPUT_ROOT", root)
        .output()
        .unwrap()
}

#[test]
fn train_then_sweep_and_diagnose_under_output_root() {
    let root = tempfile::tempdir().unwrap();
    let config = root.path().join("small.toml");
    std::fs::write(&config, CONFIG).unwrap();

    let out = emoe(root.path(), &["train", "--config", config.to_str().unwrap(), "--output", "run"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = root.path().join("run").join("checkpoint");
    assert!(ckpt.join("manifest.json").is_file());
    assert!(root.path().join("run").join("metrics.jsonl").is_file());
    let ckpt = ckpt.to_str().unwrap();

    let out = emoe(root.path(), &["sweep", "--checkpoint", ckpt, "--k-primes", "1,2,8", "--output", "sw"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(root.path().join("sw").join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(String::from_utf8_lossy(&out.stdout), csv);

    let again = emoe(root.path(), &["--sequential", "sweep", "--checkpoint", ckpt, "--k-primes", "1,2,8", "--output", "sw2"]);
    assert!(again.status.success());
    assert_eq!(std::fs::read_to_string(root.path().join("sw2").join("report.csv")).unwrap(), csv);

    let out = emoe(root.path(), &["diagnose", "--checkpoint", ckpt, "--k-primes", "2,4", "--output", "dg"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dg = root.path().join("dg");
    assert!(dg.join("drift.csv").is_file());
    assert!(dg.join("cooc_layer0.json").is_file());
    assert!(dg.join("k4").join("cooc_layer1.json").is_file());

    let out = emoe(root.path(), &["eval", "--checkpoint", ckpt, "--k-prime", "3"]);
    assert!(out.status.success());
    let metrics: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(metrics["budget"], 3.0);
    let out = emoe(root.path(), &["eval", "--checkpoint", ckpt]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn checks_and_exit_codes() {
    let root = tempfile::tempdir().unwrap();
    let out = emoe(root.path(), &["verify-sampling", "--draws", "20000"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("within bound"));
    assert_eq!(emoe(root.path(), &["verify-sampling", "--k-train", "1"]).status.code(), Some(1));
    assert_eq!(emoe(root.path(), &["gradcheck", "--eps", "0"]).status.code(), Some(1));
    assert_eq!(emoe(root.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(emoe(root.path(), &["--help"]).status.code(), Some(0));
    let missing = root.path().join("missing");
    let out = emoe(root.path(), &["sweep", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let bad = root.path().join("bad.toml");
    std::fs::write(&bad, "mode = \"emoe\"\n[elastic]\nk_train = 9\nk_ideal = 8\n").unwrap();
    assert_eq!(emoe(root.path(), &["train", "--config", bad.to_str().unwrap()]).status.code(), Some(1));
}
