use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
dataset = "synthetic"
synthetic_features = 10
synthetic_classes = 4
synthetic_train_per_class = 40
synthetic_test_per_class = 10
hidden = [6]
clients = 3
rounds = 3
batch_size = 8
gamma = 0.3
"#;

fn paimfl(args: &[&str], out_env: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_paimfl"));
    cmd.args(args).env_remove("PAIMFL_OUT_DIR");
    if let Some(dir) = out_env {
        cmd.env("PAIMFL_OUT_DIR", dir);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, format!("{SMALL}{extra}")).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_writes_results_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("out");
    let o = paimfl(&["run", "--config", &cfg, "--out", out.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("round,loss,accuracy,up_end_edge,up_edge_cloud,down_cloud_edge,down_edge_end"));
    assert_eq!(lines.count(), 3);
    let manifest = fs::read_to_string(out.join("manifest.toml")).unwrap();
    let reparsed = paimfl::config::parse_config_str(&manifest, &[]).unwrap();
    assert_eq!(reparsed, paimfl::config::parse_config(&cfg, &[]).unwrap());
}

#[test]
fn environment_sets_output_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("from-env");
    let o = paimfl(&["run", "--config", &cfg], Some(&out));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("results.csv").exists());
}

#[test]
fn constraint_violation_exits_with_config_category() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let o = paimfl(&["run", "--config", &cfg, "--set", "gamma=0"], Some(tmp.path()));
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error[config]"), "{err}");
    assert!(err.contains("gamma ∈ (0,1]"), "{err}");

    let o = paimfl(&["run", "--config", &cfg, "--set", "not_a_key=1"], Some(tmp.path()));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not_a_key"));
}

#[test]
fn missing_config_exits_with_io_category() {
    let o = paimfl(&["run", "--config", "/nonexistent/config.toml"], None);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[io]"));
}

#[test]
fn compare_requires_seed() {
    let o = paimfl(&["compare"], None);
    assert!(!o.status.success());
}

#[test]
fn compare_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("cmp");
    let o = paimfl(&["compare", "--config", &cfg, "--seed", "3", "--out", out.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for scheme in ["pa-imfl", "unidirectional-sample-baseline", "no-defense-fedavg"] {
        assert!(out.join(scheme).join("results.csv").exists());
        let manifest = fs::read_to_string(out.join(scheme).join("manifest.toml")).unwrap();
        assert!(manifest.contains("master_seed = 3"));
    }
    let table = fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);

    let o = paimfl(&["report", out.to_str().unwrap()], None);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.lines().count(), 4, "{text}");
}

#[test]
fn attack_writes_defense_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "attack_targets = 3\nattack_steps = 20\n");
    let o = paimfl(&["attack", "--config", &cfg, "--out", tmp.path().to_str().unwrap()], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(tmp.path().join("defense.csv")).unwrap();
    assert!(csv.starts_with("condition,gamma,epsilon,t,n_targets,mean_mse,std_mse,mode\n"));
    assert_eq!(csv.lines().count(), 5);
}
