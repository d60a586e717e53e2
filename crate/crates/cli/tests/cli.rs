use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_meanflow"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn dry_run_validates_without_writing() {
    let out = tempfile::tempdir().unwrap();
    let dest = out.path().join("run");
    let res = bin()
        .args(["run", "--dry-run", "--config"])
        .arg(configs().join("acceptance/epi_safe_chain.json"))
        .arg("--out")
        .arg(&dest)
        .output()
        .unwrap();
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(String::from_utf8_lossy(&res.stdout).contains("config ok"));
    assert!(!dest.exists());
}

#[test]
fn config_errors_name_the_field_and_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(configs().join("acceptance/epi_safe_chain.json")).unwrap())
            .unwrap();
    v["flow"]["h"] = serde_json::json!(0.0);
    std::fs::write(&bad, v.to_string()).unwrap();
    let res = bin().args(["run", "--dry-run", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("flow.h"));
}

#[test]
fn seed_flag_overrides_the_config() {
    let out = tempfile::tempdir().unwrap();
    let res = bin()
        .env("MEANFLOW_THREADS", "2")
        .args(["run", "--seed", "77", "--config"])
        .arg(configs().join("acceptance/grad_safe_chain.json"))
        .arg("--out")
        .arg(out.path())
        .output()
        .unwrap();
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 77);
}

#[test]
fn solve_dp_exports_a_policy_table() {
    let out = tempfile::tempdir().unwrap();
    let res = bin()
        .args(["solve-dp", "--config"])
        .arg(configs().join("acceptance/epi_safe_chain.json"))
        .arg("--out")
        .arg(out.path())
        .output()
        .unwrap();
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let table: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("policy_table.json")).unwrap()).unwrap();
    assert_eq!(table["schema"], "meanflow.policy_table.v1");
    assert!(table["config_hash"].as_str().unwrap().len() == 64);
    assert!(table["rows"].as_array().unwrap().len() > 1);
}

#[test]
fn flipped_gradient_check_exits_1() {
    let res = bin()
        .args(["check-grad", "--probes", "3", "--flip-sign", "--config"])
        .arg(configs().join("acceptance/grad_safe_chain.json"))
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn fit_rates_reads_a_trace() {
    let out = tempfile::tempdir().unwrap();
    let mut cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(configs().join("acceptance/energy_safe_chain.json")).unwrap())
            .unwrap();
    cfg["flow"]["steps_per_stage"] = serde_json::json!(200);
    cfg["diagnostics"]["lipschitz_probes"] = serde_json::json!(0);
    let path = out.path().join("cfg.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let run = out.path().join("run");
    assert!(bin().args(["run", "--config"]).arg(&path).arg("--out").arg(&run).output().unwrap().status.success());
    let res =
        bin().args(["fit-rates", "--trace"]).arg(run.join("trace.jsonl")).arg("--out").arg(&run).output().unwrap();
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let fit: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("fit_rates.json")).unwrap()).unwrap();
    assert_eq!(fit["seed"], cfg["seed"]);
    assert_eq!(fit["config_hash"].as_str().unwrap().len(), 64);
}
