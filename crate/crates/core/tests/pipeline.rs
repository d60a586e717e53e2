use std::path::{Path, PathBuf};

use meanflow::flow::diagnostics::{estimate_lipschitz, LipschitzOptions};
use meanflow::flow::GradientFault;
use meanflow::harness::experiment::{read_trace, Prepared, TRACE_SCHEMA};
use meanflow::harness::{load_config, run_experiment, ExperimentConfig};
use meanflow::metrics::w2;

fn config_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/acceptance")
}

fn short_chain(steps: usize) -> ExperimentConfig {
    let mut cfg = load_config(config_dir().join("energy_safe_chain.json")).unwrap();
    cfg.flow.steps_per_stage = steps;
    cfg.diagnostics.lipschitz_probes = 4;
    cfg
}

#[test]
fn identical_config_and_seed_give_identical_bytes() {
    let cfg = short_chain(40);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(&cfg, Some(a.path()), GradientFault::None).unwrap();
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    single.install(|| run_experiment(&cfg, Some(b.path()), GradientFault::None)).unwrap();
    for name in ["trace.jsonl", "ensemble_final.json", "plot_objective.tsv"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert!(x == y, "{name} differs between runs");
    }

    let mut other = cfg.clone();
    other.seed += 1;
    let c = tempfile::tempdir().unwrap();
    run_experiment(&other, Some(c.path()), GradientFault::None).unwrap();
    assert_ne!(
        std::fs::read(a.path().join("trace.jsonl")).unwrap(),
        std::fs::read(c.path().join("trace.jsonl")).unwrap()
    );
}

#[test]
fn every_artifact_carries_hash_and_seed() {
    let cfg = short_chain(10);
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&cfg, Some(dir.path()), GradientFault::None).unwrap();
    let hash = cfg.hash();
    assert_eq!(out.summary.config_hash, hash);

    let trace = std::fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    let mut last = None;
    for line in trace.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["schema"], TRACE_SCHEMA);
        assert_eq!(v["config_hash"], hash.as_str());
        assert_eq!(v["seed"], cfg.seed);
        let idx = v["index"].as_u64().unwrap();
        assert!(last.is_none_or(|l| idx > l));
        last = Some(idx);
    }
    assert_eq!(read_trace(dir.path().join("trace.jsonl")).unwrap().len(), 11);

    for entry in std::fs::read_dir(dir.path()).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => {
                let v: serde_json::Value = serde_json::from_str(&text).unwrap();
                assert_eq!(v["config_hash"], hash.as_str(), "{}", path.display());
                assert_eq!(v["seed"], cfg.seed, "{}", path.display());
            }
            Some("tsv") => {
                let head = text.lines().next().unwrap();
                assert!(head.contains(&hash) && head.contains(&format!("seed={}", cfg.seed)), "{}", path.display());
            }
            _ => {}
        }
    }
}

#[test]
fn halving_the_step_converges_at_first_order() {
    // same horizon t = 0.4 at h, h/2, h/4
    let finals: Vec<_> = [0.02, 0.01, 0.005]
        .iter()
        .map(|&h| {
            let mut cfg = short_chain((0.4 / h) as usize);
            cfg.flow.h = h;
            cfg.diagnostics.lipschitz_probes = 0;
            run_experiment(&cfg, None, GradientFault::None).unwrap().trace.final_ensemble
        })
        .collect();
    let coarse = w2(&finals[0], &finals[1]).unwrap();
    let fine = w2(&finals[1], &finals[2]).unwrap();
    let ratio = coarse / fine;
    assert!((1.6..2.5).contains(&ratio), "ratio {ratio}");
}

#[test]
fn entropy_fast_path_matches_the_full_gradient() {
    let cfg = short_chain(60);
    let mut fast = cfg.clone();
    fast.flow.entropy_fast_path = true;
    let a = run_experiment(&cfg, None, GradientFault::None).unwrap();
    let b = run_experiment(&fast, None, GradientFault::None).unwrap();
    let gap = w2(&a.trace.final_ensemble, &b.trace.final_ensemble).unwrap();
    assert!(gap <= 1e-8, "fast path drifted by {gap}");
}

#[test]
fn null_features_have_zero_value_lipschitz_constant() {
    let mut cfg = short_chain(0);
    cfg.policy.features = serde_json::from_value(serde_json::json!({
        "key": "random-fourier", "bound": 0.0, "freq_scale": 1.0, "seed": 1
    }))
    .unwrap();
    let prep = Prepared::new(&cfg).unwrap();
    let obj = prep.objective(GradientFault::None).unwrap();
    let ens = prep.initial_ensemble(&obj, 1);
    let est = estimate_lipschitz(
        &obj,
        &ens,
        &prep.flow.stages[0],
        &LipschitzOptions { probes: 8, box_half_width: 3.0, seed: 1 },
    )
    .unwrap();
    assert_eq!(est.c_v, 0.0);
    assert_eq!(est.k_v, 0.0);
}

#[test]
fn invalid_configs_are_rejected_before_any_compute() {
    let mut cfg = short_chain(10);
    cfg.flow.h = -1.0;
    let dir = tempfile::tempdir().unwrap();
    assert!(run_experiment(&cfg, Some(dir.path()), GradientFault::None).is_err());
    assert!(!dir.path().join("trace.jsonl").exists());
}

#[test]
fn shipped_model_files_match_the_builtin_environments() {
    use meanflow::harness::envs::{build_env, EnvConfig};
    use meanflow::safety_mdp::MdpFile;
    use meanflow::value::dp_optimal;

    let models = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/models");
    for key in ["safe_chain", "safe_resource"] {
        let from_file = MdpFile::from_path(models.join(format!("{key}.json"))).unwrap().into_mdp().unwrap();
        let env: EnvConfig = serde_json::from_value(serde_json::json!({ "key": key })).unwrap();
        let builtin = build_env(&env).unwrap();
        let a = dp_optimal(&from_file.augment().unwrap(), f64::INFINITY).unwrap().value;
        let b = dp_optimal(&builtin.augment().unwrap(), f64::INFINITY).unwrap().value;
        assert!((a - b).abs() <= 1e-12, "{key}: {a} vs {b}");
    }
}

#[test]
fn flipped_value_gradient_fails_the_gradient_check() {
    use meanflow::harness::checks::grad_check_prepared;

    let cfg = load_config(config_dir().join("grad_safe_chain.json")).unwrap();
    let prep = Prepared::new(&cfg).unwrap();
    let check = grad_check_prepared(&prep, 5, cfg.seed, GradientFault::FlipValueSign).unwrap();
    assert!(check.max_relative_error > 1e-3);
}
