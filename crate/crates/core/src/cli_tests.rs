use std::path::Path;

use super::{run, EXIT_CONFIG, EXIT_FAILURE};

const SMALL: &str = r#"
seed = 5

[env.spec]
layers = 3
width = 4
edge_density = 0.3
horizon = 12

[dataset]
episodes = 200

[plan]
episodes = 4
weights = "blended"

[plan.fit]
iterations = 50

[plan.planner]
depth = 2
simulations = 40
horizon = 12
"#;

const FAST_VERIFY: &str = r#"
[verify]
admissibility_instances = 10
greedy_gap_layers = [3, 4]
audit_seeds = 2
aipw_replications = 400
"#;

fn invoke(dir: &Path, config: &str, cmd: &str) -> i32 {
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, config).unwrap();
    let out = dir.join("out");
    run([
        "picmdp",
        cmd,
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
}

fn lines(p: &Path) -> usize {
    std::fs::read_to_string(p).unwrap().lines().count()
}

#[test]
fn pipeline_commands_write_their_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_eq!(invoke(dir.path(), SMALL, "generate"), 0);
    assert!(std::fs::read_to_string(out.join("graph.dot")).unwrap().starts_with("digraph"));
    assert!(out.join("scm.toml").exists());

    assert_eq!(invoke(dir.path(), SMALL, "dataset"), 0);
    assert!(lines(&out.join("dataset.csv")) > 200);

    assert_eq!(invoke(dir.path(), SMALL, "estimate"), 0);
    assert!(lines(&out.join("estimates.csv")) > 1);

    assert_eq!(invoke(dir.path(), SMALL, "plan"), 0);
    assert_eq!(lines(&out.join("episodes.csv")), 5);
    for f in ["trace.csv", "metrics.csv"] {
        assert!(lines(&out.join(f)) > 1, "{f}");
    }
}

#[test]
fn generate_is_deterministic_and_seed_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_eq!(invoke(dir.path(), SMALL, "generate"), 0);
    let a = std::fs::read(out.join("scm.toml")).unwrap();
    assert_eq!(invoke(dir.path(), SMALL, "generate"), 0);
    assert_eq!(a, std::fs::read(out.join("scm.toml")).unwrap());

    let cfg = dir.path().join("run.toml");
    let code = run([
        "picmdp",
        "generate",
        "--seed",
        "6",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert_ne!(a, std::fs::read(out.join("scm.toml")).unwrap());
}

#[test]
fn config_errors_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(invoke(dir.path(), "[plan]\nepisodez = 3\n", "plan"), EXIT_CONFIG);
    assert_eq!(invoke(dir.path(), "seed = \"x\"\n", "generate"), EXIT_CONFIG);
    assert_eq!(invoke(dir.path(), "[bench]\nmethods = [\"nope\"]\n", "bench"), EXIT_CONFIG);
    assert_eq!(run(["picmdp", "frobnicate"]), EXIT_CONFIG);
    let missing = dir.path().join("absent.toml");
    assert_eq!(run(["picmdp", "generate", "--config", missing.to_str().unwrap()]), EXIT_CONFIG);
}

#[test]
fn verify_passes_on_defaults() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(invoke(dir.path(), FAST_VERIFY, "verify"), 0);
    let report = std::fs::read_to_string(dir.path().join("out/verify.csv")).unwrap();
    assert!(report.contains("pruning_admissibility"));
    assert!(report.contains("aipw_unbiased"));
    assert!(!report.contains(",false,"), "{report}");
}

#[test]
fn verify_fails_on_corrupted_propensities() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{FAST_VERIFY}propensity_scale = 0.5\n");
    assert_eq!(invoke(dir.path(), &cfg, "verify"), EXIT_FAILURE);
}
