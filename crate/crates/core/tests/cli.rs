//! End-to-end runs of the command-line front end on a tiny configuration.

use std::fs;
use std::path::Path;

use dap_core::cli::{exit_code, run, RunConfig, EXIT_DATA, EXIT_INVARIANT, EXIT_OK, EXIT_USAGE};
use dap_core::eval::parse_metrics_csv;
use dap_core::Error;

const TINY: &str = "\
[env]
task = push

[data]
n_expert = 12
n_random = 12

[train]
hidden = 16,16
dynamics_epochs = 2
policy_epochs = 2

[eval]
n_trials = 2
sweep_steps = 1,2
";

fn dap(cfg: &Path, out: &Path, args: &[&str]) -> i32 {
    let mut v = vec!["dap", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    v.extend_from_slice(args);
    run(v)
}

#[test]
fn full_command_sequence_writes_the_output_tree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("run");

    assert_eq!(dap(&cfg, &out, &["eval"]), EXIT_DATA, "eval before collect");
    assert_eq!(dap(&cfg, &out, &["collect"]), EXIT_OK);
    for arm in ["dynamics", "policy-dap", "policy-fmp", "video", "dynamics-expert-only"] {
        assert_eq!(dap(&cfg, &out, &["train", arm]), EXIT_OK, "{arm}");
    }
    assert_eq!(dap(&cfg, &out, &["eval"]), EXIT_OK);
    assert_eq!(dap(&cfg, &out, &["ablate"]), EXIT_OK);
    assert_eq!(dap(&cfg, &out, &["report"]), EXIT_OK);

    for f in [
        "resolved_config.txt",
        "data/expert.dapd",
        "data/random.dapd",
        "data/norm.dapn",
        "models/policy-dap.dapw",
        "logs/dynamics.csv",
        "eval/metrics.csv",
        "eval/timing.csv",
        "eval/success.svg",
        "eval/extrapolation.svg",
        "eval/sweep.svg",
        "eval/resolved_config.txt",
        "ablate/metrics.csv",
        "ablate/ablation.svg",
        "ablate/summary.md",
        "report/summary.md",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }

    let expected = RunConfig::parse(TINY).unwrap();
    let resolved = fs::read_to_string(out.join("resolved_config.txt")).unwrap();
    let echoed = RunConfig::parse(&resolved).unwrap();
    assert_eq!(echoed.hash(), expected.hash());
    assert!(fs::read_to_string(out.join("ablate/summary.md")).unwrap().contains(&expected.hash()));

    let rows = parse_metrics_csv(&fs::read_to_string(out.join("ablate/metrics.csv")).unwrap()).unwrap();
    let cells = rows.iter().filter(|r| r.metric == "success_rate").count();
    assert_eq!(cells, 16, "four variants under four perturbations");

    for svg in ["eval/success.svg", "eval/sweep.svg", "ablate/ablation.svg"] {
        let text = fs::read_to_string(out.join(svg)).unwrap();
        roxmltree::Document::parse(&text).unwrap_or_else(|e| panic!("{svg}: {e}"));
    }
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "[train]\nlearning_rate = 1\n").unwrap();
    let out = dir.path().join("run");
    assert_eq!(dap(&cfg, &out, &["collect"]), EXIT_USAGE);
    assert_eq!(run(["dap", "--bogus", "collect"]), EXIT_USAGE);
    assert_eq!(run(["dap"]), EXIT_USAGE);
    let good = dir.path().join("good.cfg");
    fs::write(&good, TINY).unwrap();
    assert_eq!(dap(&good, &out, &["train", "nonsense"]), EXIT_USAGE);
    assert_eq!(run(["dap", "--help"]), EXIT_OK);
}

#[test]
fn error_classes_map_to_exit_codes() {
    assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
    assert_eq!(exit_code(&Error::Contract("x".into())), EXIT_DATA);
    assert_eq!(exit_code(&Error::Truncated("x".into())), EXIT_DATA);
    assert_eq!(exit_code(&Error::Invariant("x".into())), EXIT_INVARIANT);
}

#[test]
fn seed_flag_changes_the_hash_but_not_the_data_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(dap(&cfg, &a, &["--seed", "1", "collect"]), EXIT_OK);
    assert_eq!(dap(&cfg, &b, &["--seed", "2", "collect"]), EXIT_OK);
    assert_eq!(fs::read(a.join("data/expert.dapd")).unwrap(), fs::read(b.join("data/expert.dapd")).unwrap());
    let ra = RunConfig::parse(&fs::read_to_string(a.join("resolved_config.txt")).unwrap()).unwrap();
    let rb = RunConfig::parse(&fs::read_to_string(b.join("resolved_config.txt")).unwrap()).unwrap();
    assert_ne!(ra.hash(), rb.hash());
    assert_eq!((ra.train_seed, ra.sampler_seed), (1, 1));
}
