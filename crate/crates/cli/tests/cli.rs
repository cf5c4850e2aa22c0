use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "env": {"kind": "grid", "side": 3, "inner_steps": 4, "inner_episodes": 2},
  "planner": {"particles": 4, "nested": 2, "depth": 2, "resample_period": 1},
  "model": {"latent_dim": 3, "embed_widths": [4], "embed_dim": 3, "model_dim": 4, "state_dim": 3,
            "ssm_layers": 2, "head_widths": [5], "conv_channels": 2},
  "train": {"minibatch": 8, "sgd_steps": 2, "unroll": 8, "parallel_envs": 2, "elbo_samples": 2,
            "burn_in": 3, "decode_window": 2, "unroll_window": 2, "max_age": 4},
  "iterations": 2,
  "checkpoint_interval": 1,
  "eval_episodes": 3
}"#;

fn vbsd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vbsd")).args(args).env("VBSD_THREADS", "1").output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("c.json");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_is_reproducible_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let o = vbsd(&["train", "--config", &cfg, "--seed", "7", "--out", out.to_str().unwrap()]);
            assert!(o.status.success(), "{}", stderr(&o));
            out
        })
        .collect();
    for file in ["metrics.csv", "checkpoint_000001.vbsd", "checkpoint_000002.vbsd", "final.vbsd"] {
        let a = fs::read(runs[0].join(file)).unwrap();
        assert_eq!(a, fs::read(runs[1].join(file)).unwrap(), "{file} differs");
    }
    let metrics = fs::read_to_string(runs[0].join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert!(lines[0].starts_with("iteration,env_steps"));
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
    assert!(runs[0].join("timing.csv").exists());

    // a different seed changes the run
    let out = dir.path().join("c");
    assert!(vbsd(&["train", "--config", &cfg, "--seed", "8", "--out", out.to_str().unwrap()]).status.success());
    assert_ne!(fs::read(out.join("final.vbsd")).unwrap(), fs::read(runs[0].join("final.vbsd")).unwrap());
}

#[test]
fn eval_writes_returns_and_occupancy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let train_out = dir.path().join("t");
    assert!(vbsd(&["train", "--config", &cfg, "--out", train_out.to_str().unwrap(), "--iterations", "1"]).status.success());
    let ckpt = train_out.join("final.vbsd");
    let outs: Vec<_> = ["e1", "e2"]
        .iter()
        .map(|n| {
            let out = dir.path().join(n);
            let o = vbsd(&["eval", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--out", out.to_str().unwrap(), "--episodes", "4"]);
            assert!(o.status.success(), "{}", stderr(&o));
            out
        })
        .collect();
    let returns = fs::read_to_string(outs[0].join("returns.csv")).unwrap();
    assert_eq!(returns.lines().next().unwrap(), "episode,return,regret");
    assert_eq!(returns.lines().count(), 5);
    let occ = fs::read_to_string(outs[0].join("occupancy.csv")).unwrap();
    assert_eq!(occ.lines().next().unwrap(), "inner_episode,tile,visit_fraction");
    assert_eq!(occ.lines().count(), 1 + 2 * 9);
    for f in ["returns.csv", "occupancy.csv"] {
        assert_eq!(fs::read(outs[0].join(f)).unwrap(), fs::read(outs[1].join(f)).unwrap());
    }
}

#[test]
fn missing_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = vbsd(&["eval", "--config", &cfg, "--checkpoint", dir.path().join("nope.vbsd").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nope.vbsd"));
    let o = vbsd(&["eval", "--config", &cfg]);
    assert!(!o.status.success());
}

#[test]
fn negative_particle_count_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "{\n  \"planner\": {\"particles\": -4}\n}");
    let o = vbsd(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("planner.particles") && msg.contains("line 2"), "{msg}");

    let cfg = write_config(dir.path(), "{\"planner\": {\"particles\": 0}}");
    let o = vbsd(&["plan", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("planner.particles"));

    let cfg = write_config(dir.path(), "{\"planner\": {\"particles\": 4,}}");
    assert_eq!(vbsd(&["train", "--config", &cfg]).status.code(), Some(2));
    assert_eq!(vbsd(&["bogus"]).status.code(), Some(2));
}

#[test]
fn print_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = vbsd(&["train", "--config", &cfg, "--seed", "3", "--print-config"]);
    assert!(o.status.success());
    let dumped = String::from_utf8(o.stdout).unwrap();
    let again = write_config(dir.path(), &dumped);
    let o2 = vbsd(&["train", "--config", &again, "--print-config"]);
    assert_eq!(dumped, String::from_utf8(o2.stdout).unwrap());
    assert!(dumped.contains("\"seed\": 3"));
}

#[test]
fn plan_reports_policy_value_and_ess() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let state = dir.path().join("s.json");
    fs::write(&state, r#"{"obs": [0, 0, 0, 0, 1, 0, 0, 0, 0], "t": 2}"#).unwrap();
    let mut reports = Vec::new();
    for n in ["p1", "p2"] {
        let out = dir.path().join(n);
        let o = vbsd(&["plan", "--config", &cfg, "--state", state.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        reports.push(fs::read_to_string(out.join("plan.txt")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    assert!(reports[0].contains("value ") && reports[0].contains("ess ") && reports[0].contains("Discrete("));

    fs::write(&state, r#"{"obs": [1, 0]}"#).unwrap();
    let o = vbsd(&["plan", "--config", &cfg, "--state", state.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_subcommand_passes() {
    let o = vbsd(&["gradcheck"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{text}");
    assert!(text.contains("gradcheck PASS"));
}

#[test]
fn oracle_check_passes_at_4096_particles() {
    let o = vbsd(&["oracle-check"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{text}");
    assert!(text.contains("oracle-check PASS") && text.contains("4096"));
}
