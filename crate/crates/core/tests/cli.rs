use std::path::Path;
use std::process::{Command, Output};

fn softservo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_softservo")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        "seed = 1\n[train]\ntotal_steps = 0\n[eval]\nepisodes = 12\ntest_points = 4\n",
    )
    .unwrap();
    path.display().to_string()
}

#[test]
fn fk_straight_arm_reaches_length() {
    let o = softservo(&["fk", "0", "0", "0.3"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("position [0.000000000, 0.000000000, 0.300000000]"), "{text}");
    assert!(text.contains("estimated kappa 0.000000000 tau 0.000000000"), "{text}");
}

#[test]
fn fk_accepts_negative_strains_and_recovers_them() {
    let o = softservo(&["fk", "--", "-4", "-7"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("estimated kappa -4.000000000 tau -7.000000000"));
}

#[test]
fn fk_rejects_arc_length_past_tip() {
    let o = softservo(&["fk", "1", "1", "0.5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_config_is_a_config_error() {
    let o = softservo(&["--config", "/nonexistent/run.toml", "fk", "0", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[env]\nmax_stepz = 3\n").unwrap();
    let o = softservo(&["--config", path.to_str().unwrap(), "fk", "0", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("max_stepz"));
}

#[test]
fn unknown_flag_fails_fast() {
    let o = softservo(&["train", "--bogus"]);
    assert!(!o.status.success());
}

#[test]
fn help_lists_every_subcommand() {
    let text = stdout(&softservo(&["--help"]));
    for cmd in ["train", "eval", "rollout", "servo-test", "fk", "report"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
    let eval = stdout(&softservo(&["eval", "--help"]));
    for flag in ["--config", "--seed", "--out", "--mode", "--workers", "--threshold"] {
        assert!(eval.contains(flag), "{flag} missing from eval help");
    }
}

#[test]
fn servo_nominal_plant_takes_one_iteration() {
    let o = softservo(&["servo-test", "5", "2"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("converged after 1 iteration(s)"), "{}", stdout(&o));
}

#[test]
fn servo_biased_plant_converges_and_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    let plant = dir.path().join("plant.toml");
    std::fs::write(&plant, "bias_b = 0.85\nbias_r1 = 1.15\nbias_r2 = 0.9\n").unwrap();
    let out = dir.path().join("servo");
    let o = softservo(&["servo-test", "6", "-3", "--plant", plant.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("converged after"), "{text}");
    let csv = std::fs::read_to_string(out.join("servo.csv")).unwrap();
    assert!(csv.starts_with("iter,b,r1,r2,kappa_est,tau_est,err_kappa,err_tau\n"));
}

#[test]
fn train_zero_steps_then_eval_and_rollout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let train_out = dir.path().join("train");
    let o = softservo(&["--config", &cfg, "train", "--out", train_out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = train_out.join("checkpoint.json");
    assert!(ckpt.exists());
    assert_eq!(std::fs::read_to_string(train_out.join("curve.csv")).unwrap(), "step,episode_return,eval_success\n");

    let eval_out = dir.path().join("eval");
    let o = softservo(&[
        "--config", &cfg, "eval", "--checkpoint", ckpt.to_str().unwrap(), "--mode", "deploy-sim", "--points",
        "--workers", "2", "--threshold", "200", "--out", eval_out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let scatter = std::fs::read_to_string(eval_out.join("scatter.csv")).unwrap();
    assert_eq!(scatter.lines().count(), 1 + 4 * 2);

    let o = softservo(&["--config", &cfg, "--seed", "5", "rollout", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    let steps = text.lines().filter(|l| l.starts_with("step ")).count();
    assert!((1..=8).contains(&steps), "{text}");
    let again = softservo(&["--config", &cfg, "--seed", "5", "rollout", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(stdout(&again), text);

    let report_out = dir.path().join("report");
    let o = softservo(&[
        "--config", &cfg, "report", "--episodes", eval_out.join("episodes.jsonl").to_str().unwrap(), "--threshold", "200",
        "--out", report_out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    for f in ["scatter.csv", "histogram.csv", "regions.csv", "summary.json"] {
        assert_eq!(std::fs::read(eval_out.join(f)).unwrap(), std::fs::read(report_out.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn oracle_policy_solves_every_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("oracle");
    let o = softservo(&["--config", &cfg, "eval", "--policy", "oracle", "--points", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["success_rates"][0][1], 1.0);
    assert_eq!(summary["repeatability"], 1.0);
}

#[test]
fn mismatched_checkpoint_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let train_out = dir.path().join("train");
    assert!(softservo(&["--config", &cfg, "train", "--out", train_out.to_str().unwrap()]).status.success());
    let other = dir.path().join("other.toml");
    std::fs::write(&other, "[env]\naction_scale_kappa = 2.0\n").unwrap();
    let ckpt = train_out.join("checkpoint.json");
    let o = softservo(&["--config", other.to_str().unwrap(), "eval", "--checkpoint", ckpt.to_str().unwrap(), "--out", dir.path().join("e").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    std::fs::write(&ckpt, "{\"magic\": \"SOFTSERVO-SAC\"").unwrap();
    let o = softservo(&["--config", &cfg, "eval", "--checkpoint", ckpt.to_str().unwrap(), "--out", dir.path().join("e").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
