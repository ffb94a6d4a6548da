use serde_json::{json, Value};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn ptrack() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ptrack"))
}

/// A config small enough for a test run.
fn small_config(dir: &Path) -> std::path::PathBuf {
    let cfg = json!({
        "sim": {"preset": "short_term", "overrides": {"episode_len": 200}, "episodes": 2},
        "learn": {
            "episodes": 3, "episode_len": 200, "stride": 20, "batch_size": 4,
            "updates_per_episode": 4, "checkpoint_every": 1, "lr": 1e-3
        },
        "eval": {"episodes": 2, "episode_len": 150, "recovery_episodes": 2, "recovery_len": 300},
        "serve": {"episodes": 1, "stride": 20}
    });
    let p = dir.join("c.json");
    std::fs::write(&p, cfg.to_string()).unwrap();
    p
}

fn run(args: &[&str], out: &Path, cfg: &Path) -> Output {
    let o = ptrack()
        .args(args)
        .arg("--config")
        .arg(cfg)
        .arg("--out-dir")
        .arg(out)
        .output()
        .unwrap();
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap()
}

fn error_line(o: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(stderr.lines().last().unwrap()).unwrap()
}

#[test]
fn train_with_the_same_seed_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&["train", "--seed", "7"], &a, &cfg);
    run(&["train", "--seed", "7", "--jobs", "1"], &b, &cfg);
    let ma = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(ma, std::fs::read_to_string(b.join("metrics.csv")).unwrap());
    assert!(ma.starts_with("episode,mean_reward,f1,loss,epsilon,lambda\n"));
    assert_eq!(ma.lines().count(), 4);
    assert_eq!(std::fs::read(a.join("final.ptrk")).unwrap(), std::fs::read(b.join("final.ptrk")).unwrap());
    assert_eq!(std::fs::read_dir(a.join("checkpoints")).unwrap().count(), 3);

    let c = dir.path().join("c");
    run(&["train", "--seed", "8"], &c, &cfg);
    assert_ne!(ma, std::fs::read_to_string(c.join("metrics.csv")).unwrap());
}

#[test]
fn diagnose_writes_one_row_per_policy_and_episode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let t = dir.path().join("t");
    run(&["train"], &t, &cfg);
    let net = t.join("final.ptrk");
    let d = dir.path().join("d");
    let o = run(
        &["diagnose", "--checkpoint", net.to_str().unwrap(), "--classifier", net.to_str().unwrap()],
        &d,
        &cfg,
    );
    let mut rd = csv::Reader::from_path(d.join("ablation.csv")).unwrap();
    assert_eq!(rd.headers().unwrap(), vec!["policy", "episode", "p", "r", "f1"]);
    let mut keys: Vec<(String, String)> = rd
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[1].to_string())
        })
        .collect();
    assert_eq!(keys.len(), 10);
    keys.sort();
    keys.dedup();
    assert_eq!(keys.len(), 10);
    let summary = stdout_json(&o);
    for p in ["online", "offline_motion", "offline_appearance", "offline_both", "q_learned"] {
        assert!(summary[p]["mean_f1"].is_number(), "{p}");
    }
    let ignore = std::fs::read_to_string(d.join("ignore.csv")).unwrap();
    assert_eq!(ignore.lines().count(), 6);
}

#[test]
fn diagnose_without_networks_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = ptrack()
        .args(["diagnose", "--config"])
        .arg(&cfg)
        .arg("--out-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_line(&o)["error"]["kind"], "config");
}

#[test]
fn eval_and_recovery_report_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = run(&["eval"], dir.path(), &cfg);
    let f1 = stdout_json(&o)["online"]["mean_f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));
    let rows = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert_eq!(rows.lines().count(), 3);

    let o = run(&["recovery"], dir.path(), &cfg);
    let s = stdout_json(&o);
    assert!(s["cuts"].as_u64().unwrap() > 0);
    let rows = std::fs::read_to_string(dir.path().join("recovery.csv")).unwrap();
    assert_eq!(rows.lines().count() as u64, s["cuts"].as_u64().unwrap() + 1);
}

#[test]
fn simulate_writes_importable_episodes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    run(&["simulate", "--seed", "3"], dir.path(), &cfg);
    let a = ptrack::sim::import_episode(&dir.path().join("episode_0")).unwrap();
    let b = ptrack::sim::import_episode(&dir.path().join("episode_1")).unwrap();
    assert_eq!(a.len(), 200);
    assert_ne!(a.ground_truth, b.ground_truth);
    let spec: ptrack::sim::ScenarioSpec =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("episode_0/spec.json")).unwrap()).unwrap();
    assert_eq!(spec.seed, ptrack::learn::train_episode_seed(3, 0));
}

#[test]
fn replay_inspect_summarizes_and_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    run(&["train"], dir.path(), &cfg);
    let db = dir.path().join("replay.jsonl");
    let o = ptrack().args(["replay-inspect"]).arg(&db).output().unwrap();
    assert!(o.status.success());
    let s = stdout_json(&o);
    // 3 episodes of 200 frames at stride 20
    assert_eq!(s["tuples"], 30);
    assert_eq!(s["episodes"], 3);
    assert_eq!(s["terminal"], 3);
    let total: u64 = s["actions"].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(total, 30);

    let o = ptrack().args(["replay-inspect", "--dump"]).arg(&db).output().unwrap();
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 31);
    assert!(text.starts_with("episode,frame,motion,appearance,reward,terminal\n"));
}

#[test]
fn flags_and_overrides_reach_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    run(
        &["eval", "--seed", "4", "--stride", "10", "--epsilon", "0.3", "--lambda", "0.2", "--set", "learn.lr=0.01"],
        dir.path(),
        &cfg,
    );
    let used: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(used["seed"], 4);
    assert_eq!(used["learn"]["seed"], 4);
    assert_eq!(used["learn"]["stride"], 10);
    assert_eq!(used["serve"]["stride"], 10);
    assert_eq!(used["learn"]["epsilon_start"], 0.3);
    assert_eq!(used["learn"]["lambda_end"], 0.2);
    assert_eq!(used["learn"]["lr"], 0.01);
}

#[test]
fn unknown_config_keys_fail_with_an_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, json!({"learn": {"learning_rate": 0.1}}).to_string()).unwrap();
    let o = ptrack().args(["eval", "--config"]).arg(&p).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let e = error_line(&o);
    assert_eq!(e["error"]["kind"], "config");
    assert!(e["error"]["message"].as_str().unwrap().contains("learning_rate"));

    let o = ptrack().args(["eval", "--set", "backend.roi=2"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_line(&o)["error"]["kind"], "config");
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = ptrack()
        .args(["eval", "--checkpoint", "/nonexistent/net.ptrk", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_line(&o)["error"]["kind"], "io");
}

#[test]
fn unknown_subcommand_prints_usage() {
    let o = ptrack().arg("frobnicate").output().unwrap();
    assert!(!o.status.success());
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("Usage"), "{stderr}");
    assert_eq!(error_line(&o)["error"]["kind"], "usage");
}

#[test]
fn serve_lists_recorded_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut child = ptrack()
        .args(["serve", "--bind", "127.0.0.1:0", "--config"])
        .arg(&cfg)
        .arg("--out-dir")
        .arg(dir.path())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = serde_json::from_str::<Value>(&line).unwrap()["listening"].as_str().unwrap().to_string();

    let mut s = std::net::TcpStream::connect(&addr).unwrap();
    write!(s, "GET /runs HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut resp = String::new();
    s.read_to_string(&mut resp).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    let body: Value = serde_json::from_str(resp.split("\r\n\r\n").nth(1).unwrap()).unwrap();
    assert_eq!(body["runs"][0]["run_id"], "r0");
    assert_eq!(body["runs"][0]["frames"], 200);
}
