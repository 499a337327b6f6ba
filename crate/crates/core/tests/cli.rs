use std::path::PathBuf;
use std::process::{Command, Output};

fn tcpconform(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tcpconform"))
        .args(args)
        .env_remove("TCPCONFORM_SEED")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tmp(name: &str) -> PathBuf {
    std::env::temp_dir().join(format!("tcpc_cli_{}_{name}", std::process::id()))
}

#[test]
fn scenario_handshake_emits_three_segments() {
    let o = tcpconform(&["scenario", "handshake"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let sent: Vec<String> = stdout(&o)
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["kind"] == "SegmentSent")
        .map(|v| v["flags"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(sent, ["SYN", "SYN+ACK", "ACK"]);
}

#[test]
fn buggy_shutdown_race_exits_one() {
    let o = tcpconform(&["scenario", "shutdown-race", "--buggy"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("refused CLOSE_WAIT -> FIN_WAIT_1"), "{}", stderr(&o));
}

#[test]
fn same_seed_same_trace_bytes() {
    let (a, b) = (tmp("a.jsonl"), tmp("b.jsonl"));
    for p in [&a, &b] {
        let o = tcpconform(&["scenario", "handshake", "--seed", "7", "--out", p.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0));
        assert!(o.stdout.is_empty());
    }
    let (x, y) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let _ = (std::fs::remove_file(&a), std::fs::remove_file(&b));
    assert!(!x.is_empty());
    assert_eq!(x, y);
}

#[test]
fn seed_falls_back_to_environment() {
    let run = |env: Option<&str>, args: &[&str]| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_tcpconform"));
        c.args(args).env_remove("TCPCONFORM_SEED");
        if let Some(v) = env {
            c.env("TCPCONFORM_SEED", v);
        }
        c.output().unwrap()
    };
    let env = run(Some("5"), &["scenario", "shutdown-race-random"]);
    let flag = run(None, &["scenario", "shutdown-race-random", "--seed", "5"]);
    assert_eq!(env.stdout, flag.stdout);
    assert!(stderr(&env).contains("seed 5"));
}

#[test]
fn conformance_default_passes() {
    let o = tcpconform(&["conformance"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("9504"));
    assert!(out.contains("overall: PASS"));
}

#[test]
fn conformance_buggy_fails_the_shutdown_check() {
    let o = tcpconform(&["conformance", "--buggy", "--check", "shutdown", "--format", "json"]);
    assert_eq!(o.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["passed"], false);
    assert_eq!(v["checks"][0]["name"], "shutdown");
}

#[test]
fn conformance_single_check() {
    let o = tcpconform(&["conformance", "--check", "closure", "--format", "json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["checks"].as_array().unwrap().len(), 1);
    assert_eq!(v["checks"][0]["cases"], 11);
}

#[test]
fn dump_automaton_listing() {
    let o = tcpconform(&["dump-automaton"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l == "FIN_WAIT_1 rcv(FIN+ACK) TIME_WAIT"));
    assert!(!out.lines().any(|l| l.starts_with("CLOSE_WAIT ") && l.ends_with(" FIN_WAIT_1")));
    let j = tcpconform(&["dump-automaton", "--format", "jsonl"]);
    let lines: Vec<&str> = std::str::from_utf8(&j.stdout).unwrap().lines().collect();
    assert_eq!(lines.len(), out.lines().count());
    for l in lines {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert!(v["from"].is_string() && v["trigger"].is_string() && v["to"].is_string());
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(tcpconform(&["scenario", "no-such-scenario"]).status.code(), Some(2));
    assert_eq!(tcpconform(&["conformance", "--check", "bogus"]).status.code(), Some(2));
    assert_eq!(tcpconform(&["scenario", "handshake", "--msl", "0"]).status.code(), Some(2));
    assert_eq!(tcpconform(&["--seed", "x", "dump-automaton"]).status.code(), Some(2));
    assert_eq!(tcpconform(&[]).status.code(), Some(2));
}

#[test]
fn scenario_from_file() {
    let p = tmp("race.txt");
    std::fs::write(
        &p,
        "[a]\nopen\nconnect 10.0.0.2 80\nsleep 1\nsend 78\nshutdown\nclose\n[b]\nopen\naccept 80\ninject-rst\nexpect a CLOSED\nexpect b ESTABLISHED\n",
    )
    .unwrap();
    let ok = tcpconform(&["scenario", p.to_str().unwrap(), "--format", "table"]);
    let bad = tcpconform(&["scenario", p.to_str().unwrap(), "--buggy"]);
    std::fs::write(&p, "[a]\nopen\nsend 00\n").unwrap();
    let invalid = tcpconform(&["scenario", p.to_str().unwrap()]);
    let _ = std::fs::remove_file(&p);
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));
    assert!(stdout(&ok).contains("SegmentSent"));
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("CLOSED -> FIN_WAIT_1"));
    assert_eq!(invalid.status.code(), Some(2));
}
