use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fedharness"));
    for var in ["FH_ROOT", "FH_DATA_DIR", "FH_METRICS_ADDR", "FH_SEED", "FH_SAMPLE_INTERVAL"] {
        cmd.env_remove(var);
    }
    cmd.env("RUST_LOG", "warn");
    cmd
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// The shipped synthetic config shrunk for speed.
fn small_config(dir: &Path, clients: usize) -> PathBuf {
    let text = fs::read_to_string(configs().join("synthetic.cfg")).unwrap();
    let text = text
        .replace("\"num_clients\": 10", &format!("\"num_clients\": {clients}"))
        .replace("\"min_available_clients\": 10", &format!("\"min_available_clients\": {clients}"))
        .replace("\"samples_per_class\": 500", "\"samples_per_class\": 60")
        .replace("\"feature_dim\": 64", "\"feature_dim\": 8")
        .replace("\"rounds\": 5", "\"rounds\": 2");
    let path = dir.join("small.cfg");
    fs::write(&path, text).unwrap();
    path
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn missing_config_is_a_usage_error() {
    let out = bin().args(["simulate", "--clients", "3"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--config"), "{}", stderr(&out));
    assert!(stderr(&out).contains("Usage"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = bin().args(["report", "x", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_lists_flags() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--root", "--data-dir", "--metrics-addr", "--seed", "partition", "serve", "client", "simulate", "report"] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
    let out = bin().args(["simulate", "--help"]).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--config", "--clients", "--mode"] {
        assert!(text.contains(flag), "{flag} missing from simulate help");
    }
}

#[test]
fn runtime_failures_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["--root", dir.path().to_str().unwrap(), "simulate", "--config", "/nonexistent.cfg", "--clients", "2"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("error:"));

    let cfg = small_config(dir.path(), 3);
    let out = bin()
        .args(["--root", dir.path().to_str().unwrap(), "simulate", "--config", cfg.to_str().unwrap(), "--clients", "4"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

fn simulate_and_report(root: &Path, cfg: &Path, clients: usize, mode: &str) -> (String, String) {
    let out = bin()
        .args(["--root", root.to_str().unwrap(), "simulate", "--config", cfg.to_str().unwrap()])
        .args(["--clients", &clients.to_string(), "--mode", mode])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let run = stdout.lines().last().unwrap().trim().to_string();
    let report = root.join("report");
    let out = bin()
        .args(["report", &run, "--out", report.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    (
        fs::read_to_string(report.join("clients.csv")).unwrap(),
        fs::read_to_string(report.join("server.csv")).unwrap(),
    )
}

#[test]
fn deterministic_simulations_give_identical_reports() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = small_config(a.path(), 3);
    let first = simulate_and_report(a.path(), &cfg, 3, "det");
    let second = simulate_and_report(b.path(), &cfg, 3, "det");
    assert_eq!(first, second);
    // rounds x clients x local epochs, plus a header.
    assert_eq!(first.0.lines().count(), 2 * 3 * 2 + 1);
    assert_eq!(first.1.lines().count(), 2 + 1);
}

#[test]
fn seed_flag_overrides_env_and_changes_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2);
    let run = |root: &str, seed_flag: Option<&str>| {
        let mut cmd = bin();
        cmd.env("FH_SEED", "1").env("FH_ROOT", dir.path().join("env-root"));
        if let Some(s) = seed_flag {
            cmd.args(["--seed", s]);
        }
        let out = cmd
            .args(["--root", root, "partition", "--config", cfg.to_str().unwrap()])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
        String::from_utf8(out.stdout).unwrap()
    };
    let [r1, r2, r3] = ["r1", "r2", "r3"].map(|r| dir.path().join(r));
    let via_env = run(r1.to_str().unwrap(), None);
    let via_flag = run(r2.to_str().unwrap(), Some("2"));
    let again = run(r3.to_str().unwrap(), Some("2"));
    assert!(!dir.path().join("env-root").exists());
    assert_ne!(via_env, via_flag);
    assert_eq!(via_flag, again);
    let config = |r: &Path| fs::read_to_string(r.join("synthetic/config.json")).unwrap();
    assert_ne!(config(&r1), config(&r2));
    assert_eq!(config(&r2), config(&r3));
}

#[test]
fn partition_from_flags_prints_distribution() {
    let out = bin()
        .args(["--seed", "4", "partition", "--dataset", "synthetic", "--clients", "4", "--non-iid"])
        .args(["--dist", "pat:2", "--synthetic-classes", "4", "--synthetic-per-class", "40", "--synthetic-dim", "3"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("\"histogram\""), "{text}");
    let out = bin().args(["partition", "--dataset", "synthetic", "--clients", "4", "--non-iid"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn serve_and_clients_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2);
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let root = dir.path().to_str().unwrap();
    let server = bin()
        .args(["--root", root, "serve", "--config", cfg.to_str().unwrap(), "--listen", &addr])
        .stdout(std::process::Stdio::piped())
        .stderr(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let experiment = dir.path().join("synthetic");
    let clients: Vec<_> = (0..2)
        .map(|id| {
            bin()
                .args(["client", "--server", &addr, "--id", &id.to_string()])
                .args(["--experiment", experiment.to_str().unwrap()])
                .spawn()
                .unwrap()
        })
        .collect();
    for mut c in clients {
        assert!(c.wait().unwrap().success());
    }
    let out = server.wait_with_output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(experiment.join("runs/run-0/logs/server.jsonl").is_file());
    assert!(experiment.join("runs/run-0/results/client-1.jsonl").is_file());
}
