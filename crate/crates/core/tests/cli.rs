use std::path::Path;
use std::process::{Command, Output};
use std::thread;

use serde_json::Value;

use rungs::service::{self, Service, ServiceConfig};

const SPEC: &str = r#"
mode = "asha"
n = 9
max_resource = 9
min_resource = 1
eta = 3
brackets = [0]
seed = 4

[[dimension]]
name = "lr"
kind = "continuous-log"
lower = 1e-4
upper = 1e-1

[[dimension]]
name = "depth"
kind = "integer-range"
lower = 2
upper = 8
"#;

fn rungs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rungs")).args(args).env("RUNGS_LOG", "warn").output().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn write_spec(dir: &Path, text: &str) -> String {
    let path = dir.join("spec.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn validate_prints_resolved_settings() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), SPEC);
    let settings = stdout_json(&rungs(&["validate", &spec]));
    assert_eq!(settings["eta"], 3);
    assert_eq!(settings["widths"]["0"], 9);
}

#[test]
fn invalid_spec_fails_with_field_messages() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), &SPEC.replace("eta = 3", "eta = 1").replace("lower = 1e-4", "lower = 0.0"));
    let out = rungs(&["validate", &spec]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("eta") && err.contains("lr"), "{err}");

    let out = rungs(&["validate", "/nonexistent/spec.toml"]);
    assert!(!out.status.success());
}

#[test]
fn simulate_then_replay_and_export_the_journal() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), SPEC);
    let journal = dir.path().join("sim.bin");
    let trace = dir.path().join("trace.csv");
    let journal_arg = journal.to_str().unwrap();
    let summary = stdout_json(&rungs(&[
        "simulate",
        &spec,
        "--workers",
        "3",
        "--sigma",
        "0.5",
        "--journal",
        journal_arg,
        "--trace",
        trace.to_str().unwrap(),
    ]));
    assert_eq!(summary["finished"], true);
    assert_eq!(summary["configs_trained_to_max"], 1);
    assert_eq!(summary["jobs_started"], 13);
    let trace = std::fs::read_to_string(&trace).unwrap();
    assert_eq!(trace.lines().count(), 1 + 2 * 13);

    let status = stdout_json(&rungs(&["replay-verify", journal_arg]));
    assert_eq!(status["finished"], true);
    assert_eq!(status["configs_sampled"], 9);
    assert_eq!(status["incumbent"]["config_id"], summary["incumbent"]["config_id"]);

    let csv = rungs(&["export", "--journal", journal_arg]);
    assert!(csv.status.success());
    let csv = String::from_utf8(csv.stdout).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "wall_time,config_id,rung,bracket,resource,loss");
    assert_eq!(csv.lines().count(), 14);

    let mut bytes = std::fs::read(&journal).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(&journal, bytes).unwrap();
    assert!(!rungs(&["replay-verify", journal_arg]).status.success());
}

#[test]
fn submit_and_status_against_a_server() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = ServiceConfig::new(dir.path().join("data"));
    config.fsync = false;
    let svc = Service::load(config).unwrap();
    let (addr_tx, addr_rx) = std::sync::mpsc::channel();
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let server = thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            addr_tx.send(listener.local_addr().unwrap()).unwrap();
            service::serve(svc, listener, async {
                let _ = stopped.await;
            })
            .await
            .unwrap();
        });
    });
    let url = format!("http://{}", addr_rx.recv().unwrap());
    let spec = write_spec(dir.path(), SPEC);

    let out = rungs(&["submit", &spec, "--server", &url, "--kappa", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let id = String::from_utf8(out.stdout).unwrap().trim().to_owned();
    assert!(id.starts_with("exp-"));

    let status = stdout_json(&rungs(&["status", &id, "--server", &url]));
    assert_eq!(status["kappa"], 2);
    assert_eq!(status["finished"], false);
    let listed = stdout_json(&rungs(&["status", "--server", &url]));
    assert_eq!(listed.as_array().unwrap().len(), 1);
    let resumed = stdout_json(&rungs(&["resume", &id, "--additional-n", "3", "--server", &url]));
    assert_eq!(resumed["brackets"][0]["width_limit"], 12);
    assert!(!rungs(&["status", "exp-999999", "--server", &url]).status.success());

    stop.send(()).unwrap();
    server.join().unwrap();
}
