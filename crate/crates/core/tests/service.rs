use std::path::Path;
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use rungs::client::{Client, ClientError};
use rungs::journal::{EventKind, Journal};
use rungs::service::{self, PollResponse, ResultAck, Service, ServiceConfig, WireJob, WireResult};

struct Server {
    url: String,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    handle: Option<thread::JoinHandle<()>>,
}

impl Server {
    fn start(config: ServiceConfig) -> Self {
        let svc = Service::load(config).expect("service loads");
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
        let handle = thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
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
        let addr = addr_rx.recv().unwrap();
        Self { url: format!("http://{addr}"), stop: Some(stop), handle: Some(handle) }
    }

    fn client(&self) -> Client {
        Client::new(&self.url)
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn config(dir: &Path) -> ServiceConfig {
    let mut c = ServiceConfig::new(dir);
    c.fsync = false;
    c
}

fn nine_config_spec(mode: &str) -> Value {
    json!({
        "dimension": [
            {"name": "lr", "kind": "continuous-log", "lower": 1e-4, "upper": 1e-1},
            {"name": "opt", "kind": "categorical", "choices": ["sgd", "adam"]}
        ],
        "mode": mode, "n": 9, "max_resource": 9, "min_resource": 1, "eta": 3, "brackets": [0], "seed": 3
    })
}

fn status_code(e: ClientError) -> u16 {
    match e {
        ClientError::Status { status, .. } => status,
        other => panic!("expected an HTTP status, got {other}"),
    }
}

fn take_job(c: &Client, id: &str) -> WireJob {
    match c.poll(id, "w1").unwrap() {
        PollResponse::Job { job } => job,
        other => panic!("expected a job, got {other:?}"),
    }
}

fn result(job: &WireJob, loss: f64) -> WireResult {
    WireResult { token: job.token, loss, resource: job.resource, worker_id: Some("w1".into()), checkpoint: None, train_ms: Some(5) }
}

fn loss_of(job: &WireJob) -> f64 {
    (job.config_id as f64 * 0.37).fract() + 1.0 / job.resource as f64
}

/// Polls and reports until the server says the experiment is finished.
fn drive(c: &Client, id: &str) -> usize {
    let mut jobs = 0;
    loop {
        match c.poll(id, "w1").unwrap() {
            PollResponse::Job { job } => {
                assert_eq!(c.report(id, &result(&job, loss_of(&job))).unwrap(), ResultAck::Recorded);
                jobs += 1;
            }
            PollResponse::NoWork { finished: true, .. } => return jobs,
            PollResponse::NoWork { .. } => panic!("a lone sequential worker is never blocked"),
        }
    }
}

#[test]
fn minimal_spec_gets_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(config(dir.path()));
    let c = server.client();
    let spec = json!({"dimension": [{"name": "x", "kind": "continuous-linear", "lower": 0.0, "upper": 1.0}], "n": 100, "max_resource": 256});
    let created = c.submit_value(&spec).unwrap();
    assert_eq!(created.settings.eta, 4);
    assert_eq!(created.settings.min_resource, 1);
    assert_eq!(created.settings.brackets, vec![0, 1, 2]);
    let listed = c.list().unwrap();
    assert_eq!(listed.len(), 1);
    assert_eq!(listed[0].experiment_id, created.experiment_id);

    let st = c.status(&created.experiment_id).unwrap();
    assert!(st.status.incumbent.is_none());
    assert!(st.status.brackets.iter().flat_map(|b| &b.rungs).all(|r| r.completed == 0 && r.pending == 0));

    let single = c.submit_value(&nine_config_spec("asha")).unwrap();
    assert_eq!(single.settings.brackets, vec![0]);
}

#[test]
fn invalid_specs_list_fields() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(config(dir.path()));
    let mut spec = nine_config_spec("asha");
    spec["n"] = json!(0);
    spec["eta"] = json!(1);
    match server.client().submit_value(&spec) {
        Err(ClientError::Status { status, body }) => {
            assert_eq!(status, 422);
            let body: Value = serde_json::from_str(&body).unwrap();
            let fields: Vec<&str> = body["fields"].as_array().unwrap().iter().map(|f| f["field"].as_str().unwrap()).collect();
            assert!(fields.contains(&"n") && fields.contains(&"eta"), "{fields:?}");
        }
        other => panic!("expected 422, got {other:?}"),
    }
    let err = server.client().submit_value(&json!({"n": "many"})).unwrap_err();
    assert_eq!(status_code(err), 400);
}

#[test]
fn nine_config_bracket_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(config(dir.path()));
    let c = server.client();
    let id = c.submit_value(&nine_config_spec("sync-sha")).unwrap().experiment_id;

    let first = take_job(&c, &id);
    assert_eq!((first.config_id, first.rung, first.resource), (0, 0, 1));
    assert!(first.hyperparameters.contains_key("lr") && first.hyperparameters.contains_key("opt"));
    c.report(&id, &result(&first, loss_of(&first))).unwrap();

    let mut last_seq = c.status(&id).unwrap().status.sequence_no;
    let mut jobs = 1;
    loop {
        match c.poll(&id, "w1").unwrap() {
            PollResponse::Job { job } => {
                assert_eq!(job.resource, 3u64.pow(job.rung as u32));
                c.report(&id, &result(&job, loss_of(&job))).unwrap();
                jobs += 1;
            }
            PollResponse::NoWork { finished, .. } => {
                assert!(finished);
                break;
            }
        }
        let seq = c.status(&id).unwrap().status.sequence_no;
        assert!(seq > last_seq);
        last_seq = seq;
    }
    assert_eq!(jobs, 13);
    let st = c.status(&id).unwrap();
    let widths: Vec<usize> = st.status.brackets[0].rungs.iter().map(|r| r.completed).collect();
    assert_eq!(widths, [9, 3, 1]);
    assert!(st.status.finished);
    assert!(matches!(c.poll(&id, "w2").unwrap(), PollResponse::NoWork { finished: true, .. }));

    let csv = c.export(&id, "csv").unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "wall_time,config_id,rung,bracket,resource,loss");
    assert_eq!(lines.count(), 13);
    let jsonl = c.export(&id, "jsonlines").unwrap();
    let row: Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    assert!(row["hyperparameters"]["lr"].is_f64());
    assert_eq!(status_code(c.export(&id, "xml").unwrap_err()), 400);
}

#[test]
fn duplicate_nan_and_bad_reports() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(config(dir.path()));
    let c = server.client();
    let id = c.submit_value(&nine_config_spec("asha")).unwrap().experiment_id;
    let job = take_job(&c, &id);
    let journal = service::journal_path(dir.path(), &id);

    let body = json!({"token": job.token, "loss": "nan", "resource": job.resource});
    let nan: WireResult = serde_json::from_value(body).unwrap();
    assert_eq!(c.report(&id, &nan).unwrap(), ResultAck::Recorded);
    let events = Journal::load(&journal).unwrap().len();
    assert_eq!(c.report(&id, &nan).unwrap(), ResultAck::Duplicate);
    assert_eq!(Journal::load(&journal).unwrap().len(), events, "a duplicate adds no event");
    let recorded = Journal::load(&journal).unwrap().into_iter().find_map(|e| match e.kind {
        EventKind::ResultRecorded { loss, .. } => Some(loss),
        _ => None,
    });
    assert_eq!(recorded, Some(f64::INFINITY));

    // Same token, different loss.
    assert_eq!(status_code(c.report(&id, &result(&job, 0.5)).unwrap_err()), 409);
    let mut unknown = result(&job, 0.5);
    unknown.token = 4242;
    assert_eq!(status_code(c.report(&id, &unknown).unwrap_err()), 404);

    let next = take_job(&c, &id);
    let mut wrong = result(&next, 0.5);
    wrong.resource += 1;
    assert_eq!(status_code(c.report(&id, &wrong).unwrap_err()), 400);
    let mut ghost = result(&next, 0.5);
    ghost.checkpoint = Some("ab".repeat(32));
    assert_eq!(status_code(c.report(&id, &ghost).unwrap_err()), 400);

    assert_eq!(status_code(c.status("exp-999999").unwrap_err()), 404);
    assert_eq!(status_code(c.poll("exp-999999", "w").unwrap_err()), 404);
}

#[test]
fn restart_replays_journal() {
    let dir = tempfile::tempdir().unwrap();
    let (id, before, outstanding) = {
        let server = Server::start(config(dir.path()));
        let c = server.client();
        let id = c.submit_value(&nine_config_spec("asha")).unwrap().experiment_id;
        for _ in 0..5 {
            let job = take_job(&c, &id);
            c.report(&id, &result(&job, loss_of(&job))).unwrap();
        }
        let outstanding = take_job(&c, &id);
        let before = c.status(&id).unwrap();
        (id, before, outstanding)
    };
    let server = Server::start(config(dir.path()));
    let c = server.client();
    let after = c.status(&id).unwrap();
    assert_eq!(after.status, before.status);
    // The job handed out before the restart can still be reported.
    assert_eq!(c.report(&id, &result(&outstanding, loss_of(&outstanding))).unwrap(), ResultAck::Recorded);
    let rest = drive(&c, &id);
    assert_eq!(rest + 6, 13);
    let second = c.submit_value(&nine_config_spec("asha")).unwrap().experiment_id;
    assert_ne!(second, id);
}

#[test]
fn checkpoints_flow_to_promotions() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(config(dir.path()));
    let c = server.client();
    let id = c.submit_value(&nine_config_spec("asha")).unwrap().experiment_id;
    let mut digests = std::collections::BTreeMap::new();
    let mut resumed = 0;
    loop {
        let job = match c.poll(&id, "w1").unwrap() {
            PollResponse::Job { job } => job,
            PollResponse::NoWork { .. } => break,
        };
        if job.rung > 0 {
            let want = &digests[&(job.config_id, job.rung - 1)];
            assert_eq!(job.resume_from.as_ref(), Some(want));
            assert_eq!(job.prior_resource, Some(job.resource / 3));
            let bytes = c.download_checkpoint(&id, want).unwrap();
            assert_eq!(bytes, format!("weights {} {}", job.config_id, job.rung - 1).into_bytes());
            resumed += 1;
        } else {
            assert!(job.resume_from.is_none());
        }
        let blob = format!("weights {} {}", job.config_id, job.rung);
        let r = c.upload_checkpoint(&id, job.config_id, job.rung, blob.as_bytes()).unwrap();
        assert_eq!(r.size, blob.len() as u64);
        assert_eq!(r.digest, rungs::checkpoint::digest_of(blob.as_bytes()));
        digests.insert((job.config_id, job.rung), r.digest.clone());
        let mut res = result(&job, loss_of(&job));
        res.checkpoint = Some(r.digest);
        c.report(&id, &res).unwrap();
    }
    assert_eq!(resumed, 4);
    assert_eq!(status_code(c.download_checkpoint(&id, &"0".repeat(64)).unwrap_err()), 404);
    assert_eq!(status_code(c.download_checkpoint(&id, "not-a-digest").unwrap_err()), 400);
}

#[test]
fn expired_lease_requeues_the_job() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.initial_lease_ms = 300;
    cfg.min_lease_ms = 300;
    let server = Server::start(cfg);
    let c = server.client();
    let id = c.submit_value(&nine_config_spec("asha")).unwrap().experiment_id;
    let lost = take_job(&c, &id);
    assert_eq!(lost.lease_ms, 300);
    thread::sleep(Duration::from_millis(900));
    let again = take_job(&c, &id);
    assert_eq!(again.config_id, lost.config_id);
    assert_ne!(again.token, lost.token);
    assert_eq!(status_code(c.report(&id, &result(&lost, 0.1)).unwrap_err()), 409);
    assert_eq!(c.report(&id, &result(&again, 0.1)).unwrap(), ResultAck::Recorded);
    let dropped = Journal::load(&service::journal_path(dir.path(), &id))
        .unwrap()
        .iter()
        .filter(|e| matches!(e.kind, EventKind::JobDropped { .. }))
        .count();
    assert_eq!(dropped, 1);
}

#[test]
fn width_limit_blocks_then_resume_widens() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(config(dir.path()));
    let c = server.client();
    let id = c.submit_value(&nine_config_spec("asha")).unwrap().experiment_id;
    let held: Vec<WireJob> = (0..9).map(|_| take_job(&c, &id)).collect();
    match c.poll(&id, "w1").unwrap() {
        PollResponse::NoWork { finished, backoff_ms } => {
            assert!(!finished);
            assert!(backoff_ms > 0);
        }
        other => panic!("expected no work, got {other:?}"),
    }
    for job in &held {
        c.report(&id, &result(job, loss_of(job))).unwrap();
    }
    drive(&c, &id);
    let st = c.resume(&id, 9).unwrap();
    assert!(!st.status.finished);
    assert_eq!(st.status.brackets[0].width_limit, Some(18));
    let job = take_job(&c, &id);
    assert_eq!(job.rung, 0);
    assert_eq!(job.config_id, 9);

    let sync = c.submit_value(&nine_config_spec("sync-sha")).unwrap().experiment_id;
    assert_eq!(status_code(c.resume(&sync, 9).unwrap_err()), 409);
}

#[test]
fn allocation_caps_parallel_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.capacity = 4;
    let server = Server::start(cfg);
    let c = server.client();
    let mut spec = nine_config_spec("asha");
    spec["kappa"] = json!(2);
    let a = c.submit_value(&spec).unwrap().experiment_id;
    let _j1 = take_job(&c, &a);
    let _j2 = take_job(&c, &a);
    assert!(matches!(c.poll(&a, "w3").unwrap(), PollResponse::NoWork { finished: false, .. }));
    assert_eq!(c.status(&a).unwrap().allocation, 4);

    // A second experiment takes half of the cluster.
    let b = c.submit_value(&spec).unwrap().experiment_id;
    assert_eq!(c.status(&b).unwrap().allocation, 2);
    assert_eq!(c.status(&a).unwrap().allocation, 2);
    let _k1 = take_job(&c, &b);
    assert!(matches!(c.poll(&b, "w5").unwrap(), PollResponse::NoWork { .. }));
}
