//! C ABI over the `rungs` tuning engine.
//!
//! Every fallible call returns a [`RungsStatus`]. On failure a message is kept
//! per thread and can be read with [`rungs_last_error`]. Strings handed out by
//! this library must be released with [`rungs_string_free`], tuners with
//! [`rungs_tuner_free`]. A tuner is not thread safe; callers serialize access.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use rungs::bracket::{self, BracketError, BracketParams};
use rungs::journal::Journal;
use rungs::orchestrator::{ExperimentSpec, SpecError};
use rungs::scheduler::{self, AmdahlModel, ClusterDemand};
use rungs::tuner::{self, NextJob, RecordOutcome, Tuner, TunerError};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RungsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// The spec did not parse or failed validation.
    InvalidSpec = 3,
    InvalidArgument = 4,
    /// The token is not an outstanding job.
    UnknownToken = 5,
    /// Reading or writing the journal failed.
    Journal = 6,
    /// The engine refused the request, for instance extending a synchronous experiment.
    Rejected = 7,
    /// The output buffer is too small; the required length was written back.
    BufferTooSmall = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RungsJobKind {
    Job = 0,
    /// Nothing to hand out until a result arrives.
    Blocked = 1,
    Finished = 2,
}

/// A job to run, valid when `kind` is `RUNGS_JOB_KIND_JOB`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RungsJob {
    pub kind: RungsJobKind,
    pub token: u64,
    pub bracket: u32,
    pub early_stopping_rate: u32,
    pub config_id: u64,
    pub rung: u32,
    /// Resource to train to.
    pub resource: u64,
    /// Resource reached by the previous rung, 0 for rung 0.
    pub prior_resource: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RungsRung {
    pub configs: u64,
    pub resource: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RungsDemand {
    /// GPUs per task.
    pub kappa: u32,
    /// Runnable tasks.
    pub stack_size: u64,
    pub weight: f64,
}

/// Opaque tuner handle.
pub struct RungsTuner {
    inner: Tuner,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl ToString) {
    let text = msg.to_string().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn fail(status: RungsStatus, msg: impl ToString) -> RungsStatus {
    set_error(msg);
    status
}

fn tuner_status(e: TunerError) -> RungsStatus {
    let code = match &e {
        TunerError::Journal(_) => RungsStatus::Journal,
        TunerError::Spec(_) => RungsStatus::InvalidSpec,
        TunerError::UnknownToken(_) => RungsStatus::UnknownToken,
        _ => RungsStatus::Rejected,
    };
    fail(code, e)
}

fn guard(f: impl FnOnce() -> RungsStatus) -> RungsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(RungsStatus::Panic, "internal panic"),
    }
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, RungsStatus> {
    if p.is_null() {
        return Err(fail(RungsStatus::NullArgument, "null string argument"));
    }
    CStr::from_ptr(p).to_str().map_err(|e| fail(RungsStatus::InvalidUtf8, e))
}

unsafe fn write_string(out: *mut *mut c_char, text: String) -> RungsStatus {
    match CString::new(text) {
        Ok(s) => {
            *out = s.into_raw();
            RungsStatus::Ok
        }
        Err(e) => fail(RungsStatus::Rejected, e),
    }
}

fn bracket_status(e: BracketError) -> RungsStatus {
    fail(RungsStatus::InvalidArgument, e)
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread; do not free it.
#[no_mangle]
pub extern "C" fn rungs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn rungs_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates a tuner from a JSON experiment spec. With a non-null
/// `journal_path` the journal is written to that file (which must not exist),
/// otherwise it is kept in memory.
///
/// # Safety
/// `spec_json` and `journal_path` must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rungs_tuner_new(
    spec_json: *const c_char,
    journal_path: *const c_char,
    fsync: bool,
    now: u64,
    out: *mut *mut RungsTuner,
) -> RungsStatus {
    guard(|| {
        if out.is_null() {
            return fail(RungsStatus::NullArgument, "out is null");
        }
        let text = match read_str(spec_json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let spec = match ExperimentSpec::from_json_str(text) {
            Ok(spec) => spec,
            Err(e @ (SpecError::Invalid(_) | SpecError::Parse(_))) => return fail(RungsStatus::InvalidSpec, e),
        };
        let journal = if journal_path.is_null() {
            Journal::in_memory()
        } else {
            let path = match read_str(journal_path) {
                Ok(p) => p,
                Err(s) => return s,
            };
            match Journal::create(Path::new(path), fsync) {
                Ok(j) => j,
                Err(e) => return fail(RungsStatus::Journal, e),
            }
        };
        match Tuner::create(spec, journal, now) {
            Ok(t) => {
                *out = Box::into_raw(Box::new(RungsTuner { inner: t }));
                RungsStatus::Ok
            }
            Err(e) => tuner_status(e),
        }
    })
}

/// Replays the journal at `journal_path` and continues it, widening the
/// experiment by `additional_n` configurations.
///
/// # Safety
/// `journal_path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rungs_tuner_resume(
    journal_path: *const c_char,
    additional_n: u64,
    fsync: bool,
    now: u64,
    out: *mut *mut RungsTuner,
) -> RungsStatus {
    guard(|| {
        if out.is_null() {
            return fail(RungsStatus::NullArgument, "out is null");
        }
        let path = match read_str(journal_path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let journal = match Journal::open(Path::new(path), fsync) {
            Ok(j) => j,
            Err(e) => return fail(RungsStatus::Journal, e),
        };
        match tuner::resume(journal, additional_n, now) {
            Ok(t) => {
                *out = Box::into_raw(Box::new(RungsTuner { inner: t }));
                RungsStatus::Ok
            }
            Err(e) => tuner_status(e),
        }
    })
}

/// # Safety
/// `tuner` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rungs_tuner_free(tuner: *mut RungsTuner) {
    if !tuner.is_null() {
        drop(Box::from_raw(tuner));
    }
}

/// # Safety
/// `tuner` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rungs_tuner_next_job(tuner: *mut RungsTuner, now: u64, out: *mut RungsJob) -> RungsStatus {
    guard(|| {
        let (Some(t), false) = (tuner.as_mut(), out.is_null()) else {
            return fail(RungsStatus::NullArgument, "tuner or out is null");
        };
        let mut job = RungsJob {
            kind: RungsJobKind::Blocked,
            token: 0,
            bracket: 0,
            early_stopping_rate: 0,
            config_id: 0,
            rung: 0,
            resource: 0,
            prior_resource: 0,
        };
        match t.inner.next_job(now) {
            Ok(NextJob::Job(a)) => {
                job = RungsJob {
                    kind: RungsJobKind::Job,
                    token: a.token,
                    bracket: a.bracket as u32,
                    early_stopping_rate: a.early_stopping_rate,
                    config_id: a.config.config_id,
                    rung: a.rung as u32,
                    resource: a.resource,
                    prior_resource: a.prior_resource.unwrap_or(0),
                };
            }
            Ok(NextJob::Blocked) => {}
            Ok(NextJob::Finished) => job.kind = RungsJobKind::Finished,
            Err(e) => return tuner_status(e),
        }
        *out = job;
        RungsStatus::Ok
    })
}

/// Hyperparameter values of a configuration as a JSON object.
///
/// # Safety
/// `tuner` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rungs_tuner_config_json(
    tuner: *const RungsTuner,
    config_id: u64,
    out: *mut *mut c_char,
) -> RungsStatus {
    guard(|| {
        let (Some(t), false) = (tuner.as_ref(), out.is_null()) else {
            return fail(RungsStatus::NullArgument, "tuner or out is null");
        };
        if config_id >= t.inner.experiment().status().configs_sampled {
            return fail(RungsStatus::InvalidArgument, format!("config {config_id} has not been sampled"));
        }
        match serde_json::to_string(&t.inner.config(config_id).values) {
            Ok(text) => write_string(out, text),
            Err(e) => fail(RungsStatus::Rejected, e),
        }
    })
}

/// Records the loss of an outstanding job. NaN counts as the worst loss.
/// Re-sending an identical result is accepted and sets `*duplicate`.
///
/// # Safety
/// `tuner` must be a live handle; `duplicate` may be null.
#[no_mangle]
pub unsafe extern "C" fn rungs_tuner_record_result(
    tuner: *mut RungsTuner,
    token: u64,
    loss: f64,
    now: u64,
    duplicate: *mut bool,
) -> RungsStatus {
    guard(|| {
        let Some(t) = tuner.as_mut() else { return fail(RungsStatus::NullArgument, "tuner is null") };
        match t.inner.record_result(token, loss, now) {
            Ok(outcome) => {
                if !duplicate.is_null() {
                    *duplicate = outcome == RecordOutcome::Duplicate;
                }
                RungsStatus::Ok
            }
            Err(e) => tuner_status(e),
        }
    })
}

/// Gives up on an outstanding job; its configuration is handed out again.
///
/// # Safety
/// `tuner` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rungs_tuner_drop_job(tuner: *mut RungsTuner, token: u64, now: u64) -> RungsStatus {
    guard(|| {
        let Some(t) = tuner.as_mut() else { return fail(RungsStatus::NullArgument, "tuner is null") };
        t.inner.drop_job(token, now).map_or_else(tuner_status, |_| RungsStatus::Ok)
    })
}

/// # Safety
/// `tuner` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rungs_tuner_extend(tuner: *mut RungsTuner, additional_n: u64, now: u64) -> RungsStatus {
    guard(|| {
        let Some(t) = tuner.as_mut() else { return fail(RungsStatus::NullArgument, "tuner is null") };
        t.inner.extend(additional_n, now).map_or_else(tuner_status, |_| RungsStatus::Ok)
    })
}

/// Experiment snapshot (rungs, incumbent, progress) as JSON.
///
/// # Safety
/// `tuner` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rungs_tuner_status_json(tuner: *const RungsTuner, out: *mut *mut c_char) -> RungsStatus {
    guard(|| {
        let (Some(t), false) = (tuner.as_ref(), out.is_null()) else {
            return fail(RungsStatus::NullArgument, "tuner or out is null");
        };
        match serde_json::to_string(&t.inner.status()) {
            Ok(text) => write_string(out, text),
            Err(e) => fail(RungsStatus::Rejected, e),
        }
    })
}

/// Writes the synchronous rung sizes of a bracket started with `n`
/// configurations into `out` (room for `capacity` rows) and the row count to
/// `*len`. When `capacity` is too small only `*len` is written.
///
/// # Safety
/// `out` must have room for `capacity` rows (may be null when 0); `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rungs_rung_schedule(
    n: u64,
    min_resource: u64,
    max_resource: u64,
    eta: u64,
    early_stopping_rate: u32,
    out: *mut RungsRung,
    capacity: usize,
    len: *mut usize,
) -> RungsStatus {
    guard(|| {
        if len.is_null() {
            return fail(RungsStatus::NullArgument, "len is null");
        }
        let params = match BracketParams::new(min_resource, max_resource, eta, early_stopping_rate) {
            Ok(p) => p,
            Err(e) => return bracket_status(e),
        };
        let rows = match bracket::rung_schedule(n, &params) {
            Ok(r) => r,
            Err(e) => return bracket_status(e),
        };
        *len = rows.len();
        if capacity < rows.len() {
            return fail(RungsStatus::BufferTooSmall, format!("need room for {} rungs", rows.len()));
        }
        if out.is_null() {
            return fail(RungsStatus::NullArgument, "out is null");
        }
        for (i, r) in rows.iter().enumerate() {
            *out.add(i) = RungsRung { configs: r.configs, resource: r.resource };
        }
        RungsStatus::Ok
    })
}

/// Time to the first fully trained configuration, in units of `time(R)`,
/// as the fraction `*numer / *denom`.
///
/// # Safety
/// `numer` and `denom` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rungs_completion_time_ratio(
    min_resource: u64,
    max_resource: u64,
    eta: u64,
    early_stopping_rate: u32,
    numer: *mut u64,
    denom: *mut u64,
) -> RungsStatus {
    guard(|| {
        if numer.is_null() || denom.is_null() {
            return fail(RungsStatus::NullArgument, "numer or denom is null");
        }
        let params = match BracketParams::new(min_resource, max_resource, eta, early_stopping_rate) {
            Ok(p) => p,
            Err(e) => return bracket_status(e),
        };
        let ratio = bracket::completion_time_ratio(&params);
        *numer = *ratio.numer();
        *denom = *ratio.denom();
        RungsStatus::Ok
    })
}

/// Weighted max-min fair split of `capacity` GPUs; `out[i]` receives the
/// allocation of `demands[i]`.
///
/// # Safety
/// `demands` and `out` must each point to `len` elements (may be null when `len` is 0).
#[no_mangle]
pub unsafe extern "C" fn rungs_water_fill(
    demands: *const RungsDemand,
    len: usize,
    capacity: u64,
    out: *mut u64,
) -> RungsStatus {
    guard(|| {
        if len == 0 {
            return RungsStatus::Ok;
        }
        if demands.is_null() || out.is_null() {
            return fail(RungsStatus::NullArgument, "demands or out is null");
        }
        let input = std::slice::from_raw_parts(demands, len);
        if let Some(i) = input.iter().position(|d| !(d.weight > 0.0 && d.weight.is_finite())) {
            return fail(RungsStatus::InvalidArgument, format!("demand {i} needs a positive weight"));
        }
        let named: Vec<ClusterDemand> = input
            .iter()
            .enumerate()
            .map(|(i, d)| ClusterDemand {
                experiment: format!("{i:08}"),
                kappa: d.kappa,
                stack_size: d.stack_size,
                weight: d.weight,
            })
            .collect();
        let alloc = scheduler::water_fill(&named, capacity);
        for (i, d) in named.iter().enumerate() {
            *out.add(i) = alloc[&d.experiment];
        }
        RungsStatus::Ok
    })
}

/// Largest GPU count whose parallel efficiency under the default scaling
/// model with `overhead` stays at or above `tau`, clamped to `cluster_size`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rungs_max_gpus_for_efficiency(
    overhead: f64,
    tau: f64,
    cluster_size: u32,
    out: *mut u32,
) -> RungsStatus {
    guard(|| {
        if out.is_null() {
            return fail(RungsStatus::NullArgument, "out is null");
        }
        if !(overhead >= 0.0 && overhead.is_finite()) || !(tau > 0.0 && tau <= 1.0) {
            return fail(RungsStatus::InvalidArgument, "need overhead >= 0 and 0 < tau <= 1");
        }
        *out = scheduler::max_gpus_for_efficiency(&AmdahlModel { overhead }, tau, cluster_size);
        RungsStatus::Ok
    })
}
