//! C ABI for the hetfed simulator.
//!
//! Every fallible function returns a [`HetfedStatus`]; on failure the message
//! is available from [`hetfed_last_error_message`] on the same thread.
//! Handles are opaque and must be released with their `_free` function.
//! Panics never cross the boundary; they surface as `HETFED_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use hetfed::config::ExperimentConfig;
use hetfed::metrics::{stability, Accuracy};
use hetfed::nn::{BlockKind, BlockNetSpec};
use hetfed::runner::{run_experiment, write_outputs, ExperimentResult};
use hetfed::Error;

/// Result codes. Values 2-4 match the CLI exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HetfedStatus {
    Ok = 0,
    Error = 1,
    ConfigError = 2,
    Infeasible = 3,
    IoError = 4,
    NullPointer = 5,
    Panic = 6,
}

/// Parsed, validated experiment configuration.
pub struct HetfedExperiment {
    config: ExperimentConfig,
}

/// Per-arm mean metrics of a finished run.
pub struct HetfedReport {
    arms: Vec<(CString, HetfedMetrics)>,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HetfedMetrics {
    pub final_global_accuracy: f64,
    /// 1 when `time_to_accuracy_s` is meaningful, 0 when the target was not
    /// reached.
    pub time_reached: i32,
    pub time_to_accuracy_s: f64,
    pub stability_variance: f64,
    pub effectiveness_delta: f64,
}

/// Block kinds accepted by [`hetfed_parameter_count`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HetfedBlockKind {
    Plain = 0,
    Skip = 1,
    Bottleneck = 2,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(e: &Error) -> HetfedStatus {
    set_error(&e.to_string());
    match e.exit_code() {
        2 => HetfedStatus::ConfigError,
        3 => HetfedStatus::Infeasible,
        4 => HetfedStatus::IoError,
        _ => HetfedStatus::Error,
    }
}

fn null_arg(name: &str) -> HetfedStatus {
    set_error(&format!("null pointer passed for `{name}`"));
    HetfedStatus::NullPointer
}

fn guard(f: impl FnOnce() -> HetfedStatus) -> HetfedStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("internal panic: {msg}"));
            HetfedStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, HetfedStatus> {
    if p.is_null() {
        return Err(null_arg(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(&format!("`{name}` is not valid UTF-8"));
        HetfedStatus::Error
    })
}

/// Message of the last failure on this thread. The pointer stays valid until
/// the next failing call on the same thread. Never null.
#[no_mangle]
pub extern "C" fn hetfed_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static, NUL-terminated version string.
#[no_mangle]
pub extern "C" fn hetfed_version() -> *const c_char {
    concat!("hetfed-ffi ", env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

fn store_experiment(cfg: ExperimentConfig, out: *mut *mut HetfedExperiment) -> HetfedStatus {
    let boxed = Box::new(HetfedExperiment { config: cfg });
    // SAFETY: caller checked `out` for null.
    unsafe { *out = Box::into_raw(boxed) };
    HetfedStatus::Ok
}

/// Parses a TOML configuration. Environment overrides are not applied.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hetfed_experiment_from_toml(toml: *const c_char, out: *mut *mut HetfedExperiment) -> HetfedStatus {
    guard(|| {
        if out.is_null() {
            return null_arg("out");
        }
        let text = match str_arg(toml, "toml") {
            Ok(t) => t,
            Err(s) => return s,
        };
        match ExperimentConfig::from_toml_str(text) {
            Ok(cfg) => store_experiment(cfg, out),
            Err(e) => fail(&e),
        }
    })
}

/// Loads a TOML configuration file, applying `HETFED_SEED` / `HETFED_OUT`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hetfed_experiment_from_file(path: *const c_char, out: *mut *mut HetfedExperiment) -> HetfedStatus {
    guard(|| {
        if out.is_null() {
            return null_arg("out");
        }
        let p = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match ExperimentConfig::load(Path::new(p)) {
            Ok(cfg) => store_experiment(cfg, out),
            Err(e) => fail(&e),
        }
    })
}

/// # Safety
/// `exp` must come from a constructor above or be null.
#[no_mangle]
pub unsafe extern "C" fn hetfed_experiment_set_seed(exp: *mut HetfedExperiment, seed: u64) -> HetfedStatus {
    guard(|| match exp.as_mut() {
        Some(e) => {
            e.config.experiment.master_seed = seed;
            HetfedStatus::Ok
        }
        None => null_arg("exp"),
    })
}

/// # Safety
/// `exp` must come from a constructor above; `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn hetfed_experiment_set_output_dir(exp: *mut HetfedExperiment, dir: *const c_char) -> HetfedStatus {
    guard(|| {
        let Some(e) = exp.as_mut() else { return null_arg("exp") };
        match str_arg(dir, "dir") {
            Ok(d) => {
                e.config.output.dir = d.into();
                HetfedStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// # Safety
/// `exp` must come from a constructor above (or be null) and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn hetfed_experiment_free(exp: *mut HetfedExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

fn to_report(result: &ExperimentResult) -> HetfedReport {
    HetfedReport {
        arms: result
            .arms
            .iter()
            .map(|a| {
                let m = &a.mean;
                (
                    CString::new(a.arm.label()).unwrap_or_default(),
                    HetfedMetrics {
                        final_global_accuracy: m.final_global_accuracy,
                        time_reached: m.time_to_accuracy_s.is_some() as i32,
                        time_to_accuracy_s: m.time_to_accuracy_s.unwrap_or(f64::NAN),
                        stability_variance: m.stability_variance,
                        effectiveness_delta: m.effectiveness_delta,
                    },
                )
            })
            .collect(),
    }
}

/// Runs the experiment. When `write_outputs` is non-zero the CSV/JSON
/// outputs are written to the configured output directory.
///
/// # Safety
/// `exp` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hetfed_run(exp: *const HetfedExperiment, write: i32, out: *mut *mut HetfedReport) -> HetfedStatus {
    guard(|| {
        let Some(e) = exp.as_ref() else { return null_arg("exp") };
        if out.is_null() {
            return null_arg("out");
        }
        let result = match run_experiment(&e.config) {
            Ok(r) => r,
            Err(err) => return fail(&err),
        };
        if write != 0 {
            if let Err(err) = write_outputs(&e.config, &result, &e.config.output.dir) {
                return fail(&err);
            }
        }
        *out = Box::into_raw(Box::new(to_report(&result)));
        HetfedStatus::Ok
    })
}

/// Number of arms in the report; 0 for null.
///
/// # Safety
/// `report` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn hetfed_report_len(report: *const HetfedReport) -> usize {
    report.as_ref().map_or(0, |r| r.arms.len())
}

/// Copies the arm label into `buf` (NUL-terminated, truncated to fit) and
/// stores the untruncated length without NUL in `needed` when non-null.
///
/// # Safety
/// `report` must be a live handle; `buf` must hold `buf_len` bytes or be
/// null with `buf_len == 0`.
#[no_mangle]
pub unsafe extern "C" fn hetfed_report_arm_name(
    report: *const HetfedReport,
    index: usize,
    buf: *mut c_char,
    buf_len: usize,
    needed: *mut usize,
) -> HetfedStatus {
    guard(|| {
        let Some(r) = report.as_ref() else { return null_arg("report") };
        let Some((name, _)) = r.arms.get(index) else {
            set_error(&format!("arm index {index} out of range ({} arms)", r.arms.len()));
            return HetfedStatus::Error;
        };
        let bytes = name.as_bytes();
        if !needed.is_null() {
            *needed = bytes.len();
        }
        if buf_len > 0 {
            if buf.is_null() {
                return null_arg("buf");
            }
            let n = bytes.len().min(buf_len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        HetfedStatus::Ok
    })
}

/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hetfed_report_metrics(report: *const HetfedReport, index: usize, out: *mut HetfedMetrics) -> HetfedStatus {
    guard(|| {
        let Some(r) = report.as_ref() else { return null_arg("report") };
        if out.is_null() {
            return null_arg("out");
        }
        match r.arms.get(index) {
            Some((_, m)) => {
                *out = *m;
                HetfedStatus::Ok
            }
            None => {
                set_error(&format!("arm index {index} out of range ({} arms)", r.arms.len()));
                HetfedStatus::Error
            }
        }
    })
}

/// # Safety
/// `report` must be a live handle (or null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hetfed_report_free(report: *mut HetfedReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Population variance of the accuracies `correct[i] / total[i]`, computed
/// exactly and rounded once.
///
/// # Safety
/// `correct` and `total` must each hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hetfed_stability(correct: *const u64, total: *const u64, n: usize, out: *mut f64) -> HetfedStatus {
    guard(|| {
        if out.is_null() {
            return null_arg("out");
        }
        if n > 0 && (correct.is_null() || total.is_null()) {
            return null_arg("correct/total");
        }
        let mut accs = Vec::with_capacity(n);
        for i in 0..n {
            let (c, t) = (*correct.add(i), *total.add(i));
            if t == 0 || c > t {
                set_error(&format!("entry {i}: need 0 <= correct <= total and total > 0"));
                return HetfedStatus::Error;
            }
            accs.push(Accuracy::new(c, t));
        }
        *out = stability(&accs);
        HetfedStatus::Ok
    })
}

/// Closed-form parameter count of a single-exit model.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hetfed_parameter_count(
    input_dim: usize,
    hidden_dim: usize,
    num_blocks: usize,
    kind: HetfedBlockKind,
    num_classes: usize,
    proto_dim: usize,
    out: *mut u64,
) -> HetfedStatus {
    guard(|| {
        if out.is_null() {
            return null_arg("out");
        }
        let kind = match kind {
            HetfedBlockKind::Plain => BlockKind::Plain,
            HetfedBlockKind::Skip => BlockKind::Skip,
            HetfedBlockKind::Bottleneck => BlockKind::Bottleneck,
        };
        match BlockNetSpec::new(input_dim, hidden_dim, num_blocks, kind, num_classes, proto_dim) {
            Ok(spec) => {
                *out = spec.parameter_count();
                HetfedStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}
