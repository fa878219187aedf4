//! C ABI over the `ocrm` crate.
//!
//! Every fallible function returns an [`OcrmStatus`] and writes its result
//! through an out pointer. On failure the message is kept per thread and can
//! be read with [`ocrm_last_error`]. Objects cross the boundary as opaque
//! handles that the caller releases with the matching `_free` function.
//! Panics are caught and reported as `OCRM_STATUS_INTERNAL`.
//!
//! # Safety
//!
//! Every pointer argument must be null or valid for the access its
//! documentation implies: handles must come from the matching constructor
//! and not be freed yet, strings must be nul-terminated UTF-8 and buffers
//! must hold the stated number of doubles. Null pointers are reported as
//! `OCRM_STATUS_NULL_POINTER`, never dereferenced.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ocrm::config::resolve_config;
use ocrm::policy::{GaussianPolicy, PolicySnapshot};
use ocrm::preference::{load_dataset, PreferenceDataset};
use ocrm::reward_model::bt_loss_from_margin;
use ocrm::tasks::{gold_reward_continuous, make_discrete_task, ContinuousTask, DiscreteTask, Task};
use ocrm::weights::{dataset_weights, effective_sample_size, weight_from_log_ratio, IwConfig};
use ocrm::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OcrmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    OutOfRange = 3,
    Io = 4,
    Parse = 5,
    Config = 6,
    NotConverged = 7,
    Internal = 8,
}

fn status_of(e: &Error) -> OcrmStatus {
    match e {
        Error::OutOfBox { .. } | Error::IndexOutOfRange { .. } => OcrmStatus::OutOfRange,
        Error::Io { .. } => OcrmStatus::Io,
        Error::Parse { .. } | Error::Csv(_) | Error::FamilyMismatch { .. } => OcrmStatus::Parse,
        Error::Config(_) => OcrmStatus::Config,
        Error::NotConverged { .. } => OcrmStatus::NotConverged,
        _ => OcrmStatus::InvalidArgument,
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

/// Runs `f`, recording any error or panic for [`ocrm_last_error`].
fn guard<F>(f: F) -> OcrmStatus
where
    F: FnOnce() -> Result<(), (OcrmStatus, String)>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            OcrmStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".to_string());
            OcrmStatus::Internal
        }
    }
}

fn lib_err(e: Error) -> (OcrmStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (OcrmStatus, String) {
    (OcrmStatus::NullPointer, format!("{what} is null"))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), (OcrmStatus, String)> {
    if out.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller guarantees a non-null `out` points to writable storage.
    unsafe { out.write(value) };
    Ok(())
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (OcrmStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller passes a nul-terminated string.
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| (OcrmStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(h: *const T, what: &str) -> Result<&'a T, (OcrmStatus, String)> {
    // SAFETY: caller passes a handle from the matching constructor.
    unsafe { h.as_ref() }.ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null after a
/// successful call. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ocrm_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Gold reward of the 2-D task. Actions outside `[-1.5, 1.5]^2` give
/// `OCRM_STATUS_OUT_OF_RANGE`.
#[no_mangle]
pub unsafe extern "C" fn ocrm_gold_reward_continuous(a0: f64, a1: f64, out: *mut f64) -> OcrmStatus {
    guard(|| {
        let g = gold_reward_continuous(&[a0, a1]).map_err(lib_err)?;
        unsafe { write_out(out, g, "out") }
    })
}

/// Gold reward of the 2-D task after clamping the action to the box, the
/// rule used when scoring policy samples.
#[no_mangle]
pub unsafe extern "C" fn ocrm_gold_reward_clamped(a0: f64, a1: f64, out: *mut f64) -> OcrmStatus {
    guard(|| {
        let g = ContinuousTask.gold_reward(0, &vec![a0, a1]).map_err(lib_err)?;
        unsafe { write_out(out, g, "out") }
    })
}

/// Bradley-Terry loss `-log sigmoid(margin)`.
#[no_mangle]
pub unsafe extern "C" fn ocrm_bt_loss(margin: f64, out: *mut f64) -> OcrmStatus {
    guard(|| unsafe { write_out(out, bt_loss_from_margin(margin), "out") })
}

/// Importance weight options. `clip <= 0` disables clipping.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct OcrmIwConfig {
    pub eta: f64,
    pub alpha: f64,
    pub clip: f64,
}

/// Plain ratio weights: `eta = 1`, `alpha = 1`, no clipping.
#[no_mangle]
pub extern "C" fn ocrm_iw_config_default() -> OcrmIwConfig {
    OcrmIwConfig {
        eta: 1.0,
        alpha: 1.0,
        clip: 0.0,
    }
}

fn iw_config(c: &OcrmIwConfig) -> Result<IwConfig, (OcrmStatus, String)> {
    let cfg = IwConfig {
        eta: c.eta,
        alpha: c.alpha,
        clip: (c.clip > 0.0).then_some(c.clip),
        self_normalize: false,
    };
    cfg.validate().map_err(lib_err)?;
    Ok(cfg)
}

/// Weight of one pair from `log P_current(pair) - log P_behavior(pair)`.
#[no_mangle]
pub unsafe extern "C" fn ocrm_pair_weight(log_ratio: f64, cfg: OcrmIwConfig, out: *mut f64) -> OcrmStatus {
    guard(|| {
        let cfg = iw_config(&cfg)?;
        if log_ratio.is_nan() {
            return Err((OcrmStatus::InvalidArgument, "log_ratio is NaN".into()));
        }
        unsafe { write_out(out, weight_from_log_ratio(log_ratio, &cfg), "out") }
    })
}

/// `(sum w)^2 / sum w^2` over `len` weights.
#[no_mangle]
pub unsafe extern "C" fn ocrm_effective_sample_size(weights: *const f64, len: usize, out: *mut f64) -> OcrmStatus {
    guard(|| {
        if weights.is_null() && len > 0 {
            return Err(null("weights"));
        }
        let w = if len == 0 {
            &[][..]
        } else {
            // SAFETY: caller passes `len` readable doubles.
            unsafe { std::slice::from_raw_parts(weights, len) }
        };
        unsafe { write_out(out, effective_sample_size(w), "out") }
    })
}

/// Opaque discrete task.
pub struct OcrmDiscreteTask(DiscreteTask);

#[no_mangle]
pub unsafe extern "C" fn ocrm_discrete_task_new(
    seed: u64,
    n_states: usize,
    n_actions: usize,
    feature_dim: usize,
    out: *mut *mut OcrmDiscreteTask,
) -> OcrmStatus {
    guard(|| {
        let task = make_discrete_task(seed, n_states, n_actions, feature_dim).map_err(lib_err)?;
        unsafe { write_out(out, Box::into_raw(Box::new(OcrmDiscreteTask(task))), "out") }
    })
}

#[no_mangle]
pub unsafe extern "C" fn ocrm_discrete_task_load(path: *const c_char, out: *mut *mut OcrmDiscreteTask) -> OcrmStatus {
    guard(|| {
        let path = unsafe { path_arg(path, "path") }?;
        let task = DiscreteTask::load(&path).map_err(lib_err)?;
        unsafe { write_out(out, Box::into_raw(Box::new(OcrmDiscreteTask(task))), "out") }
    })
}

#[no_mangle]
pub unsafe extern "C" fn ocrm_discrete_task_save(task: *const OcrmDiscreteTask, path: *const c_char) -> OcrmStatus {
    guard(|| {
        let task = unsafe { handle(task, "task") }?;
        let path = unsafe { path_arg(path, "path") }?;
        task.0.save(&path).map_err(lib_err)
    })
}

#[no_mangle]
pub unsafe extern "C" fn ocrm_discrete_task_n_states(task: *const OcrmDiscreteTask, out: *mut usize) -> OcrmStatus {
    guard(|| {
        let task = unsafe { handle(task, "task") }?;
        unsafe { write_out(out, task.0.n_states(), "out") }
    })
}

#[no_mangle]
pub unsafe extern "C" fn ocrm_discrete_task_n_actions(task: *const OcrmDiscreteTask, out: *mut usize) -> OcrmStatus {
    guard(|| {
        let task = unsafe { handle(task, "task") }?;
        unsafe { write_out(out, task.0.n_actions(), "out") }
    })
}

#[no_mangle]
pub unsafe extern "C" fn ocrm_discrete_task_gold_reward(
    task: *const OcrmDiscreteTask,
    state: usize,
    action: usize,
    out: *mut f64,
) -> OcrmStatus {
    guard(|| {
        let task = unsafe { handle(task, "task") }?;
        let g = task.0.gold_reward_discrete(state, action).map_err(lib_err)?;
        unsafe { write_out(out, g, "out") }
    })
}

/// Releases a task. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ocrm_discrete_task_free(task: *mut OcrmDiscreteTask) {
    if !task.is_null() {
        // SAFETY: the handle came from `Box::into_raw` in this crate.
        drop(unsafe { Box::from_raw(task) });
    }
}

/// Opaque preference dataset of the 2-D task.
pub struct OcrmDataset(PreferenceDataset<Vec<f64>>);

#[no_mangle]
pub unsafe extern "C" fn ocrm_dataset_load(path: *const c_char, out: *mut *mut OcrmDataset) -> OcrmStatus {
    guard(|| {
        let path = unsafe { path_arg(path, "path") }?;
        let ds = load_dataset(&path).map_err(lib_err)?;
        unsafe { write_out(out, Box::into_raw(Box::new(OcrmDataset(ds))), "out") }
    })
}

#[no_mangle]
pub unsafe extern "C" fn ocrm_dataset_len(ds: *const OcrmDataset, out: *mut usize) -> OcrmStatus {
    guard(|| {
        let ds = unsafe { handle(ds, "dataset") }?;
        unsafe { write_out(out, ds.0.len(), "out") }
    })
}

#[no_mangle]
pub unsafe extern "C" fn ocrm_dataset_free(ds: *mut OcrmDataset) {
    if !ds.is_null() {
        // SAFETY: the handle came from `Box::into_raw` in this crate.
        drop(unsafe { Box::from_raw(ds) });
    }
}

/// Opaque Gaussian policy snapshot.
pub struct OcrmPolicy(PolicySnapshot<GaussianPolicy>);

#[no_mangle]
pub unsafe extern "C" fn ocrm_policy_load(path: *const c_char, out: *mut *mut OcrmPolicy) -> OcrmStatus {
    guard(|| {
        let path = unsafe { path_arg(path, "path") }?;
        let p = PolicySnapshot::load(&path).map_err(lib_err)?;
        unsafe { write_out(out, Box::into_raw(Box::new(OcrmPolicy(p))), "out") }
    })
}

#[no_mangle]
pub unsafe extern "C" fn ocrm_policy_free(policy: *mut OcrmPolicy) {
    if !policy.is_null() {
        // SAFETY: the handle came from `Box::into_raw` in this crate.
        drop(unsafe { Box::from_raw(policy) });
    }
}

/// Writes one weight per dataset pair into `out[0..len]`; `len` must equal
/// the dataset length. `ess_out` may be null.
#[no_mangle]
pub unsafe extern "C" fn ocrm_dataset_weights(
    ds: *const OcrmDataset,
    policy: *const OcrmPolicy,
    cfg: OcrmIwConfig,
    out: *mut f64,
    len: usize,
    ess_out: *mut f64,
) -> OcrmStatus {
    guard(|| {
        let ds = unsafe { handle(ds, "dataset") }?;
        let policy = unsafe { handle(policy, "policy") }?;
        let cfg = iw_config(&cfg)?;
        if out.is_null() {
            return Err(null("out"));
        }
        if len != ds.0.len() {
            return Err((
                OcrmStatus::InvalidArgument,
                format!("buffer holds {len} weights but the dataset has {} pairs", ds.0.len()),
            ));
        }
        let report = dataset_weights(&ds.0, policy.0.policy(), &ContinuousTask, &cfg).map_err(lib_err)?;
        // SAFETY: caller passes `len` writable doubles.
        unsafe { std::slice::from_raw_parts_mut(out, len) }.copy_from_slice(&report.weights);
        if !ess_out.is_null() {
            unsafe { write_out(ess_out, report.ess, "ess_out") }?;
        }
        Ok(())
    })
}

/// Runs the experiment described by `config_toml`. A non-null `out_dir`
/// replaces the configured output directory.
#[no_mangle]
pub unsafe extern "C" fn ocrm_run_config(config_toml: *const c_char, out_dir: *const c_char) -> OcrmStatus {
    guard(|| {
        if config_toml.is_null() {
            return Err(null("config_toml"));
        }
        // SAFETY: caller passes a nul-terminated string.
        let text = unsafe { CStr::from_ptr(config_toml) }
            .to_str()
            .map_err(|_| (OcrmStatus::InvalidArgument, "config is not UTF-8".to_string()))?;
        let mut overrides = Vec::new();
        if !out_dir.is_null() {
            let dir = unsafe { path_arg(out_dir, "out_dir") }?;
            overrides.push(format!("out_dir={:?}", dir.display().to_string()));
        }
        let cfg = resolve_config(Some(text), &overrides).map_err(lib_err)?;
        ocrm::run::run(&cfg).map(|_| ()).map_err(lib_err)
    })
}
