//! C ABI for the agecast library.
//!
//! Objects cross the boundary as opaque handles; every function returns an
//! `AgecastStatus` code (or NULL on constructor failure) and the last error
//! message is retrievable per thread via `agecast_last_error`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use agecast::audit::{error_histogram, group_report, Grouping, StdConvention};
use agecast::data::{augment, generate_dataset, read_dataset, write_dataset, Dataset};
use agecast::head::{infer_age, AgePosterior};
use agecast::model::{load_checkpoint, model_from_checkpoint, Model, RunConfig};
use agecast::train::{evaluate, train, PredictionRow};
use agecast::{Mode, Tape, Tensor};

/// Status codes for every fallible call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum AgecastStatus {
    Ok = 0,
    /// Invalid argument (NULL pointer, bad UTF-8, bad config value).
    InvalidArgument = 1,
    /// Runtime failure (I/O, parse, numeric, divergence).
    RuntimeError = 2,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &agecast::Error) -> AgecastStatus {
    match err {
        agecast::Error::Config(_) | agecast::Error::Contract(_) => AgecastStatus::InvalidArgument,
        _ => AgecastStatus::RuntimeError,
    }
}

/// Message for the most recent error on this thread. The pointer stays
/// valid until the next failing call on the same thread; do not free it.
#[no_mangle]
pub extern "C" fn agecast_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string; do not free.
#[no_mangle]
pub extern "C" fn agecast_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Opaque dataset handle.
pub struct AgecastDataset {
    inner: Dataset,
}

/// Opaque model handle (the checkpoint's run configuration rides along).
pub struct AgecastModel {
    model: Model,
    run: RunConfig,
}

unsafe fn cstr<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, AgecastStatus> {
    if ptr.is_null() {
        set_error(&format!("{what} is NULL"));
        return Err(AgecastStatus::InvalidArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(&format!("{what} is not valid UTF-8"));
        AgecastStatus::InvalidArgument
    })
}

fn parse_run_config(text: &str) -> Result<RunConfig, AgecastStatus> {
    if text.trim().is_empty() {
        return Ok(RunConfig::default());
    }
    RunConfig::from_toml(text).map_err(|e| {
        set_error(&e.to_string());
        AgecastStatus::InvalidArgument
    })
}

/// Generate a synthetic dataset from a run-config TOML string (NULL or
/// empty for defaults). Returns NULL on failure; free with
/// `agecast_dataset_free`.
///
/// # Safety
/// `config_toml` must be NULL or a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn agecast_dataset_generate(
    config_toml: *const c_char,
) -> *mut AgecastDataset {
    let text = if config_toml.is_null() {
        ""
    } else {
        match cstr(config_toml, "config_toml") {
            Ok(s) => s,
            Err(_) => return std::ptr::null_mut(),
        }
    };
    let run = match parse_run_config(text) {
        Ok(run) => run,
        Err(_) => return std::ptr::null_mut(),
    };
    match generate_dataset(&run.data) {
        Ok(inner) => Box::into_raw(Box::new(AgecastDataset { inner })),
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Read a dataset CSV. Returns NULL on failure; free with
/// `agecast_dataset_free`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn agecast_dataset_read(path: *const c_char) -> *mut AgecastDataset {
    let path = match cstr(path, "path") {
        Ok(s) => s,
        Err(_) => return std::ptr::null_mut(),
    };
    match read_dataset(Path::new(path)) {
        Ok(inner) => Box::into_raw(Box::new(AgecastDataset { inner })),
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Write a dataset to CSV.
///
/// # Safety
/// `dataset` must be a live handle from this library; `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn agecast_dataset_write(
    dataset: *const AgecastDataset,
    path: *const c_char,
) -> AgecastStatus {
    let Some(dataset) = dataset.as_ref() else {
        set_error("dataset is NULL");
        return AgecastStatus::InvalidArgument;
    };
    let path = match cstr(path, "path") {
        Ok(s) => s,
        Err(status) => return status,
    };
    match write_dataset(&dataset.inner, Path::new(path)) {
        Ok(()) => AgecastStatus::Ok,
        Err(e) => {
            set_error(&e.to_string());
            status_of(&e)
        }
    }
}

/// Number of samples; 0 for NULL.
///
/// # Safety
/// `dataset` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn agecast_dataset_len(dataset: *const AgecastDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.len())
}

/// Feature dimension F; 0 for NULL.
///
/// # Safety
/// `dataset` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn agecast_dataset_feature_dim(dataset: *const AgecastDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.feature_dim())
}

/// # Safety
/// `dataset` must be NULL or a handle returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn agecast_dataset_free(dataset: *mut AgecastDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Train from a run-config TOML string (NULL or empty for defaults) on the
/// given dataset, writing checkpoints and logs into `out_dir`. On success
/// stores the final validation MAE through `out_val_mae` (may be NULL).
///
/// # Safety
/// `dataset` must be a live handle; strings valid; `out_val_mae` NULL or
/// pointing at writable memory.
#[no_mangle]
pub unsafe extern "C" fn agecast_train(
    config_toml: *const c_char,
    dataset: *const AgecastDataset,
    out_dir: *const c_char,
    out_val_mae: *mut f64,
) -> AgecastStatus {
    let Some(dataset) = dataset.as_ref() else {
        set_error("dataset is NULL");
        return AgecastStatus::InvalidArgument;
    };
    let text = if config_toml.is_null() {
        ""
    } else {
        match cstr(config_toml, "config_toml") {
            Ok(s) => s,
            Err(status) => return status,
        }
    };
    let run = match parse_run_config(text) {
        Ok(run) => run,
        Err(status) => return status,
    };
    let out_dir = match cstr(out_dir, "out_dir") {
        Ok(s) => s,
        Err(status) => return status,
    };
    match train(&run, &dataset.inner, Some(Path::new(out_dir))) {
        Ok(outcome) => {
            if !out_val_mae.is_null() {
                *out_val_mae = outcome.final_val_mae;
            }
            AgecastStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            status_of(&e)
        }
    }
}

/// Load a model checkpoint. Returns NULL on failure; free with
/// `agecast_model_free`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn agecast_model_load(path: *const c_char) -> *mut AgecastModel {
    let path = match cstr(path, "path") {
        Ok(s) => s,
        Err(_) => return std::ptr::null_mut(),
    };
    let checkpoint = match load_checkpoint(Path::new(path)) {
        Ok(c) => c,
        Err(e) => {
            set_error(&e.to_string());
            return std::ptr::null_mut();
        }
    };
    match model_from_checkpoint(&checkpoint) {
        Ok(model) => Box::into_raw(Box::new(AgecastModel {
            model,
            run: checkpoint.run,
        })),
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// # Safety
/// `model` must be NULL or a handle returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn agecast_model_free(model: *mut AgecastModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Predict an age from one raw feature vector. Views are drawn with
/// `k_views` (0 means the model's configured eval K) from `view_seed`.
///
/// # Safety
/// `model` must be a live handle; `features` must point at `feature_len`
/// readable f64s; `out_age` at writable memory.
#[no_mangle]
pub unsafe extern "C" fn agecast_model_infer(
    model: *const AgecastModel,
    features: *const f64,
    feature_len: usize,
    k_views: usize,
    view_seed: u64,
    out_age: *mut f64,
) -> AgecastStatus {
    let Some(handle) = model.as_ref() else {
        set_error("model is NULL");
        return AgecastStatus::InvalidArgument;
    };
    if features.is_null() || out_age.is_null() {
        set_error("features/out_age is NULL");
        return AgecastStatus::InvalidArgument;
    }
    if feature_len != handle.run.data.feature_dim {
        set_error(&format!(
            "feature_len {} does not match model feature_dim {}",
            feature_len, handle.run.data.feature_dim
        ));
        return AgecastStatus::InvalidArgument;
    }
    let features = std::slice::from_raw_parts(features, feature_len);
    let k = if k_views == 0 { handle.run.k_eval() } else { k_views };
    let result = (|| -> agecast::Result<f64> {
        let k = match handle.model.aggregation {
            agecast::model::Aggregation::NoEncoder => 1,
            _ => k,
        };
        let views = augment(features, k, &handle.run.augment, view_seed)?;
        let views = Tensor::new(views, vec![k, feature_len])?;
        let mut tape = Tape::inactive();
        let mut mode = Mode::Eval;
        let fused = handle.model.fuse_with_k(&mut tape, &views, k, &mut mode)?;
        let logits = agecast::head::classify(&mut tape, &handle.model.head, &fused)?;
        let posterior = AgePosterior::from_logits(&logits.to_vec())?;
        let residuals = agecast::head::residuals(&mut tape, &handle.model.head, &fused)?;
        infer_age(&posterior, &residuals.to_vec(), &handle.model.bins)
    })();
    match result {
        Ok(age) => {
            *out_age = age;
            AgecastStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            status_of(&e)
        }
    }
}

/// Evaluate a model on a dataset; writes MAE through `out_mae` and
/// optionally the predictions CSV to `predictions_path` (NULL to skip).
/// `k_eval` 0 means the model's configured eval K.
///
/// # Safety
/// Handles must be live; strings valid or NULL as documented; `out_mae`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn agecast_evaluate(
    model: *const AgecastModel,
    dataset: *const AgecastDataset,
    k_eval: usize,
    predictions_path: *const c_char,
    out_mae: *mut f64,
) -> AgecastStatus {
    let (Some(handle), Some(dataset)) = (model.as_ref(), dataset.as_ref()) else {
        set_error("model/dataset is NULL");
        return AgecastStatus::InvalidArgument;
    };
    if out_mae.is_null() {
        set_error("out_mae is NULL");
        return AgecastStatus::InvalidArgument;
    }
    let k = if k_eval == 0 { handle.run.k_eval() } else { k_eval };
    let seed_root = agecast::data::mix_seed(handle.run.data.seed, 0x5417_0004);
    let result: agecast::Result<(f64, Vec<PredictionRow>)> =
        evaluate(&handle.model, &dataset.inner, k, &handle.run.augment, seed_root);
    match result {
        Ok((mae, predictions)) => {
            if !predictions_path.is_null() {
                let path = match cstr(predictions_path, "predictions_path") {
                    Ok(s) => s,
                    Err(status) => return status,
                };
                if let Err(e) = agecast::train::write_predictions(Path::new(path), &predictions) {
                    set_error(&e.to_string());
                    return status_of(&e);
                }
            }
            *out_mae = mae;
            AgecastStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            status_of(&e)
        }
    }
}

/// Overall MAE plus the maximum per-group MAE gap for one grouping
/// ("age-range", "gender", "ethnicity", "gender-ethnicity") of a
/// predictions CSV.
///
/// # Safety
/// Strings must be valid; out pointers NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn agecast_bias_summary(
    predictions_path: *const c_char,
    grouping: *const c_char,
    age_bin_width: f64,
    out_overall_mae: *mut f64,
    out_max_group_gap: *mut f64,
) -> AgecastStatus {
    let path = match cstr(predictions_path, "predictions_path") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let grouping = match cstr(grouping, "grouping") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let grouping: Grouping = match grouping.parse() {
        Ok(g) => g,
        Err(e) => {
            set_error(&e.to_string());
            return AgecastStatus::InvalidArgument;
        }
    };
    let result = (|| -> agecast::Result<(f64, f64)> {
        let rows = agecast::audit::read_predictions(Path::new(path))?;
        let report = group_report(&rows, grouping, age_bin_width, StdConvention::Population)?;
        let maes: Vec<f64> = report.groups.iter().filter_map(|g| g.mae).collect();
        let gap = match (
            maes.iter().cloned().reduce(f64::min),
            maes.iter().cloned().reduce(f64::max),
        ) {
            (Some(lo), Some(hi)) => hi - lo,
            _ => 0.0,
        };
        // Validates the file end to end, histogram path included.
        let _ = error_histogram(&rows, 1.0)?;
        Ok((report.overall_mae, gap))
    })();
    match result {
        Ok((mae, gap)) => {
            if !out_overall_mae.is_null() {
                *out_overall_mae = mae;
            }
            if !out_max_group_gap.is_null() {
                *out_max_group_gap = gap;
            }
            AgecastStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            status_of(&e)
        }
    }
}

/// Run the full-model gradient check suite; writes the worst relative
/// error across all loss terms through `out_max_rel_error` (may be NULL).
///
/// # Safety
/// `out_max_rel_error` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn agecast_gradcheck(seed: u64, out_max_rel_error: *mut f64) -> AgecastStatus {
    match agecast::gradcheck::full_model_gradient_suite(seed) {
        Ok(results) => {
            let worst = results.iter().map(|(_, e)| *e).fold(0.0, f64::max);
            if !out_max_rel_error.is_null() {
                *out_max_rel_error = worst;
            }
            AgecastStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            status_of(&e)
        }
    }
}
