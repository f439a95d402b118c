//! C ABI over the capablate library.
//!
//! Models, adapter sets and datasets cross the boundary as opaque handles
//! that the caller releases with the matching `*_free` function. Every
//! fallible call returns a [`CapStatus`]; the message of the most recent
//! failure on the calling thread is available from [`cap_last_error`].
//! Scalars are 32-bit throughout.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use capablate::analysis::layer_importance;
use capablate::checkpoint::{load_adapters, load_model, save_adapters};
use capablate::data::{read_corpus, read_dataset, DataLayout, Split, TaskDataset};
use capablate::eval::{perplexity, task_accuracy};
use capablate::lora::LoraAdapterSet;
use capablate::model::{Site, TransformerModel};
use capablate::train::{ablate, TrainConfig};
use capablate::{Error, ErrorCategory};

/// Result code of every fallible call. The category codes match the
/// command-line tool's exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapStatus {
    Ok = 0,
    ConfigError = 2,
    DataError = 3,
    TrainingError = 4,
    InternalError = 5,
    NullPointer = 6,
    InvalidString = 7,
    Panic = 8,
}

/// Dataset split selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapSplit {
    Train = 0,
    Dev = 1,
    Test = 2,
}

impl From<CapSplit> for Split {
    fn from(s: CapSplit) -> Split {
        match s {
            CapSplit::Train => Split::Train,
            CapSplit::Dev => Split::Dev,
            CapSplit::Test => Split::Test,
        }
    }
}

/// A frozen pretrained model.
pub struct CapModel(TransformerModel<f32>);

/// A trained set of low-rank adapters.
pub struct CapAdapters(LoraAdapterSet<f32>);

/// One task's train, dev and test examples.
pub struct CapDataset(TaskDataset);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(CapStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.category() {
            ErrorCategory::Config => CapStatus::ConfigError,
            ErrorCategory::Data => CapStatus::DataError,
            ErrorCategory::Training => CapStatus::TrainingError,
            ErrorCategory::Internal => CapStatus::InternalError,
        };
        Failure(status, e.to_string())
    }
}

/// Runs `f`, records its failure message and converts panics into
/// [`CapStatus::Panic`].
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CapStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            clear_last_error();
            CapStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("panic: {msg}"));
            CapStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(CapStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `p` must be null or point to a NUL-terminated string.
unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        Failure(
            CapStatus::InvalidString,
            format!("{what} is not valid UTF-8"),
        )
    })
}

/// # Safety
/// `p` must be null or point to a live value of type `T`.
unsafe fn read_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

fn write_out<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    // SAFETY: checked non-null; the caller provides writable storage.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Message of the last failed call on this thread, or null after a
/// successful call. The pointer stays valid until the next call into this
/// library on the same thread.
#[no_mangle]
pub extern "C" fn cap_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cap_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Number of adapted projection sites per layer.
#[no_mangle]
pub extern "C" fn cap_sites_per_layer() -> usize {
    Site::ALL.len()
}

/// Loads a model checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cap_model_load(path: *const c_char, out: *mut *mut CapModel) -> CapStatus {
    guard(|| {
        let path = PathBuf::from(read_str(path, "path")?);
        let model = load_model::<f32>(&path)?;
        write_out(out, CapModel(model))
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`cap_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cap_model_free(model: *mut CapModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of transformer layers, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn cap_model_n_layers(model: *const CapModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config().n_layers)
}

/// Loads an adapter set. When `model` is non-null its dimensions must match
/// the adapters'.
///
/// # Safety
/// `path` must be a NUL-terminated string, `model` null or live, `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn cap_adapters_load(
    path: *const c_char,
    model: *const CapModel,
    out: *mut *mut CapAdapters,
) -> CapStatus {
    guard(|| {
        let path = PathBuf::from(read_str(path, "path")?);
        let expect = model.as_ref().map(|m| m.0.config());
        let set = load_adapters::<f32>(&path, expect)?;
        write_out(out, CapAdapters(set))
    })
}

/// Writes an adapter set to disk.
///
/// # Safety
/// `adapters` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cap_adapters_save(
    adapters: *const CapAdapters,
    path: *const c_char,
) -> CapStatus {
    guard(|| {
        let a = read_ref(adapters, "adapters")?;
        let path = PathBuf::from(read_str(path, "path")?);
        save_adapters(&a.0, &path)?;
        Ok(())
    })
}

/// Releases an adapter set. Null is ignored.
///
/// # Safety
/// `adapters` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cap_adapters_free(adapters: *mut CapAdapters) {
    if !adapters.is_null() {
        drop(Box::from_raw(adapters));
    }
}

/// Writes the importance score of every component into `scores`, layer by
/// layer with [`cap_sites_per_layer`] entries each. `len` must equal
/// layers × sites.
///
/// # Safety
/// `adapters` must be live and `scores` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cap_adapters_importance(
    adapters: *const CapAdapters,
    scores: *mut f64,
    len: usize,
) -> CapStatus {
    guard(|| {
        let a = read_ref(adapters, "adapters")?;
        if scores.is_null() {
            return Err(null("scores"));
        }
        let report = layer_importance(&a.0);
        if len != report.scores.len() {
            return Err(Failure(
                CapStatus::ConfigError,
                format!("scores holds {len} entries, {} needed", report.scores.len()),
            ));
        }
        let out = std::slice::from_raw_parts_mut(scores, len);
        for (c, s) in &report.scores {
            out[c.flat_index()] = *s;
        }
        Ok(())
    })
}

/// Reads one task's splits from a data directory.
///
/// # Safety
/// `data_dir` and `task` must be NUL-terminated strings and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cap_dataset_load(
    data_dir: *const c_char,
    task: *const c_char,
    out: *mut *mut CapDataset,
) -> CapStatus {
    guard(|| {
        let layout = DataLayout::new(read_str(data_dir, "data_dir")?);
        let ds = read_dataset(&layout, read_str(task, "task")?)?;
        write_out(out, CapDataset(ds))
    })
}

/// Releases a dataset. Null is ignored.
///
/// # Safety
/// `dataset` must be null or a handle from [`cap_dataset_load`] not yet
/// freed.
#[no_mangle]
pub unsafe extern "C" fn cap_dataset_free(dataset: *mut CapDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of examples in a split, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn cap_dataset_len(dataset: *const CapDataset, split: CapSplit) -> usize {
    dataset
        .as_ref()
        .map_or(0, |d| d.0.split(split.into()).len())
}

/// Accuracy of the model, optionally with adapters, on one split.
///
/// # Safety
/// `model` and `dataset` must be live, `adapters` null or live, `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn cap_accuracy(
    model: *const CapModel,
    adapters: *const CapAdapters,
    dataset: *const CapDataset,
    split: CapSplit,
    out: *mut f64,
) -> CapStatus {
    guard(|| {
        let m = read_ref(model, "model")?;
        let d = read_ref(dataset, "dataset")?;
        let a = adapters.as_ref().map(|a| &a.0);
        if out.is_null() {
            return Err(null("out"));
        }
        *out = task_accuracy(&m.0, a, d.0.split(split.into()))?;
        Ok(())
    })
}

/// Perplexity on the held-out general corpus of a data directory.
///
/// # Safety
/// `model` must be live, `adapters` null or live, `data_dir` a
/// NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cap_perplexity(
    model: *const CapModel,
    adapters: *const CapAdapters,
    data_dir: *const c_char,
    out: *mut f64,
) -> CapStatus {
    guard(|| {
        let m = read_ref(model, "model")?;
        let a = adapters.as_ref().map(|a| &a.0);
        let corpus = read_corpus(&DataLayout::new(read_str(data_dir, "data_dir")?))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = perplexity(&m.0, a, &corpus.eval)?;
        Ok(())
    })
}

/// Trains adapters that remove `dataset`'s task from the model, pairing
/// target batches with the general corpus found in `data_dir`. `config_toml`
/// may be null for the default settings. The final epoch's adapters are
/// returned.
///
/// # Safety
/// `model` and `dataset` must be live, `data_dir` a NUL-terminated string,
/// `config_toml` null or NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cap_ablate(
    model: *const CapModel,
    dataset: *const CapDataset,
    data_dir: *const c_char,
    config_toml: *const c_char,
    out: *mut *mut CapAdapters,
) -> CapStatus {
    guard(|| {
        let m = read_ref(model, "model")?;
        let d = read_ref(dataset, "dataset")?;
        let corpus = read_corpus(&DataLayout::new(read_str(data_dir, "data_dir")?))?;
        let config = if config_toml.is_null() {
            TrainConfig::default()
        } else {
            TrainConfig::from_toml(read_str(config_toml, "config_toml")?)?
        };
        let (set, _) = ablate(&m.0, &d.0, &corpus.textreg, &config, None)?;
        write_out(out, CapAdapters(set))
    })
}
