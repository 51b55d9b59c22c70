//! C ABI over `namreid`.
//!
//! Datasets and trained models cross the boundary as opaque handles. Every
//! fallible call returns an [`NrStatus`]; on failure the message is kept per
//! thread and read back with [`nr_last_error`]. Panics never unwind into C:
//! they are caught and reported as `NR_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use namreid::corpus::{gen_corpus, AttributeSpec, CorpusParams, Dataset};
use namreid::eval::{caption_noise_levels, evaluate, QuerySet, Split};
use namreid::nam::recenter;
use namreid::tde::TemplateBank;
use namreid::trainer::{checkpoint_load, checkpoint_save, train, TrainConfig, TrainState};
use namreid::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NrStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Contract = 3,
    NumericInput = 4,
    Io = 5,
    Format = 6,
    Corruption = 7,
    Transport = 8,
    /// The caller's buffer is too small; the needed length was written.
    BufferTooSmall = 9,
    Panic = 10,
}

/// Opaque dataset handle.
pub struct NrDataset(Dataset);

/// Opaque handle to a trained (or freshly initialised) model.
pub struct NrModel(TrainState);

/// Retrieval metrics, all in [0, 1].
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NrRetrieval {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(NrStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Contract(_) => NrStatus::Contract,
            Error::NumericInput(_) => NrStatus::NumericInput,
            Error::Io(_) => NrStatus::Io,
            Error::Corruption(_) => NrStatus::Corruption,
            Error::Format(_) | Error::Json(_) | Error::Protocol(_) => NrStatus::Format,
            Error::Transport(_) => NrStatus::Transport,
        };
        Fail(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> NrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            NrStatus::Ok
        }
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            NrStatus::Panic
        }
    }
}

/// # Safety
/// `p` is null or a NUL-terminated string valid for the call.
unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(NrStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(NrStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

/// # Safety
/// `p` is null or points to a live `T`.
unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail(NrStatus::NullArgument, format!("{what} is null")))
}

fn out_ptr<T>(p: *mut T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(Fail(NrStatus::NullArgument, format!("{what} is null")));
    }
    Ok(())
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn nr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Generates a synthetic corpus with the default attribute spec and the
/// shipped templates; other parameters take their defaults.
///
/// # Safety
/// `out` must be a valid pointer to write a handle into.
#[no_mangle]
pub unsafe extern "C" fn nr_dataset_generate(identities: usize, noise_rate: f64, seed: u64, out: *mut *mut NrDataset) -> NrStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let params = CorpusParams { identities, noise_rate, seed, ..Default::default() };
        let ds = gen_corpus(&AttributeSpec::default(), &params, &TemplateBank::shipped())?;
        *out = Box::into_raw(Box::new(NrDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `dir` is a NUL-terminated path; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nr_dataset_load(dir: *const c_char, out: *mut *mut NrDataset) -> NrStatus {
    guard(|| {
        let dir = PathBuf::from(text(dir, "dir")?);
        out_ptr(out, "out")?;
        *out = Box::into_raw(Box::new(NrDataset(Dataset::load(&dir)?)));
        Ok(())
    })
}

/// # Safety
/// `ds` is a live handle; `dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn nr_dataset_save(ds: *const NrDataset, dir: *const c_char) -> NrStatus {
    guard(|| {
        let ds = borrow(ds, "dataset")?;
        ds.0.save(&PathBuf::from(text(dir, "dir")?))?;
        Ok(())
    })
}

/// Number of captions in the dataset, or 0 for a null handle.
///
/// # Safety
/// `ds` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nr_dataset_caption_count(ds: *const NrDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.captions.len())
}

/// # Safety
/// `ds` is null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn nr_dataset_free(ds: *mut NrDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Trains a model. `config_json` is a run config as JSON, or null for the
/// defaults.
///
/// # Safety
/// `ds` is a live handle; `config_json` null or NUL-terminated; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn nr_model_train(ds: *const NrDataset, config_json: *const c_char, out: *mut *mut NrModel) -> NrStatus {
    guard(|| {
        let ds = borrow(ds, "dataset")?;
        out_ptr(out, "out")?;
        let config = if config_json.is_null() {
            TrainConfig::default()
        } else {
            serde_json::from_str(text(config_json, "config_json")?).map_err(|e| Fail(NrStatus::Contract, format!("run config: {e}")))?
        };
        *out = Box::into_raw(Box::new(NrModel(train(&ds.0, &config)?)));
        Ok(())
    })
}

/// # Safety
/// `dir` is a NUL-terminated path; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nr_model_load(dir: *const c_char, out: *mut *mut NrModel) -> NrStatus {
    guard(|| {
        let dir = PathBuf::from(text(dir, "dir")?);
        out_ptr(out, "out")?;
        *out = Box::into_raw(Box::new(NrModel(checkpoint_load(&dir, None)?)));
        Ok(())
    })
}

/// # Safety
/// `model` is a live handle; `dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn nr_model_save(model: *const NrModel, dir: *const c_char) -> NrStatus {
    guard(|| {
        let m = borrow(model, "model")?;
        checkpoint_save(&PathBuf::from(text(dir, "dir")?), &m.0)?;
        Ok(())
    })
}

/// # Safety
/// `model` is null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn nr_model_free(model: *mut NrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Text-to-image retrieval on the test split (`test != 0`) or the train
/// split, with all captions or only the clean ones as queries.
///
/// # Safety
/// Handles are live; `out` is valid.
#[no_mangle]
pub unsafe extern "C" fn nr_evaluate(
    model: *const NrModel,
    ds: *const NrDataset,
    test: bool,
    clean_queries: bool,
    out: *mut NrRetrieval,
) -> NrStatus {
    guard(|| {
        let m = borrow(model, "model")?;
        let ds = borrow(ds, "dataset")?;
        out_ptr(out, "out")?;
        let split = if test { Split::Test } else { Split::Train };
        let queries = if clean_queries { QuerySet::Clean } else { QuerySet::All };
        let r = evaluate(&m.0, &ds.0, split, queries)?;
        *out = NrRetrieval { rank1: r.rank1, rank5: r.rank5, rank10: r.rank10, map: r.map };
        Ok(())
    })
}

/// Per-word masking probabilities r′ the model assigns to one caption.
/// Writes up to `cap` values into `buf` and the word count into `len`; when
/// `cap` is too small nothing is written to `buf` and `NR_STATUS_BUFFER_TOO_SMALL`
/// is returned.
///
/// # Safety
/// Handles are live; `caption_id` is NUL-terminated; `buf` holds `cap`
/// doubles (may be null when `cap` is 0); `len` is valid.
#[no_mangle]
pub unsafe extern "C" fn nr_mask_probs(
    model: *const NrModel,
    ds: *const NrDataset,
    caption_id: *const c_char,
    buf: *mut f64,
    cap: usize,
    len: *mut usize,
) -> NrStatus {
    guard(|| {
        let m = borrow(model, "model")?;
        let ds = borrow(ds, "dataset")?;
        let id = text(caption_id, "caption_id")?;
        out_ptr(len, "len")?;
        let ci = ds
            .0
            .captions
            .iter()
            .position(|c| c.caption_id == id)
            .ok_or_else(|| Fail(NrStatus::Contract, format!("no caption {id:?}")))?;
        let r = caption_noise_levels(&m.0, &ds.0, &[ci])?.remove(0);
        let probs = recenter(&r, m.0.config.nam.p)?.probs;
        *len = probs.len();
        if probs.len() > cap {
            return Err(Fail(NrStatus::BufferTooSmall, format!("{} words, buffer holds {cap}", probs.len())));
        }
        out_ptr(buf, "buf")?;
        std::ptr::copy_nonoverlapping(probs.as_ptr(), buf, probs.len());
        Ok(())
    })
}

/// Recenters noise levels `r[0..n]` to masking probabilities with mean `p`
/// before clamping, writing them to `out[0..n]`.
///
/// # Safety
/// `r` and `out` each hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn nr_recenter(r: *const f64, n: usize, p: f64, out: *mut f64) -> NrStatus {
    guard(|| {
        if r.is_null() || out.is_null() {
            return Err(Fail(NrStatus::NullArgument, "r or out is null".into()));
        }
        let rs = std::slice::from_raw_parts(r, n);
        let probs = recenter(rs, p)?.probs;
        std::ptr::copy_nonoverlapping(probs.as_ptr(), out, n);
        Ok(())
    })
}
