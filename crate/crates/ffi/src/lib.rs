//! C ABI over the `hcan` library.
//!
//! Models and corpora are opaque handles owned by the caller and released
//! with the matching `*_free`. Every fallible call returns an [`HcanStatus`];
//! on failure [`hcan_last_error`] describes the most recent error on the
//! calling thread. Strings returned through out-parameters are released
//! with [`hcan_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use hcan::checkpoint::{self, CheckpointError};
use hcan::dataio::{self, Corpus, DataError, Split};
use hcan::tensor::{Array, TensorError};
use hcan::{trainer, Error};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HcanStatus {
    Ok = 0,
    /// A required pointer argument was null.
    Null = 1,
    /// An argument was out of range or not valid UTF-8.
    InvalidArgument = 2,
    Io = 3,
    /// Malformed corpus, missing labels or checkpoint/corpus mismatch.
    Data = 4,
    Checkpoint = 5,
    Dimension = 6,
    Numeric = 7,
    /// The library panicked; the handle involved should be discarded.
    Panic = 8,
}

/// Trained model loaded from a checkpoint.
pub struct HcanModel {
    model: hcan::HcanModel,
    labels: Vec<String>,
}

/// Corpus directory loaded into memory.
pub struct HcanCorpus {
    corpus: Corpus,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> HcanStatus {
    match e {
        Error::Io { .. } | Error::Data(DataError::Io { .. }) | Error::Checkpoint(CheckpointError::Io { .. }) => HcanStatus::Io,
        Error::Checkpoint(_) => HcanStatus::Checkpoint,
        Error::Tensor(TensorError::Dimension { .. }) => HcanStatus::Dimension,
        Error::Tensor(TensorError::NonFinite(_)) | Error::NonFiniteLoss { .. } | Error::Verification(_) => HcanStatus::Numeric,
        Error::Config(_) | Error::Tensor(_) | Error::Data(DataError::Spec(_)) => HcanStatus::InvalidArgument,
        Error::Data(_)
        | Error::TrainingData(_)
        | Error::LabelsRequired(_)
        | Error::Compatibility(_)
        | Error::UnknownConversation(_) => HcanStatus::Data,
    }
}

struct Fail(HcanStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HcanStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            HcanStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            HcanStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(HcanStatus::Null, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(HcanStatus::InvalidArgument, format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn out_string(out: *mut *mut c_char, s: String) {
    *out = CString::new(s).expect("json has no nul bytes").into_raw();
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn hcan_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hcan_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hcan_model_load(path: *const c_char, out: *mut *mut HcanModel) -> HcanStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path, "path")?;
        let ck = checkpoint::load(&path).map_err(Error::from)?;
        *out = Box::into_raw(Box::new(HcanModel {
            model: ck.model,
            labels: ck.labels,
        }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`hcan_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hcan_model_free(model: *mut HcanModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Utterance feature width expected by the model.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hcan_model_feature_dim(model: *const HcanModel, out: *mut usize) -> HcanStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.model.config().feature_dim;
        Ok(())
    })
}

/// Number of emotion classes.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hcan_model_num_emotions(model: *const HcanModel, out: *mut usize) -> HcanStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.model.config().num_emotions;
        Ok(())
    })
}

/// Name of emotion `index` as a newly allocated string.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hcan_model_label(model: *const HcanModel, index: usize, out: *mut *mut c_char) -> HcanStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let label = m.labels.get(index).ok_or_else(|| {
            Fail(
                HcanStatus::InvalidArgument,
                format!("label index {index} out of range (model has {})", m.labels.len()),
            )
        })?;
        out_string(out, label.clone());
        Ok(())
    })
}

/// Predicts one conversation of `n` utterances.
///
/// `features` is row-major `n × feature_dim`, `speakers` holds one id per
/// utterance. `probs` receives `n × num_emotions` values of ŷ and `labels`
/// (may be null) the argmax per utterance.
///
/// # Safety
/// Every non-null pointer must reference at least the stated number of
/// elements.
#[no_mangle]
pub unsafe extern "C" fn hcan_model_predict(
    model: *const HcanModel,
    features: *const f64,
    speakers: *const u32,
    n: usize,
    probs: *mut f64,
    labels: *mut u32,
) -> HcanStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if features.is_null() {
            return Err(null("features"));
        }
        if speakers.is_null() {
            return Err(null("speakers"));
        }
        if probs.is_null() {
            return Err(null("probs"));
        }
        if n == 0 {
            return Err(Fail(HcanStatus::InvalidArgument, "conversation is empty".into()));
        }
        let d = m.model.config().feature_dim;
        let e = m.model.config().num_emotions;
        let x = std::slice::from_raw_parts(features, n * d).to_vec();
        let spk: Vec<usize> = std::slice::from_raw_parts(speakers, n).iter().map(|&s| s as usize).collect();
        let x = Array::new(vec![n, d], x).map_err(Error::from)?;
        let p = m.model.predict_features(&x, &spk)?;
        std::slice::from_raw_parts_mut(probs, n * e).copy_from_slice(p.y_hat.data());
        if !labels.is_null() {
            let out = std::slice::from_raw_parts_mut(labels, n);
            for (o, &l) in out.iter_mut().zip(&p.labels) {
                *o = l as u32;
            }
        }
        Ok(())
    })
}

/// Loads a corpus directory (train required, val/test optional).
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hcan_corpus_load(dir: *const c_char, out: *mut *mut HcanCorpus) -> HcanStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = path_arg(dir, "dir")?;
        let corpus = dataio::load_corpus(&dir).map_err(Error::from)?;
        *out = Box::into_raw(Box::new(HcanCorpus { corpus }));
        Ok(())
    })
}

/// Releases a corpus. Null is ignored.
///
/// # Safety
/// `corpus` must come from [`hcan_corpus_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hcan_corpus_free(corpus: *mut HcanCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Corpus statistics as a JSON document.
///
/// # Safety
/// `corpus` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hcan_corpus_stats_json(corpus: *const HcanCorpus, out: *mut *mut c_char) -> HcanStatus {
    guard(|| {
        let c = corpus.as_ref().ok_or_else(|| null("corpus"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let stats = dataio::corpus_stats(&c.corpus);
        out_string(out, serde_json::to_string(&stats).expect("stats serialize"));
        Ok(())
    })
}

/// Metrics of `model` on one split (0 train, 1 val, 2 test) as JSON.
///
/// # Safety
/// Handles must be live and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hcan_evaluate_json(
    model: *const HcanModel,
    corpus: *const HcanCorpus,
    split: u32,
    out: *mut *mut c_char,
) -> HcanStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let c = corpus.as_ref().ok_or_else(|| null("corpus"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let split = *Split::ALL
            .get(split as usize)
            .ok_or_else(|| Fail(HcanStatus::InvalidArgument, format!("split {split} is not 0, 1 or 2")))?;
        if m.labels != c.corpus.label_set {
            return Err(Error::Compatibility("checkpoint and corpus label sets differ".into()).into());
        }
        let metrics = trainer::evaluate_split(&m.model, &c.corpus, split)?;
        out_string(out, serde_json::to_string(&metrics).expect("metrics serialize"));
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hcan_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
