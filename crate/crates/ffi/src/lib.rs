//! C ABI over the timefuse library.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! functions and released with the matching `*_free`. Every fallible call
//! returns a `TfStatus`; on failure `tf_last_error_message` describes the
//! most recent error on the calling thread. Strings returned by the
//! library are released with `tf_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use timefuse::checkpoint::load_stage2;
use timefuse::config::{apply_override, Preset, RunConfig};
use timefuse::crossmodal::CrossModalModel;
use timefuse::pipeline;
use timefuse::probe::{auroc, fused_cls};
use timefuse::signal::{Epoch, SessionStats};
use timefuse::synth::{Corpus, Split};
use timefuse::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidInput = 3,
    Shape = 4,
    DegenerateStats = 5,
    Alignment = 6,
    Lookup = 7,
    UndefinedMetric = 8,
    MissingDependency = 9,
    CorruptCheckpoint = 10,
    InvalidConfig = 11,
    Io = 12,
    Serialization = 13,
    BufferTooSmall = 14,
    Panic = 15,
}

/// Resolved run configuration.
pub struct TfConfig {
    inner: RunConfig,
}

/// Generated or loaded corpus.
pub struct TfCorpus {
    inner: Corpus,
}

/// Stage-2 model with the session statistics it was trained with.
pub struct TfModel {
    model: CrossModalModel<f32>,
    stats: SessionStats,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> TfStatus {
    match e {
        Error::InvalidInput(_) => TfStatus::InvalidInput,
        Error::Shape(_) => TfStatus::Shape,
        Error::DegenerateStats(_) => TfStatus::DegenerateStats,
        Error::Alignment(_) => TfStatus::Alignment,
        Error::Lookup(_) => TfStatus::Lookup,
        Error::UndefinedMetric(_) => TfStatus::UndefinedMetric,
        Error::MissingDependency(_) => TfStatus::MissingDependency,
        Error::CorruptCheckpoint(_) => TfStatus::CorruptCheckpoint,
        Error::InvalidConfig(_) => TfStatus::InvalidConfig,
        Error::Io(_) => TfStatus::Io,
        Error::Json(_) => TfStatus::Serialization,
    }
}

struct Fail(TfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TfStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(&msg);
            s
        }
        Err(_) => {
            set_error("panic inside the library");
            TfStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(TfStatus::NullArgument, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(TfStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Message of the last failed call on this thread; empty if none. Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn tf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by the library.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates a configuration from a preset name ("desk" or "paper-scale").
///
/// # Safety
/// `preset` must be a valid NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tf_config_new(preset: *const c_char, out: *mut *mut TfConfig) -> TfStatus {
    guard(|| {
        let p: Preset = text(preset, "preset")?.parse()?;
        put(out, TfConfig { inner: RunConfig::preset(p) })
    })
}

/// Applies one `key.path=value` override and revalidates.
///
/// # Safety
/// `cfg` must be a live handle; `assignment` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tf_config_set(cfg: *mut TfConfig, assignment: *const c_char) -> TfStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("config"))?;
        let spec = text(assignment, "assignment")?;
        let mut v = cfg.inner.to_json();
        apply_override(&mut v, spec)?;
        let next: RunConfig = serde_json::from_value(v).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        next.validate()?;
        cfg.inner = next;
        Ok(())
    })
}

/// The effective configuration as pretty-printed JSON.
///
/// # Safety
/// `cfg` must be a live handle; release `*out` with `tf_string_free`.
#[no_mangle]
pub unsafe extern "C" fn tf_config_json(cfg: *const TfConfig, out: *mut *mut c_char) -> TfStatus {
    guard(|| {
        let cfg = handle(cfg, "config")?;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        *out = CString::new(cfg.inner.echo()).expect("json has no NUL").into_raw();
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from `tf_config_new` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tf_config_free(cfg: *mut TfConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Generates the corpus of `seed` under `cfg`.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tf_corpus_generate(cfg: *const TfConfig, seed: u64, out: *mut *mut TfCorpus) -> TfStatus {
    guard(|| {
        let cfg = handle(cfg, "config")?;
        put(out, TfCorpus { inner: pipeline::corpus_for(&cfg.inner, seed)? })
    })
}

/// # Safety
/// `dir` must be a valid NUL-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tf_corpus_load(dir: *const c_char, out: *mut *mut TfCorpus) -> TfStatus {
    guard(|| {
        let dir = text(dir, "directory")?;
        put(out, TfCorpus { inner: Corpus::load(Path::new(dir))? })
    })
}

/// # Safety
/// `corpus` must be a live handle; `dir` a valid NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn tf_corpus_save(corpus: *const TfCorpus, dir: *const c_char) -> TfStatus {
    guard(|| {
        let c = handle(corpus, "corpus")?;
        c.inner.save(Path::new(text(dir, "directory")?), None)?;
        Ok(())
    })
}

/// Aligned window groups across all splits; 0 for a null handle.
///
/// # Safety
/// `corpus` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tf_corpus_num_windows(corpus: *const TfCorpus) -> usize {
    corpus.as_ref().map_or(0, |c| c.inner.num_windows())
}

/// # Safety
/// `corpus` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tf_corpus_num_modalities(corpus: *const TfCorpus) -> usize {
    corpus.as_ref().map_or(0, |c| c.inner.modalities().len())
}

/// # Safety
/// `corpus` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tf_corpus_free(corpus: *mut TfCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Loads the Stage-2 checkpoint `name` under `root`, resolving its Stage-1
/// dependencies from the same root.
///
/// # Safety
/// `root` and `name` must be valid NUL-terminated strings; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tf_model_load(root: *const c_char, name: *const c_char, out: *mut *mut TfModel) -> TfStatus {
    guard(|| {
        let root = text(root, "root")?;
        let name = text(name, "name")?;
        let (model, man) = load_stage2(Path::new(root), name)?;
        put(out, TfModel { model, stats: man.session_stats })
    })
}

/// Width of one fused embedding (two concatenated CLS vectors).
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tf_model_embedding_width(model: *const TfModel) -> usize {
    model.as_ref().map_or(0, |m| 2 * m.model.embed_dim())
}

/// 1 if the model carries the time-conditioning path, 0 otherwise.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tf_model_is_time_aware(model: *const TfModel) -> i32 {
    model.as_ref().map_or(0, |m| m.model.time_aware() as i32)
}

/// Frozen fused embeddings of every window group in `corpus` (train, then
/// validation, then test), row-major into `out`. `*rows` receives the row
/// count. With a null `out` or a `capacity` (in floats) below
/// `rows * width`, nothing is written and `TF_STATUS_BUFFER_TOO_SMALL` is
/// returned with `*rows` set.
///
/// # Safety
/// Handles must be live; `out` must hold `capacity` floats; `rows` writable.
#[no_mangle]
pub unsafe extern "C" fn tf_model_embed(
    model: *const TfModel,
    corpus: *const TfCorpus,
    first: usize,
    second: usize,
    out: *mut f32,
    capacity: usize,
    rows: *mut usize,
) -> TfStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let c = handle(corpus, "corpus")?;
        if rows.is_null() {
            return Err(null("rows"));
        }
        let groups: Vec<&[Epoch]> = [Split::Train, Split::Val, Split::Test].iter().flat_map(|&s| c.inner.groups(s)).collect();
        let width = 2 * m.model.embed_dim();
        *rows = groups.len();
        if out.is_null() || capacity < groups.len() * width {
            return Err(Fail(TfStatus::BufferTooSmall, format!("need {} floats", groups.len() * width)));
        }
        let emb = fused_cls(&m.model, &groups, (first, second), &m.stats)?;
        let dst = std::slice::from_raw_parts_mut(out, groups.len() * width);
        for (d, s) in dst.iter_mut().zip(emb.iter()) {
            *d = *s;
        }
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tf_model_free(model: *mut TfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Area under the ROC curve of `scores` against 0/1 `labels`, ties counted
/// as one half.
///
/// # Safety
/// `scores` and `labels` must hold `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tf_auroc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> TfStatus {
    guard(|| {
        if scores.is_null() || labels.is_null() || out.is_null() {
            return Err(null("scores, labels or output"));
        }
        let s = std::slice::from_raw_parts(scores, n);
        let l: Vec<usize> = std::slice::from_raw_parts(labels, n).iter().map(|&x| x as usize).collect();
        if l.iter().any(|&x| x > 1) {
            return Err(Fail(TfStatus::InvalidInput, "labels must be 0 or 1".into()));
        }
        *out = auroc(s, &l)?;
        Ok(())
    })
}

/// Runs the time-aware vs baseline comparison for every configured seed and
/// writes the mean AUROC gain in points.
///
/// # Safety
/// `cfg` must be a live handle; `gain` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tf_compare_time_aware(cfg: *const TfConfig, gain: *mut f64) -> TfStatus {
    guard(|| {
        let cfg = handle(cfg, "config")?;
        if gain.is_null() {
            return Err(null("gain"));
        }
        *gain = pipeline::compare_time_aware(&cfg.inner)?.auroc_gain;
        Ok(())
    })
}
