//! C interface to the demonstration retrieval library.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `_free` function. Structured values cross the boundary
//! as UTF-8 JSON. Strings returned through `out` parameters must be released
//! with [`demosel_string_free`]. Every fallible call returns a
//! [`DemoselStatus`]; on failure [`demosel_last_error`] describes the cause.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use demosel::codec::{linearize, parse_output};
use demosel::corpus::{load_pool, CandidatePool, IESample, LoadOptions, Task};
use demosel::eval::{micro_f1, Normalization, Prediction};
use demosel::retriever::{retrieve, BiEncoder, EncodedIndex};
use demosel::sparse_index::{Bm25Index, Bm25Params, IndexedText};
use demosel::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DemoselStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidInput = 3,
    Io = 4,
    Artifact = 5,
    Config = 6,
    Backend = 7,
    Panic = 8,
}

/// A validated candidate pool.
pub struct DemoselPool(CandidatePool);

/// A BM25 index over a pool's inputs.
pub struct DemoselBm25(Bm25Index);

/// A trained retriever bound to its vector index.
pub struct DemoselRetriever {
    encoder: BiEncoder,
    index: EncodedIndex,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DemoselStatus {
    match e {
        Error::Io { .. } => DemoselStatus::Io,
        Error::Artifact(_) => DemoselStatus::Artifact,
        Error::Config(_) => DemoselStatus::Config,
        Error::Backend(_) => DemoselStatus::Backend,
        _ => DemoselStatus::InvalidInput,
    }
}

struct Failure(DemoselStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(DemoselStatus::InvalidInput, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DemoselStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DemoselStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DemoselStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(DemoselStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(DemoselStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(DemoselStatus::NullPointer, format!("{what} is null")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(DemoselStatus::NullPointer, "out is null".into()));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(DemoselStatus::NullPointer, "out is null".into()));
    }
    *out = CString::new(s)
        .map_err(|_| Failure(DemoselStatus::InvalidInput, "result contains a nul byte".into()))?
        .into_raw();
    Ok(())
}

fn sample(json: &str) -> Result<IESample, Failure> {
    IESample::from_json_line(json).map_err(|m| Failure(DemoselStatus::InvalidInput, m))
}

/// Message for the last failed call on this thread, or null. Owned by the
/// library and valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn demosel_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn demosel_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn demosel_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Load and validate a JSONL pool file. Rejected samples are skipped.
///
/// # Safety
/// `path` must be a valid C string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn demosel_pool_load(path: *const c_char, strict: bool, out: *mut *mut DemoselPool) -> DemoselStatus {
    guard(|| {
        let path = text(path, "path")?;
        let loaded = load_pool(Path::new(path), LoadOptions { strict })?;
        put(out, DemoselPool(loaded.pool))
    })
}

/// Number of samples in `pool`, 0 for null.
///
/// # Safety
/// `pool` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn demosel_pool_len(pool: *const DemoselPool) -> usize {
    pool.as_ref().map_or(0, |p| p.0.len())
}

/// # Safety
/// `pool` must be null or a handle from [`demosel_pool_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn demosel_pool_free(pool: *mut DemoselPool) {
    if !pool.is_null() {
        drop(Box::from_raw(pool));
    }
}

/// Index the inputs of `pool` with BM25 (k1 = 1.2, b = 0.75).
///
/// # Safety
/// `pool` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn demosel_bm25_build(pool: *const DemoselPool, out: *mut *mut DemoselBm25) -> DemoselStatus {
    guard(|| {
        let pool = handle(pool, "pool")?;
        let index = Bm25Index::build(&pool.0, IndexedText::Input, Bm25Params::default())?;
        put(out, DemoselBm25(index))
    })
}

/// Top `k` documents for `query` as a JSON array of `{"id", "score"}`.
///
/// # Safety
/// `index` must be a live handle, `query` a C string, `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn demosel_bm25_top_k(
    index: *const DemoselBm25,
    query: *const c_char,
    k: usize,
    out_json: *mut *mut c_char,
) -> DemoselStatus {
    guard(|| {
        let index = handle(index, "index")?;
        let hits = index.0.top_k(text(query, "query")?, k);
        put_string(out_json, serde_json::to_string(&hits)?)
    })
}

/// # Safety
/// `index` must be null or a handle from [`demosel_bm25_build`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn demosel_bm25_free(index: *mut DemoselBm25) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Open a retriever checkpoint directory together with its index file.
/// Fails with `Artifact` when the index was built by another checkpoint.
///
/// # Safety
/// Both paths must be C strings and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn demosel_retriever_open(
    checkpoint_dir: *const c_char,
    index_path: *const c_char,
    out: *mut *mut DemoselRetriever,
) -> DemoselStatus {
    guard(|| {
        let encoder = BiEncoder::load(Path::new(text(checkpoint_dir, "checkpoint_dir")?))?;
        let index = EncodedIndex::load(Path::new(text(index_path, "index_path")?))?;
        if index.fingerprint != encoder.fingerprint() {
            return Err(Failure(
                DemoselStatus::Artifact,
                "index fingerprint does not match the retriever checkpoint".into(),
            ));
        }
        put(out, DemoselRetriever { encoder, index })
    })
}

/// Top `k` demonstrations for one sample (a pool-format JSON record) as
/// `{"hits": [{"id", "score"}], "warning": string|null}`.
///
/// # Safety
/// `retriever` must be a live handle, `sample_json` a C string and
/// `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn demosel_retriever_retrieve(
    retriever: *const DemoselRetriever,
    sample_json: *const c_char,
    k: usize,
    out_json: *mut *mut c_char,
) -> DemoselStatus {
    guard(|| {
        let r = handle(retriever, "retriever")?;
        let q = sample(text(sample_json, "sample_json")?)?;
        let res = retrieve(&r.index, &r.encoder, &q, k)?;
        let v = serde_json::json!({ "hits": res.hits, "warning": res.warning });
        put_string(out_json, v.to_string())
    })
}

/// # Safety
/// `retriever` must be null or a handle from [`demosel_retriever_open`]
/// not yet freed.
#[no_mangle]
pub unsafe extern "C" fn demosel_retriever_free(retriever: *mut DemoselRetriever) {
    if !retriever.is_null() {
        drop(Box::from_raw(retriever));
    }
}

/// Prompt rendering of a sample, with or without its output section.
///
/// # Safety
/// `sample_json` must be a C string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn demosel_linearize(
    sample_json: *const c_char,
    include_output: bool,
    out: *mut *mut c_char,
) -> DemoselStatus {
    guard(|| {
        let s = sample(text(sample_json, "sample_json")?)?;
        put_string(out, linearize(&s, include_output).text)
    })
}

/// Parse generated text for a task (`NER`, `RE`, `ED` or `EAE`) and a JSON
/// array schema into `{"extractions": [...], "segments", "skipped",
/// "ambiguous_commas"}`.
///
/// # Safety
/// All pointers must be C strings except `out_json`, which must be writable.
#[no_mangle]
pub unsafe extern "C" fn demosel_parse_output(
    generated: *const c_char,
    task: *const c_char,
    schema_json: *const c_char,
    out_json: *mut *mut c_char,
) -> DemoselStatus {
    guard(|| {
        let code = text(task, "task")?;
        let task = Task::from_code(code)
            .ok_or_else(|| Failure(DemoselStatus::InvalidInput, format!("unknown task {code:?}")))?;
        let schema: Vec<String> = serde_json::from_str(text(schema_json, "schema_json")?)?;
        let parsed = parse_output(text(generated, "generated")?, task, &schema);
        let p = Prediction::new("", parsed.extractions).with_diagnostics(&parsed.diagnostics);
        let v = serde_json::json!({
            "extractions": p.extractions,
            "segments": p.segments,
            "skipped": p.skipped,
            "ambiguous_commas": p.ambiguous_commas,
        });
        put_string(out_json, v.to_string())
    })
}

/// Micro-F1 report for a JSON array of predictions against a JSON array of
/// gold samples. `normalize` is `exact` or `lower`.
///
/// # Safety
/// All pointers must be C strings except `out_json`, which must be writable.
#[no_mangle]
pub unsafe extern "C" fn demosel_evaluate(
    predictions_json: *const c_char,
    golds_json: *const c_char,
    normalize: *const c_char,
    out_json: *mut *mut c_char,
) -> DemoselStatus {
    guard(|| {
        let preds: Vec<Prediction> = serde_json::from_str(text(predictions_json, "predictions_json")?)?;
        let raw: Vec<serde_json::Value> = serde_json::from_str(text(golds_json, "golds_json")?)?;
        let golds = raw.iter().map(|v| sample(&v.to_string())).collect::<Result<Vec<_>, _>>()?;
        let n: Normalization = text(normalize, "normalize")?
            .parse()
            .map_err(|e: String| Failure(DemoselStatus::InvalidInput, e))?;
        put_string(out_json, micro_f1(&preds, &golds, n)?.to_json())
    })
}
