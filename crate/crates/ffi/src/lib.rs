//! C ABI over the skillmem engine.
//!
//! Objects cross the boundary as opaque handles freed by their `*_free`
//! function. Every fallible call returns an [`SmStatus`]; on failure the
//! message is available from [`sm_last_error`] on the same thread. Strings
//! returned through out-pointers are owned by the caller and released with
//! [`sm_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use skillmem::config::RunConfig;
use skillmem::embedding::{Embedder, HashEmbedder};
use skillmem::environment::token_f1;
use skillmem::executor::parse_action_blocks;
use skillmem::memory_bank::MemoryBank;
use skillmem::skill_bank::SkillBank;
use skillmem::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmStatus {
    SmOk = 0,
    SmErrNullPointer = 1,
    SmErrUtf8 = 2,
    SmErrInvalidArgument = 3,
    SmErrConfig = 4,
    SmErrRuntime = 5,
    SmErrPanic = 6,
}

/// Opaque skill bank.
pub struct SmSkillBank {
    inner: SkillBank,
}

/// Opaque memory bank with its own hashing embedder.
pub struct SmMemoryBank {
    inner: MemoryBank,
    embedder: HashEmbedder,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SmStatus {
    match e {
        Error::Config(_) | Error::Schema { .. } => SmStatus::SmErrConfig,
        Error::InvalidArgument(_)
        | Error::Validation { .. }
        | Error::DimensionMismatch { .. }
        | Error::Json(_)
        | Error::Line { .. } => SmStatus::SmErrInvalidArgument,
        _ => SmStatus::SmErrRuntime,
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (SmStatus, String)>) -> SmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SmStatus::SmOk,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SmStatus::SmErrPanic
        }
    }
}

fn lib(e: Error) -> (SmStatus, String) {
    (status_of(&e), e.to_string())
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (SmStatus, String)> {
    if p.is_null() {
        return Err((SmStatus::SmErrNullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (SmStatus::SmErrUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), (SmStatus, String)> {
    if out.is_null() {
        return Err((SmStatus::SmErrNullPointer, "output pointer is null".into()));
    }
    *out = value;
    Ok(())
}

fn to_c(s: String) -> Result<*mut c_char, (SmStatus, String)> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| (SmStatus::SmErrRuntime, "string contains a NUL byte".into()))
}

unsafe fn handle<'a, T>(p: *const T) -> Result<&'a T, (SmStatus, String)> {
    p.as_ref()
        .ok_or_else(|| (SmStatus::SmErrNullPointer, "handle is null".into()))
}

unsafe fn handle_mut<'a, T>(p: *mut T) -> Result<&'a mut T, (SmStatus, String)> {
    p.as_mut()
        .ok_or_else(|| (SmStatus::SmErrNullPointer, "handle is null".into()))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn sm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn sm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---------------------------------------------------------------------------
// Skill bank

/// Bank holding the four primitive skills (version 0).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sm_skill_bank_new_primitives(out: *mut *mut SmSkillBank) -> SmStatus {
    guard(|| {
        let b = Box::new(SmSkillBank {
            inner: SkillBank::init_primitives(),
        });
        write_out(out, Box::into_raw(b))
    })
}

/// # Safety
/// `json` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sm_skill_bank_from_json(json: *const c_char, out: *mut *mut SmSkillBank) -> SmStatus {
    guard(|| {
        let text = read_str(json, "json")?;
        let inner = SkillBank::from_json(text).map_err(lib)?;
        write_out(out, Box::into_raw(Box::new(SmSkillBank { inner })))
    })
}

/// # Safety
/// `bank` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sm_skill_bank_to_json(bank: *const SmSkillBank, out: *mut *mut c_char) -> SmStatus {
    guard(|| {
        let b = handle(bank)?;
        write_out(out, to_c(b.inner.to_json())?)
    })
}

/// Number of skills, or 0 for a null handle.
///
/// # Safety
/// `bank` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sm_skill_bank_len(bank: *const SmSkillBank) -> usize {
    bank.as_ref().map_or(0, |b| b.inner.len())
}

/// # Safety
/// `bank` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sm_skill_bank_version(bank: *const SmSkillBank) -> u64 {
    bank.as_ref().map_or(0, |b| b.inner.version)
}

/// # Safety
/// `bank` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sm_skill_bank_free(bank: *mut SmSkillBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

// ---------------------------------------------------------------------------
// Memory bank

/// Empty memory bank embedding with feature hashing into `dim` dimensions.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sm_memory_bank_new(dim: usize, out: *mut *mut SmMemoryBank) -> SmStatus {
    guard(|| {
        let embedder = HashEmbedder::new(dim).map_err(lib)?;
        write_out(
            out,
            Box::into_raw(Box::new(SmMemoryBank {
                inner: MemoryBank::new(),
                embedder,
            })),
        )
    })
}

/// # Safety
/// `bank` must be a live handle; `text` NUL-terminated; `out_id` valid or null.
#[no_mangle]
pub unsafe extern "C" fn sm_memory_bank_insert(
    bank: *mut SmMemoryBank,
    text: *const c_char,
    step: u64,
    out_id: *mut u64,
) -> SmStatus {
    guard(|| {
        let b = handle_mut(bank)?;
        let text = read_str(text, "text")?;
        let emb = b.embedder.embed(text).map_err(lib)?;
        let id = b.inner.insert(text.to_string(), emb, step);
        if !out_id.is_null() {
            *out_id = id;
        }
        Ok(())
    })
}

/// Top-`r` memories for `query` as a JSON array of
/// `{"index","id","text","score"}`.
///
/// # Safety
/// `bank` must be a live handle; `query` NUL-terminated; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn sm_memory_bank_retrieve_json(
    bank: *const SmMemoryBank,
    query: *const c_char,
    r: usize,
    out: *mut *mut c_char,
) -> SmStatus {
    guard(|| {
        let b = handle(bank)?;
        let q = read_str(query, "query")?;
        let emb = b.embedder.embed(q).map_err(lib)?;
        let set = b.inner.retrieve(&emb, r).map_err(lib)?;
        let items: Vec<serde_json::Value> = set
            .items
            .iter()
            .map(|it| {
                serde_json::json!({
                    "index": it.local_index,
                    "id": it.item_id,
                    "text": it.text,
                    "score": it.score,
                })
            })
            .collect();
        let json = serde_json::to_string(&items).map_err(|e| lib(e.into()))?;
        write_out(out, to_c(json)?)
    })
}

/// # Safety
/// `bank` must be a live handle; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn sm_memory_bank_to_jsonl(bank: *const SmMemoryBank, out: *mut *mut c_char) -> SmStatus {
    guard(|| {
        let b = handle(bank)?;
        write_out(out, to_c(b.inner.to_jsonl())?)
    })
}

/// # Safety
/// `bank` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sm_memory_bank_len(bank: *const SmMemoryBank) -> usize {
    bank.as_ref().map_or(0, |b| b.inner.len())
}

/// # Safety
/// `bank` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sm_memory_bank_free(bank: *mut SmMemoryBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

// ---------------------------------------------------------------------------
// Utilities

/// Parses executor output into `{"actions":[...],"warnings":[...]}`.
///
/// # Safety
/// `text` NUL-terminated; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn sm_parse_actions_json(text: *const c_char, out: *mut *mut c_char) -> SmStatus {
    guard(|| {
        let text = read_str(text, "text")?;
        let (actions, warnings) = parse_action_blocks(text);
        let json = serde_json::json!({ "actions": actions, "warnings": warnings }).to_string();
        write_out(out, to_c(json)?)
    })
}

/// # Safety
/// Both strings NUL-terminated; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn sm_token_f1(prediction: *const c_char, gold: *const c_char, out: *mut f64) -> SmStatus {
    guard(|| {
        let p = read_str(prediction, "prediction")?;
        let g = read_str(gold, "gold")?;
        write_out(out, token_f1(p, g))
    })
}

/// Trains with the TOML config at `config_path` and returns a JSON summary.
/// Artifacts go to the config's `output_dir`.
///
/// # Safety
/// `config_path` NUL-terminated; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn sm_train(config_path: *const c_char, out: *mut *mut c_char) -> SmStatus {
    guard(|| {
        let path = read_str(config_path, "config_path")?;
        let config = RunConfig::load(Path::new(path)).map_err(lib)?;
        let summary = skillmem::orchestrator::train(&config).map_err(lib)?;
        let json = serde_json::to_string(&summary).map_err(|e| lib(e.into()))?;
        write_out(out, to_c(json)?)
    })
}
