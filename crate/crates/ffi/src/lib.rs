//! C ABI for the phraseseg toolkit.
//!
//! Conventions: handles are opaque pointers created and freed by paired
//! `_new`/`_parse` and `_free` functions; fallible calls return a
//! [`PsStatus`] code and write results through out-pointers; string
//! outputs are heap-allocated and must be released with
//! [`ps_string_free`]. On any non-OK status the failing call stores a
//! message retrievable with [`ps_last_error_message`] until the next
//! call on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};

use phraseseg::annotation::{
    dataset_stats, load_dataset, load_scene_dir, parse_tagged_text, serialize_tagged_text,
};
use phraseseg::mask::{point_iou, PointMask};
use phraseseg::metrics::{acc_at, miou, miou_s, report, EvalRecord};
use phraseseg::model::load_checkpoint;
use phraseseg::pipeline::{evaluate_items, prepare_items, RunConfig};
use phraseseg::{AnnotatedDescription, PhraseTarget};

/// Result code of a fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    ParseError = 3,
    IoError = 4,
    EvalError = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl Into<String>) {
    let text = CString::new(message.into().replace('\0', "?"))
        .unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = text);
}

fn clear_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = CString::default());
}

fn fail(status: PsStatus, message: impl Into<String>) -> PsStatus {
    set_error(message);
    status
}

/// Message of the most recent failure on this thread. The pointer stays
/// valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn ps_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn ps_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Release a string returned by this library.
///
/// # Safety
/// `text` must be a pointer previously returned through an out-parameter
/// of this library, not yet freed; NULL is accepted and ignored.
#[no_mangle]
pub unsafe extern "C" fn ps_string_free(text: *mut c_char) {
    if !text.is_null() {
        drop(CString::from_raw(text));
    }
}

unsafe fn required_str<'a>(pointer: *const c_char, name: &str) -> Result<&'a str, PsStatus> {
    if pointer.is_null() {
        return Err(fail(PsStatus::NullArgument, format!("{name} is NULL")));
    }
    CStr::from_ptr(pointer)
        .to_str()
        .map_err(|_| fail(PsStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

fn string_out(text: String, out: *mut *mut c_char) -> PsStatus {
    let Ok(c_text) = CString::new(text) else {
        return fail(PsStatus::InvalidArgument, "output contains a NUL byte");
    };
    unsafe { *out = c_text.into_raw() };
    clear_error();
    PsStatus::Ok
}

/// A parsed description: tokens plus phrase targets. Opaque.
pub struct PsDescription {
    inner: AnnotatedDescription,
}

/// Span, head, and target-ID count of one phrase.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PsPhrase {
    /// First token of the span.
    pub start: usize,
    /// Last token of the span (inclusive).
    pub end: usize,
    /// Token whose query row produces the mask.
    pub head: usize,
    /// Number of target instance IDs.
    pub id_count: usize,
    /// Nonzero for the sentence-level sentinel.
    pub sentence_level: u8,
}

/// Parse tagged interchange text (`... [phrase](id,id) ...`).
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_description_parse(
    text: *const c_char,
    out: *mut *mut PsDescription,
) -> PsStatus {
    if out.is_null() {
        return fail(PsStatus::NullArgument, "out is NULL");
    }
    let text = match required_str(text, "text") {
        Ok(text) => text,
        Err(status) => return status,
    };
    match parse_tagged_text(text) {
        Ok((tokens, phrases)) => {
            let handle = Box::new(PsDescription {
                inner: AnnotatedDescription {
                    description_id: String::new(),
                    scene_id: String::new(),
                    tokens,
                    phrases,
                },
            });
            *out = Box::into_raw(handle);
            clear_error();
            PsStatus::Ok
        }
        Err(err) => fail(PsStatus::ParseError, err.to_string()),
    }
}

/// # Safety
/// `desc` must come from [`ps_description_parse`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ps_description_free(desc: *mut PsDescription) {
    if !desc.is_null() {
        drop(Box::from_raw(desc));
    }
}

/// # Safety
/// `desc` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ps_description_token_count(desc: *const PsDescription) -> usize {
    desc.as_ref().map_or(0, |d| d.inner.tokens.len())
}

/// # Safety
/// `desc` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ps_description_phrase_count(desc: *const PsDescription) -> usize {
    desc.as_ref().map_or(0, |d| d.inner.phrases.len())
}

/// Copy out one token as a fresh string.
///
/// # Safety
/// `desc` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_description_token(
    desc: *const PsDescription,
    index: usize,
    out: *mut *mut c_char,
) -> PsStatus {
    let Some(desc) = desc.as_ref() else {
        return fail(PsStatus::NullArgument, "desc is NULL");
    };
    if out.is_null() {
        return fail(PsStatus::NullArgument, "out is NULL");
    }
    match desc.inner.tokens.get(index) {
        Some(token) => string_out(token.clone(), out),
        None => fail(
            PsStatus::InvalidArgument,
            format!("token index {index} out of range"),
        ),
    }
}

fn phrase_at(desc: &PsDescription, index: usize) -> Result<&PhraseTarget, PsStatus> {
    desc.inner.phrases.get(index).ok_or_else(|| {
        fail(
            PsStatus::InvalidArgument,
            format!("phrase index {index} out of range"),
        )
    })
}

/// Span and head of one phrase.
///
/// # Safety
/// `desc` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_description_phrase(
    desc: *const PsDescription,
    index: usize,
    out: *mut PsPhrase,
) -> PsStatus {
    let Some(desc) = desc.as_ref() else {
        return fail(PsStatus::NullArgument, "desc is NULL");
    };
    if out.is_null() {
        return fail(PsStatus::NullArgument, "out is NULL");
    }
    match phrase_at(desc, index) {
        Ok(phrase) => {
            *out = PsPhrase {
                start: phrase.span.0,
                end: phrase.span.1,
                head: phrase.head_index,
                id_count: phrase.target_ids.len(),
                sentence_level: u8::from(phrase.is_sentence_level),
            };
            clear_error();
            PsStatus::Ok
        }
        Err(status) => status,
    }
}

/// Copy one phrase's target IDs (ascending) into `buffer`.
///
/// # Safety
/// `desc` must be a live handle; `buffer` must hold `capacity` entries;
/// `written` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_description_phrase_ids(
    desc: *const PsDescription,
    index: usize,
    buffer: *mut u32,
    capacity: usize,
    written: *mut usize,
) -> PsStatus {
    let Some(desc) = desc.as_ref() else {
        return fail(PsStatus::NullArgument, "desc is NULL");
    };
    if buffer.is_null() || written.is_null() {
        return fail(PsStatus::NullArgument, "buffer or written is NULL");
    }
    match phrase_at(desc, index) {
        Ok(phrase) => {
            if phrase.target_ids.len() > capacity {
                return fail(
                    PsStatus::InvalidArgument,
                    format!(
                        "buffer holds {capacity} ids, phrase has {}",
                        phrase.target_ids.len()
                    ),
                );
            }
            for (slot, &id) in phrase.target_ids.iter().enumerate() {
                *buffer.add(slot) = id;
            }
            *written = phrase.target_ids.len();
            clear_error();
            PsStatus::Ok
        }
        Err(status) => status,
    }
}

/// Serialize back to canonical tagged text.
///
/// # Safety
/// `desc` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_description_serialize(
    desc: *const PsDescription,
    out: *mut *mut c_char,
) -> PsStatus {
    let Some(desc) = desc.as_ref() else {
        return fail(PsStatus::NullArgument, "desc is NULL");
    };
    if out.is_null() {
        return fail(PsStatus::NullArgument, "out is NULL");
    }
    string_out(serialize_tagged_text(&desc.inner), out)
}

/// Intersection-over-union of two 0/1 masks of equal length. Two empty
/// masks count as IoU 1.
///
/// # Safety
/// `a` and `b` must each point to `len` readable bytes; `out` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_point_iou(
    a: *const u8,
    b: *const u8,
    len: usize,
    out: *mut f64,
) -> PsStatus {
    if a.is_null() || b.is_null() || out.is_null() {
        return fail(PsStatus::NullArgument, "a, b, or out is NULL");
    }
    let bits_a: Vec<bool> = std::slice::from_raw_parts(a, len).iter().map(|&v| v != 0).collect();
    let bits_b: Vec<bool> = std::slice::from_raw_parts(b, len).iter().map(|&v| v != 0).collect();
    let mask_a = PointMask::from_bits("ffi", &bits_a);
    let mask_b = PointMask::from_bits("ffi", &bits_b);
    match point_iou(&mask_a, &mask_b) {
        Ok(value) => {
            *out = value;
            clear_error();
            PsStatus::Ok
        }
        Err(err) => fail(PsStatus::InvalidArgument, err.to_string()),
    }
}

/// Accumulated evaluation records. Opaque.
#[derive(Default)]
pub struct PsEvalRecords {
    records: Vec<EvalRecord>,
}

#[no_mangle]
pub extern "C" fn ps_eval_records_new() -> *mut PsEvalRecords {
    Box::into_raw(Box::default())
}

/// # Safety
/// `records` must come from [`ps_eval_records_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ps_eval_records_free(records: *mut PsEvalRecords) {
    if !records.is_null() {
        drop(Box::from_raw(records));
    }
}

/// Append one description's per-phrase IoUs with its subset flags.
///
/// # Safety
/// `records` must be a live handle; `ious` must point to `count` values.
#[no_mangle]
pub unsafe extern "C" fn ps_eval_records_push(
    records: *mut PsEvalRecords,
    ious: *const f64,
    count: usize,
    is_long: u8,
    is_complex: u8,
) -> PsStatus {
    let Some(records) = records.as_mut() else {
        return fail(PsStatus::NullArgument, "records is NULL");
    };
    if ious.is_null() {
        return fail(PsStatus::NullArgument, "ious is NULL");
    }
    if count == 0 {
        return fail(PsStatus::InvalidArgument, "a record needs at least one IoU");
    }
    let values = std::slice::from_raw_parts(ious, count);
    if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return fail(PsStatus::InvalidArgument, "IoU outside [0, 1]");
    }
    records.records.push(EvalRecord {
        description_id: format!("r{}", records.records.len()),
        ious: values.to_vec(),
        long: is_long != 0,
        complex: is_complex != 0,
    });
    clear_error();
    PsStatus::Ok
}

unsafe fn metric_out(
    result: Result<f64, phraseseg::metrics::MetricsError>,
    out: *mut f64,
) -> PsStatus {
    if out.is_null() {
        return fail(PsStatus::NullArgument, "out is NULL");
    }
    match result {
        Ok(value) => {
            *out = value;
            clear_error();
            PsStatus::Ok
        }
        Err(err) => fail(PsStatus::EvalError, err.to_string()),
    }
}

/// Flat phrase-level mean IoU.
///
/// # Safety
/// `records` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_metrics_miou(records: *const PsEvalRecords, out: *mut f64) -> PsStatus {
    let Some(records) = records.as_ref() else {
        return fail(PsStatus::NullArgument, "records is NULL");
    };
    metric_out(miou(&records.records), out)
}

/// Mean of per-description mean IoUs.
///
/// # Safety
/// `records` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_metrics_miou_s(
    records: *const PsEvalRecords,
    out: *mut f64,
) -> PsStatus {
    let Some(records) = records.as_ref() else {
        return fail(PsStatus::NullArgument, "records is NULL");
    };
    metric_out(miou_s(&records.records), out)
}

/// Fraction of phrases with IoU strictly above the threshold.
///
/// # Safety
/// `records` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_metrics_acc_at(
    records: *const PsEvalRecords,
    threshold: f64,
    out: *mut f64,
) -> PsStatus {
    let Some(records) = records.as_ref() else {
        return fail(PsStatus::NullArgument, "records is NULL");
    };
    metric_out(acc_at(&records.records, threshold), out)
}

/// Full subset report (Overall plus non-empty Long/Complex) as JSON.
///
/// # Safety
/// `records` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_metrics_report_json(
    records: *const PsEvalRecords,
    out: *mut *mut c_char,
) -> PsStatus {
    let Some(records) = records.as_ref() else {
        return fail(PsStatus::NullArgument, "records is NULL");
    };
    if out.is_null() {
        return fail(PsStatus::NullArgument, "out is NULL");
    }
    match report(&records.records) {
        Ok(value) => string_out(
            serde_json::to_string(&value).expect("report serialization"),
            out,
        ),
        Err(err) => fail(PsStatus::EvalError, err.to_string()),
    }
}

/// Corpus statistics of a record file, as JSON.
///
/// # Safety
/// `records_path` must be a NUL-terminated path and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_dataset_stats_json(
    records_path: *const c_char,
    out: *mut *mut c_char,
) -> PsStatus {
    let path = match required_str(records_path, "records_path") {
        Ok(path) => path,
        Err(status) => return status,
    };
    if out.is_null() {
        return fail(PsStatus::NullArgument, "out is NULL");
    }
    let (descriptions, violations) = match load_dataset(Path::new(path), None) {
        Ok(loaded) => loaded,
        Err(err) => return fail(PsStatus::IoError, err.to_string()),
    };
    if !violations.is_empty() {
        return fail(
            PsStatus::ParseError,
            format!("{} record violations", violations.len()),
        );
    }
    match dataset_stats(&descriptions) {
        Ok(summary) => string_out(
            serde_json::to_string(&summary).expect("summary serialization"),
            out,
        ),
        Err(err) => fail(PsStatus::EvalError, err.to_string()),
    }
}

/// Evaluate a checkpoint on a dataset directory (`records.jsonl` +
/// `scenes/`) and return the metrics report as JSON. `run_config_json`
/// may be NULL for defaults.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_evaluate_dataset(
    data_dir: *const c_char,
    ckpt_path: *const c_char,
    run_config_json: *const c_char,
    out: *mut *mut c_char,
) -> PsStatus {
    let data_dir = match required_str(data_dir, "data_dir") {
        Ok(path) => PathBuf::from(path),
        Err(status) => return status,
    };
    let ckpt_path = match required_str(ckpt_path, "ckpt_path") {
        Ok(path) => PathBuf::from(path),
        Err(status) => return status,
    };
    if out.is_null() {
        return fail(PsStatus::NullArgument, "out is NULL");
    }
    let mut run_config = if run_config_json.is_null() {
        RunConfig::default()
    } else {
        let raw = match required_str(run_config_json, "run_config_json") {
            Ok(raw) => raw,
            Err(status) => return status,
        };
        match serde_json::from_str(raw) {
            Ok(config) => config,
            Err(err) => return fail(PsStatus::ParseError, format!("run config: {err}")),
        }
    };

    let scenes = match load_scene_dir(&data_dir.join("scenes")) {
        Ok(scenes) => scenes,
        Err(err) => return fail(PsStatus::IoError, err.to_string()),
    };
    let (descriptions, violations) =
        match load_dataset(&data_dir.join("records.jsonl"), Some(&scenes)) {
            Ok(loaded) => loaded,
            Err(err) => return fail(PsStatus::IoError, err.to_string()),
        };
    if !violations.is_empty() {
        return fail(
            PsStatus::ParseError,
            format!("{} record violations", violations.len()),
        );
    }
    let (model_config, state) = match load_checkpoint(&ckpt_path) {
        Ok(loaded) => loaded,
        Err(err) => return fail(PsStatus::IoError, err.to_string()),
    };
    run_config.model = model_config;
    let items = match prepare_items(&scenes, &descriptions, &run_config, None) {
        Ok(items) => items,
        Err(err) => return fail(PsStatus::EvalError, err.to_string()),
    };
    let records = match evaluate_items(&items, &run_config.model, &state) {
        Ok(records) => records,
        Err(err) => return fail(PsStatus::EvalError, err.to_string()),
    };
    match report(&records) {
        Ok(value) => string_out(
            serde_json::to_string(&value).expect("report serialization"),
            out,
        ),
        Err(err) => fail(PsStatus::EvalError, err.to_string()),
    }
}
