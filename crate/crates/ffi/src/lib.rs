//! C ABI over the plateline metrics, knowledge parser, prompt builder and
//! stub embedder.
//!
//! Every fallible function returns a [`PlStatus`] and writes its result
//! through an out pointer. On failure the message is available from
//! [`pl_last_error_message`] on the same thread. Strings returned through
//! out pointers are owned by the caller and released with [`pl_string_free`].
//! Handles are released with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use plateline::gateway::{build_prompt, parse_knowledge, prompt_hash, PromptTemplate};
use plateline::math::{softmax, LogitVector};
use plateline::metrics::classification::{build_confusion, per_class_prf};
use plateline::metrics::detection::{ciou_loss, iou, BBox};
use plateline::metrics::text::{bleu, rouge_l, tokenize, Smoothing};
use plateline::model::{FoodClass, GeneratedKnowledge, ParseErrorKind, PredictionRecord};
use plateline::sep::{cosine_distance, StubEmbedder};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    NoJson = 4,
    Malformed = 5,
    SchemaViolation = 6,
    Panic = 99,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

type Failure = (PlStatus, String);

fn invalid(e: impl ToString) -> Failure {
    (PlStatus::InvalidArgument, e.to_string())
}

/// Runs `f`, records its error message and converts panics into `Panic`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PlStatus::Ok
        }
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PlStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err((PlStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (PlStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn out_ref<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| (PlStatus::NullArgument, format!("{name} is null")))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| (PlStatus::NullArgument, format!("{name} is null")))
}

fn class(id: &str) -> Result<FoodClass, Failure> {
    FoodClass::new(id).map_err(invalid)
}

fn owned_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s).map(CString::into_raw).map_err(invalid)
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn pl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static, NUL-terminated library version.
#[no_mangle]
pub extern "C" fn pl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn pl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Sentence BLEU-4, uniform weights, no smoothing.
///
/// # Safety
/// `references` must point to `n_references` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn pl_bleu(
    candidate: *const c_char,
    references: *const *const c_char,
    n_references: usize,
    out: *mut f64,
) -> PlStatus {
    guard(|| {
        let cand = tokenize(text(candidate, "candidate")?);
        if references.is_null() {
            return Err((PlStatus::NullArgument, "references is null".into()));
        }
        let refs = std::slice::from_raw_parts(references, n_references)
            .iter()
            .map(|&r| text(r, "reference").map(tokenize))
            .collect::<Result<Vec<_>, _>>()?;
        let out = out_ref(out, "out")?;
        *out = bleu(&cand, &refs, 4, Smoothing::None).map_err(invalid)?;
        Ok(())
    })
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PlRougeL {
    pub recall: f64,
    pub precision: f64,
    pub f: f64,
}

/// ROUGE-L with beta = 1.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pl_rouge_l(
    candidate: *const c_char,
    reference: *const c_char,
    out: *mut PlRougeL,
) -> PlStatus {
    guard(|| {
        let c = tokenize(text(candidate, "candidate")?);
        let r = tokenize(text(reference, "reference")?);
        let s = rouge_l(&c, &r, 1.0).map_err(invalid)?;
        *out_ref(out, "out")? = PlRougeL {
            recall: s.recall,
            precision: s.precision,
            f: s.f,
        };
        Ok(())
    })
}

/// Writes `n` probabilities to `out`.
///
/// # Safety
/// `logits` and `out` must each hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn pl_softmax(logits: *const f64, n: usize, out: *mut f64) -> PlStatus {
    guard(|| {
        if logits.is_null() || out.is_null() {
            return Err((PlStatus::NullArgument, "logits or out is null".into()));
        }
        let z = LogitVector::new(std::slice::from_raw_parts(logits, n).to_vec()).map_err(invalid)?;
        let p = softmax(&z);
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(p.values());
        Ok(())
    })
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

fn bbox(b: &PlBox) -> Result<BBox, Failure> {
    BBox::new(b.x_min, b.y_min, b.x_max, b.y_max).map_err(invalid)
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pl_iou(a: *const PlBox, b: *const PlBox, out: *mut f64) -> PlStatus {
    guard(|| {
        let (a, b) = (bbox(handle(a, "a")?)?, bbox(handle(b, "b")?)?);
        *out_ref(out, "out")? = iou(&a, &b).map_err(invalid)?;
        Ok(())
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pl_ciou_loss(pred: *const PlBox, gt: *const PlBox, out: *mut f64) -> PlStatus {
    guard(|| {
        let (p, g) = (bbox(handle(pred, "pred")?)?, bbox(handle(gt, "gt")?)?);
        *out_ref(out, "out")? = ciou_loss(&p, &g).map_err(invalid)?;
        Ok(())
    })
}

/// Prompt for `class_id` from the built-in structured template.
///
/// # Safety
/// `class_id` must be NUL-terminated; free `*out` with [`pl_string_free`].
#[no_mangle]
pub unsafe extern "C" fn pl_build_prompt(class_id: *const c_char, out: *mut *mut c_char) -> PlStatus {
    guard(|| {
        let c = class(text(class_id, "class_id")?)?;
        let slot = out_ref(out, "out")?;
        *slot = owned_string(build_prompt(&c, &PromptTemplate::structured()))?;
        Ok(())
    })
}

/// Hex cache key / prompt hash for one generation.
///
/// # Safety
/// Strings must be NUL-terminated; free `*out` with [`pl_string_free`].
#[no_mangle]
pub unsafe extern "C" fn pl_prompt_hash(
    template_version: *const c_char,
    provider_id: *const c_char,
    model: *const c_char,
    class_id: *const c_char,
    out: *mut *mut c_char,
) -> PlStatus {
    guard(|| {
        let h = prompt_hash(
            text(template_version, "template_version")?,
            text(provider_id, "provider_id")?,
            text(model, "model")?,
            &class(text(class_id, "class_id")?)?,
        );
        *out_ref(out, "out")? = owned_string(h)?;
        Ok(())
    })
}

/// Parsed knowledge object.
pub struct PlKnowledge {
    inner: GeneratedKnowledge,
}

/// Extracts and validates the knowledge object in a raw model response.
/// On a parse failure the status names the failure kind and `*out` is null.
///
/// # Safety
/// `raw` must be NUL-terminated; free `*out` with [`pl_knowledge_free`].
#[no_mangle]
pub unsafe extern "C" fn pl_knowledge_parse(raw: *const c_char, out: *mut *mut PlKnowledge) -> PlStatus {
    guard(|| {
        let slot = out_ref(out, "out")?;
        *slot = ptr::null_mut();
        let raw = text(raw, "raw")?;
        match parse_knowledge(raw) {
            Ok(inner) => {
                *slot = Box::into_raw(Box::new(PlKnowledge { inner }));
                Ok(())
            }
            Err(e) => {
                let status = match e.kind {
                    ParseErrorKind::NoJson => PlStatus::NoJson,
                    ParseErrorKind::Malformed => PlStatus::Malformed,
                    ParseErrorKind::SchemaViolation => PlStatus::SchemaViolation,
                };
                Err((status, e.message))
            }
        }
    })
}

/// Canonical JSON of a parsed knowledge object.
///
/// # Safety
/// `k` must be a live handle; free `*out` with [`pl_string_free`].
#[no_mangle]
pub unsafe extern "C" fn pl_knowledge_to_json(k: *const PlKnowledge, out: *mut *mut c_char) -> PlStatus {
    guard(|| {
        let k = handle(k, "knowledge")?;
        let json = serde_json::to_string(&k.inner).map_err(invalid)?;
        *out_ref(out, "out")? = owned_string(json)?;
        Ok(())
    })
}

/// # Safety
/// `k` must come from [`pl_knowledge_parse`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pl_knowledge_free(k: *mut PlKnowledge) {
    if !k.is_null() {
        drop(Box::from_raw(k));
    }
}

/// Deterministic hashed bag-of-tokens embedder.
pub struct PlEmbedder {
    inner: StubEmbedder,
}

#[no_mangle]
pub extern "C" fn pl_embedder_stub_new() -> *mut PlEmbedder {
    Box::into_raw(Box::new(PlEmbedder {
        inner: StubEmbedder::default(),
    }))
}

/// Cosine distance in [0, 2] between the embeddings of two texts.
///
/// # Safety
/// `e` must be a live handle; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pl_embedder_distance(
    e: *const PlEmbedder,
    a: *const c_char,
    b: *const c_char,
    out: *mut f64,
) -> PlStatus {
    guard(|| {
        let e = handle(e, "embedder")?;
        let va = e.inner.embed_one(text(a, "a")?).map_err(invalid)?;
        let vb = e.inner.embed_one(text(b, "b")?).map_err(invalid)?;
        *out_ref(out, "out")? = cosine_distance(&va, &vb).map_err(invalid)?;
        Ok(())
    })
}

/// # Safety
/// `e` must come from [`pl_embedder_stub_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pl_embedder_free(e: *mut PlEmbedder) {
    if !e.is_null() {
        drop(Box::from_raw(e));
    }
}

/// Confusion-matrix accumulator over a fixed class list.
pub struct PlConfusion {
    classes: Vec<FoodClass>,
    records: Vec<PredictionRecord>,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PlClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// # Safety
/// `classes` must point to `n_classes` NUL-terminated class ids; free
/// `*out` with [`pl_confusion_free`].
#[no_mangle]
pub unsafe extern "C" fn pl_confusion_new(
    classes: *const *const c_char,
    n_classes: usize,
    out: *mut *mut PlConfusion,
) -> PlStatus {
    guard(|| {
        let slot = out_ref(out, "out")?;
        *slot = ptr::null_mut();
        if classes.is_null() {
            return Err((PlStatus::NullArgument, "classes is null".into()));
        }
        let mut list = std::slice::from_raw_parts(classes, n_classes)
            .iter()
            .map(|&c| class(text(c, "class")?))
            .collect::<Result<Vec<_>, _>>()?;
        if list.is_empty() {
            return Err(invalid("class list is empty"));
        }
        let n = list.len();
        list.sort();
        list.dedup();
        if list.len() != n {
            return Err(invalid("class list has duplicates"));
        }
        *slot = Box::into_raw(Box::new(PlConfusion {
            classes: list,
            records: Vec::new(),
        }));
        Ok(())
    })
}

/// Counts one (true, predicted) observation.
///
/// # Safety
/// `h` must be a live handle; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pl_confusion_add(
    h: *mut PlConfusion,
    true_class: *const c_char,
    predicted_class: *const c_char,
) -> PlStatus {
    guard(|| {
        let h = out_ref(h, "confusion")?;
        let t = class(text(true_class, "true_class")?)?;
        let p = class(text(predicted_class, "predicted_class")?)?;
        for c in [&t, &p] {
            if h.classes.binary_search(c).is_err() {
                return Err(invalid(format!("unknown class {c}")));
            }
        }
        h.records.push(PredictionRecord {
            image_id: h.records.len().to_string(),
            true_class: t,
            predicted_class: p,
            confidence: 1.0,
            top_k: None,
            source: None,
        });
        Ok(())
    })
}

/// Top-1 accuracy of the observations so far (0 when empty).
///
/// # Safety
/// `h` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pl_confusion_accuracy(h: *const PlConfusion, out: *mut f64) -> PlStatus {
    guard(|| {
        let h = handle(h, "confusion")?;
        let cm = build_confusion(&h.classes, &h.records).map_err(invalid)?;
        *out_ref(out, "out")? = cm.accuracy();
        Ok(())
    })
}

/// # Safety
/// `h` must be a live handle; `class_id` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pl_confusion_class_score(
    h: *const PlConfusion,
    class_id: *const c_char,
    out: *mut PlClassScore,
) -> PlStatus {
    guard(|| {
        let h = handle(h, "confusion")?;
        let c = class(text(class_id, "class_id")?)?;
        let cm = build_confusion(&h.classes, &h.records).map_err(invalid)?;
        let s = per_class_prf(&cm, &c).map_err(invalid)?;
        *out_ref(out, "out")? = PlClassScore {
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
            support: s.support,
        };
        Ok(())
    })
}

/// # Safety
/// `h` must come from [`pl_confusion_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pl_confusion_free(h: *mut PlConfusion) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}
