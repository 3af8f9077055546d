//! C interface to `proto-refine`.
//!
//! Every object crosses the boundary as an opaque handle created by a
//! `pr_*_load`/`pr_*` constructor and released with the matching `pr_*_free`.
//! Fallible calls return a [`PrStatus`]; on failure the message is available
//! from [`pr_last_error_message`] on the same thread until the next call.
//! Handles are immutable once created and may be shared across threads for
//! reading.
//!
//! # Safety
//!
//! Pointer arguments must be null or valid for the access the function makes:
//! handles must come from this library and not yet be freed, strings must be
//! nul-terminated, and `out` parameters must point to writable storage. Each
//! handle is freed exactly once.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use proto_refine::classifier::{predict_labels, ClassifierHead};
use proto_refine::data::{
    load_label_table, load_prototypes, load_slide, save_label_table, save_prototypes, save_slide,
    LabelTable, PrototypeSet, SlideDataset,
};
use proto_refine::metrics::{compute_metrics, confusion_matrix};
use proto_refine::pipeline::{train_slide, PipelineConfig};
use proto_refine::prototype::{aggregate_global_prototypes, extract_local_prototypes};
use proto_refine::pseudo::pseudo_label_slide;
use proto_refine::{Error, ErrorKind};

/// Outcome of a fallible call. Codes 1 to 3 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrStatus {
    Ok = 0,
    /// Bad or inconsistent input data.
    DataError = 1,
    /// Invalid configuration or parameters.
    ConfigError = 2,
    /// Bug, broken numerical state or a caught panic.
    InternalError = 3,
    /// Null pointer or non UTF-8 string argument.
    InvalidArgument = 4,
}

/// Hyperparameters and stage toggles, parsed from the pipeline config JSON.
pub struct PrConfig(PipelineConfig);

/// One slide: patch grid, coarse labels and embeddings.
pub struct PrSlide(SlideDataset);

/// Local or global prototype set.
pub struct PrPrototypes(PrototypeSet);

/// Per-patch labels and scores of one slide.
pub struct PrLabels(LabelTable);

/// Trained classifier head.
pub struct PrHead(ClassifierHead);

/// Confusion counts and metrics; undefined ratios are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PrMetrics {
    pub tp: u64,
    pub fp: u64,
    pub fn_count: u64,
    pub tn: u64,
    pub dice: f64,
    pub iou: f64,
    pub f1: f64,
    pub ppv: f64,
    pub npv: f64,
    pub tpr: f64,
    pub tnr: f64,
    pub accuracy: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure {
    status: PrStatus,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.kind() {
            ErrorKind::Data => PrStatus::DataError,
            ErrorKind::Config => PrStatus::ConfigError,
            ErrorKind::Internal => PrStatus::InternalError,
        };
        Failure {
            status,
            message: e.to_string(),
        }
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure {
        status: PrStatus::InvalidArgument,
        message: message.into(),
    }
}

fn set_last_error(message: Option<String>) {
    let c = message.map(|m| CString::new(m.replace('\0', " ")).expect("no interior nul"));
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error(None);
            PrStatus::Ok
        }
        Ok(Err(e)) => {
            set_last_error(Some(e.message));
            e.status
        }
        Err(panic) => {
            let what = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(Some(format!("internal error: {what}")));
            PrStatus::InternalError
        }
    }
}

unsafe fn get<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| invalid(format!("{name} is null")))
}

unsafe fn text<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(invalid(format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{name} is not valid UTF-8")))
}

fn check_out<T>(out: *mut *mut T, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(invalid(format!("{name} is null")));
    }
    Ok(())
}

unsafe fn put<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message of the last failed call on this thread, or null after a success.
///
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn pr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map_or(std::ptr::null(), |c| c.as_ptr())
    })
}

/// Default hyperparameters with every stage enabled.
#[no_mangle]
pub unsafe extern "C" fn pr_config_default(out: *mut *mut PrConfig) -> PrStatus {
    guard(|| {
        check_out(out, "out")?;
        put(out, PrConfig(PipelineConfig::default()));
        Ok(())
    })
}

/// Parses a pipeline config JSON document; omitted fields take defaults.
#[no_mangle]
pub unsafe extern "C" fn pr_config_from_json(
    json: *const c_char,
    out: *mut *mut PrConfig,
) -> PrStatus {
    guard(|| {
        let json = text(json, "json")?;
        check_out(out, "out")?;
        let cfg: PipelineConfig =
            serde_json::from_str(json).map_err(|e| Failure::from(Error::Config(e.to_string())))?;
        cfg.refine.validate()?;
        cfg.toggles.validate()?;
        put(out, PrConfig(cfg));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pr_config_free(config: *mut PrConfig) {
    free(config)
}

/// Loads a slide from its manifest (.jsonl) and embedding file (.pemb).
#[no_mangle]
pub unsafe extern "C" fn pr_slide_load(
    manifest_path: *const c_char,
    embedding_path: *const c_char,
    out: *mut *mut PrSlide,
) -> PrStatus {
    guard(|| {
        let m = text(manifest_path, "manifest_path")?;
        let e = text(embedding_path, "embedding_path")?;
        check_out(out, "out")?;
        put(out, PrSlide(load_slide(Path::new(m), Path::new(e))?));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pr_slide_save(
    slide: *const PrSlide,
    manifest_path: *const c_char,
    embedding_path: *const c_char,
) -> PrStatus {
    guard(|| {
        let slide = get(slide, "slide")?;
        let m = text(manifest_path, "manifest_path")?;
        let e = text(embedding_path, "embedding_path")?;
        save_slide(&slide.0, Path::new(m), Path::new(e))?;
        Ok(())
    })
}

/// Number of patches; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn pr_slide_len(slide: *const PrSlide) -> usize {
    slide.as_ref().map_or(0, |s| s.0.len())
}

/// Embedding dimension; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn pr_slide_dim(slide: *const PrSlide) -> usize {
    slide.as_ref().map_or(0, |s| s.0.dim())
}

/// The coarse annotation as a label table.
#[no_mangle]
pub unsafe extern "C" fn pr_slide_coarse_labels(
    slide: *const PrSlide,
    out: *mut *mut PrLabels,
) -> PrStatus {
    guard(|| {
        let slide = get(slide, "slide")?;
        check_out(out, "out")?;
        put(out, PrLabels(slide.0.coarse_labels()));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pr_slide_free(slide: *mut PrSlide) {
    free(slide)
}

/// Clusters a slide into `c_local` local prototypes with the given k-means seed.
#[no_mangle]
pub unsafe extern "C" fn pr_prototypes_extract_local(
    slide: *const PrSlide,
    config: *const PrConfig,
    seed: u64,
    out: *mut *mut PrPrototypes,
) -> PrStatus {
    guard(|| {
        let slide = get(slide, "slide")?;
        let cfg = &get(config, "config")?.0.refine;
        check_out(out, "out")?;
        put(
            out,
            PrPrototypes(extract_local_prototypes(&slide.0, cfg.c_local, seed, cfg)?),
        );
        Ok(())
    })
}

/// Clusters `n` local sets into `k_global` global prototypes, seeded by the config seed.
#[no_mangle]
pub unsafe extern "C" fn pr_prototypes_aggregate(
    locals: *const *const PrPrototypes,
    n: usize,
    config: *const PrConfig,
    out: *mut *mut PrPrototypes,
) -> PrStatus {
    guard(|| {
        if locals.is_null() && n > 0 {
            return Err(invalid("locals is null"));
        }
        let cfg = &get(config, "config")?.0.refine;
        check_out(out, "out")?;
        let sets = (0..n)
            .map(|i| get(*locals.add(i), &format!("locals[{i}]")).map(|p| p.0.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        put(
            out,
            PrPrototypes(aggregate_global_prototypes(
                &sets,
                cfg.k_global,
                cfg.seed,
                cfg,
            )?),
        );
        Ok(())
    })
}

/// Loads a prototype `.pemb` file and its `.json` sidecar.
#[no_mangle]
pub unsafe extern "C" fn pr_prototypes_load(
    path: *const c_char,
    out: *mut *mut PrPrototypes,
) -> PrStatus {
    guard(|| {
        let path = text(path, "path")?;
        check_out(out, "out")?;
        put(out, PrPrototypes(load_prototypes(Path::new(path))?));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pr_prototypes_save(
    set: *const PrPrototypes,
    path: *const c_char,
) -> PrStatus {
    guard(|| {
        let set = get(set, "set")?;
        let path = text(path, "path")?;
        save_prototypes(&set.0, Path::new(path))?;
        Ok(())
    })
}

/// Number of prototypes; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn pr_prototypes_len(set: *const PrPrototypes) -> usize {
    set.as_ref().map_or(0, |s| s.0.len())
}

/// Prototype dimension; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn pr_prototypes_dim(set: *const PrPrototypes) -> usize {
    set.as_ref().map_or(0, |s| s.0.dim())
}

#[no_mangle]
pub unsafe extern "C" fn pr_prototypes_free(set: *mut PrPrototypes) {
    free(set)
}

/// Pseudo-labels a slide against a prototype set.
#[no_mangle]
pub unsafe extern "C" fn pr_pseudo_label(
    slide: *const PrSlide,
    prototypes: *const PrPrototypes,
    config: *const PrConfig,
    out: *mut *mut PrLabels,
) -> PrStatus {
    guard(|| {
        let slide = get(slide, "slide")?;
        let set = get(prototypes, "prototypes")?;
        let cfg = &get(config, "config")?.0.refine;
        check_out(out, "out")?;
        put(
            out,
            PrLabels(pseudo_label_slide(&slide.0, &set.0, cfg)?.labels),
        );
        Ok(())
    })
}

/// Loads a label table CSV for the named slide.
#[no_mangle]
pub unsafe extern "C" fn pr_labels_load(
    path: *const c_char,
    slide_id: *const c_char,
    out: *mut *mut PrLabels,
) -> PrStatus {
    guard(|| {
        let path = text(path, "path")?;
        let id = text(slide_id, "slide_id")?;
        check_out(out, "out")?;
        put(out, PrLabels(load_label_table(Path::new(path), id)?));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pr_labels_save(labels: *const PrLabels, path: *const c_char) -> PrStatus {
    guard(|| {
        let labels = get(labels, "labels")?;
        let path = text(path, "path")?;
        save_label_table(&labels.0, Path::new(path))?;
        Ok(())
    })
}

/// Number of entries; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn pr_labels_len(labels: *const PrLabels) -> usize {
    labels.as_ref().map_or(0, |l| l.0.len())
}

/// Number of positive entries; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn pr_labels_positive_count(labels: *const PrLabels) -> usize {
    labels.as_ref().map_or(0, |l| l.0.positive_count())
}

/// Label and score of entry `index`, in slide order.
#[no_mangle]
pub unsafe extern "C" fn pr_labels_get(
    labels: *const PrLabels,
    index: usize,
    label: *mut u8,
    score: *mut f32,
) -> PrStatus {
    guard(|| {
        let labels = get(labels, "labels")?;
        if label.is_null() || score.is_null() {
            return Err(invalid("label and score must be non-null"));
        }
        let e = labels
            .0
            .entries
            .get(index)
            .ok_or_else(|| invalid(format!("index {index} out of range {}", labels.0.len())))?;
        *label = e.label;
        *score = e.score;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pr_labels_free(labels: *mut PrLabels) {
    free(labels)
}

/// Trains a head on one slide, honouring the config's sampling and re-finetuning toggles.
///
/// `out_predictions` may be null; otherwise it receives the final per-patch predictions.
#[no_mangle]
pub unsafe extern "C" fn pr_train(
    slide: *const PrSlide,
    labels: *const PrLabels,
    config: *const PrConfig,
    out_head: *mut *mut PrHead,
    out_predictions: *mut *mut PrLabels,
) -> PrStatus {
    guard(|| {
        let slide = get(slide, "slide")?;
        let labels = get(labels, "labels")?;
        let cfg = &get(config, "config")?.0;
        check_out(out_head, "out_head")?;
        let out = train_slide(&slide.0, &labels.0, &cfg.refine, &cfg.toggles)?;
        put(out_head, PrHead(out.head));
        if !out_predictions.is_null() {
            put(out_predictions, PrLabels(out.predictions));
        }
        Ok(())
    })
}

/// Labels each patch 1 iff the head's probability is at least `threshold`.
#[no_mangle]
pub unsafe extern "C" fn pr_head_predict(
    head: *const PrHead,
    slide: *const PrSlide,
    threshold: f64,
    out: *mut *mut PrLabels,
) -> PrStatus {
    guard(|| {
        let head = get(head, "head")?;
        let slide = get(slide, "slide")?;
        check_out(out, "out")?;
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::Config(format!("threshold {threshold} outside [0, 1]")).into());
        }
        put(out, PrLabels(predict_labels(&head.0, &slide.0, threshold)?));
        Ok(())
    })
}

/// Writes the head JSON, tagged with the hash of `config`.
#[no_mangle]
pub unsafe extern "C" fn pr_head_save(
    head: *const PrHead,
    config: *const PrConfig,
    path: *const c_char,
) -> PrStatus {
    guard(|| {
        let head = get(head, "head")?;
        let cfg = &get(config, "config")?.0;
        let path = text(path, "path")?;
        std::fs::write(path, head.0.to_json(&cfg.refine.hash()))
            .map_err(|e| Failure::from(Error::io(path, e)))?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pr_head_load(path: *const c_char, out: *mut *mut PrHead) -> PrStatus {
    guard(|| {
        let path = text(path, "path")?;
        check_out(out, "out")?;
        let json = std::fs::read_to_string(path).map_err(|e| Failure::from(Error::io(path, e)))?;
        put(out, PrHead(ClassifierHead::from_json(&json)?.0));
        Ok(())
    })
}

/// Input dimension; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn pr_head_dim(head: *const PrHead) -> usize {
    head.as_ref().map_or(0, |h| h.0.dim())
}

#[no_mangle]
pub unsafe extern "C" fn pr_head_free(head: *mut PrHead) {
    free(head)
}

/// Compares predicted labels with ground truth over the same patches.
#[no_mangle]
pub unsafe extern "C" fn pr_metrics(
    predicted: *const PrLabels,
    truth: *const PrLabels,
    out: *mut PrMetrics,
) -> PrStatus {
    guard(|| {
        let predicted = get(predicted, "predicted")?;
        let truth = get(truth, "truth")?;
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let cm = confusion_matrix(&predicted.0, &truth.0)?;
        let m = compute_metrics(&cm);
        let v = |x: Option<f64>| x.unwrap_or(f64::NAN);
        *out = PrMetrics {
            tp: cm.tp,
            fp: cm.fp,
            fn_count: cm.fn_,
            tn: cm.tn,
            dice: v(m.dice),
            iou: v(m.iou),
            f1: v(m.f1),
            ppv: v(m.ppv),
            npv: v(m.npv),
            tpr: v(m.tpr),
            tnr: v(m.tnr),
            accuracy: v(m.accuracy),
        };
        Ok(())
    })
}
