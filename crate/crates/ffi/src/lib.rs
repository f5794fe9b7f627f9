//! C ABI over the `dimodif` library.
//!
//! Every fallible function returns a [`DmdStatus`]; on failure a message is
//! available from [`dmd_last_error`] on the same thread until the next call.
//! Models and proposal lists are opaque handles released with their `_free`
//! function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dimodif::checkpoint::Checkpoint;
use dimodif::divergence::{normalized_divergence, Granularity, Transcript};
use dimodif::intervals::{iou_1d, Interval, Modality, Proposal};
use dimodif::model::{average_levels, Model, Prediction, Task};
use dimodif::syndata::Sample;
use dimodif::tensor::Mat;
use dimodif::trainer::predict;
use dimodif::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DmdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    TaskMismatch = 5,
    NotApplicable = 6,
    NonFinite = 7,
    OutOfRange = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DmdTask {
    Dfd = 0,
    Tfl = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DmdModality {
    Visual = 0,
    Audio = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DmdModelInfo {
    pub task: i32,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub window: usize,
    pub f_max: usize,
    pub d0: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DmdProposal {
    /// 0 visual, 1 audio.
    pub modality: i32,
    pub onset: f64,
    pub offset: f64,
    pub confidence: f64,
}

/// A loaded checkpoint.
pub struct DmdModel {
    model: Model,
    checkpoint: Checkpoint,
}

/// Proposals from one localization call, highest confidence first.
pub struct DmdProposalList {
    items: Vec<DmdProposal>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> DmdStatus {
    match e {
        Error::Io { .. } => DmdStatus::Io,
        Error::BadMagic { .. }
        | Error::VersionMismatch { .. }
        | Error::Truncated { .. }
        | Error::DimensionMismatch { .. }
        | Error::Parse { .. } => DmdStatus::Format,
        Error::TaskMismatch { .. } => DmdStatus::TaskMismatch,
        Error::NotApplicable(_) => DmdStatus::NotApplicable,
        Error::NonFinite(_) => DmdStatus::NonFinite,
        _ => DmdStatus::InvalidArgument,
    }
}

/// Runs `f`, recording errors and panics.
fn guard(f: impl FnOnce() -> Result<(), (DmdStatus, String)>) -> DmdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DmdStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DmdStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (DmdStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(name: &str) -> (DmdStatus, String) {
    (DmdStatus::NullPointer, format!("{name} is null"))
}

unsafe fn c_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, (DmdStatus, String)> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (DmdStatus::InvalidArgument, format!("{name} is not valid UTF-8")))
}

/// Message describing the last failure on this thread; empty after success.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn dmd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn dmd_status_name(status: DmdStatus) -> *const c_char {
    let s: &'static [u8] = match status {
        DmdStatus::Ok => b"ok\0",
        DmdStatus::NullPointer => b"null pointer\0",
        DmdStatus::InvalidArgument => b"invalid argument\0",
        DmdStatus::Io => b"i/o error\0",
        DmdStatus::Format => b"malformed file\0",
        DmdStatus::TaskMismatch => b"task mismatch\0",
        DmdStatus::NotApplicable => b"not applicable\0",
        DmdStatus::NonFinite => b"non-finite value\0",
        DmdStatus::OutOfRange => b"index out of range\0",
        DmdStatus::Panic => b"internal panic\0",
    };
    s.as_ptr().cast()
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dmd_model_load(path: *const c_char, out: *mut *mut DmdModel) -> DmdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = c_str(path, "path")?;
        let checkpoint = Checkpoint::read(Path::new(path)).map_err(lib_err)?;
        let model = checkpoint.model().map_err(lib_err)?;
        *out = Box::into_raw(Box::new(DmdModel { model, checkpoint }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`dmd_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dmd_model_free(model: *mut DmdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dmd_model_info(model: *const DmdModel, out: *mut DmdModelInfo) -> DmdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let c = m.model.config();
        *out = DmdModelInfo {
            task: match c.task {
                Task::Dfd => DmdTask::Dfd as i32,
                Task::Tfl => DmdTask::Tfl as i32,
            },
            d: c.d,
            heads: c.heads,
            layers: c.layers,
            window: c.window,
            f_max: c.f_max,
            d0: c.d0,
        };
        Ok(())
    })
}

unsafe fn streams(
    m: &DmdModel,
    visual: *const f32,
    audio: *const f32,
    frames: usize,
    d0: usize,
) -> Result<(Mat<f32>, Mat<f32>), (DmdStatus, String)> {
    if visual.is_null() || audio.is_null() {
        return Err(null("feature buffer"));
    }
    let want = m.model.config().d0;
    if d0 != want || frames == 0 {
        return Err((DmdStatus::InvalidArgument, format!("expected frames ≥ 1 and d0 = {want}, got {frames}×{d0}")));
    }
    let n = frames.checked_mul(d0).ok_or((DmdStatus::InvalidArgument, "size overflow".to_string()))?;
    let v = std::slice::from_raw_parts(visual, n).to_vec();
    let a = std::slice::from_raw_parts(audio, n).to_vec();
    if !v.iter().chain(&a).all(|x| x.is_finite()) {
        return Err((DmdStatus::NonFinite, "feature buffers contain NaN or infinity".to_string()));
    }
    Ok((Mat::from_vec(frames, d0, v), Mat::from_vec(frames, d0, a)))
}

fn require_task(m: &DmdModel, task: Task) -> Result<(), (DmdStatus, String)> {
    let found = m.model.config().task;
    if found != task {
        return Err(lib_err(Error::TaskMismatch { expected: task.to_string(), found: found.to_string() }));
    }
    Ok(())
}

/// Per-modality fake probabilities from a detection model. Features are
/// row-major `frames × d0` float arrays.
///
/// # Safety
/// `visual` and `audio` must each hold `frames * d0` floats; `out_probs`
/// must hold 2 floats (visual, audio).
#[no_mangle]
pub unsafe extern "C" fn dmd_model_predict_dfd(
    model: *const DmdModel,
    visual: *const f32,
    audio: *const f32,
    frames: usize,
    d0: usize,
    out_probs: *mut f64,
) -> DmdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out_probs.is_null() {
            return Err(null("out_probs"));
        }
        require_task(m, Task::Dfd)?;
        let (v, a) = streams(m, visual, audio, frames, d0)?;
        let rec = predict(&m.model, &m.checkpoint.params, &sample(v, a)).map_err(lib_err)?;
        *out_probs = rec.modality_scores[0];
        *out_probs.add(1) = rec.modality_scores[1];
        Ok(())
    })
}

fn sample(visual: Mat<f32>, audio: Mat<f32>) -> Sample {
    Sample { id: String::new(), visual, audio, labels: [false; 2], intervals: Vec::new() }
}

/// Level-averaged frame outputs of a localization model. Each output array
/// holds `2 * frames` values: visual frames then audio frames.
///
/// # Safety
/// Input buffers as for [`dmd_model_predict_dfd`]; each output must hold
/// `2 * frames` doubles.
#[no_mangle]
pub unsafe extern "C" fn dmd_model_frame_outputs(
    model: *const DmdModel,
    visual: *const f32,
    audio: *const f32,
    frames: usize,
    d0: usize,
    out_prob: *mut f64,
    out_d_start: *mut f64,
    out_d_end: *mut f64,
) -> DmdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out_prob.is_null() || out_d_start.is_null() || out_d_end.is_null() {
            return Err(null("output buffer"));
        }
        require_task(m, Task::Tfl)?;
        let (v, a) = streams(m, visual, audio, frames, d0)?;
        let (pred, _) = m.model.forward(&m.checkpoint.params, &v, &a, frames).map_err(lib_err)?;
        let Prediction::Tfl(levels) = pred else { unreachable!("task checked") };
        for md in Modality::ALL {
            let fp = average_levels(&levels, md);
            let off = md.index() * frames;
            ptr::copy_nonoverlapping(fp.prob.as_ptr(), out_prob.add(off), frames);
            ptr::copy_nonoverlapping(fp.d_start.as_ptr(), out_d_start.add(off), frames);
            ptr::copy_nonoverlapping(fp.d_end.as_ptr(), out_d_end.add(off), frames);
        }
        Ok(())
    })
}

/// Decoded, suppressed fake-segment proposals from a localization model.
///
/// # Safety
/// Input buffers as for [`dmd_model_predict_dfd`]; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dmd_model_predict_tfl(
    model: *const DmdModel,
    visual: *const f32,
    audio: *const f32,
    frames: usize,
    d0: usize,
    out: *mut *mut DmdProposalList,
) -> DmdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        require_task(m, Task::Tfl)?;
        let (v, a) = streams(m, visual, audio, frames, d0)?;
        let rec = predict(&m.model, &m.checkpoint.params, &sample(v, a)).map_err(lib_err)?;
        let items = rec.proposals.iter().map(to_c).collect();
        *out = Box::into_raw(Box::new(DmdProposalList { items }));
        Ok(())
    })
}

fn to_c(p: &Proposal) -> DmdProposal {
    DmdProposal {
        modality: p.interval.modality().index() as i32,
        onset: p.interval.onset(),
        offset: p.interval.offset(),
        confidence: p.confidence,
    }
}

/// Number of proposals; 0 for null.
///
/// # Safety
/// `list` must be null or come from [`dmd_model_predict_tfl`].
#[no_mangle]
pub unsafe extern "C" fn dmd_proposals_len(list: *const DmdProposalList) -> usize {
    list.as_ref().map_or(0, |l| l.items.len())
}

/// # Safety
/// `list` must come from [`dmd_model_predict_tfl`]; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dmd_proposals_get(list: *const DmdProposalList, index: usize, out: *mut DmdProposal) -> DmdStatus {
    guard(|| {
        let l = list.as_ref().ok_or_else(|| null("list"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = *l
            .items
            .get(index)
            .ok_or_else(|| (DmdStatus::OutOfRange, format!("index {index} ≥ {}", l.items.len())))?;
        Ok(())
    })
}

/// # Safety
/// `list` must be null or come from [`dmd_model_predict_tfl`], and not be
/// used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dmd_proposals_free(list: *mut DmdProposalList) {
    if !list.is_null() {
        drop(Box::from_raw(list));
    }
}

/// Intersection over union of `[onset_a, offset_a)` and `[onset_b, offset_b)`.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dmd_iou(onset_a: f64, offset_a: f64, onset_b: f64, offset_b: f64, out: *mut f64) -> DmdStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let a = Interval::new(onset_a, offset_a, Modality::Visual).map_err(lib_err)?;
        let b = Interval::new(onset_b, offset_b, Modality::Visual).map_err(lib_err)?;
        *out = iou_1d(&a, &b);
        Ok(())
    })
}

/// Normalized insert/delete edit distance between two UTF-8 transcripts,
/// over characters (`words == 0`) or whitespace-separated words.
///
/// # Safety
/// `a` and `b` must be NUL-terminated strings; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dmd_normalized_divergence(a: *const c_char, b: *const c_char, words: i32, out: *mut f64) -> DmdStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let g = if words != 0 { Granularity::Words } else { Granularity::Chars };
        let (a, b) = (c_str(a, "a")?, c_str(b, "b")?);
        *out = normalized_divergence(&Transcript::new(a, g), &Transcript::new(b, g));
        Ok(())
    })
}
