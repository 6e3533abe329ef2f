//! C ABI over the anchored ASR library.
//!
//! Every function returns an [`AasrStatus`]; on failure a message is kept per
//! thread and can be read with [`aasr_last_error`]. Models are opaque
//! handles created by `aasr_model_*` constructors and released with
//! [`aasr_model_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use anchored_asr::anchoring::{gate_bias, AnchorSpec};
use anchored_asr::evalreport::edit_distance;
use anchored_asr::model::{AsrModel, SystemConfig};
use anchored_asr::numerics::Tensor;
use anchored_asr::transducer::{rnnt_loss_values, FeatureSequence, TokenSequence};
use anchored_asr::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AasrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numeric = 5,
    /// The output buffer is too small; the required length was written.
    BufferTooSmall = 6,
    Panic = 7,
}

/// Opaque trained or freshly initialised model.
pub struct AasrModel {
    inner: AsrModel,
}

/// Edit operations of a minimal alignment.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AasrEditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(AasrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } | Error::Missing { .. } => AasrStatus::Io,
            Error::Format { .. } | Error::Json(_) => AasrStatus::Format,
            Error::NonFinite { .. } | Error::Diverged { .. } => AasrStatus::Numeric,
            _ => AasrStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(AasrStatus::InvalidArgument, msg.into())
}

/// Run `f`, translating errors and panics into a status and message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AasrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            AasrStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            AasrStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(AasrStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be null or point to `len` readable values.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or a NUL-terminated string.
unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Failure> {
    non_null(p, "path")?;
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(Path::new(s))
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn aasr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Transducer loss `-log P(y|x)` of row-major logits `frames x (u+1) x
/// num_labels` (label 0 is blank). When `grad_out` is non-null it receives
/// the gradient with respect to the logits, of the same size.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `loss_out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn aasr_rnnt_loss(
    logits: *const f64,
    frames: usize,
    targets: *const u32,
    target_len: usize,
    num_labels: usize,
    loss_out: *mut f64,
    grad_out: *mut f64,
) -> AasrStatus {
    guard(|| {
        non_null(loss_out, "loss_out")?;
        let n = frames
            .checked_mul(target_len + 1)
            .and_then(|v| v.checked_mul(num_labels))
            .ok_or_else(|| invalid("lattice size overflows"))?;
        let z = slice(logits, n, "logits")?;
        let y = slice(targets, target_len, "targets")?;
        let (loss, grad) = rnnt_loss_values(z, frames, y, num_labels)?;
        *loss_out = loss;
        if !grad_out.is_null() {
            std::slice::from_raw_parts_mut(grad_out, n).copy_from_slice(&grad);
        }
        Ok(())
    })
}

/// Gate value `sigmoid(cos(c, h))` of two `dim`-dimensional embeddings.
///
/// # Safety
/// `c` and `h` must hold `dim` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aasr_gate_bias(c: *const f64, h: *const f64, dim: usize, out: *mut f64) -> AasrStatus {
    guard(|| {
        non_null(out, "out")?;
        if dim == 0 {
            return Err(invalid("dim must be at least 1"));
        }
        *out = gate_bias(slice(c, dim, "c")?, slice(h, dim, "h")?);
        Ok(())
    })
}

/// Substitution, insertion and deletion counts of a minimal alignment.
///
/// # Safety
/// Sequences must hold the stated number of tokens; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aasr_edit_distance(
    reference: *const u32,
    reference_len: usize,
    hypothesis: *const u32,
    hypothesis_len: usize,
    out: *mut AasrEditCounts,
) -> AasrStatus {
    guard(|| {
        non_null(out, "out")?;
        let c = edit_distance(
            slice(reference, reference_len, "reference")?,
            slice(hypothesis, hypothesis_len, "hypothesis")?,
        );
        *out = AasrEditCounts {
            substitutions: c.substitutions,
            insertions: c.insertions,
            deletions: c.deletions,
        };
        Ok(())
    })
}

/// Load a model checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aasr_model_load(path: *const c_char, out: *mut *mut AasrModel) -> AasrStatus {
    guard(|| {
        non_null(out, "out")?;
        let inner = AsrModel::load(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(AasrModel { inner }));
        Ok(())
    })
}

/// Freshly initialised model from a JSON system config (an empty string
/// selects the default anchored system).
///
/// # Safety
/// `system_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aasr_model_new(system_json: *const c_char, seed: u64, out: *mut *mut AasrModel) -> AasrStatus {
    guard(|| {
        non_null(out, "out")?;
        non_null(system_json, "system_json")?;
        let s = CStr::from_ptr(system_json).to_str().map_err(|_| invalid("config is not valid UTF-8"))?;
        let system: SystemConfig = if s.trim().is_empty() {
            SystemConfig::default()
        } else {
            serde_json::from_str(s).map_err(|e| Failure(AasrStatus::Format, format!("system config: {e}")))?
        };
        let inner = AsrModel::new(system, seed)?;
        *out = Box::into_raw(Box::new(AasrModel { inner }));
        Ok(())
    })
}

/// Write a model checkpoint.
///
/// # Safety
/// `model` must come from an `aasr_model_*` constructor; `path` must be a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn aasr_model_save(model: *const AasrModel, path: *const c_char) -> AasrStatus {
    guard(|| {
        non_null(model, "model")?;
        (*model).inner.save(path_arg(path)?)?;
        Ok(())
    })
}

/// Raw feature width and vocabulary size (including blank) of a model.
///
/// # Safety
/// `model` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn aasr_model_dims(model: *const AasrModel, d_raw: *mut usize, vocab_size: *mut usize) -> AasrStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(d_raw, "d_raw")?;
        non_null(vocab_size, "vocab_size")?;
        let cfg = (*model).inner.config();
        *d_raw = cfg.d_raw;
        *vocab_size = cfg.vocab_size;
        Ok(())
    })
}

/// Greedy decoding of `num_frames x d_raw` row-major features whose first
/// `anchor_len` frames are the anchor. Up to `capacity` tokens are written
/// to `tokens_out` and the hypothesis length to `len_out`; when the buffer
/// is too small nothing is copied and `AASR_STATUS_BUFFER_TOO_SMALL` is
/// returned with the required length in `len_out`.
///
/// # Safety
/// `model` must be a live handle; `frames` must hold `num_frames * d_raw`
/// values and `tokens_out` `capacity` values; `len_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aasr_model_decode(
    model: *const AasrModel,
    frames: *const f64,
    num_frames: usize,
    d_raw: usize,
    anchor_len: usize,
    tokens_out: *mut u32,
    capacity: usize,
    len_out: *mut usize,
) -> AasrStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(len_out, "len_out")?;
        let m = &(*model).inner;
        let cfg = m.config();
        if d_raw != cfg.d_raw {
            return Err(invalid(format!("d_raw={d_raw} but the model expects {}", cfg.d_raw)));
        }
        let n = num_frames.checked_mul(d_raw).ok_or_else(|| invalid("feature size overflows"))?;
        let x = Tensor::new(vec![num_frames, d_raw], slice(frames, n, "frames")?.to_vec())?;
        let seq = FeatureSequence::new(x, TokenSequence::new(Vec::new(), cfg.vocab_size)?, anchor_len, None)?;
        let hyp = m.decode(&seq, &AnchorSpec::mixed(anchor_len))?.hypothesis;
        let toks = hyp.tokens();
        *len_out = toks.len();
        if toks.len() > capacity {
            return Err(Failure(
                AasrStatus::BufferTooSmall,
                format!("hypothesis has {} tokens, buffer holds {capacity}", toks.len()),
            ));
        }
        if !toks.is_empty() {
            non_null(tokens_out, "tokens_out")?;
            std::slice::from_raw_parts_mut(tokens_out, toks.len()).copy_from_slice(toks);
        }
        Ok(())
    })
}

/// Release a model handle; null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn aasr_model_free(model: *mut AasrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
