//! C interface to the lexiscope workbench.
//!
//! Vocabularies and models are opaque handles created by `*_load` and
//! released by the matching `*_free`. Every fallible call returns an
//! [`LxStatus`]; on failure [`lx_last_error_message`] describes the cause.
//! Output buffers are caller-allocated. When one is too small the call
//! returns [`LxStatus::BufferTooSmall`] and still reports the required
//! length.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use lexiscope::expansion::fit_procrustes;
use lexiscope::experiments::one_sided_t_test;
use lexiscope::linalg::Matrix;
use lexiscope::model::{forward, load_checkpoint, Model};
use lexiscope::probes::logit_lens_input;
use lexiscope::tokenizer::Vocabulary;
use lexiscope::{Error, ErrorClass};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LxStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    ConfigError = 4,
    DataError = 5,
    InternalError = 6,
    Panic = 7,
}

/// Opaque tokenizer vocabulary.
pub struct LxVocab(Vocabulary);

/// Opaque model checkpoint.
pub struct LxModel(Model);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct LxModelDims {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct LxTTest {
    pub t_stat: f64,
    pub df: f64,
    pub p_greater: f64,
    pub p_less: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: LxStatus, msg: impl Into<String>) -> LxStatus {
    set_error(msg);
    status
}

fn from_error(e: Error) -> LxStatus {
    let status = match e.class() {
        ErrorClass::Config => LxStatus::ConfigError,
        ErrorClass::Data => LxStatus::DataError,
        ErrorClass::Internal => LxStatus::InternalError,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> LxStatus) -> LxStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(LxStatus::Panic, "panic inside lexiscope"),
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, LxStatus> {
    if p.is_null() {
        return Err(fail(LxStatus::NullPointer, "path is null"));
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => Err(fail(LxStatus::InvalidArgument, "path is not UTF-8")),
    }
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], LxStatus> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(LxStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

/// Copies `src` into `dst` if it fits; always stores the length in `out_len`.
unsafe fn write_out<T: Copy>(src: &[T], dst: *mut T, cap: usize, out_len: *mut usize) -> LxStatus {
    if !out_len.is_null() {
        *out_len = src.len();
    }
    if src.len() > cap {
        return fail(
            LxStatus::BufferTooSmall,
            format!("need room for {} values, have {cap}", src.len()),
        );
    }
    if !src.is_empty() {
        if dst.is_null() {
            return fail(LxStatus::NullPointer, "output buffer is null");
        }
        std::ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    }
    LxStatus::Ok
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next lexiscope call on the same thread.
#[no_mangle]
pub extern "C" fn lx_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn lx_vocab_load(path: *const c_char, out: *mut *mut LxVocab) -> LxStatus {
    guard(|| {
        if out.is_null() {
            return fail(LxStatus::NullPointer, "out is null");
        }
        let path = tri!(path_arg(path));
        match Vocabulary::load(path) {
            Ok(v) => {
                *out = Box::into_raw(Box::new(LxVocab(v)));
                LxStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `vocab` must come from [`lx_vocab_load`] and not have been freed. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn lx_vocab_free(vocab: *mut LxVocab) {
    if !vocab.is_null() {
        drop(Box::from_raw(vocab));
    }
}

/// Number of tokens, or 0 for a null handle.
///
/// # Safety
/// `vocab` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lx_vocab_size(vocab: *const LxVocab) -> usize {
    vocab.as_ref().map_or(0, |v| v.0.len())
}

/// Encodes NUL-terminated UTF-8 `text` into `out_ids`.
///
/// # Safety
/// `text` must be NUL-terminated; `out_ids` must have room for `cap` ids.
#[no_mangle]
pub unsafe extern "C" fn lx_encode(
    vocab: *const LxVocab,
    text: *const c_char,
    out_ids: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> LxStatus {
    guard(|| {
        let Some(vocab) = vocab.as_ref() else {
            return fail(LxStatus::NullPointer, "vocab is null");
        };
        if text.is_null() {
            return fail(LxStatus::NullPointer, "text is null");
        }
        let Ok(text) = CStr::from_ptr(text).to_str() else {
            return fail(LxStatus::InvalidArgument, "text is not UTF-8");
        };
        write_out(&vocab.0.encode(text).ids, out_ids, cap, out_len)
    })
}

/// Decodes `ids` into `out` as NUL-terminated text. `out_len` receives the
/// byte length without the terminator.
///
/// # Safety
/// `ids` must hold `n_ids` values; `out` must have room for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn lx_decode(
    vocab: *const LxVocab,
    ids: *const u32,
    n_ids: usize,
    out: *mut c_char,
    cap: usize,
    out_len: *mut usize,
) -> LxStatus {
    guard(|| {
        let Some(vocab) = vocab.as_ref() else {
            return fail(LxStatus::NullPointer, "vocab is null");
        };
        let ids = tri!(slice_arg(ids, n_ids, "ids"));
        let mut bytes = match vocab.0.decode(ids) {
            Ok(b) => b,
            Err(e) => return from_error(e),
        };
        if !out_len.is_null() {
            *out_len = bytes.len();
        }
        bytes.push(0);
        write_out(&bytes, out as *mut u8, cap, std::ptr::null_mut())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn lx_model_load(path: *const c_char, out: *mut *mut LxModel) -> LxStatus {
    guard(|| {
        if out.is_null() {
            return fail(LxStatus::NullPointer, "out is null");
        }
        let path = tri!(path_arg(path));
        match load_checkpoint(&path) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(LxModel(m)));
                LxStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `model` must come from [`lx_model_load`] and not have been freed. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn lx_model_free(model: *mut LxModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lx_model_dims(model: *const LxModel, out: *mut LxModelDims) -> LxStatus {
    guard(|| {
        let (Some(m), false) = (model.as_ref(), out.is_null()) else {
            return fail(LxStatus::NullPointer, "model or out is null");
        };
        let c = &m.0.config;
        *out = LxModelDims {
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            vocab_size: c.vocab_size,
            max_seq: c.max_seq,
        };
        LxStatus::Ok
    })
}

unsafe fn trace_inputs<'a>(
    model: *const LxModel,
    ids: *const u32,
    n_ids: usize,
    position: usize,
) -> Result<(&'a Model, &'a [u32]), LxStatus> {
    let Some(m) = model.as_ref() else {
        return Err(fail(LxStatus::NullPointer, "model is null"));
    };
    let ids = slice_arg(ids, n_ids, "ids")?;
    if position >= ids.len() {
        return Err(fail(
            LxStatus::InvalidArgument,
            format!("position {position} outside a {}-token input", ids.len()),
        ));
    }
    Ok((&m.0, ids))
}

/// Residual stream at `position` for layers 0..=n_layers, written row-major
/// as `(n_layers + 1) * d_model` doubles.
///
/// # Safety
/// `ids` must hold `n_ids` values; `out` must have room for `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn lx_hidden_states(
    model: *const LxModel,
    ids: *const u32,
    n_ids: usize,
    position: usize,
    out: *mut f64,
    cap: usize,
    out_len: *mut usize,
) -> LxStatus {
    guard(|| {
        let (m, ids) = tri!(trace_inputs(model, ids, n_ids, position));
        let trace = match forward(m, ids, &[]) {
            Ok(t) => t,
            Err(e) => return from_error(e),
        };
        let flat: Vec<f64> = (0..=m.n_layers())
            .flat_map(|l| trace.hidden_at(l, position).iter().copied())
            .collect();
        write_out(&flat, out, cap, out_len)
    })
}

/// Top-1 token of the input-embedding lens at `position` for every layer
/// 0..=n_layers.
///
/// # Safety
/// `ids` must hold `n_ids` values; `out_ids` must have room for `cap` ids.
#[no_mangle]
pub unsafe extern "C" fn lx_lens_top1(
    model: *const LxModel,
    ids: *const u32,
    n_ids: usize,
    position: usize,
    out_ids: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> LxStatus {
    guard(|| {
        let (m, ids) = tri!(trace_inputs(model, ids, n_ids, position));
        let trace = match forward(m, ids, &[]) {
            Ok(t) => t,
            Err(e) => return from_error(e),
        };
        let mut top = Vec::with_capacity(m.n_layers() + 1);
        for l in 0..=m.n_layers() {
            match logit_lens_input(trace.hidden_at(l, position), &m.weights.embed) {
                Ok(ranked) => top.push(ranked[0]),
                Err(e) => return from_error(e),
            }
        }
        write_out(&top, out_ids, cap, out_len)
    })
}

/// Orthogonal `T` (d×d, row-major) minimizing `‖H·T − X‖_F` for row-major
/// `n×d` inputs.
///
/// # Safety
/// `h` and `x` must each hold `n * d` doubles; `out_t` must hold `d * d`.
#[no_mangle]
pub unsafe extern "C" fn lx_procrustes(
    h: *const f64,
    x: *const f64,
    n: usize,
    d: usize,
    out_t: *mut f64,
) -> LxStatus {
    guard(|| {
        let Some(len) = n.checked_mul(d) else {
            return fail(LxStatus::InvalidArgument, "n * d overflows");
        };
        let h = tri!(slice_arg(h, len, "h"));
        let x = tri!(slice_arg(x, len, "x"));
        let built = Matrix::from_vec(n, d, h.to_vec())
            .and_then(|h| Ok((h, Matrix::from_vec(n, d, x.to_vec())?)))
            .and_then(|(h, x)| fit_procrustes(&h, &x));
        match built {
            Ok(t) => write_out(t.as_slice(), out_t, d * d, std::ptr::null_mut()),
            Err(e) => from_error(e),
        }
    })
}

/// Welch's t-test of `a` against `b` with both one-sided p-values.
///
/// # Safety
/// `a` and `b` must hold `n_a` and `n_b` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lx_welch_t_test(
    a: *const f64,
    n_a: usize,
    b: *const f64,
    n_b: usize,
    out: *mut LxTTest,
) -> LxStatus {
    guard(|| {
        if out.is_null() {
            return fail(LxStatus::NullPointer, "out is null");
        }
        let a = tri!(slice_arg(a, n_a, "a"));
        let b = tri!(slice_arg(b, n_b, "b"));
        match one_sided_t_test(a, b) {
            Ok(r) => {
                *out = LxTTest {
                    t_stat: r.t_stat,
                    df: r.df,
                    p_greater: r.p_greater,
                    p_less: r.p_less,
                };
                LxStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}
