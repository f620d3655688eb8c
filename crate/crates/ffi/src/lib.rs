//! C ABI over the online normalization layer.
//!
//! Every fallible call returns an [`OnrmStatus`]; on failure the message is
//! available from [`onrm_last_error`] on the same thread. Handles are
//! single-threaded: do not share one across threads without locking.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use onlinenorm::{Error, FeatureMap, OnlineNorm, OnlineNormConfig, OnlineNormState};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OnrmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NonFinite = 4,
    /// Backward without a matching forward call.
    Handshake = 5,
    Decode = 6,
    /// The output buffer is too small; the required size was written.
    BufferTooSmall = 7,
    Panic = 8,
}

/// Layer settings. Obtain defaults from [`onrm_default_config`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct OnrmConfig {
    pub alpha_f: f64,
    pub alpha_b: f64,
    pub sigma_floor: f64,
    pub layer_scaling: bool,
    pub affine: bool,
    pub grad_rescale: bool,
}

/// Opaque layer handle.
pub struct OnrmNorm {
    inner: OnlineNorm,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: OnrmStatus, msg: impl Into<String>) -> OnrmStatus {
    set_error(msg.into());
    status
}

fn from_error(e: Error) -> OnrmStatus {
    let status = match &e {
        Error::Shape(_) => OnrmStatus::Shape,
        Error::NonFinite(_) => OnrmStatus::NonFinite,
        Error::Handshake(_) => OnrmStatus::Handshake,
        Error::Decode(_) => OnrmStatus::Decode,
        _ => OnrmStatus::InvalidArgument,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> OnrmStatus) -> OnrmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(OnrmStatus::Panic, "internal panic"),
    }
}

impl From<OnrmConfig> for OnlineNormConfig {
    fn from(c: OnrmConfig) -> Self {
        OnlineNormConfig {
            alpha_f: c.alpha_f,
            alpha_b: c.alpha_b,
            sigma_floor: c.sigma_floor,
            layer_scaling: c.layer_scaling,
            affine: c.affine,
            grad_rescale: c.grad_rescale,
        }
    }
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn onrm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn onrm_default_config() -> OnrmConfig {
    let d = OnlineNormConfig::default();
    OnrmConfig {
        alpha_f: d.alpha_f,
        alpha_b: d.alpha_b,
        sigma_floor: d.sigma_floor,
        layer_scaling: d.layer_scaling,
        affine: d.affine,
        grad_rescale: d.grad_rescale,
    }
}

/// Creates a layer over `features` channels. `config` may be NULL for the
/// defaults. On success `*out` owns a handle to release with [`onrm_free`].
///
/// # Safety
/// `config` must be NULL or point to a valid `OnrmConfig`; `out` must be a
/// valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn onrm_new(features: usize, config: *const OnrmConfig, out: *mut *mut OnrmNorm) -> OnrmStatus {
    guard(|| {
        if out.is_null() {
            return fail(OnrmStatus::NullPointer, "out is NULL");
        }
        let cfg = if config.is_null() { onrm_default_config() } else { *config };
        match OnlineNorm::new(features, cfg.into()) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(OnrmNorm { inner }));
                OnrmStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `h` must be NULL or a handle from [`onrm_new`] that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn onrm_free(h: *mut OnrmNorm) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Restores the initial statistics and clears any pending forward call.
///
/// # Safety
/// `h` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn onrm_reset(h: *mut OnrmNorm) -> OnrmStatus {
    guard(|| match h.as_mut() {
        Some(n) => {
            n.inner.reset();
            OnrmStatus::Ok
        }
        None => fail(OnrmStatus::NullPointer, "handle is NULL"),
    })
}

/// Feature count of the layer, or 0 for a NULL handle.
///
/// # Safety
/// `h` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn onrm_features(h: *const OnrmNorm) -> usize {
    h.as_ref().map_or(0, |n| n.inner.state().features())
}

unsafe fn read_map(data: *const f64, features: usize, spatial: usize) -> Result<FeatureMap, OnrmStatus> {
    if data.is_null() {
        return Err(fail(OnrmStatus::NullPointer, "input is NULL"));
    }
    let len = features
        .checked_mul(spatial)
        .filter(|&l| l > 0)
        .ok_or_else(|| fail(OnrmStatus::Shape, "features * spatial must be positive"))?;
    let v = std::slice::from_raw_parts(data, len).to_vec();
    FeatureMap::new(features, spatial, v).map_err(from_error)
}

unsafe fn write_map(m: &FeatureMap, out: *mut f64) {
    ptr::copy_nonoverlapping(m.data().as_ptr(), out, m.len());
}

type LayerOp = fn(&mut OnlineNorm, &FeatureMap) -> onlinenorm::Result<FeatureMap>;

unsafe fn apply(h: *mut OnrmNorm, op: LayerOp, input: *const f64, features: usize, spatial: usize, out: *mut f64) -> OnrmStatus {
    guard(|| {
        let Some(n) = h.as_mut() else { return fail(OnrmStatus::NullPointer, "handle is NULL") };
        if out.is_null() {
            return fail(OnrmStatus::NullPointer, "output is NULL");
        }
        let x = match read_map(input, features, spatial) {
            Ok(x) => x,
            Err(s) => return s,
        };
        match op(&mut n.inner, &x) {
            Ok(y) => {
                write_map(&y, out);
                OnrmStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Training-mode forward of one sample laid out feature-major
/// (`features * spatial` values). Advances the running statistics.
///
/// # Safety
/// `h` must be a live handle; `x` and `out` must each hold
/// `features * spatial` doubles.
#[no_mangle]
pub unsafe extern "C" fn onrm_forward(
    h: *mut OnrmNorm,
    x: *const f64,
    features: usize,
    spatial: usize,
    out: *mut f64,
) -> OnrmStatus {
    apply(h, |n, x| n.forward(x), x, features, spatial, out)
}

/// Gradient for the most recent forward call; exactly one per forward.
///
/// # Safety
/// As for [`onrm_forward`].
#[no_mangle]
pub unsafe extern "C" fn onrm_backward(
    h: *mut OnrmNorm,
    grad: *const f64,
    features: usize,
    spatial: usize,
    out: *mut f64,
) -> OnrmStatus {
    apply(h, |n, g| n.backward(g), grad, features, spatial, out)
}

/// Inference with frozen statistics; the state is not modified.
///
/// # Safety
/// As for [`onrm_forward`].
#[no_mangle]
pub unsafe extern "C" fn onrm_infer(
    h: *mut OnrmNorm,
    x: *const f64,
    features: usize,
    spatial: usize,
    out: *mut f64,
) -> OnrmStatus {
    apply(h, |n, x| n.infer(x), x, features, spatial, out)
}

/// Copies the running mean and variance (`len` must equal the feature
/// count). Either output may be NULL.
///
/// # Safety
/// `h` must be a live handle; non-NULL outputs must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn onrm_get_stats(h: *const OnrmNorm, mean: *mut f64, var: *mut f64, len: usize) -> OnrmStatus {
    guard(|| {
        let Some(n) = h.as_ref() else { return fail(OnrmStatus::NullPointer, "handle is NULL") };
        let s = n.inner.state();
        if len != s.features() {
            return fail(OnrmStatus::Shape, format!("len {len} but the layer has {} features", s.features()));
        }
        if !mean.is_null() {
            ptr::copy_nonoverlapping(s.mean().as_ptr(), mean, len);
        }
        if !var.is_null() {
            ptr::copy_nonoverlapping(s.var().as_ptr(), var, len);
        }
        OnrmStatus::Ok
    })
}

/// Writes the state record into `buf`. `*written` receives the record size;
/// when `buf` is NULL or `cap` is too small nothing is copied and
/// `ONRM_STATUS_BUFFER_TOO_SMALL` is returned.
///
/// # Safety
/// `h` must be a live handle, `written` writable, and `buf` NULL or
/// writable for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn onrm_serialize(h: *const OnrmNorm, buf: *mut u8, cap: usize, written: *mut usize) -> OnrmStatus {
    guard(|| {
        let Some(n) = h.as_ref() else { return fail(OnrmStatus::NullPointer, "handle is NULL") };
        if written.is_null() {
            return fail(OnrmStatus::NullPointer, "written is NULL");
        }
        let bytes = n.inner.state().to_bytes();
        *written = bytes.len();
        if buf.is_null() || cap < bytes.len() {
            return fail(OnrmStatus::BufferTooSmall, format!("record needs {} bytes", bytes.len()));
        }
        ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len());
        OnrmStatus::Ok
    })
}

/// Replaces the layer's streaming state with a record from
/// [`onrm_serialize`]. Affine parameters are untouched.
///
/// # Safety
/// `h` must be a live handle and `bytes` readable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn onrm_load_state(h: *mut OnrmNorm, bytes: *const u8, len: usize) -> OnrmStatus {
    guard(|| {
        let Some(n) = h.as_mut() else { return fail(OnrmStatus::NullPointer, "handle is NULL") };
        if bytes.is_null() {
            return fail(OnrmStatus::NullPointer, "bytes is NULL");
        }
        let record = std::slice::from_raw_parts(bytes, len);
        match OnlineNormState::from_bytes(record).and_then(|s| n.inner.load_state(s)) {
            Ok(()) => OnrmStatus::Ok,
            Err(e) => from_error(e),
        }
    })
}
