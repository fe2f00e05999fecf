//! C ABI over `mx-core`.
//!
//! Tensors cross the boundary as opaque `MxTensorHandle` pointers owned by
//! the caller and released with `mx_tensor_free`. Every fallible function
//! returns an `MxStatus`; on failure a description is available from
//! `mx_last_error` on the same thread. Panics never unwind into C: they are
//! reported as `MX_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use mx_core::io::{read_mxt, write_mxt, FileError};
use mx_core::{
    dequantize_tensor, mx_gemm, quantize_tensor, ElementFormat, Fp32Tensor, MxError, MxTensor, QuantConfig,
    RoundingMode, ScaleE8M0,
};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MxStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Format = 5,
    BufferTooSmall = 6,
    Unrepresentable = 7,
    Panic = 8,
}

pub const MX_FMT_E4M3: u32 = 0;
pub const MX_FMT_E5M2: u32 = 1;
pub const MX_FMT_E2M3: u32 = 2;
pub const MX_FMT_E3M2: u32 = 3;
pub const MX_FMT_E2M1: u32 = 4;
pub const MX_FMT_INT8: u32 = 5;

pub const MX_ROUND_NEAREST_EVEN: u32 = 0;
pub const MX_ROUND_HALF_AWAY: u32 = 1;

/// Opaque MX tensor.
pub struct MxTensorHandle {
    inner: MxTensor,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let message = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(message));
}

struct Failure(MxStatus, String);

impl From<MxError> for Failure {
    fn from(e: MxError) -> Self {
        let status = match e {
            MxError::ShapeMismatch(_) | MxError::AxisMismatch(_) | MxError::BlockSizeMismatch { .. } => {
                MxStatus::ShapeMismatch
            }
            MxError::UnrepresentableSpecial { .. } => MxStatus::Unrepresentable,
            _ => MxStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<FileError> for Failure {
    fn from(e: FileError) -> Self {
        let status = if e.is_io() { MxStatus::Io } else { MxStatus::Format };
        Failure(status, e.to_string())
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(MxStatus::InvalidArgument, message.into())
}

fn null(name: &str) -> Failure {
    Failure(MxStatus::NullPointer, format!("`{name}` is null"))
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> MxStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => MxStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(_) => {
            set_last_error("internal panic".to_owned());
            MxStatus::Panic
        }
    }
}

fn element_format(id: u32) -> Result<ElementFormat, Failure> {
    u8::try_from(id)
        .ok()
        .and_then(ElementFormat::from_id)
        .ok_or_else(|| invalid(format!("unknown element format {id}")))
}

fn rounding_mode(id: u32) -> Result<RoundingMode, Failure> {
    u8::try_from(id)
        .ok()
        .and_then(RoundingMode::from_id)
        .ok_or_else(|| invalid(format!("unknown rounding mode {id}")))
}

unsafe fn handle<'a>(h: *const MxTensorHandle, name: &str) -> Result<&'a MxTensor, Failure> {
    // SAFETY: caller passes a live handle from this library or null.
    unsafe { h.as_ref() }.map(|h| &h.inner).ok_or_else(|| null(name))
}

unsafe fn out_slice<'a, T>(ptr: *mut T, cap: usize, needed: usize, name: &str) -> Result<&'a mut [T], Failure> {
    if ptr.is_null() {
        return Err(null(name));
    }
    if cap < needed {
        return Err(Failure(
            MxStatus::BufferTooSmall,
            format!("`{name}` holds {cap} items, {needed} needed"),
        ));
    }
    // SAFETY: caller guarantees `ptr` is valid for `cap` writes.
    Ok(unsafe { slice::from_raw_parts_mut(ptr, needed) })
}

unsafe fn path_arg(path: *const c_char) -> Result<String, Failure> {
    if path.is_null() {
        return Err(null("path"));
    }
    // SAFETY: caller passes a NUL-terminated string.
    unsafe { CStr::from_ptr(path) }
        .to_str()
        .map(str::to_owned)
        .map_err(|_| invalid("path is not valid UTF-8"))
}

/// Message for the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mx_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Decodes one element code.
///
/// # Safety
/// `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn mx_decode_element(format: u32, code: u8, out: *mut f64) -> MxStatus {
    guard(|| {
        let fmt = element_format(format)?;
        let out = unsafe { out_slice(out, 1, 1, "out") }?;
        out[0] = fmt.decode(code);
        Ok(())
    })
}

/// Encodes one value to the nearest element code.
///
/// # Safety
/// `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn mx_encode_element(format: u32, value: f64, rounding: u32, out: *mut u8) -> MxStatus {
    guard(|| {
        let fmt = element_format(format)?;
        let mode = rounding_mode(rounding)?;
        let out = unsafe { out_slice(out, 1, 1, "out") }?;
        out[0] = fmt.encode(value, mode)?;
        Ok(())
    })
}

/// `2^(code - 127)`, or NaN for code 255.
#[no_mangle]
pub extern "C" fn mx_decode_scale(code: u8) -> f64 {
    ScaleE8M0::from_code(code).to_f64()
}

/// Quantizes a row-major FP32 tensor along `axis`.
///
/// # Safety
/// `data` must hold the product of `shape[0..rank]` floats, `shape` must hold
/// `rank` entries and `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn mx_quantize(
    data: *const f32,
    shape: *const usize,
    rank: usize,
    axis: usize,
    format: u32,
    block_size: usize,
    rounding: u32,
    out: *mut *mut MxTensorHandle,
) -> MxStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if shape.is_null() || rank == 0 {
            return Err(null("shape"));
        }
        // SAFETY: see function contract.
        let shape = unsafe { slice::from_raw_parts(shape, rank) }.to_vec();
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| invalid("shape overflows"))?;
        if data.is_null() && count > 0 {
            return Err(null("data"));
        }
        let values = if count == 0 {
            Vec::new()
        } else {
            // SAFETY: see function contract.
            unsafe { slice::from_raw_parts(data, count) }.to_vec()
        };
        let cfg = QuantConfig::new(element_format(format)?)
            .with_block_size(block_size)
            .with_rounding(rounding_mode(rounding)?);
        let tensor = Fp32Tensor::new(shape, values)?;
        let inner = quantize_tensor(&tensor, axis, &cfg)?;
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(MxTensorHandle { inner })) };
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `h` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mx_tensor_free(h: *mut MxTensorHandle) {
    if !h.is_null() {
        // SAFETY: ownership returns from the caller.
        drop(unsafe { Box::from_raw(h) });
    }
}

/// Rank of the tensor, or 0 for a null handle.
///
/// # Safety
/// `h` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn mx_tensor_rank(h: *const MxTensorHandle) -> usize {
    unsafe { handle(h, "tensor") }.map_or(0, |t| t.shape().len())
}

/// Number of logical (non-padding) values, or 0 for a null handle.
///
/// # Safety
/// `h` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn mx_tensor_len(h: *const MxTensorHandle) -> usize {
    unsafe { handle(h, "tensor") }.map_or(0, |t| t.shape().iter().product())
}

/// Number of MX blocks, or 0 for a null handle.
///
/// # Safety
/// `h` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn mx_tensor_num_blocks(h: *const MxTensorHandle) -> usize {
    unsafe { handle(h, "tensor") }.map_or(0, |t| t.num_blocks())
}

/// Block size `k`, or 0 for a null handle.
///
/// # Safety
/// `h` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn mx_tensor_block_size(h: *const MxTensorHandle) -> usize {
    unsafe { handle(h, "tensor") }.map_or(0, |t| t.cfg().block_size)
}

/// Copies the shape into `out` (`cap` entries).
///
/// # Safety
/// `h` must be a live handle; `out` must be valid for `cap` writes.
#[no_mangle]
pub unsafe extern "C" fn mx_tensor_shape(h: *const MxTensorHandle, out: *mut usize, cap: usize) -> MxStatus {
    guard(|| {
        let t = unsafe { handle(h, "tensor") }?;
        unsafe { out_slice(out, cap, t.shape().len(), "out") }?.copy_from_slice(t.shape());
        Ok(())
    })
}

/// Copies one E8M0 code per block into `out`.
///
/// # Safety
/// `h` must be a live handle; `out` must be valid for `cap` writes.
#[no_mangle]
pub unsafe extern "C" fn mx_tensor_scales(h: *const MxTensorHandle, out: *mut u8, cap: usize) -> MxStatus {
    guard(|| {
        let t = unsafe { handle(h, "tensor") }?;
        let dst = unsafe { out_slice(out, cap, t.num_blocks(), "out") }?;
        for (d, s) in dst.iter_mut().zip(t.scales()) {
            *d = s.code;
        }
        Ok(())
    })
}

/// Copies every element code, padding lanes included (`num_blocks * block_size`).
///
/// # Safety
/// `h` must be a live handle; `out` must be valid for `cap` writes.
#[no_mangle]
pub unsafe extern "C" fn mx_tensor_codes(h: *const MxTensorHandle, out: *mut u8, cap: usize) -> MxStatus {
    guard(|| {
        let t = unsafe { handle(h, "tensor") }?;
        unsafe { out_slice(out, cap, t.codes().len(), "out") }?.copy_from_slice(t.codes());
        Ok(())
    })
}

/// Writes the dequantized tensor, row-major, into `out`.
///
/// # Safety
/// `h` must be a live handle; `out` must be valid for `cap` writes.
#[no_mangle]
pub unsafe extern "C" fn mx_tensor_dequantize(h: *const MxTensorHandle, out: *mut f32, cap: usize) -> MxStatus {
    guard(|| {
        let t = unsafe { handle(h, "tensor") }?;
        let values = dequantize_tensor(t);
        unsafe { out_slice(out, cap, values.len(), "out") }?.copy_from_slice(values.data());
        Ok(())
    })
}

/// `[M,K] × [K,N]` over two MX tensors scaled along K. Writes `M·N` floats.
///
/// # Safety
/// `a`, `b` must be live handles; `out` must be valid for `cap` writes.
#[no_mangle]
pub unsafe extern "C" fn mx_gemm_f32(
    a: *const MxTensorHandle,
    b: *const MxTensorHandle,
    out: *mut f32,
    cap: usize,
) -> MxStatus {
    guard(|| {
        let a = unsafe { handle(a, "a") }?;
        let b = unsafe { handle(b, "b") }?;
        let product = mx_gemm(a, b)?;
        unsafe { out_slice(out, cap, product.len(), "out") }?.copy_from_slice(product.data());
        Ok(())
    })
}

/// Saves the tensor as an MXT file.
///
/// # Safety
/// `h` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mx_tensor_write(h: *const MxTensorHandle, path: *const c_char) -> MxStatus {
    guard(|| {
        let t = unsafe { handle(h, "tensor") }?;
        let path = unsafe { path_arg(path) }?;
        write_mxt(path, t)?;
        Ok(())
    })
}

/// Loads an MXT file into a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn mx_tensor_read(path: *const c_char, out: *mut *mut MxTensorHandle) -> MxStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = unsafe { path_arg(path) }?;
        let inner = read_mxt(path)?;
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(MxTensorHandle { inner })) };
        Ok(())
    })
}
