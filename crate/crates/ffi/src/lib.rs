// SPDX-License-Identifier: Apache-2.0

//! C ABI over `pim-aging`.
//!
//! Networks and masks are opaque heap handles created by `*_load` /
//! `*_generate` and released with the matching `*_free`. Every fallible call
//! returns a [`PimStatus`]; on failure [`pim_last_error`] describes the most
//! recent error on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::num::NonZeroU64;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use pim_aging::aging::{generate_mask, load_mask, save_mask, AgingMask};
use pim_aging::doft::Network;
use pim_aging::harness::security_complexity;
use pim_aging::ndarray::ArrayView2;
use pim_aging::pim_sim::{network_forward, PimConfig, SimMode};
use pim_aging::Error;

/// Result code of every fallible call. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PimStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    CorruptFile = 4,
    Dimension = 5,
    InvalidArgument = 6,
    BufferTooSmall = 7,
    Panic = 8,
    Other = 9,
}

/// Simulator mode selector for [`pim_forward`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PimMode {
    Bitexact = 0,
    Functional = 1,
}

/// Opaque network handle.
pub struct PimNetwork(Network);

/// Opaque aging-mask handle.
pub struct PimMask(AgingMask);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PimStatus {
    match e {
        Error::Io { .. } => PimStatus::Io,
        Error::CorruptFile { .. } | Error::BadMagic { .. } | Error::Version { .. } => PimStatus::CorruptFile,
        Error::Dimension(_) => PimStatus::Dimension,
        Error::InvalidArgument(_) | Error::InvalidCode { .. } | Error::Config(_) => PimStatus::InvalidArgument,
        _ => PimStatus::Other,
    }
}

fn fail(status: PimStatus, msg: impl Into<String>) -> PimStatus {
    set_error(msg.into());
    status
}

/// Run `f`, mapping errors and panics to status codes.
fn guard(f: impl FnOnce() -> Result<(), PimStatus>) -> PimStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PimStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(PimStatus::Panic, "internal panic"),
    }
}

fn lib(e: Error) -> PimStatus {
    fail(status_of(&e), format!("{}: {e}", e.category()))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, PimStatus> {
    if p.is_null() {
        return Err(fail(PimStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(PimStatus::InvalidUtf8, "path is not UTF-8"))
}

unsafe fn out_arg<'a, T>(p: *mut T) -> Result<&'a mut T, PimStatus> {
    p.as_mut().ok_or_else(|| fail(PimStatus::NullPointer, "output pointer is null"))
}

/// Message for the last failed call on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pim_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Load a `.ckpt` file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pim_network_load(path: *const c_char, out: *mut *mut PimNetwork) -> PimStatus {
    guard(|| {
        let out = out_arg(out)?;
        *out = ptr::null_mut();
        let net = Network::load(&path_arg(path)?).map_err(lib)?;
        *out = Box::into_raw(Box::new(PimNetwork(net)));
        Ok(())
    })
}

/// # Safety
/// `net` must come from [`pim_network_load`] and not be freed twice. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn pim_network_free(net: *mut PimNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Input and output widths of a network.
///
/// # Safety
/// `net` must be a live handle; output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn pim_network_dims(
    net: *const PimNetwork,
    inputs: *mut usize,
    outputs: *mut usize,
) -> PimStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| fail(PimStatus::NullPointer, "network is null"))?;
        *out_arg(inputs)? = net.0.widths[0];
        *out_arg(outputs)? = net.0.class_count();
        Ok(())
    })
}

/// Generate an independent-plane aging mask matching `net`'s layers.
///
/// # Safety
/// `net` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pim_mask_generate(
    net: *const PimNetwork,
    sigma: f64,
    alpha: f64,
    seed: u64,
    out: *mut *mut PimMask,
) -> PimStatus {
    guard(|| {
        let out = out_arg(out)?;
        *out = ptr::null_mut();
        let net = net.as_ref().ok_or_else(|| fail(PimStatus::NullPointer, "network is null"))?;
        let mask = generate_mask(&net.0.shapes(), net.0.q, sigma, alpha, seed).map_err(lib)?;
        *out = Box::into_raw(Box::new(PimMask(mask)));
        Ok(())
    })
}

/// Load a `.mask` file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pim_mask_load(path: *const c_char, out: *mut *mut PimMask) -> PimStatus {
    guard(|| {
        let out = out_arg(out)?;
        *out = ptr::null_mut();
        let mask = load_mask(&path_arg(path)?).map_err(lib)?;
        *out = Box::into_raw(Box::new(PimMask(mask)));
        Ok(())
    })
}

/// Write a mask to a `.mask` file.
///
/// # Safety
/// `mask` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pim_mask_save(mask: *const PimMask, path: *const c_char) -> PimStatus {
    guard(|| {
        let mask = mask.as_ref().ok_or_else(|| fail(PimStatus::NullPointer, "mask is null"))?;
        save_mask(&mask.0, &path_arg(path)?).map_err(lib)
    })
}

/// # Safety
/// `mask` must come from this library and not be freed twice. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn pim_mask_free(mask: *mut PimMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Integer class scores for `batch` rows of `features` pixels in `[0, 1]`,
/// written row-major into `scores` (capacity `scores_len`). A NULL `mask`
/// simulates an unaged (unauthorized) chip. Default array and ADC parameters.
///
/// # Safety
/// `pixels` must hold `batch * features` floats and `scores` `scores_len` slots.
#[no_mangle]
pub unsafe extern "C" fn pim_forward(
    net: *const PimNetwork,
    mask: *const PimMask,
    mode: PimMode,
    pixels: *const f32,
    batch: usize,
    features: usize,
    scores: *mut i64,
    scores_len: usize,
) -> PimStatus {
    guard(|| {
        let net = &net.as_ref().ok_or_else(|| fail(PimStatus::NullPointer, "network is null"))?.0;
        if pixels.is_null() || scores.is_null() {
            return Err(fail(PimStatus::NullPointer, "pixel or score buffer is null"));
        }
        let classes = net.class_count();
        let need = batch
            .checked_mul(classes)
            .ok_or_else(|| fail(PimStatus::InvalidArgument, "batch too large"))?;
        if scores_len < need {
            return Err(fail(
                PimStatus::BufferTooSmall,
                format!("scores needs {need} slots, got {scores_len}"),
            ));
        }
        let len = batch
            .checked_mul(features)
            .ok_or_else(|| fail(PimStatus::InvalidArgument, "batch too large"))?;
        let x = ArrayView2::from_shape((batch, features), std::slice::from_raw_parts(pixels, len))
            .map_err(|e| fail(PimStatus::Dimension, e.to_string()))?;
        let cfg = PimConfig::default().with_bits(net.q, net.n);
        let m = mask.as_ref().map(|m| &m.0);
        let mode = match mode {
            PimMode::Bitexact => SimMode::BitExact,
            PimMode::Functional => SimMode::Functional,
        };
        let out = network_forward(net, m, &cfg, mode, x).map_err(lib)?;
        let dst = std::slice::from_raw_parts_mut(scores, need);
        for (d, s) in dst.iter_mut().zip(out.iter()) {
            *d = *s;
        }
        Ok(())
    })
}

/// Base-2 exponent of the exhaustive mask-search cost. Both counts must be >= 1.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pim_security_complexity(cells: u64, levels: u64, out: *mut f64) -> PimStatus {
    guard(|| {
        let out = out_arg(out)?;
        match (NonZeroU64::new(cells), NonZeroU64::new(levels)) {
            (Some(c), Some(l)) => {
                *out = security_complexity(c, l);
                Ok(())
            }
            _ => Err(fail(PimStatus::InvalidArgument, "cells and levels must be >= 1")),
        }
    })
}
