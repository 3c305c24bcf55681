//! C ABI over the voxdiff toolkit.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_read`/
//! `*_load` functions and released by the matching `*_free`. Every fallible
//! call returns a [`VoxdiffStatus`]; on failure the message is available from
//! [`voxdiff_last_error`] on the same thread until the next failing call.
//! Panics are caught and reported as `VOXDIFF_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use voxdiff::cisp::{slerp, Embedding};
use voxdiff::denoiser::{Conditioning, DenoiserNet};
use voxdiff::humaneval::{read_jsonl, tally};
use voxdiff::metrics::{chamfer, iou_fscore};
use voxdiff::sampler::{sample, SampleRequest};
use voxdiff::schedule::NoiseSchedule;
use voxdiff::voxel::{read_grid, sample_surface, write_grid, GridKind, VoxelGrid};
use voxdiff::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoxdiffStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    DimMismatch = 5,
    Numeric = 6,
    EmptyShape = 7,
    IncompleteSession = 8,
    Internal = 99,
}

/// Schedule handle.
pub struct VoxdiffSchedule(NoiseSchedule);

/// Voxel grid handle.
pub struct VoxdiffGrid(VoxelGrid);

/// Trained denoiser together with the schedule it was trained on.
pub struct VoxdiffDenoiser {
    net: DenoiserNet,
    sched: NoiseSchedule,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> VoxdiffStatus {
    match e {
        Error::Io { .. } => VoxdiffStatus::Io,
        Error::Format(_) | Error::Truncated { .. } | Error::Json(_) => VoxdiffStatus::Format,
        Error::DimMismatch(_) | Error::ShapeMismatch(_) | Error::SizeMismatch(_) => VoxdiffStatus::DimMismatch,
        Error::NonFinite { .. } | Error::NonFiniteActivation { .. } | Error::NanLoss => VoxdiffStatus::Numeric,
        Error::EmptyShape | Error::EmptyCloud | Error::EmptySet => VoxdiffStatus::EmptyShape,
        Error::IncompleteSession(_) => VoxdiffStatus::IncompleteSession,
        _ => VoxdiffStatus::InvalidArgument,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> VoxdiffStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VoxdiffStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            VoxdiffStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            VoxdiffStatus::InvalidArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            VoxdiffStatus::Internal
        }
    }
}

unsafe fn cstr_path(p: *const c_char, what: &'static str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Fail::Arg(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn out<T>(p: *mut T, v: T, what: &'static str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    p.write(v);
    Ok(())
}

/// Message of the last failure on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn voxdiff_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn voxdiff_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Linear variance schedule with `steps` entries.
///
/// # Safety
/// `out_schedule` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn voxdiff_schedule_linear(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    out_schedule: *mut *mut VoxdiffSchedule,
) -> VoxdiffStatus {
    guard(|| {
        let s = NoiseSchedule::linear(steps, beta_start, beta_end)?;
        out(out_schedule, Box::into_raw(Box::new(VoxdiffSchedule(s))), "out_schedule")
    })
}

/// Cumulative signal fraction at 1-based step `t`.
///
/// # Safety
/// `schedule` must come from `voxdiff_schedule_linear`; `out_value` valid.
#[no_mangle]
pub unsafe extern "C" fn voxdiff_schedule_alpha_bar(
    schedule: *const VoxdiffSchedule,
    t: usize,
    out_value: *mut f64,
) -> VoxdiffStatus {
    guard(|| {
        let s = handle(schedule, "schedule")?;
        out(out_value, s.0.alpha_bar(t)?, "out_value")
    })
}

/// # Safety
/// `schedule` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn voxdiff_schedule_free(schedule: *mut VoxdiffSchedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}

/// Binary grid from one byte per cell (nonzero = occupied), x-fastest.
///
/// # Safety
/// `dims` points to 3 values; `cells` to their product.
#[no_mangle]
pub unsafe extern "C" fn voxdiff_grid_from_occupancy(
    dims: *const usize,
    cells: *const u8,
    out_grid: *mut *mut VoxdiffGrid,
) -> VoxdiffStatus {
    guard(|| {
        let d = slice(dims, 3, "dims")?;
        let n = d.iter().product();
        let c = slice(cells, n, "cells")?;
        let g = VoxelGrid::new([d[0], d[1], d[2]], c.iter().map(|&v| (v != 0) as u8 as f32).collect(), GridKind::Binary)?;
        out(out_grid, Box::into_raw(Box::new(VoxdiffGrid(g))), "out_grid")
    })
}

/// Reads an ICVX grid file.
///
/// # Safety
/// `path` is a NUL-terminated UTF-8 string; `out_grid` valid.
#[no_mangle]
pub unsafe extern "C" fn voxdiff_grid_read(path: *const c_char, out_grid: *mut *mut VoxdiffGrid) -> VoxdiffStatus {
    guard(|| {
        let g = read_grid(cstr_path(path, "path")?)?;
        out(out_grid, Box::into_raw(Box::new(VoxdiffGrid(g))), "out_grid")
    })
}

/// Writes a grid as ICVX.
///
/// # Safety
/// `grid` is a live handle; `path` NUL-terminated UTF-8.
#[no_mangle]
pub unsafe extern "C" fn voxdiff_grid_write(grid: *const VoxdiffGrid, path: *const c_char) -> VoxdiffStatus {
    guard(|| {
        let g = handle(grid, "grid")?;
        write_grid(&g.0, cstr_path(path, "path")?)?;
        Ok(())
    })
}

/// Writes the three extents to `out_dims`.
///
/// # Safety
/// `grid` is a live handle; `out_dims` holds 3 values.
#[no_mangle]
pub unsafe extern "C" fn voxdiff_grid_dims(grid: *const VoxdiffGrid, out_dims: *mut usize) -> VoxdiffStatus {
    guard(|| {
        let g = handle(grid, "grid")?;
        if out_dims.is_null() {
            return Err(Fail::Null("out_dims"));
        }
        let d = g.0.dims();
        std::slice::from_raw_parts_mut(out_dims, 3).copy_from_slice(&d);
        Ok(())
    })
}

/// Copies cell values (x-fastest) into `buf`, which must hold exactly the
/// cell count.
///
/// # Safety
/// `grid` is a live handle; `buf` holds `len` floats.
#[no_mangle]
pub unsafe extern "C" fn voxdiff_grid_values(grid: *const VoxdiffGrid, buf: *mut f32, len: usize) -> VoxdiffStatus {
    guard(|| {
        let g = handle(grid, "grid")?;
        let v = g.0.values();
        if len != v.len() {
            return Err(Fail::Lib(Error::SizeMismatch(format!("buffer holds {len}, grid has {} cells", v.len()))));
        }
        if buf.is_null() {
            return Err(Fail::Null("buf"));
        }
        std::slice::from_raw_parts_mut(buf, len).copy_from_slice(v);
        Ok(())
    })
}

/// Number of occupied cells.
///
/// # Safety
/// `grid` is a live handle; `out_count` valid.
#[no_mangle]
pub unsafe extern "C" fn voxdiff_grid_occupied(grid: *const VoxdiffGrid, out_count: *mut usize) -> VoxdiffStatus {
    guard(|| out(out_count, handle(grid, "grid")?.0.occupied_count(), "out_count"))
}

/// # Safety
/// `grid` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn voxdiff_grid_free(grid: *mut VoxdiffGrid) {
    if !grid.is_null() {
        drop(Box::from_raw(grid));
    }
}

/// Chamfer distance between surface samples of two binary grids, each
/// canonically normalized.
///
/// # Safety
/// Handles are live; `out_value` valid.
#[no_mangle]
pub unsafe extern "C" fn voxdiff_chamfer(
    a: *const VoxdiffGrid,
    b: *const VoxdiffGrid,
    points: usize,
    seed: u64,
    out_value: *mut f64,
) -> VoxdiffStatus {
    guard(|| {
        let ca = sample_surface(&handle(a, "a")?.0, points, seed)?;
        let cb = sample_surface(&handle(b, "b")?.0, points, seed.wrapping_add(1))?;
        out(out_value, chamfer(&ca, &cb)?, "out_value")
    })
}

/// Volumetric IoU and surface F-score at threshold `tau`.
///
/// # Safety
/// Handles are live; output pointers valid.
#[no_mangle]
pub unsafe extern "C" fn voxdiff_iou_fscore(
    pred: *const VoxdiffGrid,
    gt: *const VoxdiffGrid,
    tau: f64,
    out_iou: *mut f64,
    out_fscore: *mut f64,
) -> VoxdiffStatus {
    guard(|| {
        let (iou, f) = iou_fscore(&handle(pred, "pred")?.0, &handle(gt, "gt")?.0, tau)?;
        out(out_iou, iou, "out_iou")?;
        out(out_fscore, f, "out_fscore")
    })
}

/// Spherical interpolation of two `dim`-vectors, written unit-norm to `out_vec`.
///
/// # Safety
/// `a`, `b`, `out_vec` each hold `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn voxdiff_slerp(
    a: *const f64,
    b: *const f64,
    dim: usize,
    lambda: f64,
    out_vec: *mut f64,
) -> VoxdiffStatus {
    guard(|| {
        let ea = Embedding::new(slice(a, dim, "a")?.to_vec())?;
        let eb = Embedding::new(slice(b, dim, "b")?.to_vec())?;
        let r = slerp(&ea, &eb, lambda)?;
        if out_vec.is_null() {
            return Err(Fail::Null("out_vec"));
        }
        std::slice::from_raw_parts_mut(out_vec, dim).copy_from_slice(r.values());
        Ok(())
    })
}

/// Loads a denoiser checkpoint and the schedule in its `.json` sidecar
/// (default toy schedule when the sidecar is absent).
///
/// # Safety
/// `path` NUL-terminated UTF-8; `out_net` valid.
#[no_mangle]
pub unsafe extern "C" fn voxdiff_denoiser_load(path: *const c_char, out_net: *mut *mut VoxdiffDenoiser) -> VoxdiffStatus {
    guard(|| {
        let p = cstr_path(path, "path")?;
        let (net, recipe) = match voxdiff::cli::load_denoiser(&p) {
            Ok(v) => v,
            Err(e) => {
                return Err(match e.downcast::<Error>() {
                    Ok(le) => Fail::Lib(le),
                    Err(other) => Fail::Arg(format!("{other:#}")),
                })
            }
        };
        let sched = recipe.schedule()?;
        out(out_net, Box::into_raw(Box::new(VoxdiffDenoiser { net, sched })), "out_net")
    })
}

/// Embedding and auxiliary-vector sizes the denoiser expects, and its grid edge.
///
/// # Safety
/// `net` live; outputs valid.
#[no_mangle]
pub unsafe extern "C" fn voxdiff_denoiser_dims(
    net: *const VoxdiffDenoiser,
    out_cisp_dim: *mut usize,
    out_ec_dim: *mut usize,
    out_grid: *mut usize,
) -> VoxdiffStatus {
    guard(|| {
        let c = handle(net, "net")?.net.config();
        out(out_cisp_dim, c.cond_dim, "out_cisp_dim")?;
        out(out_ec_dim, c.ec_dim, "out_ec_dim")?;
        out(out_grid, c.grid, "out_grid")
    })
}

/// Draws one binary grid. A NULL `cisp` or `ec` selects that stream's null
/// token; both NULL is unconditional sampling (single pass per step).
///
/// # Safety
/// `net` live; non-NULL vectors hold the advertised lengths; `out_grid` valid.
#[no_mangle]
pub unsafe extern "C" fn voxdiff_sample(
    net: *const VoxdiffDenoiser,
    cisp: *const f64,
    cisp_len: usize,
    ec: *const f64,
    ec_len: usize,
    w: f64,
    seed: u64,
    out_grid: *mut *mut VoxdiffGrid,
) -> VoxdiffStatus {
    guard(|| {
        let d = handle(net, "net")?;
        let cond = Conditioning {
            cisp: if cisp.is_null() { None } else { Some(slice(cisp, cisp_len, "cisp")?.to_vec()) },
            ec: if ec.is_null() { None } else { Some(slice(ec, ec_len, "ec")?.to_vec()) },
        };
        let req = SampleRequest::new(seed, w, cond, &d.sched, d.net.config().grid);
        let s = sample(&req, &d.net, &d.sched)?;
        out(out_grid, Box::into_raw(Box::new(VoxdiffGrid(s.binary))), "out_grid")
    })
}

/// # Safety
/// `net` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn voxdiff_denoiser_free(net: *mut VoxdiffDenoiser) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Tallies a vote log into a JSON report. Release the string with
/// `voxdiff_string_free`.
///
/// # Safety
/// Paths NUL-terminated UTF-8; `out_json` valid.
#[no_mangle]
pub unsafe extern "C" fn voxdiff_tally_json(
    pairs_path: *const c_char,
    key_path: *const c_char,
    votes_path: *const c_char,
    out_json: *mut *mut c_char,
) -> VoxdiffStatus {
    guard(|| {
        let pairs = read_jsonl(&cstr_path(pairs_path, "pairs_path")?)?;
        let key = read_jsonl(&cstr_path(key_path, "key_path")?)?;
        let votes = read_jsonl(&cstr_path(votes_path, "votes_path")?)?;
        let report = tally(&pairs, &key, &votes)?;
        let s = serde_json::to_string(&report).map_err(Error::from)?;
        let c = CString::new(s).map_err(|_| Fail::Arg("report contains NUL".into()))?;
        out(out_json, c.into_raw(), "out_json")
    })
}

/// # Safety
/// `s` must be NULL or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn voxdiff_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
