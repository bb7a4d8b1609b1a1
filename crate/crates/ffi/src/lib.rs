//! C ABI over the slowregion toolkit.
//!
//! Every function returns an [`SrStatus`]; on failure a message is kept per
//! thread and can be read with [`sr_last_error`]. Objects are opaque handles
//! created by `*_new`, `*_load` or `*_mine` and released with the matching
//! `*_free`. Panics never cross the boundary; they surface as
//! [`SrStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use slowregion::config::RunConfig;
use slowregion::evaluator;
use slowregion::gradcheck;
use slowregion::miner::{self, PairDataset};
use slowregion::model::{Checkpoint, Network, Profile, Tap};
use slowregion::proposals::{self, BBox};
use slowregion::tensor::Tensor;
use slowregion::trainer;
use slowregion::ErrorKind;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Runtime = 5,
    Panic = 6,
}

pub const SR_PROFILE_PAPER: u32 = 0;
pub const SR_PROFILE_DESK: u32 = 1;

/// Features from the last max-pool layer.
pub const SR_TAP_POOL: u32 = 0;
/// Features from the final fully connected layer (the embedding).
pub const SR_TAP_FC: u32 = 1;

/// Pixel box, top-left anchored.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SrBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

/// A network with f32 parameters.
pub struct SrNetwork {
    net: Network<f32>,
}

/// A mined pair dataset.
pub struct SrDataset {
    dataset: PairDataset,
}

struct Failure {
    status: SrStatus,
    message: String,
}

impl From<slowregion::Error> for Failure {
    fn from(e: slowregion::Error) -> Self {
        let status = match e.kind() {
            ErrorKind::Config => SrStatus::Config,
            ErrorKind::Io => SrStatus::Io,
            ErrorKind::Runtime => SrStatus::Runtime,
        };
        Failure {
            status,
            message: e.to_string(),
        }
    }
}

fn fail(status: SrStatus, message: impl Into<String>) -> Failure {
    Failure {
        status,
        message: message.into(),
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

/// Runs `body`, recording any error or panic as the thread's last error.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> SrStatus {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => SrStatus::Ok,
        Ok(Err(f)) => {
            set_last_error(f.message);
            f.status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {message}"));
            SrStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    // SAFETY: the caller guarantees that a non-null pointer is valid for reads.
    unsafe { p.as_ref() }.ok_or_else(|| fail(SrStatus::NullPointer, format!("{name} is null")))
}

fn out_ptr<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: the caller guarantees that a non-null pointer is valid for writes.
    unsafe { p.as_mut() }.ok_or_else(|| fail(SrStatus::NullPointer, format!("{name} is null")))
}

fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(SrStatus::NullPointer, format!("{name} is null")));
    }
    // SAFETY: non-null and the caller guarantees `len` readable elements.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

fn slice_mut<'a, T>(p: *mut T, len: usize, name: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(fail(SrStatus::NullPointer, format!("{name} is null")));
    }
    // SAFETY: non-null and the caller guarantees `len` writable elements.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(fail(SrStatus::NullPointer, format!("{name} is null")));
    }
    // SAFETY: non-null and the caller guarantees a NUL-terminated string.
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| fail(SrStatus::InvalidArgument, format!("{name} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

fn profile_arg(p: u32) -> Result<Profile, Failure> {
    match p {
        SR_PROFILE_PAPER => Ok(Profile::Paper),
        SR_PROFILE_DESK => Ok(Profile::Desk),
        other => Err(fail(SrStatus::InvalidArgument, format!("unknown profile {other}"))),
    }
}

fn tap_arg(t: u32) -> Result<Tap, Failure> {
    match t {
        SR_TAP_POOL => Ok(Tap::Pool),
        SR_TAP_FC => Ok(Tap::Fc),
        other => Err(fail(SrStatus::InvalidArgument, format!("unknown tap {other}"))),
    }
}

fn boxed<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    let slot = out_ptr(out, "out")?;
    *slot = Box::into_raw(Box::new(value));
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into the library from this thread.
#[no_mangle]
pub extern "C" fn sr_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Intersection over union of two boxes; 0 when both are empty.
#[no_mangle]
pub extern "C" fn sr_iou(a: SrBox, b: SrBox) -> f64 {
    let conv = |b: SrBox| BBox::new(b.x, b.y, b.w, b.h);
    proposals::iou(&conv(a), &conv(b))
}

/// Cosine distance `1 - cos` between two vectors of length `len`.
///
/// # Safety
/// `a` and `b` must point to `len` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sr_cosine_distance(a: *const f64, b: *const f64, len: usize, out: *mut f64) -> SrStatus {
    guard(|| {
        let (a, b) = (slice(a, len, "a")?, slice(b, len, "b")?);
        *out_ptr(out, "out")? = trainer::cosine_distance(a, b);
        Ok(())
    })
}

/// Randomly initialised network for `profile`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sr_network_new(profile: u32, seed: u64, out: *mut *mut SrNetwork) -> SrStatus {
    guard(|| {
        let profile = profile_arg(profile)?;
        boxed(out, SrNetwork { net: trainer::initial_network(profile, seed) })
    })
}

/// Network stored in a training checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sr_network_load(path: *const c_char, out: *mut *mut SrNetwork) -> SrStatus {
    guard(|| {
        let ckpt = Checkpoint::load(&path_arg(path, "path")?)?;
        boxed(out, SrNetwork { net: ckpt.network })
    })
}

/// # Safety
/// `net` must come from this library and not be used afterwards. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn sr_network_free(net: *mut SrNetwork) {
    if !net.is_null() {
        // SAFETY: created by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(net) });
    }
}

/// Side length of the square RGB crops the network takes.
///
/// # Safety
/// `net` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sr_network_input_size(net: *const SrNetwork, out: *mut u32) -> SrStatus {
    guard(|| {
        let net = non_null(net, "net")?;
        *out_ptr(out, "out")? = net.net.profile.input_shape()[2] as u32;
        Ok(())
    })
}

/// Length of the feature vector read at `tap`.
///
/// # Safety
/// `net` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sr_network_feature_len(net: *const SrNetwork, tap: u32, out: *mut usize) -> SrStatus {
    guard(|| {
        let net = non_null(net, "net")?;
        let tap = tap_arg(tap)?;
        let shape = net.net.profile.input_shape().to_vec();
        let features = net.net.features(&Tensor::zeros(shape), tap)?;
        *out_ptr(out, "out")? = features.len();
        Ok(())
    })
}

/// Features of one crop given as channel-major RGB bytes (`3 * s * s` of them,
/// `s` from [`sr_network_input_size`]). `out_len` must equal the feature length.
///
/// # Safety
/// `crop` must hold `crop_len` bytes and `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sr_network_features(
    net: *const SrNetwork,
    tap: u32,
    crop: *const u8,
    crop_len: usize,
    out: *mut f64,
    out_len: usize,
) -> SrStatus {
    guard(|| {
        let net = non_null(net, "net")?;
        let tap = tap_arg(tap)?;
        let shape = net.net.profile.input_shape().to_vec();
        let bytes = slice(crop, crop_len, "crop")?;
        if bytes.len() != shape.iter().product::<usize>() {
            return Err(fail(
                SrStatus::InvalidArgument,
                format!("crop has {} bytes, the network takes {:?}", bytes.len(), shape),
            ));
        }
        let input = Tensor::from_vec(shape, bytes.iter().map(|&v| v as f32 / 255.0).collect())?;
        let features = net.net.features(&input, tap)?;
        let out = slice_mut(out, out_len, "out")?;
        if out.len() != features.len() {
            return Err(fail(
                SrStatus::InvalidArgument,
                format!("output holds {} values, features have {}", out.len(), features.len()),
            ));
        }
        out.copy_from_slice(&features);
        Ok(())
    })
}

/// Mines region pairs from a corpus of frame directories with the defaults
/// of `profile`.
///
/// # Safety
/// `corpus` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sr_dataset_mine(
    corpus: *const c_char,
    profile: u32,
    seed: u64,
    out: *mut *mut SrDataset,
) -> SrStatus {
    guard(|| {
        let corpus = path_arg(corpus, "corpus")?;
        let cfg = RunConfig::for_profile(profile_arg(profile)?).with_seed(seed);
        let mined = miner::mine_corpus(&corpus, &cfg.mining)?;
        boxed(out, SrDataset { dataset: mined.dataset })
    })
}

/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sr_dataset_load(dir: *const c_char, out: *mut *mut SrDataset) -> SrStatus {
    guard(|| {
        let dataset = PairDataset::load(&path_arg(dir, "dir")?)?;
        boxed(out, SrDataset { dataset })
    })
}

/// # Safety
/// `ds` must be a live handle; `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sr_dataset_save(ds: *const SrDataset, dir: *const c_char) -> SrStatus {
    guard(|| {
        let ds = non_null(ds, "ds")?;
        ds.dataset.save(&path_arg(dir, "dir")?)?;
        Ok(())
    })
}

/// Number of pairs.
///
/// # Safety
/// `ds` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sr_dataset_len(ds: *const SrDataset, out: *mut usize) -> SrStatus {
    guard(|| {
        *out_ptr(out, "out")? = non_null(ds, "ds")?.dataset.len();
        Ok(())
    })
}

/// # Safety
/// `ds` must come from this library and not be used afterwards. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn sr_dataset_free(ds: *mut SrDataset) {
    if !ds.is_null() {
        // SAFETY: created by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(ds) });
    }
}

/// k nearest database rows by cosine distance for each query. Rows are
/// `dim` doubles, row-major. Writes `n_queries * k` indices and distances,
/// nearest first, ties broken by the lower index.
///
/// # Safety
/// All pointers must hold the number of elements implied by the counts.
#[no_mangle]
pub unsafe extern "C" fn sr_retrieve(
    queries: *const f64,
    n_queries: usize,
    database: *const f64,
    n_database: usize,
    dim: usize,
    k: usize,
    out_indices: *mut usize,
    out_distances: *mut f64,
) -> SrStatus {
    guard(|| {
        if dim == 0 {
            return Err(fail(SrStatus::InvalidArgument, "dim must be positive"));
        }
        let rows = |p, n, name| -> Result<Vec<Vec<f64>>, Failure> {
            let flat = slice(p, n * dim, name)?;
            Ok(flat.chunks(dim).map(<[f64]>::to_vec).collect())
        };
        let q = rows(queries, n_queries, "queries")?;
        let db = rows(database, n_database, "database")?;
        let report = evaluator::retrieve(&q, &db, k)?;
        let idx = slice_mut(out_indices, n_queries * k, "out_indices")?;
        let dist = slice_mut(out_distances, n_queries * k, "out_distances")?;
        for (i, n) in report.neighbors.iter().flatten().enumerate() {
            idx[i] = n.index;
            dist[i] = n.distance;
        }
        Ok(())
    })
}

/// Runs the gradient check of `profile` and writes the largest relative
/// error. Returns `Ok` whenever the check ran, whether or not it passed.
///
/// # Safety
/// `out_max_error` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sr_gradcheck(profile: u32, seed: u64, out_max_error: *mut f64) -> SrStatus {
    guard(|| {
        let out = out_ptr(out_max_error, "out_max_error")?;
        *out = gradcheck::run(profile_arg(profile)?, seed)?.max_relative_error();
        Ok(())
    })
}

/// Largest relative error at which [`sr_gradcheck`] counts as passing.
#[no_mangle]
pub extern "C" fn sr_gradcheck_tolerance() -> f64 {
    gradcheck::TOLERANCE
}
