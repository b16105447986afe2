//! C interface to kspine.
//!
//! Every function returns a [`KsStatus`]. Results are written through out
//! pointers, and objects are passed around as opaque handles that the caller
//! releases with the matching `*_free` function. After a failure,
//! [`ks_last_error_message`] describes what went wrong on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use kspine::forest::{self, GenealogyTree, DEFAULT_CAP};
use kspine::genfun;
use kspine::harness;
use kspine::limitlaw;
use kspine::model::{self, OffspringModel, SpectralData};
use kspine::spine::{self, SpineCache, SpineOptions, SpineWorkspace};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidModel = 3,
    InvalidArgument = 4,
    NotCritical = 5,
    Numerical = 6,
    BufferTooSmall = 7,
    SimulationFailed = 8,
    Panic = 9,
}

/// Offspring model with its spectral data.
pub struct KsModel {
    model: OffspringModel,
    spectral: SpectralData,
}

/// Precomputed rates for simulating trees with k spines.
pub struct KsSpineCache {
    cache: SpineCache,
    tree: GenealogyTree,
    ws: SpineWorkspace,
}

/// Summary of one tree with k spines.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct KsSpineSample {
    /// Number of spine splitting events.
    pub splits: u32,
    /// Population size at the horizon.
    pub population: u64,
    /// Importance weight back to the uniform sample law; NaN when undefined.
    pub weight: f64,
    /// Time of the first splitting divided by the horizon; NaN when k < 2.
    pub first_split: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: KsStatus, msg: impl Into<String>) -> KsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn guard<F: FnOnce() -> KsStatus>(f: F) -> KsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(KsStatus::Panic, "internal panic"),
    }
}

unsafe fn input<'a>(p: *const f64, len: usize) -> Result<&'a [f64], KsStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(KsStatus::NullPointer, "null input array"));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output(out: *mut f64, len: usize, values: &[f64]) -> KsStatus {
    if values.len() > len {
        return fail(
            KsStatus::BufferTooSmall,
            format!("buffer holds {len} values, {} needed", values.len()),
        );
    }
    if values.is_empty() {
        return KsStatus::Ok;
    }
    if out.is_null() {
        return fail(KsStatus::NullPointer, "null output array");
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    KsStatus::Ok
}

macro_rules! try_status {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Copies the last error message of this thread into `buf` as a
/// NUL-terminated string, truncating to `len` bytes. Returns the full
/// message length in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ks_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Parses a model from its JSON description and computes its spectral data.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ks_model_from_json(json: *const c_char, out: *mut *mut KsModel) -> KsStatus {
    guard(|| {
        if json.is_null() || out.is_null() {
            return fail(KsStatus::NullPointer, "null argument");
        }
        let text = match CStr::from_ptr(json).to_str() {
            Ok(t) => t,
            Err(e) => return fail(KsStatus::InvalidUtf8, e.to_string()),
        };
        let model = match model::load_model(text) {
            Ok(m) => m,
            Err(e) => return fail(KsStatus::InvalidModel, e.to_string()),
        };
        let spectral = match model::spectral(&model) {
            Ok(s) => s,
            Err(e) => return fail(KsStatus::InvalidModel, e.to_string()),
        };
        *out = Box::into_raw(Box::new(KsModel { model, spectral }));
        KsStatus::Ok
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`ks_model_from_json`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ks_model_free(model: *mut KsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of types d.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ks_model_num_types(model: *const KsModel, out: *mut usize) -> KsStatus {
    if model.is_null() || out.is_null() {
        return fail(KsStatus::NullPointer, "null argument");
    }
    *out = (*model).model.d;
    KsStatus::Ok
}

/// Spectral data: Perron root ρ, right eigenvector ξ, left eigenvector η
/// (normalized so that ξ·1 = η·ξ = 1) and the variance constant ζ. The
/// vectors need room for d values each; any output pointer may be null.
///
/// # Safety
/// Non-null pointers must be valid; `xi` and `eta` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn ks_model_spectral(
    model: *const KsModel,
    rho: *mut f64,
    xi: *mut f64,
    eta: *mut f64,
    len: usize,
    zeta: *mut f64,
    critical: *mut bool,
) -> KsStatus {
    if model.is_null() {
        return fail(KsStatus::NullPointer, "null model");
    }
    let sp = &(*model).spectral;
    if !rho.is_null() {
        *rho = sp.rho;
    }
    if !zeta.is_null() {
        *zeta = sp.zeta;
    }
    if !critical.is_null() {
        *critical = !sp.non_critical;
    }
    if !xi.is_null() {
        let s = output(xi, len, &sp.xi);
        if s != KsStatus::Ok {
            return s;
        }
    }
    if !eta.is_null() {
        let s = output(eta, len, &sp.eta);
        if s != KsStatus::Ok {
            return s;
        }
    }
    KsStatus::Ok
}

/// Generating function F_t(s) of the population at time t, one value per
/// root type. `s` and `out` hold d values.
///
/// # Safety
/// `model` must be a live handle; `s` and `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn ks_generating_function(
    model: *const KsModel,
    t: f64,
    s: *const f64,
    out: *mut f64,
    len: usize,
) -> KsStatus {
    guard(|| {
        if model.is_null() {
            return fail(KsStatus::NullPointer, "null model");
        }
        let m = &(*model).model;
        if len != m.d {
            return fail(KsStatus::InvalidArgument, format!("expected {} values, got {len}", m.d));
        }
        let s = try_status!(input(s, len));
        match genfun::generating_function(m, t, s) {
            Ok(v) => output(out, len, &v),
            Err(e) => fail(KsStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Builds the rate tables for trees with `k` spines up to `horizon` under
/// discount `theta` (d values). The model must be critical.
///
/// # Safety
/// `model` must be a live handle, `theta` must hold `len` values and `out`
/// must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ks_spine_cache_new(
    model: *const KsModel,
    k: usize,
    theta: *const f64,
    len: usize,
    horizon: f64,
    out: *mut *mut KsSpineCache,
) -> KsStatus {
    guard(|| {
        if model.is_null() || out.is_null() {
            return fail(KsStatus::NullPointer, "null argument");
        }
        let m = &*model;
        if m.spectral.non_critical {
            return fail(KsStatus::NotCritical, format!("Perron root {:e} is not zero", m.spectral.rho));
        }
        if len != m.model.d {
            return fail(KsStatus::InvalidArgument, format!("theta needs {} values, got {len}", m.model.d));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return fail(KsStatus::InvalidArgument, format!("horizon {horizon} must be positive"));
        }
        let theta = try_status!(input(theta, len));
        let cache = match SpineCache::new(&m.model, k, theta, horizon) {
            Ok(c) => c,
            Err(e) => return fail(KsStatus::Numerical, e.to_string()),
        };
        let tree = GenealogyTree::new(m.model.d, 0, horizon);
        *out = Box::into_raw(Box::new(KsSpineCache {
            cache,
            tree,
            ws: SpineWorkspace::default(),
        }));
        KsStatus::Ok
    })
}

/// Releases a spine cache. Null is ignored.
///
/// # Safety
/// `cache` must come from [`ks_spine_cache_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ks_spine_cache_free(cache: *mut KsSpineCache) {
    if !cache.is_null() {
        drop(Box::from_raw(cache));
    }
}

/// Simulates replicate `replicate` of the random stream `seed` from a root
/// of 0-based type `root`. Equal arguments give equal results.
///
/// # Safety
/// `cache` must be a live handle used by one thread at a time; `out` must be
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ks_spine_simulate(
    cache: *mut KsSpineCache,
    root: usize,
    seed: u64,
    replicate: u64,
    out: *mut KsSpineSample,
) -> KsStatus {
    guard(|| {
        if cache.is_null() || out.is_null() {
            return fail(KsStatus::NullPointer, "null argument");
        }
        let c = &mut *cache;
        if root >= c.cache.d() {
            return fail(KsStatus::InvalidArgument, format!("root type {root} out of range"));
        }
        let opts = SpineOptions {
            root_type: root,
            grow_unmarked: true,
            cap: DEFAULT_CAP,
        };
        let mut rng = forest::stream(seed, replicate);
        let rec = match spine::spine_simulate(&c.cache, &opts, &mut c.tree, &mut c.ws, &mut rng) {
            Ok(r) => r,
            Err(e) => return fail(KsStatus::SimulationFailed, e.to_string()),
        };
        *out = KsSpineSample {
            splits: rec.m() as u32,
            population: rec.n_total().unwrap_or(0),
            weight: spine::importance_weight(&c.cache, &rec, root).unwrap_or(f64::NAN),
            first_split: rec.events.first().map_or(f64::NAN, |e| e.time / c.cache.horizon),
        };
        KsStatus::Ok
    })
}

/// Draws `target` uniform k-samples from trees started by one individual
/// of type `root` and conditioned on N_T ≥ k, by rejection. Writes the
/// rescaled first split times to `out` and the number of simulated trees to
/// `attempts`.
///
/// # Safety
/// `model` must be a live handle, `out` must hold `target` values and
/// `attempts` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn ks_sample_first_splits(
    model: *const KsModel,
    k: usize,
    horizon: f64,
    root: usize,
    target: usize,
    seed: u64,
    out: *mut f64,
    attempts: *mut u64,
) -> KsStatus {
    guard(|| {
        if model.is_null() {
            return fail(KsStatus::NullPointer, "null model");
        }
        let m = &(*model).model;
        if k < 2 || root >= m.d || !(horizon > 0.0 && horizon.is_finite()) {
            return fail(KsStatus::InvalidArgument, "need k ≥ 2, a valid root type and a positive horizon");
        }
        let batch = match harness::sample_unif(m, k, horizon, root, target as u64, seed, DEFAULT_CAP, false) {
            Ok(b) => b,
            Err(e) => return fail(KsStatus::SimulationFailed, e.to_string()),
        };
        let first: Vec<f64> = batch
            .samples
            .iter()
            .map(|s| s.events.first().map_or(f64::NAN, |e| e.rho))
            .collect();
        if !attempts.is_null() {
            *attempts = batch.attempts;
        }
        output(out, target, &first)
    })
}

/// Limit density of the first split time of a uniform k-sample, rescaled
/// by the horizon, at t in [0, 1].
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ks_limit_first_split_density(k: usize, t: f64, out: *mut f64) -> KsStatus {
    guard(|| {
        if out.is_null() {
            return fail(KsStatus::NullPointer, "null output");
        }
        match limitlaw::first_split_unif_density(k, t) {
            Ok(v) => {
                *out = v;
                KsStatus::Ok
            }
            Err(e) => fail(KsStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Limit distribution function of the rescaled first split time at x.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ks_limit_first_split_cdf(k: usize, x: f64, out: *mut f64) -> KsStatus {
    guard(|| {
        if out.is_null() {
            return fail(KsStatus::NullPointer, "null output");
        }
        match limitlaw::first_split_unif_cdf(k, x) {
            Ok(v) => {
                *out = v;
                KsStatus::Ok
            }
            Err(e) => fail(KsStatus::InvalidArgument, e.to_string()),
        }
    })
}
