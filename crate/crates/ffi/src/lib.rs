//! C ABI over the routing lattice and the route-center registry.
//!
//! Every fallible call returns a [`DivdrStatus`]; on failure
//! [`divdr_last_error`] describes the problem. Handles are opaque and must
//! be released with their `_free` function. Float buffers are caller-owned
//! `double` arrays whose lengths are passed alongside.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use divdr::autodiff::Tensor;
use divdr::clustering::CenterRegistry;
use divdr::harness::load_run;
use divdr::lattice::{expected_cost, Lattice, LatticeConfig, ParamStore};
use divdr::loss::{clustering_loss_value, BatchSigma, DistanceForm};
use divdr::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivdrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Format = 5,
    Config = 6,
    NonFinite = 7,
    Panic = 8,
}

/// A lattice with its parameters.
pub struct DivdrLattice {
    lattice: Lattice,
    params: ParamStore,
}

/// A set of route centers.
pub struct DivdrRegistry {
    registry: CenterRegistry,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn status_of(err: &Error) -> DivdrStatus {
    match err {
        Error::Shape { .. } => DivdrStatus::ShapeMismatch,
        Error::InvalidArgument(_) => DivdrStatus::InvalidArgument,
        Error::Config { .. } => DivdrStatus::Config,
        Error::NonFiniteGradient(_) => DivdrStatus::NonFinite,
        Error::Io { .. } => DivdrStatus::Io,
        Error::Format { .. } | Error::Json(_) => DivdrStatus::Format,
    }
}

struct Fail(DivdrStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DivdrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DivdrStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DivdrStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(DivdrStatus::NullPointer, format!("{what} is NULL"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(DivdrStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn expect_len(what: &str, got: usize, want: usize) -> Result<(), Fail> {
    if got != want {
        return Err(Fail(
            DivdrStatus::ShapeMismatch,
            format!("{what}: expected {want} values, got {got}"),
        ));
    }
    Ok(())
}

/// Message for the last failed call on this thread. Valid until the next
/// call on the same thread; never NULL.
#[no_mangle]
pub extern "C" fn divdr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a freshly initialized lattice. `config_json` is a lattice
/// config object (`num_layers`, `num_scales`, `channels`, ...), or NULL for
/// the defaults.
///
/// # Safety
/// `config_json` must be NULL or a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn divdr_lattice_init(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut DivdrLattice,
) -> DivdrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let config = if config_json.is_null() {
            LatticeConfig::default()
        } else {
            serde_json::from_str(str_arg(config_json, "config_json")?)
                .map_err(|e| Fail(DivdrStatus::Config, e.to_string()))?
        };
        let lattice = Lattice::new(config)?;
        let params = ParamStore::init(lattice.config(), seed);
        *out = Box::into_raw(Box::new(DivdrLattice { lattice, params }));
        Ok(())
    })
}

/// Loads the lattice of a run directory written by `divdr train`.
///
/// # Safety
/// `run_dir` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn divdr_lattice_load(run_dir: *const c_char, out: *mut *mut DivdrLattice) -> DivdrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let run = load_run(Path::new(str_arg(run_dir, "run_dir")?))?;
        *out = Box::into_raw(Box::new(DivdrLattice {
            lattice: run.lattice,
            params: run.params,
        }));
        Ok(())
    })
}

/// # Safety
/// `lattice` must be NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn divdr_lattice_free(lattice: *mut DivdrLattice) {
    if !lattice.is_null() {
        drop(Box::from_raw(lattice));
    }
}

/// Number of gates (A-space dimension); 0 for a NULL handle.
///
/// # Safety
/// `lattice` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn divdr_lattice_gate_dim(lattice: *const DivdrLattice) -> usize {
    lattice.as_ref().map_or(0, |l| l.lattice.gate_dim())
}

/// Values in one input image, `input_channels * height * width`.
///
/// # Safety
/// `lattice` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn divdr_lattice_input_len(lattice: *const DivdrLattice) -> usize {
    lattice.as_ref().map_or(0, |l| {
        let c = l.lattice.config();
        c.input_channels * c.height * c.width
    })
}

/// Values in one logits map, `num_classes * height * width`.
///
/// # Safety
/// `lattice` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn divdr_lattice_logits_len(lattice: *const DivdrLattice) -> usize {
    lattice.as_ref().map_or(0, |l| {
        let c = l.lattice.config();
        c.num_classes * c.height * c.width
    })
}

/// Runs one image through the lattice. `logits` receives class-major
/// scores, `gates` the gate activations in A-space order. Either output may
/// be NULL when not wanted.
///
/// # Safety
/// Buffers must hold at least the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn divdr_lattice_forward(
    lattice: *const DivdrLattice,
    input: *const f64,
    input_len: usize,
    logits: *mut f64,
    logits_len: usize,
    gates: *mut f64,
    gates_len: usize,
) -> DivdrStatus {
    guard(|| {
        let l = lattice.as_ref().ok_or_else(|| null("lattice"))?;
        let x = slice_arg(input, input_len, "input")?;
        let c = l.lattice.config();
        let shape = vec![c.input_channels, c.height, c.width];
        expect_len("input", input_len, shape.iter().product())?;
        let out = l.lattice.infer(&l.params, &Tensor::new(shape, x.to_vec())?)?;
        if !logits.is_null() {
            expect_len("logits", logits_len, out.logits.len())?;
            slice_out(logits, logits_len, "logits")?.copy_from_slice(out.logits.data());
        }
        if !gates.is_null() {
            expect_len("gates", gates_len, out.gates.len())?;
            slice_out(gates, gates_len, "gates")?.copy_from_slice(out.gates.values());
        }
        Ok(())
    })
}

/// Normalized expected compute cost of a gate vector.
///
/// # Safety
/// `gates` must hold `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn divdr_expected_cost(
    lattice: *const DivdrLattice,
    gates: *const f64,
    len: usize,
    out: *mut f64,
) -> DivdrStatus {
    guard(|| {
        let l = lattice.as_ref().ok_or_else(|| null("lattice"))?;
        let g = slice_arg(gates, len, "gates")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = expected_cost(g, l.lattice.costs())?;
        Ok(())
    })
}

/// Builds a registry from `k * dim` row-major center coordinates.
///
/// # Safety
/// `centers` must hold `k * dim` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn divdr_registry_new(
    centers: *const f64,
    k: usize,
    dim: usize,
    out: *mut *mut DivdrRegistry,
) -> DivdrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let n = k
            .checked_mul(dim)
            .ok_or_else(|| Fail(DivdrStatus::InvalidArgument, "k * dim overflows".into()))?;
        let flat = slice_arg(centers, n, "centers")?;
        let rows = if dim == 0 { Vec::new() } else { flat.chunks(dim).map(<[f64]>::to_vec).collect() };
        let registry = CenterRegistry::new(rows)?;
        *out = Box::into_raw(Box::new(DivdrRegistry { registry }));
        Ok(())
    })
}

/// Loads a `centers.csv` written by a training run.
///
/// # Safety
/// `path` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn divdr_registry_load(path: *const c_char, out: *mut *mut DivdrRegistry) -> DivdrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = str_arg(path, "path")?;
        let text = std::fs::read_to_string(p).map_err(|e| Fail(DivdrStatus::Io, format!("reading {p}: {e}")))?;
        let registry = CenterRegistry::from_csv(&text)?;
        *out = Box::into_raw(Box::new(DivdrRegistry { registry }));
        Ok(())
    })
}

/// # Safety
/// `registry` must be NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn divdr_registry_free(registry: *mut DivdrRegistry) {
    if !registry.is_null() {
        drop(Box::from_raw(registry));
    }
}

/// Number of centers; 0 for a NULL handle.
///
/// # Safety
/// `registry` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn divdr_registry_k(registry: *const DivdrRegistry) -> usize {
    registry.as_ref().map_or(0, |r| r.registry.k())
}

/// Index of and Euclidean distance to the nearest center; ties go to the
/// lower index.
///
/// # Safety
/// `point` must hold `dim` doubles; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn divdr_nearest_center(
    registry: *const DivdrRegistry,
    point: *const f64,
    dim: usize,
    out_index: *mut usize,
    out_distance: *mut f64,
) -> DivdrStatus {
    guard(|| {
        let r = registry.as_ref().ok_or_else(|| null("registry"))?;
        let p = slice_arg(point, dim, "point")?;
        expect_len("point", dim, r.registry.dim())?;
        let (i, d) = r.registry.nearest(p)?;
        *out_index.as_mut().ok_or_else(|| null("out_index"))? = i;
        *out_distance.as_mut().ok_or_else(|| null("out_distance"))? = d;
        Ok(())
    })
}

/// Margin clustering loss of gate vector `a` against the registry's
/// centers, with scale `sigma_sq` and margin `alpha`. `squared` selects
/// squared distances.
///
/// # Safety
/// `a` must hold `dim` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn divdr_clustering_loss(
    registry: *const DivdrRegistry,
    a: *const f64,
    dim: usize,
    sigma_sq: f64,
    alpha: f64,
    squared: bool,
    out: *mut f64,
) -> DivdrStatus {
    guard(|| {
        let r = registry.as_ref().ok_or_else(|| null("registry"))?;
        let a = slice_arg(a, dim, "a")?;
        expect_len("a", dim, r.registry.dim())?;
        let form = if squared { DistanceForm::Squared } else { DistanceForm::Euclidean };
        let sigma = BatchSigma::new(sigma_sq, 1)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = clustering_loss_value(a, &r.registry, sigma, alpha, form)?;
        Ok(())
    })
}
