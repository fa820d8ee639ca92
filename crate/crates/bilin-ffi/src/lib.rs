//! C interface to `bilin`.
//!
//! Objects cross the boundary as opaque handles that the caller releases with the matching
//! `*_free` function. Matrices are passed as column-major `double` arrays. Every fallible call
//! returns a [`BilinStatus`]; the message of the most recent failure on the calling thread is
//! available through [`bilin_last_error`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use nalgebra::{DMatrix, DVector};

use bilin::consistency::ConsistencySet;
use bilin::error::Error;
use bilin::experiment::Dataset;
use bilin::matutil::SymMatrix;
use bilin::pipeline::{SIGMA_ITERS, SIGMA_RANGE};
use bilin::synthesis::{
    line_search_known, line_search_thm3, solve_lemma3, ControllerDesign, Objective, ProgramId,
    SynthesisOptions,
};
use bilin::verify::check_certificate;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BilinStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Data unusable: rank-deficient W0, noise bound inconsistent with the data, bad dimensions.
    DataError = 3,
    /// No grid point of the design program was feasible.
    Infeasible = 4,
    SolverFailure = 5,
    Io = 6,
    Parse = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BilinProgram {
    /// Known ū, continuous time.
    KnownCt = 0,
    /// Known ū, discrete time.
    KnownDt = 1,
}

/// Noisy input-state dataset.
pub struct BilinDataset(Dataset);

/// Set of system matrices consistent with a dataset.
pub struct BilinConsistencySet(ConsistencySet);

/// Synthesized state-feedback controller with its Lyapunov certificate.
pub struct BilinController(ControllerDesign);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> BilinStatus {
    match e {
        Error::RankDeficient(_)
        | Error::InconsistentNoise(_)
        | Error::QZero
        | Error::DimMismatch(_)
        | Error::NotPsd(_) => BilinStatus::DataError,
        Error::AllInfeasible => BilinStatus::Infeasible,
        Error::SolverFailure(_) => BilinStatus::SolverFailure,
        Error::Io(_) => BilinStatus::Io,
        Error::Parse(_) => BilinStatus::Parse,
        _ => BilinStatus::InvalidArgument,
    }
}

struct Fail(BilinStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> BilinStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BilinStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(&msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            BilinStatus::Panic
        }
    }
}

fn null() -> Fail {
    Fail(BilinStatus::NullPointer, "null pointer argument".into())
}

unsafe fn read<'a>(p: *const f64, len: usize) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null());
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn deref<'a, T>(p: *const T) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(null)
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null());
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread. The pointer stays valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn bilin_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Build a dataset from column-major X1 (n×T), X0 (n×T), U0 (m×T) and the n×n noise bound ΞΞᵀ.
#[no_mangle]
pub unsafe extern "C" fn bilin_dataset_new(
    n: usize,
    m: usize,
    t: usize,
    x1: *const f64,
    x0: *const f64,
    u0: *const f64,
    noise_bound: *const f64,
    out: *mut *mut BilinDataset,
) -> BilinStatus {
    guard(|| {
        if n == 0 || m == 0 || t == 0 {
            return Err(Fail(
                BilinStatus::InvalidArgument,
                "n, m and T must be positive".into(),
            ));
        }
        let x1 = DMatrix::from_column_slice(n, t, read(x1, n * t)?);
        let x0 = DMatrix::from_column_slice(n, t, read(x0, n * t)?);
        let u0 = DMatrix::from_column_slice(m, t, read(u0, m * t)?);
        let bound = SymMatrix::new(
            DMatrix::from_column_slice(n, n, read(noise_bound, n * n)?),
            1e-9,
        )?;
        put(out, BilinDataset(Dataset::from_parts(x1, x0, u0, bound)?))
    })
}

/// Load a dataset written by `bilin collect`.
#[no_mangle]
pub unsafe extern "C" fn bilin_dataset_from_json(
    json: *const c_char,
    out: *mut *mut BilinDataset,
) -> BilinStatus {
    guard(|| {
        if json.is_null() {
            return Err(null());
        }
        let s = CStr::from_ptr(json)
            .to_str()
            .map_err(|e| Fail(BilinStatus::Parse, e.to_string()))?;
        let ds: Dataset = serde_json::from_str(s).map_err(Error::from)?;
        ds.validate()?;
        put(out, BilinDataset(ds))
    })
}

#[no_mangle]
pub unsafe extern "C" fn bilin_dataset_free(ds: *mut BilinDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

#[no_mangle]
pub unsafe extern "C" fn bilin_consistency_build(
    ds: *const BilinDataset,
    out: *mut *mut BilinConsistencySet,
) -> BilinStatus {
    guard(|| {
        let ds = deref(ds)?;
        put(out, BilinConsistencySet(ConsistencySet::build(&ds.0)?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn bilin_consistency_free(cs: *mut BilinConsistencySet) {
    if !cs.is_null() {
        drop(Box::from_raw(cs));
    }
}

/// Shape of the parameter matrix Z = [A B C d]ᵀ: rows = n + m + mn + 1, cols = n.
#[no_mangle]
pub unsafe extern "C" fn bilin_consistency_shape(
    cs: *const BilinConsistencySet,
    rows: *mut usize,
    cols: *mut usize,
) -> BilinStatus {
    guard(|| {
        let cs = deref(cs)?;
        if rows.is_null() || cols.is_null() {
            return Err(null());
        }
        *rows = cs.0.rows();
        *cols = cs.0.n;
        Ok(())
    })
}

/// Test whether the column-major Z lies in the consistency set.
#[no_mangle]
pub unsafe extern "C" fn bilin_consistency_contains(
    cs: *const BilinConsistencySet,
    z: *const f64,
    rows: usize,
    cols: usize,
    member: *mut bool,
) -> BilinStatus {
    guard(|| {
        let cs = deref(cs)?;
        if member.is_null() {
            return Err(null());
        }
        let z = DMatrix::from_column_slice(rows, cols, read(z, rows * cols)?);
        *member = cs.0.membership(&z)?;
        Ok(())
    })
}

/// Design for a known equilibrium (x̄, ū) with a line search over `lambdas`.
#[no_mangle]
pub unsafe extern "C" fn bilin_synthesize_known(
    cs: *const BilinConsistencySet,
    program: BilinProgram,
    xbar: *const f64,
    ubar: *const f64,
    lambdas: *const f64,
    n_lambdas: usize,
    out: *mut *mut BilinController,
) -> BilinStatus {
    guard(|| {
        let cs = &deref(cs)?.0;
        let xbar = DVector::from_column_slice(read(xbar, cs.n)?);
        let ubar = DVector::from_column_slice(read(ubar, cs.m)?);
        let lambdas = read(lambdas, n_lambdas)?;
        let id = match program {
            BilinProgram::KnownCt => ProgramId::Thm1CT,
            BilinProgram::KnownDt => ProgramId::Thm2DT,
        };
        let res = line_search_known(
            cs,
            &xbar,
            &ubar,
            lambdas,
            Objective::Volume,
            id,
            &SynthesisOptions::default(),
        )?;
        put(out, BilinController(res.best.ok_or(Error::AllInfeasible)?))
    })
}

/// Continuous-time design when ū is unknown: ū and γ are estimated first, then a grid over
/// (λ, s) is searched. The closed loop converges to a neighbourhood of x̄ of relative size η.
#[no_mangle]
pub unsafe extern "C" fn bilin_synthesize_unknown(
    cs: *const BilinConsistencySet,
    xbar: *const f64,
    eta: f64,
    eps: f64,
    lambdas: *const f64,
    n_lambdas: usize,
    ss: *const f64,
    n_ss: usize,
    out: *mut *mut BilinController,
) -> BilinStatus {
    guard(|| {
        let cs = &deref(cs)?.0;
        let xbar = DVector::from_column_slice(read(xbar, cs.n)?);
        let l3 = solve_lemma3(cs, &xbar, SIGMA_RANGE, SIGMA_ITERS)?;
        let res = line_search_thm3(
            cs,
            &xbar,
            &l3,
            eta,
            eps,
            read(lambdas, n_lambdas)?,
            read(ss, n_ss)?,
            Objective::Volume,
            &SynthesisOptions::default(),
        )?;
        put(out, BilinController(res.best.ok_or(Error::AllInfeasible)?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn bilin_controller_free(c: *mut BilinController) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// State dimension n and input dimension m of the controller.
#[no_mangle]
pub unsafe extern "C" fn bilin_controller_shape(
    c: *const BilinController,
    n: *mut usize,
    m: *mut usize,
) -> BilinStatus {
    guard(|| {
        let c = deref(c)?;
        if n.is_null() || m.is_null() {
            return Err(null());
        }
        *n = c.0.k.ncols();
        *m = c.0.k.nrows();
        Ok(())
    })
}

unsafe fn copy_out(src: &[f64], dst: *mut f64, len: usize) -> Result<(), Fail> {
    if dst.is_null() {
        return Err(null());
    }
    if len < src.len() {
        return Err(Fail(
            BilinStatus::InvalidArgument,
            format!("buffer holds {len} values, need {}", src.len()),
        ));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    Ok(())
}

/// Copy the m×n gain K (column-major) into `buf`, which must hold at least m·n values.
#[no_mangle]
pub unsafe extern "C" fn bilin_controller_gain(
    c: *const BilinController,
    buf: *mut f64,
    len: usize,
) -> BilinStatus {
    guard(|| copy_out(deref(c)?.0.k.as_slice(), buf, len))
}

/// Copy the n×n Lyapunov shape P (column-major) into `buf`.
#[no_mangle]
pub unsafe extern "C" fn bilin_controller_lyapunov(
    c: *const BilinController,
    buf: *mut f64,
    len: usize,
) -> BilinStatus {
    guard(|| copy_out(deref(c)?.0.p.as_matrix().as_slice(), buf, len))
}

/// Serialize the controller to JSON. Release the string with [`bilin_string_free`].
#[no_mangle]
pub unsafe extern "C" fn bilin_controller_to_json(
    c: *const BilinController,
    out: *mut *mut c_char,
) -> BilinStatus {
    guard(|| {
        let c = deref(c)?;
        if out.is_null() {
            return Err(null());
        }
        let s = serde_json::to_string(&c.0).map_err(Error::from)?;
        *out = CString::new(s)
            .map_err(|e| Fail(BilinStatus::Parse, e.to_string()))?
            .into_raw();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn bilin_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Sample the Lyapunov decrease condition over the consistency set; writes the number of
/// violating samples.
#[no_mangle]
pub unsafe extern "C" fn bilin_verify_certificate(
    cs: *const BilinConsistencySet,
    c: *const BilinController,
    samples: usize,
    seed: u64,
    violations: *mut usize,
) -> BilinStatus {
    guard(|| {
        let (cs, c) = (deref(cs)?, deref(c)?);
        if violations.is_null() {
            return Err(null());
        }
        *violations = check_certificate(&cs.0, &c.0, samples, seed)?
            .violations
            .len();
        Ok(())
    })
}
