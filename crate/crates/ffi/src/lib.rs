//! C ABI over `riskstop`.
//!
//! Every fallible function returns an [`RstopStatus`]; on failure the message
//! is available from [`rstop_last_error_message`] on the same thread. Models,
//! risk specs and run configs cross the boundary as JSON strings in the same
//! format the command line tool reads. Handles are opaque and must be
//! released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use riskstop::cli::{PriceConfig, SddpRunConfig};
use riskstop::lattice::{discretize, DiscretizationMode};
use riskstop::risk::{self, DiscreteDistribution, RiskSpec};
use riskstop::sddp::{self, OuterLoopConfig, SddpSolution, StoppingProblem};
use riskstop::snell::{self, SnellResult, StopMode};
use riskstop::tree::{uniform_specs, FiltrationTree};
use riskstop::{amput, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RstopStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ParseError = 3,
    NumericalFailure = 4,
    Panic = 5,
}

/// Filtration tree built from JSON.
pub struct RstopTree {
    tree: FiltrationTree,
}

/// Snell envelope over a tree.
pub struct RstopSnell {
    result: SnellResult,
}

/// Result of a cutting-plane run.
pub struct RstopSddp {
    solution: SddpSolution,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

enum Failure {
    Null(&'static str),
    Utf8(&'static str),
    Capacity(usize, usize),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Core(Error::Json(e))
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RstopStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    let (status, msg) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => return RstopStatus::Ok,
        Ok(Err(Failure::Null(name))) => (RstopStatus::NullPointer, format!("{name} is null")),
        Ok(Err(Failure::Utf8(name))) => (RstopStatus::InvalidArgument, format!("{name} is not valid UTF-8")),
        Ok(Err(Failure::Capacity(need, have))) => (
            RstopStatus::InvalidArgument,
            format!("output buffer holds {have} values, {need} needed"),
        ),
        Ok(Err(Failure::Core(e))) => {
            let status = match &e {
                Error::Json(_) => RstopStatus::ParseError,
                e if e.is_numerical() => RstopStatus::NumericalFailure,
                _ => RstopStatus::InvalidArgument,
            };
            (status, e.to_string())
        }
        Err(payload) => {
            let text = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            (RstopStatus::Panic, format!("panic: {text}"))
        }
    };
    set_error(msg);
    status
}

unsafe fn text<'a>(p: *const c_char, name: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::Utf8(name))
}

unsafe fn slice<'a>(p: *const f64, len: usize, name: &'static str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_ref<'a, T>(p: *mut T, name: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(name))
}

unsafe fn write_all(values: &[f64], out: *mut f64, capacity: usize) -> Result<(), Failure> {
    if values.len() > capacity {
        return Err(Failure::Capacity(values.len(), capacity));
    }
    if !values.is_empty() {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    }
    Ok(())
}

unsafe fn distribution(atoms: *const f64, probs: *const f64, len: usize) -> Result<DiscreteDistribution, Failure> {
    let atoms = slice(atoms, len, "atoms")?.to_vec();
    Ok(if probs.is_null() {
        DiscreteDistribution::uniform(atoms)?
    } else {
        DiscreteDistribution::new(atoms, slice(probs, len, "probs")?.to_vec())?
    })
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn rstop_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Evaluates the risk spec on a discrete distribution. `probs` may be null
/// for equal weights.
///
/// # Safety
/// `spec_json` is a NUL-terminated string; `atoms` (and `probs` unless null)
/// point to `len` doubles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn rstop_risk_evaluate(
    spec_json: *const c_char,
    atoms: *const f64,
    probs: *const f64,
    len: usize,
    out: *mut f64,
) -> RstopStatus {
    guard(|| {
        let spec: RiskSpec = serde_json::from_str(text(spec_json, "spec_json")?)?;
        let d = distribution(atoms, probs, len)?;
        *out_ref(out, "out")? = risk::evaluate(&spec, &d)?;
        Ok(())
    })
}

/// Maximizing probability weights of AVaR at level `alpha`, one per atom;
/// `sum q_i z_i` is the AVaR value.
///
/// # Safety
/// `atoms` (and `probs` unless null) point to `len` doubles; `out` has room
/// for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rstop_avar_dual_weights(
    alpha: f64,
    atoms: *const f64,
    probs: *const f64,
    len: usize,
    out: *mut f64,
) -> RstopStatus {
    guard(|| {
        let d = distribution(atoms, probs, len)?;
        write_all(&risk::avar_dual_weights(alpha, &d)?, out, len)
    })
}

/// Reweighted probabilities from tail frequencies: the `ceil(alpha N)` most
/// frequent atoms get the raised weight.
///
/// # Safety
/// `frequencies` points to `len` doubles; `out` has room for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rstop_reweight_concave(
    lambda: f64,
    alpha: f64,
    frequencies: *const f64,
    len: usize,
    out: *mut f64,
) -> RstopStatus {
    guard(|| {
        let ranks = risk::tail_ranks(slice(frequencies, len, "frequencies")?, alpha)?;
        write_all(&risk::reweight_concave(lambda, alpha, &ranks)?, out, len)
    })
}

/// Parses a tree (`{"nodes": [{"id", "parent", "prob", "z"}, ...]}`).
///
/// # Safety
/// `json` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn rstop_tree_from_json(json: *const c_char, out: *mut *mut RstopTree) -> RstopStatus {
    guard(|| {
        let slot = out_ref(out, "out")?;
        let tree = FiltrationTree::from_json(text(json, "json")?)?;
        *slot = Box::into_raw(Box::new(RstopTree { tree }));
        Ok(())
    })
}

/// Number of nodes, 0 for a null handle.
///
/// # Safety
/// `tree` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rstop_tree_node_count(tree: *const RstopTree) -> usize {
    tree.as_ref().map_or(0, |t| t.tree.len())
}

/// # Safety
/// `tree` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rstop_tree_free(tree: *mut RstopTree) {
    if !tree.is_null() {
        drop(Box::from_raw(tree));
    }
}

/// Envelope with the same one-step spec at every stage; `min_stop` selects
/// the minimizing recursion.
///
/// # Safety
/// `tree` is a live handle; `spec_json` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn rstop_snell_envelope(
    tree: *const RstopTree,
    spec_json: *const c_char,
    min_stop: bool,
    out: *mut *mut RstopSnell,
) -> RstopStatus {
    guard(|| {
        let slot = out_ref(out, "out")?;
        let tree = &tree.as_ref().ok_or(Failure::Null("tree"))?.tree;
        let spec: RiskSpec = serde_json::from_str(text(spec_json, "spec_json")?)?;
        let mode = if min_stop { StopMode::MinStop } else { StopMode::MaxStop };
        let result = snell::snell_envelope(tree, &uniform_specs(&spec, tree.horizon()), mode)?;
        *slot = Box::into_raw(Box::new(RstopSnell { result }));
        Ok(())
    })
}

/// Root value, NaN for a null handle.
///
/// # Safety
/// `snell` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rstop_snell_root_value(snell: *const RstopSnell) -> f64 {
    snell.as_ref().map_or(f64::NAN, |s| s.result.root_value)
}

/// Copies the per-node envelope (tree node order) into `out`.
///
/// # Safety
/// `snell` is a live handle; `out` has room for `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn rstop_snell_values(snell: *const RstopSnell, out: *mut f64, capacity: usize) -> RstopStatus {
    guard(|| {
        let s = snell.as_ref().ok_or(Failure::Null("snell"))?;
        write_all(&s.result.envelope, out, capacity)
    })
}

/// # Safety
/// `snell` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rstop_snell_free(snell: *mut RstopSnell) {
    if !snell.is_null() {
        drop(Box::from_raw(snell));
    }
}

/// Grid pricing of the put for each spec in a `price` config; writes the
/// root values to `out` and their number to `written`.
///
/// # Safety
/// `config_json` is a NUL-terminated string; `out` has room for `capacity`
/// doubles; `written` is writable.
#[no_mangle]
pub unsafe extern "C" fn rstop_price_put(
    config_json: *const c_char,
    out: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> RstopStatus {
    guard(|| {
        let count = out_ref(written, "written")?;
        let c: PriceConfig = serde_json::from_str(text(config_json, "config_json")?)?;
        let disc = discretize(&c.model, c.discretization.n, c.seed, c.discretization.mode)?;
        let roots = c
            .risks
            .iter()
            .map(|spec| Ok(amput::root_value(&amput::price_put(&c.model, &disc, spec, &c.grid)?)))
            .collect::<Result<Vec<f64>, Error>>()?;
        write_all(&roots, out, capacity)?;
        *count = roots.len();
        Ok(())
    })
}

/// Runs the cutting-plane solver (or the concave reweighting loop) for an
/// `sddp` config.
///
/// # Safety
/// `config_json` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn rstop_sddp_solve(config_json: *const c_char, out: *mut *mut RstopSddp) -> RstopStatus {
    guard(|| {
        let slot = out_ref(out, "out")?;
        let c: SddpRunConfig = serde_json::from_str(text(config_json, "config_json")?)?;
        let problem = StoppingProblem::new(&c.model, c.payoff)?;
        let disc = discretize(&c.model, c.n, c.seed, DiscretizationMode::MonteCarlo)?;
        let solution = match (&c.concave, &c.risk) {
            (Some(k), _) => {
                let outer = OuterLoopConfig {
                    max_outer: k.max_outer,
                    sample_paths: c.scenarios,
                    tolerance: k.tolerance,
                    seed: c.seed,
                };
                sddp::concave_outer_loop(&problem, k.lambda, k.alpha, &disc, &c.solver(), &outer)?.solution
            }
            (None, Some(spec)) => sddp::solve(&problem, spec, &disc, &c.solver())?,
            (None, None) => return Err(Error::InvalidArgument("risk or concave must be given".into()).into()),
        };
        *slot = Box::into_raw(Box::new(RstopSddp { solution }));
        Ok(())
    })
}

/// Final lower bound, NaN for a null handle.
///
/// # Safety
/// `sddp` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rstop_sddp_lower(sddp: *const RstopSddp) -> f64 {
    sddp.as_ref().map_or(f64::NAN, |s| s.solution.lower_bound())
}

/// Deterministic upper bound, NaN when unavailable (baskets) or for a null handle.
///
/// # Safety
/// `sddp` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rstop_sddp_upper(sddp: *const RstopSddp) -> f64 {
    sddp.as_ref()
        .and_then(|s| s.solution.upper_bound)
        .unwrap_or(f64::NAN)
}

/// Number of recorded iterations, 0 for a null handle.
///
/// # Safety
/// `sddp` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rstop_sddp_trace_len(sddp: *const RstopSddp) -> usize {
    sddp.as_ref().map_or(0, |s| s.solution.trace.len())
}

/// Lower and upper bound after iteration `index + 1`; the upper bound is
/// NaN on iterations where it was not reported.
///
/// # Safety
/// `sddp` is a live handle; `lower` and `upper` are writable.
#[no_mangle]
pub unsafe extern "C" fn rstop_sddp_trace_get(
    sddp: *const RstopSddp,
    index: usize,
    lower: *mut f64,
    upper: *mut f64,
) -> RstopStatus {
    guard(|| {
        let s = sddp.as_ref().ok_or(Failure::Null("sddp"))?;
        let (lo, up) = (out_ref(lower, "lower")?, out_ref(upper, "upper")?);
        let row = s.solution.trace.get(index).ok_or_else(|| {
            Error::InvalidArgument(format!("trace index {index} out of range ({})", s.solution.trace.len()))
        })?;
        *lo = row.lower;
        *up = row.upper.unwrap_or(f64::NAN);
        Ok(())
    })
}

/// # Safety
/// `sddp` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rstop_sddp_free(sddp: *mut RstopSddp) {
    if !sddp.is_null() {
        drop(Box::from_raw(sddp));
    }
}
