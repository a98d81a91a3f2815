//! C interface to the wellspin library.
//!
//! Objects are opaque handles created by `ws_*_new`/`ws_*_from_*` functions
//! and released with the matching `ws_*_free`. Every fallible call returns a
//! [`WsStatus`]; on failure `ws_last_error()` describes the problem until the
//! next call on the same thread. Output pointers are written only on success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wellspin::energy::{build_laminate, evaluate_energy, Density, LaminateSpec, PWAffineField};
use wellspin::harness::{self, ExperimentConfig, RunOptions, Scenario};
use wellspin::lattice::{antiferro_system, synthetic_system, verify_h2, AntiferroVariant, LatticeSystem};
use wellspin::linalg::{self, Mat};
use wellspin::mesh::{find_admissible_rotation, BoxDomain, SimplicialMesh};
use wellspin::spin::{classify, count_bad_cells, verify_spin_lemma};
use wellspin::wellalg::{reference_two_well, DbarOptions, WellSet};
use wellspin::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Input = 3,
    Domain = 4,
    Config = 5,
    Resource = 6,
    IncompatibleMesh = 7,
    EnergyBound = 8,
    Unsupported = 9,
    Io = 10,
    Parse = 11,
    Panic = 12,
}

impl From<&Error> for WsStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Input(_) => WsStatus::Input,
            Error::Domain(_) => WsStatus::Domain,
            Error::Config(_) => WsStatus::Config,
            Error::Resource(_) => WsStatus::Resource,
            Error::IncompatibleMesh(_) => WsStatus::IncompatibleMesh,
            Error::EnergyBound(_) => WsStatus::EnergyBound,
            Error::Unsupported(_) => WsStatus::Unsupported,
            Error::Io(_) => WsStatus::Io,
            Error::Json(_) | Error::Csv(_) => WsStatus::Parse,
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WsLatticeKind {
    AntiferroRaw = 0,
    AntiferroRemapped = 1,
    SyntheticPlanar = 2,
}

/// Well set with solved rank-one connections.
pub struct WsWellSet {
    inner: WellSet,
}

pub struct WsMesh {
    inner: Arc<SimplicialMesh>,
}

pub struct WsField {
    inner: PWAffineField,
}

pub struct WsLattice {
    inner: LatticeSystem,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(WsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(WsStatus::from(&e), e.to_string())
    }
}

fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> WsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => WsStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            WsStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(WsStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure(WsStatus::NullPointer, format!("{what} is null")))
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(WsStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(WsStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Message of the last failed call on this thread, or NULL. Valid until the next call.
#[no_mangle]
pub extern "C" fn ws_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ws_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

fn prepared(mut ws: WellSet, delta0: f64) -> Result<WsWellSet, Failure> {
    ws.solve_connections()?;
    ws.compute_dbar(delta0, &DbarOptions::default())?;
    Ok(WsWellSet { inner: ws })
}

/// The pair `diag(2, 1/2)`, `diag(1/2, 2)` with constants evaluated at `delta0`.
///
/// # Safety
/// `result` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ws_wellset_reference(delta0: f64, result: *mut *mut WsWellSet) -> WsStatus {
    guard(|| {
        let slot = out(result, "result")?;
        *slot = boxed(prepared(reference_two_well(), delta0)?);
        Ok(())
    })
}

/// Well set from its JSON form `{"dim": n, "wells": [[row-major], ...]}`.
///
/// # Safety
/// `json` must be a NUL-terminated string and `result` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ws_wellset_from_json(
    json: *const c_char,
    delta0: f64,
    result: *mut *mut WsWellSet,
) -> WsStatus {
    guard(|| {
        let text = string(json, "json")?;
        let slot = out(result, "result")?;
        *slot = boxed(prepared(WellSet::from_json_str(text)?, delta0)?);
        Ok(())
    })
}

/// # Safety
/// `ws` must come from a `ws_wellset_*` constructor, or be NULL.
#[no_mangle]
pub unsafe extern "C" fn ws_wellset_free(ws: *mut WsWellSet) {
    if !ws.is_null() {
        drop(Box::from_raw(ws));
    }
}

/// Separation `d`, incompatibility constant `dbar` and `c0 = min(d, dbar)`.
/// Infinite values (single-well sets) are reported as `INFINITY`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ws_wellset_constants(
    ws: *const WsWellSet,
    d: *mut f64,
    dbar: *mut f64,
    c0: *mut f64,
) -> WsStatus {
    guard(|| {
        let ws = &deref(ws, "ws")?.inner;
        let (d, dbar, c0) = (out(d, "d")?, out(dbar, "dbar")?, out(c0, "c0")?);
        *d = ws.separation_d();
        *dbar = ws.incompat_dbar().unwrap_or(f64::NAN);
        *c0 = ws.c0().unwrap_or(f64::NAN);
        Ok(())
    })
}

/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ws_wellset_connection_count(ws: *const WsWellSet, count: *mut usize) -> WsStatus {
    guard(|| {
        let ws = &deref(ws, "ws")?.inner;
        *out(count, "count")? = ws.connections().len();
        Ok(())
    })
}

/// Connection `index`: wells `i`, `j`, rotation angle, `a` and `b` (2-vectors)
/// and the residual `|U_i - Q U_j - a⊗b|`.
///
/// # Safety
/// `a` and `b` must point to two doubles each; all other pointers valid.
#[no_mangle]
pub unsafe extern "C" fn ws_wellset_connection(
    ws: *const WsWellSet,
    index: usize,
    i: *mut usize,
    j: *mut usize,
    theta: *mut f64,
    a: *mut f64,
    b: *mut f64,
    residual: *mut f64,
) -> WsStatus {
    guard(|| {
        let ws = &deref(ws, "ws")?.inner;
        let c = ws
            .connections()
            .get(index)
            .ok_or_else(|| Failure(WsStatus::Input, format!("connection {index} out of range")))?;
        if ws.dim() != 2 {
            return Err(Failure(WsStatus::Unsupported, "connections are exported for n = 2".into()));
        }
        let (oi, oj, ot, ores) = (out(i, "i")?, out(j, "j")?, out(theta, "theta")?, out(residual, "residual")?);
        if a.is_null() || b.is_null() {
            return Err(Failure(WsStatus::NullPointer, "a or b is null".into()));
        }
        *oi = c.i;
        *oj = c.j;
        *ot = c.theta;
        *ores = c.residual(&ws.wells()[c.i], &ws.wells()[c.j]);
        for k in 0..2 {
            *a.add(k) = c.a[k];
            *b.add(k) = c.b[k];
        }
        Ok(())
    })
}

/// Lattice rotation angle maximising the incompatibility margin (n = 2).
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ws_admissible_rotation(
    ws: *const WsWellSet,
    delta0: f64,
    angle: *mut f64,
    margin: *mut f64,
) -> WsStatus {
    guard(|| {
        let ws = &deref(ws, "ws")?.inner;
        let (angle, margin) = (out(angle, "angle")?, out(margin, "margin")?);
        let r = find_admissible_rotation(ws, delta0, 1024)?;
        *angle = r.angle;
        *margin = r.margin;
        Ok(())
    })
}

/// Kuhn triangulation of the unit square at scale `m`, lattice rotated by `angle`.
///
/// # Safety
/// `result` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ws_mesh_kuhn2d(m: usize, angle: f64, result: *mut *mut WsMesh) -> WsStatus {
    guard(|| {
        let slot = out(result, "result")?;
        let mesh = SimplicialMesh::build_kuhn(2, m, &BoxDomain::unit(2), &linalg::rotation2(angle), None)?;
        *slot = boxed(WsMesh { inner: Arc::new(mesh) });
        Ok(())
    })
}

/// # Safety
/// `mesh` must come from `ws_mesh_kuhn2d`, or be NULL.
#[no_mangle]
pub unsafe extern "C" fn ws_mesh_free(mesh: *mut WsMesh) {
    if !mesh.is_null() {
        drop(Box::from_raw(mesh));
    }
}

/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ws_mesh_num_cells(mesh: *const WsMesh, count: *mut usize) -> WsStatus {
    guard(|| {
        let mesh = &deref(mesh, "mesh")?.inner;
        *out(count, "count")? = mesh.num_cells();
        Ok(())
    })
}

/// Simple laminate along connection `connection` of `ws` on `mesh`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ws_field_laminate(
    mesh: *const WsMesh,
    ws: *const WsWellSet,
    connection: usize,
    fraction: f64,
    period: f64,
    offset: f64,
    result: *mut *mut WsField,
) -> WsStatus {
    guard(|| {
        let mesh = &deref(mesh, "mesh")?.inner;
        let ws = &deref(ws, "ws")?.inner;
        let slot = out(result, "result")?;
        let conn = ws
            .connections()
            .get(connection)
            .ok_or_else(|| Failure(WsStatus::Input, format!("connection {connection} out of range")))?;
        let spec = LaminateSpec { fraction, period, offset };
        *slot = boxed(WsField { inner: build_laminate(mesh.clone(), ws, conn, &spec)? });
        Ok(())
    })
}

/// Affine field `x ↦ F x` with `F` given row-major (`n*n` doubles).
///
/// # Safety
/// `gradient` must point to `n*n` doubles; other pointers valid.
#[no_mangle]
pub unsafe extern "C" fn ws_field_affine(
    mesh: *const WsMesh,
    gradient: *const f64,
    result: *mut *mut WsField,
) -> WsStatus {
    guard(|| {
        let mesh = &deref(mesh, "mesh")?.inner;
        let slot = out(result, "result")?;
        if gradient.is_null() {
            return Err(Failure(WsStatus::NullPointer, "gradient is null".into()));
        }
        let n = mesh.dim();
        let f = Mat::from_row_slice(n, n, std::slice::from_raw_parts(gradient, n * n));
        *slot = boxed(WsField { inner: PWAffineField::affine(mesh.clone(), &f, &vec![0.0; n])? });
        Ok(())
    })
}

/// # Safety
/// `field` must come from a `ws_field_*` constructor, or be NULL.
#[no_mangle]
pub unsafe extern "C" fn ws_field_free(field: *mut WsField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// Multi-well energy with density `c1 dist²(·, K)`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ws_field_energy(
    field: *const WsField,
    ws: *const WsWellSet,
    c1: f64,
    energy: *mut f64,
) -> WsStatus {
    guard(|| {
        let u = &deref(field, "field")?.inner;
        let ws = &deref(ws, "ws")?.inner;
        let energy = out(energy, "energy")?;
        if !(c1 > 0.0) {
            return Err(Failure(WsStatus::Input, "c1 must be positive".into()));
        }
        *energy = evaluate_energy(u, ws, &Density::Quadratic { c1 })?.total;
        Ok(())
    })
}

/// Classification at threshold `c0/100`: number of BAD cells and number of
/// spin-lemma violations among adjacent cells.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ws_field_spin_check(
    field: *const WsField,
    ws: *const WsWellSet,
    bad_cells: *mut usize,
    violations: *mut usize,
) -> WsStatus {
    guard(|| {
        let u = &deref(field, "field")?.inner;
        let ws = &deref(ws, "ws")?.inner;
        let (bad, viol) = (out(bad_cells, "bad_cells")?, out(violations, "violations")?);
        let lab = classify(u, ws)?;
        *bad = count_bad_cells(&lab);
        *viol = verify_spin_lemma(u, &lab, ws).violations.len();
        Ok(())
    })
}

/// # Safety
/// `result` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ws_lattice_builtin(kind: WsLatticeKind, result: *mut *mut WsLattice) -> WsStatus {
    guard(|| {
        let slot = out(result, "result")?;
        let sys = match kind {
            WsLatticeKind::AntiferroRaw => antiferro_system(AntiferroVariant::Raw),
            WsLatticeKind::AntiferroRemapped => antiferro_system(AntiferroVariant::Remapped),
            WsLatticeKind::SyntheticPlanar => synthetic_system(),
        };
        *slot = boxed(WsLattice { inner: sys });
        Ok(())
    })
}

/// Lattice system from its JSON form.
///
/// # Safety
/// `json` must be a NUL-terminated string and `result` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ws_lattice_from_json(json: *const c_char, result: *mut *mut WsLattice) -> WsStatus {
    guard(|| {
        let text = string(json, "json")?;
        let slot = out(result, "result")?;
        *slot = boxed(WsLattice { inner: LatticeSystem::from_json_str(text)? });
        Ok(())
    })
}

/// # Safety
/// `sys` must come from a `ws_lattice_*` constructor, or be NULL.
#[no_mangle]
pub unsafe extern "C" fn ws_lattice_free(sys: *mut WsLattice) {
    if !sys.is_null() {
        drop(Box::from_raw(sys));
    }
}

/// Checks the window lower bound; writes the fitted constant (0 if none),
/// whether the check was exhaustive and whether it passed.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ws_lattice_h2(
    sys: *const WsLattice,
    budget: usize,
    seed: u64,
    constant: *mut f64,
    exhaustive: *mut bool,
    passed: *mut bool,
) -> WsStatus {
    guard(|| {
        let sys = &deref(sys, "sys")?.inner;
        let (c, ex, ok) = (out(constant, "constant")?, out(exhaustive, "exhaustive")?, out(passed, "passed")?);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rep = verify_h2(sys, budget, &mut rng)?;
        *c = rep.constant.unwrap_or(0.0);
        *ex = rep.exhaustive;
        *ok = rep.passed;
        Ok(())
    })
}

/// Runs a scenario with an optional JSON config (NULL for defaults) and
/// output root (NULL for the default). `exit_code` receives the command-line
/// exit code: 0 all gates pass, 1 a gate failed, 2 incompatible mesh,
/// 3 energy bound, 4 other errors. The status reports errors as usual.
///
/// # Safety
/// `scenario` must be a NUL-terminated string; `config_json` and `out_dir`
/// NUL-terminated or NULL; `exit_code` valid.
#[no_mangle]
pub unsafe extern "C" fn ws_run_scenario(
    scenario: *const c_char,
    config_json: *const c_char,
    out_dir: *const c_char,
    force: bool,
    exit_code: *mut i32,
) -> WsStatus {
    guard(|| {
        let name = string(scenario, "scenario")?;
        let code = out(exit_code, "exit_code")?;
        *code = harness::exit::INTERNAL;
        let sc: Scenario = name.parse()?;
        let cfg = if config_json.is_null() {
            ExperimentConfig::default_for(sc)
        } else {
            let text = string(config_json, "config_json")?;
            let value: serde_json::Value = serde_json::from_str(text).map_err(Error::from)?;
            let diags = harness::validate_config_value(&value, Some(sc), std::path::Path::new("."));
            if !diags.is_empty() {
                let msg: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
                return Err(Failure(WsStatus::Config, msg.join("; ")));
            }
            ExperimentConfig::from_json_str(text)?
        };
        let out_root = if out_dir.is_null() { None } else { Some(PathBuf::from(string(out_dir, "out_dir")?)) };
        let opts = RunOptions { force, out_root, ..RunOptions::default() };
        match harness::run(sc, &cfg, &opts) {
            Ok(o) => {
                *code = o.exit_code();
                Ok(())
            }
            Err(e) => {
                *code = harness::exit_code_for(&e);
                Err(e.into())
            }
        }
    })
}
