use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use wellspin_ffi::*;

fn last_error() -> String {
    let p = ws_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn reference() -> *mut WsWellSet {
    let mut ws = ptr::null_mut();
    assert_eq!(unsafe { ws_wellset_reference(0.05, &mut ws) }, WsStatus::Ok);
    ws
}

#[test]
fn reference_constants_and_connections() {
    let ws = reference();
    let (mut d, mut dbar, mut c0) = (0.0, 0.0, 0.0);
    assert_eq!(unsafe { ws_wellset_constants(ws, &mut d, &mut dbar, &mut c0) }, WsStatus::Ok);
    assert!((d - 1.5 * 2f64.sqrt()).abs() < 1e-12);
    assert!((c0 - 0.79299).abs() < 1e-4);
    assert_eq!(c0, d.min(dbar));
    let mut count = 0;
    assert_eq!(unsafe { ws_wellset_connection_count(ws, &mut count) }, WsStatus::Ok);
    assert_eq!(count, 2);
    for k in 0..count {
        let (mut i, mut j, mut theta, mut res) = (9, 9, 0.0, 1.0);
        let (mut a, mut b) = ([0.0; 2], [0.0; 2]);
        let st = unsafe {
            ws_wellset_connection(ws, k, &mut i, &mut j, &mut theta, a.as_mut_ptr(), b.as_mut_ptr(), &mut res)
        };
        assert_eq!(st, WsStatus::Ok);
        assert!(res <= 1e-9);
        assert!((b[0].abs() - b[1].abs()).abs() < 1e-9);
    }
    let (mut i, mut j, mut theta, mut res) = (0, 0, 0.0, 0.0);
    let (mut a, mut b) = ([0.0; 2], [0.0; 2]);
    let st =
        unsafe { ws_wellset_connection(ws, 5, &mut i, &mut j, &mut theta, a.as_mut_ptr(), b.as_mut_ptr(), &mut res) };
    assert_eq!(st, WsStatus::Input);
    assert!(last_error().contains("out of range"));
    unsafe { ws_wellset_free(ws) };
}

#[test]
fn null_and_bad_input() {
    assert_eq!(unsafe { ws_wellset_reference(0.05, ptr::null_mut()) }, WsStatus::NullPointer);
    assert!(last_error().contains("result"));
    let mut ws = ptr::null_mut();
    assert_eq!(unsafe { ws_wellset_reference(-1.0, &mut ws) }, WsStatus::Config);
    assert!(ws.is_null());
    let json = CString::new("{\"dim\": 2, \"wells\": [[1, 2]]}").unwrap();
    assert_eq!(unsafe { ws_wellset_from_json(json.as_ptr(), 0.05, &mut ws) }, WsStatus::Input);
    let json = CString::new("not json").unwrap();
    assert_eq!(unsafe { ws_wellset_from_json(json.as_ptr(), 0.05, &mut ws) }, WsStatus::Parse);
    let mut d = 0.0;
    assert_eq!(unsafe { ws_wellset_constants(ptr::null(), &mut d, &mut d, &mut d) }, WsStatus::NullPointer);
    // Successful calls clear the message.
    let ws = reference();
    assert!(ws_last_error().is_null());
    unsafe { ws_wellset_free(ws) };
    unsafe { ws_wellset_free(ptr::null_mut()) };
}

#[test]
fn laminate_on_admissible_mesh() {
    let ws = reference();
    let (mut angle, mut margin) = (0.0, 0.0);
    assert_eq!(unsafe { ws_admissible_rotation(ws, 0.05, &mut angle, &mut margin) }, WsStatus::Ok);
    assert!(margin >= 0.05);
    let mut mesh = ptr::null_mut();
    assert_eq!(unsafe { ws_mesh_kuhn2d(16, angle, &mut mesh) }, WsStatus::Ok);
    let mut cells = 0;
    assert_eq!(unsafe { ws_mesh_num_cells(mesh, &mut cells) }, WsStatus::Ok);
    assert!(cells > 0);
    let mut field = ptr::null_mut();
    assert_eq!(unsafe { ws_field_laminate(mesh, ws, 0, 0.5, 0.5, 0.0, &mut field) }, WsStatus::Ok);
    let mut e = -1.0;
    assert_eq!(unsafe { ws_field_energy(field, ws, 1.0, &mut e) }, WsStatus::Ok);
    assert!(e > 0.0);
    let (mut bad, mut viol) = (0, 1);
    assert_eq!(unsafe { ws_field_spin_check(field, ws, &mut bad, &mut viol) }, WsStatus::Ok);
    assert!(bad > 0);
    assert_eq!(viol, 0);
    unsafe { ws_field_free(field) };

    let g = [2.0, 0.0, 0.0, 0.5];
    let mut field = ptr::null_mut();
    assert_eq!(unsafe { ws_field_affine(mesh, g.as_ptr(), &mut field) }, WsStatus::Ok);
    assert_eq!(unsafe { ws_field_energy(field, ws, 1.0, &mut e) }, WsStatus::Ok);
    assert!(e.abs() < 1e-24);
    assert_eq!(unsafe { ws_field_energy(field, ws, 0.0, &mut e) }, WsStatus::Input);
    unsafe { ws_field_free(field) };
    let mut small = ptr::null_mut();
    assert_eq!(unsafe { ws_mesh_kuhn2d(1, 0.0, &mut small) }, WsStatus::Input);
    unsafe { ws_mesh_free(mesh) };
    unsafe { ws_wellset_free(ws) };
}

#[test]
fn lattice_lower_bound() {
    let mut sys = ptr::null_mut();
    assert_eq!(unsafe { ws_lattice_builtin(WsLatticeKind::AntiferroRaw, &mut sys) }, WsStatus::Ok);
    let (mut c, mut ex, mut ok) = (0.0, false, false);
    assert_eq!(unsafe { ws_lattice_h2(sys, 1 << 12, 1, &mut c, &mut ex, &mut ok) }, WsStatus::Ok);
    assert!(ex && ok);
    assert_eq!(c, 0.5);
    unsafe { ws_lattice_free(sys) };
    let json = CString::new("{}").unwrap();
    assert_eq!(unsafe { ws_lattice_from_json(json.as_ptr(), &mut sys) }, WsStatus::Parse);
}

#[test]
fn run_scenario_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    let name = CString::new("wellset-analysis").unwrap();
    let mut code = -1;
    let st = unsafe { ws_run_scenario(name.as_ptr(), ptr::null(), out.as_ptr(), false, &mut code) };
    assert_eq!(st, WsStatus::Ok);
    assert_eq!(code, 0);
    assert!(dir.path().join("wellset-analysis/summary.json").is_file());

    let bad = CString::new("{\"delta0\": -0.5}").unwrap();
    let st = unsafe { ws_run_scenario(name.as_ptr(), bad.as_ptr(), out.as_ptr(), false, &mut code) };
    assert_eq!(st, WsStatus::Config);
    assert!(last_error().contains("delta0"));

    let lam = CString::new("laminate-sweep").unwrap();
    let cfg = CString::new("{\"laminate\": {\"frame\": \"identity\"}}").unwrap();
    let st = unsafe { ws_run_scenario(lam.as_ptr(), cfg.as_ptr(), out.as_ptr(), false, &mut code) };
    assert_eq!(st, WsStatus::IncompatibleMesh);
    assert_eq!(code, 2);

    let unknown = CString::new("nope").unwrap();
    let st = unsafe { ws_run_scenario(unknown.as_ptr(), ptr::null(), out.as_ptr(), false, &mut code) };
    assert_eq!(st, WsStatus::Config);
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(ws_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/wellspin.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["ws_run_scenario", "ws_last_error", "WS_STATUS_INCOMPATIBLE_MESH", "typedef struct WsWellSet WsWellSet"] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let Ok(status) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .status()
    else {
        return;
    };
    assert!(status.success());
}
