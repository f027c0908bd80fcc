use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use riskstop_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = rstop_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn risk_evaluation_and_weights() {
    let atoms = [1.0, 2.0, 3.0, 4.0];
    let mut out = 0.0;
    let spec = c(r#"{"kind": "AVaR", "alpha": 0.5}"#);
    let st = unsafe { rstop_risk_evaluate(spec.as_ptr(), atoms.as_ptr(), ptr::null(), 4, &mut out) };
    assert_eq!(st, RstopStatus::Ok);
    assert!((out - 3.5).abs() < 1e-12);
    assert!(rstop_last_error_message().is_null());

    let mut w = [0.0; 4];
    let st = unsafe { rstop_avar_dual_weights(0.5, atoms.as_ptr(), ptr::null(), 4, w.as_mut_ptr()) };
    assert_eq!(st, RstopStatus::Ok);
    let dual: f64 = w.iter().zip(&atoms).map(|(q, z)| q * z).sum();
    assert!((dual - 3.5).abs() < 1e-12);

    let freq: Vec<f64> = (0..100).map(|i| i as f64).collect();
    let mut p = vec![0.0; 100];
    let st = unsafe { rstop_reweight_concave(0.2, 0.05, freq.as_ptr(), 100, p.as_mut_ptr()) };
    assert_eq!(st, RstopStatus::Ok);
    assert!((p[99] - 0.048).abs() < 1e-15 && (p[0] - 0.008).abs() < 1e-15);
}

#[test]
fn error_codes() {
    let atoms = [1.0, 2.0];
    let mut out = 0.0;
    let bad = c(r#"{"kind": "AVaR", "alpha": 2.0}"#);
    let st = unsafe { rstop_risk_evaluate(bad.as_ptr(), atoms.as_ptr(), ptr::null(), 2, &mut out) };
    assert_eq!(st, RstopStatus::InvalidArgument);
    assert!(last_error().contains("alpha"));

    let junk = c("{not json");
    let st = unsafe { rstop_risk_evaluate(junk.as_ptr(), atoms.as_ptr(), ptr::null(), 2, &mut out) };
    assert_eq!(st, RstopStatus::ParseError);

    let st = unsafe { rstop_risk_evaluate(ptr::null(), atoms.as_ptr(), ptr::null(), 2, &mut out) };
    assert_eq!(st, RstopStatus::NullPointer);

    let st = unsafe { rstop_avar_dual_weights(0.5, atoms.as_ptr(), ptr::null(), 2, ptr::null_mut()) };
    assert_eq!(st, RstopStatus::NullPointer);
    let freq = [1.0, 2.0];
    let mut p = [0.0; 2];
    let st = unsafe { rstop_reweight_concave(0.2, 1.5, freq.as_ptr(), 2, p.as_mut_ptr()) };
    assert_eq!(st, RstopStatus::InvalidArgument);
    let mut h: *mut RstopTree = ptr::null_mut();
    let st = unsafe { rstop_tree_from_json(c(r#"{"nodes": []}"#).as_ptr(), &mut h) };
    assert_ne!(st, RstopStatus::Ok);
    assert!(h.is_null());
}

const TREE: &str = r#"{"nodes": [
  {"id": 0, "parent": null, "prob": 1.0, "z": 0.1},
  {"id": 1, "parent": 0, "prob": 0.5, "z": 0.5},
  {"id": 2, "parent": 0, "prob": 0.5, "z": -0.4}
]}"#;

#[test]
fn tree_and_snell_handles() {
    let mut tree: *mut RstopTree = ptr::null_mut();
    assert_eq!(unsafe { rstop_tree_from_json(c(TREE).as_ptr(), &mut tree) }, RstopStatus::Ok);
    assert_eq!(unsafe { rstop_tree_node_count(tree) }, 3);

    let mut snell: *mut RstopSnell = ptr::null_mut();
    let spec = c(r#"{"kind": "Expectation"}"#);
    assert_eq!(unsafe { rstop_snell_envelope(tree, spec.as_ptr(), false, &mut snell) }, RstopStatus::Ok);
    assert!((unsafe { rstop_snell_root_value(snell) } - 0.1).abs() < 1e-15);
    let mut values = [0.0; 3];
    assert_eq!(unsafe { rstop_snell_values(snell, values.as_mut_ptr(), 3) }, RstopStatus::Ok);
    assert_eq!(values, [0.1, 0.5, -0.4]);
    assert_eq!(unsafe { rstop_snell_values(snell, values.as_mut_ptr(), 2) }, RstopStatus::InvalidArgument);

    let mut worst: *mut RstopSnell = ptr::null_mut();
    let avar = c(r#"{"kind": "AVaR", "alpha": 0.5}"#);
    assert_eq!(unsafe { rstop_snell_envelope(tree, avar.as_ptr(), false, &mut worst) }, RstopStatus::Ok);
    assert!((unsafe { rstop_snell_root_value(worst) } - 0.5).abs() < 1e-15);

    unsafe {
        rstop_snell_free(snell);
        rstop_snell_free(worst);
        rstop_tree_free(tree);
        rstop_tree_free(ptr::null_mut());
    }
    assert!(unsafe { rstop_snell_root_value(ptr::null()) }.is_nan());
}

#[test]
fn put_pricing() {
    let cfg = c(r#"{
      "model": {"kind": "GeometricWalk", "s0": 0.8, "r": 0.0, "sigma": 0.0, "strike": 1.0, "stages": 3},
      "risks": [{"kind": "Expectation"}, {"kind": "EVaR", "beta": 1.0}],
      "discretization": {"N": 4}
    }"#);
    let mut out = [0.0; 2];
    let mut n = 0;
    assert_eq!(unsafe { rstop_price_put(cfg.as_ptr(), out.as_mut_ptr(), 2, &mut n) }, RstopStatus::Ok);
    assert_eq!(n, 2);
    assert!(out.iter().all(|v| (v - 0.2).abs() < 1e-12));
}

#[test]
fn sddp_handle() {
    let cfg = c(r#"{
      "model": {"kind": "ArithmeticWalk", "s0": 1.0, "r": 0.01, "sigma": 0.2, "strike": 1.0, "stages": 3},
      "risk": {"kind": "MeanAVaR", "lambda": 0.2, "alpha": 0.2},
      "N": 5, "iterations": 20, "upper_cadence": 10, "seed": 1
    }"#);
    let mut h: *mut RstopSddp = ptr::null_mut();
    assert_eq!(unsafe { rstop_sddp_solve(cfg.as_ptr(), &mut h) }, RstopStatus::Ok);
    let (lower, upper) = unsafe { (rstop_sddp_lower(h), rstop_sddp_upper(h)) };
    assert!(lower <= upper + 1e-12);
    assert_eq!(unsafe { rstop_sddp_trace_len(h) }, 20);
    let (mut lo, mut up) = (0.0, 0.0);
    assert_eq!(unsafe { rstop_sddp_trace_get(h, 9, &mut lo, &mut up) }, RstopStatus::Ok);
    assert!(lo <= lower && up == upper);
    assert_eq!(unsafe { rstop_sddp_trace_get(h, 0, &mut lo, &mut up) }, RstopStatus::Ok);
    assert!(up.is_nan());
    assert_eq!(unsafe { rstop_sddp_trace_get(h, 20, &mut lo, &mut up) }, RstopStatus::InvalidArgument);
    unsafe { rstop_sddp_free(h) };

    let evar = c(r#"{
      "model": {"kind": "ArithmeticWalk", "s0": 1.0, "r": 0.01, "sigma": 0.2, "strike": 1.0, "stages": 3},
      "risk": {"kind": "EVaR", "beta": 1.0}, "iterations": 5
    }"#);
    let mut h: *mut RstopSddp = ptr::null_mut();
    assert_eq!(unsafe { rstop_sddp_solve(evar.as_ptr(), &mut h) }, RstopStatus::InvalidArgument);
    assert!(h.is_null());
}

#[test]
fn header_is_generated_and_compiles_as_c() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = dir.join("include/riskstop.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "rstop_risk_evaluate",
        "rstop_avar_dual_weights",
        "rstop_reweight_concave",
        "rstop_tree_from_json",
        "rstop_snell_envelope",
        "rstop_price_put",
        "rstop_sddp_solve",
        "rstop_sddp_trace_get",
        "rstop_last_error_message",
        "RSTOP_STATUS_PANIC",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"riskstop.h\"\nint main(void) {\n  double atoms[2] = {1.0, 2.0}, v;\n  \
         return rstop_risk_evaluate(\"{\\\"kind\\\":\\\"Expectation\\\"}\", atoms, 0, 2, &v) == RSTOP_STATUS_OK ? 0 : 1;\n}\n",
    )
    .unwrap();
    let Ok(status) = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(dir.join("include"))
        .arg(&src)
        .status()
    else {
        eprintln!("no C compiler found, syntax check skipped");
        return;
    };
    assert!(status.success());
}
