use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use oppsched_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(oppsched_last_error()) }
        .to_str()
        .unwrap()
        .to_string()
}

fn system(lambda1: f64) -> *mut OppschedSystem {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { oppsched_system_cdma(lambda1, &mut s) }, OppschedStatus::Ok);
    s
}

fn policy(sys: *const OppschedSystem, name: &str, tie: Option<&str>) -> *mut OppschedPolicy {
    let name = CString::new(name).unwrap();
    let tie = tie.map(|t| CString::new(t).unwrap());
    let mut p = ptr::null_mut();
    let st = unsafe {
        oppsched_policy_new(
            sys,
            name.as_ptr(),
            tie.as_ref().map_or(ptr::null(), |t| t.as_ptr()),
            &mut p,
        )
    };
    assert_eq!(st, OppschedStatus::Ok, "{}", last_error());
    p
}

#[test]
fn rho_and_classes() {
    let s = system(0.14);
    let (mut rho, mut k) = (0.0, 0usize);
    unsafe {
        assert_eq!(oppsched_system_rho(s, &mut rho), OppschedStatus::Ok);
        assert_eq!(oppsched_system_num_classes(s, &mut k), OppschedStatus::Ok);
        oppsched_system_free(s);
    }
    assert_eq!(k, 2);
    // 0.14 / 0.4 + 0.05 / 0.1
    assert!((rho - 0.85).abs() < 1e-12);
}

#[test]
fn drift_matches_library() {
    let s = system(0.14);
    let p = policy(s, "pi", None);
    let mut d = [0.0; 2];
    unsafe {
        let st = oppsched_averaged_drift(p, ptr::null(), 0, d.as_mut_ptr(), 2);
        assert_eq!(st, OppschedStatus::Ok);
        assert!((d[0] + 0.26).abs() < 1e-12 && (d[1] - 0.05).abs() < 1e-12);
        let u = [0usize];
        let st = oppsched_averaged_drift(p, u.as_ptr(), 1, d.as_mut_ptr(), 2);
        assert_eq!(st, OppschedStatus::Ok);
        assert!(d[0].abs() < 1e-12 && (d[1] + 0.015).abs() < 1e-12);
        oppsched_policy_free(p);
        oppsched_system_free(s);
    }
}

#[test]
fn stability_and_emptying() {
    let s = system(0.14);
    let pi = policy(s, "pi", None);
    let cmu = policy(s, "cmu", Some("random:1,1"));
    let (mut a, mut b, mut br) = (false, true, false);
    let mut t = 0.0;
    let x0 = [1.0, 1.0];
    unsafe {
        assert_eq!(oppsched_is_stable(pi, &mut a), OppschedStatus::Ok);
        assert_eq!(oppsched_is_stable(cmu, &mut b), OppschedStatus::Ok);
        assert_eq!(oppsched_policy_is_best_rate(pi, &mut br), OppschedStatus::Ok);
        assert_eq!(oppsched_emptying_time(pi, x0.as_ptr(), 2, &mut t), OppschedStatus::Ok);
        assert!(a && !b && br);
        assert!((t - 250.0 / 3.0).abs() < 1e-9);
        assert_eq!(oppsched_emptying_time(cmu, x0.as_ptr(), 2, &mut t), OppschedStatus::Ok);
        assert!(t.is_infinite());
        let mut rho = 0.0;
        assert_eq!(
            oppsched_stability_threshold(pi, 0, 0.004, 0.196, &mut rho),
            OppschedStatus::Ok
        );
        assert_eq!(rho, 1.0);
        oppsched_policy_free(pi);
        oppsched_policy_free(cmu);
        oppsched_system_free(s);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    let s = system(0.24);
    let sb = policy(s, "sb", None);
    let mut d = [7.0; 2];
    let u = [0usize];
    unsafe {
        let st = oppsched_averaged_drift(sb, u.as_ptr(), 1, d.as_mut_ptr(), 2);
        assert_eq!(st, OppschedStatus::NotErgodic);
        assert!(!last_error().is_empty());
        assert_eq!(d, [7.0; 2], "outputs untouched on failure");

        let st = oppsched_averaged_drift(sb, ptr::null(), 0, d.as_mut_ptr(), 1);
        assert_eq!(st, OppschedStatus::InvalidArgument);
        let bad = [5usize];
        let st = oppsched_averaged_drift(sb, bad.as_ptr(), 1, d.as_mut_ptr(), 2);
        assert_eq!(st, OppschedStatus::InvalidArgument);

        let name = CString::new("nope").unwrap();
        let mut p = ptr::null_mut();
        assert_eq!(
            oppsched_policy_new(s, name.as_ptr(), ptr::null(), &mut p),
            OppschedStatus::InvalidPolicy
        );
        assert!(p.is_null());
        assert!(last_error().contains("nope"));

        let json = CString::new(r#"{"classes": []}"#).unwrap();
        let mut sys = ptr::null_mut();
        assert_eq!(
            oppsched_system_from_json(json.as_ptr(), &mut sys),
            OppschedStatus::InvalidConfig
        );
        assert_eq!(
            oppsched_system_from_json(ptr::null(), &mut sys),
            OppschedStatus::NullPointer
        );
        let mut rho = 0.0;
        assert_eq!(oppsched_system_rho(ptr::null(), &mut rho), OppschedStatus::NullPointer);

        // a success clears the message
        assert_eq!(oppsched_system_rho(s, &mut rho), OppschedStatus::Ok);
        assert_eq!(last_error(), "");
        oppsched_policy_free(sb);
        oppsched_system_free(s);
        oppsched_system_free(ptr::null_mut());
    }
}

#[test]
fn json_round_trip() {
    let text = std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/configs/cdma_table1.json"),
    )
    .unwrap();
    let json = CString::new(text).unwrap();
    let mut s = ptr::null_mut();
    let mut rho = 0.0;
    unsafe {
        assert_eq!(oppsched_system_from_json(json.as_ptr(), &mut s), OppschedStatus::Ok);
        assert_eq!(oppsched_system_rho(s, &mut rho), OppschedStatus::Ok);
        oppsched_system_free(s);
    }
    assert!((rho - 0.85).abs() < 1e-12);
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/oppsched.h")
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(header()).unwrap();
    for name in [
        "typedef struct OppschedSystem OppschedSystem",
        "typedef struct OppschedPolicy OppschedPolicy",
        "OPPSCHED_STATUS_NOT_ERGODIC = 5",
        "oppsched_last_error(void)",
        "oppsched_averaged_drift(",
        "oppsched_stability_threshold(",
        "oppsched_emptying_time(",
        "oppsched_policy_free(",
    ] {
        assert!(h.contains(name), "header lacks `{name}`");
    }
}

/// Compiles and runs a C program against the header and the static library.
#[test]
fn c_program_links_and_runs() {
    // `cargo test` only builds the rlib; ask for the archive explicitly
    let target = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/c-api");
    let st = Command::new(env!("CARGO"))
        .args(["build", "--quiet", "--lib", "-p", "oppsched-ffi", "--target-dir"])
        .arg(&target)
        .status()
        .unwrap();
    assert!(st.success());
    let lib = target.join("debug/liboppsched_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <math.h>
#include <stdio.h>
#include "oppsched.h"
int main(void) {
    OppschedSystem *s = NULL;
    OppschedPolicy *p = NULL;
    double d[2], rho;
    if (oppsched_system_cdma(0.14, &s) != OPPSCHED_STATUS_OK) return 1;
    if (oppsched_policy_new(s, "sb", "myopic", &p) != OPPSCHED_STATUS_OK) return 2;
    if (oppsched_averaged_drift(p, NULL, 0, d, 2) != OPPSCHED_STATUS_OK) return 3;
    if (fabs(d[0] + 0.26) > 1e-12 || fabs(d[1] - 0.05) > 1e-12) return 4;
    if (oppsched_system_rho(NULL, &rho) != OPPSCHED_STATUS_NULL_POINTER) return 5;
    printf("%s\n", oppsched_last_error());
    oppsched_policy_free(p);
    oppsched_system_free(s);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let out = Command::new(&cc)
        .arg(&src)
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap_or_else(|e| panic!("running {cc}: {e}"));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "sys is null");
}
