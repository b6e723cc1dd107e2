use std::ffi::{CStr, CString};
use std::ptr;

use ctxrisk_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = ctxrisk_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

#[test]
fn risk_evaluate_cvar() {
    let losses = [1.0, 2.0, 3.0, 4.0];
    let mut out = 0.0;
    let st = unsafe { ctxrisk_risk_evaluate(c(r#"{"kind":"cvar","beta":0.5}"#).as_ptr(), losses.as_ptr(), 4, &mut out) };
    assert_eq!(st, CtxriskStatus::Ok);
    assert!((out - 3.5).abs() < 1e-12);
    assert!(ctxrisk_last_error().is_null());
}

#[test]
fn error_codes_and_messages() {
    let losses = [1.0];
    let mut out = 0.0;
    let st = unsafe { ctxrisk_risk_evaluate(c(r#"{"kind":"cvar","beta":1.5}"#).as_ptr(), losses.as_ptr(), 1, &mut out) };
    assert_eq!(st, CtxriskStatus::InvalidArgument);
    assert!(last_error().starts_with("beta-out-of-range"));

    let st = unsafe { ctxrisk_risk_evaluate(c("{not json").as_ptr(), losses.as_ptr(), 1, &mut out) };
    assert_eq!(st, CtxriskStatus::InvalidJson);

    let st = unsafe { ctxrisk_risk_evaluate(ptr::null(), losses.as_ptr(), 1, &mut out) };
    assert_eq!(st, CtxriskStatus::NullPointer);

    let st = unsafe { ctxrisk_risk_evaluate(c(r#"{"kind":"mean"}"#).as_ptr(), losses.as_ptr(), 0, &mut out) };
    assert_eq!(st, CtxriskStatus::InvalidArgument);
    assert_eq!(last_error(), "empty-sample");
}

#[test]
fn train_and_evaluate_policy() {
    let n = 40;
    let x: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 / 10.0).collect();
    let y: Vec<f64> = x.iter().enumerate().map(|(i, x)| 100.0 + 5.0 * x + (i % 7) as f64 - 3.0).collect();
    let mut sample = ptr::null_mut();
    assert_eq!(unsafe { ctxrisk_sample_new(n, 1, 1, x.as_ptr(), y.as_ptr(), &mut sample) }, CtxriskStatus::Ok);
    assert_eq!(unsafe { ctxrisk_sample_len(sample) }, n);

    let mut policy = ptr::null_mut();
    let st = unsafe {
        ctxrisk_newsvendor_train(sample, c(r#"{"kind":"rn"}"#).as_ptr(), c("ldr").as_ptr(), ptr::null(), &mut policy)
    };
    assert_eq!(st, CtxriskStatus::InvalidJson);
    let st = unsafe {
        ctxrisk_newsvendor_train(
            sample,
            c(r#"{"kind":"risk_neutral"}"#).as_ptr(),
            c("ldr").as_ptr(),
            ptr::null(),
            &mut policy,
        )
    };
    assert_eq!(st, CtxriskStatus::Ok, "{}", last_error());

    let (mut dx, mut dz) = (0, 0);
    assert_eq!(unsafe { ctxrisk_policy_dims(policy, &mut dx, &mut dz) }, CtxriskStatus::Ok);
    assert_eq!((dx, dz), (1, 1));

    let mut z = [0.0];
    assert_eq!(unsafe { ctxrisk_policy_evaluate(policy, [2.0].as_ptr(), 1, z.as_mut_ptr(), 1) }, CtxriskStatus::Ok);
    assert!(z[0] > 100.0 && z[0] < 120.0, "{}", z[0]);
    assert_eq!(
        unsafe { ctxrisk_policy_evaluate(policy, [2.0].as_ptr(), 1, z.as_mut_ptr(), 0) },
        CtxriskStatus::BufferTooSmall
    );
    assert_eq!(
        unsafe { ctxrisk_policy_evaluate(policy, [2.0, 1.0].as_ptr(), 2, z.as_mut_ptr(), 1) },
        CtxriskStatus::DimensionMismatch
    );

    let mut json = ptr::null_mut();
    assert_eq!(unsafe { ctxrisk_policy_to_json(policy, &mut json) }, CtxriskStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { ctxrisk_policy_from_json(json, &mut back) }, CtxriskStatus::Ok);
    let mut z2 = [0.0];
    unsafe { ctxrisk_policy_evaluate(back, [2.0].as_ptr(), 1, z2.as_mut_ptr(), 1) };
    assert_eq!(z, z2);

    unsafe {
        ctxrisk_string_free(json);
        ctxrisk_policy_free(back);
        ctxrisk_policy_free(policy);
        ctxrisk_sample_free(sample);
        ctxrisk_sample_free(ptr::null_mut());
    }
}

#[test]
fn nested_and_exante_on_counterexample() {
    let mut joint = ptr::null_mut();
    assert_eq!(unsafe { ctxrisk_joint_counterexample(&mut joint) }, CtxriskStatus::Ok);
    let k = unsafe { ctxrisk_joint_len(joint) };
    assert_eq!(k, 2);
    let z = [72.0, 90.0];
    let mean = c(r#"{"kind":"mean"}"#);
    let (mut nested, mut exante) = (0.0, 0.0);
    unsafe {
        assert_eq!(ctxrisk_joint_nested_risk(joint, mean.as_ptr(), mean.as_ptr(), z.as_ptr(), k, &mut nested), CtxriskStatus::Ok);
        assert_eq!(ctxrisk_joint_exante_risk(joint, mean.as_ptr(), z.as_ptr(), k, &mut exante), CtxriskStatus::Ok);
    }
    assert!((nested - exante).abs() < 1e-10);
    assert_eq!(
        unsafe { ctxrisk_joint_exante_risk(joint, mean.as_ptr(), z.as_ptr(), 1, &mut exante) },
        CtxriskStatus::DimensionMismatch
    );
    unsafe { ctxrisk_joint_free(joint) };
}

#[test]
fn joint_json_validation() {
    let mut joint = ptr::null_mut();
    let bad = c(r#"{"contexts":[{"x":0,"p":0.5,"cond":[{"y":1,"q":1}]}]}"#);
    assert_eq!(unsafe { ctxrisk_joint_from_json(bad.as_ptr(), &mut joint) }, CtxriskStatus::InvalidArgument);
    assert!(joint.is_null());
}

#[test]
fn run_experiment_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let out = c(dir.path().to_str().unwrap());
    let bad = c(r#"{"experiment":"Portfolio","etas":[-1]}"#);
    assert_eq!(unsafe { ctxrisk_run_experiment(bad.as_ptr(), out.as_ptr()) }, CtxriskStatus::InvalidArgument);
    assert!(last_error().contains("etas[0]"));
    let ok = c(r#"{"experiment":"NestedDemo","random_instances":2,"consistency_trials":20}"#);
    assert_eq!(unsafe { ctxrisk_run_experiment(ok.as_ptr(), out.as_ptr()) }, CtxriskStatus::Ok);
    assert!(dir.path().join("summary.json").exists());
}

#[test]
fn header_declares_every_export() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/ctxrisk.h")).unwrap();
    for sym in [
        "ctxrisk_last_error",
        "ctxrisk_string_free",
        "ctxrisk_risk_evaluate",
        "ctxrisk_sample_new",
        "ctxrisk_sample_free",
        "ctxrisk_newsvendor_train",
        "ctxrisk_policy_from_json",
        "ctxrisk_policy_to_json",
        "ctxrisk_policy_evaluate",
        "ctxrisk_policy_free",
        "ctxrisk_joint_counterexample",
        "ctxrisk_joint_nested_risk",
        "ctxrisk_joint_exante_risk",
        "ctxrisk_joint_free",
        "ctxrisk_run_experiment",
        "typedef struct CtxriskPolicy CtxriskPolicy",
        "CTXRISK_STATUS_SOLVER_FAILURE = 6",
    ] {
        assert!(h.contains(sym), "missing {sym}");
    }
}

#[test]
fn header_compiles_as_c() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"ctxrisk.h\"\nint main(void) {\n  CtxriskJoint *j = NULL;\n  \
         CtxriskStatus s = ctxrisk_joint_counterexample(&j);\n  ctxrisk_joint_free(j);\n  return s == CTXRISK_STATUS_OK ? 0 : 1;\n}\n",
    )
    .unwrap();
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let status = match std::process::Command::new("cc").args(["-std=c99", "-fsyntax-only", "-I", include]).arg(&src).status() {
        Ok(s) => s,
        Err(_) => return,
    };
    assert!(status.success());
}
