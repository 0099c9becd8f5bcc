use std::ffi::{CStr, CString};
use std::ptr;

use ddlab_ffi::*;

fn last_error() -> String {
    let p = ddlab_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn model_eval_round_trip() {
    let kind = CString::new("linear-mse").unwrap();
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(
            ddlab_model_new(kind.as_ptr(), 1, &mut model),
            DdlabStatus::Ok
        );
        assert_eq!(ddlab_model_width(model), 1);
        assert_eq!(ddlab_model_head_width(model), 0);
        let (mut psi, mut g) = (0.0, [0.0]);
        let h = [0.3];
        let st = ddlab_model_eval(
            model,
            h.as_ptr(),
            1,
            0.0,
            ptr::null(),
            0,
            &mut psi,
            g.as_mut_ptr(),
        );
        assert_eq!(st, DdlabStatus::Ok);
        assert_eq!(psi, 0.5 * 0.3 * 0.3);
        assert_eq!(g[0], 0.3);
        let st = ddlab_model_eval(
            model,
            h.as_ptr(),
            1,
            0.0,
            h.as_ptr(),
            1,
            &mut psi,
            ptr::null_mut(),
        );
        assert_eq!(st, DdlabStatus::InvalidArgument);
        ddlab_model_free(model);
    }
}

#[test]
fn bad_arguments_report_errors() {
    let kind = CString::new("no-such-model").unwrap();
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(
            ddlab_model_new(kind.as_ptr(), 1, &mut model),
            DdlabStatus::InvalidArgument
        );
        assert!(last_error().contains("no-such-model"));
        assert_eq!(
            ddlab_model_new(ptr::null(), 1, &mut model),
            DdlabStatus::NullPointer
        );
        let mut spec = ptr::null_mut();
        assert_eq!(
            ddlab_spec_xor(3, 1.0, &mut spec),
            DdlabStatus::InvalidArgument
        );
        assert!(spec.is_null());
        ddlab_model_free(ptr::null_mut());
        ddlab_spec_free(ptr::null_mut());
        ddlab_trajectory_free(ptr::null_mut());
    }
}

#[test]
fn xor_chi_through_handle() {
    let mut spec = ptr::null_mut();
    unsafe {
        assert_eq!(ddlab_spec_xor(10, 2.0, &mut spec), DdlabStatus::Ok);
        assert_eq!(ddlab_spec_num_modes(spec), 4);
        let mut chi = [0.0; 16];
        assert_eq!(ddlab_spec_chi(spec, chi.as_mut_ptr(), 16), DdlabStatus::Ok);
        assert_eq!(chi[0], 4.0);
        assert_eq!(chi[1], -4.0);
        assert_eq!(chi[2], 0.0);
        assert_eq!(
            ddlab_spec_chi(spec, chi.as_mut_ptr(), 4),
            DdlabStatus::InvalidArgument
        );
        ddlab_spec_free(spec);
    }
}

#[test]
fn trajectory_matches_core() {
    let kind = CString::new("linear-mse").unwrap();
    let (mut model, mut spec, mut traj) = (ptr::null_mut(), ptr::null_mut(), ptr::null_mut());
    let alg = DdlabAlgorithm {
        kind: DdlabAlgorithmKind::Dd,
        eta0: 1.0,
        eta1: 0.05,
        gamma0: 1.0,
        gamma1: 0.05,
    };
    unsafe {
        assert_eq!(
            ddlab_model_new(kind.as_ptr(), 1, &mut model),
            DdlabStatus::Ok
        );
        assert_eq!(ddlab_spec_signalless(40, &mut spec), DdlabStatus::Ok);
        assert_eq!(
            ddlab_trajectory_run(spec, model, alg, 20, 5, 7, &mut traj),
            DdlabStatus::Ok
        );
        assert_eq!(ddlab_trajectory_len(traj), 5);
        let mut rec = DdlabStepRecord::default();
        assert_eq!(ddlab_trajectory_record(traj, 4, &mut rec), DdlabStatus::Ok);
        assert_eq!(rec.t, 5);

        let core_spec = ddlab::mixture::build_signalless_spec(40).unwrap();
        let core = ddlab::descent::run_trajectory(
            &core_spec,
            &ddlab::model::LinearMse,
            None,
            ddlab::descent::Algorithm::Dd(ddlab::descent::DdParams::pure(0.05)),
            &ddlab::descent::TrajectoryOptions::new(20, 5, 7),
        )
        .unwrap();
        assert_eq!(rec.train_error, core.records[4].train_error);
        assert_eq!(rec.test_error, core.records[4].test_error);
        assert_eq!(
            ddlab_trajectory_record(traj, 5, &mut rec),
            DdlabStatus::InvalidArgument
        );
        ddlab_trajectory_free(traj);
        ddlab_spec_free(spec);
        ddlab_model_free(model);
    }
}

#[test]
fn closed_form_and_selection_rules() {
    let (mut omega, mut test) = ([0.0; 3], [0.0; 3]);
    unsafe {
        let st = ddlab_signalless_closed_form(
            1.0,
            0.05,
            0.25,
            1.0,
            omega.as_mut_ptr(),
            test.as_mut_ptr(),
            3,
        );
        assert_eq!(st, DdlabStatus::Ok);
        assert!((omega[1] - 1.000625).abs() < 1e-15);
        assert!((test[0] - 0.5).abs() < 1e-15);

        let mut t = 99;
        let errs = [1.0, 0.9, 0.95];
        assert_eq!(
            ddlab_early_stop_online(errs.as_ptr(), 3, 0.0, DdlabStopMode::Absolute, &mut t),
            DdlabStatus::Ok
        );
        assert_eq!(t, 2);
        let dec = [1.0, 0.9, 0.8];
        assert_eq!(
            ddlab_early_stop_online(dec.as_ptr(), 3, 0.0, DdlabStopMode::Absolute, &mut t),
            DdlabStatus::Ok
        );
        assert_eq!(t, 0);
        let zero = [1.0, 0.0];
        assert_eq!(
            ddlab_early_stop_online(zero.as_ptr(), 2, 0.0, DdlabStopMode::Log, &mut t),
            DdlabStatus::InvalidArgument
        );

        let cands = [0.3, 0.2, 0.5];
        assert_eq!(
            ddlab_select_candidate(cands.as_ptr(), 3, &mut t),
            DdlabStatus::Ok
        );
        assert_eq!(t, 2);
        assert_eq!(
            ddlab_select_candidate(cands.as_ptr(), 0, &mut t),
            DdlabStatus::InvalidArgument
        );
    }
}

#[test]
fn header_declares_the_api() {
    let header =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/ddlab.h")).unwrap();
    for name in [
        "ddlab_model_new",
        "ddlab_trajectory_run",
        "ddlab_last_error",
        "DdlabStatus",
        "typedef struct DdlabModel DdlabModel",
    ] {
        assert!(header.contains(name), "missing {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/ddlab.h");
    let Ok(status) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header])
        .status()
    else {
        eprintln!("no C compiler, skipping");
        return;
    };
    assert!(status.success());
}
