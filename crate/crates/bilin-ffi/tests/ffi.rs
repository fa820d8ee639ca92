use std::ffi::{CStr, CString};
use std::ptr;

use bilin::model::BilinearSystem;
use bilin::pipeline::{cuk_xbar, run_experiment, ExperimentConfig, CUK_UBAR};
use bilin_ffi::*;

fn cuk_dataset() -> *mut BilinDataset {
    let ds = run_experiment(&BilinearSystem::cuk(), &ExperimentConfig::cuk(7))
        .unwrap()
        .0;
    let mut h = ptr::null_mut();
    let s = unsafe {
        bilin_dataset_new(
            ds.n(),
            ds.m(),
            ds.t,
            ds.x1.as_ptr(),
            ds.x0.as_ptr(),
            ds.u0.as_ptr(),
            ds.noise_bound.as_matrix().as_ptr(),
            &mut h,
        )
    };
    assert_eq!(s, BilinStatus::Ok);
    h
}

#[test]
fn known_ubar_design_round_trip() {
    unsafe {
        let ds = cuk_dataset();
        let mut cs = ptr::null_mut();
        assert_eq!(bilin_consistency_build(ds, &mut cs), BilinStatus::Ok);

        let (mut rows, mut cols) = (0, 0);
        assert_eq!(
            bilin_consistency_shape(cs, &mut rows, &mut cols),
            BilinStatus::Ok
        );
        assert_eq!((rows, cols), (12, 5));
        let z = BilinearSystem::cuk().stacked().transpose();
        let mut member = false;
        assert_eq!(
            bilin_consistency_contains(cs, z.as_ptr(), rows, cols, &mut member),
            BilinStatus::Ok
        );
        assert!(member);

        let xbar = cuk_xbar();
        let ubar = [CUK_UBAR];
        let lambdas = [1.0, 2.0, 4.0];
        let mut c = ptr::null_mut();
        let s = bilin_synthesize_known(
            cs,
            BilinProgram::KnownCt,
            xbar.as_ptr(),
            ubar.as_ptr(),
            lambdas.as_ptr(),
            3,
            &mut c,
        );
        assert_eq!(s, BilinStatus::Ok);

        let (mut n, mut m) = (0, 0);
        assert_eq!(bilin_controller_shape(c, &mut n, &mut m), BilinStatus::Ok);
        let mut k = vec![0.0; n * m];
        assert_eq!(
            bilin_controller_gain(c, k.as_mut_ptr(), k.len()),
            BilinStatus::Ok
        );
        assert!(k.iter().all(|v| v.is_finite()) && k.iter().any(|v| *v != 0.0));
        assert_eq!(
            bilin_controller_gain(c, k.as_mut_ptr(), 1),
            BilinStatus::InvalidArgument
        );

        let mut v = usize::MAX;
        assert_eq!(
            bilin_verify_certificate(cs, c, 200, 1, &mut v),
            BilinStatus::Ok
        );
        assert_eq!(v, 0);

        let mut json = ptr::null_mut();
        assert_eq!(bilin_controller_to_json(c, &mut json), BilinStatus::Ok);
        assert!(CStr::from_ptr(json).to_str().unwrap().contains("\"K\""));
        bilin_string_free(json);

        bilin_controller_free(c);
        bilin_consistency_free(cs);
        bilin_dataset_free(ds);
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let mut cs = ptr::null_mut();
        assert_eq!(
            bilin_consistency_build(ptr::null(), &mut cs),
            BilinStatus::NullPointer
        );
        assert!(!CStr::from_ptr(bilin_last_error()).to_bytes().is_empty());

        let mut ds = ptr::null_mut();
        let bad = CString::new("{\"T\": 3").unwrap();
        assert_eq!(
            bilin_dataset_from_json(bad.as_ptr(), &mut ds),
            BilinStatus::Parse
        );
        assert!(ds.is_null());

        // two samples cannot give W0 full row rank
        let (x, u, b) = ([1.0, 2.0], [0.5, 0.1], [1e-4]);
        assert_eq!(
            bilin_dataset_new(
                1,
                1,
                2,
                x.as_ptr(),
                x.as_ptr(),
                u.as_ptr(),
                b.as_ptr(),
                &mut ds
            ),
            BilinStatus::Ok
        );
        assert_eq!(bilin_consistency_build(ds, &mut cs), BilinStatus::DataError);
        bilin_dataset_free(ds);
        bilin_dataset_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_the_interface() {
    let h =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/bilin.h")).unwrap();
    for name in [
        "BilinStatus",
        "bilin_dataset_new",
        "bilin_synthesize_unknown",
        "bilin_controller_free",
        "bilin_last_error",
    ] {
        assert!(h.contains(name), "{name} missing from bilin.h");
    }
}
