use std::ffi::{c_char, CStr};
use std::path::Path;
use std::process::Command;
use std::ptr;

use mfg_ffi::*;

fn last_error() -> String {
    let mut buf = [0 as c_char; 256];
    unsafe {
        mfg_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn lq_solve_round_trip_through_the_abi() {
    unsafe {
        let mut model = ptr::null_mut();
        let st = mfg_model_new(c"lq".as_ptr(), 1, 0.5, 0.0, 1.0, 0.5, 0.5, &mut model);
        assert_eq!(st, MfgStatus::Ok);
        assert_eq!(mfg_model_dim(model), 1);
        let mut mu = ptr::null_mut();
        assert_eq!(mfg_measure_gaussian(1, 256, 0.3, 1.0, 7, &mut mu), MfgStatus::Ok);
        assert_eq!(mfg_measure_len(mu), 256);
        let mut params = mfg_solve_params_default();
        params.particles = 256;
        params.scenarios = 1;
        let mut sol = ptr::null_mut();
        assert_eq!(mfg_solve(model, mu, &params, &mut sol), MfgStatus::Ok, "{}", last_error());
        assert_eq!(mfg_solution_intervals(sol), 2);
        let (mut t0, mut t1, mut it, mut ratio) = (0.0, 0.0, 0usize, 0.0);
        assert_eq!(mfg_solution_interval(sol, 1, &mut t0, &mut t1, &mut it, &mut ratio), MfgStatus::Ok);
        assert_eq!((t0, t1), (0.25, 0.5));
        assert!(it >= 1);

        let (mut p, mut q) = (0.0, 0.0);
        assert_eq!(mfg_lq_riccati(1.0, 0.5, 0.5, 0.5, 0.0, &mut p, &mut q), MfgStatus::Ok);
        assert!((p - 1.0 / 1.5).abs() < 1e-9);
        assert!((q - 0.34486769).abs() < 1e-6, "{q}");

        let mut g = [0.0];
        assert_eq!(mfg_eval_dxv(sol, 0.0, [1.0].as_ptr(), mu, g.as_mut_ptr()), MfgStatus::Ok);
        let exact = p + q * 0.3;
        assert!((g[0] - exact).abs() < 0.05, "{} vs {exact}", g[0]);
        let (mut v, mut se) = (0.0, -1.0);
        assert_eq!(mfg_eval_v(sol, 0.5, [1.0].as_ptr(), mu, &mut v, &mut se), MfgStatus::Ok);
        assert!(v.is_finite() && se == 0.0);
        let mut m = [0.0];
        assert_eq!(mfg_eval_dxmuv(sol, 0.5, [1.0].as_ptr(), mu, [0.0].as_ptr(), 0, m.as_mut_ptr()), MfgStatus::Ok);
        assert!((m[0] - 0.5).abs() < 1e-12);

        mfg_solution_free(sol);
        mfg_measure_free(mu);
        mfg_model_free(model);
    }
}

#[test]
fn failures_map_to_status_codes() {
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(mfg_model_new(ptr::null(), 1, 1.0, 0.0, 1.0, 0.5, 0.5, &mut model), MfgStatus::NullPointer);
        assert!(last_error().contains("null"));
        assert_eq!(mfg_model_new(c"nope".as_ptr(), 1, 1.0, 0.0, 1.0, 0.5, 0.5, &mut model), MfgStatus::InvalidInput);
        assert!(last_error().contains("unknown model"), "{}", last_error());
        assert!(model.is_null());

        let mut mu = ptr::null_mut();
        let w = [0.5, 0.7];
        assert_eq!(mfg_measure_new(1, 2, [0.0, 1.0].as_ptr(), w.as_ptr(), &mut mu), MfgStatus::InvalidInput);
        assert_eq!(mfg_measure_new(1, 2, [0.0, 1.0].as_ptr(), ptr::null(), &mut mu), MfgStatus::Ok);

        assert_eq!(mfg_model_new(c"anti_monotone".as_ptr(), 1, 2.0, 0.0, 1.0, 0.5, 0.5, &mut model), MfgStatus::Ok);
        let mut params = mfg_solve_params_default();
        params.particles = 128;
        params.scenarios = 1;
        let mut sol = ptr::null_mut();
        assert_eq!(mfg_solve(model, mu, &params, &mut sol), MfgStatus::NonContraction);
        assert!(sol.is_null());
        assert_eq!(mfg_solve(ptr::null(), mu, &params, &mut sol), MfgStatus::NullPointer);
        assert_eq!(mfg_lq_riccati(1.0, 0.5, 0.5, 1.0, 2.0, &mut 0.0, &mut 0.0), MfgStatus::InvalidInput);

        mfg_model_free(model);
        mfg_measure_free(mu);
        mfg_model_free(ptr::null_mut());
        assert_eq!(mfg_last_error(ptr::null_mut(), 0), last_error().len());
    }
}

#[test]
fn version_is_the_package_version() {
    let v = unsafe { CStr::from_ptr(mfg_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = include.join("mfg.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["mfg_solve", "mfg_eval_dxv", "mfg_last_error", "MFG_STATUS_NON_CONTRACTION", "typedef struct MfgSolution MfgSolution"] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"mfg.h\"\nint main(void) { MfgSolveParams p = mfg_solve_params_default(); MfgModel *m = 0; \
         return (int)mfg_model_new(\"lq\", 1, 1.0, 0.0, 1.0, 0.5, 0.5, &m) + (int)p.particles; }\n",
    )
    .unwrap();
    for (compiler, extra) in [("cc", vec!["-std=c99"]), ("c++", vec!["-x", "c++"])] {
        let status = Command::new(compiler)
            .args(&extra)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-I"])
            .arg(&include)
            .arg(&src)
            .status();
        match status {
            Ok(s) => assert!(s.success(), "{compiler} rejected the header"),
            Err(e) => eprintln!("skipping {compiler}: {e}"),
        }
    }
}
