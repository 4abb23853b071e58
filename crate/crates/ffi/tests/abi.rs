use std::ffi::{CStr, CString};
use std::ptr;

use ecokit_ffi::*;

/// Two-group VAR(1) with a planted g2 -> g1 effect, as log sizes.
fn series(t_total: usize) -> Vec<f64> {
    let mut s: u64 = 7;
    let mut noise = || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 0.2
    };
    let (mut a, mut b) = (3.0, 2.0);
    let mut y = vec![0.0; 2 * t_total];
    for t in 0..t_total {
        y[t] = a;
        y[t_total + t] = b;
        let na = 0.5 + 0.5 * a + 0.3 * b + noise();
        let nb = 1.0 + 0.5 * b + noise();
        a = na;
        b = nb;
    }
    y
}

fn last_error() -> String {
    let p = ecokit_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn version_matches_the_crate() {
    let v = unsafe { CStr::from_ptr(ecokit_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn fit_bootstrap_and_render() {
    let t_total = 200;
    let y = series(t_total);
    unsafe {
        let mut panel = ptr::null_mut();
        assert_eq!(ecokit_panel_from_matrix(y.as_ptr(), 2, t_total, ptr::null(), &mut panel), EcokitStatus::Ok);
        let (mut g, mut w) = (0, 0);
        assert_eq!(ecokit_panel_dims(panel, &mut g, &mut w), EcokitStatus::Ok);
        assert_eq!((g, w), (2, t_total));

        let mut fit = ptr::null_mut();
        assert_eq!(ecokit_var_fit(panel, 20, 100, false, &mut fit), EcokitStatus::Ok);
        assert_eq!(ecokit_var_n_members(fit), 2);
        let mut phi = [0.0; 4];
        assert_eq!(ecokit_var_phi(fit, phi.as_mut_ptr(), 4), EcokitStatus::Ok);
        assert!((phi[1] - 0.3).abs() < 0.1, "{phi:?}");
        assert!(phi[2].abs() < 0.1, "{phi:?}");
        let mut small = [0.0; 3];
        assert_eq!(ecokit_var_sigma(fit, small.as_mut_ptr(), 3), EcokitStatus::BufferTooSmall);

        let (mut mean, mut strength) = (0.0, 0.0);
        assert_eq!(ecokit_var_metrics(fit, EcokitNormalizer::Rows, &mut mean, &mut strength), EcokitStatus::Ok);
        assert!((mean - (phi[1] + phi[2])).abs() < 1e-12);
        assert!(strength >= mean.abs());

        let mut irf = ptr::null_mut();
        assert_eq!(ecokit_irf_bootstrap(panel, fit, 5, 200, 3, &mut irf), EcokitStatus::Ok);
        let (mut th, mut lo, mut hi) = ([0.0; 4], [0.0; 4], [0.0; 4]);
        assert_eq!(ecokit_irf_at(irf, 1, th.as_mut_ptr(), lo.as_mut_ptr(), hi.as_mut_ptr(), 4), EcokitStatus::Ok);
        assert_eq!(th, phi);
        assert!(lo[1] > 0.0 && hi[1] >= th[1]);
        assert_eq!(ecokit_irf_at(irf, 6, th.as_mut_ptr(), ptr::null_mut(), ptr::null_mut(), 4), EcokitStatus::InvalidInput);

        let name = CString::new("demo").unwrap();
        let mut dot = ptr::null_mut();
        assert_eq!(ecokit_network_dot(fit, irf, name.as_ptr(), 5, &mut dot), EcokitStatus::Ok);
        let text = CStr::from_ptr(dot).to_str().unwrap().to_owned();
        ecokit_string_free(dot);
        assert!(text.starts_with("digraph"));
        assert!(text.contains("\"g2\" -> \"g1\""), "{text}");

        ecokit_irf_free(irf);
        ecokit_var_free(fit);
        ecokit_panel_free(panel);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    unsafe {
        let mut panel = ptr::null_mut();
        assert_eq!(ecokit_panel_from_matrix(ptr::null(), 2, 3, ptr::null(), &mut panel), EcokitStatus::NullPointer);
        assert!(last_error().contains("sizes"));

        let bad = [1.0, -1.0, 1.0, 1.0];
        assert_eq!(ecokit_panel_from_matrix(bad.as_ptr(), 2, 2, ptr::null(), &mut panel), EcokitStatus::InvalidInput);
        assert!(panel.is_null());

        let path = CString::new("/nonexistent/panel.csv").unwrap();
        assert_eq!(ecokit_panel_read_csv(path.as_ptr(), &mut panel), EcokitStatus::Io);
        assert!(last_error().contains("/nonexistent/panel.csv"));

        let y = series(30);
        assert_eq!(ecokit_panel_from_matrix(y.as_ptr(), 2, 30, ptr::null(), &mut panel), EcokitStatus::Ok);
        let mut fit = ptr::null_mut();
        assert_eq!(ecokit_var_fit(panel, 30, 10, false, &mut fit), EcokitStatus::InvalidInput);
        assert!(fit.is_null());
        assert_eq!(ecokit_var_fit(ptr::null(), 5, 10, false, &mut fit), EcokitStatus::NullPointer);
        assert_eq!(ecokit_var_n_members(ptr::null()), 0);
        ecokit_panel_free(panel);
        ecokit_panel_free(ptr::null_mut());
        ecokit_string_free(ptr::null_mut());
    }
}

#[test]
fn crps_degenerates_to_absolute_error() {
    assert_eq!(ecokit_crps_normal(1.5, 0.5, 0.0), 1.0);
    assert!((ecokit_crps_normal(0.0, 0.0, 1.0) - 0.233_695_0).abs() < 1e-6);
}
