use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use opama::rng;
use opama::ssm::{scan_seq, ScanDims};
use opama_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(opama_last_error()) }.to_str().unwrap().to_string()
}

const TINY: &str = "T = 50\nsample_steps = 2\nd_model = 8\nd_state = 2\nvcr_blocks = 1\nunet_width = 8\nd_time = 8\ngma_width = 4\n";

#[test]
fn version_and_error_slot() {
    let v = unsafe { CStr::from_ptr(opama_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    let mut a = 0.0;
    assert_eq!(opama_zoh(-1.0, 1.0, &mut a, ptr::null_mut()), OpamaStatus::NullArgument);
    assert!(last_error().contains("b_factor"));
    let mut k = 0.0;
    assert_eq!(opama_zoh(-1.0, 1.0, &mut a, &mut k), OpamaStatus::Ok);
    assert_eq!(last_error(), "");
    assert_eq!(opama_zoh(-1.0, 0.0, &mut a, &mut k), OpamaStatus::Contract);
}

#[test]
fn zoh_closed_forms() {
    let (mut a, mut k) = (0.0, 0.0);
    assert_eq!(opama_zoh(1.0, 2f64.ln(), &mut a, &mut k), OpamaStatus::Ok);
    assert!((a - 2.0).abs() <= 1e-12 && (k - 1.0).abs() <= 1e-12);
    assert_eq!(opama_zoh(-1.0, 1.0, &mut a, &mut k), OpamaStatus::Ok);
    let e = (-1f64).exp();
    assert!((a - e).abs() <= 1e-12 && (k - (1.0 - e)).abs() <= 1e-12);
}

#[test]
fn scan_matches_reference_in_both_forms() {
    let (l, d, n) = (300, 3, 4);
    let mut r = rng::seeded(1);
    let a = rng::uniform_tensor(&mut r, &[l * d * n], 0.5, 0.99);
    let b = rng::normal_tensor(&mut r, &[l * d * n]);
    let c = rng::normal_tensor(&mut r, &[l * n]);
    let x = rng::normal_tensor(&mut r, &[l * d]);
    let h0 = rng::normal_tensor(&mut r, &[d * n]);
    let (mut want_y, mut want_h) = (vec![0.0; l * d], vec![0.0; d * n]);
    scan_seq(ScanDims { l, d, n }, a.data(), b.data(), c.data(), x.data(), Some(h0.data()), &mut want_y, &mut want_h);
    for parallel in [0, 1] {
        let (mut y, mut h) = (vec![0.0; l * d], vec![0.0; d * n]);
        let s = opama_scan(
            l,
            d,
            n,
            a.data().as_ptr(),
            b.data().as_ptr(),
            c.data().as_ptr(),
            x.data().as_ptr(),
            h0.data().as_ptr(),
            parallel,
            y.as_mut_ptr(),
            h.as_mut_ptr(),
        );
        assert_eq!(s, OpamaStatus::Ok);
        let err = y.iter().zip(&want_y).chain(h.iter().zip(&want_h)).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-10, "parallel={parallel}: {err}");
    }
    let mut y = vec![0.0; l * d];
    let s = opama_scan(
        l,
        d,
        n,
        a.data().as_ptr(),
        ptr::null(),
        c.data().as_ptr(),
        x.data().as_ptr(),
        ptr::null(),
        0,
        y.as_mut_ptr(),
        ptr::null_mut(),
    );
    assert_eq!(s, OpamaStatus::NullArgument);
    assert!(last_error().contains("b_bar"));
}

#[test]
fn equirect_handles_round_trip() {
    let (w, h) = (16, 8);
    let rgb: Vec<f64> = (0..w * h * 3).map(|i| (i % 7) as f64 / 7.0).collect();
    let mask: Vec<u8> = (0..w * h).map(|i| (i % 3 == 0) as u8).collect();
    let mut img = ptr::null_mut();
    assert_eq!(opama_equirect_new(w, h, rgb.as_ptr(), mask.as_ptr(), &mut img), OpamaStatus::Ok);
    let (mut gw, mut gh, mut unknown) = (0, 0, 0);
    assert_eq!(opama_equirect_size(img, &mut gw, &mut gh), OpamaStatus::Ok);
    assert_eq!((gw, gh), (w, h));
    assert_eq!(opama_equirect_unknown_count(img, &mut unknown), OpamaStatus::Ok);
    assert_eq!(unknown, mask.iter().filter(|&&m| m == 0).count());
    let mut back = vec![0.0; w * h * 3];
    assert_eq!(opama_equirect_pixels(img, back.as_mut_ptr(), back.len()), OpamaStatus::Ok);
    assert_eq!(back, rgb);
    let mut m = vec![9u8; w * h];
    assert_eq!(opama_equirect_mask(img, m.as_mut_ptr(), m.len()), OpamaStatus::Ok);
    assert_eq!(m, mask);
    assert_eq!(opama_equirect_pixels(img, back.as_mut_ptr(), 5), OpamaStatus::Dimension);
    opama_equirect_free(img);
    opama_equirect_free(ptr::null_mut());

    let mut bad = ptr::null_mut();
    assert_eq!(opama_equirect_new(15, 8, rgb.as_ptr(), ptr::null(), &mut bad), OpamaStatus::Contract, "{}", last_error());
    assert!(bad.is_null());
}

#[test]
fn nfov_of_constant_panorama() {
    let (w, h) = (64, 32);
    let rgb: Vec<f64> = (0..w * h * 3).map(|i| [0.1, 0.5, 0.9][i % 3]).collect();
    let mut img = ptr::null_mut();
    assert_eq!(opama_equirect_new(w, h, rgb.as_ptr(), ptr::null(), &mut img), OpamaStatus::Ok);
    let size = 16;
    let mut view = vec![0.0; size * size * 3];
    let mut mask = vec![0u8; size * size];
    assert_eq!(opama_extract_nfov(img, 0.0, 0.0, 90.0, size, view.as_mut_ptr(), mask.as_mut_ptr()), OpamaStatus::Ok);
    for (i, v) in view.iter().enumerate() {
        assert!((v - [0.1, 0.5, 0.9][i % 3]).abs() < 1e-12);
    }
    assert!(mask.iter().all(|&m| m == 1));
    assert_eq!(opama_extract_nfov(img, 180.0, 0.0, 90.0, size, view.as_mut_ptr(), ptr::null_mut()), OpamaStatus::Contract);
    opama_equirect_free(img);
}

#[test]
fn files_and_configs_report_their_failures() {
    let path = CString::new("/nonexistent/p.png").unwrap();
    let mut img = ptr::null_mut();
    assert_eq!(opama_equirect_load(path.as_ptr(), ptr::null(), &mut img), OpamaStatus::Io);
    assert!(!last_error().is_empty());
    let text = CString::new("T = \"x\"").unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(opama_config_parse(text.as_ptr(), &mut cfg), OpamaStatus::Config);
    assert_eq!(opama_config_parse(ptr::null(), &mut cfg), OpamaStatus::NullArgument);
}

#[test]
fn generate_through_the_abi() {
    let text = CString::new(TINY).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(opama_config_parse(text.as_ptr(), &mut cfg), OpamaStatus::Ok);
    assert_eq!(opama_config_set_seed(cfg, 7), OpamaStatus::Ok);
    let mut models = ptr::null_mut();
    assert_eq!(opama_models_new(cfg, ptr::null(), &mut models), OpamaStatus::Ok, "{}", last_error());
    let prompt = CString::new("a dusk scene").unwrap();
    let mut pano = ptr::null_mut();
    let s = opama_generate(models, cfg, ptr::null(), 0, 0.0, 0.0, prompt.as_ptr(), &mut pano);
    assert_eq!(s, OpamaStatus::Ok, "{}", last_error());
    let mut unknown = 1;
    assert_eq!(opama_equirect_unknown_count(pano, &mut unknown), OpamaStatus::Ok);
    assert_eq!(unknown, 0);

    let dir = tempfile::tempdir().unwrap();
    let out = CString::new(dir.path().join("p.png").to_str().unwrap()).unwrap();
    let mask = CString::new(dir.path().join("m.png").to_str().unwrap()).unwrap();
    assert_eq!(opama_equirect_save(pano, out.as_ptr(), mask.as_ptr()), OpamaStatus::Ok);
    let mut again = ptr::null_mut();
    assert_eq!(opama_equirect_load(out.as_ptr(), mask.as_ptr(), &mut again), OpamaStatus::Ok);
    opama_equirect_free(again);

    let mut none = ptr::null_mut();
    assert_eq!(opama_generate(models, cfg, ptr::null(), 0, 0.0, 0.0, ptr::null(), &mut none), OpamaStatus::Contract);
    assert!(none.is_null());
    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    let mut m2 = ptr::null_mut();
    assert_eq!(opama_models_new(cfg, missing.as_ptr(), &mut m2), OpamaStatus::Io);
    opama_equirect_free(pano);
    opama_models_free(models);
    opama_config_free(cfg);
}

#[test]
fn header_declares_every_export_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/opama.h");
    let text = std::fs::read_to_string(&header).unwrap();
    let src = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = src.split("pub extern \"C\" fn ").skip(1).map(|s| s.split('(').next().unwrap()).collect();
    assert!(exports.len() >= 18);
    for f in &exports {
        assert!(text.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(text.contains("OPAMA_STATUS_NULL_ARGUMENT = 1"));
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let status = Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang])
            .arg(&header)
            .status()
            .unwrap_or_else(|e| panic!("{compiler}: {e}"));
        assert!(status.success(), "{compiler} rejects the header");
    }
}
