use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use synthdepth::checkpoint::{generator_archive, segnet_archive};
use synthdepth::gan::{build_generator, GeneratorConfig};
use synthdepth::segnet::{build_segnet, InitSpec, SegModelConfig};
use synthdepth_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = sd_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn metrics_match_the_library() {
    let pred = [1u8, 1, 0, 0, 1, 0];
    let truth = [1u8, 0, 0, 1, 1, 0];
    let mut c = SdConfusion::default();
    unsafe {
        assert_eq!(sd_confusion_accumulate(pred.as_ptr(), truth.as_ptr(), 6, &mut c), SdStatus::Ok);
    }
    assert_eq!(c, SdConfusion { tp: 2, fp: 1, fn_: 1, tn: 2 });
    let (mut ib, mut ig, mut acc) = (0.0, 0.0, 0.0);
    unsafe {
        assert_eq!(sd_metrics(&c, &mut ib, &mut ig, &mut acc), SdStatus::Ok);
    }
    assert_eq!(ib, 0.5);
    assert_eq!(ig, 0.5);
    assert_eq!(acc, 4.0 / 6.0);
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut c = SdConfusion::default();
    unsafe {
        assert_eq!(sd_confusion_accumulate(ptr::null(), ptr::null(), 1, &mut c), SdStatus::NullPointer);
    }
    assert!(last_error().contains("null"));

    let bad = [2u8];
    unsafe {
        assert_eq!(sd_confusion_accumulate(bad.as_ptr(), bad.as_ptr(), 1, &mut c), SdStatus::Label);
    }
    assert!(last_error().starts_with("LabelError"));

    let empty = SdConfusion::default();
    let (mut a, mut b, mut d) = (0.0, 0.0, 0.0);
    unsafe {
        assert_eq!(sd_metrics(&empty, &mut a, &mut b, &mut d), SdStatus::EmptyEval);
    }

    let mut g = ptr::null_mut();
    let missing = cstr(Path::new("/nonexistent/generator.ckpt"));
    unsafe {
        assert_eq!(sd_generator_load(missing.as_ptr(), &mut g), SdStatus::Io);
    }
    assert!(g.is_null());
}

#[test]
fn generator_round_trip_produces_bounded_depth() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.ckpt");
    let cfg = GeneratorConfig {
        depth_levels: 3,
        scale_factor: 0.125,
        ..GeneratorConfig::default()
    };
    let mut g = build_generator::<f32>(&cfg, 3).unwrap();
    generator_archive(&mut g, serde_json::Value::Null).save(&path).unwrap();

    let mut h = ptr::null_mut();
    let p = cstr(&path);
    unsafe {
        assert_eq!(sd_generator_load(p.as_ptr(), &mut h), SdStatus::Ok);
        assert_eq!(sd_generator_size_multiple(h), 8);
    }
    let (rows, cols) = (20, 24);
    let rgb = vec![0u8; 3 * rows * cols];
    let mut a = vec![f32::NAN; rows * cols];
    let mut b = vec![f32::NAN; rows * cols];
    unsafe {
        assert_eq!(sd_generator_infer(h, rgb.as_ptr(), rows, cols, 16, a.as_mut_ptr()), SdStatus::Ok);
        assert_eq!(sd_generator_infer(h, rgb.as_ptr(), rows, cols, 16, b.as_mut_ptr()), SdStatus::Ok);
    }
    assert_eq!(a, b);
    assert!(a.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
    unsafe {
        assert_eq!(sd_depth_to_meters(a.as_mut_ptr(), a.len(), 30.0), SdStatus::Ok);
    }
    assert!(a.iter().all(|v| (0.0..=30.0).contains(v)));
    unsafe {
        assert_eq!(sd_generator_infer(h, rgb.as_ptr(), 8, 8, 16, b.as_mut_ptr()), SdStatus::Shape);
        sd_generator_free(h);
        sd_generator_free(ptr::null_mut());
    }
}

#[test]
fn segmenter_predicts_one_class_per_pixel() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    let mut m = build_segnet::<f32>(&SegModelConfig::new(4, 0.0625), &InitSpec::Random { seed: 1 }).unwrap();
    segnet_archive(&mut m, serde_json::Value::Null).save(&path).unwrap();

    let mut h = ptr::null_mut();
    let p = cstr(&path);
    unsafe {
        assert_eq!(sd_segmenter_load(p.as_ptr(), &mut h), SdStatus::Ok);
        assert_eq!(sd_segmenter_in_channels(h), 4);
        assert_eq!(sd_segmenter_size_multiple(h), 32);
    }
    let rgb: Vec<u8> = (0..3 * 32 * 32).map(|i| (i % 251) as u8).collect();
    let depth = vec![0.0f32; 32 * 32];
    let mut out = vec![9u8; 32 * 32];
    unsafe {
        assert_eq!(
            sd_segmenter_predict(h, rgb.as_ptr(), depth.as_ptr(), 32, 32, out.as_mut_ptr()),
            SdStatus::Ok
        );
        assert_eq!(
            sd_segmenter_predict(h, rgb.as_ptr(), ptr::null(), 32, 32, out.as_mut_ptr()),
            SdStatus::NullPointer
        );
        sd_segmenter_free(h);
    }
    assert!(out.iter().all(|&c| c <= 1));
}

#[test]
fn pipeline_calls_report_missing_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let data = cstr(&dir.path().join("absent"));
    let out = cstr(&dir.path().join("out"));
    let mut cfg = ptr::null_mut();
    unsafe {
        assert_eq!(sd_config_toy(data.as_ptr(), out.as_ptr(), &mut cfg), SdStatus::Ok);
        assert_eq!(sd_config_set_seed(cfg, 7), SdStatus::Ok);
        assert_eq!(sd_prepare(cfg), SdStatus::Io);
        assert_eq!(sd_train_seg(cfg, SdArm::RgbOnly), SdStatus::Config);
        sd_config_free(cfg);
    }
    assert!(last_error().contains("prepare"));
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("synthdepth.h");
    assert!(header.is_file(), "header is generated by the build script");
    let Ok(status) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .status()
    else {
        eprintln!("no C compiler available; skipping");
        return;
    };
    assert!(status.success());
}
