use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use sifcn::geom::{restore_rect, PixelGeometry, Point, RotatedRect};
use sifcn::loss::LossWeights;
use sifcn::maps::{synth_scene, SynthSpec};
use sifcn::net::{NetworkSpec, Sifcn};
use sifcn::trainer::{save_checkpoint, CheckpointMeta, TrainSpec, TrainState};
use sifcn_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(sifcn_last_error()) }.to_str().unwrap().to_string()
}

fn rect(cx: f64, cy: f64, w: f64, h: f64, theta: f64, score: f64) -> SifcnRect {
    SifcnRect::from(&RotatedRect::from_center(Point::new(cx, cy), w, h, theta).with_score(score))
}

#[test]
fn header_declares_every_export_and_status() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let src = std::fs::read_to_string(root.join("src/lib.rs")).unwrap();
    let header = std::fs::read_to_string(root.join("include/sifcn.h")).unwrap();
    let exports: Vec<&str> = src.split("extern \"C\" fn ").skip(1).map(|rest| rest.split('(').next().unwrap()).collect();
    assert!(exports.len() >= 9);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    for (name, value) in [
        ("SIFCN_OK", SIFCN_OK),
        ("SIFCN_ERR_NULL", SIFCN_ERR_NULL),
        ("SIFCN_ERR_INVALID", SIFCN_ERR_INVALID),
        ("SIFCN_ERR_IO", SIFCN_ERR_IO),
        ("SIFCN_ERR_BUFFER", SIFCN_ERR_BUFFER),
        ("SIFCN_ERR_PANIC", SIFCN_ERR_PANIC),
    ] {
        assert!(header.contains(&format!("#define {name} {value}\n")), "{name}");
    }
    assert_eq!(std::mem::size_of::<SifcnRect>(), 10 * 8);
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/sifcn.h");
    match Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"]).arg(&header).status() {
        Ok(status) => assert!(status.success(), "cc rejected the header"),
        Err(_) => eprintln!("no C compiler available; header syntax not checked"),
    }
}

#[test]
fn version_is_the_crate_version() {
    assert_eq!(unsafe { CStr::from_ptr(sifcn_version()) }.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn restore_rect_matches_the_library() {
    let d = [3.0, 7.5, 4.25, 2.0];
    let mut out = rect(0.0, 0.0, 1.0, 1.0, 0.0, 0.0);
    assert_eq!(unsafe { sifcn_restore_rect(10.5, 20.5, d.as_ptr(), 0.3, &mut out) }, SIFCN_OK);
    assert_eq!(last_error(), "");
    let expected = restore_rect(&PixelGeometry { point: Point::new(10.5, 20.5), distances: d, theta: 0.3 }).unwrap();
    assert_eq!(out, SifcnRect::from(&expected));
    assert_eq!(RotatedRect::from(&out), expected);

    assert_eq!(unsafe { sifcn_restore_rect(0.0, 0.0, ptr::null(), 0.0, &mut out) }, SIFCN_ERR_NULL);
    assert!(last_error().contains("distances"));
    let degenerate = [0.0, 0.0, 0.0, 0.0];
    assert_eq!(unsafe { sifcn_restore_rect(0.0, 0.0, degenerate.as_ptr(), 0.0, &mut out) }, SIFCN_ERR_INVALID);
    assert!(!last_error().is_empty());
}

#[test]
fn iou_and_nms() {
    let a = rect(20.0, 20.0, 10.0, 6.0, 0.2, 0.9);
    let b = rect(22.0, 20.0, 10.0, 6.0, 0.2, 0.8);
    let c = rect(50.0, 50.0, 8.0, 8.0, -0.4, 0.7);
    let mut v = -1.0;
    assert_eq!(unsafe { sifcn_rect_iou(&a, &a, &mut v) }, SIFCN_OK);
    assert!((v - 1.0).abs() < 1e-12);
    assert_eq!(unsafe { sifcn_rect_iou(&a, &c, &mut v) }, SIFCN_OK);
    assert_eq!(v, 0.0);
    assert_eq!(unsafe { sifcn_rect_iou(&a, ptr::null(), &mut v) }, SIFCN_ERR_NULL);

    let rects = [b, c, a];
    let mut keep = [usize::MAX; 3];
    let mut n = 0usize;
    assert_eq!(unsafe { sifcn_nms(rects.as_ptr(), 3, 0.2, keep.as_mut_ptr(), 3, &mut n) }, SIFCN_OK);
    assert_eq!(&keep[..n], &[2, 1]);
    assert_eq!(unsafe { sifcn_nms(rects.as_ptr(), 3, 0.2, keep.as_mut_ptr(), 1, &mut n) }, SIFCN_ERR_BUFFER);
    assert_eq!(n, 2);
    assert_eq!(unsafe { sifcn_nms(ptr::null(), 0, 0.2, ptr::null_mut(), 0, &mut n) }, SIFCN_OK);
    assert_eq!(n, 0);
    assert_eq!(unsafe { sifcn_nms(rects.as_ptr(), 3, 1.5, keep.as_mut_ptr(), 3, &mut n) }, SIFCN_ERR_INVALID);
}

fn write_model(dir: &Path) -> std::path::PathBuf {
    let spec = NetworkSpec { fusion_channels: Some([8, 8, 8]), ..NetworkSpec::default() };
    let net = Sifcn::new(spec.clone()).unwrap();
    let state = TrainState::<f64>::fresh(&net, 3);
    let meta = CheckpointMeta::new(&state, &spec, &TrainSpec::default(), &LossWeights::default());
    let path = dir.join("model.ckpt");
    save_checkpoint(&path, &state, &meta).unwrap();
    path
}

#[test]
fn model_lifecycle_and_detection() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(write_model(dir.path()).to_str().unwrap()).unwrap();
    let mut model: *mut SifcnModel = ptr::null_mut();
    assert_eq!(unsafe { sifcn_model_load(path.as_ptr(), &mut model) }, SIFCN_OK);
    assert!(!model.is_null());
    assert_eq!(unsafe { sifcn_model_input_size(model) }, 64);

    let image = synth_scene(5, &SynthSpec::default(), "x").unwrap().image;
    // An untrained model scores every pixel near 0.5: a low threshold yields
    // detections, which must be reported consistently through the buffer
    // protocol and be identical across calls.
    let mut n = 0usize;
    let status = unsafe { sifcn_model_detect(model, image.data().as_ptr(), 0.01, 0.2, ptr::null_mut(), 0, &mut n) };
    assert!(n > 0);
    assert_eq!(status, SIFCN_ERR_BUFFER);
    let mut first = vec![rect(0.0, 0.0, 1.0, 1.0, 0.0, 0.0); n];
    let mut second = first.clone();
    let mut m = 0usize;
    assert_eq!(unsafe { sifcn_model_detect(model, image.data().as_ptr(), 0.01, 0.2, first.as_mut_ptr(), n, &mut m) }, SIFCN_OK);
    assert_eq!(m, n);
    assert_eq!(unsafe { sifcn_model_detect(model, image.data().as_ptr(), 0.01, 0.2, second.as_mut_ptr(), n, &mut m) }, SIFCN_OK);
    assert_eq!(first, second);
    assert!(first.windows(2).all(|w| w[0].score >= w[1].score));

    assert_eq!(unsafe { sifcn_model_detect(model, image.data().as_ptr(), 1.5, 0.2, first.as_mut_ptr(), n, &mut m) }, SIFCN_ERR_INVALID);
    assert!(last_error().contains("score_threshold"));
    assert_eq!(unsafe { sifcn_model_detect(ptr::null(), image.data().as_ptr(), 0.5, 0.2, first.as_mut_ptr(), n, &mut m) }, SIFCN_ERR_NULL);
    unsafe { sifcn_model_free(model) };
    unsafe { sifcn_model_free(ptr::null_mut()) };
    assert_eq!(unsafe { sifcn_model_input_size(ptr::null()) }, 0);
}

#[test]
fn load_failures_leave_a_null_handle() {
    let mut model: *mut SifcnModel = ptr::dangling_mut::<SifcnModel>();
    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    assert_eq!(unsafe { sifcn_model_load(missing.as_ptr(), &mut model) }, SIFCN_ERR_IO);
    assert!(model.is_null());
    assert!(last_error().contains("nonexistent"));
    assert_eq!(unsafe { sifcn_model_load(ptr::null(), &mut model) }, SIFCN_ERR_NULL);
    assert_eq!(unsafe { sifcn_model_load(missing.as_ptr(), ptr::null_mut()) }, SIFCN_ERR_NULL);
}
