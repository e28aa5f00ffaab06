use std::ffi::{CStr, CString};
use std::ptr;

use embref::fixtures::{GeneratorConfig, Vocabulary};
use embref::relation::Anchors;
use embref::runner::checkpoint::{save_checkpoint, TrainState};
use embref::runner::RunConfig;
use embref_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(embref_last_error()) }.to_string_lossy().into_owned()
}

fn scene(seed: u64, size: u32) -> *mut EmbrefScene {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { embref_scene_generate(seed, size, &mut s) }, EmbrefStatus::Ok);
    assert!(!s.is_null());
    s
}

#[test]
fn scene_accessors_round_trip() {
    let s = scene(7, 64);
    let (mut h, mut w) = (0, 0);
    unsafe {
        assert_eq!(embref_scene_size(s, &mut h, &mut w), EmbrefStatus::Ok);
        assert_eq!((h, w), (64, 64));

        let mut image = vec![0f32; 64 * 64 * 3];
        assert_eq!(embref_scene_copy_image(s, image.as_mut_ptr(), image.len()), EmbrefStatus::Ok);
        assert!(image.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(image.iter().any(|&v| v > 0.0));

        let mut n = 0;
        assert_eq!(embref_scene_token_count(s, &mut n), EmbrefStatus::Ok);
        assert!(n > 0);
        let mut tokens = vec![0u32; n];
        assert_eq!(embref_scene_copy_tokens(s, tokens.as_mut_ptr(), n), EmbrefStatus::Ok);
        let vocab = Vocabulary::default();
        assert!(tokens.iter().all(|&t| (t as usize) < vocab.len()));

        let mut needed = 0;
        assert_eq!(embref_scene_phrase(s, ptr::null_mut(), 0, &mut needed), EmbrefStatus::BufferTooSmall);
        let mut buf = vec![0 as std::ffi::c_char; needed];
        assert_eq!(embref_scene_phrase(s, buf.as_mut_ptr(), needed, ptr::null_mut()), EmbrefStatus::Ok);
        let phrase = CStr::from_ptr(buf.as_ptr()).to_str().unwrap();
        assert_eq!(phrase, vocab.decode(&tokens));

        let mut gt = EmbrefBox { x_min: 0.0, y_min: 0.0, x_max: 0.0, y_max: 0.0 };
        assert_eq!(embref_scene_gt_box(s, &mut gt), EmbrefStatus::Ok);
        assert!(gt.x_min < gt.x_max && gt.y_min < gt.y_max);
        assert!(gt.x_max <= 64.0 && gt.y_max <= 64.0);
        embref_scene_free(s);
    }
}

#[test]
fn same_seed_same_scene() {
    let (a, b) = (scene(3, 64), scene(3, 64));
    let mut ia = vec![0f32; 64 * 64 * 3];
    let mut ib = ia.clone();
    unsafe {
        embref_scene_copy_image(a, ia.as_mut_ptr(), ia.len());
        embref_scene_copy_image(b, ib.as_mut_ptr(), ib.len());
        embref_scene_free(a);
        embref_scene_free(b);
    }
    assert_eq!(ia, ib);
}

#[test]
fn errors_are_reported_with_messages() {
    unsafe {
        assert_eq!(embref_scene_generate(0, 64, ptr::null_mut()), EmbrefStatus::NullPointer);
        assert!(last_error().contains("null"));

        let mut s = ptr::null_mut();
        assert_eq!(embref_scene_generate(0, 0, &mut s), EmbrefStatus::InvalidArgument);
        assert!(!last_error().is_empty());

        let s = scene(1, 64);
        let mut small = vec![0f32; 10];
        assert_eq!(embref_scene_copy_image(s, small.as_mut_ptr(), small.len()), EmbrefStatus::BufferTooSmall);
        assert!(last_error().contains("12288"));
        embref_scene_free(s);

        let mut h = 0;
        assert_eq!(embref_scene_size(ptr::null(), &mut h, &mut h), EmbrefStatus::NullPointer);

        let path = CString::new("/nonexistent/checkpoint.safetensors").unwrap();
        let mut m = ptr::null_mut();
        assert_eq!(embref_model_load(path.as_ptr(), &mut m), EmbrefStatus::Io);
        assert!(m.is_null());

        // freeing null is a no-op
        embref_scene_free(ptr::null_mut());
        embref_model_free(ptr::null_mut());
    }
}

#[test]
fn iou_and_prec_match_hand_values() {
    let a = EmbrefBox { x_min: 0.0, y_min: 0.0, x_max: 10.0, y_max: 10.0 };
    let b = EmbrefBox { x_min: 5.0, y_min: 0.0, x_max: 15.0, y_max: 10.0 };
    assert!((embref_iou(a, b) - 50.0 / 150.0).abs() < 1e-12);
    assert_eq!(embref_iou(a, a), 1.0);

    let preds = [a, b, a, b];
    let gts = [a, a, b, b];
    let mut out = 0.0;
    unsafe {
        assert_eq!(embref_prec_at(preds.as_ptr(), gts.as_ptr(), 4, 0.25, &mut out), EmbrefStatus::Ok);
        assert_eq!(out, 100.0);
        assert_eq!(embref_prec_at(preds.as_ptr(), gts.as_ptr(), 4, 0.5, &mut out), EmbrefStatus::Ok);
        assert_eq!(out, 50.0);
        assert_eq!(embref_prec_at(preds.as_ptr(), gts.as_ptr(), 0, 0.5, &mut out), EmbrefStatus::InvalidArgument);
    }
}

#[test]
fn model_predicts_inside_the_image() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunConfig {
        image_size: 64,
        grid: 4,
        channels: 16,
        transformer_layers: 1,
        heads: 2,
        ..RunConfig::ci()
    };
    let vocab = GeneratorConfig::default().vocabulary;
    let cfg = run.model_config(vocab.len(), Anchors::default_for(64));
    let state = TrainState::fresh(run, cfg).unwrap();
    let path = dir.path().join("model.safetensors");
    save_checkpoint(&state, &path).unwrap();

    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(embref_model_load(c_path.as_ptr(), &mut m), EmbrefStatus::Ok, "{}", last_error());
        let mut size = 0;
        assert_eq!(embref_model_image_size(m, &mut size), EmbrefStatus::Ok);
        assert_eq!(size, 64);

        let s = scene(11, 64);
        let mut d = std::mem::zeroed::<EmbrefDetection>();
        assert_eq!(embref_model_predict(m, s, &mut d), EmbrefStatus::Ok, "{}", last_error());
        assert!(d.row < 4 && d.col < 4 && d.anchor < 3);
        assert!((0.0..=1.0).contains(&d.confidence));
        let stride = 16.0;
        let (cx, cy) = ((d.bbox.x_min + d.bbox.x_max) / 2.0, (d.bbox.y_min + d.bbox.y_max) / 2.0);
        assert!(cx >= d.col as f64 * stride && cx <= (d.col + 1) as f64 * stride);
        assert!(cy >= d.row as f64 * stride && cy <= (d.row + 1) as f64 * stride);

        // a scene at another resolution is rejected, not mispredicted
        let big = scene(11, 128);
        assert_eq!(embref_model_predict(m, big, &mut d), EmbrefStatus::Shape);
        embref_scene_free(big);
        embref_scene_free(s);
        embref_model_free(m);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/embref.h")).unwrap();
    for name in [
        "embref_last_error",
        "embref_scene_generate",
        "embref_scene_free",
        "embref_scene_copy_image",
        "embref_scene_phrase",
        "embref_iou",
        "embref_prec_at",
        "embref_model_load",
        "embref_model_predict",
        "EMBREF_STATUS_OK",
        "typedef struct EmbrefScene EmbrefScene",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(status) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include/embref.h"))
        .status()
    else {
        eprintln!("no C compiler on PATH; skipping");
        return;
    };
    assert!(status.success());
}
