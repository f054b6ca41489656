use std::ffi::{CStr, CString};
use std::ptr;

use penseg_ffi::*;

fn last_error() -> String {
    let p = penseg_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn ellipse(cx: f64, cy: f64, a: f64, b: f64, theta: f64) -> PensegEllipse {
    PensegEllipse {
        cx,
        cy,
        a,
        b,
        theta,
        head_sign: 1,
        depth: 0,
    }
}

fn label_image(w: usize, h: usize, kind: PensegLabelKind, px: &[u16]) -> *mut PensegLabelImage {
    let mut out = ptr::null_mut();
    let s = unsafe { penseg_label_image_new(w, h, kind, px.as_ptr(), px.len(), &mut out) };
    assert_eq!(s, PensegStatus::Ok);
    out
}

#[test]
fn fit_recovers_sampled_ellipse() {
    let (cx, cy, a, b, t) = (20.0, 15.0, 9.0, 4.0, 0.6_f64);
    let (xs, ys): (Vec<f64>, Vec<f64>) = (0..40)
        .map(|k| {
            let s = k as f64 * std::f64::consts::TAU / 40.0;
            let (u, v) = (a * s.cos(), b * s.sin());
            (cx + u * t.cos() - v * t.sin(), cy + u * t.sin() + v * t.cos())
        })
        .unzip();
    let mut e = ellipse(0.0, 0.0, 1.0, 1.0, 0.0);
    let s = unsafe { penseg_fit_ellipse(xs.as_ptr(), ys.as_ptr(), xs.len(), &mut e) };
    assert_eq!(s, PensegStatus::Ok);
    for (got, want) in [(e.cx, cx), (e.cy, cy), (e.a, a), (e.b, b), (e.theta, t)] {
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
    }
    assert_eq!(e.head_sign, 0);
}

#[test]
fn fit_with_too_few_points_is_numerical() {
    let xs = [0.0, 1.0, 2.0];
    let mut e = ellipse(0.0, 0.0, 1.0, 1.0, 0.0);
    let s = unsafe { penseg_fit_ellipse(xs.as_ptr(), xs.as_ptr(), 3, &mut e) };
    assert_eq!(s, PensegStatus::NumericalError);
    assert!(!last_error().is_empty());
}

#[test]
fn iou_of_identical_and_invalid_ellipses() {
    let e = ellipse(16.0, 16.0, 8.0, 5.0, 0.3);
    let mut v = 0.0;
    assert_eq!(unsafe { penseg_ellipse_iou(&e, &e, 32, 32, &mut v) }, PensegStatus::Ok);
    assert_eq!(v, 1.0);

    let bad = ellipse(16.0, 16.0, 3.0, 5.0, 0.3);
    assert_eq!(
        unsafe { penseg_ellipse_iou(&e, &bad, 32, 32, &mut v) },
        PensegStatus::InvalidArgument
    );
    assert_eq!(
        unsafe { penseg_ellipse_iou(ptr::null(), &e, 32, 32, &mut v) },
        PensegStatus::NullPointer
    );
    assert!(last_error().contains("e1"));
}

#[test]
fn render_extract_and_match() {
    let mut es = [ellipse(12.0, 12.0, 8.0, 4.0, 0.2), ellipse(40.0, 30.0, 10.0, 5.0, 1.9)];
    es[1].depth = 1;
    let mut inst = ptr::null_mut();
    let s = unsafe { penseg_render_instance(64, 48, es.as_ptr(), es.len(), &mut inst) };
    assert_eq!(s, PensegStatus::Ok);
    unsafe {
        assert_eq!(penseg_label_image_width(inst), 64);
        assert_eq!(penseg_label_image_height(inst), 48);
    }

    let mut count = 0usize;
    let mut small = [ellipse(0.0, 0.0, 1.0, 1.0, 0.0); 1];
    let s = unsafe { penseg_extract_ellipses(inst, 5, small.as_mut_ptr(), 1, &mut count) };
    assert_eq!(s, PensegStatus::BufferTooSmall);
    assert_eq!(count, 2);
    let mut buf = [ellipse(0.0, 0.0, 1.0, 1.0, 0.0); 4];
    let s = unsafe { penseg_extract_ellipses(inst, 5, buf.as_mut_ptr(), 4, &mut count) };
    assert_eq!(s, PensegStatus::Ok);
    assert_eq!(count, 2);
    assert!((buf[0].cx - 12.0).abs() < 0.5 && (buf[1].cy - 30.0).abs() < 0.5);

    let mut m = PensegMatchCounts::default();
    assert_eq!(unsafe { penseg_match_segments(inst, inst, &mut m) }, PensegStatus::Ok);
    assert_eq!((m.tp, m.fp, m.fn_), (2, 0, 0));
    assert_eq!((m.pq, m.f1), (1.0, 1.0));

    let mut px = vec![0u16; 64 * 48];
    let s = unsafe { penseg_label_image_pixels(inst, px.as_mut_ptr(), 10) };
    assert_eq!(s, PensegStatus::BufferTooSmall);
    let s = unsafe { penseg_label_image_pixels(inst, px.as_mut_ptr(), px.len()) };
    assert_eq!(s, PensegStatus::Ok);
    assert_eq!(px[12 * 64 + 12], 1);
    unsafe { penseg_label_image_free(inst) };
}

#[test]
fn label_image_rejects_bad_sizes_and_classes() {
    let mut out = ptr::null_mut();
    let px = [0u16, 1, 2];
    let s = unsafe { penseg_label_image_new(2, 2, PensegLabelKind::Binary, px.as_ptr(), 3, &mut out) };
    assert_ne!(s, PensegStatus::Ok);
    assert!(out.is_null());
    let px = [0u16, 1, 2, 0];
    let s = unsafe { penseg_label_image_new(2, 2, PensegLabelKind::Binary, px.as_ptr(), 4, &mut out) };
    assert_ne!(s, PensegStatus::Ok);
    unsafe { penseg_label_image_free(ptr::null_mut()) };
}

#[test]
fn loss_is_zero_for_tight_separated_clusters() {
    // two instances embedded at 0 and 10 on the first axis, background excluded
    let inst = label_image(4, 1, PensegLabelKind::Instance, &[1, 1, 2, 2]);
    let vals = [0.0, 0.0, 0.0, 0.0, 10.0, 0.0, 10.0, 0.0];
    let mut field = ptr::null_mut();
    let s = unsafe { penseg_embedding_new(4, 1, 2, vals.as_ptr(), vals.len(), &mut field) };
    assert_eq!(s, PensegStatus::Ok);
    let mut l = PensegLoss::default();
    let s = unsafe { penseg_discriminative_loss(field, inst, ptr::null(), false, &mut l) };
    assert_eq!(s, PensegStatus::Ok);
    assert_eq!((l.variance_term, l.distance_term), (0.0, 0.0));
    assert!((l.regularization_term - 5.0).abs() < 1e-12);

    let mut mask = label_image(4, 1, PensegLabelKind::Binary, &[1, 1, 1, 1]);
    let mut clusters = ptr::null_mut();
    let s = unsafe { penseg_cluster_masked(field, mask, 2, 1, &mut clusters) };
    assert_eq!(s, PensegStatus::Ok);
    let mut px = [0u16; 4];
    unsafe { penseg_label_image_pixels(clusters, px.as_mut_ptr(), 4) };
    assert_eq!(px[0], px[1]);
    assert_eq!(px[2], px[3]);
    assert_ne!(px[0], px[2]);
    unsafe {
        penseg_label_image_free(clusters);
        penseg_label_image_free(mask);
        penseg_label_image_free(inst);
        penseg_embedding_free(field);
    }
    mask = ptr::null_mut();
    let s = unsafe { penseg_cluster_masked(ptr::null(), mask, 2, 1, &mut clusters) };
    assert_eq!(s, PensegStatus::NullPointer);
}

#[test]
fn hdbscan_two_groups() {
    let mut data = Vec::new();
    for k in 0..10 {
        data.extend([k as f64 * 0.01, 0.0]);
    }
    for k in 0..10 {
        data.extend([5.0 + k as f64 * 0.01, 5.0]);
    }
    let mut labels = vec![7i32; 20];
    let mut n = 0usize;
    let s = unsafe { penseg_hdbscan(data.as_ptr(), 20, 2, 5, 5, labels.as_mut_ptr(), &mut n) };
    assert_eq!(s, PensegStatus::Ok);
    assert_eq!(n, 2);
    assert!(labels[..10].iter().all(|&l| l == labels[0]));
    assert!(labels[10..].iter().all(|&l| l == labels[10]));
    assert_ne!(labels[0], labels[10]);

    let s = unsafe { penseg_hdbscan(data.as_ptr(), 20, 2, 1, 5, labels.as_mut_ptr(), &mut n) };
    assert_eq!(s, PensegStatus::InvalidArgument);
}

#[test]
fn dataset_round_trip_through_paths() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let spec = penseg::scenegen::SceneSpec {
        width: 48,
        height: 48,
        n_animals: 2,
        a_range: (8.0, 10.0),
        b_range: (4.0, 5.0),
        max_overlap: 0.0,
        noise_sigma: 0.0,
        ..Default::default()
    };
    penseg::scenegen::generate_suite(&[spec], root.join("data")).unwrap();

    let c = |s: &std::path::Path| CString::new(s.to_str().unwrap()).unwrap();
    let (data, pred, rep) = (c(&root.join("data")), c(&root.join("pred")), c(&root.join("rep")));
    let mut failures = 99usize;
    let s = unsafe {
        penseg_segment_dataset(data.as_ptr(), pred.as_ptr(), ptr::null(), PensegMode::Categorical, &mut failures)
    };
    assert_eq!(s, PensegStatus::Ok, "{}", last_error());
    assert_eq!(failures, 0);
    let (mut pq, mut f1) = (0.0, 0.0);
    let s = unsafe {
        penseg_evaluate_dataset(pred.as_ptr(), data.as_ptr(), ptr::null(), rep.as_ptr(), &mut pq, &mut f1)
    };
    assert_eq!(s, PensegStatus::Ok, "{}", last_error());
    assert!(pq > 0.9 && f1 == 1.0, "pq {pq} f1 {f1}");
    assert!(root.join("rep/aggregate.json").exists());

    let bad = CString::new(r#"{"no_such_field": 1}"#).unwrap();
    let s = unsafe {
        penseg_segment_dataset(data.as_ptr(), pred.as_ptr(), bad.as_ptr(), PensegMode::Combined, ptr::null_mut())
    };
    assert_eq!(s, PensegStatus::InvalidArgument);
    let missing = c(&root.join("nope"));
    let s = unsafe {
        penseg_segment_dataset(missing.as_ptr(), pred.as_ptr(), ptr::null(), PensegMode::Combined, ptr::null_mut())
    };
    assert_eq!(s, PensegStatus::DataError);
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/penseg.h");
    let src = include_str!("../src/lib.rs");
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .filter_map(|rest| rest.split('(').next())
        .collect();
    assert!(exports.len() >= 15);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
}
