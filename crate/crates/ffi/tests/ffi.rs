use std::ffi::{CStr, CString};
use std::ptr;

use bifseg::grid::{BoundingBox, Grid2D, ScribbleSet};
use bifseg::nn::{save_model, ArchConfig, NormStats, SegmenterModel};
use bifseg::pipeline::{init_segment, RefineConfig, SessionConfig};
use bifseg_ffi::*;

fn image() -> Grid2D {
    Grid2D::from_fn(24, 20, |x, y| if (6..16).contains(&x) && (5..14).contains(&y) { 0.8 } else { 0.2 }).unwrap()
}

fn last_error() -> String {
    let p = bifseg_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

struct Handles {
    _dir: tempfile::TempDir,
    model: *mut BifsegModel,
    rust_model: SegmenterModel,
}

fn load() -> Handles {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bifm");
    let rust_model = SegmenterModel::init(&ArchConfig::with_widths(4, 1, 4), NormStats { mean: 0.4, std: 0.3 }, 9).unwrap();
    save_model(&path, &rust_model).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { bifseg_model_load(c.as_ptr(), &mut model) }, BifsegStatus::Ok);
    assert!(!model.is_null());
    Handles { _dir: dir, model, rust_model }
}

unsafe fn create(model: *const BifsegModel, bbox: [usize; 4]) -> (BifsegStatus, *mut BifsegSession) {
    let img = image();
    let mut s = ptr::null_mut();
    let [x0, y0, x1, y1] = bbox;
    let st = bifseg_session_create(model, img.data().as_ptr(), 24, 20, x0, y0, x1, y1, 16, &mut s);
    (st, s)
}

#[test]
fn session_lifecycle_matches_the_library() {
    let h = load();
    unsafe {
        let (st, s) = create(h.model, [3, 2, 19, 16]);
        assert_eq!(st, BifsegStatus::Ok);
        let (mut w, mut ht) = (0, 0);
        assert_eq!(bifseg_session_image_size(s, &mut w, &mut ht), BifsegStatus::Ok);
        assert_eq!((w, ht), (24, 20));
        assert_eq!(bifseg_session_crop_size(s, &mut w, &mut ht), BifsegStatus::Ok);
        assert_eq!((w, ht), (17, 15));

        let fg: [u32; 4] = [8, 7, 9, 7];
        let bg: [u32; 2] = [0, 0];
        let cfg = CString::new(r#"{"outer_iters": 2}"#).unwrap();
        assert_eq!(bifseg_session_refine(s, fg.as_ptr(), 2, bg.as_ptr(), 1, cfg.as_ptr()), BifsegStatus::Ok);
        assert_eq!(bifseg_session_rounds(s), 2);

        let mut mask = vec![9u8; 24 * 20];
        assert_eq!(bifseg_session_mask(s, mask.as_mut_ptr(), mask.len()), BifsegStatus::Ok);

        let model = std::sync::Arc::new(h.rust_model.clone());
        let mut direct = init_segment(model, &image(), BoundingBox::new(3, 2, 19, 16).unwrap(), &SessionConfig { target_min: 16, min_box_side: 3 }).unwrap();
        let scr = ScribbleSet::from_points(17, 15, &[(8, 7), (9, 7)], &[(0, 0)]).unwrap();
        direct.refine(&scr, &RefineConfig { outer_iters: 2, ..Default::default() }).unwrap();
        assert_eq!(mask, direct.final_labels().labels());

        let diag = bifseg_session_diagnostics(s);
        let text = CStr::from_ptr(diag).to_str().unwrap().to_owned();
        bifseg_string_free(diag);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["history"].as_array().unwrap().len(), 2);

        bifseg_session_free(s);
        bifseg_model_free(h.model);
    }
}

#[test]
fn errors_are_reported_with_status_and_message() {
    let h = load();
    unsafe {
        let (st, s) = create(h.model, [3, 2, 40, 16]);
        assert_eq!(st, BifsegStatus::InvalidArgument);
        assert!(s.is_null());
        assert!(last_error().contains("invalid bounding box"));

        let (_, s) = create(h.model, [3, 2, 19, 16]);
        let fg: [u32; 2] = [1, 1];
        assert_eq!(bifseg_session_refine(s, fg.as_ptr(), 1, fg.as_ptr(), 1, ptr::null()), BifsegStatus::ScribbleConflict);
        assert!(last_error().contains("(1, 1)"));
        assert_eq!(bifseg_session_rounds(s), 1);

        let bad = CString::new(r#"{"t0": 0.9}"#).unwrap();
        assert_eq!(bifseg_session_refine(s, ptr::null(), 0, ptr::null(), 0, bad.as_ptr()), BifsegStatus::InvalidArgument);
        let fg_out: [u32; 2] = [17, 0];
        assert_eq!(bifseg_session_refine(s, fg_out.as_ptr(), 1, ptr::null(), 0, ptr::null()), BifsegStatus::InvalidArgument);

        let mut small = [0u8; 4];
        assert_eq!(bifseg_session_mask(s, small.as_mut_ptr(), small.len()), BifsegStatus::BufferTooSmall);
        assert_eq!(bifseg_session_refine(ptr::null_mut(), ptr::null(), 0, ptr::null(), 0, ptr::null()), BifsegStatus::NullPointer);
        assert_eq!(bifseg_session_refine(s, ptr::null(), 3, ptr::null(), 0, ptr::null()), BifsegStatus::NullPointer);

        let missing = CString::new("/nonexistent/model.bifm").unwrap();
        let mut m = ptr::null_mut();
        assert_eq!(bifseg_model_load(missing.as_ptr(), &mut m), BifsegStatus::Io);
        assert!(m.is_null());

        // Sessions outlive the model handle they came from.
        bifseg_model_free(h.model);
        assert_eq!(bifseg_session_refine(s, ptr::null(), 0, ptr::null(), 0, ptr::null()), BifsegStatus::Ok);
        bifseg_session_free(s);
        bifseg_session_free(ptr::null_mut());
        bifseg_model_free(ptr::null_mut());
    }
    assert!(!unsafe { CStr::from_ptr(bifseg_version()) }.to_str().unwrap().is_empty());
}

#[test]
fn header_is_generated_and_compiles_as_c() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/bifseg.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["bifseg_model_load", "bifseg_session_create", "bifseg_session_refine", "bifseg_session_mask", "bifseg_last_error"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.c");
    std::fs::write(&src, "#include \"bifseg.h\"\nint main(void) { return bifseg_version() == 0; }\n").unwrap();
    let out = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn which_cc() -> Result<String, ()> {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    std::process::Command::new(&cc).arg("--version").output().map(|_| cc).map_err(|_| ())
}
