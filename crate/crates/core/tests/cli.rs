use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use bifseg::cli::{parse_scribbles, EXIT_DATA, EXIT_NUMERIC, EXIT_USAGE};
use bifseg::eval::Manifest;
use bifseg::io::load_mask;
use bifseg::nn::load_model;
use bifseg::rle::{decode, RleMask, ScribbleRuns};
use bifseg::service::{router, AppState, ServiceConfig};
use bifseg::pipeline::SessionConfig;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const SPEC: &str = "seed = 5\nimage_size = 40\ntrain_per_class = 4\ntest_per_class = 3\n";
const TRAIN: &str = "target_min = 32\n[arch]\nhead_hidden = 4\nblocks = [\n  { kernel_size = 3, channels = 4, dilation = 1 },\n  { kernel_size = 3, channels = 4, dilation = 2 },\n]\n[train]\nlearning_rate = 0.01\nmax_iterations = 40\nlog_every = 10\n";

fn bifseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bifseg")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = bifseg(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    model: PathBuf,
    manifest: PathBuf,
}

/// A generated dataset and a model trained on it from the manifest.
fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    fs::write(root.join("spec.toml"), SPEC).unwrap();
    fs::write(root.join("train.toml"), TRAIN).unwrap();
    let data = root.join("data");
    ok(&["generate", "--spec", p(&root.join("spec.toml")), "--out", p(&data)]);
    let model = root.join("model.bifm");
    let manifest = data.join("manifest.json");
    ok(&["train", "--data", p(&manifest), "--config", p(&root.join("train.toml")), "--out", p(&model), "--seed", "4"]);
    Fixture { _dir: dir, root, model, manifest }
}

fn first_test_case(f: &Fixture) -> (PathBuf, PathBuf, String) {
    let m = Manifest::load(&f.manifest).unwrap();
    let e = m.split("test").next().unwrap();
    let b = e.instances[0].bbox.unwrap();
    (m.resolve(&e.image), m.resolve(&e.label), format!("{},{},{},{}", b.x_min, b.y_min, b.x_max, b.y_max))
}

#[test]
fn generate_then_train_is_reproducible() {
    let f = fixture();
    let m = Manifest::load(&f.manifest).unwrap();
    assert_eq!(m.split("train").count(), 8);
    assert_eq!(m.split("test").count(), 3);
    assert!(m.split("test").all(|e| e.instances[0].class == "rectangle" && e.instances[0].bbox.is_some()));
    let curve = fs::read_to_string(f.model.with_extension("loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 4);

    let again = f.root.join("again.bifm");
    ok(&["train", "--data", p(&f.manifest), "--config", p(&f.root.join("train.toml")), "--out", p(&again), "--seed", "4"]);
    assert_eq!(fs::read(&f.model).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn segment_modes() {
    let f = fixture();
    let (image, label, bbox) = first_test_case(&f);
    let out = |name: &str| f.root.join(name);
    let base = ["segment", "--model", p(&f.model), "--image", p(&image), "--box", &bbox, "--target-min", "32"];

    ok(&[&base[..], &["--out", p(&out("init.png"))]].concat());
    ok(&[&base[..], &["--unsupervised-refine", "--out", p(&out("unsup.png"))]].concat());
    fs::write(out("empty.txt"), "# nothing\n").unwrap();
    ok(&[&base[..], &["--scribbles", p(&out("empty.txt")), "--out", p(&out("empty.png"))]].concat());
    assert_eq!(load_mask(out("unsup.png")).unwrap(), load_mask(out("empty.png")).unwrap());

    fs::write(out("scr.txt"), "fg 10 10\nfg 11 10\nbg 0 0\n").unwrap();
    let truth = out("truth.png");
    let (w, h, values) = bifseg::io::load_label_values(&label).unwrap();
    bifseg::io::save_mask(&truth, &bifseg::grid::LabelMap::binarize(w, h, &values, 1).unwrap()).unwrap();
    let stdout = ok(&[
        &base[..],
        &["--scribbles", p(&out("scr.txt")), "--truth", p(&truth), "--diagnostics", p(&out("d.json")), "--out", p(&out("sup.png"))],
    ]
    .concat());
    let d: f64 = stdout.trim().strip_prefix("dice ").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&d));
    let diag: Value = serde_json::from_slice(&fs::read(out("d.json")).unwrap()).unwrap();
    assert_eq!(diag["history"].as_array().unwrap().len(), 2);
    assert_eq!(diag["scribbles"], 3);

    let rounds = out("rounds");
    ok(&[
        "refine", "--model", p(&f.model), "--image", p(&image), "--box", &bbox, "--target-min", "32",
        "--scribbles", p(&out("empty.txt")), "--scribbles", p(&out("scr.txt")), "--out", p(&rounds),
    ]);
    assert_eq!(load_mask(rounds.join("round_0.png")).unwrap(), load_mask(out("init.png")).unwrap());
    assert_eq!(load_mask(rounds.join("round_1.png")).unwrap(), load_mask(out("unsup.png")).unwrap());
    assert!(rounds.join("round_2.png").exists());
}

#[test]
fn benchmark_is_byte_reproducible_and_reports() {
    let f = fixture();
    let cfg = f.root.join("ablation.toml");
    fs::write(&cfg, "rounds = 1\nbudget = 10\n[session]\ntarget_min = 32\n[refine]\nouter_iters = 2\ninner_iters = 5\n").unwrap();
    let run = |out: &Path| ok(&["benchmark", "--data", p(&f.manifest), "--model", p(&f.model), "--config", p(&cfg), "--out", p(out), "--keep-masks"]);
    let (a, b) = (f.root.join("a"), f.root.join("b"));
    run(&a);
    run(&b);
    for name in ["report.json", "report.csv"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    assert_eq!(fs::read_dir(a.join("masks")).unwrap().count(), 3 * 6);
    let timing = fs::read_to_string(a.join("timing.csv")).unwrap();
    assert_eq!(timing.lines().count(), 1 + 6);

    let table = ok(&["report", p(&a)]);
    assert!(table.contains("bifseg_supervised") && table.contains("machine time"));
    let md = ok(&["report", p(&a.join("report.json")), "--format", "markdown"]);
    assert!(md.starts_with("| method |"));

    // The in-memory synthetic path sees the same pixels and boxes as the files.
    let c = f.root.join("c");
    ok(&["benchmark", "--spec", p(&f.root.join("spec.toml")), "--model", p(&f.model), "--config", p(&cfg), "--out", p(&c)]);
    let summary = |dir: &Path| serde_json::from_slice::<Value>(&fs::read(dir.join("report.json")).unwrap()).unwrap()["summary"].clone();
    assert_eq!(summary(&a), summary(&c));
}

#[test]
fn cli_and_service_agree() {
    let f = fixture();
    let (image, _, bbox) = first_test_case(&f);
    let scr = f.root.join("scr.txt");
    fs::write(&scr, "fg 9 9\nfg 10 9\nfg 11 9\nbg 1 1\n").unwrap();
    let mask = f.root.join("cli.png");
    ok(&["segment", "--model", p(&f.model), "--image", p(&image), "--box", &bbox, "--target-min", "32", "--scribbles", p(&scr), "--out", p(&mask)]);

    let model = Arc::new(load_model(&f.model).unwrap());
    let cfg = ServiceConfig {
        image_dir: Some(image.parent().unwrap().into()),
        session: SessionConfig { target_min: 32, ..Default::default() },
        ..Default::default()
    };
    let app = router(AppState::new(model, "m", cfg));
    let bx: Vec<usize> = bbox.split(',').map(|v| v.parse().unwrap()).collect();
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
    let refined: Value = rt.block_on(async {
        let send = |uri: String, body: Value| {
            let app = app.clone();
            async move {
                let req = Request::post(uri).header("content-type", "application/json").body(Body::from(body.to_string())).unwrap();
                let res = app.oneshot(req).await.unwrap();
                assert!(res.status() == StatusCode::OK || res.status() == StatusCode::CREATED);
                serde_json::from_slice::<Value>(&res.into_body().collect().await.unwrap().to_bytes()).unwrap()
            }
        };
        let name = image.file_name().unwrap().to_str().unwrap();
        let created = send("/sessions".into(), json!({ "image_id": name, "box": bx })).await;
        let id = created["session_id"].as_str().unwrap().to_string();
        let set = parse_scribbles(&fs::read_to_string(&scr).unwrap(), bx[2] - bx[0] + 1, bx[3] - bx[1] + 1).unwrap();
        let runs = ScribbleRuns::from_scribbles(&set);
        send(format!("/sessions/{id}/refine"), json!({ "scribbles": runs })).await
    });
    let served = decode(&serde_json::from_value::<RleMask>(refined["mask"].clone()).unwrap()).unwrap();
    assert_eq!(served, load_mask(&mask).unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_eq!(bifseg(&["segment"]).status.code(), Some(EXIT_USAGE));
    assert_eq!(bifseg(&["frobnicate"]).status.code(), Some(EXIT_USAGE));
    assert_eq!(bifseg(&["--help"]).status.code(), Some(0));
    assert_eq!(bifseg(&["train", "--data", "a.json", "--spec", "b.toml", "--out", "m"]).status.code(), Some(EXIT_USAGE));

    let missing = bifseg(&["train", "--data", p(&root.join("nope.json")), "--out", p(&root.join("m"))]);
    assert_eq!(missing.status.code(), Some(EXIT_DATA));
    fs::write(root.join("empty.json"), r#"{"entries":[]}"#).unwrap();
    let empty = bifseg(&["train", "--data", p(&root.join("empty.json")), "--out", p(&root.join("m"))]);
    assert_eq!(empty.status.code(), Some(EXIT_DATA));
    assert!(String::from_utf8_lossy(&empty.stderr).contains("empty dataset"));

    fs::write(root.join("spec.toml"), SPEC).unwrap();
    fs::write(root.join("diverge.toml"), TRAIN.replace("learning_rate = 0.01", "learning_rate = 1e30")).unwrap();
    let nan = bifseg(&["train", "--spec", p(&root.join("spec.toml")), "--config", p(&root.join("diverge.toml")), "--out", p(&root.join("m"))]);
    assert_eq!(nan.status.code(), Some(EXIT_NUMERIC), "{}", String::from_utf8_lossy(&nan.stderr));

    let threads = Command::new(env!("CARGO_BIN_EXE_bifseg"))
        .args(["report", p(&root.join("x"))])
        .env("BIFSEG_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(EXIT_USAGE));
}
