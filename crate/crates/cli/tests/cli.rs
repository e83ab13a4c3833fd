use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use slideseg_core::bench::equator_slice;
use slideseg_core::inference::IntensityPredictor;
use slideseg_core::postprocess::tight_bbox;
use slideseg_core::prompt::BBox;
use slideseg_core::volume::{read_mask, read_volume, Axis};
use slideseg_service::jobs::{JobStatus, JobView};
use slideseg_service::{router, AppState, CreatedId, ServiceConfig, UploadRequest};
use tempfile::TempDir;
use tower::ServiceExt;

const TINY_MODEL: [&str; 18] = [
    "--set",
    "model.encoder.image_size=16",
    "--set",
    "model.encoder.patch_size=4",
    "--set",
    "model.encoder.embed_dim=16",
    "--set",
    "model.encoder.depth=1",
    "--set",
    "model.encoder.heads=2",
    "--set",
    "model.encoder.lora_rank=2",
    "--set",
    "model.decoder_depth=1",
    "--set",
    "model.decoder_heads=2",
    "--set",
    "model.high_res_dim=4",
];

fn slideseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slideseg"))
        .args(args)
        .env_remove("SLIDESEG_SEED")
        .env_remove("SLIDESEG_JOBS")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth_sphere(dir: &Path, shape: &str, seed: &str) -> PathBuf {
    ok(&slideseg(&["synth", "--kind", "sphere", "--shape", shape, "--seed", seed, "--out", p(dir)]));
    dir.join(format!("sphere-{seed}.vol.json"))
}

fn equator_box(dir: &Path, id: &str) -> (usize, BBox) {
    let mask = read_mask(&dir.join(format!("{id}.mask.rle.json"))).unwrap();
    let z = equator_slice(&mask, Axis::Z, 1).unwrap();
    (z, tight_bbox(mask.instance_slice(Axis::Z, z, 1).view()).unwrap())
}

#[test]
fn synth_is_deterministic() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    synth_sphere(a.path(), "64", "7");
    synth_sphere(b.path(), "64", "7");
    for name in ["sphere-7.vol.raw", "sphere-7.vol.json", "sphere-7.mask.rle.json"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name} differs");
    }
    let v = read_volume(&a.path().join("sphere-7.vol.json")).unwrap();
    assert_eq!(v.shape(), (64, 64, 64));

    // the environment seed is equivalent to the flag
    let c = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_slideseg"))
        .args(["synth", "--kind", "sphere", "--shape", "64", "--out", p(c.path())])
        .env("SLIDESEG_SEED", "7")
        .output()
        .unwrap();
    ok(&out);
    assert_eq!(
        std::fs::read(a.path().join("sphere-7.vol.raw")).unwrap(),
        std::fs::read(c.path().join("sphere-7.vol.raw")).unwrap()
    );
}

#[test]
fn usage_errors_exit_1() {
    let dir = TempDir::new().unwrap();
    let vol = synth_sphere(dir.path(), "24", "1");
    let out_mask = dir.path().join("m.json");
    let out = slideseg(&[
        "infer", "--volume", p(&vol), "--out", p(&out_mask), "--intensity", "--axis", "z",
        "--start-index", "23", "--prompt", "box:2,2,10,10",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("start index 23"));
    assert!(!out_mask.exists());

    for args in [
        vec!["infer", "--volume", p(&vol), "--out", p(&out_mask), "--intensity", "--start-index", "5"],
        vec!["infer", "--volume", p(&vol), "--out", p(&out_mask), "--start-index", "5", "--prompt", "point:3,3"],
        vec!["infer", "--volume", p(&vol), "--out", p(&out_mask), "--intensity", "--start-index", "5", "--prompt", "box:9,9,1,1"],
        vec!["frobnicate"],
        vec!["synth", "--kind", "cube"],
        vec!["synth", "--kind", "sphere", "--shape", "8", "--out", p(dir.path())],
        vec!["--set", "train.steps=lots", "synth", "--kind", "sphere", "--out", p(dir.path())],
        vec!["--jobs", "0", "synth", "--kind", "sphere", "--shape", "16", "--out", p(dir.path())],
    ] {
        let out = slideseg(&args);
        assert_eq!(out.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(slideseg(&["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let vol = synth_sphere(dir.path(), "24", "1");
    let raw = dir.path().join("sphere-1.vol.raw");
    let bytes = std::fs::read(&raw).unwrap();
    std::fs::write(&raw, &bytes[..bytes.len() - 7]).unwrap();
    let out = slideseg(&[
        "infer", "--volume", p(&vol), "--out", p(&dir.path().join("m.json")), "--intensity",
        "--start-index", "12", "--prompt", "point:12,12",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let missing = slideseg(&["preprocess", "--input", p(&dir.path().join("nope.vol.json")), "--out", p(dir.path())]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn noisy_suite_has_25_rows() {
    let out = ok(&slideseg(&["eval", "--suite", "noisy", "--intensity", "--count", "2", "--shape", "24", "--seed", "3"]));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "metric,value,config_hash");
    assert_eq!(lines.len(), 26);
    let hash = lines[1].rsplit(',').next().unwrap();
    assert_eq!(hash.len(), 12);
    for l in &lines[1..] {
        let cols: Vec<&str> = l.split(',').collect();
        assert_eq!(cols.len(), 3, "{l}");
        assert!(cols[0].starts_with("noisy_dice_t"));
        let v: f64 = cols[1].parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
        assert_eq!(cols[2], hash);
    }
    let again = ok(&slideseg(&["eval", "--suite", "noisy", "--intensity", "--count", "2", "--shape", "24", "--seed", "3"]));
    assert_eq!(out, again);
    let other = ok(&slideseg(&["eval", "--suite", "noisy", "--intensity", "--count", "2", "--shape", "24", "--seed", "4"]));
    assert_ne!(other.lines().nth(1).unwrap().rsplit(',').next().unwrap(), hash);
}

#[test]
fn full_eval_reports_every_suite() {
    let out = ok(&slideseg(&["eval", "--intensity", "--count", "2", "--shape", "24"]));
    for metric in [
        "propagation_dice_mean",
        "efficiency_volumes_propagation",
        "efficiency_volumes_per_slice",
        "zspacing_dice_r1",
        "zspacing_dice_r4",
    ] {
        assert!(out.lines().any(|l| l.starts_with(&format!("{metric},"))), "{metric} missing");
    }
}

#[test]
fn service_mask_equals_infer_output() {
    let dir = TempDir::new().unwrap();
    let vol_path = synth_sphere(dir.path(), "32", "5");
    let (z, b) = equator_box(dir.path(), "sphere-5");
    let cli_mask = dir.path().join("cli.mask.rle.json");
    let z_arg = z.to_string();
    let prompt = format!("box:{},{},{},{}", b.x0, b.y0, b.x1, b.y1);
    ok(&slideseg(&[
        "infer", "--volume", p(&vol_path), "--out", p(&cli_mask), "--intensity", "--axis", "z",
        "--start-index", &z_arg, "--prompt", &prompt,
    ]));
    let cli_bytes = std::fs::read(&cli_mask).unwrap();

    let volume = read_volume(&vol_path).unwrap();
    let service_bytes = tokio::runtime::Runtime::new().unwrap().block_on(async {
        let data = TempDir::new().unwrap();
        let state = AppState::open(ServiceConfig::new(data.path()), Arc::new(IntensityPredictor::default())).unwrap();
        let app = router(state);
        let call = |method: &str, uri: String, body: Option<Vec<u8>>| {
            let app = app.clone();
            let req = Request::builder()
                .method(method)
                .uri(uri)
                .header("content-type", "application/json")
                .body(body.map(Body::from).unwrap_or_else(Body::empty))
                .unwrap();
            async move {
                let resp = app.oneshot(req).await.unwrap();
                let status = resp.status();
                (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
            }
        };
        let upload = serde_json::to_vec(&UploadRequest::for_volume(&volume)).unwrap();
        let (status, body) = call("POST", "/v1/volumes".into(), Some(upload)).await;
        assert_eq!(status, StatusCode::CREATED);
        let vid = serde_json::from_slice::<CreatedId>(&body).unwrap().id;
        let job = serde_json::json!({
            "axis": "z", "slice": z, "prompt": {"type": "box", "coords": [b.x0, b.y0, b.x1, b.y1]}
        });
        let (status, body) = call("POST", format!("/v1/volumes/{vid}/jobs"), Some(serde_json::to_vec(&job).unwrap())).await;
        assert_eq!(status, StatusCode::ACCEPTED);
        let jid = serde_json::from_slice::<CreatedId>(&body).unwrap().id;
        let deadline = Instant::now() + Duration::from_secs(60);
        loop {
            let (_, body) = call("GET", format!("/v1/jobs/{jid}"), None).await;
            let view: JobView = serde_json::from_slice(&body).unwrap();
            if view.record.status == JobStatus::Done {
                break;
            }
            assert_ne!(view.record.status, JobStatus::Failed, "{:?}", view.record.error);
            assert!(Instant::now() < deadline);
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        let (status, body) = call("GET", format!("/v1/jobs/{jid}/mask"), None).await;
        assert_eq!(status, StatusCode::OK);
        body
    });
    assert_eq!(cli_bytes, service_bytes);
    let mask = read_mask(&cli_mask).unwrap();
    assert!(mask.labeled_slice_count(Axis::Z) > 10);
}

#[test]
fn preprocess_copies_mask_and_counts_windows() {
    let src = TempDir::new().unwrap();
    let out = TempDir::new().unwrap();
    let vol = synth_sphere(src.path(), "24", "2");
    let stdout = ok(&slideseg(&["preprocess", "--input", p(&vol), "--out", p(out.path())]));
    assert!(stdout.contains("windows along z:"));
    assert_eq!(
        read_volume(&out.path().join("sphere-2.vol.json")).unwrap(),
        read_volume(&vol).unwrap()
    );
    assert!(out.path().join("sphere-2.mask.rle.json").exists());
}

#[test]
fn pseudo_train_infer_pipeline() {
    let data = TempDir::new().unwrap();
    let d = data.path();
    synth_sphere(d, "16", "1");
    ok(&slideseg(&["synth", "--kind", "two_blob", "--shape", "16", "--seed", "2", "--random", "--id", "unlabeled", "--out", p(d)]));
    std::fs::remove_file(d.join("unlabeled.mask.rle.json")).unwrap();

    let records = d.join("unlabeled.pseudo.json");
    let out = ok(&slideseg(&[
        "pseudo", "--volume", p(&d.join("unlabeled.vol.json")), "--out", p(&records), "--intensity",
        "--stride", "4", "--segments", "16",
    ]));
    assert!(out.starts_with(char::is_numeric));

    // the config asks for many steps; the flag wins
    let cfg = d.join("run.json");
    std::fs::write(&cfg, r#"{"train": {"steps": 5000, "batch_size": 2, "log_every": 1}}"#).unwrap();
    let model = d.join("model.safetensors");
    let metrics = d.join("metrics.jsonl");
    let mut args = vec![
        "--config", p(&cfg), "--seed", "3", "train", "--data", p(d), "--pseudo", p(&records), "--out", p(&model),
        "--metrics", p(&metrics), "--steps", "3",
    ];
    args.extend(TINY_MODEL);
    ok(&slideseg(&args));
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&metrics)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[2]["step"], 3);

    let mask = d.join("pred.mask.rle.json");
    ok(&slideseg(&[
        "infer", "--volume", p(&d.join("sphere-1.vol.json")), "--out", p(&mask), "--model", p(&model),
        "--start-index", "8", "--prompt", "box:4,4,11,11",
    ]));
    assert_eq!(read_mask(&mask).unwrap().shape(), (16, 16, 16));

    let grid = d.join("grid.mask.rle.json");
    ok(&slideseg(&[
        "infer", "--volume", p(&d.join("unlabeled.vol.json")), "--out", p(&grid), "--intensity",
        "--start-index", "8", "--everything",
    ]));
    assert!(grid.exists());
}
