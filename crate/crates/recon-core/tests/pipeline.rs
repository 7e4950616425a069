use std::path::Path;
use std::sync::OnceLock;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recon_core::io::{read_ply, write_cloud_ply, PlyFormat};
use recon_core::pipeline::{
    run_pipeline, sweep, Input, PipelineConfig, PipelineError, PipelineOutput, Stage, SweepTable,
};
use recon_core::synth::{Scene, SceneSpec};

const ARTIFACTS: [&str; 8] = [
    "sparse.ply",
    "dense.ply",
    "cleaned.ply",
    "mesh.ply",
    "mesh.obj",
    "trajectory.txt",
    "report.json",
    "manifest.json",
];

fn small_config(out: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::preset("gentle-bend");
    cfg.resolution = Some(160);
    cfg.frame_count = Some(30);
    cfg.seed = 3;
    cfg.alignment.samples = 5000;
    cfg.output = Some(out.to_path_buf());
    cfg
}

struct SharedRun {
    dir: tempfile::TempDir,
    out: PipelineOutput,
}

fn shared_run() -> &'static SharedRun {
    static RUN: OnceLock<SharedRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let out = run_pipeline(&small_config(dir.path())).expect("small run succeeds");
        SharedRun { dir, out }
    })
}

#[test]
fn full_run_writes_every_artifact() {
    let run = shared_run();
    for name in ARTIFACTS {
        let p = run.dir.path().join(name);
        assert!(p.is_file(), "{name} missing");
        assert!(std::fs::metadata(&p).unwrap().len() > 0, "{name} empty");
    }
    let m = &run.out.manifest;
    assert!(m.succeeded());
    let report = m.report.expect("report populated");
    assert!(report.relative_rmse.is_finite() && report.relative_rmse > 0.0);
    assert!(m.dense_points > m.sparse_points);
    assert!(m.cleaned_points <= m.dense_points);
    assert!(m.keyframes >= 2);
}

#[test]
fn stages_run_in_dataflow_order() {
    let m = &shared_run().out.manifest;
    let order: Vec<Stage> = m.stages.iter().map(|s| s.stage).collect();
    assert_eq!(order, Stage::ALL.to_vec());
    assert!(order.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn stage_timings_sum_to_total() {
    let m = &shared_run().out.manifest;
    let sum: f64 = m.stages.iter().map(|s| s.seconds).sum();
    assert!(m.total_seconds > 0.0);
    assert!((sum - m.total_seconds).abs() <= 0.05 * m.total_seconds, "sum {sum} total {}", m.total_seconds);
}

#[test]
fn manifest_on_disk_matches_run() {
    let run = shared_run();
    let text = std::fs::read_to_string(run.dir.path().join("manifest.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["keyframes"], run.out.manifest.keyframes);
    assert_eq!(v["stages"].as_array().unwrap().len(), Stage::ALL.len());
    assert!(v["failed_stage"].is_null());
    assert_eq!(v["version"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn trajectory_has_one_line_per_tracked_frame() {
    let run = shared_run();
    let text = std::fs::read_to_string(run.dir.path().join("trajectory.txt")).unwrap();
    let tracked = run.out.map.as_ref().unwrap().trajectory.iter().filter(|p| p.is_some()).count();
    let lines: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(lines.len(), tracked);
    for l in lines {
        assert_eq!(l.split_whitespace().count(), 8, "{l}");
    }
}

#[test]
fn repeated_run_is_byte_identical() {
    let run = shared_run();
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(&small_config(dir.path())).unwrap();
    for name in ["report.json", "mesh.ply", "dense.ply", "trajectory.txt"] {
        let a = std::fs::read(run.dir.path().join(name)).unwrap();
        let b = std::fs::read(dir.path().join(name)).unwrap();
        assert!(a == b, "{name} differs between runs");
    }
}

#[test]
fn missing_input_is_config_error_without_outputs() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("out");
    let mut cfg = PipelineConfig::preset("gentle-bend");
    cfg.input = Input::Frames {
        dir: root.path().join("does-not-exist"),
        ground_truth: None,
        centerline_length: None,
    };
    cfg.output = Some(out.clone());
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(matches!(err, PipelineError::Config(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
    assert!(!out.exists());
}

#[test]
fn unknown_preset_is_config_error() {
    let cfg = PipelineConfig::preset("no-such-scene");
    assert!(matches!(run_pipeline(&cfg), Err(PipelineError::Config(_))));
}

#[test]
fn config_rejects_unknown_keys() {
    let text = "input = { preset = \"gentle-bend\" }\nresolutoin = 500\n";
    assert!(matches!(PipelineConfig::from_toml(text), Err(PipelineError::Config(_))));
}

#[test]
fn config_toml_round_trip() {
    let mut cfg = PipelineConfig::preset("sharp-bend");
    cfg.seed = 11;
    cfg.resolution = Some(320);
    cfg.densify.max_views = 6;
    let back = PipelineConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn relative_paths_resolve_against_config_file() {
    let root = tempfile::tempdir().unwrap();
    std::fs::create_dir(root.path().join("frames")).unwrap();
    let path = root.path().join("run.toml");
    std::fs::write(&path, "[input.frames]\ndir = \"frames\"\n").unwrap();
    let cfg = PipelineConfig::load(&path).unwrap();
    match &cfg.input {
        Input::Frames { dir, .. } => assert_eq!(dir, &root.path().join("frames")),
        other => panic!("unexpected input {other:?}"),
    }
    cfg.validate().unwrap();
}

#[test]
fn failure_at_slam_is_recorded() {
    // Identical frames carry no parallax, so initialization must fail.
    let spec = {
        let mut s = SceneSpec::preset("gentle-bend").unwrap();
        s.render.resolution = 128;
        s.trajectory.frame_count = 2;
        s
    };
    let scene = Scene::generate(&spec).unwrap();
    let frame = scene.render_all().unwrap().remove(0);
    let root = tempfile::tempdir().unwrap();
    let frames = root.path().join("frames");
    std::fs::create_dir(&frames).unwrap();
    for i in 0..6 {
        frame.write_png(&frames.join(format!("{i:03}.png"))).unwrap();
    }
    let out = root.path().join("out");
    let mut cfg = PipelineConfig::preset("gentle-bend");
    cfg.input = Input::Frames {
        dir: frames,
        ground_truth: None,
        centerline_length: None,
    };
    cfg.output = Some(out.clone());
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(matches!(err, PipelineError::Stage { stage: Stage::Slam, .. }), "{err}");
    assert_eq!(err.exit_code(), 3);

    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(v["failed_stage"], "slam");
    assert!(v["error"].is_string());
    let stages: Vec<&str> = v["stages"].as_array().unwrap().iter().map(|s| s["stage"].as_str().unwrap()).collect();
    assert_eq!(stages, ["render", "preprocess", "features", "slam", "export"]);
    let mut written: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    written.sort();
    assert_eq!(written, ["manifest.json"]);
}

#[test]
fn cloud_ply_round_trip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let points: Vec<Vector3<f64>> = (0..500)
        .map(|_| {
            let e: i32 = rng.random_range(-30..30);
            Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() * 10f64.powi(e), -rng.random::<f64>())
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    for format in [PlyFormat::BinaryLittleEndian, PlyFormat::Ascii] {
        let path = dir.path().join("cloud.ply");
        write_cloud_ply(&path, &points, None, format).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back.points.len(), points.len());
        for (a, b) in points.iter().zip(&back.points) {
            for i in 0..3 {
                assert_eq!(a[i].to_bits(), b[i].to_bits(), "{format:?}");
            }
        }
    }
}

#[test]
fn sweep_needs_two_distinct_resolutions() {
    let cfg = PipelineConfig::preset("gentle-bend");
    assert!(matches!(sweep(&cfg, &[500]), Err(PipelineError::Config(_))));
    assert!(matches!(sweep(&cfg, &[]), Err(PipelineError::Config(_))));
    assert!(matches!(sweep(&cfg, &[500, 500]), Err(PipelineError::Config(_))));
}

#[test]
fn sweep_table_columns() {
    assert_eq!(SweepTable::COLUMNS, ["resolution", "rmse", "max_error", "relative_rmse"]);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.frame_count = Some(24);
    let table = sweep(&cfg, &[160, 128]).unwrap();
    assert_eq!(table.rows.iter().map(|r| r.resolution).collect::<Vec<_>>(), [128, 160]);
    let csv = table.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("resolution,rmse,max_error,relative_rmse"));
    assert_eq!(lines.count(), 2);
    let v = serde_json::to_value(&table.rows[0]).unwrap();
    let mut keys: Vec<&String> = v.as_object().unwrap().keys().collect();
    keys.sort();
    assert_eq!(keys, ["max_error", "relative_rmse", "resolution", "rmse"]);
    assert!(dir.path().join("res_128").join("report.json").is_file());
    assert!(dir.path().join("res_160").join("report.json").is_file());
    let rel: Vec<f64> = table.rows.iter().map(|r| r.relative_rmse).collect();
    assert_eq!(table.monotone, rel[1] <= rel[0]);
}
