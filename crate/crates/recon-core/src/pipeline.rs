//! End-to-end reconstruction: scene or frames in, mesh and error report out.
//!
//! Stages run in a fixed order (generate, render, preprocess, features,
//! slam, densify, surface, align, evaluate, export) and each is timed in the
//! [`RunManifest`]. A failing stage stops the run; artifacts produced so far
//! and the manifest are still written.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::align::{
    compute_errors, horn_align_ordered, icp_best_of, pca_initializations, sample_surface_uniform, ErrorReport,
    IcpOptions, SimilarityTransform,
};
use crate::features::{blur_score, equalize_adaptive, extract_features, FeatureConfig, FrameFeatures};
use crate::geometry::{CameraIntrinsics, CameraPose};
use crate::image::GrayImage;
use crate::io::{read_mesh_ply, write_cloud_ply, write_mesh_ply, write_obj, PlyFormat};
use crate::mesh::TriangleMesh;
use crate::slam::{densify_map, run_slam, DenseCloud, DensifyConfig, SlamConfig, SlamMap, SlotOutcome};
use crate::surface::{reconstruct_surface, PointCloud, SurfaceConfig};
use crate::synth::{Scene, SceneSpec};

#[derive(thiserror::Error, Debug)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: Stage, message: String },
    #[error("cannot write artifacts: {0}")]
    Export(String),
}

impl PipelineError {
    /// Process exit code: 2 for configuration errors, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generate,
    Render,
    Preprocess,
    Features,
    Slam,
    Densify,
    Surface,
    Align,
    Evaluate,
    Export,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Generate,
        Stage::Render,
        Stage::Preprocess,
        Stage::Features,
        Stage::Slam,
        Stage::Densify,
        Stage::Surface,
        Stage::Align,
        Stage::Evaluate,
        Stage::Export,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Render => "render",
            Stage::Preprocess => "preprocess",
            Stage::Features => "features",
            Stage::Slam => "slam",
            Stage::Densify => "densify",
            Stage::Surface => "surface",
            Stage::Align => "align",
            Stage::Evaluate => "evaluate",
            Stage::Export => "export",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Where frames come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Input {
    /// Built-in scene preset.
    Preset(String),
    /// Scene description in TOML.
    Scene(PathBuf),
    /// Directory of PNG frames, processed in file-name order.
    Frames {
        dir: PathBuf,
        #[serde(default)]
        ground_truth: Option<PathBuf>,
        #[serde(default)]
        centerline_length: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Frames with a blur score below this fraction of the median are dropped.
    pub blur_ratio: f64,
    pub equalize: bool,
    pub tiles: [usize; 2],
    pub clip: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            blur_ratio: 0.3,
            equalize: true,
            tiles: [8, 8],
            clip: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    /// Uniform samples drawn from each surface.
    pub samples: usize,
    pub icp_iterations: usize,
    pub icp_tolerance: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            samples: 20_000,
            icp_iterations: 50,
            icp_tolerance: 1e-10,
        }
    }
}

fn default_dense_features() -> FeatureConfig {
    FeatureConfig {
        fast_threshold: 0.01,
        max_features: 5000,
        grid_cells: 16,
        ..FeatureConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub input: Input,
    /// Overrides the scene's render resolution.
    #[serde(default)]
    pub resolution: Option<u32>,
    /// Overrides the scene's frame count.
    #[serde(default)]
    pub frame_count: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default = "default_dense_features")]
    pub dense_features: FeatureConfig,
    #[serde(default)]
    pub slam: SlamConfig,
    #[serde(default)]
    pub densify: DensifyConfig,
    #[serde(default)]
    pub surface: SurfaceConfig,
    #[serde(default)]
    pub alignment: AlignConfig,
}

impl PipelineConfig {
    pub fn preset(name: &str) -> Self {
        Self {
            input: Input::Preset(name.to_string()),
            resolution: None,
            frame_count: None,
            seed: 0,
            output: None,
            preprocess: PreprocessConfig::default(),
            features: FeatureConfig::default(),
            dense_features: default_dense_features(),
            slam: SlamConfig::default(),
            densify: DensifyConfig::default(),
            surface: SurfaceConfig::default(),
            alignment: AlignConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Reads a TOML config; relative input paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut cfg.input {
            Input::Preset(_) => {}
            Input::Scene(p) => resolve(p),
            Input::Frames { dir, ground_truth, .. } => {
                resolve(dir);
                if let Some(g) = ground_truth {
                    resolve(g);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serialisable")
    }

    /// Checks references and parameter ranges without touching the output.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: String| Err(PipelineError::Config(m));
        match &self.input {
            Input::Preset(name) => {
                if SceneSpec::preset(name).is_none() {
                    return err(format!(
                        "unknown preset {name:?} (available: {})",
                        SceneSpec::preset_names().join(", ")
                    ));
                }
            }
            Input::Scene(p) => {
                if !p.is_file() {
                    return err(format!("scene file {} does not exist", p.display()));
                }
            }
            Input::Frames {
                dir,
                ground_truth,
                centerline_length,
            } => {
                if !dir.is_dir() {
                    return err(format!("frame directory {} does not exist", dir.display()));
                }
                if let Some(g) = ground_truth {
                    if !g.is_file() {
                        return err(format!("ground truth {} does not exist", g.display()));
                    }
                    if !centerline_length.is_some_and(|l| l > 0.0) {
                        return err("ground truth needs a positive centerline_length".into());
                    }
                }
            }
        }
        if let Some(r) = self.resolution {
            if !(32..=4096).contains(&r) {
                return err(format!("resolution {r} outside [32, 4096]"));
            }
        }
        if self.frame_count.is_some_and(|n| n < 2) {
            return err("frame_count must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.preprocess.blur_ratio) {
            return err("preprocess.blur_ratio must be in [0, 1)".into());
        }
        if self.densify.max_views <= 2 {
            return err("densify.max_views must exceed 2".into());
        }
        if self.alignment.samples < 3 {
            return err("alignment.samples must be at least 3".into());
        }
        if !(self.surface.voxel_fraction > 0.0) {
            return err("surface.voxel_fraction must be positive".into());
        }
        Ok(())
    }

    fn scene_spec(&self) -> Result<Option<SceneSpec>, PipelineError> {
        let mut spec = match &self.input {
            Input::Preset(name) => SceneSpec::preset(name).ok_or_else(|| PipelineError::Config(format!("unknown preset {name:?}")))?,
            Input::Scene(p) => SceneSpec::load(p).map_err(|e| PipelineError::Config(e.to_string()))?,
            Input::Frames { .. } => return Ok(None),
        };
        if let Some(r) = self.resolution {
            spec.render.resolution = r;
        }
        if let Some(n) = self.frame_count {
            spec.trajectory.frame_count = n;
        }
        spec.trajectory.seed = self.seed;
        spec.tube.texture_seed = self.seed;
        Ok(Some(spec))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SlotCounts {
    pub kept: usize,
    pub skipped: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct MeshStats {
    pub vertices: usize,
    pub triangles: usize,
    pub closed_manifold: bool,
    pub euler_characteristic: i64,
    pub components: usize,
    pub octree_depth: u32,
}

/// Record of one run, written as `manifest.json` whether or not it succeeded.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub version: String,
    pub config: PipelineConfig,
    pub stages: Vec<StageRecord>,
    pub total_seconds: f64,
    pub failed_stage: Option<Stage>,
    pub error: Option<String>,
    pub frames_total: usize,
    pub frames_rejected: Vec<usize>,
    pub lost_at_frame: Option<usize>,
    pub keyframes: usize,
    pub culled_keyframes: usize,
    pub sparse_points: usize,
    pub dense_points: usize,
    pub cleaned_points: usize,
    pub slots: SlotCounts,
    pub mesh: Option<MeshStats>,
    pub report: Option<ErrorReport>,
}

impl RunManifest {
    fn new(config: &PipelineConfig) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            stages: Vec::new(),
            total_seconds: 0.0,
            failed_stage: None,
            error: None,
            frames_total: 0,
            frames_rejected: Vec::new(),
            lost_at_frame: None,
            keyframes: 0,
            culled_keyframes: 0,
            sparse_points: 0,
            dense_points: 0,
            cleaned_points: 0,
            slots: SlotCounts::default(),
            mesh: None,
            report: None,
        }
    }

    pub fn succeeded(&self) -> bool {
        self.failed_stage.is_none()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest is serialisable")
    }
}

/// Everything a run produced; stages that did not run leave `None`.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub manifest: RunManifest,
    pub map: Option<SlamMap>,
    /// Original frame index per processed frame.
    pub frame_ids: Vec<usize>,
    pub dense: Option<DenseCloud>,
    pub cleaned: Option<PointCloud>,
    pub mesh: Option<TriangleMesh>,
    /// Similarity mapping the reconstruction onto the ground truth.
    pub alignment: Option<SimilarityTransform>,
    pub report: Option<ErrorReport>,
}

/// Ground truth available for evaluation.
struct Truth {
    mesh: TriangleMesh,
    centerline_length: f64,
    /// Camera poses per original frame, when known.
    poses: Option<Vec<CameraPose>>,
}

struct Timer<'a> {
    manifest: &'a mut RunManifest,
}

impl Timer<'_> {
    fn run<T>(&mut self, stage: Stage, f: impl FnOnce() -> Result<T, String>) -> Result<T, PipelineError> {
        let start = Instant::now();
        let out = f();
        self.manifest.stages.push(StageRecord {
            stage,
            seconds: start.elapsed().as_secs_f64(),
        });
        out.map_err(|message| {
            self.manifest.failed_stage = Some(stage);
            self.manifest.error = Some(message.clone());
            PipelineError::Stage { stage, message }
        })
    }
}

/// Drops blurry frames (score below `blur_ratio` × median) and optionally
/// equalises the rest. Returns the kept frames and their original indices.
pub fn preprocess_frames(frames: &[GrayImage], cfg: &PreprocessConfig) -> (Vec<GrayImage>, Vec<usize>) {
    let scores: Vec<f64> = frames.iter().map(blur_score).collect();
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted.get(sorted.len() / 2).copied().unwrap_or(0.0);
    let keep: Vec<usize> = (0..frames.len()).filter(|&i| scores[i] >= cfg.blur_ratio * median).collect();
    let out = keep
        .iter()
        .map(|&i| {
            if cfg.equalize {
                equalize_adaptive(&frames[i], (cfg.tiles[0], cfg.tiles[1]), cfg.clip)
            } else {
                frames[i].clone()
            }
        })
        .collect();
    (out, keep)
}

fn read_frame_dir(dir: &Path) -> Result<Vec<GrayImage>, String> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.len() < 2 {
        return Err(format!("{} holds fewer than 2 PNG frames", dir.display()));
    }
    paths
        .iter()
        .map(|p| GrayImage::read_png(p).map_err(|e| format!("{}: {e}", p.display())))
        .collect()
}

/// Aligns `rec` onto `gt` and reports the ground-truth-to-reconstruction
/// distances over uniform surface samples. ICP runs from the ground-truth
/// samples onto the reconstruction (the ground truth may cover only part of
/// it) and the result is inverted. `init` maps the reconstruction onto the
/// ground truth; without it the prescale and principal-axis starts are tried.
pub fn evaluate_meshes(
    rec: &TriangleMesh,
    gt: &TriangleMesh,
    centerline_length: f64,
    init: Option<SimilarityTransform>,
    cfg: &AlignConfig,
    seed: u64,
) -> Result<(ErrorReport, SimilarityTransform), String> {
    let gt_samples = sample_surface_uniform(gt, cfg.samples, seed).map_err(|e| e.to_string())?;
    let rec_samples = sample_surface_uniform(rec, cfg.samples, seed.wrapping_add(1)).map_err(|e| e.to_string())?;
    let inits = match init {
        Some(t) => vec![t.inverse()],
        None => pca_initializations(&gt_samples, &rec_samples),
    };
    let opts = IcpOptions {
        max_iters: cfg.icp_iterations,
        rel_tol: cfg.icp_tolerance,
    };
    let fit = icp_best_of(&gt_samples, &rec_samples, &inits, &opts).map_err(|e| e.to_string())?;
    let transform = fit.transform.inverse();
    let aligned: Vec<Vector3<f64>> = rec_samples.iter().map(|p| transform.apply(p)).collect();
    let mut report = compute_errors(&gt_samples, &aligned, centerline_length).map_err(|e| e.to_string())?;
    report.icp_residual = Some(fit.residual / (fit.transform.scale * fit.transform.scale));
    Ok((report, transform))
}

/// Similarity from estimated to true camera centres over tracked frames.
fn trajectory_alignment(map: &SlamMap, frame_ids: &[usize], truth: &[CameraPose]) -> Option<SimilarityTransform> {
    let (est, gt): (Vec<Vector3<f64>>, Vec<Vector3<f64>>) = map
        .trajectory
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.map(|p| (p.center(), truth[frame_ids[i]].center())))
        .unzip();
    horn_align_ordered(&est, &gt).ok()
}

/// Runs every stage without writing files.
pub fn execute(cfg: &PipelineConfig) -> Result<PipelineOutput, (PipelineError, Box<PipelineOutput>)> {
    let start = Instant::now();
    let mut out = PipelineOutput {
        manifest: RunManifest::new(cfg),
        map: None,
        frame_ids: Vec::new(),
        dense: None,
        cleaned: None,
        mesh: None,
        alignment: None,
        report: None,
    };
    let result = execute_into(cfg, &mut out);
    out.manifest.total_seconds = start.elapsed().as_secs_f64();
    match result {
        Ok(()) => Ok(out),
        Err(e) => Err((e, Box::new(out))),
    }
}

fn execute_into(cfg: &PipelineConfig, out: &mut PipelineOutput) -> Result<(), PipelineError> {
    cfg.validate()?;
    let spec = cfg.scene_spec()?;
    let mut manifest = std::mem::replace(&mut out.manifest, RunManifest::new(cfg));
    let result = run_stages(cfg, spec, out, &mut manifest);
    out.manifest = manifest;
    result
}

fn run_stages(
    cfg: &PipelineConfig,
    spec: Option<SceneSpec>,
    out: &mut PipelineOutput,
    manifest: &mut RunManifest,
) -> Result<(), PipelineError> {
    let mut timer = Timer { manifest };
    let scene = match &spec {
        Some(spec) => Some(timer.run(Stage::Generate, || Scene::generate(spec).map_err(|e| e.to_string()))?),
        None => None,
    };
    let (frames, k, truth) = match (&scene, &cfg.input) {
        (Some(scene), _) => {
            let frames = timer.run(Stage::Render, || scene.render_all().map_err(|e| e.to_string()))?;
            let k = scene.intrinsics().map_err(|e| PipelineError::Config(e.to_string()))?;
            let (s0, s1) = scene.traversed_range();
            let truth = Truth {
                mesh: scene.traversed_segment(),
                centerline_length: s1 - s0,
                poses: Some(scene.trajectory.poses.clone()),
            };
            (frames, k, Some(truth))
        }
        (
            None,
            Input::Frames {
                dir,
                ground_truth,
                centerline_length,
            },
        ) => {
            timer.run(Stage::Render, || {
                let frames = read_frame_dir(dir)?;
                let width = frames[0].width();
                if frames.iter().any(|f| f.width() != width || f.height() != width) {
                    return Err("frames must be square and of equal size".to_string());
                }
                let k = CameraIntrinsics::from_resolution(width as u32).map_err(|e| e.to_string())?;
                let truth = match ground_truth {
                    Some(path) => Some(Truth {
                        mesh: read_mesh_ply(path).map_err(|e| e.to_string())?,
                        centerline_length: centerline_length.unwrap_or(1.0),
                        poses: None,
                    }),
                    None => None,
                };
                Ok((frames, k, truth))
            })?
        }
        (None, _) => unreachable!("scene inputs always generate"),
    };
    timer.manifest.frames_total = frames.len();

    let (prepared, kept) = timer.run(Stage::Preprocess, || {
        let (p, kept) = preprocess_frames(&frames, &cfg.preprocess);
        if p.len() < 2 {
            return Err(format!("only {} frames survive blur rejection", p.len()));
        }
        Ok((p, kept))
    })?;
    drop(frames);
    timer.manifest.frames_rejected = (0..timer.manifest.frames_total).filter(|i| kept.binary_search(i).is_err()).collect();
    out.frame_ids = kept.clone();

    let features: Vec<FrameFeatures> = timer.run(Stage::Features, || {
        prepared
            .iter()
            .map(|img| extract_features(img, &cfg.features).map_err(|e| e.to_string()))
            .collect()
    })?;

    let mut slam_cfg = cfg.slam.clone();
    slam_cfg.ransac.seed = cfg.seed;
    let run = timer.run(Stage::Slam, || run_slam(&features, &k, &slam_cfg).map_err(|e| e.to_string()))?;
    drop(features);
    timer.manifest.lost_at_frame = run.lost_at.map(|i| kept[i]);
    timer.manifest.keyframes = run.map.keyframes.len();
    timer.manifest.culled_keyframes = run.map.culled_keyframes;
    timer.manifest.sparse_points = run.map.map_points.len();
    let map = out.map.insert(run.map);

    let dense = timer.run(Stage::Densify, || {
        let keyframe_frames: BTreeMap<usize, FrameFeatures> = map
            .keyframes
            .values()
            .map(|kf| {
                extract_features(&prepared[kf.frame_index], &cfg.dense_features)
                    .map(|f| (kf.frame_index, f))
                    .map_err(|e| e.to_string())
            })
            .collect::<Result<_, _>>()?;
        let dense = densify_map(map, &keyframe_frames, &cfg.densify);
        if dense.is_empty() {
            return Err("densification produced no points".into());
        }
        Ok(dense)
    })?;
    drop(prepared);
    timer.manifest.dense_points = dense.len();
    for slot in &dense.slots {
        match slot.outcome {
            SlotOutcome::Kept { .. } => timer.manifest.slots.kept += 1,
            SlotOutcome::Skipped { .. } => timer.manifest.slots.skipped += 1,
            SlotOutcome::Dropped { .. } => timer.manifest.slots.dropped += 1,
        }
    }
    let dense = out.dense.insert(dense);

    let surface = timer.run(Stage::Surface, || {
        reconstruct_surface(&dense.to_point_cloud(), &cfg.surface).map_err(|e| e.to_string())
    })?;
    timer.manifest.cleaned_points = surface.cleaned.len();
    timer.manifest.mesh = Some(MeshStats {
        vertices: surface.mesh.vertices.len(),
        triangles: surface.mesh.triangles.len(),
        closed_manifold: surface.mesh.is_closed_manifold(),
        euler_characteristic: surface.mesh.euler_characteristic(),
        components: surface.mesh.component_count(),
        octree_depth: surface.depth,
    });
    out.cleaned = Some(surface.cleaned);
    let mesh = out.mesh.insert(surface.mesh);

    let Some(truth) = truth else {
        return Ok(());
    };
    let init = timer.run(Stage::Align, || {
        Ok(truth.poses.as_ref().and_then(|poses| trajectory_alignment(map, &kept, poses)))
    })?;
    let (report, transform) = timer.run(Stage::Evaluate, || {
        evaluate_meshes(mesh, &truth.mesh, truth.centerline_length, init, &cfg.alignment, cfg.seed)
    })?;
    timer.manifest.report = Some(report);
    out.alignment = Some(transform);
    out.report = Some(report);
    Ok(())
}

/// Writes every artifact present in `out` plus `manifest.json` into `dir`.
pub fn export_artifacts(out: &PipelineOutput, dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let fail = |e: &dyn std::fmt::Display| PipelineError::Export(e.to_string());
    std::fs::create_dir_all(dir).map_err(|e| fail(&e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, f: &dyn Fn(&Path) -> Result<(), String>| -> Result<(), PipelineError> {
        let path = dir.join(name);
        f(&path).map_err(|e| PipelineError::Export(format!("{}: {e}", path.display())))?;
        written.push(path);
        Ok(())
    };
    let ply = PlyFormat::BinaryLittleEndian;
    if let Some(map) = &out.map {
        put("sparse.ply", &|p| write_cloud_ply(p, &map.sparse_points(), None, ply).map_err(|e| e.to_string()))?;
        put("trajectory.txt", &|p| {
            let mut w = std::io::BufWriter::new(std::fs::File::create(p).map_err(|e| e.to_string())?);
            map.write_trajectory_to(&mut w, Some(&out.frame_ids)).map_err(|e| e.to_string())
        })?;
    }
    if let Some(dense) = &out.dense {
        put("dense.ply", &|p| write_cloud_ply(p, &dense.points, None, ply).map_err(|e| e.to_string()))?;
    }
    if let Some(cleaned) = &out.cleaned {
        put("cleaned.ply", &|p| write_cloud_ply(p, &cleaned.points, None, ply).map_err(|e| e.to_string()))?;
    }
    if let Some(mesh) = &out.mesh {
        put("mesh.ply", &|p| write_mesh_ply(p, mesh, ply).map_err(|e| e.to_string()))?;
        put("mesh.obj", &|p| write_obj(p, mesh).map_err(|e| e.to_string()))?;
    }
    if let Some(report) = &out.report {
        put("report.json", &|p| std::fs::write(p, report.to_json()).map_err(|e| e.to_string()))?;
    }
    put("manifest.json", &|p| std::fs::write(p, out.manifest.to_json()).map_err(|e| e.to_string()))?;
    Ok(written)
}

/// Validates, runs every stage, and writes the artifacts to `cfg.output`
/// if set. Configuration errors leave the output directory untouched.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
    cfg.validate()?;
    let (result, mut out) = match execute(cfg) {
        Ok(out) => (Ok(()), out),
        Err((e @ PipelineError::Config(_), _)) => return Err(e),
        Err((e, out)) => (Err(e), *out),
    };
    if let Some(dir) = &cfg.output {
        let start = Instant::now();
        let exported = export_artifacts(&out, dir);
        let seconds = start.elapsed().as_secs_f64();
        out.manifest.stages.push(StageRecord {
            stage: Stage::Export,
            seconds,
        });
        out.manifest.total_seconds += seconds;
        if let Err(e) = exported {
            out.manifest.failed_stage.get_or_insert(Stage::Export);
            return Err(e);
        }
        // Rewrite the manifest so it includes the export timing.
        std::fs::write(dir.join("manifest.json"), out.manifest.to_json()).map_err(|e| PipelineError::Export(e.to_string()))?;
    }
    result.map(|_| out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub resolution: u32,
    pub rmse: f64,
    pub max_error: f64,
    pub relative_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Relative RMSE is non-increasing with resolution.
    pub monotone: bool,
}

impl SweepTable {
    pub const COLUMNS: [&'static str; 4] = ["resolution", "rmse", "max_error", "relative_rmse"];

    pub fn to_csv(&self) -> String {
        let mut s = Self::COLUMNS.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.resolution,
                crate::io::fmt17(r.rmse),
                crate::io::fmt17(r.max_error),
                crate::io::fmt17(r.relative_rmse)
            ));
        }
        s
    }
}

/// True when `values` never increase.
pub fn non_increasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] <= w[0])
}

/// Runs the pipeline once per resolution (shared seed). Per-run outputs go
/// to `<output>/res_<r>` when an output directory is configured.
pub fn sweep(cfg: &PipelineConfig, resolutions: &[u32]) -> Result<SweepTable, PipelineError> {
    if resolutions.len() < 2 {
        return Err(PipelineError::Config("a sweep needs at least 2 resolutions".into()));
    }
    let mut sorted = resolutions.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != resolutions.len() {
        return Err(PipelineError::Config("sweep resolutions must be distinct".into()));
    }
    cfg.validate()?;
    let mut rows = Vec::with_capacity(sorted.len());
    for &r in &sorted {
        let mut run_cfg = cfg.clone();
        run_cfg.resolution = Some(r);
        run_cfg.output = cfg.output.as_ref().map(|d| d.join(format!("res_{r}")));
        let out = run_pipeline(&run_cfg)?;
        let report = out.report.ok_or_else(|| PipelineError::Stage {
            stage: Stage::Evaluate,
            message: "no ground truth to evaluate against".into(),
        })?;
        rows.push(SweepRow {
            resolution: r,
            rmse: report.rmse,
            max_error: report.max_error,
            relative_rmse: report.relative_rmse,
        });
    }
    let rel: Vec<f64> = rows.iter().map(|r| r.relative_rmse).collect();
    Ok(SweepTable {
        monotone: non_increasing(&rel),
        rows,
    })
}
