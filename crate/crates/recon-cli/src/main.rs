//! `recon`: command-line front end for the reconstruction pipeline.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use recon_core::io::{read_mesh_ply, write_mesh_ply, write_pose_line, PlyFormat};
use recon_core::pipeline::{evaluate_meshes, run_pipeline, sweep, AlignConfig, Input, PipelineConfig, PipelineError};
use recon_core::synth::{Scene, SceneSpec};

#[derive(Parser)]
#[command(name = "recon", version, about = "Monocular tube-interior reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: ground-truth mesh, frames and trajectory.
    Generate {
        #[command(flatten)]
        source: Source,
        /// Render resolution override.
        #[arg(long)]
        resolution: Option<u32>,
        /// Frame count override.
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline and write all artifacts.
    Reconstruct {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Align a mesh to a ground-truth mesh and report surface errors.
    Evaluate {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Ground-truth centreline length used for the relative RMSE.
        #[arg(long)]
        length: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the pipeline at several resolutions and print a comparison table.
    Sweep {
        #[command(flatten)]
        source: Source,
        /// Comma-separated resolutions, e.g. 500,800,1500.
        #[arg(long, value_delimiter = ',', required = true)]
        resolutions: Vec<u32>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Source {
    /// TOML config (run config for reconstruct/sweep, scene spec for generate).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in scene preset.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Exclusive claim on an output directory, released on drop.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self, PipelineError> {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::Export(format!("{}: {e}", dir.display())))?;
        let path = dir.join(".recon.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Config(format!(
                "{} is in use by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(PipelineError::Export(format!("{}: {e}", path.display()))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn init_threads() -> Result<(), PipelineError> {
    let Ok(v) = std::env::var("RECON_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| PipelineError::Config(format!("RECON_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| PipelineError::Config(e.to_string()))
}

fn run_config(source: &Source, out: Option<PathBuf>) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match (&source.config, &source.preset) {
        (Some(path), _) => PipelineConfig::load(path)?,
        (None, Some(name)) => PipelineConfig::preset(name),
        (None, None) => return Err(PipelineError::Config("pass --config or --preset".into())),
    };
    if let Some(seed) = source.seed {
        cfg.seed = seed;
    }
    if out.is_some() {
        cfg.output = out;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn scene_spec(source: &Source) -> Result<SceneSpec, PipelineError> {
    let mut spec = match (&source.config, &source.preset) {
        (Some(path), _) => SceneSpec::load(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?,
        (None, Some(name)) => SceneSpec::preset(name).ok_or_else(|| {
            PipelineError::Config(format!(
                "unknown preset {name:?} (available: {})",
                SceneSpec::preset_names().join(", ")
            ))
        })?,
        (None, None) => return Err(PipelineError::Config("pass --config or --preset".into())),
    };
    if let Some(seed) = source.seed {
        spec.trajectory.seed = seed;
        spec.tube.texture_seed = seed;
    }
    Ok(spec)
}

fn stage_err(stage: recon_core::pipeline::Stage) -> impl Fn(&dyn std::fmt::Display) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        message: e.to_string(),
    }
}

fn generate(source: &Source, resolution: Option<u32>, frames: Option<usize>, out: &Path) -> Result<(), PipelineError> {
    use recon_core::pipeline::Stage;
    let mut spec = scene_spec(source)?;
    if let Some(r) = resolution {
        spec.render.resolution = r;
    }
    if let Some(n) = frames {
        spec.trajectory.frame_count = n;
    }
    let _lock = DirLock::acquire(out)?;
    let gen = stage_err(Stage::Generate);
    let scene = Scene::generate(&spec).map_err(|e| PipelineError::Config(e.to_string()))?;
    let frame_dir = out.join("frames");
    std::fs::create_dir_all(&frame_dir).map_err(|e| gen(&e))?;
    let images = scene.render_all().map_err(|e| stage_err(Stage::Render)(&e))?;
    for (i, img) in images.iter().enumerate() {
        img.write_png(&frame_dir.join(format!("{i:05}.png"))).map_err(|e| gen(&e))?;
    }
    write_mesh_ply(&out.join("ground_truth.ply"), &scene.ground_truth.mesh, PlyFormat::BinaryLittleEndian).map_err(|e| gen(&e))?;
    write_mesh_ply(&out.join("ground_truth_segment.ply"), &scene.traversed_segment(), PlyFormat::BinaryLittleEndian)
        .map_err(|e| gen(&e))?;
    let mut w = BufWriter::new(File::create(out.join("trajectory_gt.txt")).map_err(|e| gen(&e))?);
    for (i, p) in scene.trajectory.poses.iter().enumerate() {
        write_pose_line(&mut w, i, p).map_err(|e| gen(&e))?;
    }
    w.flush().map_err(|e| gen(&e))?;
    std::fs::write(out.join("scene.toml"), spec.to_toml()).map_err(|e| gen(&e))?;

    // Run config evaluating against the traversed wall segment.
    let (s0, s1) = scene.traversed_range();
    let mut run = PipelineConfig::preset("gentle-bend");
    run.input = Input::Frames {
        dir: "frames".into(),
        ground_truth: Some("ground_truth_segment.ply".into()),
        centerline_length: Some(s1 - s0),
    };
    run.seed = spec.trajectory.seed;
    std::fs::write(out.join("run.toml"), run.to_toml()).map_err(|e| gen(&e))?;
    println!("centerline_length {}", scene.ground_truth.centerline_length);
    println!("traversed_length {}", s1 - s0);
    println!("frames {}", images.len());
    Ok(())
}

fn reconstruct(source: &Source, out: Option<PathBuf>) -> Result<(), PipelineError> {
    let cfg = run_config(source, out)?;
    let _lock = cfg.output.as_deref().map(DirLock::acquire).transpose()?;
    let result = run_pipeline(&cfg)?;
    let m = &result.manifest;
    println!(
        "keyframes {} sparse {} dense {} cleaned {}",
        m.keyframes, m.sparse_points, m.dense_points, m.cleaned_points
    );
    if let Some(r) = &result.report {
        println!("rmse {} max {} relative {}", r.rmse, r.max_error, r.relative_rmse);
    }
    Ok(())
}

fn evaluate(mesh: &Path, gt: &Path, length: f64, out: Option<&Path>, seed: u64) -> Result<(), PipelineError> {
    if !(length > 0.0) {
        return Err(PipelineError::Config("--length must be positive".into()));
    }
    let load = |p: &Path| read_mesh_ply(p).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())));
    let (rec, truth) = (load(mesh)?, load(gt)?);
    let (report, _) = evaluate_meshes(&rec, &truth, length, None, &AlignConfig::default(), seed)
        .map_err(|e| stage_err(recon_core::pipeline::Stage::Evaluate)(&e))?;
    let json = report.to_json();
    match out {
        Some(p) => std::fs::write(p, &json).map_err(|e| PipelineError::Export(format!("{}: {e}", p.display())))?,
        None => print!("{json}"),
    }
    Ok(())
}

fn run_sweep(source: &Source, resolutions: &[u32], out: Option<PathBuf>) -> Result<(), PipelineError> {
    let cfg = run_config(source, out)?;
    let _lock = cfg.output.as_deref().map(DirLock::acquire).transpose()?;
    let table = sweep(&cfg, resolutions)?;
    let csv = table.to_csv();
    if let Some(dir) = &cfg.output {
        std::fs::write(dir.join("sweep.csv"), &csv).map_err(|e| PipelineError::Export(e.to_string()))?;
    }
    print!("{csv}");
    println!("monotone {}", table.monotone);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match &cli.command {
        Command::Generate {
            source,
            resolution,
            frames,
            out,
        } => generate(source, *resolution, *frames, out),
        Command::Reconstruct { source, out } => reconstruct(source, out.clone()),
        Command::Evaluate {
            mesh,
            gt,
            length,
            out,
            seed,
        } => evaluate(mesh, gt, *length, out.as_deref(), *seed),
        Command::Sweep {
            source,
            resolutions,
            out,
        } => run_sweep(source, resolutions, out.clone()),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("recon: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
