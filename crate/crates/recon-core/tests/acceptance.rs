//! Acceptance harness: one PASS/FAIL line per criterion.
//!
//! The end-to-end criteria (7-10) share pipeline runs on the gentle-bend
//! preset, so the whole suite takes tens of minutes on a single core.
//! Set `RECON_ACCEPT_1500=1` to also report the ungated 1500 px point.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Matrix2x3, SMatrix, UnitQuaternion, Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use recon_core::align::{compute_errors, horn_align_ordered, sample_surface_uniform, SimilarityTransform};
use recon_core::bundle::{
    ba_optimize, observation_jacobian, residual, rms_reprojection, BaMode, BaProblem, Observation,
};
use recon_core::epipolar::{
    essential_from_fundamental, estimate_fundamental_8pt, normalize_gauge, recover_pose, triangulate, Correspondence,
};
use recon_core::geometry::{so3_exp, CameraIntrinsics, CameraPose, ProjectionMatrix};
use recon_core::mesh::TriangleMesh;
use recon_core::pipeline::{run_pipeline, PipelineConfig, PipelineOutput};
use recon_core::slam::{
    densify_map, filter_sub_cloud, initialize_map, DensifyConfig, SlamConfig, SlamError, SlamMap, SlotOutcome,
};
use recon_core::surface::{build_octree, extract_mesh, solve_indicator, OrientedPointCloud};
use recon_core::synth::{synthetic_feature_frames, Scene, SceneSpec, SyntheticFeatureConfig};

type Matrix2x6 = SMatrix<f64, 2, 6>;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn random_rotation(rng: &mut impl Rng, max_angle: f64) -> UnitQuaternion<f64> {
    let axis = loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n: f64 = v.norm();
        if n > 1e-3 && n <= 1.0 {
            break v / n;
        }
    };
    UnitQuaternion::from_scaled_axis(axis * rng.random_range(0.0..max_angle))
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// 1. Horn alignment exactness.
fn horn_exactness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let pts: Vec<Vector3<f64>> = (0..100)
            .map(|_| Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
            .collect();
        let truth = SimilarityTransform::new(
            rng.random_range(0.1..10.0),
            random_rotation(&mut rng, std::f64::consts::PI),
            Vector3::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)),
        );
        let moved: Vec<Vector3<f64>> = pts.iter().map(|p| truth.apply(p)).collect();
        let Ok(fit) = horn_align_ordered(&pts, &moved) else {
            return verdict(false, "alignment returned an error".into());
        };
        let scale_err = (fit.scale - truth.scale).abs() / truth.scale;
        let rot_err = fit.rotation.angle_to(&truth.rotation);
        let t_err = (fit.translation - truth.translation).norm() / truth.translation.norm().max(1.0);
        worst = worst.max(scale_err).max(rot_err).max(t_err);
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-9 && secs < 1.0,
        format!("max parameter rel err {worst:.2e} (tol 1e-9), {secs:.3} s (< 1 s)"),
    )
}

// 2. Two-view oracle equivalence.
fn two_view_oracle() -> Verdict {
    let k = CameraIntrinsics::from_resolution(500).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut max_res, mut max_r, mut max_t, mut max_x) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let q = random_rotation(&mut rng, 0.3);
        let dir = random_rotation(&mut rng, std::f64::consts::PI) * Vector3::x();
        let pose2 = CameraPose::from_quaternion(&q, dir);
        let mut points = Vec::new();
        let mut corrs = Vec::new();
        while points.len() < 50 {
            let x = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(4.0..10.0));
            let (Some(a), Some(b)) = (k.project_camera(&x), k.project_camera(&pose2.transform(&x))) else {
                continue;
            };
            if [a, b].iter().all(|p| p.x >= 0.0 && p.y >= 0.0 && p.x < 500.0 && p.y < 500.0) {
                points.push(x);
                corrs.push(Correspondence::new(a, b));
            }
        }
        let Ok(f) = estimate_fundamental_8pt(&corrs) else {
            return verdict(false, "eight-point estimate failed".into());
        };
        let f = normalize_gauge(&f);
        for c in &corrs {
            let r = (c.x2.push(1.0).transpose() * f * c.x1.push(1.0))[0];
            max_res = max_res.max(r.abs());
        }
        let Ok(pose) = recover_pose(&essential_from_fundamental(&f, &k), &corrs, &k) else {
            return verdict(false, "pose recovery failed".into());
        };
        max_r = max_r.max((pose.rotation - pose2.rotation).norm());
        max_t = max_t.max(pose.translation.angle(&pose2.translation));
        let p1 = ProjectionMatrix::compose(&k, &CameraPose::identity()).unwrap();
        let p2 = ProjectionMatrix::compose(&k, &pose2).unwrap();
        for (c, x) in corrs.iter().zip(&points) {
            let Ok(t) = triangulate(&c.x1, &c.x2, &p1, &p2).and_then(|h| Ok(h.dehomogenize().unwrap())) else {
                return verdict(false, "triangulation failed".into());
            };
            max_x = max_x.max((t - x).norm());
        }
    }
    verdict(
        max_res <= 1e-9 && max_r <= 1e-6 && max_t <= 1e-4 && max_x <= 1e-9,
        format!(
            "max |x2'Fx1| {max_res:.2e} (1e-9), R err {max_r:.2e} (1e-6), t angle {max_t:.2e} rad (1e-4), point err {max_x:.2e} (1e-9)"
        ),
    )
}

fn ba_scene(rng: &mut ChaCha8Rng, n_poses: usize, n_points: usize) -> BaProblem {
    let k = CameraIntrinsics::from_resolution(500).unwrap();
    let mut poses = vec![CameraPose::identity()];
    for j in 1..n_poses {
        let omega = Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
        let c = Vector3::new(0.3 * j as f64, rng.random_range(-0.2..0.2), 0.1 * j as f64);
        poses.push(CameraPose::from_center(so3_exp(&omega), &c));
    }
    let mut points = Vec::new();
    let mut observations = Vec::new();
    while points.len() < n_points {
        let x = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(5.0..10.0));
        let obs: Vec<Observation> = poses
            .iter()
            .enumerate()
            .filter_map(|(j, p)| {
                let u = k.project_camera(&p.transform(&x))?;
                (u.x > 0.0 && u.y > 0.0 && u.x < 500.0 && u.y < 500.0).then_some(Observation {
                    pose: j,
                    point: points.len(),
                    pixel: u,
                })
            })
            .collect();
        if obs.len() >= 2 {
            observations.extend(obs);
            points.push(x);
        }
    }
    BaProblem::new(poses, points, observations, k)
}

// 3. Bundle adjustment correctness.
fn bundle_adjustment() -> Verdict {
    let k = CameraIntrinsics::from_resolution(500).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-6;
    let mut worst_jac = 0.0f64;
    let mut checked = 0;
    while checked < 100 {
        let omega = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        let pose = CameraPose::from_center(
            so3_exp(&omega),
            &Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
        );
        let x = pose.inverse().transform(&Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(4.0..8.0),
        ));
        let obs = Vector2::new(rng.random_range(0.0..500.0), rng.random_range(0.0..500.0));
        let Some((_, jp, jx)) = observation_jacobian(&k, &pose, &x, &obs) else {
            continue;
        };
        let mut num_p = Matrix2x6::zeros();
        for c in 0..6 {
            let mut d = Vector6::zeros();
            d[c] = h;
            let (w, t) = (d.fixed_rows::<3>(0).into_owned(), d.fixed_rows::<3>(3).into_owned());
            let plus = residual(&k, &pose.retract(&w, &t), &x, &obs).unwrap();
            let minus = residual(&k, &pose.retract(&-w, &-t), &x, &obs).unwrap();
            num_p.set_column(c, &((plus - minus) / (2.0 * h)));
        }
        let mut num_x = Matrix2x3::zeros();
        for c in 0..3 {
            let mut d = Vector3::zeros();
            d[c] = h;
            let col = (residual(&k, &pose, &(x + d), &obs).unwrap() - residual(&k, &pose, &(x - d), &obs).unwrap()) / (2.0 * h);
            num_x.set_column(c, &col);
        }
        worst_jac = worst_jac.max((jp - num_p).norm() / jp.norm()).max((jx - num_x).norm() / jx.norm());
        checked += 1;
    }

    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut worst_rms = 0.0f64;
    let mut monotone = true;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let mut p = ba_scene(&mut rng, 4, 60);
        for o in &mut p.observations {
            o.pixel += Vector2::new(rng.sample(normal), rng.sample(normal));
        }
        for x in &mut p.points {
            *x += Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
        }
        for pose in p.poses.iter_mut().skip(2) {
            *pose = pose.retract(&Vector3::new(0.01, -0.01, 0.005), &Vector3::new(0.02, 0.0, -0.02));
        }
        let (out, rep) = ba_optimize(p, BaMode::Full, 100, 1e-10);
        monotone &= rep.final_cost <= rep.initial_cost;
        worst_rms = worst_rms.max(rms_reprojection(&out));
    }
    verdict(
        worst_jac <= 1e-5 && worst_rms <= 1.5 && monotone,
        format!(
            "jacobian rel err {worst_jac:.2e} (1e-5), worst RMS {worst_rms:.3} px (1.5), final<=initial on all 20: {monotone}"
        ),
    )
}

// 4. Degeneracy guard.
fn degeneracy_guard() -> Verdict {
    let mut spec = SceneSpec::preset("gentle-bend").unwrap();
    spec.trajectory.frame_count = 15;
    let cfg = SlamConfig::default();
    let (mut rejected, mut accepted) = (0, 0);
    let mut unexpected = Vec::new();
    for i in 0..50u64 {
        spec.trajectory.seed = 1000 + i;
        spec.tube.texture_seed = 1000 + i;
        let scene = Scene::generate(&spec).unwrap();
        let k = scene.intrinsics().unwrap();
        let res = spec.render.resolution as usize;
        let points = sample_surface_uniform(&scene.ground_truth.mesh, 3000, i).unwrap();
        let feat = SyntheticFeatureConfig {
            width: res,
            height: res,
            noise_px: 0.5,
            bit_flips: 8,
            seed: i,
        };

        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let axis = random_rotation(&mut rng, std::f64::consts::PI) * Vector3::z();
        let step = rng.random_range(0.01..0.03);
        let rotations: Vec<CameraPose> = (0..12)
            .map(|j| CameraPose::new(so3_exp(&(axis * step * j as f64)), Vector3::zeros()).unwrap())
            .collect();
        let frames = synthetic_feature_frames(&points, &rotations, &k, &feat).frames;
        match initialize_map(&frames, &k, &cfg) {
            Err(SlamError::InitializationFailed { .. }) => rejected += 1,
            other => unexpected.push(format!("rotation {i}: {:?}", other.map(|m| m.keyframes.len()))),
        }

        let frames = synthetic_feature_frames(&points, &scene.trajectory.poses, &k, &feat).frames;
        match initialize_map(&frames, &k, &cfg) {
            Ok(_) => accepted += 1,
            Err(e) => unexpected.push(format!("generic {i}: {e}")),
        }
    }
    let mut detail = format!("pure rotation rejected {rejected}/50, generic accepted {accepted}/50");
    if let Some(first) = unexpected.first() {
        detail.push_str(&format!(" (first unexpected: {first})"));
    }
    verdict(rejected == 50 && accepted == 50, detail)
}

fn mesh_samples(mesh: &TriangleMesh, n: usize) -> Vec<Vector3<f64>> {
    sample_surface_uniform(mesh, n, 17).unwrap_or_default()
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    (s / n.max(1) as f64).sqrt()
}

// 5. Poisson fidelity.
fn poisson_fidelity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let r = 1.0;
    let points: Vec<Vector3<f64>> = (0..10_000)
        .map(|_| loop {
            let v = Vector3::new(rng.sample(normal), rng.sample(normal), rng.sample(normal));
            if v.norm() > 1e-9 {
                break v.normalize() * r;
            }
        })
        .collect();
    let normals = points.iter().map(|p| -p.normalize()).collect();
    let cloud = OrientedPointCloud {
        points,
        normals,
        source_camera: None,
    };
    let start = Instant::now();
    let sphere = build_octree(&cloud, 5)
        .and_then(|t| solve_indicator(&t, &cloud).and_then(|f| extract_mesh(&f, &t)));
    let secs = start.elapsed().as_secs_f64();
    let Ok(sphere) = sphere else {
        return verdict(false, "sphere reconstruction failed".into());
    };
    let sphere_rmse = rms(mesh_samples(&sphere, 20_000).iter().map(|p| p.norm() - r)) / r;
    let euler = sphere.euler_characteristic();

    // Open cylinder, radius 1, length 4, axis z; lateral band away from the ends.
    let len = 4.0;
    let points: Vec<Vector3<f64>> = (0..10_000)
        .map(|_| {
            let th = rng.random_range(0.0..std::f64::consts::TAU);
            Vector3::new(r * th.cos(), r * th.sin(), rng.random_range(-len / 2.0..len / 2.0))
        })
        .collect();
    let normals = points.iter().map(|p| -Vector3::new(p.x, p.y, 0.0).normalize()).collect();
    let cloud = OrientedPointCloud {
        points,
        normals,
        source_camera: None,
    };
    let cylinder = build_octree(&cloud, 5)
        .and_then(|t| solve_indicator(&t, &cloud).and_then(|f| extract_mesh(&f, &t)));
    let Ok(cylinder) = cylinder else {
        return verdict(false, "cylinder reconstruction failed".into());
    };
    let lateral: Vec<f64> = mesh_samples(&cylinder, 20_000)
        .iter()
        .filter(|p| p.z.abs() < 0.4 * len)
        .map(|p| p.x.hypot(p.y) - r)
        .collect();
    let cyl_rmse = rms(lateral.into_iter()) / r;
    verdict(
        sphere_rmse < 0.02 && euler == 2 && secs < 30.0 && cyl_rmse < 0.03,
        format!(
            "sphere RMSE {:.3}% of r (< 2%), Euler {euler} (2), {secs:.1} s (< 30 s); cylinder lateral RMSE {:.3}% of r (< 3%)",
            100.0 * sphere_rmse,
            100.0 * cyl_rmse
        ),
    )
}

// 6. Metric oracle.
fn metric_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    for _ in 0..20 {
        let cloud = |rng: &mut ChaCha8Rng| -> Vec<Vector3<f64>> {
            (0..1000)
                .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect()
        };
        let (gt, rec) = (cloud(&mut rng), cloud(&mut rng));
        let l = rng.random_range(0.5..5.0);
        let d: Vec<f64> = gt
            .iter()
            .map(|g| rec.iter().map(|r| (g - r).norm()).fold(f64::INFINITY, f64::min))
            .collect();
        let mut sum = 0.0;
        for x in &d {
            sum += x * x;
        }
        let rmse = (sum / d.len() as f64).sqrt();
        let max = d.iter().copied().fold(0.0, f64::max);
        let e = compute_errors(&gt, &rec, l).unwrap();
        let same = e.rmse.to_bits() == rmse.to_bits()
            && e.max_error.to_bits() == max.to_bits()
            && e.relative_rmse.to_bits() == (rmse / l).to_bits();
        mismatches += usize::from(!same);
    }
    verdict(mismatches == 0, format!("{mismatches}/20 pairs differ from the brute-force loop"))
}

struct EndToEnd {
    dir: PathBuf,
    out: PipelineOutput,
    seconds: f64,
}

fn run_gentle_bend(seed: u64, resolution: u32, dir: &Path) -> Result<EndToEnd, String> {
    let mut cfg = PipelineConfig::preset("gentle-bend");
    cfg.seed = seed;
    cfg.resolution = Some(resolution);
    cfg.frame_count = Some(100);
    cfg.output = Some(dir.to_path_buf());
    let start = Instant::now();
    let out = run_pipeline(&cfg).map_err(|e| e.to_string())?;
    Ok(EndToEnd {
        dir: dir.to_path_buf(),
        out,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn relative_rmse(run: &EndToEnd) -> f64 {
    run.out.report.map_or(f64::NAN, |r| r.relative_rmse)
}

// 7. End-to-end synthetic analog.
fn end_to_end(run: &Result<EndToEnd, String>) -> Verdict {
    match run {
        Ok(r) => {
            let rel = relative_rmse(r);
            verdict(
                rel <= 0.10 && r.seconds < 600.0,
                format!("relative RMSE {rel:.4} (<= 0.10), {:.0} s (< 600 s)", r.seconds),
            )
        }
        Err(e) => verdict(false, format!("pipeline failed: {e}")),
    }
}

// 8. Resolution trend.
fn resolution_trend(low: &[Result<EndToEnd, String>], high: &[Result<EndToEnd, String>]) -> Verdict {
    let collect = |runs: &[Result<EndToEnd, String>]| -> Result<Vec<f64>, String> {
        runs.iter().map(|r| r.as_ref().map(relative_rmse).map_err(Clone::clone)).collect()
    };
    match (collect(low), collect(high)) {
        (Ok(a), Ok(b)) => {
            let (ma, mb) = (median(&a), median(&b));
            let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
            verdict(
                mb <= ma,
                format!("median relative RMSE 500 px {ma:.4} -> 800 px {mb:.4} (non-increasing); 500: [{}] 800: [{}]", fmt(&a), fmt(&b)),
            )
        }
        (Err(e), _) | (_, Err(e)) => verdict(false, format!("a run failed: {e}")),
    }
}

// 9. Densification branch coverage and density.
fn densification(run: &Result<EndToEnd, String>) -> Verdict {
    // Skip branch: keyframes without covisible neighbours.
    let mut map = SlamMap::empty(CameraIntrinsics::from_resolution(100).unwrap(), SlamConfig::default());
    let empty = recon_core::features::FrameFeatures {
        width: 100,
        height: 100,
        keypoints: Vec::new(),
        descriptors: Vec::new(),
        level_scales: vec![1.0],
    };
    map.insert_keyframe(0, CameraPose::identity(), empty.clone(), BTreeMap::new());
    map.insert_keyframe(1, CameraPose::identity(), empty, BTreeMap::new());
    let isolated = densify_map(&map, &BTreeMap::new(), &DensifyConfig::default());
    let skip = isolated.slots.iter().all(|s| matches!(s.outcome, SlotOutcome::Skipped { n_cv: 0 }));

    // Drop branch: most raw points far beyond the reference spread.
    let reference: Vec<Vector3<f64>> = (0..50).map(|i| Vector3::new((i as f64 * 0.4).cos(), (i as f64 * 0.4).sin(), 0.0)).collect();
    let far: Vec<Vector3<f64>> = (0..60).map(|i| Vector3::new(10.0 + 0.1 * i as f64, 0.0, 0.0)).collect();
    let raw: Vec<Vector3<f64>> = reference.iter().take(40).copied().chain(far).collect();
    let drop = filter_sub_cloud(&raw, &reference, &DensifyConfig::default()).is_err();

    let Ok(run) = run else {
        return verdict(false, "gentle-bend run failed".into());
    };
    let m = &run.out.manifest;
    let kept: usize = run
        .out
        .dense
        .as_ref()
        .map(|d| {
            d.slots
                .iter()
                .map(|s| match s.outcome {
                    SlotOutcome::Kept { kept, .. } => kept,
                    _ => 0,
                })
                .sum()
        })
        .unwrap_or(0);
    let healthy = m.slots.kept > 0 && kept == m.dense_points;
    let ratio = m.dense_points as f64 / m.sparse_points.max(1) as f64;
    verdict(
        skip && drop && healthy && ratio >= 5.0,
        format!(
            "skip {skip}, drop {drop}, concatenation {healthy} ({} kept / {} skipped / {} dropped slots); dense {} / sparse {} = {ratio:.1}x (>= 5x)",
            m.slots.kept, m.slots.skipped, m.slots.dropped, m.dense_points, m.sparse_points
        ),
    )
}

// 10. Determinism.
fn determinism(first: &Result<EndToEnd, String>, second: &Result<EndToEnd, String>) -> Verdict {
    let (Ok(a), Ok(b)) = (first, second) else {
        return verdict(false, "a run failed".into());
    };
    let same = |name: &str| -> bool {
        match (std::fs::read(a.dir.join(name)), std::fs::read(b.dir.join(name))) {
            (Ok(x), Ok(y)) => x == y,
            _ => false,
        }
    };
    let (report, mesh) = (same("report.json"), same("mesh.ply"));
    verdict(report && mesh, format!("report.json identical {report}, mesh.ply identical {mesh}"))
}

fn main() {
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut emit = |id: usize, name: &'static str, v: Verdict| {
        println!("{} [{id}] {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((id, name, v));
    };
    emit(1, "horn alignment exactness", horn_exactness());
    emit(2, "two-view oracle equivalence", two_view_oracle());
    emit(3, "bundle adjustment correctness", bundle_adjustment());
    emit(4, "degeneracy guard", degeneracy_guard());
    emit(5, "poisson fidelity", poisson_fidelity());
    emit(6, "metric oracle", metric_oracle());

    let root = tempfile::tempdir().expect("temp dir");
    let seeds = [7u64, 8, 9, 10, 11];
    let low: Vec<Result<EndToEnd, String>> = seeds
        .iter()
        .map(|&s| run_gentle_bend(s, 500, &root.path().join(format!("s{s}_500"))))
        .collect();
    emit(7, "end-to-end gentle-bend 500 px", end_to_end(&low[0]));
    emit(9, "densification branches and density", densification(&low[0]));
    let repeat = run_gentle_bend(seeds[0], 500, &root.path().join("s7_500_repeat"));
    emit(10, "determinism", determinism(&low[0], &repeat));
    let high: Vec<Result<EndToEnd, String>> = seeds
        .iter()
        .map(|&s| run_gentle_bend(s, 800, &root.path().join(format!("s{s}_800"))))
        .collect();
    emit(8, "resolution trend 500 -> 800 px", resolution_trend(&low, &high));

    if std::env::var("RECON_ACCEPT_1500").is_ok_and(|v| v == "1") {
        match run_gentle_bend(seeds[0], 1500, &root.path().join("s7_1500")) {
            Ok(r) => println!("INFO 1500 px seed 7 relative RMSE {:.4} (not gated)", relative_rmse(&r)),
            Err(e) => println!("INFO 1500 px seed 7 failed: {e} (not gated)"),
        }
    }

    results.sort_by_key(|r| r.0);
    let failed: Vec<String> = results.iter().filter(|r| !r.2.pass).map(|r| format!("{} ({})", r.0, r.1)).collect();
    println!("{}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
