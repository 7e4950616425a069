//! Synthetic endoluminal scenes: a textured tube swept along a spline
//! centreline, a jittered camera trajectory through it, and a ray-cast
//! renderer with a camera-mounted spotlight.

use std::path::Path;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::features::{BinaryDescriptor, FrameFeatures, Keypoint};
use crate::geometry::{CameraIntrinsics, CameraPose, GeometryError};
use crate::image::{ColorImage, GrayImage};
use crate::mesh::TriangleMesh;

#[derive(thiserror::Error, Debug)]
pub enum SynthError {
    #[error("invalid tube spec: {0}")]
    InvalidSpec(String),
    #[error("centreline self-intersects near arc length {0:.3}")]
    SelfIntersection(f64),
    #[error("trajectory needs {needed:.3} units of centreline, only {available:.3} available")]
    TrajectoryTooLong { needed: f64, available: f64 },
    #[error("trajectory leaves the lumen: {0}")]
    Containment(String),
    #[error("camera is outside the mesh")]
    CameraOutside,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("scene spec: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Uniform Catmull-Rom spline through control points, with reflected
/// phantom end points, plus a scalar radius profile on the same parameter.
#[derive(Debug, Clone)]
pub struct Centerline {
    points: Vec<Vector3<f64>>,
    radii: Vec<f64>,
    /// Cumulative arc length at each control point.
    cumulative: Vec<f64>,
}

const GL5_X: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GL5_W: [f64; 5] = [
    0.236_926_885_056_189,
    0.478_628_670_499_366,
    0.568_888_888_888_889,
    0.478_628_670_499_366,
    0.236_926_885_056_189,
];

fn gauss5(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let h = 0.5 * (b - a);
    let m = 0.5 * (a + b);
    GL5_X.iter().zip(GL5_W).map(|(x, w)| w * f(m + h * x)).sum::<f64>() * h
}

fn adaptive_gauss(f: &impl Fn(f64) -> f64, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let left = gauss5(f, a, m);
    let right = gauss5(f, m, b);
    if depth == 0 || (left + right - whole).abs() <= tol {
        return left + right;
    }
    adaptive_gauss(f, a, m, left, 0.5 * tol, depth - 1) + adaptive_gauss(f, m, b, right, 0.5 * tol, depth - 1)
}

impl Centerline {
    pub fn new(points: Vec<Vector3<f64>>, radii: Vec<f64>) -> Result<Self, SynthError> {
        if points.len() < 2 {
            return Err(SynthError::InvalidSpec("centreline needs at least 2 control points".into()));
        }
        let radii = match radii.len() {
            1 => vec![radii[0]; points.len()],
            n if n == points.len() => radii,
            n => {
                return Err(SynthError::InvalidSpec(format!(
                    "radius profile has {n} values, expected 1 or {}",
                    points.len()
                )))
            }
        };
        if radii.iter().any(|r| !(*r > 0.0)) {
            return Err(SynthError::InvalidSpec("radius must be positive".into()));
        }
        let mut c = Self {
            points,
            radii,
            cumulative: Vec::new(),
        };
        let mut acc = 0.0;
        c.cumulative.push(0.0);
        for seg in 0..c.segments() {
            acc += c.segment_length(seg);
            c.cumulative.push(acc);
        }
        Ok(c)
    }

    pub fn segments(&self) -> usize {
        self.points.len() - 1
    }

    pub fn control_points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    fn ctrl(&self, i: isize) -> Vector3<f64> {
        let n = self.points.len() as isize;
        if i < 0 {
            2.0 * self.points[0] - self.points[1]
        } else if i >= n {
            2.0 * self.points[(n - 1) as usize] - self.points[(n - 2) as usize]
        } else {
            self.points[i as usize]
        }
    }

    fn ctrl_r(&self, i: isize) -> f64 {
        let n = self.radii.len() as isize;
        if i < 0 {
            2.0 * self.radii[0] - self.radii[1]
        } else if i >= n {
            2.0 * self.radii[(n - 1) as usize] - self.radii[(n - 2) as usize]
        } else {
            self.radii[i as usize]
        }
    }

    fn locate(&self, u: f64) -> (isize, f64) {
        let u = u.clamp(0.0, self.segments() as f64);
        let seg = (u.floor() as usize).min(self.segments() - 1);
        (seg as isize, u - seg as f64)
    }

    /// Catmull-Rom basis weights for value, first and second derivative.
    fn basis(t: f64) -> ([f64; 4], [f64; 4], [f64; 4]) {
        let (t2, t3) = (t * t, t * t * t);
        (
            [
                0.5 * (-t3 + 2.0 * t2 - t),
                0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
                0.5 * (-3.0 * t3 + 4.0 * t2 + t),
                0.5 * (t3 - t2),
            ],
            [
                0.5 * (-3.0 * t2 + 4.0 * t - 1.0),
                0.5 * (9.0 * t2 - 10.0 * t),
                0.5 * (-9.0 * t2 + 8.0 * t + 1.0),
                0.5 * (3.0 * t2 - 2.0 * t),
            ],
            [
                0.5 * (-6.0 * t + 4.0),
                0.5 * (18.0 * t - 10.0),
                0.5 * (-18.0 * t + 8.0),
                0.5 * (6.0 * t - 2.0),
            ],
        )
    }

    fn eval(&self, u: f64, which: usize) -> Vector3<f64> {
        let (seg, t) = self.locate(u);
        let b = Self::basis(t);
        let w = [b.0, b.1, b.2][which];
        (0..4).map(|k| self.ctrl(seg - 1 + k as isize) * w[k]).sum()
    }

    pub fn position(&self, u: f64) -> Vector3<f64> {
        self.eval(u, 0)
    }

    pub fn derivative(&self, u: f64) -> Vector3<f64> {
        self.eval(u, 1)
    }

    pub fn second_derivative(&self, u: f64) -> Vector3<f64> {
        self.eval(u, 2)
    }

    pub fn radius(&self, u: f64) -> f64 {
        let (seg, t) = self.locate(u);
        let (w, _, _) = Self::basis(t);
        (0..4).map(|k| self.ctrl_r(seg - 1 + k as isize) * w[k]).sum::<f64>().max(1e-9)
    }

    pub fn curvature(&self, u: f64) -> f64 {
        let d1 = self.derivative(u);
        let d2 = self.second_derivative(u);
        let n = d1.norm();
        if n == 0.0 {
            return 0.0;
        }
        d1.cross(&d2).norm() / (n * n * n)
    }

    fn segment_length(&self, seg: usize) -> f64 {
        self.partial_length(seg, 1.0)
    }

    fn partial_length(&self, seg: usize, t: f64) -> f64 {
        let f = |x: f64| self.derivative(seg as f64 + x).norm();
        let whole = gauss5(&f, 0.0, t);
        adaptive_gauss(&f, 0.0, t, whole, 1e-13 * whole.max(1e-300), 30)
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().expect("non-empty")
    }

    /// Arc length from the start to parameter `u`.
    pub fn arc_length_at(&self, u: f64) -> f64 {
        let (seg, t) = self.locate(u);
        self.cumulative[seg as usize] + self.partial_length(seg as usize, t)
    }

    /// Parameter at arc length `s` (clamped to the curve).
    pub fn param_at(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, self.length());
        let seg = self.cumulative.partition_point(|&c| c <= s).saturating_sub(1).min(self.segments() - 1);
        let target = s - self.cumulative[seg];
        let seg_len = self.cumulative[seg + 1] - self.cumulative[seg];
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let mut t = if seg_len > 0.0 { target / seg_len } else { 0.0 };
        for _ in 0..50 {
            let g = self.partial_length(seg, t) - target;
            if g.abs() <= 1e-13 * seg_len.max(1.0) {
                break;
            }
            if g > 0.0 {
                hi = t;
            } else {
                lo = t;
            }
            let d = self.derivative(seg as f64 + t).norm();
            let newton = if d > 0.0 { t - g / d } else { f64::NAN };
            t = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        }
        seg as f64 + t
    }
}

/// Double-reflection rotation-minimising frames along sampled tangents.
fn rotation_minimizing_frames(positions: &[Vector3<f64>], tangents: &[Vector3<f64>]) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let t0 = tangents[0];
    let helper = if t0.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let mut r = (helper - t0 * helper.dot(&t0)).normalize();
    let mut frames = vec![(r, t0.cross(&r))];
    for i in 0..positions.len() - 1 {
        let v1 = positions[i + 1] - positions[i];
        let c1 = v1.dot(&v1);
        let (r_l, t_l) = if c1 > 0.0 {
            (r - v1 * (2.0 / c1 * v1.dot(&r)), tangents[i] - v1 * (2.0 / c1 * v1.dot(&tangents[i])))
        } else {
            (r, tangents[i])
        };
        let v2 = tangents[i + 1] - t_l;
        let c2 = v2.dot(&v2);
        r = if c2 > 0.0 { r_l - v2 * (2.0 / c2 * v2.dot(&r_l)) } else { r_l };
        r = (r - tangents[i + 1] * r.dot(&tangents[i + 1])).normalize();
        frames.push((r, tangents[i + 1].cross(&r)));
    }
    frames
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded lattice value noise in `[-1, 1]` with smoothstep interpolation.
#[derive(Debug, Clone, Copy)]
pub struct ValueNoise {
    seed: u64,
}

impl ValueNoise {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    #[inline]
    fn lattice(&self, x: i64, y: i64, z: i64) -> f64 {
        let h = splitmix(
            self.seed
                ^ (x as u64).wrapping_mul(0x8CB9_2BA7_2F3D_8DD7)
                ^ (y as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93)
                ^ (z as u64).wrapping_mul(0xA076_1D64_78BD_642F),
        );
        (h >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    }

    pub fn sample(&self, p: &Vector3<f64>) -> f64 {
        let (fx, fy, fz) = (p.x.floor(), p.y.floor(), p.z.floor());
        let (ix, iy, iz) = (fx as i64, fy as i64, fz as i64);
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty, tz) = (s(p.x - fx), s(p.y - fy), s(p.z - fz));
        let mut acc = 0.0;
        for dz in 0..2 {
            let wz = if dz == 0 { 1.0 - tz } else { tz };
            for dy in 0..2 {
                let wy = if dy == 0 { 1.0 - ty } else { ty };
                for dx in 0..2 {
                    let wx = if dx == 0 { 1.0 - tx } else { tx };
                    acc += wx * wy * wz * self.lattice(ix + dx, iy + dy, iz + dz);
                }
            }
        }
        acc
    }
}

fn default_segments_v() -> usize {
    64
}

fn default_bump() -> f64 {
    0.08
}

fn default_haustra_period() -> f64 {
    1.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeSpec {
    pub centerline: Vec<[f64; 3]>,
    /// One value (constant radius) or one per control point.
    pub radius: Vec<f64>,
    #[serde(default)]
    pub texture_seed: u64,
    /// Displacement amplitude as a fraction of the radius.
    #[serde(default = "default_bump")]
    pub bump_amplitude: f64,
    /// Spacing of haustra-like rings along the centreline, in radii.
    #[serde(default = "default_haustra_period")]
    pub haustra_period: f64,
    /// Rings along the centreline; 0 picks a spacing matching the
    /// circumferential resolution.
    #[serde(default)]
    pub segments_u: usize,
    #[serde(default = "default_segments_v")]
    pub segments_v: usize,
}

/// One centreline station in the scene frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterSample {
    pub position: Vector3<f64>,
    pub tangent: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub radius: f64,
    pub arc_length: f64,
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub mesh: TriangleMesh,
    pub centerline_length: f64,
    /// Dense stations along the centreline (same frame as the mesh).
    pub stations: Vec<CenterSample>,
    /// Arc length of every mesh vertex's ring, for texturing.
    pub vertex_arc: Vec<f64>,
    pub texture_seed: u64,
}

impl GroundTruth {
    /// Applies a rigid transform `x ↦ R x + t` to mesh and stations.
    pub fn transformed(&self, pose: &CameraPose) -> Self {
        let r = pose.rotation;
        Self {
            mesh: self.mesh.map_vertices(|v| pose.transform(v)),
            centerline_length: self.centerline_length,
            stations: self
                .stations
                .iter()
                .map(|s| CenterSample {
                    position: pose.transform(&s.position),
                    tangent: r * s.tangent,
                    normal: r * s.normal,
                    ..*s
                })
                .collect(),
            vertex_arc: self.vertex_arc.clone(),
            texture_seed: self.texture_seed,
        }
    }

    /// Open wall section between arc lengths `s0` and `s1`: wall triangles
    /// whose vertices all lie in the range. Cap triangles (all vertices on
    /// one ring) are dropped.
    pub fn wall_segment(&self, s0: f64, s1: f64) -> TriangleMesh {
        let arc = &self.vertex_arc;
        let inside = |v: u32| arc[v as usize] >= s0 && arc[v as usize] <= s1;
        let triangles: Vec<[u32; 3]> = self
            .mesh
            .triangles
            .iter()
            .filter(|t| {
                let a = t.map(|v| arc[v as usize]);
                let cap = a[0] == a[1] && a[1] == a[2];
                !cap && t.iter().all(|&v| inside(v))
            })
            .copied()
            .collect();
        TriangleMesh::new(self.mesh.vertices.clone(), triangles).compacted()
    }

    /// Nearest centreline station to `p` and the distance to it.
    pub fn nearest_station(&self, p: &Vector3<f64>) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, s) in self.stations.iter().enumerate() {
            let d = (s.position - p).norm();
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }
}

fn check_self_intersection(line: &Centerline) -> Result<(), SynthError> {
    let len = line.length();
    let r_max = line.radii.iter().copied().fold(0.0, f64::max);
    let step = (0.25 * r_max).min(len / 8.0);
    let n = (len / step).ceil() as usize + 1;
    let samples: Vec<(f64, Vector3<f64>, f64)> = (0..n)
        .map(|i| {
            let s = (i as f64 * step).min(len);
            let u = line.param_at(s);
            (s, line.position(u), line.radius(u) * line.curvature(u))
        })
        .collect();
    for (s, _, kr) in &samples {
        if *kr >= 0.95 {
            return Err(SynthError::SelfIntersection(*s));
        }
    }
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let arc = samples[j].0 - samples[i].0;
            if arc > std::f64::consts::PI * r_max && (samples[j].1 - samples[i].1).norm() < 2.0 * r_max {
                return Err(SynthError::SelfIntersection(samples[j].0));
            }
        }
    }
    Ok(())
}

/// Sweeps a displaced circle along the centreline and caps both ends.
/// Faces are wound so normals point out of the lumen.
pub fn generate_tube(spec: &TubeSpec) -> Result<GroundTruth, SynthError> {
    if spec.segments_v < 8 || (spec.segments_u != 0 && spec.segments_u < 8) {
        return Err(SynthError::InvalidSpec("segments must be at least 8".into()));
    }
    if !(spec.bump_amplitude >= 0.0 && spec.bump_amplitude < 0.5) {
        return Err(SynthError::InvalidSpec("bump amplitude must be in [0, 0.5)".into()));
    }
    let points: Vec<Vector3<f64>> = spec.centerline.iter().map(|p| Vector3::from(*p)).collect();
    let line = Centerline::new(points, spec.radius.clone())?;
    check_self_intersection(&line)?;
    let len = line.length();
    let mean_r = line.radii.iter().sum::<f64>() / line.radii.len() as f64;
    let nv = spec.segments_v;
    let nu = if spec.segments_u == 0 {
        ((len / (std::f64::consts::TAU * mean_r / nv as f64)).ceil() as usize).max(8)
    } else {
        spec.segments_u
    };
    let arcs: Vec<f64> = (0..=nu).map(|i| len * i as f64 / nu as f64).collect();
    let params: Vec<f64> = arcs.iter().map(|&s| line.param_at(s)).collect();
    let positions: Vec<Vector3<f64>> = params.iter().map(|&u| line.position(u)).collect();
    let tangents: Vec<Vector3<f64>> = params.iter().map(|&u| line.derivative(u).normalize()).collect();
    let frames = rotation_minimizing_frames(&positions, &tangents);
    let noise = ValueNoise::new(spec.texture_seed ^ 0x5EED_B0B5);
    let period = spec.haustra_period * mean_r;

    let mut vertices = Vec::with_capacity((nu + 1) * nv);
    let mut vertex_arc = Vec::with_capacity((nu + 1) * nv);
    let mut stations = Vec::with_capacity(nu + 1);
    for i in 0..=nu {
        let r0 = line.radius(params[i]);
        let (nrm, bin) = frames[i];
        stations.push(CenterSample {
            position: positions[i],
            tangent: tangents[i],
            normal: nrm,
            radius: r0,
            arc_length: arcs[i],
        });
        for k in 0..nv {
            let theta = std::f64::consts::TAU * k as f64 / nv as f64;
            let (st, ct) = theta.sin_cos();
            let bump = if spec.bump_amplitude > 0.0 {
                let ring = -(std::f64::consts::PI * arcs[i] / period).sin().abs().powi(8);
                let n = noise.sample(&Vector3::new(2.0 * ct, 2.0 * st, 1.5 * arcs[i] / mean_r));
                spec.bump_amplitude * (0.6 * ring + 0.4 * n)
            } else {
                0.0
            };
            let r = r0 * (1.0 + bump);
            vertices.push(positions[i] + (nrm * ct + bin * st) * r);
            vertex_arc.push(arcs[i]);
        }
    }
    let idx = |i: usize, k: usize| (i * nv + k % nv) as u32;
    let mut triangles = Vec::with_capacity(2 * nu * nv + 2 * (nv - 2));
    for i in 0..nu {
        for k in 0..nv {
            let (a, b, c, d) = (idx(i, k), idx(i, k + 1), idx(i + 1, k), idx(i + 1, k + 1));
            // Frame (N, B, T) is right-handed, so (a, b, d) winds outwards.
            triangles.push([a, b, d]);
            triangles.push([a, d, c]);
        }
    }
    for k in 1..nv - 1 {
        triangles.push([idx(0, 0), idx(0, k + 1), idx(0, k)]);
        triangles.push([idx(nu, 0), idx(nu, k), idx(nu, k + 1)]);
    }
    let mesh = TriangleMesh::new(vertices, triangles);
    Ok(GroundTruth {
        mesh,
        centerline_length: len,
        stations,
        vertex_arc,
        texture_seed: spec.texture_seed,
    })
}

fn default_jitter_t() -> f64 {
    0.15
}

fn default_jitter_r() -> f64 {
    0.02
}

fn default_frames() -> usize {
    100
}

fn default_speed() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    #[serde(default = "default_frames")]
    pub frame_count: usize,
    /// Scene units per frame along the centreline.
    #[serde(default = "default_speed")]
    pub speed: f64,
    /// Bound on the lateral offset, as a fraction of the local radius.
    #[serde(default = "default_jitter_t")]
    pub jitter_translation: f64,
    /// Per-frame cap on the change of orientation, radians.
    #[serde(default = "default_jitter_r")]
    pub jitter_rotation: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            frame_count: default_frames(),
            speed: default_speed(),
            jitter_translation: default_jitter_t(),
            jitter_rotation: default_jitter_r(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Poses relative to the first camera (the first pose is the identity).
    pub poses: Vec<CameraPose>,
    /// First camera pose in the tube's own frame.
    pub anchor: CameraPose,
}

fn interpolate_station(gt: &GroundTruth, s: f64) -> CenterSample {
    let st = &gt.stations;
    let i = st.partition_point(|x| x.arc_length <= s).clamp(1, st.len() - 1);
    let (a, b) = (&st[i - 1], &st[i]);
    let w = ((s - a.arc_length) / (b.arc_length - a.arc_length)).clamp(0.0, 1.0);
    let tangent = (a.tangent * (1.0 - w) + b.tangent * w).normalize();
    let normal = a.normal * (1.0 - w) + b.normal * w;
    let normal = (normal - tangent * normal.dot(&tangent)).normalize();
    CenterSample {
        position: a.position * (1.0 - w) + b.position * w,
        tangent,
        normal,
        radius: a.radius * (1.0 - w) + b.radius * w,
        arc_length: s,
    }
}

/// Camera path along the centreline with bounded lateral and rotational
/// jitter. Poses are world-to-camera with the camera looking along +z.
pub fn generate_trajectory(gt: &GroundTruth, spec: &TrajectorySpec) -> Result<Trajectory, SynthError> {
    if spec.frame_count == 0 {
        return Err(SynthError::InvalidSpec("frame_count must be positive".into()));
    }
    if !(spec.jitter_translation >= 0.0 && spec.jitter_translation < 0.8) {
        return Err(SynthError::Containment(format!(
            "jitter_translation {} must be in [0, 0.8)",
            spec.jitter_translation
        )));
    }
    let needed = spec.speed * spec.frame_count as f64;
    let available = gt.centerline_length;
    if needed > available || spec.speed < 0.0 {
        return Err(SynthError::TrajectoryTooLong { needed, available });
    }
    let travel = spec.speed * (spec.frame_count - 1) as f64;
    let first_r = gt.stations[0].radius;
    let s0 = (0.5 * (available - travel)).min(first_r).max(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut offset = Vector2::<f64>::zeros();
    let mut angles = Vector3::<f64>::zeros();
    let mut poses_world: Vec<CameraPose> = Vec::with_capacity(spec.frame_count);
    let mut prev_rot: Option<Matrix3<f64>> = None;
    for k in 0..spec.frame_count {
        let s = s0 + spec.speed * k as f64;
        let st = interpolate_station(gt, s);
        let binormal = st.tangent.cross(&st.normal);
        let bound = spec.jitter_translation * st.radius;
        if spec.jitter_translation > 0.0 {
            let step = Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            offset = offset * 0.85 + step * (0.25 * bound);
            let n = offset.norm();
            if n >= 0.999 * bound {
                offset *= 0.999 * bound / n;
            }
        }
        let center = st.position + st.normal * offset.x + binormal * offset.y;
        if spec.jitter_rotation > 0.0 {
            let step = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            angles = angles * 0.9 + step * (0.5 * spec.jitter_rotation);
            angles = angles.map(|a| a.clamp(-0.15, 0.15));
        }
        // Camera axes as rows: x = normal, y = binormal × ..., z = tangent.
        let base = Matrix3::from_rows(&[st.normal.transpose(), binormal.transpose(), st.tangent.transpose()]);
        let jitter = Rotation3::from_euler_angles(angles.x, angles.y, angles.z).into_inner();
        let mut rot = jitter * base;
        if let (Some(prev), true) = (prev_rot, spec.jitter_rotation > 0.0) {
            let q_prev = UnitQuaternion::from_matrix(&prev);
            let q_new = UnitQuaternion::from_matrix(&rot);
            let angle = q_prev.angle_to(&q_new);
            let cap = spec.jitter_rotation;
            if angle > cap {
                let q = q_prev.slerp(&q_new, cap / angle * (1.0 - 1e-9));
                rot = q.to_rotation_matrix().into_inner();
            }
        }
        prev_rot = Some(rot);
        poses_world.push(CameraPose::from_center(rot, &center));
    }
    let anchor = poses_world[0];
    let inv = anchor.inverse();
    let mut poses: Vec<CameraPose> = poses_world.iter().map(|p| p.compose(&inv)).collect();
    poses[0] = CameraPose::identity();
    Ok(Trajectory { poses, anchor })
}

/// Camera centres of a world-to-camera trajectory.
pub fn camera_centers(poses: &[CameraPose]) -> Vec<Vector3<f64>> {
    poses.iter().map(|p| p.center()).collect()
}

fn default_resolution() -> u32 {
    500
}

fn default_cone() -> f64 {
    65f64.to_radians()
}

fn default_falloff() -> f64 {
    1.2
}

fn default_ambient() -> f64 {
    0.12
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    #[serde(default = "default_resolution")]
    pub resolution: u32,
    /// Spotlight cone half-angle, radians.
    #[serde(default = "default_cone")]
    pub cone_half_angle: f64,
    #[serde(default = "default_falloff")]
    pub falloff: f64,
    #[serde(default = "default_ambient")]
    pub ambient: f64,
    /// Disable to render untextured (shading only) images.
    #[serde(default = "default_true")]
    pub texture: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            resolution: default_resolution(),
            cone_half_angle: default_cone(),
            falloff: default_falloff(),
            ambient: default_ambient(),
            texture: true,
        }
    }
}

impl RenderConfig {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics, GeometryError> {
        build_intrinsics(self.resolution)
    }
}

/// Pinhole intrinsics for a square sensor of the given resolution.
pub fn build_intrinsics(resolution: u32) -> Result<CameraIntrinsics, GeometryError> {
    CameraIntrinsics::from_resolution(resolution)
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    lo: Vector3<f64>,
    hi: Vector3<f64>,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            lo: Vector3::repeat(f64::INFINITY),
            hi: Vector3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vector3<f64>) {
        self.lo = self.lo.inf(p);
        self.hi = self.hi.sup(p);
    }

    fn merge(&mut self, o: &Aabb) {
        self.lo = self.lo.inf(&o.lo);
        self.hi = self.hi.sup(&o.hi);
    }

    #[inline]
    fn hit(&self, origin: &Vector3<f64>, inv_dir: &Vector3<f64>, t_max: f64) -> Option<f64> {
        let mut t0 = 0.0f64;
        let mut t1 = t_max;
        for a in 0..3 {
            let ta = (self.lo[a] - origin[a]) * inv_dir[a];
            let tb = (self.hi[a] - origin[a]) * inv_dir[a];
            let (near, far) = if ta <= tb { (ta, tb) } else { (tb, ta) };
            t0 = if near > t0 { near } else { t0 };
            t1 = if far < t1 { far } else { t1 };
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }
}

#[derive(Debug, Clone)]
struct BvhNode {
    bounds: Aabb,
    /// Leaf: `count > 0`, triangles `first..first+count`; inner: children at `first`, `first+1`.
    first: u32,
    count: u32,
}

/// Bounding volume hierarchy over a triangle mesh for closest-hit queries.
#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<BvhNode>,
    tris: Vec<u32>,
    v0: Vec<Vector3<f64>>,
    e1: Vec<Vector3<f64>>,
    e2: Vec<Vector3<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub triangle: usize,
    pub u: f64,
    pub v: f64,
}

impl Bvh {
    pub fn new(mesh: &TriangleMesh) -> Self {
        let n = mesh.triangles.len();
        let mut v0 = Vec::with_capacity(n);
        let mut e1 = Vec::with_capacity(n);
        let mut e2 = Vec::with_capacity(n);
        let mut boxes = Vec::with_capacity(n);
        let mut centroids = Vec::with_capacity(n);
        for t in 0..n {
            let [a, b, c] = mesh.triangle(t);
            v0.push(a);
            e1.push(b - a);
            e2.push(c - a);
            let mut bb = Aabb::empty();
            bb.grow(&a);
            bb.grow(&b);
            bb.grow(&c);
            boxes.push(bb);
            centroids.push((a + b + c) / 3.0);
        }
        let mut tris: Vec<u32> = (0..n as u32).collect();
        let mut nodes = Vec::new();
        if n > 0 {
            nodes.push(BvhNode {
                bounds: Aabb::empty(),
                first: 0,
                count: 0,
            });
            Self::build(&mut nodes, 0, &mut tris, 0, n, &boxes, &centroids);
        }
        Self { nodes, tris, v0, e1, e2 }
    }

    fn build(
        nodes: &mut Vec<BvhNode>,
        id: usize,
        tris: &mut [u32],
        start: usize,
        end: usize,
        boxes: &[Aabb],
        centroids: &[Vector3<f64>],
    ) {
        let mut bounds = Aabb::empty();
        let mut cb = Aabb::empty();
        for &t in &tris[start..end] {
            bounds.merge(&boxes[t as usize]);
            cb.grow(&centroids[t as usize]);
        }
        let extent = cb.hi - cb.lo;
        let axis = extent.imax();
        if end - start <= 4 || extent[axis] <= 0.0 {
            nodes[id] = BvhNode {
                bounds,
                first: start as u32,
                count: (end - start) as u32,
            };
            return;
        }
        let mid = (start + end) / 2;
        tris[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            centroids[a as usize][axis]
                .total_cmp(&centroids[b as usize][axis])
                .then(a.cmp(&b))
        });
        let left = nodes.len();
        nodes.push(BvhNode {
            bounds: Aabb::empty(),
            first: 0,
            count: 0,
        });
        nodes.push(BvhNode {
            bounds: Aabb::empty(),
            first: 0,
            count: 0,
        });
        nodes[id] = BvhNode {
            bounds,
            first: left as u32,
            count: 0,
        };
        Self::build(nodes, left, tris, start, mid, boxes, centroids);
        Self::build(nodes, left + 1, tris, mid, end, boxes, centroids);
    }

    /// Möller-Trumbore closest hit with `t > 1e-9`.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv = Vector3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut best: Option<Hit> = None;
        let mut t_best = f64::INFINITY;
        let mut stack = [0u32; 64];
        let mut sp = 1;
        while sp > 0 {
            sp -= 1;
            let node = &self.nodes[stack[sp] as usize];
            if node.bounds.hit(origin, &inv, t_best).is_none() {
                continue;
            }
            if node.count > 0 {
                for &t in &self.tris[node.first as usize..(node.first + node.count) as usize] {
                    let t = t as usize;
                    let p = dir.cross(&self.e2[t]);
                    let det = self.e1[t].dot(&p);
                    if det.abs() < 1e-18 {
                        continue;
                    }
                    let inv_det = 1.0 / det;
                    let s = origin - self.v0[t];
                    let u = s.dot(&p) * inv_det;
                    if !(0.0..=1.0).contains(&u) {
                        continue;
                    }
                    let q = s.cross(&self.e1[t]);
                    let v = dir.dot(&q) * inv_det;
                    if v < 0.0 || u + v > 1.0 {
                        continue;
                    }
                    let tt = self.e2[t].dot(&q) * inv_det;
                    if tt > 1e-9 && (tt < t_best || (tt == t_best && best.is_some_and(|b| t < b.triangle))) {
                        t_best = tt;
                        best = Some(Hit { t: tt, triangle: t, u, v });
                    }
                }
            } else {
                let (a, b) = (node.first, node.first + 1);
                let da = self.nodes[a as usize].bounds.hit(origin, &inv, t_best);
                let db = self.nodes[b as usize].bounds.hit(origin, &inv, t_best);
                // Push the farther child first so the nearer one is visited next.
                match (da, db) {
                    (Some(x), Some(y)) => {
                        let (near, far) = if x <= y { (a, b) } else { (b, a) };
                        stack[sp] = far;
                        stack[sp + 1] = near;
                        sp += 2;
                    }
                    (Some(_), None) => {
                        stack[sp] = a;
                        sp += 1;
                    }
                    (None, Some(_)) => {
                        stack[sp] = b;
                        sp += 1;
                    }
                    (None, None) => {}
                }
            }
        }
        best
    }
}

/// Renders frames of one scene; owns the acceleration structure.
pub struct Renderer<'a> {
    gt: &'a GroundTruth,
    bvh: Bvh,
    face_normals: Vec<Vector3<f64>>,
    noise: ValueNoise,
    ref_distance: f64,
}

/// Texture octave frequencies, cycles per scene unit.
const OCTAVES: [(f64, f64); 3] = [(4.0, 0.45), (10.0, 0.35), (24.0, 0.3)];

impl<'a> Renderer<'a> {
    pub fn new(gt: &'a GroundTruth) -> Self {
        let face_normals = (0..gt.mesh.triangles.len())
            .map(|t| {
                let n = gt.mesh.face_normal(t);
                let l = n.norm();
                if l > 0.0 {
                    n / l
                } else {
                    n
                }
            })
            .collect();
        let ref_distance = gt.stations.iter().map(|s| s.radius).sum::<f64>() / gt.stations.len().max(1) as f64;
        Self {
            gt,
            bvh: Bvh::new(&gt.mesh),
            face_normals,
            noise: ValueNoise::new(gt.texture_seed),
            ref_distance,
        }
    }

    pub fn bvh(&self) -> &Bvh {
        &self.bvh
    }

    /// World-space ray through the centre of pixel `(x, y)`.
    pub fn pixel_ray(k: &CameraIntrinsics, pose: &CameraPose, x: usize, y: usize) -> (Vector3<f64>, Vector3<f64>) {
        let d_cam = k.unproject(&Vector2::new(x as f64 + 0.5, y as f64 + 0.5));
        let dir = pose.rotation.transpose() * d_cam;
        (pose.center(), dir)
    }

    /// True when rays from the centre hit the inside of the surface.
    pub fn camera_inside(&self, pose: &CameraPose) -> bool {
        let c = pose.center();
        let dirs = [
            Vector3::new(0.577, 0.577, 0.577),
            Vector3::new(-0.6, 0.3, 0.742),
            Vector3::new(0.2, -0.9, -0.39),
        ];
        let inside = dirs
            .iter()
            .filter(|d| {
                self.bvh
                    .intersect(&c, d)
                    .is_some_and(|h| self.face_normals[h.triangle].dot(d) > 0.0)
            })
            .count();
        inside >= 2
    }

    fn texture(&self, p: &Vector3<f64>, arc: f64, footprint: f64) -> f64 {
        let mut acc = 0.0;
        for (k, (freq, amp)) in OCTAVES.iter().enumerate() {
            // Fade octaves whose wavelength approaches the pixel footprint.
            let fade = (1.5 - 2.0 * freq * footprint).clamp(0.0, 1.0);
            if fade > 0.0 {
                let q = p * *freq + Vector3::repeat(17.0 * k as f64);
                acc += amp * fade * self.noise.sample(&q);
            }
        }
        let ring_freq = 1.0 / (0.6 * self.ref_distance);
        let ring_fade = (1.5 - 2.0 * ring_freq * footprint).clamp(0.0, 1.0);
        let ring = 0.15 * ring_fade * (std::f64::consts::TAU * arc * ring_freq).sin();
        (0.6 + 0.9 * acc + ring).clamp(0.1, 1.0)
    }

    fn shade(&self, k: &CameraIntrinsics, pose: &CameraPose, cfg: &RenderConfig, x: usize, y: usize) -> f64 {
        let (origin, dir) = Self::pixel_ray(k, pose, x, y);
        let Some(hit) = self.bvh.intersect(&origin, &dir) else {
            return 0.0;
        };
        let dir_len = dir.norm();
        let dist = hit.t * dir_len;
        let unit = dir / dir_len;
        let n = self.face_normals[hit.triangle];
        let cos_in = n.dot(&unit).abs();
        let cos_axis = 1.0 / dir_len;
        let cos_cone = cfg.cone_half_angle.cos();
        let cone = ((cos_axis - cos_cone) / (1.0 - cos_cone)).clamp(0.0, 1.0).sqrt();
        let atten = (self.ref_distance / dist).powf(cfg.falloff);
        let tex = if cfg.texture {
            let [a, b, c] = self.gt.mesh.triangles[hit.triangle];
            let w = 1.0 - hit.u - hit.v;
            let arc = self.gt.vertex_arc[a as usize] * w
                + self.gt.vertex_arc[b as usize] * hit.u
                + self.gt.vertex_arc[c as usize] * hit.v;
            let p = origin + dir * hit.t;
            let footprint = dist / (k.focal_px * cos_axis * cos_in.max(0.2));
            self.texture(&p, arc, footprint)
        } else {
            1.0
        };
        let light = cfg.ambient + (1.0 - cfg.ambient) * (0.3 + 0.7 * cos_in) * cone * atten;
        (light.min(1.0) * tex).clamp(0.0, 1.0)
    }

    /// Gray-level frame, quantised to 8 bits.
    pub fn render(&self, pose: &CameraPose, cfg: &RenderConfig) -> Result<GrayImage, SynthError> {
        if !self.camera_inside(pose) {
            return Err(SynthError::CameraOutside);
        }
        let k = cfg.intrinsics()?;
        let res = cfg.resolution as usize;
        let pixels: Vec<f32> = (0..res)
            .into_par_iter()
            .flat_map_iter(|y| {
                let k = &k;
                (0..res).map(move |x| self.shade(k, pose, cfg, x, y) as f32)
            })
            .collect();
        Ok(GrayImage::new(res, res, pixels).expect("dimensions").quantized())
    }

    /// Colour variant with a mucosa-like tint; its luma is the gray frame.
    pub fn render_color(&self, pose: &CameraPose, cfg: &RenderConfig) -> Result<ColorImage, SynthError> {
        let gray = self.render(pose, cfg)?;
        Ok(tint(&gray))
    }
}

/// Maps a gray frame to RGB with channel gains whose luma weights sum to 1.
pub fn tint(gray: &GrayImage) -> ColorImage {
    const GAIN: [f32; 3] = [1.45, 0.88, 0.62];
    let pixels = gray
        .pixels()
        .iter()
        .map(|&v| [(v * GAIN[0]).min(1.0), (v * GAIN[1]).min(1.0), (v * GAIN[2]).min(1.0)])
        .collect();
    ColorImage::new(gray.width(), gray.height(), pixels).expect("dimensions")
}

/// Convenience wrapper building a renderer for a single frame.
pub fn render_frame(gt: &GroundTruth, pose: &CameraPose, cfg: &RenderConfig) -> Result<GrayImage, SynthError> {
    Renderer::new(gt).render(pose, cfg)
}

/// Complete scene description as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub tube: TubeSpec,
    #[serde(default)]
    pub trajectory: TrajectorySpec,
    #[serde(default)]
    pub render: RenderConfig,
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        toml::from_str(text).map_err(|e| SynthError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene spec serialises")
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Named presets: `gentle-bend`, `sharp-bend`, `long`.
    pub fn preset(name: &str) -> Option<Self> {
        let arc = |center: Vector3<f64>, r: f64, a0: f64, a1: f64, n: usize| -> Vec<[f64; 3]> {
            (0..n)
                .map(|i| {
                    let a = a0 + (a1 - a0) * i as f64 / (n - 1) as f64;
                    [center.x + r * a.cos(), center.y + r * a.sin(), center.z]
                })
                .collect()
        };
        match name {
            "gentle-bend" => {
                let centerline = vec![
                    [0.0, 0.0, 0.0],
                    [1.75, 0.05, 0.1],
                    [3.5, 0.35, 0.2],
                    [5.15, 0.9, 0.25],
                    [6.6, 1.7, 0.3],
                ];
                Some(Self {
                    tube: TubeSpec {
                        centerline,
                        radius: vec![1.0, 1.05, 0.95, 1.0, 1.05],
                        texture_seed: 11,
                        bump_amplitude: default_bump(),
                        haustra_period: default_haustra_period(),
                        segments_u: 0,
                        segments_v: 64,
                    },
                    trajectory: TrajectorySpec::default(),
                    render: RenderConfig::default(),
                })
            }
            "sharp-bend" => {
                let mut centerline = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
                centerline.extend(arc(Vector3::new(2.0, 3.0, 0.0), 3.0, -std::f64::consts::FRAC_PI_2, 0.0, 6));
                centerline.extend([[5.0, 4.0, 0.0], [5.0, 5.0, 0.0]]);
                Some(Self {
                    tube: TubeSpec {
                        centerline,
                        radius: vec![1.0],
                        texture_seed: 23,
                        bump_amplitude: default_bump(),
                        haustra_period: default_haustra_period(),
                        segments_u: 0,
                        segments_v: 64,
                    },
                    trajectory: TrajectorySpec {
                        frame_count: 120,
                        ..TrajectorySpec::default()
                    },
                    render: RenderConfig::default(),
                })
            }
            "long" => {
                let centerline: Vec<[f64; 3]> = (0..9)
                    .map(|i| {
                        let x = 1.75 * i as f64;
                        [x, 0.8 * (x / 4.0).sin(), 0.4 * (x / 5.0).sin()]
                    })
                    .collect();
                Some(Self {
                    tube: TubeSpec {
                        centerline,
                        radius: vec![1.0],
                        texture_seed: 37,
                        bump_amplitude: default_bump(),
                        haustra_period: default_haustra_period(),
                        segments_u: 0,
                        segments_v: 64,
                    },
                    trajectory: TrajectorySpec {
                        frame_count: 240,
                        ..TrajectorySpec::default()
                    },
                    render: RenderConfig::default(),
                })
            }
            _ => None,
        }
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["gentle-bend", "sharp-bend", "long"]
    }
}

/// Ground truth re-expressed in the first camera's frame, plus the
/// trajectory and rendering settings.
#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub ground_truth: GroundTruth,
    pub trajectory: Trajectory,
}

impl Scene {
    pub fn generate(spec: &SceneSpec) -> Result<Self, SynthError> {
        let tube = generate_tube(&spec.tube)?;
        let trajectory = generate_trajectory(&tube, &spec.trajectory)?;
        let ground_truth = tube.transformed(&trajectory.anchor);
        Ok(Self {
            spec: spec.clone(),
            ground_truth,
            trajectory,
        })
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics, GeometryError> {
        self.spec.render.intrinsics()
    }

    /// Arc lengths of the first and last camera positions.
    pub fn traversed_range(&self) -> (f64, f64) {
        let arc = |p: &CameraPose| self.ground_truth.stations[self.ground_truth.nearest_station(&p.center()).0].arc_length;
        let first = self.trajectory.poses.first().map(arc).unwrap_or(0.0);
        let last = self.trajectory.poses.last().map(arc).unwrap_or(0.0);
        (first.min(last), first.max(last))
    }

    /// Ground-truth wall over the traversed section, used for evaluation.
    pub fn traversed_segment(&self) -> TriangleMesh {
        let (s0, s1) = self.traversed_range();
        self.ground_truth.wall_segment(s0, s1)
    }

    /// Renders every frame of the trajectory.
    pub fn render_all(&self) -> Result<Vec<GrayImage>, SynthError> {
        let renderer = Renderer::new(&self.ground_truth);
        self.trajectory
            .poses
            .iter()
            .map(|p| renderer.render(p, &self.spec.render))
            .collect()
    }
}

/// Feature frames produced by projecting a known point set, bypassing
/// rendering and detection.
#[derive(Debug, Clone)]
pub struct SyntheticFrames {
    pub frames: Vec<FrameFeatures>,
    /// Source point index per keypoint, per frame.
    pub point_ids: Vec<Vec<usize>>,
}

/// Options for [`synthetic_feature_frames`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticFeatureConfig {
    pub width: usize,
    pub height: usize,
    /// Standard deviation of the pixel noise.
    pub noise_px: f64,
    /// Descriptor bits flipped per observation.
    pub bit_flips: usize,
    pub seed: u64,
}

/// Projects `points` into every pose. Each point gets a fixed random
/// descriptor; every observation flips a few bits and jitters the pixel.
/// Points behind the camera or outside the image are not observed.
pub fn synthetic_feature_frames(
    points: &[Vector3<f64>],
    poses: &[CameraPose],
    k: &CameraIntrinsics,
    cfg: &SyntheticFeatureConfig,
) -> SyntheticFrames {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = rand_distr::Normal::new(0.0, cfg.noise_px.max(0.0)).expect("finite sigma");
    let base: Vec<BinaryDescriptor> = (0..points.len())
        .map(|i| {
            let h = splitmix(cfg.seed ^ (i as u64).wrapping_mul(0xA24B_AED4_963E_E407));
            BinaryDescriptor([splitmix(h), splitmix(h ^ 1), splitmix(h ^ 2), splitmix(h ^ 3)])
        })
        .collect();
    let mut frames = Vec::with_capacity(poses.len());
    let mut ids = Vec::with_capacity(poses.len());
    for pose in poses {
        let mut f = FrameFeatures {
            width: cfg.width,
            height: cfg.height,
            keypoints: Vec::new(),
            descriptors: Vec::new(),
            level_scales: vec![1.0],
        };
        let mut frame_ids = Vec::new();
        for (i, x) in points.iter().enumerate() {
            let Some(px) = k.project_camera(&pose.transform(x)) else {
                continue;
            };
            let px = px + Vector2::new(rng.sample(noise), rng.sample(noise));
            if px.x < 0.0 || px.y < 0.0 || px.x >= cfg.width as f64 || px.y >= cfg.height as f64 {
                continue;
            }
            let mut d = base[i];
            for _ in 0..cfg.bit_flips {
                let b = rng.random_range(0..256);
                d.0[b / 64] ^= 1u64 << (b % 64);
            }
            f.keypoints.push(Keypoint {
                position: px,
                level: 0,
                orientation: 0.0,
                response: 1.0,
            });
            f.descriptors.push(d);
            frame_ids.push(i);
        }
        frames.push(f);
        ids.push(frame_ids);
    }
    SyntheticFrames { frames, point_ids: ids }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight(len: f64, bumps: f64) -> TubeSpec {
        TubeSpec {
            centerline: vec![[0.0, 0.0, 0.0], [0.0, 0.0, len]],
            radius: vec![1.0],
            texture_seed: 1,
            bump_amplitude: bumps,
            haustra_period: 1.2,
            segments_u: 20,
            segments_v: 32,
        }
    }

    #[test]
    fn straight_cylinder() {
        let gt = generate_tube(&straight(10.0, 0.0)).unwrap();
        assert!((gt.centerline_length - 10.0).abs() < 1e-12);
        for v in &gt.mesh.vertices {
            assert!(((v.x * v.x + v.y * v.y).sqrt() - 1.0).abs() < 1e-9);
        }
        assert!(gt.mesh.is_closed_manifold());
        assert_eq!(gt.mesh.euler_characteristic(), 2);
    }

    #[test]
    fn outward_winding() {
        let gt = generate_tube(&straight(4.0, 0.0)).unwrap();
        for t in 0..gt.mesh.triangles.len() {
            let [a, b, c] = gt.mesh.triangle(t);
            let centroid = (a + b + c) / 3.0;
            let n = gt.mesh.face_normal(t);
            let cap = (a.z - b.z).abs() < 1e-12 && (a.z - c.z).abs() < 1e-12;
            let out = if cap {
                Vector3::new(0.0, 0.0, centroid.z - 2.0)
            } else {
                Vector3::new(centroid.x, centroid.y, 0.0)
            };
            assert!(n.dot(&out) > 0.0, "triangle {t}");
        }
    }

    #[test]
    fn quarter_torus_length() {
        let n = 256;
        let centerline: Vec<[f64; 3]> = (0..n)
            .map(|i| {
                let a = std::f64::consts::FRAC_PI_2 * i as f64 / (n - 1) as f64;
                [5.0 * a.cos(), 5.0 * a.sin(), 0.0]
            })
            .collect();
        let spec = TubeSpec {
            centerline,
            radius: vec![1.0],
            texture_seed: 0,
            bump_amplitude: 0.05,
            haustra_period: 1.2,
            segments_u: 0,
            segments_v: 16,
        };
        let gt = generate_tube(&spec).unwrap();
        assert!((gt.centerline_length - 5.0 * std::f64::consts::FRAC_PI_2).abs() < 1e-6);
        assert!(gt.mesh.is_closed_manifold());
    }

    #[test]
    fn rejects_self_intersection() {
        let spec = TubeSpec {
            centerline: vec![[0.0, 0.0, 0.0], [5.0, 0.0, 0.0], [5.0, 5.0, 0.0], [0.5, 0.0, 0.5]],
            ..straight(1.0, 0.0)
        };
        assert!(matches!(generate_tube(&spec), Err(SynthError::SelfIntersection(_))));
    }

    #[test]
    fn trajectory_contracts() {
        let gt = generate_tube(&straight(10.0, 0.0)).unwrap();
        let still = TrajectorySpec {
            frame_count: 20,
            speed: 0.2,
            jitter_translation: 0.0,
            jitter_rotation: 0.0,
            seed: 3,
        };
        let tr = generate_trajectory(&gt, &still).unwrap();
        assert_eq!(tr.poses[0], CameraPose::identity());
        for p in &tr.poses {
            let c = p.center();
            assert!(c.x.abs() < 1e-9 && c.y.abs() < 1e-9 && c.z >= -1e-9);
            // Viewing direction stays along the axis.
            assert!((p.rotation.row(2).transpose() - Vector3::z()).norm() < 1e-9);
        }
        let jittery = TrajectorySpec {
            jitter_translation: 0.5,
            jitter_rotation: 0.03,
            ..still.clone()
        };
        let tr = generate_trajectory(&gt, &jittery).unwrap();
        let world: Vec<CameraPose> = tr.poses.iter().map(|p| p.compose(&tr.anchor)).collect();
        for w in world.windows(2) {
            assert!(w[0].rotation_angle_to(&w[1]) <= 0.03 + 1e-9);
        }
        for w in &world {
            let c = w.center();
            assert!((c.x * c.x + c.y * c.y).sqrt() < 0.8);
        }
        let bad = TrajectorySpec {
            jitter_translation: 0.9,
            ..still.clone()
        };
        assert!(matches!(generate_trajectory(&gt, &bad), Err(SynthError::Containment(_))));
        let long = TrajectorySpec {
            frame_count: 200,
            ..still
        };
        assert!(matches!(generate_trajectory(&gt, &long), Err(SynthError::TrajectoryTooLong { .. })));
    }

    #[test]
    fn rotation_symmetric_render() {
        let gt = generate_tube(&straight(10.0, 0.0)).unwrap();
        let cfg = RenderConfig {
            resolution: 64,
            texture: false,
            ..RenderConfig::default()
        };
        let pose = CameraPose::from_center(Matrix3::identity(), &Vector3::new(0.0, 0.0, 1.0));
        let img = render_frame(&gt, &pose, &cfg).unwrap();
        assert_eq!((img.width(), img.height()), (64, 64));
        let n = 64;
        for y in 0..n {
            for x in 0..n {
                let r = img.get(n - 1 - y, x);
                assert!((img.get(x, y) - r).abs() <= 1e-6, "({x},{y})");
            }
        }
    }

    #[test]
    fn farther_is_darker() {
        let gt = generate_tube(&straight(10.0, 0.0)).unwrap();
        let r = Renderer::new(&gt);
        let cfg = RenderConfig {
            texture: false,
            ..RenderConfig::default()
        };
        let k = build_intrinsics(cfg.resolution).unwrap();
        let near = CameraPose::from_center(Matrix3::identity(), &Vector3::new(0.0, 0.0, 5.0));
        let far = CameraPose::from_center(Matrix3::identity(), &Vector3::new(0.0, 0.0, 3.0));
        // The central pixel sees the far cap head-on from both positions.
        let a = r.shade(&k, &near, &cfg, 250, 250);
        let b = r.shade(&k, &far, &cfg, 250, 250);
        assert!(b < a);
    }

    #[test]
    fn renderer_projector_consistency() {
        let gt = generate_tube(&straight(10.0, 0.05)).unwrap();
        let r = Renderer::new(&gt);
        let k = build_intrinsics(200).unwrap();
        let pose = CameraPose::from_center(so3(0.05, -0.03, 0.02), &Vector3::new(0.1, -0.2, 1.0));
        for (x, y) in [(3, 7), (100, 100), (150, 20), (199, 199)] {
            let (o, d) = Renderer::pixel_ray(&k, &pose, x, y);
            let hit = r.bvh().intersect(&o, &d).unwrap();
            let p = o + d * hit.t;
            let px = k.project_camera(&pose.transform(&p)).unwrap();
            assert!((px - Vector2::new(x as f64 + 0.5, y as f64 + 0.5)).norm() < 1e-6);
        }
    }

    fn so3(a: f64, b: f64, c: f64) -> Matrix3<f64> {
        crate::geometry::so3_exp(&Vector3::new(a, b, c))
    }

    #[test]
    fn outside_camera_rejected() {
        let gt = generate_tube(&straight(4.0, 0.0)).unwrap();
        let pose = CameraPose::from_center(Matrix3::identity(), &Vector3::new(3.0, 0.0, 1.0));
        let cfg = RenderConfig {
            resolution: 16,
            ..RenderConfig::default()
        };
        assert!(matches!(render_frame(&gt, &pose, &cfg), Err(SynthError::CameraOutside)));
    }

    #[test]
    fn determinism_and_presets() {
        for name in SceneSpec::preset_names() {
            let mut spec = SceneSpec::preset(name).unwrap();
            spec.render.resolution = 48;
            spec.trajectory.frame_count = 3;
            let a = Scene::generate(&spec).unwrap();
            let b = Scene::generate(&spec).unwrap();
            assert_eq!(a.ground_truth.mesh, b.ground_truth.mesh);
            assert!(a.ground_truth.mesh.is_closed_manifold(), "{name}");
            let fa = a.render_all().unwrap();
            let fb = b.render_all().unwrap();
            assert_eq!(fa, fb);
            let back = SceneSpec::from_toml(&spec.to_toml()).unwrap();
            assert_eq!(back, spec);
        }
    }

    #[test]
    fn length_additivity() {
        let a = Centerline::new(vec![Vector3::zeros(), Vector3::new(1.0, 0.5, 0.0), Vector3::new(2.0, 2.0, 0.0)], vec![1.0])
            .unwrap();
        let b = Centerline::new(vec![Vector3::new(2.0, 2.0, 0.0), Vector3::new(2.5, 3.0, 1.0), Vector3::new(2.0, 5.0, 1.0)], vec![1.0])
            .unwrap();
        let total_pieces = a.length() + b.length();
        let whole = a.arc_length_at(2.0) + b.arc_length_at(2.0);
        assert!((total_pieces - whole).abs() < 1e-9);
        let u = a.param_at(0.7 * a.length());
        assert!((a.arc_length_at(u) - 0.7 * a.length()).abs() < 1e-9);
    }
}
