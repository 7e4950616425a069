//! Levenberg-Marquardt bundle adjustment over camera poses and points.
//!
//! Rotations are updated on the manifold with left-multiplicative local
//! increments. Full mode eliminates the points with a Schur complement and
//! solves the dense reduced camera system; poses-only mode solves one 6×6
//! system per free pose and never touches the points.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Matrix6, SMatrix, Vector2, Vector3, Vector6};
use rayon::prelude::*;

use crate::geometry::{skew, so3_exp, CameraIntrinsics, CameraPose};

/// Squared-pixel penalty for an observation whose point lies behind the camera.
pub const BEHIND_CAMERA_PENALTY: f64 = 1e6;
pub const DEFAULT_HUBER_DELTA: f64 = 2.5;
pub const MIN_DAMPING: f64 = 1e-12;
pub const MAX_DAMPING: f64 = 1e12;
const MIN_DEPTH: f64 = 1e-9;

type Matrix2x6 = SMatrix<f64, 2, 6>;
type Matrix6x3 = SMatrix<f64, 6, 3>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub pose: usize,
    pub point: usize,
    pub pixel: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaProblem {
    pub poses: Vec<CameraPose>,
    pub points: Vec<Vector3<f64>>,
    pub observations: Vec<Observation>,
    pub intrinsics: CameraIntrinsics,
    /// Per-pose freeze flags. Pose 0 is frozen by default.
    pub fixed: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaMode {
    Full,
    PosesOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaOptions {
    pub max_iters: usize,
    /// Converged when the relative cost decrease of an accepted step falls below this.
    pub tol: f64,
    /// Huber threshold in pixels; `None` for plain least squares.
    pub huber: Option<f64>,
}

impl Default for BaOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-10,
            huber: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaReport {
    /// Objective before and after optimisation: the sum of squared pixel
    /// residuals, or of Huber losses when robust weighting is enabled.
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl BaProblem {
    pub fn new(
        poses: Vec<CameraPose>,
        points: Vec<Vector3<f64>>,
        observations: Vec<Observation>,
        intrinsics: CameraIntrinsics,
    ) -> Self {
        let mut fixed = vec![false; poses.len()];
        if let Some(f) = fixed.first_mut() {
            *f = true;
        }
        Self {
            poses,
            points,
            observations,
            intrinsics,
            fixed,
        }
    }

    pub fn is_fixed(&self, j: usize) -> bool {
        self.fixed.get(j).copied().unwrap_or(false)
    }

    pub fn indices_valid(&self) -> bool {
        self.observations
            .iter()
            .all(|o| o.pose < self.poses.len() && o.point < self.points.len())
    }

    /// Number of observations per point.
    pub fn observation_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.points.len()];
        for o in &self.observations {
            c[o.point] += 1;
        }
        c
    }
}

/// Reprojection residual `π(K, pose, X) − x`, or `None` behind the camera.
#[inline]
pub fn residual(k: &CameraIntrinsics, pose: &CameraPose, x: &Vector3<f64>, obs: &Vector2<f64>) -> Option<Vector2<f64>> {
    let p = pose.transform(x);
    if p.z <= MIN_DEPTH {
        return None;
    }
    k.project_camera(&p).map(|u| u - obs)
}

/// Residual and analytic Jacobians with respect to the pose increment
/// `(ω, δt)` and the point.
pub fn observation_jacobian(
    k: &CameraIntrinsics,
    pose: &CameraPose,
    x: &Vector3<f64>,
    obs: &Vector2<f64>,
) -> Option<(Vector2<f64>, Matrix2x6, Matrix2x3<f64>)> {
    let rx = pose.rotation * x;
    let p = rx + pose.translation;
    if p.z <= MIN_DEPTH {
        return None;
    }
    let f = k.focal_px;
    let iz = 1.0 / p.z;
    let r = Vector2::new(
        f * p.x * iz + k.principal_px.0 - obs.x,
        f * p.y * iz + k.principal_px.1 - obs.y,
    );
    let dproj = Matrix2x3::new(f * iz, 0.0, -f * p.x * iz * iz, 0.0, f * iz, -f * p.y * iz * iz);
    let d_omega = dproj * (-skew(&rx));
    let mut jp = Matrix2x6::zeros();
    jp.fixed_view_mut::<2, 3>(0, 0).copy_from(&d_omega);
    jp.fixed_view_mut::<2, 3>(0, 3).copy_from(&dproj);
    let jx = dproj * pose.rotation;
    Some((r, jp, jx))
}

#[inline]
fn robust(sq: f64, huber: Option<f64>) -> (f64, f64) {
    match huber {
        Some(d) if sq > d * d => {
            let n = sq.sqrt();
            (2.0 * d * n - d * d, d / n)
        }
        _ => (sq, 1.0),
    }
}

fn cost_with(problem: &BaProblem, huber: Option<f64>) -> f64 {
    let k = &problem.intrinsics;
    let per: Vec<f64> = problem
        .observations
        .par_iter()
        .map(|o| match residual(k, &problem.poses[o.pose], &problem.points[o.point], &o.pixel) {
            Some(r) => robust(r.norm_squared(), huber).0,
            None => BEHIND_CAMERA_PENALTY,
        })
        .collect();
    per.iter().sum()
}

/// Sum of squared pixel residuals; behind-camera observations add a
/// fixed penalty.
pub fn reprojection_cost(problem: &BaProblem) -> f64 {
    cost_with(problem, None)
}

/// `sqrt(cost / observations)`.
pub fn rms_reprojection(problem: &BaProblem) -> f64 {
    if problem.observations.is_empty() {
        return 0.0;
    }
    (reprojection_cost(problem) / problem.observations.len() as f64).sqrt()
}

pub fn ba_optimize(problem: BaProblem, mode: BaMode, max_iters: usize, tol: f64) -> (BaProblem, BaReport) {
    ba_optimize_with(
        problem,
        mode,
        &BaOptions {
            max_iters,
            tol,
            huber: None,
        },
    )
}

/// Per-pose parameter layout: index into the reduced system (or `None`
/// when frozen) and, for the scale-gauge pose, the translation basis whose
/// third column (the translation direction) is held fixed.
struct Layout {
    slot: Vec<Option<usize>>,
    free: usize,
    scale_pose: Option<(usize, Matrix3<f64>)>,
}

fn layout(problem: &BaProblem, mode: BaMode) -> Layout {
    let mut slot = vec![None; problem.poses.len()];
    let mut free = 0;
    for (j, s) in slot.iter_mut().enumerate() {
        if !problem.is_fixed(j) {
            *s = Some(free);
            free += 1;
        }
    }
    let n_fixed = problem.poses.len() - free;
    let mut scale_pose = None;
    if mode == BaMode::Full && n_fixed == 1 && problem.is_fixed(0) && problem.poses.len() > 1 && !problem.is_fixed(1) {
        let t = problem.poses[1].translation;
        if t.norm() > 0.0 {
            let d = t.normalize();
            let helper = if d.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
            let b1 = d.cross(&helper).normalize();
            let b2 = d.cross(&b1);
            scale_pose = Some((1, Matrix3::from_columns(&[b1, b2, d])));
        }
    }
    Layout { slot, free, scale_pose }
}

struct Linearized {
    /// Per free pose: `U_j` and `g_j`.
    u: Vec<Matrix6<f64>>,
    gc: Vec<Vector6<f64>>,
    /// Per point: `V_i` and `g_i`.
    v: Vec<Matrix3<f64>>,
    gp: Vec<Vector3<f64>>,
    /// Per (free pose, point) pair with shared observations.
    w: std::collections::BTreeMap<(usize, usize), Matrix6x3>,
}

fn linearize(problem: &BaProblem, mode: BaMode, lay: &Layout, huber: Option<f64>) -> Linearized {
    let k = &problem.intrinsics;
    let terms: Vec<Option<(Vector2<f64>, Matrix2x6, Matrix2x3<f64>, f64)>> = problem
        .observations
        .par_iter()
        .map(|o| {
            let (r, mut jp, jx) = observation_jacobian(k, &problem.poses[o.pose], &problem.points[o.point], &o.pixel)?;
            if let Some((j, q)) = &lay.scale_pose {
                if *j == o.pose {
                    let jt = jp.fixed_view::<2, 3>(0, 3) * q;
                    jp.fixed_view_mut::<2, 3>(0, 3).copy_from(&jt);
                    jp.fixed_view_mut::<2, 1>(0, 5).fill(0.0);
                }
            }
            let (_, w) = robust(r.norm_squared(), huber);
            Some((r, jp, jx, w))
        })
        .collect();
    let mut lin = Linearized {
        u: vec![Matrix6::zeros(); lay.free],
        gc: vec![Vector6::zeros(); lay.free],
        v: vec![Matrix3::zeros(); problem.points.len()],
        gp: vec![Vector3::zeros(); problem.points.len()],
        w: Default::default(),
    };
    let full = mode == BaMode::Full;
    for (o, t) in problem.observations.iter().zip(terms) {
        let Some((r, jp, jx, wt)) = t else { continue };
        let slot = lay.slot[o.pose];
        if let Some(s) = slot {
            lin.u[s] += jp.transpose() * jp * wt;
            lin.gc[s] += jp.transpose() * r * wt;
        }
        if full {
            lin.v[o.point] += jx.transpose() * jx * wt;
            lin.gp[o.point] += jx.transpose() * r * wt;
            if let Some(s) = slot {
                *lin.w.entry((s, o.point)).or_insert_with(Matrix6x3::zeros) += jp.transpose() * jx * wt;
            }
        }
    }
    if let Some((j, _)) = &lay.scale_pose {
        if let Some(s) = lay.slot[*j] {
            // The frozen direction gets a unit diagonal so the system stays regular.
            lin.u[s][(5, 5)] = 1.0;
            lin.gc[s][5] = 0.0;
        }
    }
    lin
}

fn mean_diagonal(lin: &Linearized, full: bool) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for u in &lin.u {
        sum += u.diagonal().sum();
        n += 6;
    }
    if full {
        for v in &lin.v {
            sum += v.diagonal().sum();
            n += 3;
        }
    }
    if n == 0 {
        1.0
    } else {
        (sum / n as f64).max(f64::MIN_POSITIVE)
    }
}

/// Solves the damped normal equations; returns per-pose and per-point steps.
fn solve_step(
    lin: &Linearized,
    mode: BaMode,
    lambda: f64,
    n_points: usize,
) -> Option<(Vec<Vector6<f64>>, Vec<Vector3<f64>>)> {
    let m = lin.u.len();
    let damp6 = Matrix6::identity() * lambda;
    if mode == BaMode::PosesOnly {
        let mut dc = Vec::with_capacity(m);
        for (u, g) in lin.u.iter().zip(&lin.gc) {
            let chol = (u + damp6).cholesky()?;
            dc.push(-chol.solve(g));
        }
        return Some((dc, vec![Vector3::zeros(); n_points]));
    }
    let damp3 = Matrix3::identity() * lambda;
    let vinv: Vec<Matrix3<f64>> = lin
        .v
        .iter()
        .map(|v| (v + damp3).try_inverse())
        .collect::<Option<Vec<_>>>()?;
    let mut s = DMatrix::<f64>::zeros(6 * m, 6 * m);
    let mut rhs = DVector::<f64>::zeros(6 * m);
    for (j, (u, g)) in lin.u.iter().zip(&lin.gc).enumerate() {
        s.fixed_view_mut::<6, 6>(6 * j, 6 * j).copy_from(&(u + damp6));
        rhs.fixed_rows_mut::<6>(6 * j).copy_from(&(-g));
    }
    // Group W blocks by point.
    let mut by_point: Vec<Vec<(usize, &Matrix6x3)>> = vec![Vec::new(); n_points];
    for ((j, i), w) in &lin.w {
        by_point[*i].push((*j, w));
    }
    for (i, blocks) in by_point.iter().enumerate() {
        if blocks.is_empty() {
            continue;
        }
        let vi = &vinv[i];
        let vg = vi * lin.gp[i];
        for &(a, wa) in blocks {
            let wv = wa * vi;
            let mut r = rhs.fixed_rows_mut::<6>(6 * a);
            r += wa * vg;
            for &(b, wb) in blocks {
                let mut blk = s.fixed_view_mut::<6, 6>(6 * a, 6 * b);
                blk -= wv * wb.transpose();
            }
        }
    }
    let dc_flat = if m > 0 { s.cholesky()?.solve(&rhs) } else { DVector::zeros(0) };
    let dc: Vec<Vector6<f64>> = (0..m).map(|j| dc_flat.fixed_rows::<6>(6 * j).into_owned()).collect();
    let mut dp = vec![Vector3::zeros(); n_points];
    for (i, blocks) in by_point.iter().enumerate() {
        let mut r = -lin.gp[i];
        for &(a, wa) in blocks {
            r -= wa.transpose() * dc[a];
        }
        dp[i] = vinv[i] * r;
    }
    Some((dc, dp))
}

fn apply_step(
    problem: &BaProblem,
    lay: &Layout,
    dc: &[Vector6<f64>],
    dp: &[Vector3<f64>],
    mode: BaMode,
) -> BaProblem {
    let mut out = problem.clone();
    for (j, pose) in out.poses.iter_mut().enumerate() {
        let Some(s) = lay.slot[j] else { continue };
        let d = dc[s];
        let omega = Vector3::new(d[0], d[1], d[2]);
        let mut dt = Vector3::new(d[3], d[4], d[5]);
        if let Some((sj, q)) = &lay.scale_pose {
            if *sj == j {
                dt = q * Vector3::new(d[3], d[4], 0.0);
                let norm = pose.translation.norm();
                let nt = pose.translation + dt;
                *pose = CameraPose {
                    rotation: so3_exp(&omega) * pose.rotation,
                    translation: nt * (norm / nt.norm()),
                };
                continue;
            }
        }
        *pose = pose.retract(&omega, &dt);
    }
    if mode == BaMode::Full {
        for (x, d) in out.points.iter_mut().zip(dp) {
            *x += d;
        }
    }
    out
}

/// Levenberg-Marquardt minimisation of the reprojection error.
///
/// Frozen poses are never changed. In full mode with only pose 0 frozen,
/// the norm of pose 1's translation is also held to fix the scale gauge.
pub fn ba_optimize_with(problem: BaProblem, mode: BaMode, opts: &BaOptions) -> (BaProblem, BaReport) {
    let mut current = problem;
    let mut lay = layout(&current, mode);
    let initial_cost = cost_with(&current, opts.huber);
    let mut cost = initial_cost;
    let mut report = BaReport {
        initial_cost,
        final_cost: initial_cost,
        iterations: 0,
        converged: false,
    };
    if cost == 0.0 || current.observations.is_empty() {
        report.converged = true;
        return (current, report);
    }
    let mut lambda: Option<f64> = None;
    let mut lin = linearize(&current, mode, &lay, opts.huber);
    while report.iterations < opts.max_iters {
        let grad_max = lin
            .gc
            .iter()
            .map(|g| g.amax())
            .chain(if mode == BaMode::Full { lin.gp.iter().map(|g| g.amax()).collect::<Vec<_>>() } else { Vec::new() })
            .fold(0.0, f64::max);
        if grad_max < 1e-14 * (1.0 + cost) {
            report.converged = true;
            break;
        }
        let lam = *lambda.get_or_insert_with(|| {
            (1e-4 * mean_diagonal(&lin, mode == BaMode::Full)).clamp(MIN_DAMPING, MAX_DAMPING)
        });
        report.iterations += 1;
        let step = solve_step(&lin, mode, lam, current.points.len());
        let candidate = step.map(|(dc, dp)| apply_step(&current, &lay, &dc, &dp, mode));
        let new_cost = candidate.as_ref().map(|c| cost_with(c, opts.huber));
        match (candidate, new_cost) {
            (Some(c), Some(nc)) if nc.is_finite() && nc <= cost => {
                let decrease = (cost - nc) / cost.max(f64::MIN_POSITIVE);
                current = c;
                cost = nc;
                lambda = Some((lam / 3.0).max(MIN_DAMPING));
                if decrease < opts.tol || cost == 0.0 {
                    report.converged = true;
                    break;
                }
                lay = layout(&current, mode);
                lin = linearize(&current, mode, &lay, opts.huber);
            }
            _ => {
                if lam >= MAX_DAMPING {
                    break;
                }
                lambda = Some((lam * 4.0).min(MAX_DAMPING));
            }
        }
    }
    for pose in &mut current.poses {
        *pose = pose.normalized();
    }
    // Re-orthonormalisation can move the cost by rounding; never report an increase.
    report.final_cost = cost_with(&current, opts.huber).min(cost).min(initial_cost);
    (current, report)
}
