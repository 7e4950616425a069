//! Two-view geometry: normalised 8-point fundamental matrix, RANSAC with
//! Sampson scoring, essential matrix, cheirality-based pose recovery,
//! triangulation and a degeneracy test.

use nalgebra::{DMatrix, Matrix3, Matrix3x4, Matrix4, Vector2, Vector3, Vector4};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::geometry::{skew, CameraIntrinsics, CameraPose, HomPoint2, HomPoint3, ProjectionMatrix};

/// Correspondences needed by the linear solver.
pub const MIN_CORRESPONDENCES: usize = 8;
/// A consensus set must hold this many inliers beyond the minimal sample,
/// which fits any model exactly.
pub const MIN_SUPPORT: usize = 8;
/// Inlier threshold in pixels at a 500 px reference resolution.
pub const BASE_THRESHOLD_PX: f64 = 1.5;
const PARALLEL_RAY_EPS: f64 = 1e-6;
const RANK_EPS: f64 = 1e-10;

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum EpipolarError {
    #[error("need at least {needed} correspondences, got {got}")]
    Insufficient { needed: usize, got: usize },
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("no consensus: best hypothesis has {0} inliers")]
    NoConsensus(usize),
    #[error("degenerate configuration: {0:?}")]
    Degenerate(Degeneracy),
    #[error("no pose candidate wins a strict cheirality majority")]
    AmbiguousCheirality,
    #[error("rays are parallel")]
    ParallelRays,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub x1: Vector2<f64>,
    pub x2: Vector2<f64>,
}

impl Correspondence {
    pub fn new(x1: Vector2<f64>, x2: Vector2<f64>) -> Self {
        Self { x1, x2 }
    }

    pub fn swapped(&self) -> Self {
        Self {
            x1: self.x2,
            x2: self.x1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Degeneracy {
    /// The two views are (nearly) identical.
    NoParallax,
    /// A homography explains the data and the cameras share a centre.
    PureRotation,
    /// A homography explains the data and triangulation angles are tiny.
    LowParallax,
    /// The fundamental matrix is numerically null.
    NullFundamental,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoViewGeometry {
    pub f: Matrix3<f64>,
    pub e: Matrix3<f64>,
    pub epipole2: HomPoint2,
    pub inliers: Vec<usize>,
    /// Pose of view 2 relative to view 1, unit translation.
    pub pose2: CameraPose,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub iterations: usize,
    pub threshold_px: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            threshold_px: BASE_THRESHOLD_PX,
            seed: 0,
        }
    }
}

/// Inlier threshold scaled from the 500 px reference to `resolution_px`.
pub fn scaled_threshold(resolution_px: f64) -> f64 {
    BASE_THRESHOLD_PX * resolution_px / 500.0
}

/// Unit Frobenius norm with the largest-magnitude entry positive.
pub fn normalize_gauge(m: &Matrix3<f64>) -> Matrix3<f64> {
    let n = m.norm();
    if n == 0.0 {
        return *m;
    }
    let mut imax = 0;
    for i in 1..9 {
        if m[i].abs() > m[imax].abs() {
            imax = i;
        }
    }
    let sign = if m[imax] < 0.0 { -1.0 } else { 1.0 };
    m * (sign / n)
}

/// Hartley normalisation: centroid at the origin, RMS distance √2.
fn normalizing_transform(points: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let c = points.iter().sum::<Vector2<f64>>() / n;
    let rms = (points.iter().map(|p| (p - c).norm_squared()).sum::<f64>() / n).sqrt();
    let s = if rms > 0.0 { std::f64::consts::SQRT_2 / rms } else { 1.0 };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

fn apply(t: &Matrix3<f64>, p: &Vector2<f64>) -> Vector3<f64> {
    t * Vector3::new(p.x, p.y, 1.0)
}

/// Right singular vector of the smallest singular value, together with the
/// ratio of the two smallest singular values to the largest.
fn null_vector(a: DMatrix<f64>) -> (nalgebra::DVector<f64>, f64, f64) {
    let cols = a.ncols();
    let a = if a.nrows() < cols {
        let mut padded = DMatrix::zeros(cols, cols);
        padded.rows_mut(0, a.nrows()).copy_from(&a);
        padded
    } else {
        a
    };
    let svd = a.svd(false, true);
    let vt = svd.v_t.expect("requested V");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let s = &svd.singular_values;
    let largest = s[order[0]].max(f64::MIN_POSITIVE);
    let last = order[cols - 1];
    let second_last = order[cols - 2];
    (
        vt.row(last).transpose(),
        s[last] / largest,
        s[second_last] / largest,
    )
}

/// Normalised 8-point estimate with rank-2 enforcement.
pub fn estimate_fundamental_8pt(corrs: &[Correspondence]) -> Result<Matrix3<f64>, EpipolarError> {
    if corrs.len() < MIN_CORRESPONDENCES {
        return Err(EpipolarError::Insufficient {
            needed: MIN_CORRESPONDENCES,
            got: corrs.len(),
        });
    }
    let p1: Vec<_> = corrs.iter().map(|c| c.x1).collect();
    let p2: Vec<_> = corrs.iter().map(|c| c.x2).collect();
    let t1 = normalizing_transform(&p1);
    let t2 = normalizing_transform(&p2);
    let mut a = DMatrix::zeros(corrs.len(), 9);
    for (r, c) in corrs.iter().enumerate() {
        let u = apply(&t1, &c.x1);
        let v = apply(&t2, &c.x2);
        for i in 0..3 {
            for j in 0..3 {
                a[(r, 3 * i + j)] = v[i] * u[j];
            }
        }
    }
    let (f, _, second) = null_vector(a);
    if second < RANK_EPS {
        return Err(EpipolarError::RankDeficient);
    }
    let fn_ = Matrix3::from_row_slice(f.as_slice());
    let svd = fn_.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = svd.singular_values;
    let imin = s.imin();
    s[imin] = 0.0;
    let rank2 = u * Matrix3::from_diagonal(&s) * vt;
    let f = t2.transpose() * rank2 * t1;
    Ok(normalize_gauge(&f))
}

/// First-order geometric (Sampson) distance in pixels.
#[inline]
pub fn sampson_distance(f: &Matrix3<f64>, c: &Correspondence) -> f64 {
    let x1 = Vector3::new(c.x1.x, c.x1.y, 1.0);
    let x2 = Vector3::new(c.x2.x, c.x2.y, 1.0);
    let fx1 = f * x1;
    let ftx2 = f.transpose() * x2;
    let num = x2.dot(&fx1);
    let den = fx1.x * fx1.x + fx1.y * fx1.y + ftx2.x * ftx2.x + ftx2.y * ftx2.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    num.abs() / den.sqrt()
}

fn inliers_of(f: &Matrix3<f64>, corrs: &[Correspondence], threshold: f64) -> (Vec<usize>, f64) {
    let mut idx = Vec::new();
    let mut cost = 0.0;
    for (i, c) in corrs.iter().enumerate() {
        let d = sampson_distance(f, c);
        if d <= threshold {
            idx.push(i);
            cost += d * d;
        } else {
            cost += threshold * threshold;
        }
    }
    (idx, cost)
}

/// RANSAC over 8-point hypotheses, then refit on the consensus set.
///
/// Samples are drawn sequentially from the seeded generator; hypotheses are
/// scored in parallel and the winner is chosen deterministically (most
/// inliers, then lowest truncated cost, then earliest iteration).
pub fn ransac_two_view(
    corrs: &[Correspondence],
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<TwoViewGeometry, EpipolarError> {
    let f = ransac_fundamental(corrs, cfg)?.0;
    let (inliers, _) = inliers_of(&f, corrs, cfg.threshold_px);
    let inlier_corrs: Vec<_> = inliers.iter().map(|&i| corrs[i]).collect();
    if let Some(d) = is_degenerate_with(&inlier_corrs, k, cfg.threshold_px).diagnosis {
        return Err(EpipolarError::Degenerate(d));
    }
    let e = essential_from_fundamental(&f, k);
    let pose2 = recover_pose(&e, &inlier_corrs, k)?;
    let svd = f.svd(true, false);
    let u = svd.u.unwrap();
    let imin = svd.singular_values.imin();
    let e2 = u.column(imin).into_owned();
    Ok(TwoViewGeometry {
        f,
        e,
        epipole2: HomPoint2(e2),
        inliers,
        pose2,
    })
}

/// The RANSAC fundamental matrix (refit on inliers) and its inlier set.
pub fn ransac_fundamental(
    corrs: &[Correspondence],
    cfg: &RansacConfig,
) -> Result<(Matrix3<f64>, Vec<usize>), EpipolarError> {
    let n = corrs.len();
    if n < MIN_CORRESPONDENCES {
        return Err(EpipolarError::Insufficient {
            needed: MIN_CORRESPONDENCES,
            got: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samples: Vec<Vec<usize>> = (0..cfg.iterations.max(1))
        .map(|_| sample(&mut rng, n, MIN_CORRESPONDENCES).into_vec())
        .collect();
    let thr = cfg.threshold_px;
    let best = samples
        .par_iter()
        .enumerate()
        .filter_map(|(it, s)| {
            let sub: Vec<_> = s.iter().map(|&i| corrs[i]).collect();
            let f = estimate_fundamental_8pt(&sub).ok()?;
            let (inl, cost) = inliers_of(&f, corrs, thr);
            Some((inl.len(), cost, it, f))
        })
        .reduce_with(|a, b| {
            let better_b = b.0 > a.0 || (b.0 == a.0 && (b.1 < a.1 || (b.1 == a.1 && b.2 < a.2)));
            if better_b {
                b
            } else {
                a
            }
        });
    let Some((count, _, _, mut f)) = best else {
        return Err(EpipolarError::NoConsensus(0));
    };
    if count < MIN_CORRESPONDENCES + MIN_SUPPORT {
        return Err(EpipolarError::NoConsensus(count));
    }
    let mut inliers = inliers_of(&f, corrs, thr).0;
    for _ in 0..3 {
        let sub: Vec<_> = inliers.iter().map(|&i| corrs[i]).collect();
        let Ok(refit) = estimate_fundamental_8pt(&sub) else {
            break;
        };
        let (new_inliers, _) = inliers_of(&refit, corrs, thr);
        if new_inliers.len() < inliers.len() {
            break;
        }
        let done = new_inliers == inliers;
        f = refit;
        inliers = new_inliers;
        if done {
            break;
        }
    }
    if inliers.len() < MIN_CORRESPONDENCES + MIN_SUPPORT {
        return Err(EpipolarError::NoConsensus(inliers.len()));
    }
    Ok((f, inliers))
}

/// `E = KᵀFK` without projection onto the essential manifold.
pub fn essential_raw(f: &Matrix3<f64>, k: &CameraIntrinsics) -> Matrix3<f64> {
    let km = k.matrix();
    km.transpose() * f * km
}

/// `E = KᵀFK` projected to singular values `(σ, σ, 0)`.
pub fn essential_from_fundamental(f: &Matrix3<f64>, k: &CameraIntrinsics) -> Matrix3<f64> {
    let e = essential_raw(f, k);
    let svd = e.svd(true, true);
    let s = svd.singular_values;
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let sigma = 0.5 * (s[idx[0]] + s[idx[1]]);
    let mut d = Vector3::zeros();
    d[idx[0]] = sigma;
    d[idx[1]] = sigma;
    svd.u.unwrap() * Matrix3::from_diagonal(&d) * svd.v_t.unwrap()
}

/// Fundamental matrix relating two calibrated views with world-to-camera
/// poses `pose1` and `pose2`, gauge-normalised.
pub fn fundamental_from_poses(k: &CameraIntrinsics, pose1: &CameraPose, pose2: &CameraPose) -> Matrix3<f64> {
    let rel = pose2.compose(&pose1.inverse());
    let e = skew(&rel.translation) * rel.rotation;
    let kinv = k.inverse_matrix();
    normalize_gauge(&(kinv.transpose() * e * kinv))
}

/// The four `(R, ±t)` factorisations of an essential matrix.
pub fn pose_candidates(e: &Matrix3<f64>) -> [CameraPose; 4] {
    let svd = e.svd(true, true);
    let s = svd.singular_values;
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let u0 = svd.u.unwrap();
    let vt0 = svd.v_t.unwrap();
    let mut u = Matrix3::zeros();
    let mut v = Matrix3::zeros();
    for (c, &i) in idx.iter().enumerate() {
        u.set_column(c, &u0.column(i));
        v.set_column(c, &vt0.row(i).transpose());
    }
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v.determinant() < 0.0 {
        v = -v;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v.transpose();
    let r2 = u * w.transpose() * v.transpose();
    let t: Vector3<f64> = u.column(2).normalize();
    [
        CameraPose {
            rotation: r1,
            translation: t,
        },
        CameraPose {
            rotation: r1,
            translation: -t,
        },
        CameraPose {
            rotation: r2,
            translation: t,
        },
        CameraPose {
            rotation: r2,
            translation: -t,
        },
    ]
}

/// Number of correspondences triangulated in front of both cameras.
pub fn cheirality_count(pose2: &CameraPose, corrs: &[Correspondence], k: &CameraIntrinsics) -> usize {
    let p1 = ProjectionMatrix::compose(k, &CameraPose::identity()).expect("identity pose");
    let Ok(p2) = ProjectionMatrix::compose(k, pose2) else {
        return 0;
    };
    corrs
        .iter()
        .filter(|c| {
            let Ok(x) = triangulate_linear(&c.x1, &c.x2, &p1, &p2) else {
                return false;
            };
            let w = x.0.w;
            if w.abs() < 1e-15 {
                return false;
            }
            let p = x.0.xyz() / w;
            p.z > 0.0 && pose2.transform(&p).z > 0.0
        })
        .count()
}

/// Picks the factorisation with a strict majority of points in front of
/// both cameras.
pub fn recover_pose(
    e: &Matrix3<f64>,
    corrs: &[Correspondence],
    k: &CameraIntrinsics,
) -> Result<CameraPose, EpipolarError> {
    if corrs.is_empty() {
        return Err(EpipolarError::Insufficient { needed: 1, got: 0 });
    }
    let counts: Vec<(usize, CameraPose)> = pose_candidates(e)
        .into_iter()
        .map(|c| (cheirality_count(&c, corrs, k), c))
        .collect();
    counts
        .iter()
        .find(|(n, _)| 2 * n > corrs.len())
        .map(|(_, c)| *c)
        .ok_or(EpipolarError::AmbiguousCheirality)
}

fn world_ray(p: &ProjectionMatrix, x: &Vector2<f64>) -> Vector3<f64> {
    let m = p.matrix().fixed_view::<3, 3>(0, 0).into_owned();
    match m.try_inverse() {
        Some(inv) => inv * Vector3::new(x.x, x.y, 1.0),
        None => Vector3::zeros(),
    }
}

fn rays_parallel(x1: &Vector2<f64>, x2: &Vector2<f64>, p1: &ProjectionMatrix, p2: &ProjectionMatrix) -> bool {
    let (d1, d2) = (world_ray(p1, x1), world_ray(p2, x2));
    let (n1, n2) = (d1.norm(), d2.norm());
    if n1 == 0.0 || n2 == 0.0 {
        return true;
    }
    d1.cross(&d2).norm() / (n1 * n2) < PARALLEL_RAY_EPS
}

/// Linear (DLT) triangulation without refinement.
pub fn triangulate_linear(
    x1: &Vector2<f64>,
    x2: &Vector2<f64>,
    p1: &ProjectionMatrix,
    p2: &ProjectionMatrix,
) -> Result<HomPoint3, EpipolarError> {
    let mut a = Matrix4::zeros();
    for (r, (x, p)) in [(x1, p1.matrix()), (x2, p2.matrix())].into_iter().enumerate() {
        let row0 = p.row(2) * x.x - p.row(0);
        let row1 = p.row(2) * x.y - p.row(1);
        a.set_row(2 * r, &(row0 / row0.norm().max(f64::MIN_POSITIVE)));
        a.set_row(2 * r + 1, &(row1 / row1.norm().max(f64::MIN_POSITIVE)));
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.ok_or(EpipolarError::ParallelRays)?;
    let imin = svd.singular_values.imin();
    let x: Vector4<f64> = vt.row(imin).transpose();
    Ok(HomPoint3(x))
}

fn project_raw(p: &Matrix3x4<f64>, x: &Vector3<f64>) -> (Vector3<f64>, Vector2<f64>) {
    let h = p * Vector4::new(x.x, x.y, x.z, 1.0);
    (h, Vector2::new(h.x / h.z, h.y / h.z))
}

fn reprojection_sq(x: &Vector3<f64>, obs: [(&Vector2<f64>, &Matrix3x4<f64>); 2]) -> f64 {
    obs.iter()
        .map(|(o, p)| (project_raw(p, x).1 - *o).norm_squared())
        .sum()
}

/// DLT triangulation followed by one Gauss-Newton step on the two-view
/// reprojection error (accepted only if it lowers the error).
pub fn triangulate(
    x1: &Vector2<f64>,
    x2: &Vector2<f64>,
    p1: &ProjectionMatrix,
    p2: &ProjectionMatrix,
) -> Result<HomPoint3, EpipolarError> {
    if rays_parallel(x1, x2, p1, p2) {
        return Err(EpipolarError::ParallelRays);
    }
    let h = triangulate_linear(x1, x2, p1, p2)?;
    if h.0.w.abs() < 1e-15 * h.0.norm() {
        return Ok(h);
    }
    let x0 = h.0.xyz() / h.0.w;
    let obs = [(x1, p1.matrix()), (x2, p2.matrix())];
    let mut jtj = Matrix3::zeros();
    let mut jtr = Vector3::zeros();
    for (o, p) in obs {
        let (hh, proj) = project_raw(p, &x0);
        let r = proj - o;
        let m = p.fixed_view::<3, 3>(0, 0);
        let mut j = nalgebra::Matrix2x3::zeros();
        for c in 0..3 {
            j[(0, c)] = (m[(0, c)] * hh.z - hh.x * m[(2, c)]) / (hh.z * hh.z);
            j[(1, c)] = (m[(1, c)] * hh.z - hh.y * m[(2, c)]) / (hh.z * hh.z);
        }
        jtj += j.transpose() * j;
        jtr += j.transpose() * r;
    }
    let refined = jtj
        .try_inverse()
        .map(|inv| x0 - inv * jtr)
        .filter(|x| x.iter().all(|v| v.is_finite()));
    let best = match refined {
        Some(x) if reprojection_sq(&x, obs) < reprojection_sq(&x0, obs) => x,
        _ => x0,
    };
    Ok(HomPoint3::from_point(&best))
}

/// Normalised DLT homography `x2 ~ H x1`.
pub fn estimate_homography(corrs: &[Correspondence]) -> Option<Matrix3<f64>> {
    if corrs.len() < 4 {
        return None;
    }
    let p1: Vec<_> = corrs.iter().map(|c| c.x1).collect();
    let p2: Vec<_> = corrs.iter().map(|c| c.x2).collect();
    let t1 = normalizing_transform(&p1);
    let t2 = normalizing_transform(&p2);
    let mut a = DMatrix::zeros(2 * corrs.len(), 9);
    for (r, c) in corrs.iter().enumerate() {
        let u = apply(&t1, &c.x1);
        let v = apply(&t2, &c.x2);
        for j in 0..3 {
            a[(2 * r, 3 + j)] = -v.z * u[j];
            a[(2 * r, 6 + j)] = v.y * u[j];
            a[(2 * r + 1, j)] = v.z * u[j];
            a[(2 * r + 1, 6 + j)] = -v.x * u[j];
        }
    }
    let (h, _, _) = null_vector(a);
    let hn = Matrix3::from_row_slice(h.as_slice());
    let t2inv = t2.try_inverse()?;
    let h = t2inv * hn * t1;
    Some(h / h.norm())
}

fn transfer_error(h: &Matrix3<f64>, c: &Correspondence) -> f64 {
    let p = h * Vector3::new(c.x1.x, c.x1.y, 1.0);
    if p.z.abs() < 1e-15 {
        return f64::INFINITY;
    }
    (Vector2::new(p.x / p.z, p.y / p.z) - c.x2).norm()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegeneracyCheck {
    pub degenerate: bool,
    pub diagnosis: Option<Degeneracy>,
}

impl DegeneracyCheck {
    fn verdict(d: Option<Degeneracy>) -> Self {
        Self {
            degenerate: d.is_some(),
            diagnosis: d,
        }
    }
}

/// Median triangulation angle (radians) below which a homography-explained
/// pair counts as degenerate.
pub const MIN_MEDIAN_PARALLAX: f64 = 0.25 * std::f64::consts::PI / 180.0;

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median angle between the two viewing rays of triangulated correspondences.
pub fn median_parallax(pose2: &CameraPose, corrs: &[Correspondence], k: &CameraIntrinsics) -> f64 {
    let c2 = pose2.center();
    let p1 = ProjectionMatrix::compose(k, &CameraPose::identity()).expect("identity");
    let Ok(p2) = ProjectionMatrix::compose(k, pose2) else {
        return 0.0;
    };
    let angles: Vec<f64> = corrs
        .iter()
        .filter_map(|c| {
            let x = triangulate_linear(&c.x1, &c.x2, &p1, &p2).ok()?.dehomogenize().ok()?;
            let (a, b) = (x, x - c2);
            let cos = a.dot(&b) / (a.norm() * b.norm());
            Some(cos.clamp(-1.0, 1.0).acos())
        })
        .collect();
    median(angles)
}

/// Degeneracy test with the resolution-scaled default threshold.
pub fn is_degenerate(corrs: &[Correspondence], k: &CameraIntrinsics) -> DegeneracyCheck {
    let resolution = 2.0 * k.principal_px.0.max(k.principal_px.1);
    is_degenerate_with(corrs, k, scaled_threshold(resolution))
}

/// Flags pairs from which a fundamental matrix cannot be trusted:
/// near-identical views, homography-explained pairs with tiny parallax
/// (pure rotation), and null (rank-deficient) fundamental fits.
pub fn is_degenerate_with(corrs: &[Correspondence], k: &CameraIntrinsics, threshold_px: f64) -> DegeneracyCheck {
    if corrs.len() < MIN_CORRESPONDENCES {
        return DegeneracyCheck::verdict(Some(Degeneracy::NullFundamental));
    }
    let disp = median(corrs.iter().map(|c| (c.x2 - c.x1).norm()).collect());
    if disp <= 0.1 * threshold_px {
        return DegeneracyCheck::verdict(Some(Degeneracy::NoParallax));
    }
    let f = estimate_fundamental_8pt(corrs);
    let h_fraction = estimate_homography(corrs)
        .map(|h| corrs.iter().filter(|c| transfer_error(&h, c) <= threshold_px).count() as f64 / corrs.len() as f64)
        .unwrap_or(0.0);
    if h_fraction >= 0.98 {
        let Ok(f) = f else {
            return DegeneracyCheck::verdict(Some(Degeneracy::PureRotation));
        };
        let e = essential_from_fundamental(&f, k);
        let Ok(pose) = recover_pose(&e, corrs, k) else {
            return DegeneracyCheck::verdict(Some(Degeneracy::PureRotation));
        };
        if median_parallax(&pose, corrs, k) < MIN_MEDIAN_PARALLAX {
            return DegeneracyCheck::verdict(Some(Degeneracy::LowParallax));
        }
        return DegeneracyCheck::verdict(None);
    }
    match f {
        Err(_) => DegeneracyCheck::verdict(Some(Degeneracy::NullFundamental)),
        Ok(_) => DegeneracyCheck::verdict(None),
    }
}
