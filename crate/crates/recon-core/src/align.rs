//! Closed-form similarity alignment (unit-quaternion absolute orientation),
//! iterative closest point refinement, uniform surface sampling and
//! surface-distance error metrics.

use nalgebra::{Matrix3, Matrix4, Quaternion, SymmetricEigen, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::io::fmt17;
use crate::mesh::{bounding_box, centroid, TriangleMesh};
use crate::spatial::KdTree;

/// Relative spread below which a point set counts as colinear.
const DEGENERATE_EPS: f64 = 1e-12;

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum AlignError {
    #[error("need at least 3 correspondences, got {0}")]
    TooFew(usize),
    #[error("point configuration is colinear or coincident")]
    Degenerate,
    #[error("correspondence index out of range")]
    BadIndex,
    #[error("empty input")]
    Empty,
    #[error("mesh has zero area")]
    ZeroArea,
    #[error("centerline length must be positive, got {0}")]
    BadLength(f64),
}

/// `x ↦ s·R(x) + r0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for SimilarityTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(scale: f64, rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            scale,
            rotation,
            translation,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation * self.scale + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let inv_rot = self.rotation.inverse();
        Self {
            scale: 1.0 / self.scale,
            rotation: inv_rot,
            translation: -(inv_rot * self.translation) / self.scale,
        }
    }
}

pub fn apply_similarity(t: &SimilarityTransform, points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    points.iter().map(|p| t.apply(p)).collect()
}

fn is_degenerate(centered: &[Vector3<f64>]) -> bool {
    let mut cov = Matrix3::zeros();
    for p in centered {
        cov += p * p.transpose();
    }
    let mut ev: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev[0] <= 0.0 || ev[1] <= DEGENERATE_EPS * ev[0]
}

/// Least-squares similarity mapping `left[i]` onto `right[j]` for each
/// `(i, j)` pair. Rotation is the dominant eigenvector of the 4×4
/// quaternion data matrix; scale is the asymmetric ratio
/// `Σ r'_r·R(r'_l) / Σ |r'_l|²`.
pub fn horn_align(
    left: &[Vector3<f64>],
    right: &[Vector3<f64>],
    pairs: &[(usize, usize)],
) -> Result<SimilarityTransform, AlignError> {
    if pairs.len() < 3 {
        return Err(AlignError::TooFew(pairs.len()));
    }
    if pairs.iter().any(|&(i, j)| i >= left.len() || j >= right.len()) {
        return Err(AlignError::BadIndex);
    }
    let l: Vec<Vector3<f64>> = pairs.iter().map(|&(i, _)| left[i]).collect();
    let r: Vec<Vector3<f64>> = pairs.iter().map(|&(_, j)| right[j]).collect();
    horn_align_ordered(&l, &r)
}

/// [`horn_align`] with `left[i] ↔ right[i]`.
pub fn horn_align_ordered(left: &[Vector3<f64>], right: &[Vector3<f64>]) -> Result<SimilarityTransform, AlignError> {
    let n = left.len().min(right.len());
    if n < 3 {
        return Err(AlignError::TooFew(n));
    }
    let cl = centroid(&left[..n]);
    let cr = centroid(&right[..n]);
    let lc: Vec<Vector3<f64>> = left[..n].iter().map(|p| p - cl).collect();
    let rc: Vec<Vector3<f64>> = right[..n].iter().map(|p| p - cr).collect();
    if is_degenerate(&lc) || is_degenerate(&rc) {
        return Err(AlignError::Degenerate);
    }
    let mut m = Matrix3::zeros();
    for (a, b) in lc.iter().zip(&rc) {
        m += a * b.transpose();
    }
    let (sxx, sxy, sxz) = (m[(0, 0)], m[(0, 1)], m[(0, 2)]);
    let (syx, syy, syz) = (m[(1, 0)], m[(1, 1)], m[(1, 2)]);
    let (szx, szy, szz) = (m[(2, 0)], m[(2, 1)], m[(2, 2)]);
    let nmat = Matrix4::new(
        sxx + syy + szz,
        syz - szy,
        szx - sxz,
        sxy - syx,
        syz - szy,
        sxx - syy - szz,
        sxy + syx,
        szx + sxz,
        szx - sxz,
        sxy + syx,
        -sxx + syy - szz,
        syz + szy,
        sxy - syx,
        szx + sxz,
        syz + szy,
        -sxx - syy + szz,
    );
    let eig = SymmetricEigen::new(nmat);
    let imax = eig.eigenvalues.imax();
    let v = eig.eigenvectors.column(imax);
    let mut q = Quaternion::new(v[0], v[1], v[2], v[3]);
    if q.w < 0.0 {
        q = -q;
    }
    let rotation = UnitQuaternion::from_quaternion(q);
    let num: f64 = lc.iter().zip(&rc).map(|(a, b)| b.dot(&(rotation * a))).sum();
    let den: f64 = lc.iter().map(|a| a.norm_squared()).sum();
    let scale = num / den;
    let translation = cr - rotation * cl * scale;
    Ok(SimilarityTransform {
        scale,
        rotation,
        translation,
    })
}

/// Sum of squared alignment residuals `Σ |right_i − T(left_i)|²`.
pub fn alignment_residual(t: &SimilarityTransform, left: &[Vector3<f64>], right: &[Vector3<f64>]) -> f64 {
    left.iter().zip(right).map(|(l, r)| (r - t.apply(l)).norm_squared()).sum()
}

/// Area-weighted uniform samples on a triangle mesh, seeded.
pub fn sample_surface_uniform(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<Vec<Vector3<f64>>, AlignError> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if mesh.triangles.is_empty() {
        return Err(AlignError::Empty);
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(AlignError::ZeroArea);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let target = rng.random::<f64>() * total;
        let t = cumulative.partition_point(|&c| c <= target).min(cumulative.len() - 1);
        let [a, b, c] = mesh.triangle(t);
        let r1: f64 = rng.random::<f64>();
        let r2: f64 = rng.random::<f64>();
        let s = r1.sqrt();
        out.push(a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2));
    }
    Ok(out)
}

/// One-sided surface distance statistics from ground truth to reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ErrorReport {
    pub rmse: f64,
    pub max_error: f64,
    pub relative_rmse: f64,
    pub centerline_length: f64,
    pub l_gt_samples: usize,
    pub l_rec_samples: usize,
    /// Mean squared nearest-neighbour residual of the final alignment.
    pub icp_residual: Option<f64>,
}

impl ErrorReport {
    /// JSON object with every real at 17 significant digits.
    pub fn to_json(&self) -> String {
        let icp = self.icp_residual.map(fmt17).unwrap_or_else(|| "null".to_string());
        format!(
            "{{\n  \"rmse\": {},\n  \"max_error\": {},\n  \"relative_rmse\": {},\n  \"centerline_length\": {},\n  \"l_gt_samples\": {},\n  \"l_rec_samples\": {},\n  \"icp_residual\": {}\n}}\n",
            fmt17(self.rmse),
            fmt17(self.max_error),
            fmt17(self.relative_rmse),
            fmt17(self.centerline_length),
            self.l_gt_samples,
            self.l_rec_samples,
            icp
        )
    }
}

/// Nearest-neighbour distances from every ground-truth sample to the
/// reconstruction, reduced sequentially in sample order.
pub fn compute_errors(gt: &[Vector3<f64>], rec: &[Vector3<f64>], l_gt: f64) -> Result<ErrorReport, AlignError> {
    if gt.is_empty() || rec.is_empty() {
        return Err(AlignError::Empty);
    }
    if !(l_gt > 0.0) {
        return Err(AlignError::BadLength(l_gt));
    }
    let tree = KdTree::new(rec);
    let dists: Vec<f64> = gt
        .par_iter()
        .map(|p| tree.nearest(p).expect("non-empty").dist2.sqrt())
        .collect();
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for d in &dists {
        sum += d * d;
        max = max.max(*d);
    }
    let rmse = (sum / dists.len() as f64).sqrt();
    Ok(ErrorReport {
        rmse,
        max_error: max,
        relative_rmse: rmse / l_gt,
        centerline_length: l_gt,
        l_gt_samples: gt.len(),
        l_rec_samples: rec.len(),
        icp_residual: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpOptions {
    pub max_iters: usize,
    pub rel_tol: f64,
}

impl Default for IcpOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            rel_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpResult {
    pub transform: SimilarityTransform,
    /// Mean squared nearest-neighbour distance after the last iteration.
    pub residual: f64,
    pub iterations: usize,
}

fn mean_nn_sq(tree: &KdTree, pts: &[Vector3<f64>]) -> (Vec<usize>, f64) {
    let nn: Vec<(usize, f64)> = pts
        .par_iter()
        .map(|p| {
            let n = tree.nearest(p).expect("non-empty");
            (n.index, n.dist2)
        })
        .collect();
    let mut sum = 0.0;
    for (_, d) in &nn {
        sum += d;
    }
    (nn.iter().map(|n| n.0).collect(), sum / pts.len().max(1) as f64)
}

/// Similarity ICP of `source` onto `target` starting from `init`.
pub fn icp(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    init: &SimilarityTransform,
    opts: &IcpOptions,
) -> Result<IcpResult, AlignError> {
    if source.is_empty() || target.is_empty() {
        return Err(AlignError::Empty);
    }
    let tree = KdTree::new(target);
    let mut t = *init;
    let (mut nn, mut residual) = mean_nn_sq(&tree, &apply_similarity(&t, source));
    let mut iterations = 0;
    while iterations < opts.max_iters {
        iterations += 1;
        let matched: Vec<Vector3<f64>> = nn.iter().map(|&j| target[j]).collect();
        let Ok(next) = horn_align_ordered(source, &matched) else {
            break;
        };
        let (next_nn, next_res) = mean_nn_sq(&tree, &apply_similarity(&next, source));
        if next_res > residual {
            break;
        }
        let change = (residual - next_res) / residual.max(f64::MIN_POSITIVE);
        t = next;
        nn = next_nn;
        residual = next_res;
        if change < opts.rel_tol {
            break;
        }
    }
    Ok(IcpResult {
        transform: t,
        residual,
        iterations,
    })
}

/// Bounding-box-diagonal prescale plus centroid alignment.
pub fn prescale_init(source: &[Vector3<f64>], target: &[Vector3<f64>]) -> SimilarityTransform {
    let diag = |p: &[Vector3<f64>]| bounding_box(p).map(|(lo, hi)| (hi - lo).norm()).unwrap_or(0.0);
    let (ds, dt) = (diag(source), diag(target));
    let scale = if ds > 0.0 && dt > 0.0 { dt / ds } else { 1.0 };
    let translation = centroid(target) - centroid(source) * scale;
    SimilarityTransform {
        scale,
        rotation: UnitQuaternion::identity(),
        translation,
    }
}

fn principal_axes(points: &[Vector3<f64>]) -> Matrix3<f64> {
    let c = centroid(points);
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut axes = Matrix3::from_columns(&[
        eig.eigenvectors.column(idx[0]).into_owned(),
        eig.eigenvectors.column(idx[1]).into_owned(),
        eig.eigenvectors.column(idx[2]).into_owned(),
    ]);
    if axes.determinant() < 0.0 {
        axes.set_column(2, &(-axes.column(2)));
    }
    axes
}

/// Starting transforms for ICP without known correspondences: the plain
/// prescale, and principal-axis alignments with the four proper sign flips.
pub fn pca_initializations(source: &[Vector3<f64>], target: &[Vector3<f64>]) -> Vec<SimilarityTransform> {
    let base = prescale_init(source, target);
    let mut out = vec![base];
    if source.len() < 3 || target.len() < 3 {
        return out;
    }
    let (a_s, a_t) = (principal_axes(source), principal_axes(target));
    let (cs, ct) = (centroid(source), centroid(target));
    for flip in [[1.0, 1.0, 1.0], [-1.0, -1.0, 1.0], [-1.0, 1.0, -1.0], [1.0, -1.0, -1.0]] {
        let f = Matrix3::from_diagonal(&Vector3::from(flip));
        let r = a_t * f * a_s.transpose();
        let rotation = UnitQuaternion::from_matrix(&r);
        let translation = ct - rotation * cs * base.scale;
        out.push(SimilarityTransform {
            scale: base.scale,
            rotation,
            translation,
        });
    }
    out
}

/// Runs ICP from every initialisation and keeps the lowest residual.
pub fn icp_best_of(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    inits: &[SimilarityTransform],
    opts: &IcpOptions,
) -> Result<IcpResult, AlignError> {
    let mut best: Option<IcpResult> = None;
    for init in inits {
        let r = icp(source, target, init, opts)?;
        if best.is_none_or(|b| r.residual < b.residual) {
            best = Some(r);
        }
    }
    best.ok_or(AlignError::Empty)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::dist2;

    fn random_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    fn random_transform(rng: &mut ChaCha8Rng) -> SimilarityTransform {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        SimilarityTransform {
            scale: 10f64.powf(rng.random_range(-1.0..1.0)),
            rotation: UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle),
            translation: Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)),
        }
    }

    fn quat_dist(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
        (a.coords - b.coords).norm().min((a.coords + b.coords).norm())
    }

    #[test]
    fn identity_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_points(50, &mut rng);
        let t = horn_align_ordered(&p, &p).unwrap();
        assert!((t.scale - 1.0).abs() < 1e-12);
        assert!(quat_dist(&t.rotation, &UnitQuaternion::identity()) < 1e-12);
        assert!(t.translation.norm() < 1e-12);
    }

    #[test]
    fn recovers_random_similarities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let left = random_points(100, &mut rng);
            let truth = random_transform(&mut rng);
            let right = apply_similarity(&truth, &left);
            let t = horn_align_ordered(&left, &right).unwrap();
            assert!((t.scale - truth.scale).abs() <= 1e-9 * truth.scale);
            assert!(quat_dist(&t.rotation, &truth.rotation) <= 1e-9);
            assert!((t.translation - truth.translation).norm() <= 1e-9 * truth.translation.norm().max(1.0));
            let extent = 2.0 * truth.scale;
            assert!(alignment_residual(&t, &left, &right) <= 1e-18 * extent * extent * 100.0);
        }
    }

    #[test]
    fn degenerate_inputs() {
        let p = vec![Vector3::zeros(), Vector3::x()];
        assert_eq!(horn_align_ordered(&p, &p), Err(AlignError::TooFew(2)));
        let line: Vec<_> = (0..10).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert_eq!(horn_align_ordered(&line, &line), Err(AlignError::Degenerate));
        let pairs = [(0, 0), (1, 1), (5, 5)];
        assert_eq!(horn_align(&line, &line, &pairs), Err(AlignError::Degenerate));
    }

    #[test]
    fn objective_is_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let left = random_points(60, &mut rng);
        let truth = random_transform(&mut rng);
        let right: Vec<_> = apply_similarity(&truth, &left)
            .iter()
            .map(|p| p + Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)))
            .collect();
        let t = horn_align_ordered(&left, &right).unwrap();
        let best = alignment_residual(&t, &left, &right);
        for _ in 0..1000 {
            let d = UnitQuaternion::from_scaled_axis(Vector3::new(
                rng.random_range(-0.01..0.01),
                rng.random_range(-0.01..0.01),
                rng.random_range(-0.01..0.01),
            ));
            let p = SimilarityTransform {
                scale: t.scale * (1.0 + rng.random_range(-0.01..0.01)),
                rotation: d * t.rotation,
                translation: t.translation + Vector3::new(rng.random_range(-0.01..0.01), 0.0, rng.random_range(-0.01..0.01)),
            };
            assert!(best <= alignment_residual(&p, &left, &right));
        }
    }

    #[test]
    fn apply_examples() {
        let p = vec![Vector3::new(1.0, 1.0, 1.0)];
        assert_eq!(apply_similarity(&SimilarityTransform::identity(), &p), p);
        let s2 = SimilarityTransform::new(2.0, UnitQuaternion::identity(), Vector3::zeros());
        assert_eq!(apply_similarity(&s2, &p), vec![Vector3::new(2.0, 2.0, 2.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (t1, t2) = (random_transform(&mut rng), random_transform(&mut rng));
        for q in random_points(20, &mut rng) {
            let a = t2.apply(&t1.apply(&q));
            let b = t2.compose(&t1).apply(&q);
            assert!((a - b).norm() <= 1e-12 * a.norm().max(1.0) * 10.0);
            assert!((t1.inverse().apply(&t1.apply(&q)) - q).norm() < 1e-9);
        }
    }

    #[test]
    fn sampling_follows_area() {
        let mesh = TriangleMesh::new(
            vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(2.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
                Vector3::new(10.0, 0.0, 1.0),
                Vector3::new(13.0, 0.0, 1.0),
                Vector3::new(10.0, 2.0, 1.0),
            ],
            vec![[0, 1, 2], [3, 4, 5]],
        );
        assert!((mesh.triangle_area(0) - 1.0).abs() < 1e-15);
        assert!((mesh.triangle_area(1) - 3.0).abs() < 1e-15);
        let s = sample_surface_uniform(&mesh, 4000, 7).unwrap();
        assert_eq!(s.len(), 4000);
        let first = s.iter().filter(|p| p.z == 0.0).count();
        assert!((900..=1100).contains(&first), "{first}");
        assert!(s.iter().all(|p| p.z == 0.0 || (p.z - 1.0).abs() <= 1e-12));
        assert!(sample_surface_uniform(&mesh, 0, 7).unwrap().is_empty());
        assert_eq!(sample_surface_uniform(&mesh, 4000, 7).unwrap(), s);
        let flat = TriangleMesh::new(vec![Vector3::zeros(); 3], vec![[0, 1, 2]]);
        assert_eq!(sample_surface_uniform(&flat, 5, 1), Err(AlignError::ZeroArea));
    }

    fn brute_force(gt: &[Vector3<f64>], rec: &[Vector3<f64>], l: f64) -> (f64, f64, f64) {
        let mut sum = 0.0;
        let mut max = 0.0f64;
        for g in gt {
            let mut best = f64::INFINITY;
            for r in rec {
                best = best.min(dist2(g, r));
            }
            let d = best.sqrt();
            sum += d * d;
            max = max.max(d);
        }
        let rmse = (sum / gt.len() as f64).sqrt();
        (rmse, max, rmse / l)
    }

    #[test]
    fn error_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_points(200, &mut rng);
        let r = compute_errors(&a, &a, 1.0).unwrap();
        assert_eq!((r.rmse, r.max_error), (0.0, 0.0));
        let r = compute_errors(&[Vector3::zeros()], &[Vector3::x()], 10.0).unwrap();
        assert_eq!((r.rmse, r.max_error, r.relative_rmse), (1.0, 1.0, 0.1));
        for _ in 0..5 {
            let g = random_points(1000, &mut rng);
            let rec = random_points(1000, &mut rng);
            let r = compute_errors(&g, &rec, 3.0).unwrap();
            let (rmse, max, rel) = brute_force(&g, &rec, 3.0);
            assert_eq!(r.rmse.to_bits(), rmse.to_bits());
            assert_eq!(r.max_error.to_bits(), max.to_bits());
            assert_eq!(r.relative_rmse.to_bits(), rel.to_bits());
            assert!(r.max_error >= r.rmse);
        }
        assert_eq!(compute_errors(&[], &a, 1.0), Err(AlignError::Empty));
    }

    #[test]
    fn icp_recovers_small_misalignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let target = random_points(2000, &mut rng);
        let truth = SimilarityTransform::new(
            1.3,
            UnitQuaternion::from_scaled_axis(Vector3::new(0.05, -0.03, 0.02)),
            Vector3::new(0.1, 0.0, -0.05),
        );
        let source = apply_similarity(&truth.inverse(), &target);
        let r = icp(&source, &target, &prescale_init(&source, &target), &IcpOptions::default()).unwrap();
        assert!(r.residual < 1e-12, "{}", r.residual);
        assert!((r.transform.scale - 1.3).abs() < 1e-6);
    }

    #[test]
    fn json_layout() {
        let r = compute_errors(&[Vector3::zeros()], &[Vector3::x()], 10.0).unwrap();
        let json = r.to_json();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        for key in ["rmse", "max_error", "relative_rmse", "centerline_length", "l_gt_samples", "l_rec_samples", "icp_residual"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["relative_rmse"].as_f64(), Some(0.1));
    }
}
