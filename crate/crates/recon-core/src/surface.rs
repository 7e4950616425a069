//! Point cloud to mesh: voxel/statistical cleaning, PCA normals, an
//! adaptive octree, a multi-depth quadratic B-spline Poisson solve for the
//! indicator function, and iso-surface extraction.

use std::collections::{BTreeMap, HashMap, VecDeque};

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::mesh::{bounding_box, TriangleMesh};
use crate::spatial::KdTree;

pub const MIN_DEPTH: u32 = 3;
pub const MAX_DEPTH: u32 = 8;
/// Deepest lattice used for extraction; finer octrees are sampled here.
pub const MAX_EXTRACTION_DEPTH: u32 = 7;
pub const ROOT_MARGIN: f64 = 0.1;
pub const AREA_K: usize = 8;
pub const SOLVER_TOLERANCE: f64 = 1e-8;

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum SurfaceError {
    #[error("need at least {needed} points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("normals missing or mismatched ({normals} normals for {points} points)")]
    MissingNormals { normals: usize, points: usize },
    #[error("solver did not converge at depth {depth} after {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { depth: u32, iterations: usize, residual: f64 },
    #[error("iso-level is not crossed; surface is empty")]
    EmptySurface,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Points with an optional observing camera centre per point.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub cameras: Option<Vec<Vector3<f64>>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        Self { points, cameras: None }
    }

    pub fn with_cameras(points: Vec<Vector3<f64>>, cameras: Vec<Vector3<f64>>) -> Self {
        assert_eq!(points.len(), cameras.len());
        Self {
            points,
            cameras: Some(cameras),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn subset(&self, keep: &[usize]) -> Self {
        Self {
            points: keep.iter().map(|&i| self.points[i]).collect(),
            cameras: self.cameras.as_ref().map(|c| keep.iter().map(|&i| c[i]).collect()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OrientedPointCloud {
    pub points: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
    pub source_camera: Option<Vec<Vector3<f64>>>,
}

impl OrientedPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn translated(&self, offset: &Vector3<f64>) -> Self {
        Self {
            points: self.points.iter().map(|p| p + offset).collect(),
            normals: self.normals.clone(),
            source_camera: self.source_camera.as_ref().map(|c| c.iter().map(|p| p + offset).collect()),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            points: self.points.iter().map(|p| p * s).collect(),
            normals: self.normals.clone(),
            source_camera: self.source_camera.as_ref().map(|c| c.iter().map(|p| p * s).collect()),
        }
    }
}

/// Voxel-grid downsampling (centroid per occupied voxel) followed by
/// statistical k-NN outlier removal.
pub fn clean_cloud(cloud: &PointCloud, grid_size: f64, knn_k: usize, stddev_mult: f64) -> Result<PointCloud, SurfaceError> {
    if !(grid_size > 0.0) {
        return Err(SurfaceError::InvalidParameter(format!("grid size {grid_size} must be positive")));
    }
    if cloud.is_empty() {
        return Ok(PointCloud::default());
    }
    let down = voxel_downsample(cloud, grid_size);
    Ok(statistical_outlier_removal(&down, knn_k, stddev_mult))
}

pub fn voxel_downsample(cloud: &PointCloud, grid_size: f64) -> PointCloud {
    let mut cells: BTreeMap<(i64, i64, i64), (Vector3<f64>, Vector3<f64>, usize)> = BTreeMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let key = (
            (p.x / grid_size).floor() as i64,
            (p.y / grid_size).floor() as i64,
            (p.z / grid_size).floor() as i64,
        );
        let cam = cloud.cameras.as_ref().map_or(Vector3::zeros(), |c| c[i]);
        let e = cells.entry(key).or_insert((Vector3::zeros(), Vector3::zeros(), 0));
        e.0 += p;
        e.1 += cam;
        e.2 += 1;
    }
    let mut points = Vec::with_capacity(cells.len());
    let mut cameras = Vec::with_capacity(cells.len());
    for (sum, cam, n) in cells.values() {
        points.push(sum / *n as f64);
        cameras.push(cam / *n as f64);
    }
    PointCloud {
        points,
        cameras: cloud.cameras.as_ref().map(|_| cameras),
    }
}

/// Keeps points whose mean distance to their `k` nearest neighbours is at
/// most `mean + stddev_mult · std` over the cloud.
pub fn statistical_outlier_removal(cloud: &PointCloud, k: usize, stddev_mult: f64) -> PointCloud {
    cloud.subset(&statistical_inliers(&cloud.points, k, stddev_mult))
}

/// Indices kept by [`statistical_outlier_removal`].
pub fn statistical_inliers(points: &[Vector3<f64>], k: usize, stddev_mult: f64) -> Vec<usize> {
    let n = points.len();
    if n <= 1 || k == 0 {
        return (0..n).collect();
    }
    let k = k.min(n - 1);
    let tree = KdTree::new(points);
    let mean_d: Vec<f64> = points
        .iter()
        .map(|p| {
            let nb = tree.knn(p, k + 1);
            nb.iter().skip(1).map(|x| x.dist2.sqrt()).sum::<f64>() / k as f64
        })
        .collect();
    let mu = mean_d.iter().sum::<f64>() / n as f64;
    let var = mean_d.iter().map(|d| (d - mu) * (d - mu)).sum::<f64>() / n as f64;
    let limit = mu + stddev_mult * var.sqrt();
    (0..n).filter(|&i| mean_d[i] <= limit).collect()
}

/// PCA normals from `k`-NN neighbourhoods; oriented toward each point's
/// camera when known, else propagated along a Euclidean minimum spanning tree.
pub fn estimate_oriented_normals(cloud: &PointCloud, k: usize) -> Result<OrientedPointCloud, SurfaceError> {
    if k < 3 {
        return Err(SurfaceError::InvalidParameter("k must be at least 3".into()));
    }
    if cloud.len() < k {
        return Err(SurfaceError::InsufficientPoints {
            needed: k,
            got: cloud.len(),
        });
    }
    let tree = KdTree::new(&cloud.points);
    let neighbors: Vec<Vec<usize>> = cloud
        .points
        .iter()
        .map(|p| tree.knn(p, k).into_iter().map(|n| n.index).collect())
        .collect();
    let mut normals: Vec<Vector3<f64>> = neighbors
        .iter()
        .map(|nb| {
            let c = nb.iter().map(|&j| cloud.points[j]).sum::<Vector3<f64>>() / nb.len() as f64;
            let mut cov = Matrix3::zeros();
            for &j in nb {
                let d = cloud.points[j] - c;
                cov += d * d.transpose();
            }
            let eig = SymmetricEigen::new(cov);
            let mut idx = 0;
            for i in 1..3 {
                if eig.eigenvalues[i] < eig.eigenvalues[idx] {
                    idx = i;
                }
            }
            eig.eigenvectors.column(idx).normalize()
        })
        .collect();
    match &cloud.cameras {
        Some(cams) => {
            for (i, n) in normals.iter_mut().enumerate() {
                if n.dot(&(cams[i] - cloud.points[i])) < 0.0 {
                    *n = -*n;
                }
            }
        }
        None => orient_by_mst(&cloud.points, &neighbors, &mut normals),
    }
    Ok(OrientedPointCloud {
        points: cloud.points.clone(),
        normals,
        source_camera: cloud.cameras.clone(),
    })
}

/// Prim's algorithm on the k-NN graph; each component is rooted at its
/// highest point with the normal facing +z, and children are flipped to
/// agree with their parent.
fn orient_by_mst(points: &[Vector3<f64>], neighbors: &[Vec<usize>], normals: &mut [Vector3<f64>]) {
    let n = points.len();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, nb) in neighbors.iter().enumerate() {
        for &j in nb {
            if i != j {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    for a in &mut adj {
        a.sort_unstable();
        a.dedup();
    }
    let mut visited = vec![false; n];
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| points[b].z.total_cmp(&points[a].z).then(a.cmp(&b)));
    for &root in &order {
        if visited[root] {
            continue;
        }
        if normals[root].z < 0.0 {
            normals[root] = -normals[root];
        }
        // Min-heap keyed by (distance, child, parent) for determinism.
        let mut heap = std::collections::BinaryHeap::new();
        let push = |heap: &mut std::collections::BinaryHeap<_>, from: usize, adj: &Vec<Vec<usize>>, visited: &Vec<bool>| {
            for &j in &adj[from] {
                if !visited[j] {
                    let d = (points[j] - points[from]).norm_squared();
                    heap.push(std::cmp::Reverse((OrdF64(d), j, from)));
                }
            }
        };
        visited[root] = true;
        push(&mut heap, root, &adj, &visited);
        while let Some(std::cmp::Reverse((_, j, parent))) = heap.pop() {
            if visited[j] {
                continue;
            }
            visited[j] = true;
            if normals[j].dot(&normals[parent]) < 0.0 {
                normals[j] = -normals[j];
            }
            push(&mut heap, j, &adj, &visited);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// `round(log8 n)` clamped to `[3, 8]`.
pub fn choose_octree_depth(n_points: usize) -> u32 {
    let n = n_points.max(1) as f64;
    let d = (n.ln() / 8f64.ln()).round() as i64;
    d.clamp(MIN_DEPTH as i64, MAX_DEPTH as i64) as u32
}

type Cell = [i32; 3];

fn cell_key(c: &Cell) -> u64 {
    ((c[0] as u64 & 0x1F_FFFF) << 42) | ((c[1] as u64 & 0x1F_FFFF) << 21) | (c[2] as u64 & 0x1F_FFFF)
}

/// Adaptive octree: only cells containing samples (and their ancestors)
/// exist. Every sample lives in exactly one depth-`D` leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct Octree {
    pub center: Vector3<f64>,
    pub width: f64,
    pub depth: u32,
    /// Occupied cells per depth, sorted.
    pub levels: Vec<Vec<Cell>>,
    /// Sample indices per depth-`D` leaf, parallel to `levels[depth]`.
    pub leaf_samples: Vec<Vec<usize>>,
    pub points: Vec<Vector3<f64>>,
}

impl Octree {
    pub fn corner(&self) -> Vector3<f64> {
        self.center - Vector3::repeat(0.5 * self.width)
    }

    pub fn cell_width(&self, depth: u32) -> f64 {
        self.width / (1u64 << depth) as f64
    }

    pub fn node_count(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    /// Cell containing `p` at `depth`, clamped to the grid.
    pub fn cell_of(&self, p: &Vector3<f64>, depth: u32) -> Cell {
        let n = 1i64 << depth;
        let rel = (p - self.corner()) / self.cell_width(depth);
        [0, 1, 2].map(|a| (rel[a].floor() as i64).clamp(0, n - 1) as i32)
    }

    pub fn leaf_index(&self, cell: &Cell) -> Option<usize> {
        self.levels[self.depth as usize].binary_search(cell).ok()
    }
}

pub fn build_octree(cloud: &OrientedPointCloud, depth: u32) -> Result<Octree, SurfaceError> {
    if cloud.is_empty() {
        return Err(SurfaceError::InsufficientPoints { needed: 1, got: 0 });
    }
    if depth > 10 {
        return Err(SurfaceError::InvalidParameter(format!("depth {depth} exceeds 10")));
    }
    let (lo, hi) = bounding_box(&cloud.points).expect("non-empty");
    let extent = (hi - lo).max();
    let width = if extent > 0.0 { extent * (1.0 + ROOT_MARGIN) } else { 1.0 };
    let mut tree = Octree {
        center: 0.5 * (lo + hi),
        width,
        depth,
        levels: vec![Vec::new(); depth as usize + 1],
        leaf_samples: Vec::new(),
        points: cloud.points.clone(),
    };
    let mut leaves: BTreeMap<Cell, Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        leaves.entry(tree.cell_of(p, depth)).or_default().push(i);
    }
    let mut level: Vec<Cell> = leaves.keys().copied().collect();
    tree.leaf_samples = leaves.into_values().collect();
    for d in (0..=depth as usize).rev() {
        tree.levels[d] = level.clone();
        let mut parents: Vec<Cell> = level.iter().map(|c| c.map(|v| v >> 1)).collect();
        parents.sort_unstable();
        parents.dedup();
        level = parents;
    }
    Ok(tree)
}

/// Uniform quadratic B-spline on `[-1.5, 1.5]`.
#[inline]
fn bspline(t: f64) -> f64 {
    let a = t.abs();
    if a < 0.5 {
        0.75 - a * a
    } else if a < 1.5 {
        0.5 * (1.5 - a) * (1.5 - a)
    } else {
        0.0
    }
}

#[inline]
fn bspline_d(t: f64) -> f64 {
    let a = t.abs();
    if a < 0.5 {
        -2.0 * t
    } else if a < 1.5 {
        -(1.5 - a) * t.signum()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Kind {
    /// ∫ B_a B_b
    Mass,
    /// ∫ B_a' B_b
    DerivValue,
    /// ∫ B_a' B_b'
    Stiffness,
}

/// Memoised 1D inner products between B-splines of different depths,
/// evaluated exactly with 3-point Gauss-Legendre on each polynomial piece.
#[derive(Default)]
struct Integrals {
    memo: HashMap<(Kind, u32, u32, i64), f64>,
}

const GL3_X: [f64; 3] = [-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4];
const GL3_W: [f64; 3] = [0.555_555_555_555_555_6, 0.888_888_888_888_888_9, 0.555_555_555_555_555_6];

impl Integrals {
    /// Integral of the given kind for basis `(da, ia)` against `(db, ib)`
    /// on a root of width `root`.
    fn get(&mut self, kind: Kind, da: u32, ia: i32, db: u32, ib: i32, root: f64) -> f64 {
        let df = da.max(db);
        // Centres in units of the finer width, doubled to stay integral.
        let ca2 = (2 * ia as i64 + 1) << (df - da);
        let cb2 = (2 * ib as i64 + 1) << (df - db);
        let off2 = cb2 - ca2;
        let (sa, sb) = (df - da, df - db);
        if off2.abs() > 3 * ((1i64 << sa) + (1i64 << sb)) {
            return 0.0;
        }
        let key = (kind, sa, sb, off2);
        let unit = *self.memo.entry(key).or_insert_with(|| Self::compute(kind, sa, sb, off2));
        let wf = root / (1u64 << df) as f64;
        match kind {
            Kind::Mass => unit * wf,
            Kind::DerivValue => unit,
            Kind::Stiffness => unit / wf,
        }
    }

    fn compute(kind: Kind, sa: u32, sb: u32, off2: i64) -> f64 {
        let wa = (1u64 << sa) as f64;
        let wb = (1u64 << sb) as f64;
        let cb = off2 as f64 * 0.5;
        let mut breaks = Vec::with_capacity(8);
        for k in [-1.5, -0.5, 0.5, 1.5] {
            breaks.push(k * wa);
            breaks.push(cb + k * wb);
        }
        breaks.sort_by(f64::total_cmp);
        let lo = (-1.5 * wa).max(cb - 1.5 * wb);
        let hi = (1.5 * wa).min(cb + 1.5 * wb);
        if lo >= hi {
            return 0.0;
        }
        let mut acc = 0.0;
        for w in breaks.windows(2) {
            let (a, b) = (w[0].max(lo), w[1].min(hi));
            if b <= a {
                continue;
            }
            let (h, m) = (0.5 * (b - a), 0.5 * (a + b));
            for (x, wt) in GL3_X.iter().zip(GL3_W) {
                let t = m + h * x;
                let (ta, tb) = (t / wa, (t - cb) / wb);
                let v = match kind {
                    Kind::Mass => bspline(ta) * bspline(tb),
                    Kind::DerivValue => bspline_d(ta) / wa * bspline(tb),
                    Kind::Stiffness => bspline_d(ta) / wa * bspline_d(tb) / wb,
                };
                acc += wt * h * v;
            }
        }
        acc
    }
}

/// Solved indicator function: B-spline coefficients at every depth.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorField {
    pub center: Vector3<f64>,
    pub width: f64,
    pub depth: u32,
    /// Active nodes per depth, sorted, with their coefficients.
    pub nodes: Vec<Vec<(Cell, f64)>>,
    pub iso_value: f64,
    /// Residual norms of the iterative solve at each depth.
    pub residual_history: Vec<Vec<f64>>,
    /// Depth at which each sample was splatted.
    pub splat_depths: Vec<u32>,
}

impl IndicatorField {
    fn corner(&self) -> Vector3<f64> {
        self.center - Vector3::repeat(0.5 * self.width)
    }

    /// Evaluates χ at `p`.
    pub fn evaluate(&self, p: &Vector3<f64>) -> f64 {
        let corner = self.corner();
        let mut acc = 0.0;
        for (d, level) in self.nodes.iter().enumerate() {
            let w = self.width / (1u64 << d) as f64;
            let rel = (p - corner) / w;
            let base = [0, 1, 2].map(|a| (rel[a] - 0.5).floor() as i32);
            for dz in -1..=2 {
                for dy in -1..=2 {
                    for dx in -1..=2 {
                        let c = [base[0] + dx, base[1] + dy, base[2] + dz];
                        if let Ok(k) = level.binary_search_by(|(cell, _)| cell.cmp(&c)) {
                            let b = bspline(rel.x - c[0] as f64 - 0.5)
                                * bspline(rel.y - c[1] as f64 - 0.5)
                                * bspline(rel.z - c[2] as f64 - 0.5);
                            acc += level[k].1 * b;
                        }
                    }
                }
            }
        }
        acc
    }

    pub fn coefficient_count(&self) -> usize {
        self.nodes.iter().map(Vec::len).sum()
    }
}

fn dilate(cells: &[Cell], rings: i32, n: i32) -> Vec<Cell> {
    let mut out: Vec<Cell> = Vec::with_capacity(cells.len() * 8);
    for c in cells {
        for dz in -rings..=rings {
            for dy in -rings..=rings {
                for dx in -rings..=rings {
                    let q = [c[0] + dx, c[1] + dy, c[2] + dz];
                    if q.iter().all(|&v| v >= 0 && v < n) {
                        out.push(q);
                    }
                }
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Sparse symmetric matrix in CSR form.
struct Csr {
    row_start: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl Csr {
    fn mul(&self, x: &[f64], y: &mut [f64]) {
        for (r, out) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in self.row_start[r]..self.row_start[r + 1] {
                s += self.vals[k] * x[self.cols[k] as usize];
            }
            *out = s;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conjugate residual iteration for a symmetric system; the 2-norm of the
/// residual is non-increasing. Returns the residual history.
fn conjugate_residual(a: &Csr, b: &[f64], x: &mut [f64], tol: f64, max_iter: usize) -> Result<Vec<f64>, (usize, f64)> {
    let n = b.len();
    let b_norm = dot(b, b).sqrt();
    let mut history = Vec::new();
    if b_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        history.push(0.0);
        return Ok(history);
    }
    let mut ax = vec![0.0; n];
    a.mul(x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut p = r.clone();
    let mut ar = vec![0.0; n];
    a.mul(&r, &mut ar);
    let mut ap = ar.clone();
    let mut rar = dot(&r, &ar);
    let mut res = dot(&r, &r).sqrt();
    history.push(res);
    for _ in 0..max_iter {
        if res <= tol * b_norm {
            return Ok(history);
        }
        let apap = dot(&ap, &ap);
        if apap == 0.0 || rar == 0.0 {
            break;
        }
        let alpha = rar / apap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        res = dot(&r, &r).sqrt();
        history.push(res);
        a.mul(&r, &mut ar);
        let rar_new = dot(&r, &ar);
        let beta = rar_new / rar;
        rar = rar_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
            ap[i] = ar[i] + beta * ap[i];
        }
    }
    if res <= tol * b_norm {
        Ok(history)
    } else {
        Err((history.len() - 1, res / b_norm))
    }
}

/// Per-sample surface-area estimate from the `AREA_K`-th neighbour distance.
fn area_weights(points: &[Vector3<f64>]) -> Vec<f64> {
    let tree = KdTree::new(points);
    let k = AREA_K.min(points.len().saturating_sub(1));
    if k == 0 {
        return vec![1.0; points.len()];
    }
    points
        .iter()
        .map(|p| {
            let nb = tree.knn(p, k + 1);
            let r2 = nb.last().map_or(0.0, |n| n.dist2);
            std::f64::consts::PI * r2 / k as f64
        })
        .collect()
}

/// Solves the screened-free Poisson problem ∇·∇χ = ∇·V depth by depth,
/// coarse to fine, with each depth solving for the residual left by the
/// coarser ones.
pub fn solve_indicator(tree: &Octree, cloud: &OrientedPointCloud) -> Result<IndicatorField, SurfaceError> {
    if cloud.normals.len() != cloud.points.len() || cloud.normals.is_empty() {
        return Err(SurfaceError::MissingNormals {
            normals: cloud.normals.len(),
            points: cloud.points.len(),
        });
    }
    let depth = tree.depth;
    let corner = tree.corner();
    let mut integrals = Integrals::default();

    // Adaptive splat depth: samples with larger patches go coarser.
    let areas = area_weights(&cloud.points);
    let mut sorted_areas = areas.clone();
    sorted_areas.sort_by(f64::total_cmp);
    let median_area = sorted_areas[sorted_areas.len() / 2].max(f64::MIN_POSITIVE);
    let min_splat = depth.saturating_sub(2);
    let splat_depths: Vec<u32> = areas
        .iter()
        .map(|a| {
            let shift = (0.5 * (a / median_area).max(1e-300).log2()).round().max(0.0) as u32;
            depth.saturating_sub(shift).max(min_splat)
        })
        .collect();

    // Splatted vector field per depth: trilinear weights onto the 8 nearest node centres.
    let mut splats: Vec<BTreeMap<Cell, Vector3<f64>>> = vec![BTreeMap::new(); depth as usize + 1];
    for (i, p) in cloud.points.iter().enumerate() {
        let d = splat_depths[i];
        let w = tree.cell_width(d);
        let rel = (p - corner) / w - Vector3::repeat(0.5);
        let base = [0, 1, 2].map(|a| rel[a].floor() as i32);
        let frac = [0, 1, 2].map(|a| rel[a] - base[a] as f64);
        let v = cloud.normals[i] * areas[i];
        for corner_bits in 0..8 {
            let mut c = base;
            let mut wt = 1.0;
            for a in 0..3 {
                if corner_bits >> a & 1 == 1 {
                    c[a] += 1;
                    wt *= frac[a];
                } else {
                    wt *= 1.0 - frac[a];
                }
            }
            if wt != 0.0 {
                *splats[d as usize].entry(c).or_insert_with(Vector3::zeros) += v * wt;
            }
        }
    }

    // Active unknowns per depth: occupied cells dilated by two rings.
    let active: Vec<Vec<Cell>> = (0..=depth)
        .map(|d| {
            let n = 1i32 << d;
            if d <= 2 {
                let mut all = Vec::with_capacity((n * n * n) as usize);
                for x in 0..n {
                    for y in 0..n {
                        for z in 0..n {
                            all.push([x, y, z]);
                        }
                    }
                }
                all
            } else {
                dilate(&tree.levels[d as usize], 2, n)
            }
        })
        .collect();
    let index: Vec<HashMap<u64, usize>> = active
        .iter()
        .map(|cells| cells.iter().enumerate().map(|(i, c)| (cell_key(c), i)).collect())
        .collect();

    // Right-hand side b_o = ⟨∇F_o, V⟩, scattered from splat nodes.
    let root = tree.width;
    let mut rhs: Vec<Vec<f64>> = active.iter().map(|c| vec![0.0; c.len()]).collect();
    for (ds, splat) in splats.iter().enumerate() {
        let ds = ds as u32;
        for (sc, v) in splat {
            for d in 0..=depth {
                let reach = overlap_range(ds, d);
                let anchor = project_cell(sc, ds, d);
                for oz in -reach..=reach {
                    for oy in -reach..=reach {
                        for ox in -reach..=reach {
                            let c = [anchor[0] + ox, anchor[1] + oy, anchor[2] + oz];
                            let Some(&row) = index[d as usize].get(&cell_key(&c)) else {
                                continue;
                            };
                            if c.iter().any(|&x| x < 0) {
                                continue;
                            }
                            let mut m = [0.0; 3];
                            let mut g = [0.0; 3];
                            for a in 0..3 {
                                m[a] = integrals.get(Kind::Mass, d, c[a], ds, sc[a], root);
                                g[a] = integrals.get(Kind::DerivValue, d, c[a], ds, sc[a], root);
                            }
                            let val = v.x * g[0] * m[1] * m[2] + v.y * m[0] * g[1] * m[2] + v.z * m[0] * m[1] * g[2];
                            rhs[d as usize][row] += val;
                        }
                    }
                }
            }
        }
    }

    let mut coeffs: Vec<Vec<f64>> = Vec::with_capacity(depth as usize + 1);
    let mut history = Vec::with_capacity(depth as usize + 1);
    for d in 0..=depth {
        let cells = &active[d as usize];
        let mut b = rhs[d as usize].clone();
        // Subtract the contribution of coarser solutions.
        for (dc, xc) in coeffs.iter().enumerate() {
            let dc = dc as u32;
            let reach = overlap_range(d, dc);
            for (row, c) in cells.iter().enumerate() {
                let anchor = project_cell(c, d, dc);
                let mut s = 0.0;
                for oz in -reach..=reach {
                    for oy in -reach..=reach {
                        for ox in -reach..=reach {
                            let q = [anchor[0] + ox, anchor[1] + oy, anchor[2] + oz];
                            if let Some(&col) = index[dc as usize].get(&cell_key(&q)) {
                                if q.iter().any(|&x| x < 0) {
                                    continue;
                                }
                                s += xc[col] * stiffness(&mut integrals, d, c, dc, &q, root);
                            }
                        }
                    }
                }
                b[row] -= s;
            }
        }
        let matrix = assemble_level(&mut integrals, cells, &index[d as usize], d, root);
        let mut x = vec![0.0; cells.len()];
        let cap = 10 * cells.len().max(1);
        let hist = conjugate_residual(&matrix, &b, &mut x, SOLVER_TOLERANCE, cap).map_err(|(iterations, residual)| {
            SurfaceError::NoConvergence {
                depth: d,
                iterations,
                residual,
            }
        })?;
        history.push(hist);
        coeffs.push(x);
    }

    let mut field = IndicatorField {
        center: tree.center,
        width: tree.width,
        depth,
        nodes: active
            .into_iter()
            .zip(coeffs)
            .map(|(cells, x)| cells.into_iter().zip(x).collect())
            .collect(),
        iso_value: 0.0,
        residual_history: history,
        splat_depths,
    };
    let iso = cloud.points.iter().map(|p| field.evaluate(p)).sum::<f64>() / cloud.len() as f64;
    field.iso_value = iso;
    Ok(field)
}

/// Index offset range (in cells at depth `d`) that can overlap a node at depth `ds`.
fn overlap_range(ds: u32, d: u32) -> i32 {
    if ds >= d {
        2
    } else {
        3 * (1 << (d - ds)) / 2 + 2
    }
}

/// Cell at depth `to` containing the centre of `c` at depth `from`.
fn project_cell(c: &Cell, from: u32, to: u32) -> Cell {
    if to <= from {
        c.map(|v| v >> (from - to))
    } else {
        let s = 1 << (to - from);
        c.map(|v| v * s + s / 2)
    }
}

fn stiffness(integrals: &mut Integrals, da: u32, a: &Cell, db: u32, b: &Cell, root: f64) -> f64 {
    let mut m = [0.0; 3];
    let mut k = [0.0; 3];
    for ax in 0..3 {
        m[ax] = integrals.get(Kind::Mass, da, a[ax], db, b[ax], root);
        if m[ax] == 0.0 {
            return 0.0;
        }
        k[ax] = integrals.get(Kind::Stiffness, da, a[ax], db, b[ax], root);
    }
    k[0] * m[1] * m[2] + m[0] * k[1] * m[2] + m[0] * m[1] * k[2]
}

fn assemble_level(integrals: &mut Integrals, cells: &[Cell], index: &HashMap<u64, usize>, d: u32, root: f64) -> Csr {
    let mut row_start = Vec::with_capacity(cells.len() + 1);
    let mut cols = Vec::with_capacity(cells.len() * 125);
    let mut vals = Vec::with_capacity(cells.len() * 125);
    row_start.push(0);
    let mut row: Vec<(u32, f64)> = Vec::with_capacity(125);
    for c in cells {
        row.clear();
        for oz in -2..=2 {
            for oy in -2..=2 {
                for ox in -2..=2 {
                    let q = [c[0] + ox, c[1] + oy, c[2] + oz];
                    if q.iter().any(|&x| x < 0) {
                        continue;
                    }
                    if let Some(&col) = index.get(&cell_key(&q)) {
                        let v = stiffness(integrals, d, c, d, &q, root);
                        if v != 0.0 {
                            row.push((col as u32, v));
                        }
                    }
                }
            }
        }
        row.sort_unstable_by_key(|e| e.0);
        for (col, v) in &row {
            cols.push(*col);
            vals.push(*v);
        }
        row_start.push(cols.len());
    }
    Csr { row_start, cols, vals }
}

/// Samples χ on the uniform lattice of cell corners at `depth`, scattering
/// each node's separable B-spline into the lattice.
fn sample_lattice(field: &IndicatorField, depth: u32) -> Vec<f64> {
    let n = (1usize << depth) + 1;
    let h = field.width / (1u64 << depth) as f64;
    let mut values = vec![0.0; n * n * n];
    for (d, level) in field.nodes.iter().enumerate() {
        let w = field.width / (1u64 << d) as f64;
        let ratio = w / h;
        for (c, coef) in level {
            if *coef == 0.0 {
                continue;
            }
            let mut ranges = [(0usize, 0usize); 3];
            let mut weights: [Vec<f64>; 3] = Default::default();
            for a in 0..3 {
                // Lattice coordinate of the node centre.
                let centre = (c[a] as f64 + 0.5) * ratio;
                let lo = ((centre - 1.5 * ratio).ceil().max(0.0)) as usize;
                let hi = ((centre + 1.5 * ratio).floor() as i64).min(n as i64 - 1);
                if hi < lo as i64 {
                    ranges[a] = (1, 0);
                    continue;
                }
                let hi = hi as usize;
                ranges[a] = (lo, hi);
                weights[a] = (lo..=hi).map(|l| bspline((l as f64 - centre) / ratio)).collect();
            }
            if ranges.iter().any(|r| r.0 > r.1) {
                continue;
            }
            for (iz, wz) in (ranges[2].0..=ranges[2].1).zip(&weights[2]) {
                for (iy, wy) in (ranges[1].0..=ranges[1].1).zip(&weights[1]) {
                    let wyz = coef * wy * wz;
                    let base = (iz * n + iy) * n;
                    for (ix, wx) in (ranges[0].0..=ranges[0].1).zip(&weights[0]) {
                        values[base + ix] += wyz * wx;
                    }
                }
            }
        }
    }
    values
}

/// Kuhn decomposition of the unit cube into 6 tetrahedra sharing the 0-7 diagonal.
const KUHN: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 1, 5, 7],
    [0, 2, 3, 7],
    [0, 2, 6, 7],
    [0, 4, 5, 7],
    [0, 4, 6, 7],
];

/// Marching tetrahedra on the uniform lattice at the octree depth (capped at
/// `MAX_EXTRACTION_DEPTH`). Vertices are shared by lattice edge, so the
/// result is crack-free; normals point from high to low χ.
pub fn extract_mesh(field: &IndicatorField, tree: &Octree) -> Result<TriangleMesh, SurfaceError> {
    let depth = field.depth.min(MAX_EXTRACTION_DEPTH);
    let values = sample_lattice(field, depth);
    let n = (1usize << depth) + 1;
    let h = field.width / (1u64 << depth) as f64;
    let corner = field.corner();
    let iso = field.iso_value;
    let pos = |l: usize| -> Vector3<f64> {
        let (x, y, z) = (l % n, (l / n) % n, l / (n * n));
        corner + Vector3::new(x as f64, y as f64, z as f64) * h
    };
    let mut vertices: Vec<Vector3<f64>> = Vec::new();
    let mut edge_vertex: HashMap<(usize, usize), u32> = HashMap::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    let mut vertex_on = |a: usize, b: usize, vertices: &mut Vec<Vector3<f64>>| -> u32 {
        let (a, b) = if a < b { (a, b) } else { (b, a) };
        *edge_vertex.entry((a, b)).or_insert_with(|| {
            let (va, vb) = (values[a], values[b]);
            let t = ((iso - va) / (vb - va)).clamp(0.0, 1.0);
            let (pa, pb) = (pos(a), pos(b));
            vertices.push(pa + (pb - pa) * t);
            (vertices.len() - 1) as u32
        })
    };
    for z in 0..n - 1 {
        for y in 0..n - 1 {
            for x in 0..n - 1 {
                let cube: [usize; 8] = std::array::from_fn(|b| {
                    (x + (b & 1)) + (y + ((b >> 1) & 1)) * n + (z + ((b >> 2) & 1)) * n * n
                });
                let inside: [bool; 8] = std::array::from_fn(|b| values[cube[b]] > iso);
                if inside.iter().all(|&v| v) || inside.iter().all(|&v| !v) {
                    continue;
                }
                for tet in KUHN {
                    let ids = tet.map(|b| cube[b]);
                    let ins: Vec<usize> = ids.iter().copied().filter(|&l| values[l] > iso).collect();
                    let outs: Vec<usize> = ids.iter().copied().filter(|&l| values[l] <= iso).collect();
                    if ins.is_empty() || outs.is_empty() {
                        continue;
                    }
                    let c_in = ins.iter().map(|&l| pos(l)).sum::<Vector3<f64>>() / ins.len() as f64;
                    let c_out = outs.iter().map(|&l| pos(l)).sum::<Vector3<f64>>() / outs.len() as f64;
                    let dir = c_out - c_in;
                    let emit = |tri: [u32; 3], vertices: &Vec<Vector3<f64>>, triangles: &mut Vec<[u32; 3]>| {
                        let [a, b, c] = tri.map(|i| vertices[i as usize]);
                        let nrm = (b - a).cross(&(c - a));
                        if 0.5 * nrm.norm() <= 1e-12 * h * h {
                            return;
                        }
                        if nrm.dot(&dir) >= 0.0 {
                            triangles.push(tri);
                        } else {
                            triangles.push([tri[0], tri[2], tri[1]]);
                        }
                    };
                    match (ins.len(), outs.len()) {
                        (1, 3) => {
                            let t = [
                                vertex_on(ins[0], outs[0], &mut vertices),
                                vertex_on(ins[0], outs[1], &mut vertices),
                                vertex_on(ins[0], outs[2], &mut vertices),
                            ];
                            emit(t, &vertices, &mut triangles);
                        }
                        (3, 1) => {
                            let t = [
                                vertex_on(ins[0], outs[0], &mut vertices),
                                vertex_on(ins[1], outs[0], &mut vertices),
                                vertex_on(ins[2], outs[0], &mut vertices),
                            ];
                            emit(t, &vertices, &mut triangles);
                        }
                        _ => {
                            let q = [
                                vertex_on(ins[0], outs[0], &mut vertices),
                                vertex_on(ins[0], outs[1], &mut vertices),
                                vertex_on(ins[1], outs[1], &mut vertices),
                                vertex_on(ins[1], outs[0], &mut vertices),
                            ];
                            emit([q[0], q[1], q[2]], &vertices, &mut triangles);
                            emit([q[0], q[2], q[3]], &vertices, &mut triangles);
                        }
                    }
                }
            }
        }
    }
    if triangles.is_empty() {
        return Err(SurfaceError::EmptySurface);
    }
    let mut mesh = TriangleMesh::new(vertices, triangles).compacted();
    mesh.confidence = vertex_confidence(&mesh.vertices, &tree.points, 1.5 * h);
    Ok(mesh)
}

/// Sample count within `radius` of each vertex, normalised by the median
/// non-zero count and clamped to `[0, 1]`.
pub fn vertex_confidence(vertices: &[Vector3<f64>], samples: &[Vector3<f64>], radius: f64) -> Vec<f32> {
    let tree = KdTree::new(samples);
    let counts: Vec<usize> = vertices.iter().map(|v| tree.count_within(v, radius)).collect();
    let mut nonzero: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
    if nonzero.is_empty() {
        return vec![0.0; vertices.len()];
    }
    nonzero.sort_unstable();
    let reference = nonzero[nonzero.len() / 2] as f64;
    counts.iter().map(|&c| (c as f64 / reference).min(1.0) as f32).collect()
}

fn default_voxel_fraction() -> f64 {
    0.004
}

fn default_outlier_k() -> usize {
    16
}

fn default_stddev() -> f64 {
    2.0
}

fn default_normal_k() -> usize {
    12
}

/// Surface-stage parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceConfig {
    /// Voxel size as a fraction of the cloud's bounding-box diagonal.
    #[serde(default = "default_voxel_fraction")]
    pub voxel_fraction: f64,
    #[serde(default = "default_outlier_k")]
    pub outlier_k: usize,
    #[serde(default = "default_stddev")]
    pub outlier_stddev: f64,
    #[serde(default = "default_normal_k")]
    pub normal_k: usize,
    /// Octree depth; `None` picks it from the point count.
    #[serde(default)]
    pub depth: Option<u32>,
}

impl Default for SurfaceConfig {
    fn default() -> Self {
        Self {
            voxel_fraction: default_voxel_fraction(),
            outlier_k: default_outlier_k(),
            outlier_stddev: default_stddev(),
            normal_k: default_normal_k(),
            depth: None,
        }
    }
}

/// Intermediate products of [`reconstruct_surface`].
#[derive(Debug, Clone)]
pub struct SurfaceResult {
    pub cleaned: PointCloud,
    pub oriented: OrientedPointCloud,
    pub depth: u32,
    pub mesh: TriangleMesh,
}

/// Clean, orient, build the octree, solve and extract in one call.
pub fn reconstruct_surface(cloud: &PointCloud, cfg: &SurfaceConfig) -> Result<SurfaceResult, SurfaceError> {
    let (lo, hi) = bounding_box(&cloud.points).ok_or(SurfaceError::InsufficientPoints { needed: 1, got: 0 })?;
    let diag = (hi - lo).norm();
    let grid = if diag > 0.0 { cfg.voxel_fraction * diag } else { 1.0 };
    let cleaned = clean_cloud(cloud, grid, cfg.outlier_k, cfg.outlier_stddev)?;
    let oriented = estimate_oriented_normals(&cleaned, cfg.normal_k)?;
    let depth = cfg.depth.unwrap_or_else(|| choose_octree_depth(oriented.len()));
    let tree = build_octree(&oriented, depth)?;
    let field = solve_indicator(&tree, &oriented)?;
    let mesh = extract_mesh(&field, &tree)?;
    Ok(SurfaceResult {
        cleaned,
        oriented,
        depth,
        mesh,
    })
}

/// Queue-based connected components of a k-NN graph; used by tests and
/// diagnostics to spot fragmented clouds.
pub fn knn_components(points: &[Vector3<f64>], k: usize) -> usize {
    if points.is_empty() {
        return 0;
    }
    let tree = KdTree::new(points);
    let adj: Vec<Vec<usize>> = points.iter().map(|p| tree.knn(p, k + 1).into_iter().map(|n| n.index).collect()).collect();
    let mut sym: Vec<Vec<usize>> = vec![Vec::new(); points.len()];
    for (i, nb) in adj.iter().enumerate() {
        for &j in nb {
            sym[i].push(j);
            sym[j].push(i);
        }
    }
    let mut seen = vec![false; points.len()];
    let mut count = 0;
    for s in 0..points.len() {
        if seen[s] {
            continue;
        }
        count += 1;
        let mut q = VecDeque::from([s]);
        seen[s] = true;
        while let Some(i) = q.pop_front() {
            for &j in &sym[i] {
                if !seen[j] {
                    seen[j] = true;
                    q.push_back(j);
                }
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn sphere_cloud(n: usize, r: f64, seed: u64) -> OrientedPointCloud {
        // Fibonacci lattice with a seeded rotation offset.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let points: Vec<Vector3<f64>> = (0..n)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let rho = (1.0 - z * z).sqrt();
                let th = golden * i as f64 + phase;
                Vector3::new(rho * th.cos(), rho * th.sin(), z) * r
            })
            .collect();
        let normals = points.iter().map(|p| -p.normalize()).collect();
        OrientedPointCloud {
            source_camera: Some(vec![Vector3::zeros(); n]),
            points,
            normals,
        }
    }

    #[test]
    fn depth_rule() {
        assert_eq!(choose_octree_depth(4096), 4);
        assert_eq!(choose_octree_depth(500_000), 6);
        assert_eq!(choose_octree_depth(10), 3);
        assert_eq!(choose_octree_depth(usize::MAX), 8);
    }

    #[test]
    fn cleaning_examples() {
        let c = PointCloud::new(vec![Vector3::new(0.3, 0.3, 0.3); 2]);
        assert_eq!(clean_cloud(&c, 0.1, 4, 2.0).unwrap().len(), 1);
        assert!(clean_cloud(&PointCloud::default(), 0.1, 4, 2.0).unwrap().is_empty());
        assert!(clean_cloud(&c, 0.0, 4, 2.0).is_err());
        let mut pts: Vec<Vector3<f64>> = (0..1000).map(|i| Vector3::new(i as f64 * 1e-3, 0.0, 0.0)).collect();
        pts.push(Vector3::new(100.0, 0.0, 0.0));
        let out = clean_cloud(&PointCloud::new(pts), 1e-4, 8, 2.0).unwrap();
        assert_eq!(out.len(), 1000);
        assert!(out.points.iter().all(|p| p.x < 1.0));
    }

    #[test]
    fn plane_normals_face_camera() {
        let mut pts = Vec::new();
        for i in 0..20 {
            for j in 0..20 {
                pts.push(Vector3::new(i as f64 * 0.1, j as f64 * 0.1, 0.0));
            }
        }
        let cams = vec![Vector3::new(0.0, 0.0, 5.0); pts.len()];
        let o = estimate_oriented_normals(&PointCloud::with_cameras(pts, cams), 8).unwrap();
        for n in &o.normals {
            assert!((n - Vector3::z()).norm() < 1e-6);
        }
    }

    #[test]
    fn sphere_normals_inward_and_mst() {
        let s = sphere_cloud(2000, 2.0, 1);
        let with_cam = PointCloud::with_cameras(s.points.clone(), vec![Vector3::zeros(); 2000]);
        let o = estimate_oriented_normals(&with_cam, 10).unwrap();
        for (p, n) in o.points.iter().zip(&o.normals) {
            assert!(n.dot(p) < 0.0);
            assert!((n.norm() - 1.0).abs() < 1e-9);
        }
        // Without cameras the MST propagation yields a globally consistent sign.
        let o = estimate_oriented_normals(&PointCloud::new(s.points.clone()), 10).unwrap();
        let outward = o.points.iter().zip(&o.normals).filter(|(p, n)| n.dot(p) > 0.0).count();
        assert!(outward == 0 || outward == 2000, "{outward}");
        assert!(estimate_oriented_normals(&PointCloud::new(s.points[..5].to_vec()), 10).is_err());
    }

    #[test]
    fn octree_structure() {
        let one = OrientedPointCloud {
            points: vec![Vector3::new(1.0, 2.0, 3.0)],
            normals: vec![Vector3::x()],
            source_camera: None,
        };
        let t = build_octree(&one, 5).unwrap();
        assert_eq!(t.node_count(), 6);
        let mut pts = Vec::new();
        for i in 0..8 {
            for j in 0..8 {
                for k in 0..8 {
                    pts.push(Vector3::new(i as f64, j as f64, k as f64));
                }
            }
        }
        let cloud = OrientedPointCloud {
            normals: vec![Vector3::x(); pts.len()],
            points: pts.clone(),
            source_camera: None,
        };
        for d in 1..=3 {
            let t = build_octree(&cloud, d).unwrap();
            assert!(t.node_count() <= ((8usize.pow(d + 1)) - 1) / 7);
            let mut direct: BTreeMap<Cell, usize> = BTreeMap::new();
            let cw = t.cell_width(d);
            for p in &pts {
                let rel = (p - t.corner()) / cw;
                *direct.entry([rel.x.floor() as i32, rel.y.floor() as i32, rel.z.floor() as i32]).or_default() += 1;
            }
            let counts: Vec<usize> = t.leaf_samples.iter().map(Vec::len).collect();
            assert_eq!(counts, direct.values().copied().collect::<Vec<_>>());
            assert_eq!(counts.iter().sum::<usize>(), 512);
        }
        // One octant only.
        let sub = OrientedPointCloud {
            points: vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 1.0, 1.0), Vector3::new(0.2, 0.7, 0.1)],
            normals: vec![Vector3::x(); 3],
            source_camera: None,
        };
        let mut t = build_octree(&sub, 3).unwrap();
        // Shift the root so the samples all fall in its first octant.
        t.center += Vector3::repeat(0.5 * t.width);
        let rebuilt = {
            let mut leaves: BTreeMap<Cell, Vec<usize>> = BTreeMap::new();
            for (i, p) in sub.points.iter().enumerate() {
                leaves.entry(t.cell_of(p, 1)).or_default().push(i);
            }
            leaves
        };
        assert_eq!(rebuilt.len(), 1);
    }

    #[test]
    fn integrals_match_quadrature() {
        let mut it = Integrals::default();
        // Brute-force midpoint rule on a fine grid as the oracle.
        let root = 2.0;
        for (da, ia, db, ib) in [(2, 1, 2, 1), (2, 1, 2, 2), (1, 0, 3, 2), (3, 5, 1, 1), (2, 0, 4, 3)] {
            let wa = root / (1 << da) as f64;
            let wb = root / (1 << db) as f64;
            let (ca, cb) = ((ia as f64 + 0.5) * wa, (ib as f64 + 0.5) * wb);
            let n = 400_000;
            let (lo, hi) = (-2.0, 4.0);
            let dx = (hi - lo) / n as f64;
            let (mut m, mut g, mut k) = (0.0, 0.0, 0.0);
            for s in 0..n {
                let x = lo + (s as f64 + 0.5) * dx;
                let (ta, tb) = ((x - ca) / wa, (x - cb) / wb);
                m += bspline(ta) * bspline(tb) * dx;
                g += bspline_d(ta) / wa * bspline(tb) * dx;
                k += bspline_d(ta) / wa * bspline_d(tb) / wb * dx;
            }
            assert!((it.get(Kind::Mass, da, ia, db, ib, root) - m).abs() < 1e-6);
            assert!((it.get(Kind::DerivValue, da, ia, db, ib, root) - g).abs() < 1e-6);
            assert!((it.get(Kind::Stiffness, da, ia, db, ib, root) - k).abs() < 1e-5);
        }
    }

    #[test]
    fn sphere_inside_outside() {
        let s = sphere_cloud(4000, 1.0, 2);
        let tree = build_octree(&s, 4).unwrap();
        let field = solve_indicator(&tree, &s).unwrap();
        let at_center = field.evaluate(&Vector3::zeros());
        assert!(at_center > field.iso_value);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ok = 0;
        for _ in 0..200 {
            let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0f64)).normalize();
            if field.evaluate(&(dir * 2.0)) < field.iso_value {
                ok += 1;
            }
        }
        assert!(ok >= 198, "{ok}");
        for h in &field.residual_history {
            assert!(h.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        }
    }

    #[test]
    fn missing_normals_and_constant_field() {
        let s = sphere_cloud(100, 1.0, 0);
        let tree = build_octree(&s, 3).unwrap();
        let bad = OrientedPointCloud {
            normals: Vec::new(),
            ..s.clone()
        };
        assert!(matches!(solve_indicator(&tree, &bad), Err(SurfaceError::MissingNormals { .. })));
        let mut field = solve_indicator(&tree, &s).unwrap();
        for level in &mut field.nodes {
            for e in level.iter_mut() {
                e.1 = 0.0;
            }
        }
        field.iso_value = 0.0;
        assert_eq!(extract_mesh(&field, &tree), Err(SurfaceError::EmptySurface));
    }

    #[test]
    fn translation_equivariance() {
        let s = sphere_cloud(1500, 1.0, 4);
        let offset = Vector3::new(3.25, -1.5, 0.75);
        let t = s.translated(&offset);
        let fa = solve_indicator(&build_octree(&s, 4).unwrap(), &s).unwrap();
        let fb = solve_indicator(&build_octree(&t, 4).unwrap(), &t).unwrap();
        assert_eq!(fa.coefficient_count(), fb.coefficient_count());
        let scale = fa.nodes.iter().flatten().map(|e| e.1.abs()).fold(0.0, f64::max);
        for (la, lb) in fa.nodes.iter().zip(&fb.nodes) {
            for (a, b) in la.iter().zip(lb) {
                assert_eq!(a.0, b.0);
                assert!((a.1 - b.1).abs() <= 1e-9 * scale);
            }
        }
    }
}
