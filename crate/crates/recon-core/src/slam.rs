//! Keyframe-based monocular mapping: fundamental-matrix initialisation with
//! skip-ahead, frame tracking against the local map, keyframe insertion,
//! triangulation and culling, a covisibility graph, local and global bundle
//! adjustment, and multi-view densification over covisible keyframes.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{ba_optimize_with, BaMode, BaOptions, BaProblem, Observation};
use crate::epipolar::{
    fundamental_from_poses, is_degenerate, ransac_two_view, sampson_distance, triangulate, Correspondence, EpipolarError,
    RansacConfig,
};
use crate::features::{match_descriptors, BinaryDescriptor, FrameFeatures};
use crate::geometry::{CameraIntrinsics, CameraPose, HomPoint3, ProjectionMatrix};
use crate::io::write_pose_line;
use crate::surface::{statistical_inliers, PointCloud};

pub type KeyframeId = u64;
pub type MapPointId = u64;

#[derive(thiserror::Error, Debug)]
pub enum SlamError {
    #[error("need at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("initialisation failed after trying {tried} frame pairs")]
    InitializationFailed { tried: usize },
    #[error("tracking lost at frame {0}")]
    Lost(usize),
    #[error("map is not in the tracking state")]
    NotTracking,
    #[error("unknown keyframe {0}")]
    UnknownKeyframe(KeyframeId),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Tracking and mapping parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlamConfig {
    pub ransac: RansacConfig,
    pub min_init_inliers: usize,
    pub match_ratio: f64,
    pub max_hamming: u32,
    /// Fewer pose inliers than this marks tracking as lost.
    pub min_tracked: usize,
    pub keyframe_track_ratio: f64,
    pub keyframe_parallax_deg: f64,
    pub local_window: usize,
    pub cull_ratio: f64,
    pub cull_min_observers: usize,
    pub search_radius_px: f64,
    /// Reprojection inlier bound at pyramid level 0.
    pub inlier_px: f64,
    pub min_parallax_deg: f64,
    pub local_ba_iterations: usize,
    pub global_ba_iterations: usize,
}

impl Default for SlamConfig {
    fn default() -> Self {
        Self {
            ransac: RansacConfig::default(),
            min_init_inliers: 80,
            match_ratio: 0.8,
            max_hamming: 64,
            min_tracked: 20,
            keyframe_track_ratio: 0.9,
            keyframe_parallax_deg: 1.0,
            local_window: 8,
            cull_ratio: 0.9,
            cull_min_observers: 3,
            search_radius_px: 12.0,
            inlier_px: 5.991f64.sqrt(),
            min_parallax_deg: 1.0,
            local_ba_iterations: 10,
            global_ba_iterations: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Keyframe {
    pub id: KeyframeId,
    pub frame_index: usize,
    pub pose: CameraPose,
    pub features: FrameFeatures,
    /// Keypoint index → map point id.
    pub map_point_links: BTreeMap<usize, MapPointId>,
}

impl Keyframe {
    pub fn pixel(&self, kp: usize) -> Vector2<f64> {
        self.features.keypoints[kp].position
    }

    pub fn level_scale(&self, kp: usize) -> f64 {
        self.features.level_scale(self.features.keypoints[kp].level)
    }
}

#[derive(Debug, Clone)]
pub struct MapPoint {
    pub id: MapPointId,
    pub position: Vector3<f64>,
    /// Keyframe id → keypoint index.
    pub observations: BTreeMap<KeyframeId, usize>,
    /// Descriptor of the most recent observation.
    pub descriptor: BinaryDescriptor,
}

/// Weighted undirected graph; the weight of an edge is the exact number of
/// map points both keyframes observe.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CovisibilityGraph {
    edges: BTreeMap<KeyframeId, BTreeMap<KeyframeId, usize>>,
}

impl CovisibilityGraph {
    /// Recomputes every edge from the map point observations.
    pub fn rebuild(keyframes: &BTreeMap<KeyframeId, Keyframe>, points: &BTreeMap<MapPointId, MapPoint>) -> Self {
        let mut edges: BTreeMap<KeyframeId, BTreeMap<KeyframeId, usize>> =
            keyframes.keys().map(|&k| (k, BTreeMap::new())).collect();
        for mp in points.values() {
            let obs: Vec<KeyframeId> = mp.observations.keys().copied().collect();
            for (i, &a) in obs.iter().enumerate() {
                for &b in &obs[i + 1..] {
                    *edges.entry(a).or_default().entry(b).or_insert(0) += 1;
                    *edges.entry(b).or_default().entry(a).or_insert(0) += 1;
                }
            }
        }
        Self { edges }
    }

    pub fn nodes(&self) -> Vec<KeyframeId> {
        self.edges.keys().copied().collect()
    }

    pub fn weight(&self, a: KeyframeId, b: KeyframeId) -> usize {
        self.edges.get(&a).and_then(|e| e.get(&b)).copied().unwrap_or(0)
    }

    /// Neighbours sorted by weight (descending), then id.
    pub fn neighbors(&self, a: KeyframeId) -> Vec<(KeyframeId, usize)> {
        let mut v: Vec<(KeyframeId, usize)> = self
            .edges
            .get(&a)
            .map(|e| e.iter().map(|(&k, &w)| (k, w)).collect())
            .unwrap_or_default();
        v.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
        v
    }

    pub fn edge_count(&self) -> usize {
        self.edges.values().map(BTreeMap::len).sum::<usize>() / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackingState {
    Initializing,
    Tracking,
    Lost { frame: usize },
}

/// Pose of a non-keyframe frame stored relative to its reference keyframe,
/// so it follows that keyframe through later optimisation.
#[derive(Debug, Clone, Copy)]
struct FrameAnchor {
    reference: KeyframeId,
    relative: CameraPose,
}

#[derive(Debug, Clone)]
pub struct SlamMap {
    pub intrinsics: CameraIntrinsics,
    pub config: SlamConfig,
    pub keyframes: BTreeMap<KeyframeId, Keyframe>,
    pub map_points: BTreeMap<MapPointId, MapPoint>,
    pub graph: CovisibilityGraph,
    /// Per processed frame; `None` before initialisation or after loss.
    pub trajectory: Vec<Option<CameraPose>>,
    pub state: TrackingState,
    pub reference_keyframe: KeyframeId,
    pub culled_keyframes: usize,
    next_keyframe: KeyframeId,
    next_point: MapPointId,
    anchors: Vec<Option<FrameAnchor>>,
    velocity: Option<CameraPose>,
}

/// Result of tracking a single frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackOutcome {
    pub pose: Option<CameraPose>,
    pub inliers: usize,
    pub new_keyframe: Option<KeyframeId>,
}

fn level_threshold(cfg: &SlamConfig, scale: f64) -> f64 {
    cfg.inlier_px * scale
}

fn reprojection(k: &CameraIntrinsics, pose: &CameraPose, x: &Vector3<f64>, px: &Vector2<f64>) -> Option<f64> {
    k.project_camera(&pose.transform(x)).map(|p| (p - px).norm())
}

fn ray_angle(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let c = a.dot(b) / (a.norm() * b.norm());
    c.clamp(-1.0, 1.0).acos()
}

/// Spatial hash of keypoint positions for radius queries.
struct KeypointGrid {
    cell: f64,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<u32>>,
}

impl KeypointGrid {
    fn new(f: &FrameFeatures, cell: f64) -> Self {
        let cols = ((f.width as f64 / cell).ceil() as usize).max(1);
        let rows = ((f.height as f64 / cell).ceil() as usize).max(1);
        let mut buckets = vec![Vec::new(); cols * rows];
        for (i, kp) in f.keypoints.iter().enumerate() {
            let cx = ((kp.position.x / cell).floor() as isize).clamp(0, cols as isize - 1) as usize;
            let cy = ((kp.position.y / cell).floor() as isize).clamp(0, rows as isize - 1) as usize;
            buckets[cy * cols + cx].push(i as u32);
        }
        Self {
            cell,
            cols,
            rows,
            buckets,
        }
    }

    fn cells_around(&self, p: &Vector2<f64>, r: f64) -> impl Iterator<Item = &u32> {
        let x0 = (((p.x - r) / self.cell).floor() as isize).clamp(0, self.cols as isize - 1) as usize;
        let x1 = (((p.x + r) / self.cell).floor() as isize).clamp(0, self.cols as isize - 1) as usize;
        let y0 = (((p.y - r) / self.cell).floor() as isize).clamp(0, self.rows as isize - 1) as usize;
        let y1 = (((p.y + r) / self.cell).floor() as isize).clamp(0, self.rows as isize - 1) as usize;
        (y0..=y1).flat_map(move |y| (x0..=x1).flat_map(move |x| self.buckets[y * self.cols + x].iter()))
    }

    fn within(&self, f: &FrameFeatures, p: &Vector2<f64>, r: f64) -> Vec<usize> {
        let r2 = r * r;
        self.cells_around(p, r)
            .map(|&i| i as usize)
            .filter(|&i| (f.keypoints[i].position - p).norm_squared() <= r2)
            .collect()
    }
}

fn in_image(f: &FrameFeatures, p: &Vector2<f64>) -> bool {
    p.x >= 0.0 && p.y >= 0.0 && p.x < f.width as f64 && p.y < f.height as f64
}

impl SlamMap {
    pub fn empty(k: CameraIntrinsics, cfg: SlamConfig) -> Self {
        Self {
            intrinsics: k,
            config: cfg,
            keyframes: BTreeMap::new(),
            map_points: BTreeMap::new(),
            graph: CovisibilityGraph::default(),
            trajectory: Vec::new(),
            state: TrackingState::Initializing,
            reference_keyframe: 0,
            culled_keyframes: 0,
            next_keyframe: 0,
            next_point: 0,
            anchors: Vec::new(),
            velocity: None,
        }
    }

    pub fn frames_processed(&self) -> usize {
        self.trajectory.len()
    }

    /// Keyframe ids in insertion order.
    pub fn keyframe_ids(&self) -> Vec<KeyframeId> {
        self.keyframes.keys().copied().collect()
    }

    pub fn first_keyframe(&self) -> Option<KeyframeId> {
        self.keyframes.keys().next().copied()
    }

    /// Inserts a keyframe; returns its id. Links must reference existing points.
    pub fn insert_keyframe(
        &mut self,
        frame_index: usize,
        pose: CameraPose,
        features: FrameFeatures,
        links: BTreeMap<usize, MapPointId>,
    ) -> KeyframeId {
        let id = self.next_keyframe;
        self.next_keyframe += 1;
        for (&kp, &mp) in &links {
            if let Some(p) = self.map_points.get_mut(&mp) {
                p.observations.insert(id, kp);
                p.descriptor = features.descriptors[kp];
            }
        }
        self.keyframes.insert(
            id,
            Keyframe {
                id,
                frame_index,
                pose,
                features,
                map_point_links: links,
            },
        );
        self.graph = CovisibilityGraph::rebuild(&self.keyframes, &self.map_points);
        id
    }

    fn add_point(&mut self, position: Vector3<f64>, obs: &[(KeyframeId, usize)]) -> MapPointId {
        let id = self.next_point;
        self.next_point += 1;
        let mut observations = BTreeMap::new();
        let mut descriptor = BinaryDescriptor::default();
        for &(kf, kp) in obs {
            observations.insert(kf, kp);
            let k = self.keyframes.get_mut(&kf).expect("keyframe exists");
            k.map_point_links.insert(kp, id);
            descriptor = k.features.descriptors[kp];
        }
        self.map_points.insert(
            id,
            MapPoint {
                id,
                position,
                observations,
                descriptor,
            },
        );
        id
    }

    fn unlink(&mut self, kf: KeyframeId, mp: MapPointId) {
        if let Some(p) = self.map_points.get_mut(&mp) {
            if let Some(kp) = p.observations.remove(&kf) {
                if let Some(k) = self.keyframes.get_mut(&kf) {
                    k.map_point_links.remove(&kp);
                }
            }
        }
    }

    fn remove_point(&mut self, mp: MapPointId) {
        if let Some(p) = self.map_points.remove(&mp) {
            for (kf, kp) in p.observations {
                if let Some(k) = self.keyframes.get_mut(&kf) {
                    k.map_point_links.remove(&kp);
                }
            }
        }
    }

    fn prune_points(&mut self) {
        let weak: Vec<MapPointId> = self
            .map_points
            .values()
            .filter(|p| p.observations.len() < 2)
            .map(|p| p.id)
            .collect();
        for id in weak {
            self.remove_point(id);
        }
    }

    /// Checks referential integrity between keyframes and map points.
    pub fn is_consistent(&self) -> bool {
        let forward = self.keyframes.values().all(|kf| {
            kf.map_point_links.iter().all(|(&kp, mp)| {
                self.map_points
                    .get(mp)
                    .is_some_and(|p| p.observations.get(&kf.id) == Some(&kp))
            })
        });
        let backward = self.map_points.values().all(|p| {
            p.observations.iter().all(|(kf, kp)| {
                self.keyframes
                    .get(kf)
                    .is_some_and(|k| k.map_point_links.get(kp) == Some(&p.id))
            })
        });
        forward && backward && self.graph.nodes() == self.keyframe_ids()
    }

    fn push_frame(&mut self, pose: Option<CameraPose>, anchor: Option<FrameAnchor>) {
        self.trajectory.push(pose);
        self.anchors.push(anchor);
    }

    fn anchor_for(&self, pose: &CameraPose) -> FrameAnchor {
        let r = &self.keyframes[&self.reference_keyframe];
        FrameAnchor {
            reference: r.id,
            relative: pose.compose(&r.pose.inverse()),
        }
    }

    /// Local map: reference keyframe plus its strongest covisible neighbours.
    fn local_keyframes(&self, center: KeyframeId, count: usize) -> Vec<KeyframeId> {
        let mut out = vec![center];
        out.extend(self.graph.neighbors(center).into_iter().take(count.saturating_sub(1)).map(|(k, _)| k));
        out
    }

    fn local_points(&self, kfs: &[KeyframeId]) -> Vec<MapPointId> {
        let mut set = BTreeSet::new();
        for k in kfs {
            set.extend(self.keyframes[k].map_point_links.values().copied());
        }
        set.into_iter().collect()
    }

    /// Writes `frame_id tx ty tz qw qx qy qz` per tracked frame.
    pub fn write_trajectory(&self, path: &Path) -> Result<(), SlamError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_trajectory_to(&mut w, None)?;
        Ok(())
    }

    /// `frame_ids` maps processed-frame positions to external frame ids
    /// (e.g. when some input frames were rejected before tracking).
    pub fn write_trajectory_to<W: Write>(&self, w: &mut W, frame_ids: Option<&[usize]>) -> std::io::Result<()> {
        for (i, p) in self.trajectory.iter().enumerate() {
            if let Some(p) = p {
                write_pose_line(w, frame_ids.map_or(i, |ids| ids[i]), p)?;
            }
        }
        Ok(())
    }

    /// Keyframe poses and their frame indices, in id order.
    pub fn keyframe_poses(&self) -> Vec<(usize, CameraPose)> {
        self.keyframes.values().map(|k| (k.frame_index, k.pose)).collect()
    }

    pub fn sparse_points(&self) -> Vec<Vector3<f64>> {
        self.map_points.values().map(|p| p.position).collect()
    }
}

fn match_pairs(a: &FrameFeatures, b: &FrameFeatures, cfg: &SlamConfig) -> Vec<(usize, usize)> {
    match_descriptors(&a.descriptors, &b.descriptors, cfg.match_ratio)
        .into_iter()
        .filter(|m| m.hamming <= cfg.max_hamming)
        .map(|m| (m.index_a, m.index_b))
        .collect()
}

fn two_view_problem(k: &CameraIntrinsics, pose2: &CameraPose, points: &[(Vector3<f64>, Vector2<f64>, Vector2<f64>)]) -> BaProblem {
    let mut obs = Vec::with_capacity(2 * points.len());
    for (i, (_, a, b)) in points.iter().enumerate() {
        obs.push(Observation {
            pose: 0,
            point: i,
            pixel: *a,
        });
        obs.push(Observation {
            pose: 1,
            point: i,
            pixel: *b,
        });
    }
    BaProblem::new(
        vec![CameraPose::identity(), *pose2],
        points.iter().map(|p| p.0).collect(),
        obs,
        *k,
    )
}

/// Tries one initialisation pair; `None` if degenerate or too weak.
fn try_initialize(
    first: &FrameFeatures,
    second: &FrameFeatures,
    k: &CameraIntrinsics,
    cfg: &SlamConfig,
) -> Option<(CameraPose, Vec<(usize, usize, Vector3<f64>)>)> {
    let pairs = match_pairs(first, second, cfg);
    if pairs.len() < cfg.min_init_inliers {
        return None;
    }
    let corrs: Vec<Correspondence> = pairs
        .iter()
        .map(|&(a, b)| Correspondence::new(first.keypoints[a].position, second.keypoints[b].position))
        .collect();
    if is_degenerate(&corrs, k).degenerate {
        return None;
    }
    let geo = match ransac_two_view(&corrs, k, &cfg.ransac) {
        Ok(g) => g,
        Err(EpipolarError::Degenerate(_)) | Err(_) => return None,
    };
    if geo.inliers.len() < cfg.min_init_inliers {
        return None;
    }
    let p1 = ProjectionMatrix::compose(k, &CameraPose::identity()).ok()?;
    let p2 = ProjectionMatrix::compose(k, &geo.pose2).ok()?;
    let c2 = geo.pose2.center();
    let min_par = cfg.min_parallax_deg.to_radians();
    let mut tri = Vec::new();
    for &i in &geo.inliers {
        let (a, b) = pairs[i];
        let c = &corrs[i];
        let Ok(h) = triangulate(&c.x1, &c.x2, &p1, &p2) else {
            continue;
        };
        let Ok(x) = h.dehomogenize() else {
            continue;
        };
        let th1 = level_threshold(cfg, first.level_scale(first.keypoints[a].level));
        let th2 = level_threshold(cfg, second.level_scale(second.keypoints[b].level));
        let ok1 = reprojection(k, &CameraPose::identity(), &x, &c.x1).is_some_and(|e| e <= th1);
        let ok2 = reprojection(k, &geo.pose2, &x, &c.x2).is_some_and(|e| e <= th2);
        if ok1 && ok2 && ray_angle(&x, &(x - c2)) >= min_par {
            tri.push((a, b, x));
        }
    }
    if tri.len() < cfg.min_init_inliers {
        return None;
    }
    Some((geo.pose2, tri))
}

/// Forced fundamental-matrix initialisation. The first frame is the
/// reference; later frames are tried in order until a non-degenerate pair
/// with enough inliers is found. If the reference loses overlap it moves
/// forward. Intermediate frames get no pose.
pub fn initialize_map(frames: &[FrameFeatures], k: &CameraIntrinsics, cfg: &SlamConfig) -> Result<SlamMap, SlamError> {
    if frames.len() < 2 {
        return Err(SlamError::TooFewFrames(frames.len()));
    }
    let mut reference = 0;
    let mut tried = 0;
    for j in 1..frames.len() {
        tried += 1;
        let overlap = match_pairs(&frames[reference], &frames[j], cfg).len();
        if overlap < cfg.min_init_inliers {
            reference = j;
            continue;
        }
        let Some((pose2, tri)) = try_initialize(&frames[reference], &frames[j], k, cfg) else {
            continue;
        };
        return Ok(build_initial_map(frames, reference, j, pose2, &tri, k, cfg));
    }
    Err(SlamError::InitializationFailed { tried })
}

fn build_initial_map(
    frames: &[FrameFeatures],
    i0: usize,
    i1: usize,
    pose2: CameraPose,
    tri: &[(usize, usize, Vector3<f64>)],
    k: &CameraIntrinsics,
    cfg: &SlamConfig,
) -> SlamMap {
    let pts: Vec<_> = tri
        .iter()
        .map(|(a, b, x)| (*x, frames[i0].keypoints[*a].position, frames[i1].keypoints[*b].position))
        .collect();
    let problem = two_view_problem(k, &pose2, &pts);
    let opts = BaOptions {
        max_iters: cfg.global_ba_iterations,
        tol: 1e-10,
        huber: Some(cfg.inlier_px),
    };
    let (solved, _) = ba_optimize_with(problem, BaMode::Full, &opts);
    let mut map = SlamMap::empty(*k, cfg.clone());
    let kf0 = map.insert_keyframe(i0, CameraPose::identity(), frames[i0].clone(), BTreeMap::new());
    let kf1 = map.insert_keyframe(i1, solved.poses[1], frames[i1].clone(), BTreeMap::new());
    for (n, (a, b, _)) in tri.iter().enumerate() {
        let x = solved.points[n];
        let e1 = reprojection(k, &solved.poses[0], &x, &pts[n].1);
        let e2 = reprojection(k, &solved.poses[1], &x, &pts[n].2);
        let th = cfg.inlier_px * 2.0;
        if e1.is_some_and(|e| e <= th) && e2.is_some_and(|e| e <= th) {
            map.add_point(x, &[(kf0, *a), (kf1, *b)]);
        }
    }
    map.graph = CovisibilityGraph::rebuild(&map.keyframes, &map.map_points);
    for f in 0..=i1 {
        let pose = if f == i0 {
            Some(CameraPose::identity())
        } else if f == i1 {
            Some(solved.poses[1])
        } else {
            None
        };
        map.push_frame(pose, None);
    }
    map.anchors[i0] = Some(FrameAnchor {
        reference: kf0,
        relative: CameraPose::identity(),
    });
    map.anchors[i1] = Some(FrameAnchor {
        reference: kf1,
        relative: CameraPose::identity(),
    });
    map.reference_keyframe = kf1;
    map.state = TrackingState::Tracking;
    map
}

/// Projection-guided association of local map points with frame keypoints.
fn search_by_projection(
    map: &SlamMap,
    frame: &FrameFeatures,
    grid: &KeypointGrid,
    pose: &CameraPose,
    points: &[MapPointId],
    radius: f64,
) -> BTreeMap<usize, (MapPointId, u32)> {
    let mut best: BTreeMap<usize, (MapPointId, u32)> = BTreeMap::new();
    for &id in points {
        let mp = &map.map_points[&id];
        let Some(px) = map.intrinsics.project_camera(&pose.transform(&mp.position)) else {
            continue;
        };
        if !in_image(frame, &px) {
            continue;
        }
        let mut b1 = (usize::MAX, u32::MAX);
        let mut b2 = u32::MAX;
        for kp in grid.within(frame, &px, radius) {
            let d = mp.descriptor.hamming(&frame.descriptors[kp]);
            if d < b1.1 || (d == b1.1 && kp < b1.0) {
                b2 = b1.1;
                b1 = (kp, d);
            } else if d < b2 {
                b2 = d;
            }
        }
        if b1.0 == usize::MAX || b1.1 > map.config.max_hamming {
            continue;
        }
        if b2 != u32::MAX && (b1.1 as f64) >= 0.9 * b2 as f64 {
            continue;
        }
        let replace = best.get(&b1.0).is_none_or(|&(_, d)| b1.1 < d);
        if replace {
            best.insert(b1.0, (id, b1.1));
        }
    }
    best
}

/// Pose-only refinement with Huber loss and two rounds of outlier
/// rejection. Returns the pose and the inlier associations.
fn optimize_pose(
    map: &SlamMap,
    frame: &FrameFeatures,
    initial: &CameraPose,
    matches: &BTreeMap<usize, MapPointId>,
) -> (CameraPose, BTreeMap<usize, MapPointId>) {
    let cfg = &map.config;
    let mut current: BTreeMap<usize, MapPointId> = matches.clone();
    let mut pose = *initial;
    for round in 0..3 {
        if current.len() < 4 {
            break;
        }
        let entries: Vec<(usize, MapPointId)> = current.iter().map(|(&a, &b)| (a, b)).collect();
        let problem = BaProblem {
            poses: vec![pose],
            points: entries.iter().map(|(_, mp)| map.map_points[mp].position).collect(),
            observations: entries
                .iter()
                .enumerate()
                .map(|(i, (kp, _))| Observation {
                    pose: 0,
                    point: i,
                    pixel: frame.keypoints[*kp].position,
                })
                .collect(),
            intrinsics: map.intrinsics,
            fixed: vec![false],
        };
        let opts = BaOptions {
            max_iters: 10,
            tol: 1e-10,
            huber: Some(cfg.inlier_px),
        };
        let (solved, _) = ba_optimize_with(problem, BaMode::PosesOnly, &opts);
        pose = solved.poses[0];
        let scale = if round == 0 { 2.0 } else { 1.0 };
        current = entries
            .into_iter()
            .filter(|(kp, mp)| {
                let th = scale * level_threshold(cfg, frame.level_scale(frame.keypoints[*kp].level));
                reprojection(&map.intrinsics, &pose, &map.map_points[mp].position, &frame.keypoints[*kp].position)
                    .is_some_and(|e| e <= th)
            })
            .collect();
    }
    (pose, current)
}

/// Localises one frame against the local map, appends its pose, and
/// inserts a keyframe when the view has changed enough.
pub fn track_frame(map: &mut SlamMap, frame: &FrameFeatures) -> Result<TrackOutcome, SlamError> {
    if map.state != TrackingState::Tracking {
        return Err(SlamError::NotTracking);
    }
    let frame_index = map.trajectory.len();
    let last = map
        .trajectory
        .iter()
        .rev()
        .flatten()
        .next()
        .copied()
        .unwrap_or_else(CameraPose::identity);
    let predicted = match map.velocity {
        Some(v) => v.compose(&last),
        None => last,
    };
    let cfg = map.config.clone();
    let grid = KeypointGrid::new(frame, 16.0);
    let local_kfs = map.local_keyframes(map.reference_keyframe, 2 * cfg.local_window);
    let local_pts = map.local_points(&local_kfs);

    // Projection search from the motion prediction, then from the last
    // pose with a wider window, then appearance matching against the
    // reference keyframe. The first attempt where most associations survive
    // pose refinement wins; otherwise the one with most inliers.
    let mut best: Option<(CameraPose, BTreeMap<usize, MapPointId>)> = None;
    let attempts = [
        (predicted, cfg.search_radius_px),
        (predicted, 3.0 * cfg.search_radius_px),
        (last, 3.0 * cfg.search_radius_px),
    ];
    let mut accepted = false;
    for (start, radius) in attempts {
        let found = search_by_projection(map, frame, &grid, &start, &local_pts, radius);
        let cand: BTreeMap<usize, MapPointId> = found.into_iter().map(|(kp, (mp, _))| (kp, mp)).collect();
        if cand.len() < cfg.min_tracked {
            continue;
        }
        let (p, inl) = optimize_pose(map, frame, &start, &cand);
        let good = inl.len() >= cfg.min_tracked && 2 * inl.len() >= cand.len();
        if best.as_ref().is_none_or(|b| inl.len() > b.1.len()) {
            best = Some((p, inl));
        }
        if good {
            accepted = true;
            break;
        }
    }
    if !accepted {
        let r = &map.keyframes[&map.reference_keyframe];
        let cand: BTreeMap<usize, MapPointId> = match_pairs(&r.features, frame, &cfg)
            .into_iter()
            .filter_map(|(a, b)| r.map_point_links.get(&a).map(|&mp| (b, mp)))
            .collect();
        let (p, inl) = optimize_pose(map, frame, &last, &cand);
        if best.as_ref().is_none_or(|b| inl.len() > b.1.len()) {
            best = Some((p, inl));
        }
    }
    let (mut pose_opt, mut inliers) = best.unwrap_or((last, BTreeMap::new()));
    // Second pass: widen the association set around the refined pose.
    if inliers.len() >= cfg.min_tracked {
        let found = search_by_projection(map, frame, &grid, &pose_opt, &local_pts, 0.5 * cfg.search_radius_px);
        let mut merged: BTreeMap<usize, MapPointId> = found.into_iter().map(|(kp, (mp, _))| (kp, mp)).collect();
        let used: BTreeSet<MapPointId> = merged.values().copied().collect();
        for (kp, mp) in &inliers {
            if !merged.contains_key(kp) && !used.contains(mp) {
                merged.insert(*kp, *mp);
            }
        }
        let (p2, i2) = optimize_pose(map, frame, &pose_opt, &merged);
        if i2.len() >= inliers.len() {
            pose_opt = p2;
            inliers = i2;
        }
    }
    if inliers.len() < cfg.min_tracked {
        map.state = TrackingState::Lost { frame: frame_index };
        map.push_frame(None, None);
        return Ok(TrackOutcome {
            pose: None,
            inliers: inliers.len(),
            new_keyframe: None,
        });
    }
    map.velocity = Some(pose_opt.compose(&last.inverse()));
    let anchor = map.anchor_for(&pose_opt);
    map.push_frame(Some(pose_opt), Some(anchor));

    let reference = &map.keyframes[&map.reference_keyframe];
    let ref_count = reference.map_point_links.len().max(1);
    let ratio = inliers.len() as f64 / ref_count as f64;
    let c_ref = reference.pose.center();
    let c_cur = pose_opt.center();
    let mut angles: Vec<f64> = inliers
        .values()
        .map(|mp| {
            let x = map.map_points[mp].position;
            ray_angle(&(x - c_ref), &(x - c_cur))
        })
        .collect();
    angles.sort_by(f64::total_cmp);
    let median = angles.get(angles.len() / 2).copied().unwrap_or(0.0);
    let insert = ratio < cfg.keyframe_track_ratio || median > cfg.keyframe_parallax_deg.to_radians();
    let new_keyframe = if insert {
        let id = map.insert_keyframe(frame_index, pose_opt, frame.clone(), inliers.clone());
        map.anchors[frame_index] = Some(FrameAnchor {
            reference: id,
            relative: CameraPose::identity(),
        });
        map.reference_keyframe = id;
        Some(id)
    } else {
        None
    };
    Ok(TrackOutcome {
        pose: Some(pose_opt),
        inliers: inliers.len(),
        new_keyframe,
    })
}

/// Triangulates new points against covisible keyframes, refreshes the
/// graph, runs local BA over the window, and culls the keyframe if
/// redundant. Returns `true` when the keyframe was culled.
pub fn process_keyframe(map: &mut SlamMap, kf: KeyframeId) -> Result<bool, SlamError> {
    if !map.keyframes.contains_key(&kf) {
        return Err(SlamError::UnknownKeyframe(kf));
    }
    let cfg = map.config.clone();
    triangulate_new_points(map, kf, &cfg);
    map.graph = CovisibilityGraph::rebuild(&map.keyframes, &map.map_points);
    local_bundle_adjust(map, kf, &cfg);
    let (fi, pose) = (map.keyframes[&kf].frame_index, map.keyframes[&kf].pose);
    if let Some(slot) = map.trajectory.get_mut(fi) {
        *slot = Some(pose);
    }
    map.prune_points();
    map.graph = CovisibilityGraph::rebuild(&map.keyframes, &map.map_points);
    let culled = cull_if_redundant(map, kf, &cfg);
    Ok(culled)
}

fn triangulate_new_points(map: &mut SlamMap, kf: KeyframeId, cfg: &SlamConfig) {
    let k = map.intrinsics;
    let mut neighbors: Vec<KeyframeId> = map
        .graph
        .neighbors(kf)
        .into_iter()
        .take(cfg.local_window)
        .map(|(id, _)| id)
        .collect();
    if neighbors.is_empty() {
        neighbors = map.keyframes.keys().rev().filter(|&&id| id != kf).take(2).copied().collect();
    }
    let min_par = cfg.min_parallax_deg.to_radians();
    for nb in neighbors {
        let (new_kf, old_kf) = (&map.keyframes[&kf], &map.keyframes[&nb]);
        let free_new: Vec<usize> = (0..new_kf.features.len())
            .filter(|i| !new_kf.map_point_links.contains_key(i))
            .collect();
        let free_old: Vec<usize> = (0..old_kf.features.len())
            .filter(|i| !old_kf.map_point_links.contains_key(i))
            .collect();
        if free_new.is_empty() || free_old.is_empty() {
            continue;
        }
        let baseline = (new_kf.pose.center() - old_kf.pose.center()).norm();
        if baseline == 0.0 {
            continue;
        }
        let da: Vec<BinaryDescriptor> = free_old.iter().map(|&i| old_kf.features.descriptors[i]).collect();
        let db: Vec<BinaryDescriptor> = free_new.iter().map(|&i| new_kf.features.descriptors[i]).collect();
        let f = fundamental_from_poses(&k, &old_kf.pose, &new_kf.pose);
        let (Ok(p_old), Ok(p_new)) = (
            ProjectionMatrix::compose(&k, &old_kf.pose),
            ProjectionMatrix::compose(&k, &new_kf.pose),
        ) else {
            continue;
        };
        let (c_old, c_new) = (old_kf.pose.center(), new_kf.pose.center());
        let mut created: Vec<(Vector3<f64>, usize, usize)> = Vec::new();
        for m in match_descriptors(&da, &db, cfg.match_ratio) {
            if m.hamming > cfg.max_hamming {
                continue;
            }
            let (io, inew) = (free_old[m.index_a], free_new[m.index_b]);
            let (xo, xn) = (old_kf.pixel(io), new_kf.pixel(inew));
            let (so, sn) = (old_kf.level_scale(io), new_kf.level_scale(inew));
            if sampson_distance(&f, &Correspondence::new(xo, xn)) > level_threshold(cfg, so.max(sn)) {
                continue;
            }
            let Ok(x) = triangulate(&xo, &xn, &p_old, &p_new).and_then(|h| h.dehomogenize().map_err(|_| EpipolarError::ParallelRays))
            else {
                continue;
            };
            if ray_angle(&(x - c_old), &(x - c_new)) < min_par {
                continue;
            }
            let ok_o = reprojection(&k, &old_kf.pose, &x, &xo).is_some_and(|e| e <= level_threshold(cfg, so));
            let ok_n = reprojection(&k, &new_kf.pose, &x, &xn).is_some_and(|e| e <= level_threshold(cfg, sn));
            if ok_o && ok_n {
                created.push((x, io, inew));
            }
        }
        for (x, io, inew) in created {
            map.add_point(x, &[(nb, io), (kf, inew)]);
        }
    }
}

fn local_bundle_adjust(map: &mut SlamMap, kf: KeyframeId, cfg: &SlamConfig) {
    let local: Vec<KeyframeId> = map.local_keyframes(kf, cfg.local_window);
    let local_set: BTreeSet<KeyframeId> = local.iter().copied().collect();
    let point_ids = map.local_points(&local);
    if point_ids.is_empty() {
        return;
    }
    let mut pose_ids: BTreeSet<KeyframeId> = local_set.clone();
    for id in &point_ids {
        pose_ids.extend(map.map_points[id].observations.keys().copied());
    }
    let pose_ids: Vec<KeyframeId> = pose_ids.into_iter().collect();
    let pose_index: BTreeMap<KeyframeId, usize> = pose_ids.iter().enumerate().map(|(i, &k)| (k, i)).collect();
    let first = map.first_keyframe().expect("keyframes exist");
    let fixed: Vec<bool> = pose_ids.iter().map(|k| !local_set.contains(k) || *k == first).collect();
    if fixed.iter().all(|&f| f) {
        return;
    }
    let mut observations = Vec::new();
    for (pi, id) in point_ids.iter().enumerate() {
        for (kfid, &kp) in &map.map_points[id].observations {
            observations.push(Observation {
                pose: pose_index[kfid],
                point: pi,
                pixel: map.keyframes[kfid].pixel(kp),
            });
        }
    }
    let problem = BaProblem {
        poses: pose_ids.iter().map(|k| map.keyframes[k].pose).collect(),
        points: point_ids.iter().map(|id| map.map_points[id].position).collect(),
        observations,
        intrinsics: map.intrinsics,
        fixed,
    };
    let opts = BaOptions {
        max_iters: cfg.local_ba_iterations,
        tol: 1e-10,
        huber: Some(cfg.inlier_px),
    };
    let (solved, report) = ba_optimize_with(problem, BaMode::Full, &opts);
    if !(report.final_cost <= report.initial_cost) {
        return;
    }
    for (i, k) in pose_ids.iter().enumerate() {
        if local_set.contains(k) {
            map.keyframes.get_mut(k).expect("exists").pose = solved.poses[i];
        }
    }
    for (i, id) in point_ids.iter().enumerate() {
        map.map_points.get_mut(id).expect("exists").position = solved.points[i];
    }
    // Drop observations that remain outliers after optimisation.
    let mut bad = Vec::new();
    for id in &point_ids {
        let mp = &map.map_points[id];
        for (kfid, &kp) in &mp.observations {
            if !local_set.contains(kfid) {
                continue;
            }
            let k = &map.keyframes[kfid];
            let th = level_threshold(cfg, k.level_scale(kp));
            if !reprojection(&map.intrinsics, &k.pose, &mp.position, &k.pixel(kp)).is_some_and(|e| e <= th) {
                bad.push((*kfid, *id));
            }
        }
    }
    for (kfid, id) in bad {
        map.unlink(kfid, id);
    }
}

/// Redundancy test: at least `cull_ratio` of the keyframe's points are
/// observed by `cull_min_observers` other keyframes.
pub fn is_redundant(map: &SlamMap, kf: KeyframeId) -> bool {
    let cfg = &map.config;
    let Some(k) = map.keyframes.get(&kf) else {
        return false;
    };
    let total = k.map_point_links.len();
    if total == 0 {
        return false;
    }
    let covered = k
        .map_point_links
        .values()
        .filter(|mp| map.map_points[mp].observations.keys().filter(|&&o| o != kf).count() >= cfg.cull_min_observers)
        .count();
    covered as f64 >= cfg.cull_ratio * total as f64
}

fn cull_if_redundant(map: &mut SlamMap, kf: KeyframeId, _cfg: &SlamConfig) -> bool {
    if Some(kf) == map.first_keyframe() || map.keyframes.len() <= 2 || !is_redundant(map, kf) {
        return false;
    }
    remove_keyframe(map, kf);
    true
}

fn remove_keyframe(map: &mut SlamMap, kf: KeyframeId) {
    let links: Vec<MapPointId> = map.keyframes[&kf].map_point_links.values().copied().collect();
    for mp in links {
        map.unlink(kf, mp);
    }
    map.keyframes.remove(&kf);
    map.prune_points();
    map.graph = CovisibilityGraph::rebuild(&map.keyframes, &map.map_points);
    map.culled_keyframes += 1;
    if map.reference_keyframe == kf {
        map.reference_keyframe = *map.keyframes.keys().next_back().expect("keyframes remain");
    }
    // Frames anchored to the culled keyframe keep their absolute pose.
    for a in map.anchors.iter_mut().flatten() {
        if a.reference == kf {
            a.reference = u64::MAX;
        }
    }
}

/// Poses-only BA over every keyframe (first one fixed), after which
/// non-keyframe poses follow their reference keyframes.
pub fn optimize_trajectory(map: &mut SlamMap) {
    let ids = map.keyframe_ids();
    if ids.len() < 2 {
        return;
    }
    let index: BTreeMap<KeyframeId, usize> = ids.iter().enumerate().map(|(i, &k)| (k, i)).collect();
    let point_ids: Vec<MapPointId> = map.map_points.keys().copied().collect();
    let mut observations = Vec::new();
    for (pi, id) in point_ids.iter().enumerate() {
        for (kfid, &kp) in &map.map_points[id].observations {
            observations.push(Observation {
                pose: index[kfid],
                point: pi,
                pixel: map.keyframes[kfid].pixel(kp),
            });
        }
    }
    let mut fixed = vec![false; ids.len()];
    fixed[0] = true;
    let problem = BaProblem {
        poses: ids.iter().map(|k| map.keyframes[k].pose).collect(),
        points: point_ids.iter().map(|id| map.map_points[id].position).collect(),
        observations,
        intrinsics: map.intrinsics,
        fixed,
    };
    let opts = BaOptions {
        max_iters: map.config.global_ba_iterations,
        tol: 1e-10,
        huber: Some(map.config.inlier_px),
    };
    let (solved, report) = ba_optimize_with(problem, BaMode::PosesOnly, &opts);
    if !(report.final_cost <= report.initial_cost) {
        return;
    }
    for (i, k) in ids.iter().enumerate() {
        map.keyframes.get_mut(k).expect("exists").pose = solved.poses[i];
    }
    for (f, a) in map.anchors.iter().enumerate() {
        if let Some(a) = a {
            if let Some(kf) = map.keyframes.get(&a.reference) {
                map.trajectory[f] = Some(a.relative.compose(&kf.pose));
            }
        }
    }
}

/// Outcome of a full SLAM pass over a frame sequence.
#[derive(Debug, Clone)]
pub struct SlamRun {
    pub map: SlamMap,
    /// Frame at which tracking was lost, if any.
    pub lost_at: Option<usize>,
}

/// Initialise, track every remaining frame, map each new keyframe, then
/// refine all keyframe poses. Tracking loss halts the run.
pub fn run_slam(frames: &[FrameFeatures], k: &CameraIntrinsics, cfg: &SlamConfig) -> Result<SlamRun, SlamError> {
    let mut map = initialize_map(frames, k, cfg)?;
    let mut lost_at = None;
    for frame in &frames[map.frames_processed()..] {
        let out = track_frame(&mut map, frame)?;
        if let TrackingState::Lost { frame } = map.state {
            lost_at = Some(frame);
            break;
        }
        if let Some(id) = out.new_keyframe {
            process_keyframe(&mut map, id)?;
        }
    }
    optimize_trajectory(&mut map);
    Ok(SlamRun { map, lost_at })
}

/// Parameters of the multi-view densification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    /// Maximum views per sub-reconstruction (must exceed 2).
    pub max_views: usize,
    pub outlier_fraction: f64,
    pub outlier_distance_mult: f64,
    pub denoise_k: usize,
    pub denoise_stddev: f64,
    pub max_hamming: u32,
    pub ratio: f64,
    /// Reprojection inlier bound for dense points at level 0.
    pub inlier_px: f64,
    pub min_parallax_deg: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            max_views: 4,
            outlier_fraction: 0.3,
            outlier_distance_mult: 5.0,
            denoise_k: 16,
            denoise_stddev: 2.0,
            max_hamming: 60,
            ratio: 0.85,
            inlier_px: 2.0,
            min_parallax_deg: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SlotOutcome {
    /// Fewer than two usable views (`n_cv` covisible later keyframes).
    Skipped { n_cv: usize },
    /// Too many far-away points; sub-cloud discarded.
    Dropped { outlier_fraction: f64 },
    Kept { views: usize, raw: usize, kept: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseSlot {
    pub keyframe: KeyframeId,
    pub outcome: SlotOutcome,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DenseCloud {
    pub points: Vec<Vector3<f64>>,
    pub source_keyframe: Vec<KeyframeId>,
    /// Centre of the source keyframe per point.
    pub cameras: Vec<Vector3<f64>>,
    /// Keypoint position in the source keyframe per point.
    pub reference_pixels: Vec<Vector2<f64>>,
    pub slots: Vec<DenseSlot>,
}

impl DenseCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_point_cloud(&self) -> PointCloud {
        PointCloud::with_cameras(self.points.clone(), self.cameras.clone())
    }
}

/// Number of views for a slot: `min(M_V, N_CV)`, or `None` below two.
pub fn slot_views(max_views: usize, n_cv: usize) -> Option<usize> {
    let m = max_views.min(n_cv);
    (m >= 2).then_some(m)
}

/// Fraction of `points` farther from the centroid of `reference` than
/// `mult` times the median distance of `reference` to that centroid.
/// An empty reference falls back to `points` itself.
pub fn far_fraction(points: &[Vector3<f64>], reference: &[Vector3<f64>], mult: f64) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let reference = if reference.is_empty() { points } else { reference };
    let c = reference.iter().sum::<Vector3<f64>>() / reference.len() as f64;
    let mut rd: Vec<f64> = reference.iter().map(|p| (p - c).norm()).collect();
    rd.sort_by(f64::total_cmp);
    let limit = mult * rd[rd.len() / 2];
    points.iter().filter(|p| (*p - c).norm() > limit).count() as f64 / points.len() as f64
}

/// Degeneracy guard and denoising of one sub-cloud: `Err(fraction)` when
/// too many points are far away, else the indices that survive denoising.
pub fn filter_sub_cloud(raw: &[Vector3<f64>], reference: &[Vector3<f64>], cfg: &DensifyConfig) -> Result<Vec<usize>, f64> {
    let frac = far_fraction(raw, reference, cfg.outlier_distance_mult);
    if frac > cfg.outlier_fraction {
        return Err(frac);
    }
    Ok(statistical_inliers(raw, cfg.denoise_k, cfg.denoise_stddev))
}

/// Multi-view DLT followed by Gauss-Newton on the reprojection error.
pub fn triangulate_views(obs: &[(Vector2<f64>, ProjectionMatrix)]) -> Option<Vector3<f64>> {
    if obs.len() < 2 {
        return None;
    }
    let mut ata = Matrix4::<f64>::zeros();
    for (x, p) in obs {
        let m = p.matrix();
        for row in [m.row(2) * x.x - m.row(0), m.row(2) * x.y - m.row(1)] {
            let r = row / row.norm().max(f64::MIN_POSITIVE);
            ata += r.transpose() * r;
        }
    }
    let eig = ata.symmetric_eigen();
    let imin = eig.eigenvalues.imin();
    let h: Vector4<f64> = eig.eigenvectors.column(imin).into_owned();
    let mut x = HomPoint3(h).dehomogenize().ok()?;
    for _ in 0..5 {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for (o, p) in obs {
            let m = p.matrix();
            let hh = m * Vector4::new(x.x, x.y, x.z, 1.0);
            if hh.z <= 0.0 {
                return None;
            }
            let r = Vector2::new(hh.x / hh.z, hh.y / hh.z) - o;
            let mut j = nalgebra::Matrix2x3::zeros();
            for c in 0..3 {
                j[(0, c)] = (m[(0, c)] * hh.z - hh.x * m[(2, c)]) / (hh.z * hh.z);
                j[(1, c)] = (m[(1, c)] * hh.z - hh.y * m[(2, c)]) / (hh.z * hh.z);
            }
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        let step = jtj.try_inverse()? * jtr;
        x -= step;
        if step.norm() <= 1e-12 * x.norm().max(1.0) {
            break;
        }
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Clips segment `a`-`b` to the rectangle `[0, w] × [0, h]`.
fn clip_to_image(a: Vector2<f64>, b: Vector2<f64>, w: f64, h: f64) -> Option<(Vector2<f64>, Vector2<f64>)> {
    let d = b - a;
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (p, q) in [(-d.x, a.x), (d.x, w - a.x), (-d.y, a.y), (d.y, h - a.y)] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    (t0 <= t1).then(|| (a + d * t0, a + d * t1))
}

/// Candidate keypoints in `f` within `tol` pixels of segment `a`-`b`.
fn near_segment(f: &FrameFeatures, grid: &KeypointGrid, a: &Vector2<f64>, b: &Vector2<f64>, tol: f64) -> Vec<usize> {
    let Some((a, b)) = clip_to_image(*a, *b, f.width as f64, f.height as f64) else {
        return Vec::new();
    };
    let d = b - a;
    let len = d.norm();
    let steps = (len / grid.cell).ceil() as usize;
    let reach = 0.5 * grid.cell + tol;
    let mut out: Vec<usize> = Vec::new();
    for s in 0..=steps {
        let t = if steps == 0 { 0.0 } else { s as f64 / steps as f64 };
        out.extend(grid.cells_around(&(a + d * t), reach).map(|&i| i as usize));
    }
    out.sort_unstable();
    out.dedup();
    out.retain(|&i| {
        let q = f.keypoints[i].position;
        let t = if len > 0.0 { ((q - a).dot(&d) / (len * len)).clamp(0.0, 1.0) } else { 0.0 };
        (a + d * t - q).norm() <= tol
    });
    out
}

/// Sub-range of depths `[z0, z1]` along `ray` (reference camera frame)
/// that lies in front of the camera `pose`.
fn clip_in_front(pose: &CameraPose, ray: &Vector3<f64>, z0: f64, z1: f64) -> Option<(f64, f64)> {
    const MIN_DEPTH: f64 = 1e-3;
    let a = (pose.rotation * ray).z;
    let b = pose.translation.z;
    let (mut lo, mut hi) = (z0, z1);
    if a.abs() < 1e-15 {
        return (b > MIN_DEPTH).then_some((lo, hi));
    }
    let d = (MIN_DEPTH - b) / a;
    if a > 0.0 {
        lo = lo.max(d);
    } else {
        hi = hi.min(d);
    }
    (lo < hi).then_some((lo, hi))
}

/// Dense sub-reconstruction of one slot with fixed poses; points are
/// returned in the reference keyframe's camera frame.
fn dense_slot(
    k: &CameraIntrinsics,
    views: &[(CameraPose, &FrameFeatures)],
    depth_range: (f64, f64),
    cfg: &DensifyConfig,
) -> Vec<(Vector3<f64>, Vector2<f64>)> {
    let (ref_pose, ref_f) = views[0];
    let inv_ref = ref_pose.inverse();
    // Poses relative to the reference keyframe.
    let rel: Vec<CameraPose> = views.iter().map(|(p, _)| p.compose(&inv_ref)).collect();
    let projections: Vec<ProjectionMatrix> = rel
        .iter()
        .map(|p| ProjectionMatrix::compose(k, p).expect("valid rotation"))
        .collect();
    let grids: Vec<KeypointGrid> = views.iter().map(|(_, f)| KeypointGrid::new(f, 8.0)).collect();
    let centers: Vec<Vector3<f64>> = rel.iter().map(|p| p.center()).collect();
    let min_par = cfg.min_parallax_deg.to_radians();
    let (z0, z1) = depth_range;
    (0..ref_f.len())
        .into_par_iter()
        .filter_map(|i| {
            let x0 = ref_f.keypoints[i].position;
            let ray = k.unproject(&x0);
            let mut obs = vec![(x0, projections[0])];
            let mut scales = vec![ref_f.level_scale(ref_f.keypoints[i].level)];
            let mut vid = vec![0];
            for v in 1..views.len() {
                let f = views[v].1;
                let Some((d0, d1)) = clip_in_front(&rel[v], &ray, z0, z1) else {
                    continue;
                };
                let pa = k.project_camera(&rel[v].transform(&(ray * d0)));
                let pb = k.project_camera(&rel[v].transform(&(ray * d1)));
                let (Some(pa), Some(pb)) = (pa, pb) else {
                    continue;
                };
                let mut best = (usize::MAX, u32::MAX);
                let mut second = u32::MAX;
                for j in near_segment(f, &grids[v], &pa, &pb, cfg.inlier_px) {
                    let d = ref_f.descriptors[i].hamming(&f.descriptors[j]);
                    if d < best.1 || (d == best.1 && j < best.0) {
                        second = best.1;
                        best = (j, d);
                    } else if d < second {
                        second = d;
                    }
                }
                if best.0 == usize::MAX || best.1 > cfg.max_hamming {
                    continue;
                }
                if second != u32::MAX && best.1 as f64 >= cfg.ratio * second as f64 {
                    continue;
                }
                obs.push((f.keypoints[best.0].position, projections[v]));
                scales.push(f.level_scale(f.keypoints[best.0].level));
                vid.push(v);
            }
            let mut members: Vec<usize> = (0..obs.len()).collect();
            loop {
                if members.len() < 2 || members[0] != 0 {
                    return None;
                }
                let sub: Vec<(Vector2<f64>, ProjectionMatrix)> = members.iter().map(|&m| obs[m]).collect();
                let x = triangulate_views(&sub)?;
                let errs: Vec<f64> = members
                    .iter()
                    .map(|&m| {
                        let h = obs[m].1 .0 * Vector4::new(x.x, x.y, x.z, 1.0);
                        if h.z <= 0.0 {
                            f64::INFINITY
                        } else {
                            (Vector2::new(h.x / h.z, h.y / h.z) - obs[m].0).norm() / scales[m]
                        }
                    })
                    .collect();
                let (worst, &we) = errs.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).expect("non-empty");
                if we <= cfg.inlier_px {
                    let parallax = members
                        .iter()
                        .skip(1)
                        .map(|&m| ray_angle(&x, &(x - centers[vid[m]])))
                        .fold(0.0, f64::max);
                    return (parallax >= min_par).then_some((x, x0));
                }
                members.remove(worst);
            }
        })
        .collect()
}

/// Search depths for a slot from the sparse depths seen by its keyframe:
/// the 2nd to 98th percentile, widened by a factor of 1.5 each way.
fn depth_range(mut depths: Vec<f64>) -> (f64, f64) {
    if depths.is_empty() {
        return (0.05, 50.0);
    }
    depths.sort_by(f64::total_cmp);
    let at = |q: f64| depths[((depths.len() - 1) as f64 * q).round() as usize];
    (at(0.02) / 1.5, at(0.98) * 1.5)
}

/// Densification over covisible keyframe subsets. For each keyframe `i`
/// (in id order), `N_CV` counts later keyframes sharing points with it; the
/// slot uses `min(M_V, N_CV)` views (skipped below 2), is dropped if too
/// many points lie far outside the keyframe's sparse structure, and is
/// otherwise denoised and moved to the world frame. `dense` maps frame index to low-threshold
/// features of that frame.
pub fn densify_map(map: &SlamMap, dense: &BTreeMap<usize, FrameFeatures>, cfg: &DensifyConfig) -> DenseCloud {
    let ids = map.keyframe_ids();
    let results: Vec<(DenseSlot, Vec<(Vector3<f64>, Vector2<f64>)>)> = ids
        .par_iter()
        .map(|&i| {
            let later: Vec<KeyframeId> = {
                let mut v: Vec<KeyframeId> = map
                    .graph
                    .neighbors(i)
                    .into_iter()
                    .filter(|&(j, w)| j > i && w > 0)
                    .map(|(j, _)| j)
                    .collect();
                v.sort_unstable();
                v
            };
            let n_cv = later.len();
            let Some(m_v) = slot_views(cfg.max_views, n_cv) else {
                return (
                    DenseSlot {
                        keyframe: i,
                        outcome: SlotOutcome::Skipped { n_cv },
                    },
                    Vec::new(),
                );
            };
            let kf = &map.keyframes[&i];
            let mut view_ids = vec![i];
            view_ids.extend(later.iter().take(m_v - 1));
            let views: Vec<(CameraPose, &FrameFeatures)> = view_ids
                .iter()
                .map(|id| {
                    let k = &map.keyframes[id];
                    (k.pose, dense.get(&k.frame_index).unwrap_or(&k.features))
                })
                .collect();
            let sparse: Vec<Vector3<f64>> = kf
                .map_point_links
                .values()
                .map(|mp| kf.pose.transform(&map.map_points[mp].position))
                .filter(|p| p.z > 0.0)
                .collect();
            let range = depth_range(sparse.iter().map(|p| p.z).collect());
            let raw = dense_slot(&map.intrinsics, &views, range, cfg);
            let raw_points: Vec<Vector3<f64>> = raw.iter().map(|r| r.0).collect();
            match filter_sub_cloud(&raw_points, &sparse, cfg) {
                Err(fraction) => (
                    DenseSlot {
                        keyframe: i,
                        outcome: SlotOutcome::Dropped {
                            outlier_fraction: fraction,
                        },
                    },
                    Vec::new(),
                ),
                Ok(keep) => {
                    let to_world = kf.pose.inverse();
                    let kept: Vec<(Vector3<f64>, Vector2<f64>)> =
                        keep.iter().map(|&j| (to_world.transform(&raw[j].0), raw[j].1)).collect();
                    (
                        DenseSlot {
                            keyframe: i,
                            outcome: SlotOutcome::Kept {
                                views: m_v,
                                raw: raw.len(),
                                kept: kept.len(),
                            },
                        },
                        kept,
                    )
                }
            }
        })
        .collect();
    let mut out = DenseCloud::default();
    for (slot, pts) in results {
        let c = map.keyframes[&slot.keyframe].pose.center();
        out.source_keyframe.extend(std::iter::repeat_n(slot.keyframe, pts.len()));
        out.cameras.extend(std::iter::repeat_n(c, pts.len()));
        out.points.extend(pts.iter().map(|p| p.0));
        out.reference_pixels.extend(pts.iter().map(|p| p.1));
        out.slots.push(slot);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::sample_surface_uniform;
    use crate::geometry::so3_exp;
    use crate::synth::{synthetic_feature_frames, Scene, SceneSpec, SyntheticFeatureConfig, SyntheticFrames};

    struct Fixture {
        scene: Scene,
        k: CameraIntrinsics,
        points: Vec<Vector3<f64>>,
    }

    fn fixture(frames: usize) -> Fixture {
        let mut spec = SceneSpec::preset("gentle-bend").unwrap();
        spec.trajectory.frame_count = frames;
        let scene = Scene::generate(&spec).unwrap();
        let k = scene.intrinsics().unwrap();
        let points = sample_surface_uniform(&scene.ground_truth.mesh, 3000, 11).unwrap();
        Fixture { scene, k, points }
    }

    fn observe(fx: &Fixture, poses: &[CameraPose], noise_px: f64) -> SyntheticFrames {
        let res = fx.scene.spec.render.resolution as usize;
        let cfg = SyntheticFeatureConfig {
            width: res,
            height: res,
            noise_px,
            bit_flips: 8,
            seed: 5,
        };
        synthetic_feature_frames(&fx.points, poses, &fx.k, &cfg)
    }

    fn empty_features(w: usize) -> FrameFeatures {
        FrameFeatures {
            width: w,
            height: w,
            keypoints: Vec::new(),
            descriptors: Vec::new(),
            level_scales: vec![1.0],
        }
    }

    #[test]
    fn initializes_on_short_traversal() {
        let fx = fixture(20);
        let frames = observe(&fx, &fx.scene.trajectory.poses, 0.5).frames;
        let map = initialize_map(&frames, &fx.k, &SlamConfig::default()).unwrap();
        assert_eq!(map.keyframes.len(), 2);
        assert!(map.map_points.len() >= 50, "{} points", map.map_points.len());
        let first = &map.keyframes[&map.first_keyframe().unwrap()];
        assert_eq!(first.pose, CameraPose::identity());
        assert_eq!(map.state, TrackingState::Tracking);
        assert_eq!(map.trajectory.len(), map.frames_processed());
        assert!(map.is_consistent());
    }

    #[test]
    fn skips_ahead_past_identical_frames() {
        let fx = fixture(20);
        let mut poses = vec![fx.scene.trajectory.poses[0]; 5];
        poses.push(fx.scene.trajectory.poses[10]);
        let frames = observe(&fx, &poses, 0.0).frames;
        let map = initialize_map(&frames, &fx.k, &SlamConfig::default()).unwrap();
        let used: Vec<usize> = map.keyframes.values().map(|k| k.frame_index).collect();
        assert_eq!(used, vec![0, 5]);
        assert_eq!(map.trajectory.len(), 6);
        assert!(map.trajectory[1..5].iter().all(Option::is_none));
    }

    #[test]
    fn pure_rotation_fails_to_initialize() {
        let fx = fixture(20);
        let poses: Vec<CameraPose> = (0..12)
            .map(|i| {
                let r = so3_exp(&Vector3::new(0.3, 1.0, 0.2).normalize().scale(0.02 * i as f64));
                CameraPose::new(r, Vector3::zeros()).unwrap()
            })
            .collect();
        let frames = observe(&fx, &poses, 0.5).frames;
        let err = initialize_map(&frames, &fx.k, &SlamConfig::default()).unwrap_err();
        assert!(matches!(err, SlamError::InitializationFailed { .. }), "{err}");
    }

    #[test]
    fn too_few_frames_rejected() {
        let fx = fixture(20);
        let frames = observe(&fx, &fx.scene.trajectory.poses[..1], 0.0).frames;
        assert!(matches!(
            initialize_map(&frames, &fx.k, &SlamConfig::default()),
            Err(SlamError::TooFewFrames(1))
        ));
    }

    #[test]
    fn identical_frame_keeps_pose_without_keyframe() {
        let fx = fixture(20);
        let frames = observe(&fx, &fx.scene.trajectory.poses, 0.5).frames;
        let mut map = initialize_map(&frames, &fx.k, &SlamConfig::default()).unwrap();
        let last = map.frames_processed() - 1;
        let prev = map.trajectory[last].unwrap();
        let kfs = map.keyframes.len();
        let out = track_frame(&mut map, &frames[last]).unwrap();
        let pose = out.pose.unwrap();
        assert!((pose.translation - prev.translation).norm() < 1e-6);
        assert!(pose.rotation_angle_to(&prev) < 1e-6);
        assert_eq!(out.new_keyframe, None);
        assert_eq!(map.keyframes.len(), kfs);
    }

    #[test]
    fn frame_without_matches_is_lost() {
        let fx = fixture(20);
        let frames = observe(&fx, &fx.scene.trajectory.poses, 0.5).frames;
        let mut map = initialize_map(&frames, &fx.k, &SlamConfig::default()).unwrap();
        let n = map.frames_processed();
        let out = track_frame(&mut map, &empty_features(500)).unwrap();
        assert_eq!(out.pose, None);
        assert_eq!(map.state, TrackingState::Lost { frame: n });
        assert_eq!(map.trajectory.len(), n + 1);
        assert!(matches!(track_frame(&mut map, &frames[0]), Err(SlamError::NotTracking)));
    }

    #[test]
    fn covisibility_weights_match_set_intersection() {
        let fx = fixture(40);
        let frames = observe(&fx, &fx.scene.trajectory.poses, 0.5).frames;
        let run = run_slam(&frames, &fx.k, &SlamConfig::default()).unwrap();
        let map = &run.map;
        assert!(map.keyframes.len() >= 3);
        assert!(map.is_consistent());
        let sets: BTreeMap<KeyframeId, BTreeSet<MapPointId>> = map
            .keyframes
            .values()
            .map(|k| (k.id, k.map_point_links.values().copied().collect()))
            .collect();
        for (&a, sa) in &sets {
            for (&b, sb) in &sets {
                if a == b {
                    continue;
                }
                let shared = sa.intersection(sb).count();
                assert_eq!(map.graph.weight(a, b), shared);
                assert_eq!(map.graph.weight(a, b), map.graph.weight(b, a));
            }
        }
        assert!(map.map_points.values().all(|p| p.observations.len() >= 2));
    }

    #[test]
    fn duplicate_keyframe_is_culled() {
        let fx = fixture(20);
        let poses: Vec<CameraPose> = [0, 3, 6, 9].iter().map(|&i| fx.scene.trajectory.poses[i]).collect();
        let seen = observe(&fx, &poses, 0.0);
        let common: BTreeSet<usize> = seen.point_ids[1..].iter().fold(
            seen.point_ids[0].iter().copied().collect(),
            |acc, ids| acc.intersection(&ids.iter().copied().collect()).copied().collect(),
        );
        assert!(common.len() >= 50);
        let pts: Vec<Vector3<f64>> = common.iter().map(|&i| fx.points[i]).collect();
        let fx2 = Fixture {
            scene: fx.scene.clone(),
            k: fx.k,
            points: pts.clone(),
        };
        let frames = observe(&fx2, &poses, 0.0).frames;
        let mut map = SlamMap::empty(fx.k, SlamConfig::default());
        let ids: Vec<KeyframeId> = (0..4)
            .map(|i| map.insert_keyframe(i, poses[i], frames[i].clone(), BTreeMap::new()))
            .collect();
        for (p, x) in pts.iter().enumerate() {
            let obs: Vec<(KeyframeId, usize)> = ids.iter().map(|&k| (k, p)).collect();
            map.add_point(*x, &obs);
        }
        map.graph = CovisibilityGraph::rebuild(&map.keyframes, &map.map_points);
        let links = map.keyframes[&ids[3]].map_point_links.clone();
        let dup = map.insert_keyframe(9, poses[3], frames[3].clone(), links);
        assert!(map.is_consistent());
        assert!(process_keyframe(&mut map, dup).unwrap());
        assert_eq!(map.keyframes.len(), 4);
        assert_eq!(map.culled_keyframes, 1);
        assert!(map.is_consistent());
    }

    #[test]
    fn first_keyframe_is_never_culled() {
        let mut map = SlamMap::empty(CameraIntrinsics::from_resolution(100).unwrap(), SlamConfig::default());
        let f = empty_features(100);
        let first = map.insert_keyframe(0, CameraPose::identity(), f.clone(), BTreeMap::new());
        assert!(!cull_if_redundant(&mut map, first, &SlamConfig::default()));
    }

    #[test]
    fn new_section_adds_map_points() {
        let fx = fixture(40);
        let frames = observe(&fx, &fx.scene.trajectory.poses, 0.5).frames;
        let mut map = initialize_map(&frames, &fx.k, &SlamConfig::default()).unwrap();
        let start = map.frames_processed();
        let mut checked = 0;
        for f in &frames[start..] {
            let out = track_frame(&mut map, f).unwrap();
            assert_eq!(map.state, TrackingState::Tracking);
            if let Some(id) = out.new_keyframe {
                let before = map.map_points.len();
                process_keyframe(&mut map, id).unwrap();
                if map.keyframes.contains_key(&id) {
                    assert!(map.map_points.len() > before);
                    checked += 1;
                }
            }
        }
        assert!(checked >= 1);
    }

    #[test]
    fn trajectory_export_lines() {
        let fx = fixture(20);
        let frames = observe(&fx, &fx.scene.trajectory.poses, 0.5).frames;
        let map = initialize_map(&frames, &fx.k, &SlamConfig::default()).unwrap();
        let mut buf = Vec::new();
        map.write_trajectory_to(&mut buf, None).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), map.trajectory.iter().flatten().count());
        let fields: Vec<f64> = lines[0].split(' ').map(|s| s.parse().unwrap()).collect();
        assert_eq!(fields, vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert!(lines.iter().all(|l| l.split(' ').count() == 8));
    }

    #[test]
    fn slot_view_clamp() {
        assert_eq!(slot_views(4, 0), None);
        assert_eq!(slot_views(4, 1), None);
        assert_eq!(slot_views(4, 2), Some(2));
        assert_eq!(slot_views(4, 9), Some(4));
    }

    #[test]
    fn sub_cloud_with_many_far_points_is_dropped() {
        let reference: Vec<Vector3<f64>> = (0..50)
            .map(|i| {
                let a = i as f64 * 0.4;
                Vector3::new(a.cos(), a.sin(), 0.0)
            })
            .collect();
        let near: Vec<Vector3<f64>> = reference.iter().take(40).map(|p| p * 0.9).collect();
        let far: Vec<Vector3<f64>> = (0..60).map(|i| Vector3::new(10.0 + i as f64 * 0.1, 0.0, 0.0)).collect();
        let raw: Vec<Vector3<f64>> = near.iter().chain(&far).copied().collect();
        let cfg = DensifyConfig::default();
        assert!((far_fraction(&raw, &reference, 5.0) - 0.6).abs() < 1e-12);
        assert_eq!(filter_sub_cloud(&raw, &reference, &cfg), Err(0.6));
        assert!(filter_sub_cloud(&near, &reference, &cfg).is_ok());
    }

    #[test]
    fn isolated_keyframe_slot_is_skipped() {
        let mut map = SlamMap::empty(CameraIntrinsics::from_resolution(100).unwrap(), SlamConfig::default());
        let f = empty_features(100);
        map.insert_keyframe(0, CameraPose::identity(), f.clone(), BTreeMap::new());
        map.insert_keyframe(1, CameraPose::identity(), f, BTreeMap::new());
        let dense = densify_map(&map, &BTreeMap::new(), &DensifyConfig::default());
        assert!(dense.is_empty());
        assert_eq!(
            dense.slots.iter().map(|s| s.outcome.clone()).collect::<Vec<_>>(),
            vec![SlotOutcome::Skipped { n_cv: 0 }, SlotOutcome::Skipped { n_cv: 0 }]
        );
    }

    #[test]
    fn healthy_densification_concatenates_slots() {
        let fx = fixture(40);
        let frames = observe(&fx, &fx.scene.trajectory.poses, 0.3).frames;
        let run = run_slam(&frames, &fx.k, &SlamConfig::default()).unwrap();
        let map = &run.map;
        let cfg = DensifyConfig::default();
        let dense = densify_map(map, &BTreeMap::new(), &cfg);
        assert_eq!(dense.slots.len(), map.keyframes.len());
        let last = map.keyframe_ids().last().copied().unwrap();
        assert!(matches!(
            dense.slots.last().unwrap(),
            DenseSlot { keyframe, outcome: SlotOutcome::Skipped { n_cv: 0 } } if *keyframe == last
        ));
        let kept: usize = dense
            .slots
            .iter()
            .map(|s| match s.outcome {
                SlotOutcome::Kept { kept, .. } => kept,
                _ => 0,
            })
            .sum();
        assert!(kept > 0);
        assert_eq!(dense.len(), kept);
        assert_eq!(dense.source_keyframe.len(), kept);
        assert!(dense.source_keyframe.windows(2).all(|w| w[0] <= w[1]));
        for ((x, kf), px) in dense.points.iter().zip(&dense.source_keyframe).zip(&dense.reference_pixels) {
            let pose = map.keyframes[kf].pose;
            let p = fx.k.project_camera(&pose.transform(x)).unwrap();
            assert!(p.x >= 0.0 && p.y >= 0.0 && p.x < 500.0 && p.y < 500.0);
            assert!((p - px).norm() <= cfg.inlier_px + 1e-9);
        }
    }

    #[test]
    fn multi_view_triangulation_recovers_point() {
        let k = CameraIntrinsics::from_resolution(400).unwrap();
        let x = Vector3::new(0.2, -0.1, 3.0);
        let obs: Vec<(Vector2<f64>, ProjectionMatrix)> = (0..4)
            .map(|i| {
                let pose = CameraPose::from_center(so3_exp(&Vector3::new(0.0, 0.02 * i as f64, 0.0)), &Vector3::new(0.1 * i as f64, 0.0, 0.0));
                (k.project_camera(&pose.transform(&x)).unwrap(), ProjectionMatrix::compose(&k, &pose).unwrap())
            })
            .collect();
        let got = triangulate_views(&obs).unwrap();
        assert!((got - x).norm() < 1e-9);
        assert!(triangulate_views(&obs[..1]).is_none());
    }

    #[test]
    fn segment_clipping() {
        let (a, b) = clip_to_image(Vector2::new(-10.0, 5.0), Vector2::new(30.0, 5.0), 20.0, 10.0).unwrap();
        assert_eq!((a, b), (Vector2::new(0.0, 5.0), Vector2::new(20.0, 5.0)));
        assert!(clip_to_image(Vector2::new(-10.0, -5.0), Vector2::new(30.0, -5.0), 20.0, 10.0).is_none());
        let pose = CameraPose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, -1.0)).unwrap();
        let (lo, hi) = clip_in_front(&pose, &Vector3::new(0.0, 0.0, 1.0), 0.5, 3.0).unwrap();
        assert!((lo - 1.001).abs() < 1e-12 && hi == 3.0);
    }
}
