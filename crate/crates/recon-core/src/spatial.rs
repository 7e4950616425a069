//! Exact k-d tree over 3D points.
//!
//! Squared distances are computed as `dx*dx + dy*dy + dz*dz` in that order
//! everywhere, so nearest-neighbour distances are bit-identical to a
//! brute-force scan using the same expression.

use nalgebra::Vector3;

const LEAF_SIZE: usize = 8;

#[inline]
pub fn dist2(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    /// Permutation: `order[i]` is the original index of `points[i]`.
    order: Vec<usize>,
    nodes: Vec<Node>,
}

/// A neighbour returned by a query: original point index and squared distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

impl KdTree {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        if !points.is_empty() {
            build(points, &mut order, 0, points.len(), &mut nodes);
        }
        let sorted = order.iter().map(|&i| points[i]).collect();
        Self {
            points: sorted,
            order,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, original_index: usize) -> Option<Vector3<f64>> {
        self.order
            .iter()
            .position(|&o| o == original_index)
            .map(|p| self.points[p])
    }

    /// Exact nearest neighbour; `None` for an empty tree.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<Neighbor> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = Neighbor {
            index: usize::MAX,
            dist2: f64::INFINITY,
        };
        self.nearest_rec(0, q, &mut best);
        Some(best)
    }

    fn nearest_rec(&self, node: usize, q: &Vector3<f64>, best: &mut Neighbor) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for i in start..end {
                    let d = dist2(&self.points[i], q);
                    if d < best.dist2 || (d == best.dist2 && self.order[i] < best.index) {
                        *best = Neighbor {
                            index: self.order[i],
                            dist2: d,
                        };
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.nearest_rec(near, q, best);
                if diff * diff <= best.dist2 {
                    self.nearest_rec(far, q, best);
                }
            }
        }
    }

    /// The `k` nearest neighbours sorted by increasing distance.
    pub fn knn(&self, q: &Vector3<f64>, k: usize) -> Vec<Neighbor> {
        let mut out: Vec<Neighbor> = Vec::with_capacity(k + 1);
        if k == 0 || self.nodes.is_empty() {
            return out;
        }
        self.knn_rec(0, q, k, &mut out);
        out
    }

    fn knn_rec(&self, node: usize, q: &Vector3<f64>, k: usize, out: &mut Vec<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for i in start..end {
                    let d = dist2(&self.points[i], q);
                    if out.len() == k && d >= out[k - 1].dist2 {
                        continue;
                    }
                    let n = Neighbor {
                        index: self.order[i],
                        dist2: d,
                    };
                    let pos = out.partition_point(|o| o.dist2 <= d);
                    out.insert(pos, n);
                    if out.len() > k {
                        out.pop();
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.knn_rec(near, q, k, out);
                if out.len() < k || diff * diff <= out[k - 1].dist2 {
                    self.knn_rec(far, q, k, out);
                }
            }
        }
    }

    /// All points within `radius` (inclusive), unsorted.
    pub fn within(&self, q: &Vector3<f64>, radius: f64) -> Vec<Neighbor> {
        let mut out = Vec::new();
        if !self.nodes.is_empty() {
            self.within_rec(0, q, radius * radius, &mut out);
        }
        out
    }

    pub fn count_within(&self, q: &Vector3<f64>, radius: f64) -> usize {
        self.within(q, radius).len()
    }

    fn within_rec(&self, node: usize, q: &Vector3<f64>, r2: f64, out: &mut Vec<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for i in start..end {
                    let d = dist2(&self.points[i], q);
                    if d <= r2 {
                        out.push(Neighbor {
                            index: self.order[i],
                            dist2: d,
                        });
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                if diff <= 0.0 || diff * diff <= r2 {
                    self.within_rec(left, q, r2, out);
                }
                if diff > 0.0 || diff * diff <= r2 {
                    self.within_rec(right, q, r2, out);
                }
            }
        }
    }
}

fn build(
    points: &[Vector3<f64>],
    order: &mut [usize],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let id = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for &i in &order[start..end] {
        lo = lo.inf(&points[i]);
        hi = hi.sup(&points[i]);
    }
    let extent = hi - lo;
    let axis = extent.imax();
    if extent[axis] == 0.0 {
        // All points coincide.
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let mid = start + (end - start) / 2;
    order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
        points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
    });
    let value = points[order[mid]][axis];
    nodes.push(Node::Leaf { start: 0, end: 0 });
    // Left holds everything <= value on `axis` up to `mid`; the split test
    // uses `diff <= 0` for the near side so equal coordinates stay reachable.
    let left = build(points, order, start, mid, nodes);
    let right = build(points, order, mid, end, nodes);
    nodes[id] = Node::Split {
        axis,
        value,
        left,
        right,
    };
    id
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vector3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()))
            .collect()
    }

    #[test]
    fn nearest_matches_brute_force() {
        let pts = random_points(2000, 1);
        let tree = KdTree::new(&pts);
        for q in random_points(300, 2) {
            let best = tree.nearest(&q).unwrap();
            let brute = pts.iter().map(|p| dist2(p, &q)).fold(f64::INFINITY, f64::min);
            assert_eq!(best.dist2.to_bits(), brute.to_bits());
        }
    }

    #[test]
    fn knn_and_radius() {
        let pts = random_points(500, 3);
        let tree = KdTree::new(&pts);
        let q = Vector3::new(0.5, 0.5, 0.5);
        let knn = tree.knn(&q, 10);
        let mut all: Vec<f64> = pts.iter().map(|p| dist2(p, &q)).collect();
        all.sort_by(f64::total_cmp);
        for (n, d) in knn.iter().zip(&all) {
            assert_eq!(n.dist2, *d);
        }
        let r = 0.2;
        let count = all.iter().filter(|d| **d <= r * r).count();
        assert_eq!(tree.count_within(&q, r), count);
    }

    #[test]
    fn duplicates_and_empty() {
        let pts = vec![Vector3::new(1.0, 1.0, 1.0); 50];
        let tree = KdTree::new(&pts);
        assert_eq!(tree.knn(&Vector3::zeros(), 20).len(), 20);
        assert!(KdTree::new(&[]).nearest(&Vector3::zeros()).is_none());
    }
}
