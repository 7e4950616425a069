//! Indexed triangle meshes and topology helpers.

use std::collections::HashMap;

use nalgebra::Vector3;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
    /// Per-vertex confidence in `[0, 1]`; empty when not computed.
    pub confidence: Vec<f32>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vector3<f64>>, triangles: Vec<[u32; 3]>) -> Self {
        let confidence = vec![1.0; vertices.len()];
        Self {
            vertices,
            triangles,
            confidence,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn indices_valid(&self) -> bool {
        let n = self.vertices.len() as u32;
        self.triangles.iter().all(|t| t.iter().all(|&i| i < n))
            && (self.confidence.is_empty() || self.confidence.len() == self.vertices.len())
    }

    pub fn triangle(&self, t: usize) -> [Vector3<f64>; 3] {
        let [a, b, c] = self.triangles[t];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle(t);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    /// Unnormalised face normal following the winding order.
    pub fn face_normal(&self, t: usize) -> Vector3<f64> {
        let [a, b, c] = self.triangle(t);
        (b - a).cross(&(c - a))
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Area-weighted vertex normals, normalised.
    pub fn vertex_normals(&self) -> Vec<Vector3<f64>> {
        let mut normals = vec![Vector3::zeros(); self.vertices.len()];
        for (t, tri) in self.triangles.iter().enumerate() {
            let n = self.face_normal(t);
            for &i in tri {
                normals[i as usize] += n;
            }
        }
        for n in &mut normals {
            let len = n.norm();
            if len > 0.0 {
                *n /= len;
            }
        }
        normals
    }

    /// Counts how many triangles use each undirected edge.
    pub fn edge_incidence(&self) -> HashMap<(u32, u32), usize> {
        let mut edges = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                let key = if a < b { (a, b) } else { (b, a) };
                *edges.entry(key).or_insert(0) += 1;
            }
        }
        edges
    }

    /// Every edge is shared by exactly two triangles.
    pub fn is_closed_manifold(&self) -> bool {
        !self.triangles.is_empty() && self.edge_incidence().values().all(|&c| c == 2)
    }

    /// `V − E + F` over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let edges = self.edge_incidence().len() as i64;
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &i in t {
                used[i as usize] = true;
            }
        }
        let v = used.iter().filter(|u| **u).count() as i64;
        v - edges + self.triangles.len() as i64
    }

    /// Number of connected components over triangles (shared vertices).
    pub fn component_count(&self) -> usize {
        let mut parent: Vec<usize> = (0..self.vertices.len()).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for t in &self.triangles {
            let a = find(&mut parent, t[0] as usize);
            for &i in &t[1..] {
                let b = find(&mut parent, i as usize);
                if a != b {
                    parent[b] = a;
                }
            }
        }
        let mut roots = std::collections::HashSet::new();
        for t in &self.triangles {
            roots.insert(find(&mut parent, t[0] as usize));
        }
        roots.len()
    }

    pub fn map_vertices(&self, f: impl Fn(&Vector3<f64>) -> Vector3<f64>) -> Self {
        Self {
            vertices: self.vertices.iter().map(f).collect(),
            triangles: self.triangles.clone(),
            confidence: self.confidence.clone(),
        }
    }

    pub fn bounding_box(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        bounding_box(&self.vertices)
    }

    /// Drops unreferenced vertices and compacts indices.
    pub fn compacted(&self) -> Self {
        let mut remap = vec![u32::MAX; self.vertices.len()];
        let mut vertices = Vec::new();
        let mut confidence = Vec::new();
        let mut triangles = Vec::with_capacity(self.triangles.len());
        for t in &self.triangles {
            let mut nt = [0u32; 3];
            for k in 0..3 {
                let i = t[k] as usize;
                if remap[i] == u32::MAX {
                    remap[i] = vertices.len() as u32;
                    vertices.push(self.vertices[i]);
                    if let Some(c) = self.confidence.get(i) {
                        confidence.push(*c);
                    }
                }
                nt[k] = remap[i];
            }
            triangles.push(nt);
        }
        Self {
            vertices,
            triangles,
            confidence,
        }
    }
}

pub fn bounding_box(points: &[Vector3<f64>]) -> Option<(Vector3<f64>, Vector3<f64>)> {
    let first = points.first()?;
    let mut lo = *first;
    let mut hi = *first;
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    Some((lo, hi))
}

pub fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    if points.is_empty() {
        return Vector3::zeros();
    }
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tetrahedron() -> TriangleMesh {
        TriangleMesh::new(
            vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
                Vector3::new(0.0, 0.0, 1.0),
            ],
            vec![[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]],
        )
    }

    #[test]
    fn tetrahedron_topology() {
        let m = tetrahedron();
        assert!(m.is_closed_manifold());
        assert_eq!(m.euler_characteristic(), 2);
        assert_eq!(m.component_count(), 1);
        assert!((m.triangle_area(0) - 0.5).abs() < 1e-15);
        // Outward orientation: the face on z=0 points down.
        assert!(m.face_normal(0).z < 0.0);
    }

    #[test]
    fn open_mesh_is_not_closed() {
        let mut m = tetrahedron();
        m.triangles.pop();
        assert!(!m.is_closed_manifold());
        assert_eq!(m.euler_characteristic(), 1);
    }
}
