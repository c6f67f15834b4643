//! Point clouds, exact k-nearest-neighbor search and local plane fitting.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum CloudError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("point {index} has a non-finite coordinate")]
    NonFinite { index: usize },
    #[error("neighborhood points are all coincident")]
    DegenerateNeighborhood,
    #[error("need at least 3 points to fit a plane, got {0}")]
    TooFewPoints(usize),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub intensity: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self, CloudError> {
        let c = Self {
            points,
            intensity: None,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), CloudError> {
        match self.points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            Some(index) => Err(CloudError::NonFinite { index }),
            None => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist_sq: f64,
}

impl Eq for Neighbor {}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist_sq
            .total_cmp(&other.dist_sq)
            .then(self.index.cmp(&other.index))
    }
}

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Static k-d tree over a cloud's points. Immutable once built.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<Vector3<f64>>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

/// Builds an exact nearest-neighbor index over `cloud`.
pub fn build_index(cloud: &PointCloud) -> Result<SpatialIndex, CloudError> {
    SpatialIndex::new(&cloud.points)
}

impl SpatialIndex {
    pub fn new(points: &[Vector3<f64>]) -> Result<Self, CloudError> {
        if points.is_empty() {
            return Err(CloudError::EmptyCloud);
        }
        let mut idx = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        idx.build(0, points.len());
        Ok(idx)
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        let mid = start + (end - start) / 2;
        let pts = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]));
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &Vector3<f64> {
        &self.points[i]
    }

    /// The `k` nearest points, closest first. Ties break by index.
    pub fn knn(&self, query: &Vector3<f64>, k: usize) -> Vec<Neighbor> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, &mut heap);
        heap.into_sorted_vec()
    }

    fn search(&self, node: usize, q: &Vector3<f64>, k: usize, heap: &mut BinaryHeap<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let n = Neighbor {
                        index: i,
                        dist_sq: (self.points[i] - q).norm_squared(),
                    };
                    if heap.len() < k {
                        heap.push(n);
                    } else if n < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(n);
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
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, heap);
                if heap.len() < k || diff * diff <= heap.peek().unwrap().dist_sq {
                    self.search(far, q, k, heap);
                }
            }
        }
    }
}

/// Local plane: normal, centroid and the sorted eigenvalues of the
/// neighborhood covariance `(1/l) Σ (q − q̄)(q − q̄)ᵀ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanePatch {
    pub normal: Vector3<f64>,
    pub centroid: Vector3<f64>,
    /// `λ1 ≥ λ2 ≥ λ3 ≥ 0`.
    pub eigenvalues: [f64; 3],
    pub neighbor_count: usize,
}

impl PlanePatch {
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(&(p - self.centroid))
    }
}

/// Fits a plane to a neighborhood. With a viewpoint the normal faces it,
/// otherwise its first non-negligible component is made positive.
pub fn fit_plane(neighbors: &[Vector3<f64>], viewpoint: Option<&Vector3<f64>>) -> Result<PlanePatch, CloudError> {
    let l = neighbors.len();
    if l < 3 {
        return Err(CloudError::TooFewPoints(l));
    }
    let centroid = neighbors.iter().sum::<Vector3<f64>>() / l as f64;
    let mut cov = Matrix3::zeros();
    for q in neighbors {
        let d = q - centroid;
        cov += d * d.transpose();
    }
    cov /= l as f64;
    let eig = SymmetricEigen::new(cov);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues = idx.map(|i| eig.eigenvalues[i].max(0.0));
    if eigenvalues[0] <= 1e-30 {
        return Err(CloudError::DegenerateNeighborhood);
    }
    let mut normal: Vector3<f64> = eig.eigenvectors.column(idx[2]).into_owned().normalize();
    let flip = match viewpoint {
        Some(v) => normal.dot(&(v - centroid)) < 0.0,
        None => normal.iter().find(|c| c.abs() > 1e-12).is_some_and(|c| *c < 0.0),
    };
    if flip {
        normal = -normal;
    }
    Ok(PlanePatch {
        normal,
        centroid,
        eigenvalues,
        neighbor_count: l,
    })
}

const VALIDITY_EPS: f64 = 1e-12;

/// Planarity test `λ2 / max(λ3, ε) > ratio_threshold`.
pub fn plane_validity(patch: &PlanePatch, ratio_threshold: f64) -> bool {
    patch.eigenvalues[1] / patch.eigenvalues[2].max(VALIDITY_EPS) > ratio_threshold
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlaneConfig {
    /// Neighbors per patch (`l`).
    pub neighbors: usize,
    /// Minimum `λ2/λ3`.
    pub ratio_threshold: f64,
    /// All neighbors must lie within this distance of the query (m).
    pub max_radius: f64,
}

impl Default for PlaneConfig {
    fn default() -> Self {
        Self {
            neighbors: 20,
            ratio_threshold: 10.0,
            max_radius: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PatchOutcome {
    Valid(PlanePatch),
    /// Fewer than `l` neighbors within the search radius.
    Sparse,
    NotPlanar(PlanePatch),
}

/// Fits and tests the local plane around `query`.
pub fn local_plane(index: &SpatialIndex, query: &Vector3<f64>, cfg: &PlaneConfig) -> PatchOutcome {
    let nn = index.knn(query, cfg.neighbors);
    let r2 = cfg.max_radius * cfg.max_radius;
    if nn.len() < cfg.neighbors.max(3) || nn.iter().any(|n| n.dist_sq > r2) {
        return PatchOutcome::Sparse;
    }
    let pts: Vec<Vector3<f64>> = nn.iter().map(|n| *index.point(n.index)).collect();
    match fit_plane(&pts, None) {
        Ok(p) if plane_validity(&p, cfg.ratio_threshold) => PatchOutcome::Valid(p),
        Ok(p) => PatchOutcome::NotPlanar(p),
        Err(_) => PatchOutcome::Sparse,
    }
}
