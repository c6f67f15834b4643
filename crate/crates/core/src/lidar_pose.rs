//! LiDAR odometry: chained point-to-plane ICP followed by a joint
//! refinement of every scan against planes fitted in the other scans.

use nalgebra::{DMatrix, Matrix6, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{local_plane, CloudError, PatchOutcome, PlaneConfig, PointCloud, SpatialIndex};
use crate::geometry::Se3;
use crate::solver::{huber_weight, se3_from_slice, solve_lm, BlockId, Problem, ResidualBlock, SolverConfig};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LidarError {
    #[error("only {:.1}% of source points found a valid plane", valid_fraction * 100.0)]
    InsufficientOverlap { valid_fraction: f64 },
    #[error("ICP normal equations are singular")]
    Degenerate,
    #[error(transparent)]
    Cloud(#[from] CloudError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcpConfig {
    pub max_iterations: usize,
    pub huber_delta: f64,
    /// Source points used per iteration (evenly strided).
    pub max_source_points: usize,
    pub min_valid_fraction: f64,
    pub rotation_tolerance: f64,
    pub translation_tolerance: f64,
    pub plane: PlaneConfig,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            huber_delta: 0.1,
            max_source_points: 3000,
            min_valid_fraction: 0.3,
            rotation_tolerance: 1e-6,
            translation_tolerance: 1e-5,
            plane: PlaneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcpResult {
    /// Maps source coordinates into target coordinates.
    pub pose: Se3,
    pub converged: bool,
    pub iterations: usize,
    pub inlier_rms: f64,
    pub valid_fraction: f64,
    /// Cost of each iteration's frozen matches before and after its step.
    pub objective: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidarTrajectory {
    /// World (first scan) to scan `i`.
    pub poses: Vec<Se3>,
}

impl LidarTrajectory {
    pub fn identity(n: usize) -> Self {
        Self {
            poses: vec![Se3::identity(); n],
        }
    }
}

struct Match {
    point: Vector3<f64>,
    normal: Vector3<f64>,
    centroid: Vector3<f64>,
}

pub(crate) fn stride_sample(points: &[Vector3<f64>], max: usize) -> Vec<Vector3<f64>> {
    if points.len() <= max || max == 0 {
        return points.to_vec();
    }
    let step = points.len() as f64 / max as f64;
    (0..max)
        .map(|k| points[((k as f64 * step) as usize).min(points.len() - 1)])
        .collect()
}

/// Point-to-plane matches of `points` (already in target coordinates).
fn matches(points: &[Vector3<f64>], index: &SpatialIndex, plane: &PlaneConfig) -> Vec<Option<Match>> {
    points
        .par_iter()
        .map(|p| match local_plane(index, p, plane) {
            PatchOutcome::Valid(patch) => Some(Match {
                point: *p,
                normal: patch.normal,
                centroid: patch.centroid,
            }),
            _ => None,
        })
        .collect()
}

/// Huber cost of frozen matches after moving every point by `delta`.
fn matched_cost(m: &[Option<Match>], delta: &Se3, huber: f64) -> f64 {
    m.iter()
        .flatten()
        .map(|m| huber_weight(m.normal.dot(&(delta.transform(&m.point) - m.centroid)), huber).0)
        .sum()
}

fn valid_fraction(m: &[Option<Match>]) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.iter().filter(|m| m.is_some()).count() as f64 / m.len() as f64
}

/// Huber-weighted Gauss-Newton system in the left tangent of the pose.
fn normal_equations(m: &[Option<Match>], delta: f64) -> (Matrix6<f64>, Vector6<f64>) {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    for m in m.iter().flatten() {
        let r = m.normal.dot(&(m.point - m.centroid));
        let w = huber_weight(r, delta).1;
        let mut j = Vector6::zeros();
        j.fixed_rows_mut::<3>(0).copy_from(&m.point.cross(&m.normal));
        j.fixed_rows_mut::<3>(3).copy_from(&m.normal);
        h += w * j * j.transpose();
        g += w * r * j;
    }
    (h, g)
}

/// Aligns `source` to the cloud indexed by `target_index`.
pub fn icp_point_to_plane(
    source: &PointCloud,
    target_index: &SpatialIndex,
    initial: &Se3,
    cfg: &IcpConfig,
) -> Result<IcpResult, LidarError> {
    source.validate()?;
    let src = stride_sample(&source.points, cfg.max_source_points);
    let eval = |pose: &Se3| {
        let moved: Vec<Vector3<f64>> = src.iter().map(|p| pose.transform(p)).collect();
        matches(&moved, target_index, &cfg.plane)
    };

    let mut pose = *initial;
    let mut m = eval(&pose);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        if valid_fraction(&m) < cfg.min_valid_fraction {
            break;
        }
        let before = matched_cost(&m, &Se3::identity(), cfg.huber_delta);
        let (h, g) = normal_equations(&m, cfg.huber_delta);
        let damped = h + Matrix6::identity() * (1e-9 * h.trace().max(1e-12));
        let Some(chol) = damped.cholesky() else {
            return Err(LidarError::Degenerate);
        };
        let step = -chol.solve(&g);
        // backtrack on the cost of the frozen matches
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..10 {
            let d = step * scale;
            let delta = Se3::identity().retract(&d.fixed_rows::<3>(0).into(), &d.fixed_rows::<3>(3).into());
            let after = matched_cost(&m, &delta, cfg.huber_delta);
            if after <= before {
                accepted = Some((delta, d, after));
                break;
            }
            scale *= 0.5;
        }
        let Some((delta, d, after)) = accepted else {
            converged = true;
            break;
        };
        pose = delta.compose(&pose);
        trace.push((before, after));
        m = eval(&pose);
        if d.fixed_rows::<3>(0).norm() < cfg.rotation_tolerance
            && d.fixed_rows::<3>(3).norm() < cfg.translation_tolerance
        {
            converged = true;
            break;
        }
    }
    let vf = valid_fraction(&m);
    if vf < cfg.min_valid_fraction {
        return Err(LidarError::InsufficientOverlap { valid_fraction: vf });
    }
    let inliers: Vec<f64> = m
        .iter()
        .flatten()
        .map(|m| m.normal.dot(&(m.point - m.centroid)))
        .filter(|r| r.abs() <= cfg.huber_delta)
        .collect();
    let inlier_rms = if inliers.is_empty() {
        0.0
    } else {
        (inliers.iter().map(|r| r * r).sum::<f64>() / inliers.len() as f64).sqrt()
    };
    Ok(IcpResult {
        pose,
        converged,
        iterations,
        inlier_rms,
        valid_fraction: vf,
        objective: trace,
    })
}

/// Chains scan-to-previous-scan ICP with a constant-velocity prediction.
pub fn chain_icp(scans: &[PointCloud], cfg: &IcpConfig) -> Result<(LidarTrajectory, Vec<IcpResult>), LidarError> {
    let mut poses = vec![Se3::identity()];
    let mut results = Vec::new();
    let mut prev_rel = Se3::identity();
    for i in 1..scans.len() {
        let target = SpatialIndex::new(&scans[i - 1].points)?;
        // rel maps scan i into scan i-1
        let res = icp_point_to_plane(&scans[i], &target, &prev_rel, cfg)?;
        prev_rel = res.pose;
        poses.push(res.pose.inverse().compose(&poses[i - 1]));
        results.push(res);
    }
    Ok((LidarTrajectory { poses }, results))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub outer_iterations: usize,
    pub huber_delta: f64,
    pub max_points_per_scan: usize,
    /// Matches farther than this from their plane are dropped (m).
    pub max_distance: f64,
    pub relative_tolerance: f64,
    pub plane: PlaneConfig,
    pub solver: SolverConfig,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            outer_iterations: 6,
            huber_delta: 0.1,
            max_points_per_scan: 1500,
            max_distance: 0.5,
            relative_tolerance: 1e-10,
            plane: PlaneConfig::default(),
            solver: SolverConfig {
                max_iterations: 30,
                ..SolverConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub trajectory: LidarTrajectory,
    /// Total robust cost before refinement and after each accepted round.
    pub cost: Vec<f64>,
    pub converged: bool,
}

/// Points of scan `j` matched to planes fitted in scan `i`, weighted by the
/// Huber IRLS weight at construction time.
pub struct ScanPairResidual {
    ids: [BlockId; 2],
    points: Vec<Vector3<f64>>,
    normals: Vec<Vector3<f64>>,
    centroids: Vec<Vector3<f64>>,
    sqrt_w: Vec<f64>,
}

impl ScanPairResidual {
    /// Points are in scan `j` (pose block `pose_j`), planes in scan `i`.
    /// All four vectors have one entry per match.
    pub fn new(
        pose_i: BlockId,
        pose_j: BlockId,
        points: Vec<Vector3<f64>>,
        normals: Vec<Vector3<f64>>,
        centroids: Vec<Vector3<f64>>,
        sqrt_w: Vec<f64>,
    ) -> Self {
        assert!(
            points.len() == normals.len() && points.len() == centroids.len() && points.len() == sqrt_w.len(),
            "match vectors differ in length"
        );
        Self {
            ids: [pose_i, pose_j],
            points,
            normals,
            centroids,
            sqrt_w,
        }
    }
}

impl ResidualBlock for ScanPairResidual {
    fn num_residuals(&self) -> usize {
        self.points.len()
    }

    fn parameter_blocks(&self) -> &[BlockId] {
        &self.ids
    }

    fn evaluate(&self, p: &[&[f64]], r: &mut [f64], jac: Option<&mut [DMatrix<f64>]>) -> bool {
        let ti = se3_from_slice(p[0]);
        let tj = se3_from_slice(p[1]);
        let tj_inv = tj.inverse();
        let ri = ti.rotation_matrix();
        let rj = tj.rotation_matrix();
        let mut jac = jac;
        for k in 0..self.points.len() {
            let (pt, n, w) = (&self.points[k], &self.normals[k], self.sqrt_w[k]);
            let rq = ti.rotation * tj_inv.transform(pt);
            r[k] = w * n.dot(&(rq + ti.translation - self.centroids[k]));
            if let Some(j) = jac.as_deref_mut() {
                // rotations update as R <- exp(w) R, translations additively
                let a = rj * (ri.transpose() * n);
                let gi = rq.cross(n) * w;
                let gj = a.cross(&(pt - tj.translation)) * w;
                for c in 0..3 {
                    j[0][(k, c)] = gi[c];
                    j[0][(k, 3 + c)] = w * n[c];
                    j[1][(k, c)] = gj[c];
                    j[1][(k, 3 + c)] = -w * a[c];
                }
            }
        }
        true
    }
}

type PairMatches = Vec<(usize, usize, Vec<(Vector3<f64>, Vector3<f64>, Vector3<f64>, f64)>)>;

/// For every ordered scan pair, points of the second matched against planes
/// of the first under the given poses. Each entry carries its residual.
fn pair_matches(sub: &[Vec<Vector3<f64>>], indices: &[SpatialIndex], poses: &[Se3], cfg: &RefineConfig) -> PairMatches {
    let n = sub.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    pairs
        .par_iter()
        .map(|&(i, j)| {
            let rel = poses[i].compose(&poses[j].inverse());
            let m = sub[j]
                .iter()
                .filter_map(|p| {
                    let y = rel.transform(p);
                    match local_plane(&indices[i], &y, &cfg.plane) {
                        PatchOutcome::Valid(patch) => {
                            let r = patch.normal.dot(&(y - patch.centroid));
                            (r.abs() <= cfg.max_distance).then_some((*p, patch.normal, patch.centroid, r))
                        }
                        _ => None,
                    }
                })
                .collect();
            (i, j, m)
        })
        .collect()
}

fn robust_cost(m: &PairMatches, delta: f64) -> f64 {
    m.iter()
        .flat_map(|(_, _, v)| v.iter().map(|e| huber_weight(e.3, delta).0))
        .sum()
}

/// Refines every pose but the first by jointly minimizing point-to-plane
/// distances between all scan pairs (points of one scan against local planes
/// of another). Matches are rebuilt each round; rounds that would raise the
/// robust cost are rejected.
pub fn refine_trajectory(
    scans: &[PointCloud],
    initial: &LidarTrajectory,
    cfg: &RefineConfig,
) -> Result<RefineReport, LidarError> {
    assert_eq!(scans.len(), initial.poses.len());
    let mut poses = initial.poses.clone();
    if let Some(p0) = poses.first_mut() {
        *p0 = Se3::identity();
    }
    if scans.len() < 2 {
        return Ok(RefineReport {
            trajectory: LidarTrajectory { poses },
            cost: vec![0.0],
            converged: true,
        });
    }
    let indices: Vec<SpatialIndex> = scans
        .iter()
        .map(|s| SpatialIndex::new(&s.points))
        .collect::<Result<_, _>>()?;
    let sub: Vec<Vec<Vector3<f64>>> = scans
        .iter()
        .map(|s| stride_sample(&s.points, cfg.max_points_per_scan))
        .collect();

    let mut m = pair_matches(&sub, &indices, &poses, cfg);
    let mut cost = robust_cost(&m, cfg.huber_delta);
    let mut trace = vec![cost];
    let mut converged = false;
    for _ in 0..cfg.outer_iterations {
        let mut problem = Problem::new();
        let blocks: Vec<BlockId> = poses.iter().map(|p| problem.add_se3(p)).collect();
        problem.set_constant(blocks[0], true);
        for (i, j, v) in &m {
            if v.is_empty() {
                continue;
            }
            problem.add_residual(Box::new(ScanPairResidual {
                ids: [blocks[*i], blocks[*j]],
                points: v.iter().map(|e| e.0).collect(),
                normals: v.iter().map(|e| e.1).collect(),
                centroids: v.iter().map(|e| e.2).collect(),
                sqrt_w: v.iter().map(|e| huber_weight(e.3, cfg.huber_delta).1.sqrt()).collect(),
            }));
        }
        if problem.num_residual_blocks() == 0 {
            return Err(LidarError::InsufficientOverlap { valid_fraction: 0.0 });
        }
        solve_lm(&mut problem, &cfg.solver).map_err(|_| LidarError::Degenerate)?;
        let cand: Vec<Se3> = blocks.iter().map(|&b| problem.se3(b)).collect();
        let cm = pair_matches(&sub, &indices, &cand, cfg);
        let new_cost = robust_cost(&cm, cfg.huber_delta);
        if new_cost > cost {
            converged = true;
            break;
        }
        let rel = (cost - new_cost) / cost.max(1e-300);
        poses = cand;
        m = cm;
        cost = new_cost;
        trace.push(cost);
        if rel < cfg.relative_tolerance {
            converged = true;
            break;
        }
    }
    Ok(RefineReport {
        trajectory: LidarTrajectory { poses },
        cost: trace,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct OdometryConfig {
    pub icp: IcpConfig,
    pub refine: RefineConfig,
}

/// Chained ICP, then all poses refined together over scan-pair plane
/// matches.
pub fn estimate_trajectory(scans: &[PointCloud], cfg: &OdometryConfig) -> Result<RefineReport, LidarError> {
    let (initial, _) = chain_icp(scans, &cfg.icp)?;
    refine_trajectory(scans, &initial, &cfg.refine)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Four planar patches, kept apart so no neighborhood straddles two.
    fn box_scene(rng: &mut ChaCha8Rng, per_plane: usize) -> Vec<Vector3<f64>> {
        let mut pts = Vec::new();
        for _ in 0..per_plane {
            let (a, b): (f64, f64) = (rng.random_range(-4.0..4.0), rng.random_range(-1.0..3.0));
            pts.push(Vector3::new(a, 0.9 * b + 0.2 * a, -1.5));
            pts.push(Vector3::new(a, 5.0 + 0.05 * a, b));
            pts.push(Vector3::new(-4.6 + 0.1 * b, a, b));
            pts.push(Vector3::new(4.6, a + 0.2 * b, b));
        }
        pts
    }

    #[test]
    fn identity_alignment_is_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = PointCloud::new(box_scene(&mut rng, 2000)).unwrap();
        let index = SpatialIndex::new(&cloud.points).unwrap();
        let res = icp_point_to_plane(&cloud, &index, &Se3::identity(), &IcpConfig::default()).unwrap();
        assert!(res.pose.translation.norm() < 1e-9);
        assert!(res.pose.rotation.angle() < 1e-9);
        assert!(res.converged);
    }

    #[test]
    fn recovers_known_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target = box_scene(&mut rng, 2500);
        let truth = Se3::from_axis_angle(Vector3::new(0.03, -0.05, 0.06), Vector3::new(0.2, -0.15, 0.1));
        // source points expressed so that truth maps them onto the target
        let inv = truth.inverse();
        let source = PointCloud::new(target.iter().map(|p| inv.transform(p)).collect()).unwrap();
        let index = SpatialIndex::new(&target).unwrap();
        let res = icp_point_to_plane(&source, &index, &Se3::identity(), &IcpConfig::default()).unwrap();
        let err = res.pose.compose(&truth.inverse());
        assert!(err.rotation.angle().to_degrees() < 0.05);
        assert!(err.translation.norm() < 0.005);
        assert!(res.objective.iter().all(|(b, a)| a <= b));
    }

    #[test]
    fn disjoint_clouds_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = box_scene(&mut rng, 500);
        let far: Vec<Vector3<f64>> = a.iter().map(|p| p + Vector3::new(100.0, 0.0, 0.0)).collect();
        let index = SpatialIndex::new(&far).unwrap();
        let res = icp_point_to_plane(
            &PointCloud::new(a).unwrap(),
            &index,
            &Se3::identity(),
            &IcpConfig::default(),
        );
        assert!(matches!(res, Err(LidarError::InsufficientOverlap { .. })));
    }

    #[test]
    fn scan_pair_jacobians_match_finite_differences() {
        use crate::solver::{check_jacobian, Manifold};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rand_pose = |rng: &mut ChaCha8Rng| {
            Se3::from_axis_angle(
                Vector3::new(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                ),
                Vector3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                ),
            )
        };
        for _ in 0..100 {
            let (a, b) = (rand_pose(&mut rng), rand_pose(&mut rng));
            let block = ScanPairResidual {
                ids: [0, 1],
                points: (0..3)
                    .map(|_| {
                        Vector3::new(
                            rng.random_range(-5.0..5.0),
                            rng.random_range(-5.0..5.0),
                            rng.random_range(-1.0..1.0),
                        )
                    })
                    .collect(),
                normals: (0..3)
                    .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0).normalize())
                    .collect(),
                centroids: (0..3)
                    .map(|_| Vector3::new(rng.random_range(-5.0..5.0), 0.0, 0.0))
                    .collect(),
                sqrt_w: vec![1.0, 0.5, 0.8],
            };
            let params = vec![a.to_array().to_vec(), b.to_array().to_vec()];
            let dev = check_jacobian(&block, &params, &[Manifold::Se3, Manifold::Se3], 1e-6);
            assert!(dev < 1e-5, "{dev}");
        }
    }

    #[test]
    fn single_scan_refines_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cloud = PointCloud::new(box_scene(&mut rng, 200)).unwrap();
        let out = refine_trajectory(&[cloud], &LidarTrajectory::identity(1), &RefineConfig::default()).unwrap();
        assert_eq!(out.trajectory.poses, vec![Se3::identity()]);
    }
}
