//! Monocular scale recovery and coarse scale + extrinsic refinement against
//! LiDAR planes.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{local_plane, PatchOutcome, PlaneConfig, SpatialIndex};
use crate::geometry::Se3;
use crate::solver::{self, BlockId, Manifold, Problem, ResidualBlock, RobustLoss, SolverConfig, SolverError};
use crate::visual_ba::VisualPoint;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum InitError {
    #[error("camera translations are all near zero; scale is unobservable")]
    DegenerateMotion,
    #[error("no visual point found a valid LiDAR plane")]
    NoValidPairs,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleEstimate {
    pub scale: f64,
    pub residual_rms: f64,
}

/// Least-squares scale from `s R̃ ᶜtᵢ = ᴸtᵢ − (I − ᴸRᵢ) t̃` stacked over
/// every frame after the first.
pub fn recover_scale(
    camera_poses: &[Se3],
    lidar_poses: &[Se3],
    initial_extrinsics: &Se3,
) -> Result<ScaleEstimate, InitError> {
    if camera_poses.len() != lidar_poses.len() {
        return Err(InitError::InvalidInput(format!(
            "{} camera poses vs {} LiDAR poses",
            camera_poses.len(),
            lidar_poses.len()
        )));
    }
    if camera_poses.len() < 2 {
        return Err(InitError::InvalidInput("at least two frames are required".into()));
    }
    if camera_poses[1..].iter().all(|c| c.translation.norm() <= 1e-6) {
        return Err(InitError::DegenerateMotion);
    }
    let rx = initial_extrinsics.rotation_matrix();
    let tx = initial_extrinsics.translation;
    let rows: Vec<(Vector3<f64>, Vector3<f64>)> = camera_poses[1..]
        .iter()
        .zip(&lidar_poses[1..])
        .map(|(c, l)| {
            let a = rx * c.translation;
            let b = l.translation - (Matrix3::identity() - l.rotation_matrix()) * tx;
            (a, b)
        })
        .collect();
    let aa: f64 = rows.iter().map(|(a, _)| a.norm_squared()).sum();
    let ab: f64 = rows.iter().map(|(a, b)| a.dot(b)).sum();
    let scale = ab / aa;
    let ss: f64 = rows.iter().map(|(a, b)| (a * scale - b).norm_squared()).sum();
    Ok(ScaleEstimate {
        scale,
        residual_rms: (ss / (3 * rows.len()) as f64).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitIteration {
    pub scale: f64,
    pub extrinsics: Se3,
    pub cost: f64,
    pub valid_pairs: usize,
    /// False when the update lost too many pairs and was discarded.
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledInit {
    pub scale: f64,
    /// Camera to LiDAR.
    pub extrinsics: Se3,
    pub iteration_log: Vec<InitIteration>,
}

impl ScaledInit {
    pub fn new(scale: f64, extrinsics: Se3) -> Self {
        Self {
            scale,
            extrinsics,
            iteration_log: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub kappa_max: usize,
    pub parameter_tolerance: f64,
    pub huber_delta: f64,
    /// Pair distance threshold of the first iteration (m).
    pub initial_distance_threshold: f64,
    /// The threshold shrinks by this factor per iteration down to
    /// `distance_threshold`.
    pub threshold_decay: f64,
    /// Pairs farther than this from their plane are not formed (m).
    pub distance_threshold: f64,
    /// An update is discarded when fewer than this fraction of its pairs
    /// remain valid at the new estimate.
    pub min_pair_retention: f64,
    pub plane: PlaneConfig,
    pub solver: SolverConfig,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            kappa_max: 5,
            parameter_tolerance: 1e-6,
            huber_delta: 0.05,
            initial_distance_threshold: 3.0,
            threshold_decay: 0.5,
            distance_threshold: 0.25,
            min_pair_retention: 0.5,
            plane: PlaneConfig::default(),
            solver: SolverConfig::default(),
        }
    }
}

/// Refined scale and extrinsics plus the camera-side state rescaled to metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitOutput {
    pub init: ScaledInit,
    pub camera_poses: Vec<Se3>,
    pub points: Vec<VisualPoint>,
    /// Whether the final iteration met the parameter tolerance.
    pub converged: bool,
}

/// `n·(ᴸRᵢ(R e^{ls} p + t) + ᴸtᵢ − q̄)` over `[log s, extrinsics]`.
pub struct ScaleExtrinsicResidual {
    ids: [BlockId; 2],
    point: Vector3<f64>,
    lidar_pose: Se3,
    normal: Vector3<f64>,
    centroid: Vector3<f64>,
    loss: RobustLoss,
}

impl ScaleExtrinsicResidual {
    pub fn new(
        log_scale: BlockId,
        extrinsics: BlockId,
        point: Vector3<f64>,
        lidar_pose: Se3,
        normal: Vector3<f64>,
        centroid: Vector3<f64>,
        loss: RobustLoss,
    ) -> Self {
        Self {
            ids: [log_scale, extrinsics],
            point,
            lidar_pose,
            normal,
            centroid,
            loss,
        }
    }
}

impl ResidualBlock for ScaleExtrinsicResidual {
    fn num_residuals(&self) -> usize {
        1
    }

    fn parameter_blocks(&self) -> &[BlockId] {
        &self.ids
    }

    fn evaluate(&self, p: &[&[f64]], r: &mut [f64], jac: Option<&mut [DMatrix<f64>]>) -> bool {
        let s = p[0][0].exp();
        let x = solver::se3_from_slice(p[1]);
        let u = x.rotation * (self.point * s);
        let y = self.lidar_pose.transform(&(u + x.translation));
        r[0] = self.normal.dot(&(y - self.centroid));
        if let Some(j) = jac {
            let m = self.lidar_pose.rotation.inverse() * self.normal;
            j[0][(0, 0)] = m.dot(&u);
            let w = u.cross(&m);
            for k in 0..3 {
                j[1][(0, k)] = w[k];
                j[1][(0, 3 + k)] = m[k];
            }
        }
        true
    }

    fn loss(&self) -> RobustLoss {
        self.loss
    }
}

struct Pair {
    point: usize,
    frame: usize,
    normal: Vector3<f64>,
    centroid: Vector3<f64>,
}

fn build_pairs(
    points: &[VisualPoint],
    indices: &[SpatialIndex],
    lidar_poses: &[Se3],
    scale: f64,
    extrinsics: &Se3,
    threshold: f64,
    plane: &PlaneConfig,
) -> Vec<Pair> {
    points
        .par_iter()
        .enumerate()
        .flat_map_iter(|(j, vp)| {
            let lidar0 = extrinsics.transform(&(vp.position * scale));
            indices
                .iter()
                .zip(lidar_poses)
                .enumerate()
                .filter_map(move |(i, (index, lp))| {
                    let y = lp.transform(&lidar0);
                    match local_plane(index, &y, plane) {
                        PatchOutcome::Valid(patch) if patch.signed_distance(&y).abs() <= threshold => Some(Pair {
                            point: j,
                            frame: i,
                            normal: patch.normal,
                            centroid: patch.centroid,
                        }),
                        _ => None,
                    }
                })
        })
        .collect()
}

/// Alternates pair construction and robust minimization over scale and
/// extrinsics, then rescales camera poses, points and covariances.
/// `points` and `camera_poses` are in SfM units.
pub fn refine_scale_extrinsics(
    points: &[VisualPoint],
    camera_poses: &[Se3],
    indices: &[SpatialIndex],
    lidar_poses: &[Se3],
    init: &ScaledInit,
    cfg: &InitConfig,
) -> Result<InitOutput, InitError> {
    if indices.len() != lidar_poses.len() {
        return Err(InitError::InvalidInput(
            "one spatial index per LiDAR pose required".into(),
        ));
    }
    if !(init.scale > 0.0) {
        return Err(InitError::InvalidInput(format!("scale {} is not positive", init.scale)));
    }
    if points.is_empty() {
        return Err(InitError::NoValidPairs);
    }
    let mut scale = init.scale;
    let mut extrinsics = init.extrinsics;
    let mut log = init.iteration_log.clone();
    let mut converged = false;
    for kappa in 0..cfg.kappa_max {
        let threshold =
            (cfg.initial_distance_threshold * cfg.threshold_decay.powi(kappa as i32)).max(cfg.distance_threshold);
        // neighborhoods must reach planes as far away as the threshold
        let plane = PlaneConfig {
            max_radius: cfg.plane.max_radius.max(threshold),
            ..cfg.plane
        };
        let pairs = build_pairs(points, indices, lidar_poses, scale, &extrinsics, threshold, &plane);
        if pairs.is_empty() {
            return Err(InitError::NoValidPairs);
        }
        let mut problem = Problem::new();
        let sb = problem.add_block(vec![scale.ln()], Manifold::Euclidean(1));
        let xb = problem.add_se3(&extrinsics);
        for pr in &pairs {
            problem.add_residual(Box::new(ScaleExtrinsicResidual {
                ids: [sb, xb],
                point: points[pr.point].position,
                lidar_pose: lidar_poses[pr.frame],
                normal: pr.normal,
                centroid: pr.centroid,
                loss: RobustLoss::huber(cfg.huber_delta),
            }));
        }
        let report = solver::solve_lm(&mut problem, &cfg.solver)?;
        let new_scale = problem.values(sb)[0].exp();
        let new_x = problem.se3(xb);
        // frozen infinite planes admit collapsed solutions (e.g. every point
        // shrunk onto a plane corner); such an update loses most of its pairs
        let retained = build_pairs(points, indices, lidar_poses, new_scale, &new_x, threshold, &plane).len();
        let accepted = retained as f64 >= cfg.min_pair_retention * pairs.len() as f64;
        log.push(InitIteration {
            scale: new_scale,
            extrinsics: new_x,
            cost: report.final_cost,
            valid_pairs: pairs.len(),
            accepted,
        });
        if !accepted {
            log::warn!(
                "init iteration {kappa} rejected: {retained} of {} pairs survive the update",
                pairs.len()
            );
            continue;
        }
        let change = (new_scale.ln() - scale.ln()).abs()
            + new_x.rotation.angle_to(&extrinsics.rotation)
            + (new_x.translation - extrinsics.translation).norm();
        scale = new_scale;
        extrinsics = new_x;
        if threshold <= cfg.distance_threshold && change < cfg.parameter_tolerance {
            converged = true;
            break;
        }
    }
    let camera_poses = camera_poses.iter().map(|c| c.scaled(scale)).collect();
    let points = points.iter().map(|p| rescale_point(p, scale)).collect();
    Ok(InitOutput {
        init: ScaledInit {
            scale,
            extrinsics,
            iteration_log: log,
        },
        camera_poses,
        points,
        converged,
    })
}

pub fn rescale_point(p: &VisualPoint, s: f64) -> VisualPoint {
    VisualPoint {
        point_id: p.point_id,
        position: p.position * s,
        covariance: p.covariance * (s * s),
    }
}
