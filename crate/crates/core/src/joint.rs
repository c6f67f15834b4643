//! Plane-constrained bundle adjustment: visual points registered against
//! LiDAR planes jointly with their reprojection error, optimizing
//! intrinsics, extrinsics, camera poses and points.

use nalgebra::{DMatrix, Matrix2, Matrix3, SymmetricEigen, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{local_plane, PatchOutcome, PlaneConfig, PlanePatch, SpatialIndex};
use crate::geometry::{CameraIntrinsics, Se3};
use crate::solver::{
    self, BlockId, IterationRecord, Problem, ResidualBlock, SolverConfig, SolverError, TerminationReason,
};
use crate::visual_ba::{FeatureTrack, IntrinsicsMode, Observation, ReprojectionResidual, VisualPoint};

/// Variances below this make a pair unusable.
pub const MIN_VARIANCE: f64 = 1e-15;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum JointError {
    #[error("no valid point-to-plane pairs")]
    NoValidPairs,
    #[error("point {point_id} in frame {frame}: projected variance is zero")]
    ZeroVariance { point_id: usize, frame: usize },
    #[error("point {point_id} is behind camera {frame}")]
    NonPositiveDepth { point_id: usize, frame: usize },
    #[error("degenerate registration: λmin/λmax = {:.2e}, weak direction {:?}", .0.ratio, .0.weak_direction)]
    DegenerateProblem(DegeneracyReport),
    #[error("invalid problem: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointPlanePair {
    /// Index into [`CalibrationProblem::points`].
    pub point: usize,
    pub point_id: usize,
    pub frame: usize,
    pub patch: PlanePatch,
}

/// Full joint state. `points[k]` is observed by `tracks[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProblem {
    pub intrinsics: CameraIntrinsics,
    /// Camera to LiDAR.
    pub extrinsics: Se3,
    /// First camera to camera `i`, metric; pose 0 is the identity.
    pub camera_poses: Vec<Se3>,
    pub points: Vec<VisualPoint>,
    pub tracks: Vec<FeatureTrack>,
    pub pairs: Vec<PointPlanePair>,
    pub alpha: f64,
    /// First LiDAR frame to LiDAR frame `i`; held fixed.
    pub lidar_poses: Vec<Se3>,
}

impl CalibrationProblem {
    pub fn new(
        intrinsics: CameraIntrinsics,
        extrinsics: Se3,
        camera_poses: Vec<Se3>,
        points: Vec<VisualPoint>,
        tracks: Vec<FeatureTrack>,
        lidar_poses: Vec<Se3>,
        alpha: f64,
    ) -> Result<Self, JointError> {
        if points.len() != tracks.len() {
            return Err(JointError::InvalidInput(format!(
                "{} points but {} tracks",
                points.len(),
                tracks.len()
            )));
        }
        if camera_poses.len() != lidar_poses.len() {
            return Err(JointError::InvalidInput(format!(
                "{} camera poses but {} LiDAR poses",
                camera_poses.len(),
                lidar_poses.len()
            )));
        }
        if !(alpha >= 0.0) {
            return Err(JointError::InvalidInput(format!("alpha {alpha} is negative")));
        }
        Ok(Self {
            intrinsics,
            extrinsics,
            camera_poses,
            points,
            tracks,
            pairs: Vec::new(),
            alpha,
            lidar_poses,
        })
    }

    /// First camera frame to LiDAR frame `i`.
    pub fn lidar_from_camera0(&self, frame: usize) -> Se3 {
        self.extrinsics.compose(&self.camera_poses[frame])
    }

    pub fn num_observations(&self) -> usize {
        self.tracks.iter().map(|t| t.observations.len()).sum()
    }

    fn retain_points(&mut self, keep: &[bool]) {
        let mut remap = vec![usize::MAX; keep.len()];
        let mut n = 0;
        for (k, &kp) in keep.iter().enumerate() {
            if kp {
                remap[k] = n;
                n += 1;
            }
        }
        let mut k = 0;
        self.points.retain(|_| {
            k += 1;
            keep[k - 1]
        });
        let mut k = 0;
        self.tracks.retain(|_| {
            k += 1;
            keep[k - 1]
        });
        self.pairs.retain(|p| keep[p.point]);
        for p in &mut self.pairs {
            p.point = remap[p.point];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrespondenceConfig {
    /// Pairs farther than this from their plane are rejected (m).
    pub distance_threshold: f64,
    pub plane: PlaneConfig,
}

impl Default for CorrespondenceConfig {
    fn default() -> Self {
        Self {
            distance_threshold: 0.1,
            plane: PlaneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct CorrespondenceReport {
    pub valid: usize,
    /// Neighborhood failed the planarity test.
    pub ratio_rejected: usize,
    /// Too few LiDAR points near the query.
    pub sparse_rejected: usize,
    pub distance_rejected: usize,
    /// Points left without any valid pair.
    pub discarded_points: Vec<usize>,
}

enum PairOutcome {
    Valid(PlanePatch),
    Sparse,
    Ratio,
    Distance,
}

/// Matches every point against every LiDAR frame through the chain
/// `ᴸⁱ_C T = ᴸ_C T · ᶜTᵢ`.
pub fn build_correspondences(
    problem: &CalibrationProblem,
    indices: &[SpatialIndex],
    cfg: &CorrespondenceConfig,
) -> Result<(Vec<PointPlanePair>, CorrespondenceReport), JointError> {
    if indices.len() != problem.camera_poses.len() {
        return Err(JointError::InvalidInput(format!(
            "{} LiDAR scans for {} frames",
            indices.len(),
            problem.camera_poses.len()
        )));
    }
    let chains: Vec<Se3> = (0..indices.len()).map(|i| problem.lidar_from_camera0(i)).collect();
    let per_point: Vec<Vec<(usize, PairOutcome)>> = problem
        .points
        .par_iter()
        .map(|vp| {
            chains
                .iter()
                .zip(indices)
                .enumerate()
                .map(|(i, (chain, index))| {
                    let y = chain.transform(&vp.position);
                    let o = match local_plane(index, &y, &cfg.plane) {
                        PatchOutcome::Valid(p) if p.signed_distance(&y).abs() <= cfg.distance_threshold => {
                            PairOutcome::Valid(p)
                        }
                        PatchOutcome::Valid(_) => PairOutcome::Distance,
                        PatchOutcome::NotPlanar(_) => PairOutcome::Ratio,
                        PatchOutcome::Sparse => PairOutcome::Sparse,
                    };
                    (i, o)
                })
                .collect()
        })
        .collect();
    let mut pairs = Vec::new();
    let mut report = CorrespondenceReport::default();
    for (k, outcomes) in per_point.into_iter().enumerate() {
        let before = pairs.len();
        for (frame, o) in outcomes {
            match o {
                PairOutcome::Valid(patch) => pairs.push(PointPlanePair {
                    point: k,
                    point_id: problem.points[k].point_id,
                    frame,
                    patch,
                }),
                PairOutcome::Sparse => report.sparse_rejected += 1,
                PairOutcome::Ratio => report.ratio_rejected += 1,
                PairOutcome::Distance => report.distance_rejected += 1,
            }
        }
        if pairs.len() == before {
            report.discarded_points.push(problem.points[k].point_id);
        }
    }
    report.valid = pairs.len();
    if pairs.is_empty() {
        return Err(JointError::NoValidPairs);
    }
    Ok((pairs, report))
}

/// Signed distance `nᵀ(ᴸⁱp − q̄)` and its variance `nᵀ R Σ Rᵀ n` with
/// `R` the rotation of `ᴸⁱ_C T`.
pub fn point_to_plane_residual(pair: &PointPlanePair, problem: &CalibrationProblem) -> Result<(f64, f64), JointError> {
    let chain = problem.lidar_from_camera0(pair.frame);
    let vp = &problem.points[pair.point];
    let y = chain.transform(&vp.position);
    let m = chain.rotation.inverse() * pair.patch.normal;
    let var = m.dot(&(vp.covariance * m));
    if !(var >= MIN_VARIANCE) {
        return Err(JointError::ZeroVariance {
            point_id: pair.point_id,
            frame: pair.frame,
        });
    }
    Ok((pair.patch.signed_distance(&y), var))
}

/// `x − π(R p + t, D)` and the weight `Σ⁻¹`.
pub fn reprojection_residual(
    obs: &Observation,
    point: &VisualPoint,
    problem: &CalibrationProblem,
) -> Result<(Vector2<f64>, Matrix2<f64>), JointError> {
    let pc = problem.camera_poses[obs.frame].transform(&point.position);
    let pix = problem
        .intrinsics
        .project(&pc)
        .map_err(|_| JointError::NonPositiveDepth {
            point_id: point.point_id,
            frame: obs.frame,
        })?;
    let w = obs
        .covariance
        .try_inverse()
        .ok_or_else(|| JointError::InvalidInput("singular pixel covariance".into()))?;
    Ok((obs.pixel - pix, w))
}

/// `√α · nᵀ(X Cᵢ p − q̄) / σ` over `[extrinsics, camera pose, point]`.
/// `σ² = nᵀ R Σ Rᵀ n` is evaluated when the pair is built and held fixed
/// until the next rebuild, like the plane itself.
pub struct PointPlaneResidual {
    ids: [BlockId; 3],
    normal: Vector3<f64>,
    centroid: Vector3<f64>,
    scale: f64,
}

impl PointPlaneResidual {
    pub fn new(
        extrinsics: BlockId,
        pose: BlockId,
        point: BlockId,
        patch: &PlanePatch,
        variance: f64,
        alpha: f64,
    ) -> Self {
        Self {
            ids: [extrinsics, pose, point],
            normal: patch.normal,
            centroid: patch.centroid,
            scale: (alpha / variance).sqrt(),
        }
    }
}

impl ResidualBlock for PointPlaneResidual {
    fn num_residuals(&self) -> usize {
        1
    }

    fn parameter_blocks(&self) -> &[BlockId] {
        &self.ids
    }

    fn evaluate(&self, p: &[&[f64]], r: &mut [f64], jac: Option<&mut [DMatrix<f64>]>) -> bool {
        let x = solver::se3_from_slice(p[0]);
        let c = solver::se3_from_slice(p[1]);
        let pt = Vector3::new(p[2][0], p[2][1], p[2][2]);
        let n = &self.normal;
        let rx = x.rotation_matrix();
        let ri = c.rotation_matrix();
        let w = ri * pt;
        let rz = rx * (w + c.translation);
        let y = rz + x.translation;
        r[0] = self.scale * n.dot(&(y - self.centroid));
        if let Some(j) = jac {
            let k = rx.transpose() * n;
            let m = ri.transpose() * k;
            let de_wx = rz.cross(n);
            let de_wi = w.cross(&k);
            for q in 0..3 {
                j[0][(0, q)] = self.scale * de_wx[q];
                j[0][(0, 3 + q)] = self.scale * n[q];
                j[1][(0, q)] = self.scale * de_wi[q];
                j[1][(0, 3 + q)] = self.scale * k[q];
                j[2][(0, q)] = self.scale * m[q];
            }
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegeneracyReport {
    pub degenerate: bool,
    /// `λmin / λmax` of `Σ n nᵀ` with normals in camera coordinates.
    pub ratio: f64,
    /// Eigenvalues in descending order.
    pub eigenvalues: [f64; 3],
    /// Eigenvector of the smallest eigenvalue, in camera coordinates.
    pub weak_direction: Vector3<f64>,
}

/// Spectrum of the normal scatter matrix of the pairs, each normal rotated
/// from its LiDAR frame into the matching camera frame.
pub fn diagnose_degeneracy(pairs: &[PointPlanePair], extrinsics: &Se3, ratio_threshold: f64) -> DegeneracyReport {
    let rt = extrinsics.rotation.inverse();
    let mut m = Matrix3::zeros();
    for p in pairs {
        let n = rt * p.patch.normal;
        m += n * n.transpose();
    }
    let eig = SymmetricEigen::new(m);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let ev = idx.map(|i| eig.eigenvalues[i].max(0.0));
    let ratio = if ev[0] > 0.0 { ev[2] / ev[0] } else { 0.0 };
    let mut weak: Vector3<f64> = eig.eigenvectors.column(idx[2]).into_owned();
    // sign convention: largest component positive
    if weak.iter().fold(0.0f64, |a, v| if v.abs() > a.abs() { *v } else { a }) < 0.0 {
        weak = -weak;
    }
    DegeneracyReport {
        degenerate: ratio < ratio_threshold,
        ratio,
        eigenvalues: ev,
        weak_direction: weak,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointConfig {
    pub alpha: f64,
    /// Replace `alpha` by `|observations| / |pairs|` at the start.
    pub auto_balance: bool,
    /// Accepted LM steps between correspondence rebuilds; `None` freezes
    /// the first correspondence set.
    pub rebuild_every: Option<usize>,
    pub max_rebuilds: usize,
    pub degeneracy_ratio: f64,
    pub intrinsics: IntrinsicsMode,
    pub correspondence: CorrespondenceConfig,
    pub solver: SolverConfig,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            alpha: 4.0,
            auto_balance: false,
            rebuild_every: Some(3),
            max_rebuilds: 30,
            degeneracy_ratio: 1e-3,
            intrinsics: IntrinsicsMode::Free,
            correspondence: CorrespondenceConfig::default(),
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointReport {
    pub alpha: f64,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// `½ Σ e²/σ²` over pairs, without `α`.
    pub point_plane_cost: f64,
    /// `½ Σ rᵀ Σ⁻¹ r` over observations.
    pub reprojection_cost: f64,
    pub iterations: usize,
    pub accepted_steps: usize,
    pub rebuilds: usize,
    pub termination: TerminationReason,
    pub converged: bool,
    pub initial_correspondences: CorrespondenceReport,
    pub final_correspondences: CorrespondenceReport,
    pub retained_points: usize,
    pub pairs: usize,
    pub observations: usize,
    pub degeneracy: DegeneracyReport,
    /// One entry per LM iteration across all rounds.
    pub trace: Vec<IterationRecord>,
    /// Accepted-step costs of each round (each is non-increasing).
    pub round_costs: Vec<Vec<f64>>,
}

/// Builds the solver problem for the current state.
struct Assembled {
    problem: Problem,
    intr: BlockId,
    extr: BlockId,
    poses: Vec<BlockId>,
    points: Vec<BlockId>,
}

fn assemble(state: &CalibrationProblem, mode: IntrinsicsMode) -> Result<Assembled, JointError> {
    let mut problem = Problem::new();
    let intr = mode.add_block(&mut problem, &state.intrinsics);
    let extr = problem.add_se3(&state.extrinsics);
    let poses: Vec<BlockId> = state.camera_poses.iter().map(|p| problem.add_se3(p)).collect();
    problem.set_constant(poses[0], true);
    let mut points = Vec::with_capacity(state.points.len());
    for (vp, track) in state.points.iter().zip(&state.tracks) {
        let pb = problem.add_block(vp.position.as_slice().to_vec(), solver::Manifold::Euclidean(3));
        problem.set_eliminable(pb);
        points.push(pb);
        for o in &track.observations {
            problem.add_residual(Box::new(ReprojectionResidual::new(
                intr,
                poses[o.frame],
                pb,
                o,
                state.intrinsics,
            )));
        }
    }
    for pr in &state.pairs {
        let (_, variance) = point_to_plane_residual(pr, state)?;
        problem.add_residual(Box::new(PointPlaneResidual::new(
            extr,
            poses[pr.frame],
            points[pr.point],
            &pr.patch,
            variance,
            state.alpha,
        )));
    }
    Ok(Assembled {
        problem,
        intr,
        extr,
        poses,
        points,
    })
}

fn extract(a: &Assembled, state: &mut CalibrationProblem) {
    state.intrinsics = state.intrinsics.with_params(a.problem.values(a.intr));
    state.extrinsics = a.problem.se3(a.extr);
    for (p, &b) in state.camera_poses.iter_mut().zip(&a.poses) {
        *p = a.problem.se3(b);
    }
    for (vp, &b) in state.points.iter_mut().zip(&a.points) {
        vp.position = Vector3::from_column_slice(a.problem.values(b));
    }
}

/// `(E^P, E^V)` at the current state.
pub fn cost_terms(state: &CalibrationProblem) -> Result<(f64, f64), JointError> {
    let mut ep = 0.0;
    for pr in &state.pairs {
        let (e, var) = point_to_plane_residual(pr, state)?;
        ep += 0.5 * e * e / var;
    }
    let mut ev = 0.0;
    for (vp, t) in state.points.iter().zip(&state.tracks) {
        for o in &t.observations {
            let (r, w) = reprojection_residual(o, vp, state)?;
            ev += 0.5 * r.dot(&(w * r));
        }
    }
    Ok((ep, ev))
}

fn apply_correspondences(
    state: &mut CalibrationProblem,
    indices: &[SpatialIndex],
    cfg: &CorrespondenceConfig,
) -> Result<CorrespondenceReport, JointError> {
    let (pairs, report) = build_correspondences(state, indices, cfg)?;
    let mut keep = vec![false; state.points.len()];
    for p in &pairs {
        keep[p.point] = true;
    }
    state.pairs = pairs;
    state.retain_points(&keep);
    Ok(report)
}

/// Minimizes `α E^P + E^V`, rebuilding correspondences every
/// `rebuild_every` accepted steps. Fails with `DegenerateProblem` when the
/// initial pair normals do not span three directions.
pub fn solve_joint(
    state: &mut CalibrationProblem,
    indices: &[SpatialIndex],
    cfg: &JointConfig,
) -> Result<JointReport, JointError> {
    let initial_correspondences = apply_correspondences(state, indices, &cfg.correspondence)?;
    let degeneracy = diagnose_degeneracy(&state.pairs, &state.extrinsics, cfg.degeneracy_ratio);
    if degeneracy.degenerate {
        return Err(JointError::DegenerateProblem(degeneracy));
    }
    if cfg.auto_balance {
        state.alpha = state.num_observations() as f64 / state.pairs.len() as f64;
    } else {
        state.alpha = cfg.alpha;
    }
    let mut solver_cfg = cfg.solver.clone();
    solver_cfg.max_accepted_steps = cfg.rebuild_every;

    let mut trace = Vec::new();
    let mut round_costs = Vec::new();
    let mut iterations = 0;
    let mut accepted_steps = 0;
    let mut rebuilds = 0;
    let mut initial_cost = None;
    let (termination, final_cost) = loop {
        let mut asm = assemble(state, cfg.intrinsics)?;
        let report = solver::solve_lm(&mut asm.problem, &solver_cfg)?;
        extract(&asm, state);
        initial_cost.get_or_insert(report.initial_cost);
        iterations += report.iterations;
        accepted_steps += report.accepted_steps;
        round_costs.push(report.accepted_costs());
        trace.extend(report.trace.iter().copied());
        let more = report.termination == TerminationReason::MaxAcceptedSteps
            && iterations < cfg.solver.max_iterations
            && rebuilds < cfg.max_rebuilds;
        if !more {
            break (report.termination, report.final_cost);
        }
        apply_correspondences(state, indices, &cfg.correspondence)?;
        rebuilds += 1;
    };
    // retained points must still pair with some plane within the threshold
    let final_correspondences = apply_correspondences(state, indices, &cfg.correspondence)?;
    let (ep, ev) = cost_terms(state)?;
    let converged = !matches!(
        termination,
        TerminationReason::MaxIterations | TerminationReason::MaxAcceptedSteps
    );
    Ok(JointReport {
        alpha: state.alpha,
        initial_cost: initial_cost.unwrap_or(0.0),
        final_cost,
        point_plane_cost: ep,
        reprojection_cost: ev,
        iterations,
        accepted_steps,
        rebuilds,
        termination,
        converged,
        initial_correspondences,
        final_correspondences,
        retained_points: state.points.len(),
        pairs: state.pairs.len(),
        observations: state.num_observations(),
        degeneracy,
        trace,
        round_costs,
    })
}
