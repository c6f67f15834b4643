//! Feature tracks, triangulation, reprojection-only bundle adjustment and
//! per-point covariance recovery.

use nalgebra::{DMatrix, Matrix2, Matrix3, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{skew, CameraIntrinsics, GeometryError, Se3, INTRINSICS_DIM};
use crate::solver::{self, BlockId, Manifold, Problem, ResidualBlock, SolverConfig, SolverError, SolverReport};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum VisualError {
    #[error("track {point_id}: parallax {angle_deg:.3}° below 0.5°")]
    InsufficientParallax { point_id: usize, angle_deg: f64 },
    #[error("track {point_id}: triangulated point behind camera {frame}")]
    NegativeDepth { point_id: usize, frame: usize },
    #[error("track {point_id}: {reason}")]
    InvalidTrack { point_id: usize, reason: String },
    #[error("track {point_id}: point-block Hessian is rank deficient")]
    RankDeficientPoint { point_id: usize },
    #[error("no usable tracks")]
    NoTracks,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Minimum ray angle accepted by [`triangulate`].
pub const MIN_PARALLAX_DEG: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub frame: usize,
    pub pixel: Vector2<f64>,
    /// Pixel noise covariance (px²).
    pub covariance: Matrix2<f64>,
}

impl Observation {
    pub fn isotropic(frame: usize, pixel: Vector2<f64>, sigma: f64) -> Self {
        Self {
            frame,
            pixel,
            covariance: Matrix2::identity() * (sigma * sigma),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTrack {
    pub point_id: usize,
    pub observations: Vec<Observation>,
}

impl FeatureTrack {
    pub fn validate(&self) -> Result<(), VisualError> {
        let bad = |reason: String| VisualError::InvalidTrack {
            point_id: self.point_id,
            reason,
        };
        if self.observations.len() < 2 {
            return Err(bad(format!(
                "needs at least 2 observations, has {}",
                self.observations.len()
            )));
        }
        let mut frames: Vec<usize> = self.observations.iter().map(|o| o.frame).collect();
        frames.sort_unstable();
        if frames.windows(2).any(|w| w[0] == w[1]) {
            return Err(bad("repeated frame index".into()));
        }
        for o in &self.observations {
            if !is_spd2(&o.covariance) {
                return Err(bad(format!("covariance in frame {} is not SPD", o.frame)));
            }
        }
        Ok(())
    }
}

pub(crate) fn is_spd2(m: &Matrix2<f64>) -> bool {
    (m[(0, 1)] - m[(1, 0)]).abs() <= 1e-12 * m.amax().max(1.0)
        && m[(0, 0)] > 0.0
        && m.determinant() > 0.0
        && m.iter().all(|v| v.is_finite())
}

/// Triangulated point in the first camera frame with its covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisualPoint {
    pub point_id: usize,
    pub position: Vector3<f64>,
    pub covariance: Matrix3<f64>,
}

/// Midpoint (linear least-squares) triangulation of the track's rays.
pub fn triangulate(
    track: &FeatureTrack,
    poses: &[Se3],
    intrinsics: &CameraIntrinsics,
) -> Result<Vector3<f64>, VisualError> {
    if track.observations.len() < 2 {
        return Err(VisualError::InvalidTrack {
            point_id: track.point_id,
            reason: "needs at least 2 observations".into(),
        });
    }
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    let mut dirs = Vec::with_capacity(track.observations.len());
    for o in &track.observations {
        let pose = poses.get(o.frame).ok_or_else(|| VisualError::InvalidTrack {
            point_id: track.point_id,
            reason: format!("frame {} out of range", o.frame),
        })?;
        let f = intrinsics.unproject(&o.pixel)?;
        let rt = pose.rotation.inverse();
        let center = -(rt * pose.translation);
        let d = rt * f;
        let proj = Matrix3::identity() - d * d.transpose();
        a += proj;
        b += proj * center;
        dirs.push(d);
    }
    let mut max_angle: f64 = 0.0;
    for i in 0..dirs.len() {
        for j in i + 1..dirs.len() {
            max_angle = max_angle.max(dirs[i].angle(&dirs[j]));
        }
    }
    let angle_deg = max_angle.to_degrees();
    if angle_deg < MIN_PARALLAX_DEG {
        return Err(VisualError::InsufficientParallax {
            point_id: track.point_id,
            angle_deg,
        });
    }
    let x = a
        .cholesky()
        .map(|c| c.solve(&b))
        .ok_or(VisualError::InsufficientParallax {
            point_id: track.point_id,
            angle_deg,
        })?;
    for o in &track.observations {
        if poses[o.frame].transform(&x).z <= 0.0 {
            return Err(VisualError::NegativeDepth {
                point_id: track.point_id,
                frame: o.frame,
            });
        }
    }
    Ok(x)
}

/// Whitening `W` with `WᵀW = Σ⁻¹`.
pub(crate) fn sqrt_information(cov: &Matrix2<f64>) -> Matrix2<f64> {
    let info = cov.try_inverse().expect("SPD covariance");
    let l = info.cholesky().expect("SPD information").l();
    l.transpose()
}

/// Whitened reprojection residual `W (x − π(R p + t, D))` over the
/// parameter blocks `[intrinsics, camera pose, point]`.
pub struct ReprojectionResidual {
    ids: [BlockId; 3],
    pixel: Vector2<f64>,
    sqrt_info: Matrix2<f64>,
    base: CameraIntrinsics,
}

impl ReprojectionResidual {
    pub fn new(
        intrinsics_block: BlockId,
        pose_block: BlockId,
        point_block: BlockId,
        obs: &Observation,
        base: CameraIntrinsics,
    ) -> Self {
        Self {
            ids: [intrinsics_block, pose_block, point_block],
            pixel: obs.pixel,
            sqrt_info: sqrt_information(&obs.covariance),
            base,
        }
    }
}

impl ResidualBlock for ReprojectionResidual {
    fn num_residuals(&self) -> usize {
        2
    }

    fn parameter_blocks(&self) -> &[BlockId] {
        &self.ids
    }

    fn evaluate(&self, p: &[&[f64]], r: &mut [f64], jac: Option<&mut [DMatrix<f64>]>) -> bool {
        let d = self.base.with_params(p[0]);
        let pose = solver::se3_from_slice(p[1]);
        let x = Vector3::new(p[2][0], p[2][1], p[2][2]);
        let rx = pose.rotation * x;
        let pc = rx + pose.translation;
        let Ok((pix, j_pt, j_intr)) = d.project_with_jacobians(&pc) else {
            return false;
        };
        let e = self.sqrt_info * (self.pixel - pix);
        r[0] = e.x;
        r[1] = e.y;
        if let Some(j) = jac {
            let w = -self.sqrt_info;
            let wi: SMatrix<f64, 2, INTRINSICS_DIM> = w * j_intr;
            j[0].copy_from(&wi);
            let wp = w * j_pt;
            let rot = pose.rotation_matrix();
            let jw = wp * (-skew(&rx));
            j[1].view_mut((0, 0), (2, 3)).copy_from(&jw);
            j[1].view_mut((0, 3), (2, 3)).copy_from(&wp);
            j[2].copy_from(&(wp * rot));
        }
        true
    }
}

/// Soft gauge constraint pinning `‖t‖` of one pose to its initial value,
/// removing the monocular scale freedom without biasing the optimum.
pub struct TranslationNormPrior {
    ids: [BlockId; 1],
    norm: f64,
    weight: f64,
}

impl TranslationNormPrior {
    pub fn new(pose: BlockId, norm: f64, weight: f64) -> Self {
        Self {
            ids: [pose],
            norm,
            weight,
        }
    }
}

impl ResidualBlock for TranslationNormPrior {
    fn num_residuals(&self) -> usize {
        1
    }

    fn parameter_blocks(&self) -> &[BlockId] {
        &self.ids
    }

    fn evaluate(&self, p: &[&[f64]], r: &mut [f64], jac: Option<&mut [DMatrix<f64>]>) -> bool {
        let t = Vector3::new(p[0][4], p[0][5], p[0][6]);
        let n = t.norm();
        if n == 0.0 {
            return false;
        }
        r[0] = self.weight * (n - self.norm);
        if let Some(j) = jac {
            j[0].fill(0.0);
            for k in 0..3 {
                j[0][(0, 3 + k)] = self.weight * t[k] / n;
            }
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IntrinsicsMode {
    Fixed,
    #[default]
    Free,
    /// One focal length shared by both axes.
    SharedFocal,
    /// Focal lengths and principal point free, distortion held.
    FixedDistortion,
}

impl IntrinsicsMode {
    /// Adds the intrinsics block to `problem` according to the mode.
    pub fn add_block(&self, problem: &mut Problem, d: &CameraIntrinsics) -> BlockId {
        let mut params = d.to_params().to_vec();
        let manifold = match self {
            IntrinsicsMode::Fixed | IntrinsicsMode::Free => Manifold::Euclidean(INTRINSICS_DIM),
            IntrinsicsMode::SharedFocal => {
                let f = 0.5 * (params[0] + params[1]);
                params[0] = f;
                params[1] = f;
                let mut basis = DMatrix::zeros(INTRINSICS_DIM, INTRINSICS_DIM - 1);
                basis[(0, 0)] = 1.0;
                basis[(1, 0)] = 1.0;
                for k in 2..INTRINSICS_DIM {
                    basis[(k, k - 1)] = 1.0;
                }
                Manifold::Subspace { basis }
            }
            IntrinsicsMode::FixedDistortion => {
                let mut basis = DMatrix::zeros(INTRINSICS_DIM, 4);
                for k in 0..4 {
                    basis[(k, k)] = 1.0;
                }
                Manifold::Subspace { basis }
            }
        };
        let id = problem.add_block(params, manifold);
        if *self == IntrinsicsMode::Fixed {
            problem.set_constant(id, true);
        }
        id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMode {
    /// Inverse of the point's own 3×3 Hessian block, cameras held fixed.
    #[default]
    PointBlock,
    /// Full marginal after eliminating the camera parameters.
    Marginal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisualBaConfig {
    pub intrinsics: IntrinsicsMode,
    pub covariance: CovarianceMode,
    /// Pixel noise (px) assumed for observations that carry none.
    pub default_pixel_sigma: f64,
    pub solver: SolverConfig,
}

impl Default for VisualBaConfig {
    fn default() -> Self {
        Self {
            intrinsics: IntrinsicsMode::Free,
            covariance: CovarianceMode::PointBlock,
            default_pixel_sigma: 1.0,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedTrack {
    pub point_id: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualBaResult {
    pub poses: Vec<Se3>,
    pub intrinsics: CameraIntrinsics,
    pub points: Vec<VisualPoint>,
    pub dropped: Vec<DroppedTrack>,
    pub initial_rms_px: f64,
    pub final_rms_px: f64,
    pub report: SolverReport,
}

/// Triangulates every track, returning `(track index, point)` pairs and
/// the tracks that could not be initialized.
pub fn triangulate_tracks(
    tracks: &[FeatureTrack],
    poses: &[Se3],
    intrinsics: &CameraIntrinsics,
) -> (Vec<(usize, Vector3<f64>)>, Vec<DroppedTrack>) {
    let mut ok = Vec::new();
    let mut dropped = Vec::new();
    for (k, t) in tracks.iter().enumerate() {
        match t.validate().and_then(|_| triangulate(t, poses, intrinsics)) {
            Ok(p) => ok.push((k, p)),
            Err(e) => dropped.push(DroppedTrack {
                point_id: t.point_id,
                reason: e.to_string(),
            }),
        }
    }
    (ok, dropped)
}

/// Per-axis RMS of raw pixel reprojection errors.
pub fn reprojection_rms(tracks: &[&FeatureTrack], points: &[Vector3<f64>], poses: &[Se3], d: &CameraIntrinsics) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (t, x) in tracks.iter().zip(points) {
        for o in &t.observations {
            if let Ok(pix) = d.project(&poses[o.frame].transform(x)) {
                sum += (o.pixel - pix).norm_squared();
                n += 2;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

/// Reprojection-only bundle adjustment. `initial_points[k]` is the starting
/// position for `tracks[k]`. Pose 0 is held fixed and the norm of the
/// longest baseline is pinned to remove the scale gauge.
pub fn bundle_adjust_visual(
    tracks: &[FeatureTrack],
    poses: &[Se3],
    initial_points: &[Vector3<f64>],
    intrinsics: &CameraIntrinsics,
    cfg: &VisualBaConfig,
) -> Result<VisualBaResult, VisualError> {
    assert_eq!(tracks.len(), initial_points.len());
    if tracks.is_empty() {
        return Err(VisualError::NoTracks);
    }
    let track_refs: Vec<&FeatureTrack> = tracks.iter().collect();
    let initial_rms_px = reprojection_rms(&track_refs, initial_points, poses, intrinsics);

    let mut problem = Problem::new();
    let intr_block = cfg.intrinsics.add_block(&mut problem, intrinsics);
    let pose_blocks: Vec<BlockId> = poses.iter().map(|p| problem.add_se3(p)).collect();
    problem.set_constant(pose_blocks[0], true);
    let mut point_blocks = Vec::with_capacity(tracks.len());
    for (t, x) in tracks.iter().zip(initial_points) {
        let pb = problem.add_block(x.as_slice().to_vec(), Manifold::Euclidean(3));
        problem.set_eliminable(pb);
        point_blocks.push(pb);
        for o in &t.observations {
            problem.add_residual(Box::new(ReprojectionResidual::new(
                intr_block,
                pose_blocks[o.frame],
                pb,
                o,
                *intrinsics,
            )));
        }
    }
    if let Some((k, norm)) = scale_anchor(poses) {
        problem.add_residual(Box::new(TranslationNormPrior {
            ids: [pose_blocks[k]],
            norm,
            weight: 1e3,
        }));
    }

    let report = solver::solve_lm(&mut problem, &cfg.solver)?;

    let intrinsics_out = intrinsics.with_params(problem.values(intr_block));
    let poses_out: Vec<Se3> = pose_blocks.iter().map(|&b| problem.se3(b)).collect();
    let positions: Vec<Vector3<f64>> = point_blocks
        .iter()
        .map(|&b| Vector3::from_column_slice(problem.values(b)))
        .collect();
    let final_rms_px = reprojection_rms(&track_refs, &positions, &poses_out, &intrinsics_out);

    let covs = point_covariances(
        tracks,
        &positions,
        &poses_out,
        &intrinsics_out,
        cfg.covariance,
        cfg.intrinsics,
    );
    let mut points = Vec::with_capacity(tracks.len());
    let mut dropped = Vec::new();
    for ((t, x), c) in tracks.iter().zip(&positions).zip(covs) {
        match c {
            Ok(covariance) => points.push(VisualPoint {
                point_id: t.point_id,
                position: *x,
                covariance,
            }),
            Err(e) => dropped.push(DroppedTrack {
                point_id: t.point_id,
                reason: e.to_string(),
            }),
        }
    }
    Ok(VisualBaResult {
        poses: poses_out,
        intrinsics: intrinsics_out,
        points,
        dropped,
        initial_rms_px,
        final_rms_px,
        report,
    })
}

/// Pose with the longest translation, whose norm fixes the visual scale.
fn scale_anchor(poses: &[Se3]) -> Option<(usize, f64)> {
    poses
        .iter()
        .enumerate()
        .skip(1)
        .map(|(k, p)| (k, p.translation.norm()))
        .filter(|(_, n)| *n > 1e-9)
        .max_by(|a, b| a.1.total_cmp(&b.1))
}

struct ObsJacobians {
    frame: usize,
    info: Matrix2<f64>,
    j_point: SMatrix<f64, 2, 3>,
    j_pose: SMatrix<f64, 2, 6>,
    j_intr: SMatrix<f64, 2, INTRINSICS_DIM>,
}

fn observation_jacobians(
    track: &FeatureTrack,
    x: &Vector3<f64>,
    poses: &[Se3],
    d: &CameraIntrinsics,
) -> Vec<ObsJacobians> {
    track
        .observations
        .iter()
        .filter_map(|o| {
            let pose = &poses[o.frame];
            let rx = pose.rotation * x;
            let (_, jp, ji) = d.project_with_jacobians(&(rx + pose.translation)).ok()?;
            let mut j_pose = SMatrix::<f64, 2, 6>::zeros();
            j_pose.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jp * (-skew(&rx))));
            j_pose.fixed_view_mut::<2, 3>(0, 3).copy_from(&jp);
            Some(ObsJacobians {
                frame: o.frame,
                info: o.covariance.try_inverse()?,
                j_point: jp * pose.rotation_matrix(),
                j_pose,
                j_intr: ji,
            })
        })
        .collect()
}

fn invert_spd3(h: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let eig = h.symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min > 1e-12 * max.max(1e-300)) {
        return None;
    }
    let inv = h.cholesky()?.inverse();
    Some((inv + inv.transpose()) * 0.5)
}

/// Covariance of every point at the given solution.
pub fn point_covariances(
    tracks: &[FeatureTrack],
    points: &[Vector3<f64>],
    poses: &[Se3],
    d: &CameraIntrinsics,
    mode: CovarianceMode,
    intrinsics_mode: IntrinsicsMode,
) -> Vec<Result<Matrix3<f64>, VisualError>> {
    let per_point: Vec<Vec<ObsJacobians>> = tracks
        .iter()
        .zip(points)
        .map(|(t, x)| observation_jacobians(t, x, poses, d))
        .collect();
    let h_pp: Vec<Matrix3<f64>> = per_point
        .iter()
        .map(|obs| obs.iter().map(|o| o.j_point.transpose() * o.info * o.j_point).sum())
        .collect();
    let rank_deficient = |k: usize| VisualError::RankDeficientPoint {
        point_id: tracks[k].point_id,
    };
    match mode {
        CovarianceMode::PointBlock => h_pp
            .iter()
            .enumerate()
            .map(|(k, h)| invert_spd3(h).ok_or_else(|| rank_deficient(k)))
            .collect(),
        CovarianceMode::Marginal => marginal_covariances(&per_point, &h_pp, poses, intrinsics_mode)
            .into_iter()
            .enumerate()
            .map(|(k, c)| c.ok_or_else(|| rank_deficient(k)))
            .collect(),
    }
}

fn marginal_covariances(
    per_point: &[Vec<ObsJacobians>],
    h_pp: &[Matrix3<f64>],
    poses: &[Se3],
    intrinsics_mode: IntrinsicsMode,
) -> Vec<Option<Matrix3<f64>>> {
    // camera parameters: poses 1..n (6 each), then intrinsics when free
    let n_pose = poses.len().saturating_sub(1) * 6;
    let intr_free = intrinsics_mode != IntrinsicsMode::Fixed;
    let nc = n_pose + if intr_free { INTRINSICS_DIM } else { 0 };
    let cam_jac = |o: &ObsJacobians| -> DMatrix<f64> {
        let mut j = DMatrix::zeros(2, nc);
        if o.frame > 0 {
            j.view_mut((0, (o.frame - 1) * 6), (2, 6)).copy_from(&o.j_pose);
        }
        if intr_free {
            j.view_mut((0, n_pose), (2, INTRINSICS_DIM)).copy_from(&o.j_intr);
        }
        j
    };
    let mut h_cc = DMatrix::zeros(nc, nc);
    let mut h_cp: Vec<DMatrix<f64>> = Vec::with_capacity(per_point.len());
    let hpp_inv: Vec<Option<Matrix3<f64>>> = h_pp.iter().map(invert_spd3).collect();
    for obs in per_point {
        let mut hcp = DMatrix::zeros(nc, 3);
        for o in obs {
            let jc = cam_jac(o);
            let info = DMatrix::from_column_slice(2, 2, o.info.as_slice());
            let jp = DMatrix::from_column_slice(2, 3, o.j_point.as_slice());
            h_cc += jc.transpose() * &info * &jc;
            hcp += jc.transpose() * &info * jp;
        }
        h_cp.push(hcp);
    }
    // the scale gauge is pinned the same way the optimizer pins it
    if let Some((k, _)) = scale_anchor(poses) {
        let t = poses[k].translation.normalize();
        let mut j = DMatrix::zeros(1, nc);
        for a in 0..3 {
            j[(0, (k - 1) * 6 + 3 + a)] = 1e3 * t[a];
        }
        h_cc += j.transpose() * j;
    }
    let mut s = h_cc.clone();
    for (hcp, inv) in h_cp.iter().zip(&hpp_inv) {
        if let Some(inv) = inv {
            let m = DMatrix::from_column_slice(3, 3, inv.as_slice());
            s -= hcp * &m * hcp.transpose();
        }
    }
    let s = (&s + s.transpose()) * 0.5;
    let Some(s_inv) = s.cholesky().map(|c| c.inverse()) else {
        return vec![None; per_point.len()];
    };
    h_cp.iter()
        .zip(&hpp_inv)
        .map(|(hcp, inv)| {
            let inv = (*inv)?;
            let m = DMatrix::from_column_slice(3, 3, inv.as_slice());
            let a = &m * hcp.transpose();
            let full = &m + &a * &s_inv * a.transpose();
            let c = Matrix3::from_column_slice(full.as_slice());
            Some((c + c.transpose()) * 0.5)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation_angle_between;
    use crate::solver::check_jacobian;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(505.0, 500.0, 323.0, 236.0, -0.09, 0.015, 640, 480).unwrap()
    }

    fn rig(n: usize) -> Vec<Se3> {
        (0..n)
            .map(|i| {
                if i == 0 {
                    return Se3::identity();
                }
                let a = i as f64;
                Se3::from_axis_angle(
                    Vector3::new(0.02 * a.sin(), 0.05 * (0.7 * a).cos() - 0.05, 0.01 * a),
                    Vector3::new(-0.3 * a, 0.05 * a.sin(), 0.1 * (1.3 * a).cos() - 0.1),
                )
            })
            .collect()
    }

    fn scene(rng: &mut ChaCha8Rng, n_points: usize) -> Vec<Vector3<f64>> {
        (0..n_points)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(5.0..9.0),
                )
            })
            .collect()
    }

    fn observe(
        points: &[Vector3<f64>],
        poses: &[Se3],
        d: &CameraIntrinsics,
        sigma: f64,
        rng: &mut ChaCha8Rng,
    ) -> Vec<FeatureTrack> {
        let noise = Normal::new(0.0, sigma.max(1e-300)).unwrap();
        points
            .iter()
            .enumerate()
            .map(|(k, x)| FeatureTrack {
                point_id: k,
                observations: poses
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let mut pix = d.project(&p.transform(x)).unwrap();
                        if sigma > 0.0 {
                            pix += Vector2::new(noise.sample(rng), noise.sample(rng));
                        }
                        Observation::isotropic(i, pix, sigma.max(1.0))
                    })
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn triangulation_recovers_known_point() {
        let d = camera();
        let poses = vec![
            Se3::identity(),
            Se3::from_axis_angle(Vector3::zeros(), Vector3::new(-1.0, 0.0, 0.0)),
        ];
        let x = Vector3::new(0.4, -0.3, 6.0);
        let track = FeatureTrack {
            point_id: 0,
            observations: poses
                .iter()
                .enumerate()
                .map(|(i, p)| Observation::isotropic(i, d.project(&p.transform(&x)).unwrap(), 1.0))
                .collect(),
        };
        let est = triangulate(&track, &poses, &d).unwrap();
        assert!((est - x).norm() < 1e-6);
    }

    #[test]
    fn identical_views_have_no_parallax() {
        let d = camera();
        let poses = vec![Se3::identity(), Se3::identity()];
        let obs = Observation::isotropic(0, Vector2::new(300.0, 200.0), 1.0);
        let track = FeatureTrack {
            point_id: 3,
            observations: vec![obs, Observation { frame: 1, ..obs }],
        };
        assert!(matches!(
            triangulate(&track, &poses, &d),
            Err(VisualError::InsufficientParallax { point_id: 3, .. })
        ));
    }

    #[test]
    fn point_behind_camera_is_rejected() {
        let d = camera();
        // second camera sits beyond the point looking the same way
        let poses = vec![
            Se3::identity(),
            Se3::from_axis_angle(Vector3::zeros(), Vector3::new(-1.0, 0.0, -10.0)),
        ];
        let x = Vector3::new(0.0, 0.0, 5.0);
        let pix0 = d.project(&x).unwrap();
        let behind = poses[1].transform(&x);
        assert!(behind.z < 0.0);
        // the second ray mirrors the direction to the point
        let pix1 = d.project(&(-behind)).unwrap();
        let track = FeatureTrack {
            point_id: 1,
            observations: vec![
                Observation::isotropic(0, pix0, 1.0),
                Observation::isotropic(1, pix1, 1.0),
            ],
        };
        assert!(matches!(
            triangulate(&track, &poses, &d),
            Err(VisualError::NegativeDepth { .. })
        ));
    }

    #[test]
    fn track_validation() {
        let one = FeatureTrack {
            point_id: 0,
            observations: vec![Observation::isotropic(0, Vector2::new(1.0, 1.0), 1.0)],
        };
        assert!(one.validate().is_err());
        let mut bad_cov = Observation::isotropic(1, Vector2::new(1.0, 1.0), 1.0);
        bad_cov.covariance[(1, 1)] = -1.0;
        let t = FeatureTrack {
            point_id: 0,
            observations: vec![Observation::isotropic(0, Vector2::new(1.0, 1.0), 1.0), bad_cov],
        };
        assert!(t.validate().is_err());
    }

    #[test]
    fn reprojection_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = camera();
        for _ in 0..100 {
            let pose = Se3::from_axis_angle(
                Vector3::new(
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                ),
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-0.5..0.5),
                ),
            );
            let x = Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-1.5..1.5),
                rng.random_range(4.0..8.0),
            );
            let mut cov = Matrix2::new(0.8, 0.1, 0.1, 0.5);
            cov *= rng.random_range(0.5..2.0);
            let obs = Observation {
                frame: 0,
                pixel: Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
                covariance: cov,
            };
            let r = ReprojectionResidual::new(0, 1, 2, &obs, d);
            let params = vec![d.to_params().to_vec(), pose.to_array().to_vec(), x.as_slice().to_vec()];
            let dev = check_jacobian(
                &r,
                &params,
                &[Manifold::Euclidean(6), Manifold::Se3, Manifold::Euclidean(3)],
                1e-4,
            );
            assert!(dev < 1e-5, "{dev}");
        }
    }

    #[test]
    fn noiseless_ba_at_ground_truth_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = camera();
        let poses = rig(6);
        let pts = scene(&mut rng, 60);
        let tracks = observe(&pts, &poses, &d, 0.0, &mut rng);
        let res = bundle_adjust_visual(&tracks, &poses, &pts, &d, &VisualBaConfig::default()).unwrap();
        assert!(res.report.final_cost < 1e-20);
        for (p, x) in res.points.iter().zip(&pts) {
            assert!((p.position - x).norm() < 1e-8);
        }
        assert!(res.report.is_monotone());
    }

    #[test]
    fn noisy_ba_reaches_noise_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = camera();
        let poses = rig(8);
        let pts = scene(&mut rng, 250);
        let tracks = observe(&pts, &poses, &d, 0.5, &mut rng);
        let start: Vec<Vector3<f64>> = pts
            .iter()
            .map(|x| {
                x + Vector3::new(
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.1..0.1),
                )
            })
            .collect();
        let mut d0 = d;
        d0.fx *= 1.02;
        d0.fy *= 1.02;
        d0.k1 = 0.0;
        d0.k2 = 0.0;
        let res = bundle_adjust_visual(&tracks, &poses, &start, &d0, &VisualBaConfig::default()).unwrap();
        assert!(res.report.is_monotone());
        assert!(res.final_rms_px < res.initial_rms_px);
        assert!((res.final_rms_px - 0.5).abs() < 0.1, "rms {}", res.final_rms_px);
        assert!(rotation_angle_between(&res.poses[0].rotation, &poses[0].rotation) == 0.0);
    }

    #[test]
    fn more_observations_shrink_covariance() {
        let d = camera();
        let poses = rig(10);
        let x = Vector3::new(0.3, 0.2, 6.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let full = observe(&[x], &poses, &d, 0.0, &mut rng);
        let two = vec![FeatureTrack {
            point_id: 0,
            observations: full[0].observations[..2].to_vec(),
        }];
        let c10 = point_covariances(
            &full,
            &[x],
            &poses,
            &d,
            CovarianceMode::PointBlock,
            IntrinsicsMode::Fixed,
        );
        let c2 = point_covariances(
            &two,
            &[x],
            &poses,
            &d,
            CovarianceMode::PointBlock,
            IntrinsicsMode::Fixed,
        );
        let (c10, c2) = (c10[0].clone().unwrap(), c2[0].clone().unwrap());
        assert!(c2.trace() > c10.trace());
        assert!(c10.symmetric_eigen().eigenvalues.min() > 0.0);
    }

    #[test]
    fn covariance_scales_with_pixel_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = camera();
        let poses = rig(5);
        let pts = scene(&mut rng, 20);
        let tracks = observe(&pts, &poses, &d, 0.0, &mut rng);
        let doubled: Vec<FeatureTrack> = tracks
            .iter()
            .map(|t| FeatureTrack {
                point_id: t.point_id,
                observations: t
                    .observations
                    .iter()
                    .map(|o| Observation {
                        covariance: o.covariance * 4.0,
                        ..*o
                    })
                    .collect(),
            })
            .collect();
        let a = point_covariances(
            &tracks,
            &pts,
            &poses,
            &d,
            CovarianceMode::PointBlock,
            IntrinsicsMode::Free,
        );
        let b = point_covariances(
            &doubled,
            &pts,
            &poses,
            &d,
            CovarianceMode::PointBlock,
            IntrinsicsMode::Free,
        );
        for (a, b) in a.iter().zip(&b) {
            let (a, b) = (a.as_ref().unwrap(), b.as_ref().unwrap());
            assert!((b - a * 4.0).amax() <= 1e-6 * (a * 4.0).amax());
        }
    }

    #[test]
    fn marginal_covariance_dominates_point_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = camera();
        let poses = rig(6);
        let pts = scene(&mut rng, 40);
        let tracks = observe(&pts, &poses, &d, 0.0, &mut rng);
        let a = point_covariances(
            &tracks,
            &pts,
            &poses,
            &d,
            CovarianceMode::PointBlock,
            IntrinsicsMode::Free,
        );
        let b = point_covariances(
            &tracks,
            &pts,
            &poses,
            &d,
            CovarianceMode::Marginal,
            IntrinsicsMode::Free,
        );
        for (a, b) in a.iter().zip(&b) {
            let diff = b.as_ref().unwrap() - a.as_ref().unwrap();
            // marginal minus conditional is positive semidefinite
            assert!(diff.symmetric_eigen().eigenvalues.min() > -1e-9 * a.as_ref().unwrap().amax());
        }
    }
}
