//! End-to-end calibration: LiDAR odometry, visual bundle adjustment,
//! scale and extrinsic initialization, joint refinement.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cloud::{PointCloud, SpatialIndex};
use crate::geometry::{CameraIntrinsics, Se3};
use crate::init::{self, InitConfig, InitIteration, ScaledInit};
use crate::joint::{self, CalibrationProblem, DegeneracyReport, JointConfig, JointError, JointReport};
use crate::lidar_pose::{self, OdometryConfig};
use crate::metrics::{self, CalibrationError};
use crate::visual_ba::{self, FeatureTrack, VisualBaConfig, VisualPoint};

pub const CONFIG_FORMAT_VERSION: u32 = 1;
pub const REPORT_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub format_version: u32,
    pub odometry: OdometryConfig,
    pub visual: VisualBaConfig,
    pub init: InitConfig,
    pub joint: JointConfig,
    /// Grid stride of the intrinsic error metric.
    pub metric_stride: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            format_version: CONFIG_FORMAT_VERSION,
            odometry: OdometryConfig::default(),
            visual: VisualBaConfig::default(),
            init: InitConfig::default(),
            joint: JointConfig::default(),
            metric_stride: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: Se3,
    #[serde(default)]
    pub scale: Option<f64>,
}

/// Everything the pipeline consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationInputs {
    /// Scan `i` in LiDAR frame `i`.
    pub clouds: Vec<PointCloud>,
    pub tracks: Vec<FeatureTrack>,
    /// SfM camera poses, first camera to camera `i`, arbitrary scale.
    pub camera_poses: Vec<Se3>,
    pub initial_intrinsics: CameraIntrinsics,
    /// Camera to LiDAR.
    pub initial_extrinsics: Se3,
    /// Overrides the closed-form scale when set.
    pub initial_scale: Option<f64>,
    /// Skip odometry and use these LiDAR poses.
    pub lidar_poses: Option<Vec<Se3>>,
    pub ground_truth: Option<GroundTruth>,
}

impl CalibrationInputs {
    pub fn validate(&self) -> Result<(), String> {
        let n = self.clouds.len();
        let mut errs = Vec::new();
        if n < 2 {
            errs.push(format!("{n} frames; at least two are required"));
        }
        if self.camera_poses.len() != n {
            errs.push(format!("{} camera poses for {n} scans", self.camera_poses.len()));
        }
        if let Some(lp) = &self.lidar_poses {
            if lp.len() != n {
                errs.push(format!("{} LiDAR poses for {n} scans", lp.len()));
            }
        }
        for t in &self.tracks {
            if let Some(o) = t.observations.iter().find(|o| o.frame >= n) {
                errs.push(format!("track {} observes missing frame {}", t.point_id, o.frame));
            }
        }
        if let Some(s) = self.initial_scale {
            if !(s > 0.0) {
                errs.push(format!("initial scale {s} is not positive"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs.join("; "))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Odometry,
    Visual,
    Init,
    Joint,
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "odometry" => Ok(Stage::Odometry),
            "visual" => Ok(Stage::Visual),
            "init" => Ok(Stage::Init),
            "joint" => Ok(Stage::Joint),
            _ => Err(format!("unknown stage `{s}` (odometry, visual, init, joint)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    NotConverged,
    Degenerate,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdometryReport {
    pub from_input: bool,
    pub cost: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualReport {
    pub intrinsics: CameraIntrinsics,
    pub points: usize,
    pub dropped_tracks: usize,
    pub initial_rms_px: f64,
    pub final_rms_px: f64,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitReport {
    /// Closed-form estimate, or the supplied override.
    pub initial_scale: f64,
    pub closed_form_residual_rms: Option<f64>,
    pub scale: f64,
    pub extrinsics: Se3,
    pub iterations: Vec<InitIteration>,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub intrinsics: CameraIntrinsics,
    /// Camera to LiDAR.
    pub extrinsics: Se3,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub initial: CalibrationError,
    /// Intrinsics from visual BA, extrinsics from the init stage.
    pub visual_only: Option<CalibrationError>,
    #[serde(rename = "final")]
    pub final_error: Option<CalibrationError>,
    pub scale_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub status: RunStatus,
    pub failed_stage: Option<Stage>,
    pub error: Option<String>,
    pub config: PipelineConfig,
    pub timings: Vec<StageTiming>,
    pub odometry: Option<OdometryReport>,
    pub visual: Option<VisualReport>,
    pub init: Option<InitReport>,
    pub joint: Option<JointReport>,
    pub degeneracy: Option<DegeneracyReport>,
    pub result: Option<CalibrationResult>,
    pub evaluation: Option<Evaluation>,
}

impl RunReport {
    /// The report with wall-clock data removed, for comparing runs.
    pub fn without_timings(&self) -> RunReport {
        RunReport {
            timings: Vec::new(),
            ..self.clone()
        }
    }
}

/// Stage outputs needed to resume from a later stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Checkpoint {
    pub format_version: u32,
    pub lidar_poses: Option<Vec<Se3>>,
    /// Refined visual state in SfM units; `points[k]` belongs to `tracks[k]`.
    pub visual_poses: Option<Vec<Se3>>,
    pub visual_intrinsics: Option<CameraIntrinsics>,
    pub visual_points: Option<Vec<VisualPoint>>,
    pub visual_tracks: Option<Vec<FeatureTrack>>,
    pub init: Option<ScaledInit>,
    /// Metric camera poses and points after initialization.
    pub metric_poses: Option<Vec<Se3>>,
    pub metric_points: Option<Vec<VisualPoint>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRun {
    pub report: RunReport,
    pub checkpoint: Checkpoint,
}

struct Runner<'a> {
    inputs: &'a CalibrationInputs,
    cfg: &'a PipelineConfig,
    report: RunReport,
    ck: Checkpoint,
}

impl Runner<'_> {
    fn fail(&mut self, stage: Stage, status: RunStatus, msg: String) {
        self.report.status = status;
        self.report.failed_stage = Some(stage);
        self.report.error = Some(msg);
    }

    fn timed<T>(&mut self, stage: Stage, f: impl FnOnce(&mut Self) -> T) -> T {
        let t0 = Instant::now();
        let out = f(self);
        self.report.timings.push(StageTiming {
            stage,
            seconds: t0.elapsed().as_secs_f64(),
        });
        out
    }

    fn odometry(&mut self) -> bool {
        if let Some(lp) = &self.inputs.lidar_poses {
            self.ck.lidar_poses = Some(lp.clone());
            self.report.odometry = Some(OdometryReport {
                from_input: true,
                cost: Vec::new(),
                converged: true,
            });
            return true;
        }
        match lidar_pose::estimate_trajectory(&self.inputs.clouds, &self.cfg.odometry) {
            Ok(r) => {
                self.ck.lidar_poses = Some(r.trajectory.poses.clone());
                self.report.odometry = Some(OdometryReport {
                    from_input: false,
                    cost: r.cost,
                    converged: r.converged,
                });
                true
            }
            Err(e) => {
                self.fail(Stage::Odometry, RunStatus::Failed, e.to_string());
                false
            }
        }
    }

    fn visual(&mut self) -> bool {
        let inputs = self.inputs;
        let (tri, dropped) =
            visual_ba::triangulate_tracks(&inputs.tracks, &inputs.camera_poses, &inputs.initial_intrinsics);
        let tracks: Vec<FeatureTrack> = tri.iter().map(|(k, _)| inputs.tracks[*k].clone()).collect();
        let initial: Vec<_> = tri.iter().map(|(_, p)| *p).collect();
        let r = match visual_ba::bundle_adjust_visual(
            &tracks,
            &inputs.camera_poses,
            &initial,
            &inputs.initial_intrinsics,
            &self.cfg.visual,
        ) {
            Ok(r) => r,
            Err(e) => {
                self.fail(Stage::Visual, RunStatus::Failed, e.to_string());
                return false;
            }
        };
        let by_id: HashMap<usize, &FeatureTrack> = tracks.iter().map(|t| (t.point_id, t)).collect();
        let kept_tracks: Vec<FeatureTrack> = r.points.iter().map(|p| by_id[&p.point_id].clone()).collect();
        self.report.visual = Some(VisualReport {
            intrinsics: r.intrinsics,
            points: r.points.len(),
            dropped_tracks: dropped.len() + r.dropped.len(),
            initial_rms_px: r.initial_rms_px,
            final_rms_px: r.final_rms_px,
            initial_cost: r.report.initial_cost,
            final_cost: r.report.final_cost,
            converged: r.report.converged(),
        });
        self.ck.visual_poses = Some(r.poses);
        self.ck.visual_intrinsics = Some(r.intrinsics);
        self.ck.visual_points = Some(r.points);
        self.ck.visual_tracks = Some(kept_tracks);
        true
    }

    fn init(&mut self, indices: &[SpatialIndex]) -> bool {
        let (Some(lidar), Some(poses), Some(points)) =
            (&self.ck.lidar_poses, &self.ck.visual_poses, &self.ck.visual_points)
        else {
            self.fail(
                Stage::Init,
                RunStatus::Failed,
                "checkpoint lacks odometry or visual output".into(),
            );
            return false;
        };
        let (s0, rms) = match self.inputs.initial_scale {
            Some(s) => (s, None),
            None => match init::recover_scale(poses, lidar, &self.inputs.initial_extrinsics) {
                Ok(e) => (e.scale, Some(e.residual_rms)),
                Err(e) => {
                    self.fail(Stage::Init, RunStatus::Failed, e.to_string());
                    return false;
                }
            },
        };
        let start = ScaledInit::new(s0, self.inputs.initial_extrinsics);
        match init::refine_scale_extrinsics(points, poses, indices, lidar, &start, &self.cfg.init) {
            Ok(out) => {
                self.report.init = Some(InitReport {
                    initial_scale: s0,
                    closed_form_residual_rms: rms,
                    scale: out.init.scale,
                    extrinsics: out.init.extrinsics,
                    iterations: out.init.iteration_log.clone(),
                    converged: out.converged,
                });
                self.ck.init = Some(out.init);
                self.ck.metric_poses = Some(out.camera_poses);
                self.ck.metric_points = Some(out.points);
                true
            }
            Err(e) => {
                self.fail(Stage::Init, RunStatus::Failed, e.to_string());
                false
            }
        }
    }

    fn joint(&mut self, indices: &[SpatialIndex]) -> bool {
        let ck = &self.ck;
        let (Some(lidar), Some(intr), Some(tracks), Some(init), Some(poses), Some(points)) = (
            &ck.lidar_poses,
            &ck.visual_intrinsics,
            &ck.visual_tracks,
            &ck.init,
            &ck.metric_poses,
            &ck.metric_points,
        ) else {
            self.fail(Stage::Joint, RunStatus::Failed, "checkpoint lacks init output".into());
            return false;
        };
        let mut problem = match CalibrationProblem::new(
            *intr,
            init.extrinsics,
            poses.clone(),
            points.clone(),
            tracks.clone(),
            lidar.clone(),
            self.cfg.joint.alpha,
        ) {
            Ok(p) => p,
            Err(e) => {
                self.fail(Stage::Joint, RunStatus::Failed, e.to_string());
                return false;
            }
        };
        match joint::solve_joint(&mut problem, indices, &self.cfg.joint) {
            Ok(r) => {
                self.report.degeneracy = Some(r.degeneracy);
                self.report.result = Some(CalibrationResult {
                    intrinsics: problem.intrinsics,
                    extrinsics: problem.extrinsics,
                    scale: init.scale,
                });
                if !r.converged {
                    self.report.status = RunStatus::NotConverged;
                    self.report.failed_stage = Some(Stage::Joint);
                    self.report.error = Some(format!("joint solver stopped: {:?}", r.termination));
                }
                self.report.joint = Some(r);
                true
            }
            Err(JointError::DegenerateProblem(d)) => {
                self.report.degeneracy = Some(d);
                let msg = JointError::DegenerateProblem(d).to_string();
                self.fail(Stage::Joint, RunStatus::Degenerate, msg);
                false
            }
            Err(e) => {
                self.fail(Stage::Joint, RunStatus::Failed, e.to_string());
                false
            }
        }
    }

    fn evaluate(&mut self) {
        let Some(gt) = self.inputs.ground_truth else {
            return;
        };
        let stride = self.cfg.metric_stride;
        let err = |x: &Se3, d: &CameraIntrinsics| {
            metrics::calibration_error(x, &gt.extrinsics, d, &gt.intrinsics, stride).ok()
        };
        let Some(initial) = err(&self.inputs.initial_extrinsics, &self.inputs.initial_intrinsics) else {
            return;
        };
        let visual_only = match (&self.ck.visual_intrinsics, &self.ck.init) {
            (Some(d), Some(i)) => err(&i.extrinsics, d),
            _ => None,
        };
        let final_error = self.report.result.and_then(|r| err(&r.extrinsics, &r.intrinsics));
        let scale_error = match (gt.scale, &self.ck.init) {
            (Some(s), Some(i)) => Some((i.scale - s).abs() / s),
            _ => None,
        };
        self.report.evaluation = Some(Evaluation {
            initial,
            visual_only,
            final_error,
            scale_error,
        });
    }
}

/// Runs the stages from `from` on. Earlier stage outputs come from
/// `resume`, which must hold them. Stage failures are recorded in the
/// report rather than returned.
pub fn run_pipeline(
    inputs: &CalibrationInputs,
    cfg: &PipelineConfig,
    from: Stage,
    resume: Option<Checkpoint>,
) -> PipelineRun {
    let mut r = Runner {
        inputs,
        cfg,
        report: RunReport {
            format_version: REPORT_FORMAT_VERSION,
            status: RunStatus::Converged,
            failed_stage: None,
            error: None,
            config: cfg.clone(),
            timings: Vec::new(),
            odometry: None,
            visual: None,
            init: None,
            joint: None,
            degeneracy: None,
            result: None,
            evaluation: None,
        },
        ck: resume.unwrap_or_default(),
    };
    r.ck.format_version = CHECKPOINT_FORMAT_VERSION;
    if let Err(e) = inputs.validate() {
        r.fail(from, RunStatus::Failed, e);
        return PipelineRun {
            report: r.report,
            checkpoint: r.ck,
        };
    }
    let ok = (from > Stage::Odometry || r.timed(Stage::Odometry, Runner::odometry))
        && (from > Stage::Visual || r.timed(Stage::Visual, Runner::visual));
    if ok {
        let indices: Result<Vec<SpatialIndex>, _> =
            inputs.clouds.iter().map(|c| SpatialIndex::new(&c.points)).collect();
        match indices {
            Ok(indices) => {
                let _ = (from > Stage::Init || r.timed(Stage::Init, |r| r.init(&indices)))
                    && r.timed(Stage::Joint, |r| r.joint(&indices));
            }
            Err(e) => r.fail(Stage::Init, RunStatus::Failed, e.to_string()),
        }
    }
    r.evaluate();
    PipelineRun {
        report: r.report,
        checkpoint: r.ck,
    }
}

impl PartialOrd for Stage {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Stage {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (*self as u8).cmp(&(*other as u8))
    }
}

impl CalibrationInputs {
    /// Inputs as a real front-end would deliver them for a synthetic scene,
    /// with the ground truth block attached.
    pub fn from_synthetic(
        ds: &crate::synth::SyntheticDataset,
        initial_extrinsics: Se3,
        initial_scale: Option<f64>,
    ) -> Self {
        Self {
            clouds: ds.clouds.clone(),
            tracks: ds.tracks.clone(),
            camera_poses: ds.sfm_camera_poses.clone(),
            initial_intrinsics: ds.initial_intrinsics,
            initial_extrinsics,
            initial_scale,
            lidar_poses: None,
            ground_truth: Some(GroundTruth {
                intrinsics: ds.gt_intrinsics,
                extrinsics: ds.gt_extrinsics,
                scale: Some(ds.gt_scale),
            }),
        }
    }
}
