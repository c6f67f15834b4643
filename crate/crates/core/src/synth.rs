//! Synthetic planar scenes with exact ground truth: LiDAR scans, feature
//! tracks, scale-ambiguous camera poses and rendered images.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::geometry::{CameraIntrinsics, Se3};
use crate::visual_ba::{FeatureTrack, Observation};

pub const SCENE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("frame {frame}: {reason}")]
    InvisibleScene { frame: usize, reason: String },
}

/// Rectangle on the plane `n·x = n·center` (world frame, Z up).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneSpec {
    pub normal: [f64; 3],
    pub center: [f64; 3],
    /// Half sizes along the in-plane axes returned by [`PlaneSpec::axes`].
    pub half_extents: [f64; 2],
    /// Whether the camera front-end finds features on this plane.
    #[serde(default = "default_true")]
    pub textured: bool,
    #[serde(default = "default_color")]
    pub color: [u8; 3],
    /// Checkerboard cell size in meters, 0 for a solid color.
    #[serde(default)]
    pub checker_size: f64,
}

fn default_true() -> bool {
    true
}

fn default_color() -> [u8; 3] {
    [180, 180, 180]
}

impl PlaneSpec {
    pub fn normal(&self) -> Vector3<f64> {
        Vector3::from(self.normal).normalize()
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::from(self.center)
    }

    /// Plane offset `d` in `n·x = d`.
    pub fn offset(&self) -> f64 {
        self.normal().dot(&self.center())
    }

    /// In-plane unit axes: the first is horizontal whenever the plane is
    /// not horizontal itself.
    pub fn axes(&self) -> (Vector3<f64>, Vector3<f64>) {
        let n = self.normal();
        let up = Vector3::z();
        let u = if n.cross(&up).norm() > 1e-6 {
            up.cross(&n).normalize()
        } else {
            (Vector3::x() - n * n.x).normalize()
        };
        (u, n.cross(&u))
    }

    pub fn area(&self) -> f64 {
        4.0 * self.half_extents[0] * self.half_extents[1]
    }

    pub fn point_at(&self, a: f64, b: f64) -> Vector3<f64> {
        let (u, v) = self.axes();
        self.center() + u * a + v * b
    }

    /// Distance from `p` to the closest point of the rectangle.
    pub fn distance_to_rect(&self, p: &Vector3<f64>) -> f64 {
        let (u, v) = self.axes();
        let d = p - self.center();
        let a = d.dot(&u).clamp(-self.half_extents[0], self.half_extents[0]);
        let b = d.dot(&v).clamp(-self.half_extents[1], self.half_extents[1]);
        (p - self.point_at(a, b)).norm()
    }

    /// Texture color at a point of the plane.
    pub fn color_at(&self, p: &Vector3<f64>) -> [u8; 3] {
        if self.checker_size <= 0.0 {
            return self.color;
        }
        let (u, v) = self.axes();
        let d = p - self.center();
        let i = (d.dot(&u) / self.checker_size).floor() as i64;
        let j = (d.dot(&v) / self.checker_size).floor() as i64;
        if (i + j).rem_euclid(2) == 0 {
            self.color
        } else {
            self.color.map(|c| c / 3)
        }
    }

    /// Ray parameter of the hit inside the rectangle, if any.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let n = self.normal();
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = (self.offset() - n.dot(origin)) / denom;
        if t <= 0.0 {
            return None;
        }
        let hit = origin + dir * t;
        let (u, v) = self.axes();
        let d = hit - self.center();
        (d.dot(&u).abs() <= self.half_extents[0] && d.dot(&v).abs() <= self.half_extents[1]).then_some(t)
    }
}

/// Camera placement: optical axis from `eye` toward `target`, rolled about it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub eye: [f64; 3],
    pub target: [f64; 3],
    #[serde(default)]
    pub roll_deg: f64,
}

impl Waypoint {
    /// Camera-to-world transform (camera x right, y down, z forward).
    pub fn world_from_camera(&self) -> Se3 {
        let eye = Vector3::from(self.eye);
        let z = (Vector3::from(self.target) - eye).normalize();
        let up = Vector3::z();
        let x0 = if z.cross(&up).norm() > 1e-9 {
            z.cross(&up).normalize()
        } else {
            Vector3::x()
        };
        let y0 = z.cross(&x0);
        let (s, c) = self.roll_deg.to_radians().sin_cos();
        let x = x0 * c + y0 * s;
        let y = z.cross(&x);
        Se3::from_rotation_matrix(&Matrix3::from_columns(&[x, y, z]), eye)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Per-axis feature noise (px).
    pub pixel_sigma: f64,
    /// Per-axis LiDAR point noise (m).
    pub lidar_sigma: f64,
    pub outlier_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub format_version: u32,
    pub name: String,
    pub planes: Vec<PlaneSpec>,
    /// One waypoint per frame.
    pub trajectory: Vec<Waypoint>,
    pub gt_intrinsics: CameraIntrinsics,
    /// Camera to LiDAR.
    pub gt_extrinsics: Se3,
    /// Metric length of one SfM unit.
    pub gt_scale: f64,
    pub noise: NoiseSpec,
    /// LiDAR points per square meter of visible plane.
    pub lidar_density: f64,
    pub features_per_plane: usize,
    /// Minimum distance of a feature from every other plane and from the
    /// edges of its own (m).
    pub feature_margin: f64,
    /// Relative focal error of the front-end's intrinsics guess.
    pub initial_focal_error: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn n_frames(&self) -> usize {
        self.trajectory.len()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let mut errs = Vec::new();
        if self.format_version != SCENE_FORMAT_VERSION {
            errs.push(format!("unsupported format_version {}", self.format_version));
        }
        if self.planes.is_empty() {
            errs.push("at least one plane is required".into());
        }
        for (k, p) in self.planes.iter().enumerate() {
            let n = Vector3::from(p.normal);
            if !(n.norm() > 1e-9) || !n.iter().all(|v| v.is_finite()) {
                errs.push(format!("plane {k}: normal must be finite and nonzero"));
            }
            if !p.center.iter().all(|v| v.is_finite()) {
                errs.push(format!("plane {k}: center must be finite"));
            }
            if !(p.half_extents[0] > 0.0 && p.half_extents[1] > 0.0) {
                errs.push(format!("plane {k}: half extents must be positive"));
            }
            if !(p.checker_size >= 0.0) {
                errs.push(format!("plane {k}: checker_size must be non-negative"));
            }
        }
        if self.trajectory.len() < 2 {
            errs.push("at least two frames are required".into());
        }
        for (k, w) in self.trajectory.iter().enumerate() {
            let d = Vector3::from(w.target) - Vector3::from(w.eye);
            if !(d.norm() > 1e-9) {
                errs.push(format!("waypoint {k}: eye and target coincide"));
            }
        }
        if let Err(e) = self.gt_intrinsics.validate() {
            errs.push(format!("gt_intrinsics: {e}"));
        }
        if !(self.gt_scale > 0.0 && self.gt_scale.is_finite()) {
            errs.push("gt_scale must be positive".into());
        }
        if !(self.noise.pixel_sigma >= 0.0 && self.noise.pixel_sigma.is_finite()) {
            errs.push("pixel_sigma must be non-negative".into());
        }
        if !(self.noise.lidar_sigma >= 0.0 && self.noise.lidar_sigma.is_finite()) {
            errs.push("lidar_sigma must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.noise.outlier_fraction) {
            errs.push("outlier_fraction must lie in [0, 1)".into());
        }
        if !(self.lidar_density > 0.0) {
            errs.push("lidar_density must be positive".into());
        }
        if !(self.feature_margin >= 0.0) {
            errs.push("feature_margin must be non-negative".into());
        }
        if !(self.initial_focal_error > -1.0) {
            errs.push("initial_focal_error must exceed -1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(SynthError::InvalidSpec(errs.join("; ")))
        }
    }

    /// Intrinsics an SfM front-end would start from: centered principal
    /// point, no distortion, a single focal off by `initial_focal_error`.
    pub fn front_end_intrinsics(&self) -> CameraIntrinsics {
        let g = &self.gt_intrinsics;
        let f = 0.5 * (g.fx + g.fy) * (1.0 + self.initial_focal_error);
        CameraIntrinsics {
            fx: f,
            fy: f,
            cx: 0.5 * g.width as f64,
            cy: 0.5 * g.height as f64,
            k1: 0.0,
            k2: 0.0,
            width: g.width,
            height: g.height,
        }
    }
}

/// Ground truth behind one feature track.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackTruth {
    pub point_id: usize,
    /// Metric position in the first camera frame.
    pub position: Vector3<f64>,
    pub plane: usize,
    pub outlier: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub spec: SceneSpec,
    /// Scan `i` in LiDAR frame `i`.
    pub clouds: Vec<PointCloud>,
    /// Generating plane of every LiDAR point.
    pub cloud_planes: Vec<Vec<usize>>,
    pub tracks: Vec<FeatureTrack>,
    pub truth: Vec<TrackTruth>,
    /// First camera to camera `i`, metric.
    pub gt_camera_poses: Vec<Se3>,
    /// Same with translations divided by the scale, as SfM would report.
    pub sfm_camera_poses: Vec<Se3>,
    /// First LiDAR frame to LiDAR frame `i`.
    pub gt_lidar_poses: Vec<Se3>,
    pub gt_intrinsics: CameraIntrinsics,
    pub gt_extrinsics: Se3,
    pub gt_scale: f64,
    pub initial_intrinsics: CameraIntrinsics,
    /// Camera `i` to scene world, for rendering.
    pub world_from_camera: Vec<Se3>,
}

const MIN_TRACKS_PER_FRAME: usize = 8;
const MIN_PLANES_PER_SCAN: usize = 2;
const IMAGE_BORDER_PX: f64 = 2.0;
const MIN_DEPTH: f64 = 0.3;
/// Keeps outlier draws off the main stream so salting a scene leaves its
/// inliers untouched.
const OUTLIER_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// Generates a dataset. Identical specs give bit-identical output.
pub fn generate(spec: &SceneSpec) -> Result<SyntheticDataset, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut outlier_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ OUTLIER_STREAM);
    let n = spec.n_frames();
    let x = spec.gt_extrinsics;
    let world_from_camera: Vec<Se3> = spec.trajectory.iter().map(Waypoint::world_from_camera).collect();
    let camera0_from_world = world_from_camera[0].inverse();
    // frame 0 is the gauge, so it is the identity exactly rather than up to rounding
    let gt_camera_poses: Vec<Se3> = world_from_camera
        .iter()
        .enumerate()
        .map(|(i, w)| {
            if i == 0 {
                Se3::identity()
            } else {
                w.inverse().compose(&world_from_camera[0])
            }
        })
        .collect();
    let gt_lidar_poses: Vec<Se3> = gt_camera_poses
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i == 0 {
                Se3::identity()
            } else {
                x.compose(c).compose(&x.inverse())
            }
        })
        .collect();
    let sfm_camera_poses: Vec<Se3> = gt_camera_poses
        .iter()
        .map(|c| Se3::new(c.rotation, c.translation / spec.gt_scale))
        .collect();

    // LiDAR scans
    let lidar_noise = Normal::new(0.0, spec.noise.lidar_sigma).expect("validated sigma");
    let mut clouds = Vec::with_capacity(n);
    let mut cloud_planes = Vec::with_capacity(n);
    for (i, wc) in world_from_camera.iter().enumerate() {
        let world_from_lidar = wc.compose(&x.inverse());
        let lidar_from_world = world_from_lidar.inverse();
        let origin = world_from_lidar.translation;
        let mut pts = Vec::new();
        let mut ids = Vec::new();
        let mut hit = 0;
        for (k, plane) in spec.planes.iter().enumerate() {
            if plane.normal().dot(&(origin - plane.center())) <= 0.0 {
                continue;
            }
            let count = (spec.lidar_density * plane.area()).round() as usize;
            if count > 0 {
                hit += 1;
            }
            for _ in 0..count {
                let a = rng.random_range(-plane.half_extents[0]..=plane.half_extents[0]);
                let b = rng.random_range(-plane.half_extents[1]..=plane.half_extents[1]);
                let mut p = lidar_from_world.transform(&plane.point_at(a, b));
                if spec.noise.lidar_sigma > 0.0 {
                    p += Vector3::new(
                        lidar_noise.sample(&mut rng),
                        lidar_noise.sample(&mut rng),
                        lidar_noise.sample(&mut rng),
                    );
                }
                pts.push(p);
                ids.push(k);
            }
        }
        if hit < MIN_PLANES_PER_SCAN {
            return Err(SynthError::InvisibleScene {
                frame: i,
                reason: format!("LiDAR sees {hit} planes, needs {MIN_PLANES_PER_SCAN}"),
            });
        }
        clouds.push(PointCloud {
            points: pts,
            intensity: None,
        });
        cloud_planes.push(ids);
    }

    // feature tracks
    let d = spec.gt_intrinsics;
    let pixel_noise = Normal::new(0.0, spec.noise.pixel_sigma).expect("validated sigma");
    let obs_sigma = if spec.noise.pixel_sigma > 0.0 {
        spec.noise.pixel_sigma
    } else {
        1.0
    };
    let eyes: Vec<Vector3<f64>> = world_from_camera.iter().map(|w| w.translation).collect();
    let cameras_from_world: Vec<Se3> = world_from_camera.iter().map(Se3::inverse).collect();
    let mut tracks = Vec::new();
    let mut truth = Vec::new();
    let mut per_frame = vec![0usize; n];
    for (k, plane) in spec.planes.iter().enumerate() {
        if !plane.textured {
            continue;
        }
        let ha = plane.half_extents[0] - spec.feature_margin;
        let hb = plane.half_extents[1] - spec.feature_margin;
        if ha <= 0.0 || hb <= 0.0 {
            continue;
        }
        let mut placed = 0;
        let mut attempts = 0;
        while placed < spec.features_per_plane && attempts < spec.features_per_plane * 20 {
            attempts += 1;
            let a = rng.random_range(-ha..=ha);
            let b = rng.random_range(-hb..=hb);
            let on_plane = plane.point_at(a, b);
            let clear = spec
                .planes
                .iter()
                .enumerate()
                .all(|(o, other)| o == k || other.distance_to_rect(&on_plane) >= spec.feature_margin);
            if !clear {
                continue;
            }
            placed += 1;
            let outlier = outlier_rng.random::<f64>() < spec.noise.outlier_fraction;
            let mut pw = on_plane;
            if outlier {
                // displaced toward the first camera so it stays in view
                let n_dir = plane.normal();
                let side = if n_dir.dot(&(eyes[0] - on_plane)) >= 0.0 {
                    1.0
                } else {
                    -1.0
                };
                pw += n_dir * side * outlier_rng.random_range(0.5..0.8);
            }
            let mut observations = Vec::new();
            for (i, cw) in cameras_from_world.iter().enumerate() {
                // drawn for every frame so visibility does not shift the stream
                let noise = if spec.noise.pixel_sigma > 0.0 {
                    Vector2::new(pixel_noise.sample(&mut rng), pixel_noise.sample(&mut rng))
                } else {
                    Vector2::zeros()
                };
                if plane.normal().dot(&(eyes[i] - on_plane)) <= 0.0 {
                    continue;
                }
                let pc = cw.transform(&pw);
                if pc.z < MIN_DEPTH {
                    continue;
                }
                let Ok(pix) = d.project(&pc) else { continue };
                let inside = pix.x >= IMAGE_BORDER_PX
                    && pix.y >= IMAGE_BORDER_PX
                    && pix.x <= d.width as f64 - 1.0 - IMAGE_BORDER_PX
                    && pix.y <= d.height as f64 - 1.0 - IMAGE_BORDER_PX;
                if !inside {
                    continue;
                }
                observations.push(Observation::isotropic(i, pix + noise, obs_sigma));
            }
            if observations.len() < 2 {
                continue;
            }
            for o in &observations {
                per_frame[o.frame] += 1;
            }
            let point_id = tracks.len();
            tracks.push(FeatureTrack { point_id, observations });
            truth.push(TrackTruth {
                point_id,
                position: camera0_from_world.transform(&pw),
                plane: k,
                outlier,
            });
        }
    }
    if let Some((frame, &count)) = per_frame.iter().enumerate().find(|(_, c)| **c < MIN_TRACKS_PER_FRAME) {
        return Err(SynthError::InvisibleScene {
            frame,
            reason: format!("camera sees {count} tracked points, needs {MIN_TRACKS_PER_FRAME}"),
        });
    }

    Ok(SyntheticDataset {
        spec: spec.clone(),
        clouds,
        cloud_planes,
        tracks,
        truth,
        gt_camera_poses,
        sfm_camera_poses,
        gt_lidar_poses,
        gt_intrinsics: d,
        gt_extrinsics: x,
        gt_scale: spec.gt_scale,
        initial_intrinsics: spec.front_end_intrinsics(),
        world_from_camera,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Courtyard,
    Corridor,
    DegenerateZ,
}

impl std::str::FromStr for SceneKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "courtyard" => Ok(SceneKind::Courtyard),
            "corridor" => Ok(SceneKind::Corridor),
            "degenerate_z" => Ok(SceneKind::DegenerateZ),
            other => Err(format!("unknown scene kind `{other}`")),
        }
    }
}

fn plane(normal: [f64; 3], center: [f64; 3], half: [f64; 2], color: [u8; 3], textured: bool) -> PlaneSpec {
    PlaneSpec {
        normal,
        center,
        half_extents: half,
        textured,
        color,
        checker_size: 0.5,
    }
}

/// LiDAR axes: x forward, y left, z up; camera: x right, y down, z forward.
fn default_extrinsics() -> Se3 {
    let base = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
    let tweak = Se3::from_axis_angle(
        Vector3::new(2.0f64.to_radians(), -1.5f64.to_radians(), 3.0f64.to_radians()),
        Vector3::zeros(),
    );
    let r = tweak.rotation_matrix() * base;
    Se3::from_rotation_matrix(&r, Vector3::new(0.10, 0.05, -0.08))
}

fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(520.0, 515.0, 322.0, 238.0, -0.08, 0.012, 640, 480).expect("valid default")
}

pub fn default_scene(kind: SceneKind) -> SceneSpec {
    let (name, planes, trajectory) = match kind {
        SceneKind::Courtyard => ("courtyard", courtyard_planes(), courtyard_trajectory()),
        SceneKind::Corridor => ("corridor", corridor_planes(), corridor_trajectory()),
        SceneKind::DegenerateZ => ("degenerate_z", degenerate_planes(), degenerate_trajectory()),
    };
    SceneSpec {
        format_version: SCENE_FORMAT_VERSION,
        name: name.into(),
        planes,
        trajectory,
        gt_intrinsics: default_intrinsics(),
        gt_extrinsics: default_extrinsics(),
        gt_scale: 2.0,
        noise: NoiseSpec {
            pixel_sigma: 0.5,
            lidar_sigma: 0.005,
            outlier_fraction: 0.0,
        },
        lidar_density: 50.0,
        features_per_plane: 250,
        feature_margin: 0.8,
        initial_focal_error: 0.08,
        seed: 7,
    }
}

fn courtyard_planes() -> Vec<PlaneSpec> {
    vec![
        plane([0.0, 0.0, 1.0], [0.0, 4.8, 0.0], [4.2, 5.1], [150, 140, 120], true),
        plane([0.15, -1.0, 0.08], [0.0, 8.4, 1.8], [4.2, 1.8], [200, 60, 50], true),
        plane([1.0, 0.25, 0.06], [-3.3, 4.8, 1.8], [4.2, 1.8], [60, 170, 80], true),
        plane([-1.0, 0.3, -0.1], [3.48, 4.8, 1.8], [4.2, 1.8], [60, 90, 200], true),
    ]
}

fn courtyard_trajectory() -> Vec<Waypoint> {
    (0..8)
        .map(|k| {
            let t = k as f64;
            Waypoint {
                eye: [
                    -0.72 + 0.21 * t,
                    0.24 * (0.8 * t).sin(),
                    0.9 + 0.18 * (1.1 * t + 0.5).sin(),
                ],
                target: [1.5 * (0.6 * t - 1.5).sin(), 6.0, 0.72 + 0.48 * (0.9 * t).cos()],
                roll_deg: 30.0 * (1.3 * t + 0.4).sin(),
            }
        })
        .collect()
}

fn corridor_planes() -> Vec<PlaneSpec> {
    vec![
        plane([0.0, 0.0, 1.0], [0.0, 10.0, 0.0], [2.2, 12.0], [150, 140, 120], true),
        plane([1.0, 0.0, 0.0], [-2.2, 10.0, 1.6], [12.0, 1.6], [200, 60, 50], true),
        plane([-1.0, 0.0, 0.0], [2.2, 10.0, 1.6], [12.0, 1.6], [60, 90, 200], true),
        plane([0.0, -1.0, 0.0], [0.0, 22.5, 1.6], [2.2, 1.6], [90, 90, 90], false),
        plane([0.0, 1.0, 0.0], [0.0, -3.0, 1.6], [2.2, 1.6], [90, 90, 90], false),
    ]
}

fn corridor_trajectory() -> Vec<Waypoint> {
    (0..8)
        .map(|k| {
            let t = k as f64;
            Waypoint {
                eye: [0.6 * (0.9 * t).sin(), -1.0 + 0.4 * t, 1.3 + 0.2 * (1.3 * t).sin()],
                target: [4.0 * (0.7 * t - 1.0).sin(), 12.0, 0.8 + 0.5 * (t).cos()],
                roll_deg: 5.0 * (1.1 * t).sin(),
            }
        })
        .collect()
}

fn degenerate_planes() -> Vec<PlaneSpec> {
    vec![
        plane([0.0, 0.0, 1.0], [0.0, 10.0, 0.0], [2.5, 14.0], [150, 140, 120], true),
        plane([1.0, 0.0, 0.0], [-2.5, 10.0, 1.75], [14.0, 1.75], [200, 60, 50], true),
        plane([-1.0, 0.0, 0.0], [2.5, 10.0, 1.75], [14.0, 1.75], [60, 90, 200], true),
        plane([0.0, 0.0, -1.0], [0.0, 10.0, 3.5], [2.5, 14.0], [220, 220, 200], true),
        // untextured end walls give the LiDAR odometry its forward constraint
        plane([0.0, -1.0, 0.0], [0.0, 24.0, 1.75], [2.5, 1.75], [90, 90, 90], false),
        plane([0.0, 1.0, 0.0], [0.0, -4.0, 1.75], [2.5, 1.75], [90, 90, 90], false),
    ]
}

/// Optical axis stays along the corridor; excitation comes from roll and
/// lateral or vertical translation only.
fn degenerate_trajectory() -> Vec<Waypoint> {
    (0..8)
        .map(|k| {
            let t = k as f64;
            let eye = [0.5 * (0.9 * t).sin(), -1.0 + 0.4 * t, 1.6 + 0.3 * (1.2 * t).sin()];
            Waypoint {
                eye,
                target: [eye[0], eye[1] + 10.0, eye[2]],
                roll_deg: 12.0 * (1.1 * t + 0.3).sin(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    /// Row-major RGB triples.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; width as usize * height as usize * 3],
        }
    }

    pub fn get(&self, col: u32, row: u32) -> [u8; 3] {
        let k = (row as usize * self.width as usize + col as usize) * 3;
        [self.data[k], self.data[k + 1], self.data[k + 2]]
    }
}

/// Background for pixels whose ray misses every plane.
pub const SKY: [u8; 3] = [0, 0, 0];

/// Ray-traces the scene as seen from camera `frame` with the GT intrinsics;
/// pixel `(c, r)` samples the ray through pixel coordinates `(c, r)`.
pub fn render_image(dataset: &SyntheticDataset, frame: usize) -> RgbImage {
    let d = &dataset.gt_intrinsics;
    let wc = dataset.world_from_camera[frame];
    let planes = &dataset.spec.planes;
    let mut img = RgbImage::new(d.width, d.height);
    img.data
        .par_chunks_mut(d.width as usize * 3)
        .enumerate()
        .for_each(|(r, row)| {
            for c in 0..d.width as usize {
                let Ok(ray) = d.unproject(&Vector2::new(c as f64, r as f64)) else {
                    continue;
                };
                let dir = wc.rotation * ray;
                let best = planes
                    .iter()
                    .filter_map(|p| p.intersect(&wc.translation, &dir).map(|t| (t, p)))
                    .min_by(|a, b| a.0.total_cmp(&b.0));
                let color = best.map_or(SKY, |(t, p)| p.color_at(&(wc.translation + dir * t)));
                row[c * 3..c * 3 + 3].copy_from_slice(&color);
            }
        });
    img
}

/// `truth` moved by exactly `angle_deg` about a random axis and by exactly
/// `distance` along a random direction.
pub fn perturb_extrinsics(truth: &Se3, angle_deg: f64, distance: f64, seed: u64) -> Se3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unit = || loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            break v / n;
        }
    };
    let axis = unit();
    let dir = unit();
    let rot = Se3::from_axis_angle(axis * angle_deg.to_radians(), Vector3::zeros());
    Se3::new(rot.rotation * truth.rotation, truth.translation + dir * distance)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless(kind: SceneKind) -> SceneSpec {
        let mut s = default_scene(kind);
        s.noise.pixel_sigma = 0.0;
        s.noise.lidar_sigma = 0.0;
        s
    }

    #[test]
    fn default_scenes_generate() {
        for kind in [SceneKind::Courtyard, SceneKind::Corridor, SceneKind::DegenerateZ] {
            let ds = generate(&default_scene(kind)).unwrap();
            assert_eq!(ds.clouds.len(), 8);
            assert!(ds.tracks.len() > 50, "{kind:?}: {}", ds.tracks.len());
        }
    }

    #[test]
    fn noiseless_features_are_exact_projections() {
        let ds = generate(&noiseless(SceneKind::Courtyard)).unwrap();
        for (t, g) in ds.tracks.iter().zip(&ds.truth) {
            for o in &t.observations {
                let pc = ds.gt_camera_poses[o.frame].transform(&g.position);
                let pix = ds.gt_intrinsics.project(&pc).unwrap();
                assert!((pix - o.pixel).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn noiseless_lidar_points_lie_on_their_planes() {
        let ds = generate(&noiseless(SceneKind::Courtyard)).unwrap();
        for (i, (c, ids)) in ds.clouds.iter().zip(&ds.cloud_planes).enumerate() {
            let world_from_lidar = ds.world_from_camera[i].compose(&ds.gt_extrinsics.inverse());
            for (p, &k) in c.points.iter().zip(ids) {
                let pl = &ds.spec.planes[k];
                let w = world_from_lidar.transform(p);
                assert!((pl.normal().dot(&w) - pl.offset()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pose_chains_are_consistent() {
        let ds = generate(&default_scene(SceneKind::Courtyard)).unwrap();
        for (c, l) in ds.gt_camera_poses.iter().zip(&ds.gt_lidar_poses) {
            let a = l.compose(&ds.gt_extrinsics);
            let b = ds.gt_extrinsics.compose(c);
            assert!((a.translation - b.translation).norm() < 1e-12);
            assert!(a.rotation.angle_to(&b.rotation) < 1e-12);
        }
        assert_eq!(ds.gt_camera_poses[0], Se3::identity());
    }

    #[test]
    fn generation_is_deterministic() {
        let s = default_scene(SceneKind::Courtyard);
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
    }

    #[test]
    fn outliers_are_displaced() {
        let mut s = default_scene(SceneKind::Courtyard);
        s.noise.outlier_fraction = 0.1;
        let ds = generate(&s).unwrap();
        let cam0_to_world = ds.world_from_camera[0];
        let outliers: Vec<_> = ds.truth.iter().filter(|t| t.outlier).collect();
        assert!(!outliers.is_empty());
        for t in outliers {
            let w = cam0_to_world.transform(&t.position);
            for p in &s.planes {
                assert!(p.distance_to_rect(&w) >= 0.5 - 1e-9);
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = default_scene(SceneKind::Courtyard);
        s.planes.clear();
        s.noise.outlier_fraction = 1.0;
        match generate(&s) {
            Err(SynthError::InvalidSpec(msg)) => {
                assert!(msg.contains("plane"));
                assert!(msg.contains("outlier_fraction"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn looking_away_is_invisible() {
        let mut s = default_scene(SceneKind::Courtyard);
        for w in &mut s.trajectory {
            w.target = [w.eye[0], w.eye[1] - 10.0, w.eye[2] + 30.0];
        }
        assert!(matches!(generate(&s), Err(SynthError::InvisibleScene { .. })));
    }

    #[test]
    fn rendering_matches_plane_colors() {
        let ds = generate(&noiseless(SceneKind::Courtyard)).unwrap();
        let img = render_image(&ds, 0);
        // ground is visible at the bottom center of the first frame
        let px = img.get(320, 470);
        let ground = &ds.spec.planes[0];
        assert!(px == ground.color || px == ground.color.map(|c| c / 3));
    }
}
