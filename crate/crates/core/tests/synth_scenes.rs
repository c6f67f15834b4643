use nalgebra::{Matrix3, Vector3};

use planecal::cloud::SpatialIndex;
use planecal::joint::{build_correspondences, diagnose_degeneracy, CalibrationProblem, DegeneracyReport, JointConfig};
use planecal::synth::{default_scene, generate, SceneKind};
use planecal::visual_ba::VisualPoint;

#[test]
fn feature_noise_has_the_requested_spread() {
    let mut residuals = Vec::new();
    let mut observations = 0;
    let mut seed = 100;
    while observations < 10_000 {
        let mut spec = default_scene(SceneKind::Courtyard);
        spec.seed = seed;
        seed += 1;
        let ds = generate(&spec).unwrap();
        for (track, truth) in ds.tracks.iter().zip(&ds.truth) {
            assert_eq!(track.point_id, truth.point_id);
            for obs in &track.observations {
                let pc = ds.gt_camera_poses[obs.frame].transform(&truth.position);
                let px = ds.gt_intrinsics.project(&pc).unwrap();
                let r = obs.pixel - px;
                residuals.extend([r.x, r.y]);
                observations += 1;
            }
        }
    }
    let n = residuals.len() as f64;
    let mean = residuals.iter().sum::<f64>() / n;
    let std = (residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((std - 0.5).abs() < 0.025, "std {std} over {observations} observations");
    assert!(mean.abs() < 0.02, "mean {mean}");
}

/// Diagnosis on the correspondences a perfect calibration would find.
fn diagnose_at_truth(kind: SceneKind) -> (DegeneracyReport, Matrix3<f64>) {
    let mut spec = default_scene(kind);
    spec.noise.pixel_sigma = 0.0;
    spec.noise.lidar_sigma = 0.0;
    let ds = generate(&spec).unwrap();
    let points = ds
        .truth
        .iter()
        .map(|t| VisualPoint {
            point_id: t.point_id,
            position: t.position,
            covariance: Matrix3::identity() * 1e-4,
        })
        .collect();
    let problem = CalibrationProblem::new(
        ds.gt_intrinsics,
        ds.gt_extrinsics,
        ds.gt_camera_poses.clone(),
        points,
        ds.tracks.clone(),
        ds.gt_lidar_poses.clone(),
        1.0,
    )
    .unwrap();
    let indices: Vec<SpatialIndex> = ds
        .clouds
        .iter()
        .map(|c| SpatialIndex::new(&c.points).unwrap())
        .collect();
    let cfg = JointConfig::default();
    let (pairs, _) = build_correspondences(&problem, &indices, &cfg.correspondence).unwrap();
    let report = diagnose_degeneracy(&pairs, &ds.gt_extrinsics, cfg.degeneracy_ratio);
    (
        report,
        ds.world_from_camera[0]
            .rotation
            .inverse()
            .to_rotation_matrix()
            .into_inner(),
    )
}

#[test]
fn scene_conditioning_orders_as_designed() {
    let (courtyard, _) = diagnose_at_truth(SceneKind::Courtyard);
    let (corridor, _) = diagnose_at_truth(SceneKind::Corridor);
    let (degenerate, camera_from_world) = diagnose_at_truth(SceneKind::DegenerateZ);

    assert!(!courtyard.degenerate && !corridor.degenerate);
    assert!(degenerate.degenerate);
    assert!(
        courtyard.ratio > corridor.ratio && corridor.ratio > degenerate.ratio,
        "{} {} {}",
        courtyard.ratio,
        corridor.ratio,
        degenerate.ratio
    );

    // the corridor axis, seen from the first camera, is its optical axis
    let axis = camera_from_world * Vector3::y();
    assert!(axis.dot(&Vector3::z()) > 0.999);
    let cos = degenerate.weak_direction.normalize().dot(&axis).abs();
    assert!(cos > 5f64.to_radians().cos(), "{:?}", degenerate.weak_direction);
}
