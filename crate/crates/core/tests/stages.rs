use nalgebra::Vector3;

use planecal::cloud::SpatialIndex;
use planecal::geometry::{rotation_angle_between, Se3};
use planecal::lidar_pose::{icp_point_to_plane, refine_trajectory, IcpConfig, LidarTrajectory, RefineConfig};
use planecal::metrics::extrinsic_error;
use planecal::pipeline::{run_pipeline, CalibrationInputs, Checkpoint, PipelineConfig, RunReport, RunStatus, Stage};
use planecal::synth::{default_scene, generate, perturb_extrinsics, SceneKind, SyntheticDataset};

fn courtyard(seed: u64) -> SyntheticDataset {
    let mut spec = default_scene(SceneKind::Courtyard);
    spec.seed = seed;
    generate(&spec).unwrap()
}

fn pose_error(a: &Se3, b: &Se3) -> (f64, f64) {
    (
        rotation_angle_between(&a.rotation, &b.rotation),
        (a.translation - b.translation).norm(),
    )
}

#[test]
fn icp_recovers_relative_pose_between_synthetic_scans() {
    let ds = courtyard(21);
    for i in 1..4 {
        // scan i into scan i-1
        let truth = ds.gt_lidar_poses[i - 1].compose(&ds.gt_lidar_poses[i].inverse());
        let start = perturb_extrinsics(&truth, 5.0, 0.3, 40 + i as u64);
        let target = SpatialIndex::new(&ds.clouds[i - 1].points).unwrap();
        let res = icp_point_to_plane(&ds.clouds[i], &target, &start, &IcpConfig::default()).unwrap();
        let (deg, m) = pose_error(&res.pose, &truth);
        assert!(deg < 0.05 && m < 0.005, "scan {i}: {deg} deg, {m} m");
    }
}

#[test]
fn refinement_reduces_drift_over_five_scans() {
    let ds = courtyard(22);
    let scans = ds.clouds[..5].to_vec();
    let truth = &ds.gt_lidar_poses[..5];
    // drift grows along the trajectory
    let drifted = LidarTrajectory {
        poses: truth
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if i == 0 {
                    *p
                } else {
                    let k = i as f64;
                    let d = Se3::from_axis_angle(
                        Vector3::new(0.3, -0.2, 1.0).normalize() * (0.4 * k).to_radians(),
                        Vector3::new(0.01, -0.02, 0.005) * k,
                    );
                    d.compose(p)
                }
            })
            .collect(),
    };
    let out = refine_trajectory(&scans, &drifted, &RefineConfig::default()).unwrap();
    assert_eq!(out.trajectory.poses[0], Se3::identity());
    assert!(out.cost.last().unwrap() < &out.cost[0], "{:?}", out.cost);
    assert!(out.cost.windows(2).all(|w| w[1] <= w[0]));
    for i in 1..5 {
        let (r0, t0) = pose_error(&drifted.poses[i], &truth[i]);
        let (r1, t1) = pose_error(&out.trajectory.poses[i], &truth[i]);
        assert!(r1 <= r0 && t1 <= t0, "pose {i}: {r0}/{t0} -> {r1}/{t1}");
    }
}

#[test]
fn refining_a_refined_trajectory_is_a_fixed_point() {
    let ds = courtyard(23);
    let scans = ds.clouds[..4].to_vec();
    let first = refine_trajectory(
        &scans,
        &LidarTrajectory {
            poses: ds.gt_lidar_poses[..4].to_vec(),
        },
        &RefineConfig::default(),
    )
    .unwrap();
    let second = refine_trajectory(&scans, &first.trajectory, &RefineConfig::default()).unwrap();
    let c0 = second.cost[0];
    let c1 = *second.cost.last().unwrap();
    assert!((c0 - c1).abs() <= 1e-10 * c0, "{c0} -> {c1}");
}

#[test]
fn init_stage_lands_near_truth_from_a_rough_start() {
    let mut cfg = PipelineConfig::default();
    cfg.joint.solver.max_iterations = 0;
    for seed in 1..=5 {
        let ds = courtyard(seed);
        let x0 = perturb_extrinsics(&ds.gt_extrinsics, 5.0, 0.4, seed + 1000);
        let mut inputs = CalibrationInputs::from_synthetic(&ds, x0, Some(ds.gt_scale * 1.2));
        inputs.lidar_poses = Some(ds.gt_lidar_poses.clone());
        let report = run_pipeline(&inputs, &cfg, Stage::Odometry, None).report;
        let init = report.init.unwrap_or_else(|| panic!("seed {seed}: {:?}", report.error));
        let (deg, cm) = extrinsic_error(&init.extrinsics, &ds.gt_extrinsics);
        let scale_err = (init.scale - ds.gt_scale).abs() / ds.gt_scale;
        assert!(
            deg < 0.5 && cm < 4.0 && scale_err < 0.015,
            "seed {seed}: {deg} deg {cm} cm {scale_err}"
        );
    }
}

#[test]
fn closed_form_scale_seeds_init_when_none_is_given() {
    let ds = courtyard(9);
    let x0 = perturb_extrinsics(&ds.gt_extrinsics, 5.0, 0.4, 1009);
    let mut inputs = CalibrationInputs::from_synthetic(&ds, x0, None);
    inputs.lidar_poses = Some(ds.gt_lidar_poses.clone());
    let report = run_pipeline(&inputs, &PipelineConfig::default(), Stage::Odometry, None).report;
    let init = report.init.unwrap();
    assert!(init.closed_form_residual_rms.is_some());
    assert!(
        (init.initial_scale / ds.gt_scale - 1.0).abs() < 0.1,
        "{}",
        init.initial_scale
    );
    assert_eq!(report.status, RunStatus::Converged);
}

#[test]
fn resuming_from_joint_reproduces_the_full_run() {
    let ds = courtyard(5);
    let x0 = perturb_extrinsics(&ds.gt_extrinsics, 5.0, 0.4, 1005);
    let inputs = CalibrationInputs::from_synthetic(&ds, x0, Some(ds.gt_scale * 1.2));
    let cfg = PipelineConfig::default();
    let full = run_pipeline(&inputs, &cfg, Stage::Odometry, None);

    let text = serde_json::to_string(&full.checkpoint).unwrap();
    let ck: Checkpoint = serde_json::from_str(&text).unwrap();
    assert_eq!(ck, full.checkpoint);

    // the checkpoint after joint still holds the init-stage outputs
    let resumed = run_pipeline(&inputs, &cfg, Stage::Joint, Some(ck));
    assert!(resumed.report.odometry.is_none() && resumed.report.init.is_none());
    assert_eq!(resumed.report.result, full.report.result);
    assert_eq!(resumed.report.joint, full.report.joint);

    let report_text = serde_json::to_string(&full.report).unwrap();
    let back: RunReport = serde_json::from_str(&report_text).unwrap();
    assert_eq!(back, full.report);
}

#[test]
fn stage_failure_is_named_in_the_report() {
    let ds = courtyard(6);
    // extrinsics 100 m off put every visual point far from any plane
    let far = Se3::new(
        ds.gt_extrinsics.rotation,
        ds.gt_extrinsics.translation + Vector3::new(100.0, 0.0, 0.0),
    );
    let mut inputs = CalibrationInputs::from_synthetic(&ds, far, Some(ds.gt_scale));
    inputs.lidar_poses = Some(ds.gt_lidar_poses.clone());
    let report = run_pipeline(&inputs, &PipelineConfig::default(), Stage::Odometry, None).report;
    assert_eq!(report.status, RunStatus::Failed);
    assert_eq!(report.failed_stage, Some(Stage::Init));
    assert!(report.error.is_some());
    assert!(report.result.is_none());
    // ground truth was present, so the initial error is still reported
    assert!(report.evaluation.unwrap().final_error.is_none());
}

#[test]
fn resume_without_checkpoint_fails_in_the_requested_stage() {
    let ds = courtyard(7);
    let inputs = CalibrationInputs::from_synthetic(&ds, ds.gt_extrinsics, Some(ds.gt_scale));
    let report = run_pipeline(&inputs, &PipelineConfig::default(), Stage::Init, None).report;
    assert_eq!(report.status, RunStatus::Failed);
    assert_eq!(report.failed_stage, Some(Stage::Init));
}
