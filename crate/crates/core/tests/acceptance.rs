//! End-to-end acceptance suite. Runs every criterion in one test so the
//! per-trial timings are not skewed by concurrent tests and the solver
//! monotonicity counters cover every invocation in the process.

use std::collections::HashSet;
use std::time::Instant;

use nalgebra::{Matrix2, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use planecal::cloud::PlanePatch;
use planecal::geometry::{rotation_angle_between, CameraIntrinsics, Se3};
use planecal::init::{recover_scale, InitError, ScaleExtrinsicResidual};
use planecal::io;
use planecal::joint::PointPlaneResidual;
use planecal::lidar_pose::ScanPairResidual;
use planecal::metrics::{extrinsic_error, intrinsic_error, CalibrationError};
use planecal::pipeline::{run_pipeline, CalibrationInputs, PipelineConfig, PipelineRun, RunStatus, Stage};
use planecal::solver::{check_jacobian, monotonicity_stats, Manifold, RobustLoss};
use planecal::synth::{default_scene, generate, perturb_extrinsics, SceneKind, SyntheticDataset};
use planecal::visual_ba::{Observation, ReprojectionResidual, TranslationNormPrior};

const TRIALS: u64 = 20;

struct Trial {
    ds: SyntheticDataset,
    run: PipelineRun,
    seconds: f64,
}

fn courtyard(seed: u64, outlier_fraction: f64) -> SyntheticDataset {
    let mut spec = default_scene(SceneKind::Courtyard);
    spec.seed = seed;
    spec.noise.outlier_fraction = outlier_fraction;
    generate(&spec).expect("courtyard generates")
}

/// Initial extrinsics 5° / 40 cm off and initial scale ×1.2.
fn trial_inputs(ds: &SyntheticDataset) -> CalibrationInputs {
    let x0 = perturb_extrinsics(&ds.gt_extrinsics, 5.0, 0.4, ds.spec.seed + 1000);
    CalibrationInputs::from_synthetic(ds, x0, Some(ds.gt_scale * 1.2))
}

fn run_trial(seed: u64, outlier_fraction: f64) -> Trial {
    let ds = courtyard(seed, outlier_fraction);
    let inputs = trial_inputs(&ds);
    let t0 = Instant::now();
    let run = run_pipeline(&inputs, &PipelineConfig::default(), Stage::Odometry, None);
    Trial {
        ds,
        run,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

fn final_error(t: &Trial) -> Option<CalibrationError> {
    t.run.report.evaluation.as_ref()?.final_error
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

struct Outcome {
    lines: Vec<String>,
    failed: Vec<u32>,
}

impl Outcome {
    fn record(&mut self, id: u32, pass: bool, detail: String) {
        let line = format!("criterion {id:>2}: {} | {detail}", if pass { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push(line);
        if !pass {
            self.failed.push(id);
        }
    }
}

fn criterion_2(out: &mut Outcome, trials: &[Trial]) {
    let errs: Vec<Option<CalibrationError>> = trials.iter().map(final_error).collect();
    let missing = errs.iter().filter(|e| e.is_none()).count();
    // a failed trial counts as an infinite error
    let pick =
        |f: fn(&CalibrationError) -> f64| median(errs.iter().map(|e| e.as_ref().map_or(f64::INFINITY, f)).collect());
    let (r, t, d) = (
        pick(|e| e.rotation_deg),
        pick(|e| e.translation_cm),
        pick(|e| e.intrinsic_px),
    );
    let slowest = trials.iter().map(|t| t.seconds).fold(0.0, f64::max);
    let pass = r < 0.1 && t < 1.0 && d < 1.0 && slowest < 60.0;
    out.record(
        2,
        pass,
        format!(
            "median over {} trials: {r:.4} deg, {t:.4} cm, {d:.4} px; slowest trial {slowest:.1} s; {missing} without result",
            trials.len()
        ),
    );
}

fn criterion_3(out: &mut Outcome, trials: &[Trial]) {
    let mut improved = 0;
    let mut worse = Vec::new();
    for t in trials {
        let Some(ev) = &t.run.report.evaluation else {
            worse.push(t.ds.spec.seed);
            continue;
        };
        match (ev.visual_only, ev.final_error) {
            (Some(v), Some(f)) if f.intrinsic_px < v.intrinsic_px => improved += 1,
            _ => worse.push(t.ds.spec.seed),
        }
    }
    out.record(
        3,
        improved >= 18,
        format!(
            "joint intrinsic error below visual-only in {improved}/{} trials; not improved: seeds {worse:?}",
            trials.len()
        ),
    );
}

fn criterion_4(out: &mut Outcome) {
    let mut spec = default_scene(SceneKind::Courtyard);
    spec.noise.pixel_sigma = 0.0;
    spec.noise.lidar_sigma = 0.0;
    spec.initial_focal_error = 0.0;
    spec.seed = 4;
    let ds = generate(&spec).expect("noiseless courtyard");
    let mut inputs = CalibrationInputs::from_synthetic(&ds, ds.gt_extrinsics, Some(ds.gt_scale));
    inputs.initial_intrinsics = ds.gt_intrinsics;
    inputs.lidar_poses = Some(ds.gt_lidar_poses.clone());
    let run = run_pipeline(&inputs, &PipelineConfig::default(), Stage::Odometry, None);
    let r = &run.report;
    let (Some(init), Some(res), Some(joint)) = (&r.init, &r.result, &r.joint) else {
        out.record(4, false, format!("pipeline stopped: {:?} {:?}", r.status, r.error));
        return;
    };
    let se3_dev = |a: &Se3, b: &Se3| {
        rotation_angle_between(&a.rotation, &b.rotation)
            .to_radians()
            .max((a.translation - b.translation).amax())
    };
    let intr_dev = |a: &CameraIntrinsics, b: &CameraIntrinsics| {
        a.to_params()
            .iter()
            .zip(b.to_params())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    };
    let devs = [
        ("init scale", (init.scale - ds.gt_scale).abs()),
        ("init extrinsics", se3_dev(&init.extrinsics, &ds.gt_extrinsics)),
        ("final extrinsics", se3_dev(&res.extrinsics, &ds.gt_extrinsics)),
        ("final intrinsics", intr_dev(&res.intrinsics, &ds.gt_intrinsics)),
    ];
    let worst = devs.iter().map(|d| d.1).fold(0.0, f64::max);
    let pass = worst < 1e-8 && joint.final_cost < 1e-12 && r.status == RunStatus::Converged;
    out.record(
        4,
        pass,
        format!(
            "largest parameter change {worst:.2e} ({}); final cost {:.2e}; status {:?}",
            devs.iter()
                .map(|(n, v)| format!("{n} {v:.1e}"))
                .collect::<Vec<_>>()
                .join(", "),
            joint.final_cost,
            r.status
        ),
    );
}

fn rand_vec(rng: &mut ChaCha8Rng, a: f64) -> Vector3<f64> {
    Vector3::new(
        rng.random_range(-a..a),
        rng.random_range(-a..a),
        rng.random_range(-a..a),
    )
}

fn rand_pose(rng: &mut ChaCha8Rng, angle: f64, dist: f64) -> Se3 {
    Se3::from_axis_angle(rand_vec(rng, angle), rand_vec(rng, dist))
}

fn criterion_5(out: &mut Outcome) {
    const POINTS: usize = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: Vec<(&str, f64)> = Vec::new();

    let mut w = 0.0f64;
    for _ in 0..POINTS {
        let d = CameraIntrinsics::new(
            rng.random_range(400.0..600.0),
            rng.random_range(400.0..600.0),
            rng.random_range(300.0..340.0),
            rng.random_range(220.0..260.0),
            rng.random_range(-0.15..0.05),
            rng.random_range(-0.02..0.03),
            640,
            480,
        )
        .unwrap();
        let pose = rand_pose(&mut rng, 0.3, 1.0);
        let x = Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-1.5..1.5),
            rng.random_range(4.0..8.0),
        );
        let a = rng.random_range(0.3..2.0);
        let b = rng.random_range(0.3..2.0);
        let c = rng.random_range(-0.2..0.2);
        let obs = Observation {
            frame: 0,
            pixel: Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
            covariance: Matrix2::new(a, c, c, b),
        };
        let block = ReprojectionResidual::new(0, 1, 2, &obs, d);
        let params = vec![d.to_params().to_vec(), pose.to_array().to_vec(), x.as_slice().to_vec()];
        w = w.max(check_jacobian(
            &block,
            &params,
            &[Manifold::Euclidean(6), Manifold::Se3, Manifold::Euclidean(3)],
            1e-4,
        ));
    }
    worst.push(("reprojection", w));

    let mut w = 0.0f64;
    for _ in 0..POINTS {
        let patch = PlanePatch {
            normal: rand_vec(&mut rng, 1.0).normalize(),
            centroid: rand_vec(&mut rng, 3.0),
            eigenvalues: [1.0, 0.5, 1e-4],
            neighbor_count: 10,
        };
        let block = PointPlaneResidual::new(0, 1, 2, &patch, rng.random_range(1e-4..1.0), rng.random_range(0.1..4.0));
        let params = vec![
            rand_pose(&mut rng, 2.0, 0.5).to_array().to_vec(),
            rand_pose(&mut rng, 1.0, 2.0).to_array().to_vec(),
            rand_vec(&mut rng, 5.0).as_slice().to_vec(),
        ];
        w = w.max(check_jacobian(
            &block,
            &params,
            &[Manifold::Se3, Manifold::Se3, Manifold::Euclidean(3)],
            1e-6,
        ));
    }
    worst.push(("point-to-plane", w));

    let mut w = 0.0f64;
    for _ in 0..POINTS {
        let n = 4;
        let block = ScanPairResidual::new(
            0,
            1,
            (0..n).map(|_| rand_vec(&mut rng, 5.0)).collect(),
            (0..n).map(|_| rand_vec(&mut rng, 1.0).normalize()).collect(),
            (0..n).map(|_| rand_vec(&mut rng, 5.0)).collect(),
            (0..n).map(|_| rng.random_range(0.1..1.0)).collect(),
        );
        let params = vec![
            rand_pose(&mut rng, 0.5, 2.0).to_array().to_vec(),
            rand_pose(&mut rng, 0.5, 2.0).to_array().to_vec(),
        ];
        w = w.max(check_jacobian(&block, &params, &[Manifold::Se3, Manifold::Se3], 1e-6));
    }
    worst.push(("scan pair", w));

    let mut w = 0.0f64;
    for _ in 0..POINTS {
        let block = ScaleExtrinsicResidual::new(
            0,
            1,
            rand_vec(&mut rng, 5.0),
            rand_pose(&mut rng, 1.0, 3.0),
            rand_vec(&mut rng, 1.0).normalize(),
            rand_vec(&mut rng, 3.0),
            RobustLoss::None,
        );
        let params = vec![
            vec![rng.random_range(-1.0..1.0)],
            rand_pose(&mut rng, 2.0, 0.5).to_array().to_vec(),
        ];
        w = w.max(check_jacobian(
            &block,
            &params,
            &[Manifold::Euclidean(1), Manifold::Se3],
            1e-6,
        ));
    }
    worst.push(("scale/extrinsics", w));

    let mut w = 0.0f64;
    for _ in 0..POINTS {
        let block = TranslationNormPrior::new(0, rng.random_range(0.5..3.0), rng.random_range(1.0..100.0));
        let params = vec![rand_pose(&mut rng, 1.0, 3.0).to_array().to_vec()];
        w = w.max(check_jacobian(&block, &params, &[Manifold::Se3], 1e-6));
    }
    worst.push(("translation-norm prior", w));

    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    out.record(
        5,
        max < 1e-5,
        format!(
            "worst relative deviation at {POINTS} points per block: {}",
            worst
                .iter()
                .map(|(n, v)| format!("{n} {v:.1e}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    );
}

fn criterion_6(out: &mut Outcome, trials: &[Trial]) {
    let mut spec = default_scene(SceneKind::DegenerateZ);
    spec.seed = 6;
    let ds = generate(&spec).expect("degenerate scene");
    let x0 = perturb_extrinsics(&ds.gt_extrinsics, 5.0, 0.4, 1006);
    let inputs = CalibrationInputs::from_synthetic(&ds, x0, Some(ds.gt_scale * 1.2));
    let report = run_pipeline(&inputs, &PipelineConfig::default(), Stage::Odometry, None).report;
    // every textured wall contains the corridor axis, so it is the null
    // direction; expressed in the first camera
    let axis = ds.world_from_camera[0].rotation.inverse() * Vector3::y();
    let angle = report.degeneracy.as_ref().map(|d| {
        d.weak_direction
            .normalize()
            .dot(&axis)
            .abs()
            .min(1.0)
            .acos()
            .to_degrees()
    });
    let flagged = report.status == RunStatus::Degenerate;
    let courtyard_flags: Vec<u64> = trials
        .iter()
        .filter(|t| t.run.report.degeneracy.as_ref().is_none_or(|d| d.degenerate))
        .map(|t| t.ds.spec.seed)
        .collect();
    let pass = flagged && angle.is_some_and(|a| a < 5.0) && courtyard_flags.is_empty();
    out.record(
        6,
        pass,
        format!(
            "degenerate_z status {:?}, weak direction {:.3} deg from the corridor axis; courtyard trials flagged or undiagnosed: {courtyard_flags:?}",
            report.status,
            angle.unwrap_or(f64::NAN)
        ),
    );
}

fn criterion_7(out: &mut Outcome) {
    let gt = default_scene(SceneKind::Courtyard).gt_intrinsics;
    let mut worst_stride = 0.0f64;
    for edit in [
        |d: &mut CameraIntrinsics| d.fx *= 1.01,
        |d: &mut CameraIntrinsics| d.k1 += 0.02,
        |d: &mut CameraIntrinsics| {
            d.cy -= 3.0;
            d.fy *= 0.995;
        },
    ] {
        let mut d = gt;
        edit(&mut d);
        let full = intrinsic_error(&d, &gt, 1).unwrap();
        let strided = intrinsic_error(&d, &gt, 4).unwrap();
        worst_stride = worst_stride.max((full - strided).abs());
    }
    let mut shifted = gt;
    shifted.cx += 2.0;
    let pp = intrinsic_error(&shifted, &gt, 1).unwrap();
    let base = Se3::from_axis_angle(Vector3::new(0.2, -0.1, 0.3), Vector3::zeros());
    let (_, cm) = extrinsic_error(&Se3::new(base.rotation, Vector3::new(0.03, 0.04, 0.0)), &base);
    let pass = worst_stride < 0.01 && pp == 2.0 && cm == 5.0;
    out.record(
        7,
        pass,
        format!("stride 4 vs full grid {worst_stride:.2e} px; principal point +2 px gives {pp}; 3-4-5 gives {cm} cm"),
    );
}

fn criterion_8(out: &mut Outcome) {
    let mut spec = default_scene(SceneKind::Courtyard);
    spec.noise.pixel_sigma = 0.0;
    spec.noise.lidar_sigma = 0.0;
    let ds = generate(&spec).expect("courtyard");
    let est = recover_scale(&ds.sfm_camera_poses, &ds.gt_lidar_poses, &ds.gt_extrinsics);
    let scale_dev = est
        .as_ref()
        .map(|e| (e.scale - ds.gt_scale).abs())
        .unwrap_or(f64::INFINITY);

    let x = ds.gt_extrinsics;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cams: Vec<Se3> = (0..6)
        .map(|i| {
            if i == 0 {
                Se3::identity()
            } else {
                Se3::from_axis_angle(rand_vec(&mut rng, 0.5), Vector3::zeros())
            }
        })
        .collect();
    let lidar: Vec<Se3> = cams.iter().map(|c| x.compose(c).compose(&x.inverse())).collect();
    let pure = recover_scale(&cams, &lidar, &x);
    let pass = scale_dev < 1e-9 && pure == Err(InitError::DegenerateMotion);
    out.record(
        8,
        pass,
        format!("scale deviation {scale_dev:.2e}; pure rotation gives {pure:?}"),
    );
}

fn criterion_10(out: &mut Outcome, clean: &Trial) {
    let salted = run_trial(clean.ds.spec.seed, 0.1);
    let outliers: HashSet<usize> = salted
        .ds
        .truth
        .iter()
        .filter(|t| t.outlier)
        .map(|t| t.point_id)
        .collect();
    let Some(joint) = &salted.run.report.joint else {
        out.record(10, false, format!("salted run stopped: {:?}", salted.run.report.error));
        return;
    };
    let discarded: HashSet<usize> = joint.initial_correspondences.discarded_points.iter().copied().collect();
    let rejected = outliers.iter().filter(|p| discarded.contains(p)).count();
    let frac = rejected as f64 / outliers.len().max(1) as f64;
    let (Some(c), Some(s)) = (final_error(clean), final_error(&salted)) else {
        out.record(10, false, "missing final error".into());
        return;
    };
    let ratios = [
        s.rotation_deg / c.rotation_deg,
        s.translation_cm / c.translation_cm,
        s.intrinsic_px / c.intrinsic_px,
    ];
    let pass = !outliers.is_empty() && frac >= 0.95 && ratios.iter().all(|r| *r <= 1.5);
    out.record(
        10,
        pass,
        format!(
            "{rejected}/{} outliers rejected ({:.1}%); salted/clean error ratios {:.3}, {:.3}, {:.3}",
            outliers.len(),
            100.0 * frac,
            ratios[0],
            ratios[1],
            ratios[2]
        ),
    );
}

fn criterion_11(out: &mut Outcome, in_memory: &Trial) {
    let dir = tempfile::tempdir().unwrap();
    let inputs = trial_inputs(&in_memory.ds);
    let result = io::save_inputs(dir.path(), &inputs, None, None)
        .and_then(|m| io::load_manifest(&m))
        .and_then(|m| io::load_inputs(&m));
    let loaded = match result {
        Ok(l) => l,
        Err(e) => {
            out.record(11, false, format!("round trip failed: {e}"));
            return;
        }
    };
    let from_disk = run_pipeline(&loaded, &PipelineConfig::default(), Stage::Odometry, None);
    let a = in_memory.run.report.without_timings();
    let b = from_disk.report.without_timings();
    let same_inputs = loaded == inputs;
    let same_json = serde_json::to_string(&a).unwrap() == serde_json::to_string(&b).unwrap();
    out.record(
        11,
        same_inputs && a == b && same_json,
        format!(
            "inputs identical: {same_inputs}; reports identical: {}; serialized identical: {same_json}",
            a == b
        ),
    );
}

#[test]
fn acceptance() {
    let mut out = Outcome {
        lines: Vec::new(),
        failed: Vec::new(),
    };
    let trials: Vec<Trial> = (1..=TRIALS).map(|s| run_trial(s, 0.0)).collect();
    for t in &trials {
        let e = final_error(t);
        println!(
            "  seed {:>2}: {:?} in {:.1} s, final {}",
            t.ds.spec.seed,
            t.run.report.status,
            t.seconds,
            e.map_or("none".into(), |e| format!(
                "{:.4} deg {:.4} cm {:.4} px",
                e.rotation_deg, e.translation_cm, e.intrinsic_px
            ))
        );
    }
    criterion_2(&mut out, &trials);
    criterion_3(&mut out, &trials);
    criterion_4(&mut out);
    criterion_5(&mut out);
    criterion_6(&mut out, &trials);
    criterion_7(&mut out);
    criterion_8(&mut out);
    criterion_10(&mut out, &trials[0]);
    criterion_11(&mut out, &trials[0]);
    // last, so every solver call above is counted
    let (solves, non_monotone) = monotonicity_stats();
    out.record(
        9,
        solves > 0 && non_monotone == 0,
        format!("{non_monotone} of {solves} solver invocations had an accepted cost increase"),
    );

    println!("\nsummary");
    let mut lines = out.lines.clone();
    lines.sort_by_key(|l| l[10..12].trim().parse::<u32>().unwrap());
    for l in &lines {
        println!("{l}");
    }
    assert!(out.failed.is_empty(), "failed criteria: {:?}", out.failed);
}
