//! Calibration error metrics against ground truth.

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{rotation_angle_between, CameraIntrinsics, GeometryError, Se3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationError {
    pub rotation_deg: f64,
    pub translation_cm: f64,
    pub intrinsic_px: f64,
}

/// Rotation error `arccos((tr(R* Rgtᵀ) − 1)/2)` in degrees and translation
/// error `‖t* − tgt‖` in centimeters.
pub fn extrinsic_error(estimate: &Se3, gt: &Se3) -> (f64, f64) {
    let r = estimate.rotation_matrix() * gt.rotation_matrix().transpose();
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let mut deg = c.acos().to_degrees();
    // arccos loses precision near zero; fall back to the quaternion angle
    if estimate.rotation == gt.rotation {
        deg = 0.0;
    } else if deg < 1.0 {
        deg = rotation_angle_between(&estimate.rotation, &gt.rotation);
    }
    let cm = (estimate.translation - gt.translation).norm() * 100.0;
    (deg, cm)
}

fn pixel_error(d_star: &CameraIntrinsics, d_gt: &CameraIntrinsics, u: f64, v: f64) -> Result<f64, GeometryError> {
    let px = Vector2::new(u, v);
    let ray = d_gt.unproject(&px)?;
    Ok((d_star.project(&ray)? - px).norm())
}

/// Mean reprojection displacement over the image grid `u ∈ 1..=w`,
/// `v ∈ 1..=h`. With `stride > 1` the grid is split into `stride × stride`
/// cells, each evaluated once at its center and weighted by its pixel count.
pub fn intrinsic_error(
    d_star: &CameraIntrinsics,
    d_gt: &CameraIntrinsics,
    stride: usize,
) -> Result<f64, GeometryError> {
    if d_star.width != d_gt.width || d_star.height != d_gt.height {
        return Err(GeometryError::InvalidIntrinsics(format!(
            "image sizes differ: {}x{} vs {}x{}",
            d_star.width, d_star.height, d_gt.width, d_gt.height
        )));
    }
    // the round trip through undistortion leaves ~1e-11 px of solver residue
    if d_star == d_gt {
        return Ok(0.0);
    }
    let (w, h) = (d_gt.width as usize, d_gt.height as usize);
    let k = stride.max(1);
    let cells = |n: usize| -> Vec<(f64, f64)> {
        (0..n.div_ceil(k))
            .map(|c| {
                let lo = c * k + 1;
                let hi = ((c + 1) * k).min(n);
                (0.5 * (lo + hi) as f64, (hi - lo + 1) as f64)
            })
            .collect()
    };
    let (cu, cv) = (cells(w), cells(h));
    let rows: Vec<f64> = cv
        .par_iter()
        .map(|&(v, wv)| {
            let mut acc = 0.0;
            for &(u, wu) in &cu {
                acc += wu * wv * pixel_error(d_star, d_gt, u, v)?;
            }
            Ok(acc)
        })
        .collect::<Result<_, GeometryError>>()?;
    Ok(rows.iter().sum::<f64>() / (w * h) as f64)
}

pub fn calibration_error(
    extrinsics: &Se3,
    gt_extrinsics: &Se3,
    intrinsics: &CameraIntrinsics,
    gt_intrinsics: &CameraIntrinsics,
    stride: usize,
) -> Result<CalibrationError, GeometryError> {
    let (rotation_deg, translation_cm) = extrinsic_error(extrinsics, gt_extrinsics);
    Ok(CalibrationError {
        rotation_deg,
        translation_cm,
        intrinsic_px: intrinsic_error(intrinsics, gt_intrinsics, stride)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{UnitQuaternion, Vector3};
    use proptest::prelude::*;

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(505.0, 500.0, 323.0, 236.0, -0.09, 0.015, 640, 480).unwrap()
    }

    #[test]
    fn identical_extrinsics_have_zero_error() {
        let t = Se3::from_axis_angle(Vector3::new(0.1, 0.2, -0.3), Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(extrinsic_error(&t, &t), (0.0, 0.0));
    }

    #[test]
    fn three_four_five_translation() {
        let a = Se3::identity();
        let b = Se3::new(UnitQuaternion::identity(), Vector3::new(0.03, 0.04, 0.0));
        let (r, t) = extrinsic_error(&b, &a);
        assert_eq!(r, 0.0);
        assert_eq!(t, 5.0);
    }

    #[test]
    fn one_degree_about_any_axis() {
        for axis in [
            Vector3::new(0.3, -0.8, 0.52),
            Vector3::x(),
            Vector3::new(-1.0, 1.0, 1.0),
        ] {
            let gt = Se3::from_axis_angle(Vector3::new(0.2, 0.1, 0.4), Vector3::new(0.1, 0.0, 0.0));
            let est = Se3::from_axis_angle(axis.normalize() * 1f64.to_radians(), Vector3::zeros()).compose(&gt);
            let est = Se3::new(est.rotation, gt.translation);
            let (r, t) = extrinsic_error(&est, &gt);
            assert!((r - 1.0).abs() < 1e-9, "{r}");
            assert!(t < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn rotation_error_is_symmetric(a in prop::array::uniform3(-3.0f64..3.0), b in prop::array::uniform3(-3.0f64..3.0)) {
            let x = Se3::from_axis_angle(Vector3::from(a), Vector3::zeros());
            let y = Se3::from_axis_angle(Vector3::from(b), Vector3::zeros());
            let (r1, _) = extrinsic_error(&x, &y);
            let (r2, _) = extrinsic_error(&y, &x);
            prop_assert!((r1 - r2).abs() < 1e-9);
            prop_assert!((0.0..=180.0).contains(&r1));
        }
    }

    #[test]
    fn identical_intrinsics_have_zero_error() {
        let d = camera();
        assert_eq!(intrinsic_error(&d, &d, 1).unwrap(), 0.0);
        assert_eq!(intrinsic_error(&d, &d, 4).unwrap(), 0.0);
    }

    #[test]
    fn principal_point_shift_is_exactly_two() {
        let gt = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 0.0, 0.0, 640, 480).unwrap();
        let mut d = gt;
        d.cx += 2.0;
        assert_eq!(intrinsic_error(&d, &gt, 1).unwrap(), 2.0);
        assert_eq!(intrinsic_error(&d, &gt, 4).unwrap(), 2.0);
    }

    fn brute_force(d_star: &CameraIntrinsics, d_gt: &CameraIntrinsics) -> f64 {
        let mut sum = 0.0;
        for v in 1..=d_gt.height {
            for u in 1..=d_gt.width {
                let px = Vector2::new(u as f64, v as f64);
                let x = d_gt.undistort_normalized(&px).unwrap();
                let p = d_star.project(&Vector3::new(x.x, x.y, 1.0)).unwrap();
                sum += (p - px).norm();
            }
        }
        sum / (d_gt.width * d_gt.height) as f64
    }

    #[test]
    fn full_grid_matches_brute_force_and_stride_is_close() {
        let gt = camera();
        let mut d = gt;
        d.fx *= 1.01;
        let full = intrinsic_error(&d, &gt, 1).unwrap();
        assert!((full - brute_force(&d, &gt)).abs() < 1e-9);
        let strided = intrinsic_error(&d, &gt, 4).unwrap();
        assert!((strided - full).abs() < 0.01, "{strided} vs {full}");
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let gt = camera();
        let mut d = gt;
        d.width = 320;
        assert!(intrinsic_error(&d, &gt, 1).is_err());
    }
}
