//! Relative pose errors over all frame pairs.

use serde::Serialize;

use super::pose::rotation_angle;
use super::{CameraPose, GeometryError, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PoseErrors {
    pub trans_err: f64,
    /// Degrees.
    pub rot_err: f64,
    pub pairs: usize,
    pub scale: f64,
}

fn relative_pairs(pred: &Trajectory, gt: &Trajectory) -> Result<Vec<(CameraPose, CameraPose)>, GeometryError> {
    let n = pred.frame_count();
    if n != gt.frame_count() {
        return Err(GeometryError::FrameCountMismatch(n, gt.frame_count()));
    }
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push((pred.poses[i].relative_to(&pred.poses[j]), gt.poses[i].relative_to(&gt.poses[j])));
        }
    }
    Ok(out)
}

/// Mean geodesic angle (degrees) between predicted and ground-truth relative
/// rotations over every frame pair `i < j`.
pub fn rot_err(pred: &Trajectory, gt: &Trajectory) -> Result<f64, GeometryError> {
    let pairs = relative_pairs(pred, gt)?;
    let sum: f64 = pairs
        .iter()
        .map(|(p, g)| rotation_angle(&(p.rotation.transpose() * g.rotation)).to_degrees())
        .sum();
    Ok(sum / pairs.len() as f64)
}

/// Mean L2 distance between relative translations after one global scale
/// `s = argmin Σ‖s·t_pred − t_gt‖²` is applied to the prediction.
pub fn trans_err(pred: &Trajectory, gt: &Trajectory) -> Result<f64, GeometryError> {
    Ok(trans_err_with_scale(pred, gt)?.0)
}

fn trans_err_with_scale(pred: &Trajectory, gt: &Trajectory) -> Result<(f64, f64), GeometryError> {
    let pairs = relative_pairs(pred, gt)?;
    let (num, den) = pairs.iter().fold((0.0, 0.0), |(num, den), (p, g)| {
        (num + p.translation.dot(&g.translation), den + p.translation.norm_squared())
    });
    let s = if den > 0.0 { num / den } else { 1.0 };
    let sum: f64 = pairs.iter().map(|(p, g)| (p.translation * s - g.translation).norm()).sum();
    Ok((sum / pairs.len() as f64, s))
}

impl PoseErrors {
    pub fn compute(pred: &Trajectory, gt: &Trajectory) -> Result<Self, GeometryError> {
        let (trans_err, scale) = trans_err_with_scale(pred, gt)?;
        let n = pred.frame_count();
        Ok(Self { trans_err, rot_err: rot_err(pred, gt)?, pairs: n * (n - 1) / 2, scale })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_trajectory, Intrinsics, TrajectoryKind};

    fn k() -> Intrinsics {
        Intrinsics::centered(100.0, 128).unwrap()
    }

    #[test]
    fn identical_trajectories_have_zero_error() {
        for kind in TrajectoryKind::ALL {
            let tr = make_trajectory(kind, 7, k()).unwrap();
            assert_eq!(trans_err(&tr, &tr).unwrap(), 0.0);
            assert!(rot_err(&tr, &tr).unwrap() < 1e-12);
        }
        let still = Trajectory::stationary(3, k()).unwrap();
        let e = PoseErrors::compute(&still, &still).unwrap();
        assert_eq!((e.trans_err, e.rot_err, e.pairs), (0.0, 0.0, 3));
    }

    #[test]
    fn yaw_drift_brute_force() {
        // pred_i = gt_i ∘ yaw(5°·i) on a pan trajectory: relative error of pair (i, j) is 5°·(j − i).
        let gt = make_trajectory(TrajectoryKind::PanLeft, 6, k()).unwrap();
        let pred = Trajectory {
            poses: gt.poses.iter().enumerate().map(|(i, p)| p.compose(&CameraPose::yaw_degrees(5.0 * i as f64))).collect(),
            intrinsics: gt.intrinsics,
        };
        let mut sum = 0.0;
        let mut count = 0.0;
        for i in 0..6 {
            for j in i + 1..6 {
                sum += 5.0 * (j - i) as f64;
                count += 1.0;
            }
        }
        let err = rot_err(&pred, &gt).unwrap();
        assert!((err - sum / count).abs() < 1e-9, "{err} vs {}", sum / count);
    }

    #[test]
    fn scale_alignment_removes_global_scale() {
        let gt = make_trajectory(TrajectoryKind::ZoomIn, 5, k()).unwrap();
        let pred = Trajectory {
            poses: gt.poses.iter().map(|p| CameraPose { rotation: p.rotation, translation: p.translation * 3.0 }).collect(),
            intrinsics: gt.intrinsics,
        };
        let e = PoseErrors::compute(&pred, &gt).unwrap();
        assert!(e.trans_err < 1e-12);
        assert!((e.scale - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_without_scale_mismatch() {
        let a = make_trajectory(TrajectoryKind::ArcLeft, 5, k()).unwrap();
        let b = make_trajectory(TrajectoryKind::TiltUp, 5, k()).unwrap();
        assert!((rot_err(&a, &b).unwrap() - rot_err(&b, &a).unwrap()).abs() < 1e-12);
        let c = make_trajectory(TrajectoryKind::PanRight, 5, k()).unwrap();
        let d = make_trajectory(TrajectoryKind::ZoomIn, 5, k()).unwrap();
        assert!(trans_err(&c, &d).unwrap() > 0.0);
        assert!(rot_err(&a, &b).unwrap() > 0.0);
    }

    #[test]
    fn frame_count_mismatch() {
        let a = make_trajectory(TrajectoryKind::ArcLeft, 5, k()).unwrap();
        let b = make_trajectory(TrajectoryKind::ArcLeft, 4, k()).unwrap();
        assert!(trans_err(&a, &b).is_err());
        assert!(rot_err(&a, &b).is_err());
    }
}
