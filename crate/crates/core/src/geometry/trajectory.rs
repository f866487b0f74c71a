use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{CameraPose, GeometryError, Intrinsics};

/// The ten evaluation trajectories, each defined by its total motion over the
/// sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    PanRight,
    PanLeft,
    TiltUp,
    TiltDown,
    ZoomIn,
    ZoomOut,
    TranslateUp,
    TranslateDown,
    ArcLeft,
    ArcRight,
}

impl TrajectoryKind {
    pub const ALL: [TrajectoryKind; 10] = [
        TrajectoryKind::PanRight,
        TrajectoryKind::PanLeft,
        TrajectoryKind::TiltUp,
        TrajectoryKind::TiltDown,
        TrajectoryKind::ZoomIn,
        TrajectoryKind::ZoomOut,
        TrajectoryKind::TranslateUp,
        TrajectoryKind::TranslateDown,
        TrajectoryKind::ArcLeft,
        TrajectoryKind::ArcRight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrajectoryKind::PanRight => "pan_right",
            TrajectoryKind::PanLeft => "pan_left",
            TrajectoryKind::TiltUp => "tilt_up",
            TrajectoryKind::TiltDown => "tilt_down",
            TrajectoryKind::ZoomIn => "zoom_in",
            TrajectoryKind::ZoomOut => "zoom_out",
            TrajectoryKind::TranslateUp => "translate_up",
            TrajectoryKind::TranslateDown => "translate_down",
            TrajectoryKind::ArcLeft => "arc_left",
            TrajectoryKind::ArcRight => "arc_right",
        }
    }

    /// Total motion over the whole sequence: (yaw degrees, pitch degrees,
    /// translation in the first camera's frame).
    ///
    /// Up is -y and outward (zoom out) is -z in the camera frame.
    pub fn total_motion(self) -> (f64, f64, Vector3<f64>) {
        use TrajectoryKind::*;
        match self {
            PanRight => (20.0, 0.0, Vector3::zeros()),
            PanLeft => (-20.0, 0.0, Vector3::zeros()),
            TiltUp => (0.0, 10.0, Vector3::zeros()),
            TiltDown => (0.0, -10.0, Vector3::zeros()),
            ZoomIn => (0.0, 0.0, Vector3::new(0.0, 0.0, 2.0)),
            ZoomOut => (0.0, 0.0, Vector3::new(0.0, 0.0, -2.0)),
            // tilt down while rising, tilt up while sinking; both move outward
            TranslateUp => (0.0, -14.0, Vector3::new(0.0, -1.0, -0.12)),
            TranslateDown => (0.0, 14.0, Vector3::new(0.0, 1.0, -0.12)),
            // pan right while moving left and vice versa; both move inward
            ArcLeft => (30.0, 0.0, Vector3::new(-2.0, 0.0, 0.01)),
            ArcRight => (-30.0, 0.0, Vector3::new(2.0, 0.0, 0.01)),
        }
    }
}

impl fmt::Display for TrajectoryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrajectoryKind {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| GeometryError::UnknownKind(s.to_string()))
    }
}

/// Constant per-frame camera update.
///
/// The rotation is applied in the current camera frame, the translation is
/// accumulated in the frame of the first camera, so that after `F-1` steps the
/// camera has rotated and moved by exactly the kind's totals regardless of `F`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseIncrement {
    pub rotation: CameraPose,
    pub translation: Vector3<f64>,
}

impl PoseIncrement {
    pub fn apply(&self, pose: &CameraPose) -> CameraPose {
        let rotated = pose.compose(&self.rotation);
        CameraPose::from_translation(self.translation.x, self.translation.y, self.translation.z).compose(&rotated)
    }
}

pub fn per_frame_update(kind: TrajectoryKind, frames: usize, scale: f64) -> Result<PoseIncrement, GeometryError> {
    if frames < 2 {
        return Err(GeometryError::TooFewFrames(frames));
    }
    let steps = (frames - 1) as f64;
    let (yaw, pitch, t) = kind.total_motion();
    let rotation = CameraPose::yaw_degrees(scale * yaw / steps).compose(&CameraPose::pitch_degrees(scale * pitch / steps));
    Ok(PoseIncrement { rotation, translation: t * (scale / steps) })
}

/// Per-frame camera poses with shared intrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<CameraPose>,
    pub intrinsics: Intrinsics,
}

impl Trajectory {
    pub fn new(poses: Vec<CameraPose>, intrinsics: Intrinsics) -> Result<Self, GeometryError> {
        if poses.len() < 2 {
            return Err(GeometryError::TooFewFrames(poses.len()));
        }
        intrinsics.validate()?;
        Ok(Self { poses, intrinsics })
    }

    /// A camera that never moves.
    pub fn stationary(frames: usize, intrinsics: Intrinsics) -> Result<Self, GeometryError> {
        Self::new(vec![CameraPose::identity(); frames], intrinsics)
    }

    pub fn frame_count(&self) -> usize {
        self.poses.len()
    }

    /// Frames in reverse order. Poses are not re-anchored to the identity.
    pub fn time_reversed(&self) -> Self {
        Self { poses: time_reverse(&self.poses), intrinsics: self.intrinsics }
    }

    /// Poses of video frames `0, stride, 2·stride, …` for `count` latent frames.
    pub fn subsample(&self, count: usize, stride: usize) -> Result<Vec<CameraPose>, GeometryError> {
        let needed = (count.max(1) - 1) * stride + 1;
        if self.poses.len() < needed {
            return Err(GeometryError::FrameCountMismatch(self.poses.len(), needed));
        }
        Ok((0..count).map(|i| self.poses[i * stride]).collect())
    }
}

pub fn make_trajectory(kind: TrajectoryKind, frames: usize, k: Intrinsics) -> Result<Trajectory, GeometryError> {
    make_trajectory_scaled(kind, frames, k, 1.0)
}

/// Trajectory whose total motion is `scale` times the kind's nominal motion.
pub fn make_trajectory_scaled(
    kind: TrajectoryKind,
    frames: usize,
    k: Intrinsics,
    scale: f64,
) -> Result<Trajectory, GeometryError> {
    let step = per_frame_update(kind, frames, scale)?;
    let mut poses = Vec::with_capacity(frames);
    poses.push(CameraPose::identity());
    for i in 1..frames {
        let next = step.apply(&poses[i - 1]);
        poses.push(next);
    }
    Trajectory::new(poses, k)
}

pub fn time_reverse<T: Clone>(frames: &[T]) -> Vec<T> {
    frames.iter().rev().cloned().collect()
}

/// Input and target sides of a retake training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RetakePair<V> {
    pub input: (V, Trajectory),
    pub target: (V, Trajectory),
}

/// A pair whose target is its own input.
pub fn identity_retake_pair<V: Clone>(
    video: V,
    frames_in_video: usize,
    traj: Trajectory,
) -> Result<RetakePair<V>, GeometryError> {
    if frames_in_video != traj.frame_count() {
        return Err(GeometryError::FrameCountMismatch(frames_in_video, traj.frame_count()));
    }
    Ok(RetakePair { input: (video.clone(), traj.clone()), target: (video, traj) })
}
