//! Camera geometry.
//!
//! Conventions used throughout: poses are camera-to-world, the camera looks
//! along its +z axis, +x points right and +y points down (right-handed).
//! Yaw is rotation about the camera +y axis (positive yaw turns the view to the
//! right), pitch is rotation about the camera +x axis (positive pitch turns the
//! view up).

mod camera;
mod io;
mod metrics;
mod pose;
mod trajectory;

use thiserror::Error;

pub use camera::{pluecker_map, Intrinsics, PlueckerMap, Ray};
pub use io::{read_trajectory, read_trajectory_str, trajectory_to_jsonl, write_trajectory, TrajectoryRecord};
pub use metrics::{rot_err, trans_err, PoseErrors};
pub use pose::CameraPose;
pub use trajectory::{
    identity_retake_pair, make_trajectory, make_trajectory_scaled, per_frame_update, time_reverse,
    PoseIncrement, RetakePair, Trajectory, TrajectoryKind,
};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("rotation is not orthonormal with det +1 (deviation {0:.3e})")]
    NotARotation(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("token grid must be at least 1x1, got {h}x{w}")]
    EmptyGrid { h: usize, w: usize },
    #[error("trajectory needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("frame count mismatch: {0} vs {1}")]
    FrameCountMismatch(usize, usize),
    #[error("unknown trajectory kind '{0}'")]
    UnknownKind(String),
    #[error("quaternion norm {0} is not within 1e-6 of 1")]
    NonUnitQuaternion(f64),
    #[error("trajectory file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("trajectory file frames are not numbered 0..F-1 (line {0})")]
    FrameOrder(usize),
    #[error("intrinsics differ between frames (frame {0})")]
    MixedIntrinsics(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
