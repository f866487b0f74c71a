use ndarray::{concatenate, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{render_scene, SyntheticScene, ToyConfig, ToyError};
use crate::geometry::{identity_retake_pair, make_trajectory, time_reverse, Trajectory, TrajectoryKind};
use crate::roce::{build_camera_tokens, CameraTokens};

/// One retake example: source and target latents of the same scene at the
/// same timestamps, with video-rate trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBatchItem {
    /// `N x 3`, latent frames stacked frame-major.
    pub source: Array2<f64>,
    pub target: Array2<f64>,
    pub traj_s: Trajectory,
    pub traj_t: Trajectory,
    /// `None` for trajectories not produced by a generator.
    pub kind_s: Option<TrajectoryKind>,
    pub kind_t: Option<TrajectoryKind>,
    pub identity: bool,
    pub reversed: bool,
    pub scene: SyntheticScene,
    pub seed: u64,
}

impl ToyBatchItem {
    /// Renders both videos of `scene` along the given video-rate trajectories.
    pub fn from_scene(
        scene: SyntheticScene,
        traj_s: Trajectory,
        traj_t: Trajectory,
        cfg: &ToyConfig,
        seed: u64,
    ) -> Result<Self, ToyError> {
        let source = render_latents(&scene, &traj_s, cfg)?;
        let target = render_latents(&scene, &traj_t, cfg)?;
        let identity = traj_s == traj_t;
        Ok(Self { source, target, traj_s, traj_t, kind_s: None, kind_t: None, identity, reversed: false, scene, seed })
    }

    pub fn camera_tokens(&self, cfg: &ToyConfig) -> Result<CameraTokens, ToyError> {
        Ok(build_camera_tokens(&self.traj_t, &self.traj_s, cfg.f, cfg.h, cfg.w, cfg.stride)?)
    }

    /// Scene time (in video frames) shown by latent frame `i`.
    pub fn scene_time(&self, i: usize, cfg: &ToyConfig) -> f64 {
        let j = if self.reversed { cfg.f - 1 - i } else { i };
        (j * cfg.stride) as f64
    }
}

/// Latents `2·rgb − 1` of latent frames `0..f`, frame `i` rendered at the
/// pose and time of video frame `i·stride`.
pub fn render_latents(scene: &SyntheticScene, traj: &Trajectory, cfg: &ToyConfig) -> Result<Array2<f64>, ToyError> {
    let poses = traj.subsample(cfg.f, cfg.stride)?;
    let frames: Vec<Array2<f64>> = poses
        .iter()
        .enumerate()
        .map(|(i, p)| render_scene(scene, p, &traj.intrinsics, cfg.h, cfg.w, (i * cfg.stride) as f64))
        .collect();
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    Ok(concatenate(Axis(0), &views).expect("equal widths").mapv(|x| 2.0 * x - 1.0))
}

fn reverse_frames(latents: &Array2<f64>, per_frame: usize) -> Array2<f64> {
    let chunks: Vec<_> = (0..latents.nrows() / per_frame)
        .map(|i| latents.slice(ndarray::s![i * per_frame..(i + 1) * per_frame, ..]))
        .collect();
    concatenate(Axis(0), &time_reverse(&chunks)).expect("equal widths")
}

fn make_item(cfg: &ToyConfig, seed: u64) -> Result<ToyBatchItem, ToyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.intrinsics()?;
    let frames = cfg.video_frames().max(2);
    let scene = SyntheticScene::random(cfg.blobs, &mut rng);
    let kinds = TrajectoryKind::ALL;
    let kind_s = kinds[rng.random_range(0..kinds.len())];
    let mut kind_t = kinds[rng.random_range(0..kinds.len())];
    let identity = rng.random::<f64>() < cfg.identity_ratio;
    let reversed = rng.random::<f64>() < cfg.reverse_ratio;

    let traj_s = make_trajectory(kind_s, frames, k)?;
    let source = render_latents(&scene, &traj_s, cfg)?;
    let (source, traj_s, target, traj_t) = if identity {
        kind_t = kind_s;
        let pair = identity_retake_pair(source, frames, traj_s)?;
        (pair.input.0, pair.input.1, pair.target.0, pair.target.1)
    } else {
        let traj_t = make_trajectory(kind_t, frames, k)?;
        let target = render_latents(&scene, &traj_t, cfg)?;
        (source, traj_s, target, traj_t)
    };
    let item = if reversed {
        let per = cfg.h * cfg.w;
        ToyBatchItem {
            source: reverse_frames(&source, per),
            target: reverse_frames(&target, per),
            traj_s: traj_s.time_reversed(),
            traj_t: traj_t.time_reversed(),
            kind_s: Some(kind_s),
            kind_t: Some(kind_t),
            identity,
            reversed,
            scene,
            seed,
        }
    } else {
        ToyBatchItem { source, target, traj_s, traj_t, kind_s: Some(kind_s), kind_t: Some(kind_t), identity, reversed, scene, seed }
    };
    Ok(item)
}

/// `n` items, reproducible from `seed`.
pub fn make_dataset(cfg: &ToyConfig, n: usize, seed: u64) -> Result<Vec<ToyBatchItem>, ToyError> {
    if n == 0 {
        return Err(ToyError::Config("dataset needs at least one item".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| make_item(cfg, master.random())).collect()
}
