use nalgebra::Vector3;
use ndarray::Array2;
use rand::Rng;

use crate::geometry::{CameraPose, Intrinsics};

/// Isotropic Gaussian splat; `radius` is the world-space standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub center: Vector3<f64>,
    pub radius: f64,
    pub color: [f64; 3],
}

/// Blob translating with constant velocity in world units per video frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MovingBlob {
    pub blob: Blob,
    pub velocity: Vector3<f64>,
}

impl MovingBlob {
    pub fn center_at(&self, t_frame: f64) -> Vector3<f64> {
        self.blob.center + self.velocity * t_frame
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub blobs: Vec<Blob>,
    pub moving: Option<MovingBlob>,
    pub background: [f64; 3],
}

const OPACITY: f64 = 0.95;
const NEAR: f64 = 0.1;

impl SyntheticScene {
    /// `k` dim static blobs in a box in front of the camera and one white
    /// moving blob closer in, so it is the brightest thing in view.
    pub fn random(k: usize, rng: &mut impl Rng) -> Self {
        let blobs = (0..k)
            .map(|_| Blob {
                center: Vector3::new(rng.random_range(-2.5..2.5), rng.random_range(-2.0..2.0), rng.random_range(5.0..9.0)),
                radius: rng.random_range(0.5..1.0),
                color: [rng.random_range(0.05..0.5), rng.random_range(0.05..0.5), rng.random_range(0.05..0.5)],
            })
            .collect();
        let moving = MovingBlob {
            blob: Blob {
                center: Vector3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.5..0.5), rng.random_range(3.5..4.5)),
                radius: 0.5,
                color: [1.0, 1.0, 1.0],
            },
            velocity: Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.03..0.03), 0.0),
        };
        Self { blobs, moving: Some(moving), background: [0.05, 0.05, 0.08] }
    }

    pub fn empty(background: [f64; 3]) -> Self {
        Self { blobs: Vec::new(), moving: None, background }
    }

    fn blobs_at(&self, t_frame: f64) -> Vec<Blob> {
        let mut all = self.blobs.clone();
        if let Some(m) = &self.moving {
            all.push(Blob { center: m.center_at(t_frame), ..m.blob.clone() });
        }
        all
    }
}

/// Renders an `h x w` RGB frame (rows flattened row-major, `h·w x 3`) by
/// sampling each token center and compositing blobs back to front.
pub fn render_scene(scene: &SyntheticScene, pose: &CameraPose, k: &Intrinsics, h: usize, w: usize, t_frame: f64) -> Array2<f64> {
    let mut splats: Vec<(f64, f64, f64, f64, [f64; 3])> = scene
        .blobs_at(t_frame)
        .into_iter()
        .filter_map(|b| {
            let pc = pose.world_to_camera(&b.center);
            if pc.z <= NEAR {
                return None;
            }
            let (x, y) = k.project(&pc)?;
            Some((pc.z, x, y, k.fx * b.radius / pc.z, b.color))
        })
        .collect();
    splats.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut out = Array2::zeros((h * w, 3));
    for v in 0..h {
        for u in 0..w {
            let (px, py) = k.token_center(u, v, h, w);
            let mut rgb = scene.background;
            for &(_, x, y, sigma, color) in &splats {
                let d2 = (px - x).powi(2) + (py - y).powi(2);
                let alpha = OPACITY * (-d2 / (2.0 * sigma * sigma)).exp();
                for c in 0..3 {
                    rgb[c] = alpha * color[c] + (1.0 - alpha) * rgb[c];
                }
            }
            for c in 0..3 {
                out[[v * w + u, c]] = rgb[c];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn argmax(frame: &Array2<f64>) -> usize {
        let b: Vec<f64> = frame.outer_iter().map(|r| r.sum()).collect();
        (0..b.len()).max_by(|&i, &j| b[i].total_cmp(&b[j])).unwrap()
    }

    #[test]
    fn empty_scene_is_background() {
        let k = Intrinsics::centered(96.0, 96).unwrap();
        let bg = [0.2, 0.3, 0.4];
        let frame = render_scene(&SyntheticScene::empty(bg), &CameraPose::identity(), &k, 4, 5, 0.0);
        assert_eq!(frame.dim(), (20, 3));
        for row in frame.outer_iter() {
            assert_eq!(row.to_vec(), bg.to_vec());
        }
    }

    #[test]
    fn on_axis_blob_peaks_at_center() {
        let k = Intrinsics::centered(96.0, 96).unwrap();
        let mut scene = SyntheticScene::empty([0.0; 3]);
        scene.blobs.push(Blob { center: Vector3::new(0.0, 0.0, 4.0), radius: 0.4, color: [1.0; 3] });
        let frame = render_scene(&scene, &CameraPose::identity(), &k, 5, 5, 0.0);
        assert_eq!(argmax(&frame), 12);
        // behind the camera: skipped
        let behind = render_scene(&scene, &CameraPose::yaw_degrees(180.0), &k, 5, 5, 0.0);
        assert!(behind.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn yaw_shifts_blob_like_pinhole_projection() {
        let k = Intrinsics::centered(96.0, 96).unwrap();
        let (h, w) = (8, 24);
        let mut scene = SyntheticScene::empty([0.0; 3]);
        let center = Vector3::new(0.3, 0.0, 5.0);
        scene.blobs.push(Blob { center, radius: 0.2, color: [1.0; 3] });
        for yaw in [-10.0f64, 0.0, 5.0, 12.0] {
            let pose = CameraPose::yaw_degrees(yaw);
            let frame = render_scene(&scene, &pose, &k, h, w, 0.0);
            let col = argmax(&frame) % w;
            // scalar pinhole oracle: rotate the point into the camera by −yaw
            let a = (-yaw).to_radians();
            let xc = a.cos() * center.x + a.sin() * center.z;
            let zc = -a.sin() * center.x + a.cos() * center.z;
            let x_px = k.fx * xc / zc + k.cx;
            let want = x_px * w as f64 / k.width as f64;
            assert!((col as f64 + 0.5 - want).abs() <= 0.5 + 1e-9, "yaw {yaw}: {col} vs {want}");
        }
    }

    #[test]
    fn moving_blob_is_brightest_and_moves() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scene = SyntheticScene::random(6, &mut rng);
        let m = scene.moving.as_ref().unwrap();
        assert_eq!(m.center_at(2.0), m.blob.center + 2.0 * m.velocity);
        for b in &scene.blobs {
            assert!(b.radius > 0.0 && b.color.iter().all(|&c| c < 1.0));
            assert!(b.center.z > m.blob.center.z);
        }
    }
}
