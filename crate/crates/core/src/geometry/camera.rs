use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{CameraPose, GeometryError};

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    /// Square image with the principal point at the center.
    pub fn centered(focal: f64, size: u32) -> Result<Self, GeometryError> {
        let c = size as f64 / 2.0;
        Self::new(focal, focal, c, c, size, size)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: &str| Err(GeometryError::InvalidIntrinsics(m.to_string()));
        if !(self.fx.is_finite() && self.fx > 0.0 && self.fy.is_finite() && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive");
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad("principal point outside the image");
        }
        Ok(())
    }

    /// Image-plane coordinates of the center of token `(u, v)` on an `h x w` grid.
    pub fn token_center(&self, u: usize, v: usize, h: usize, w: usize) -> (f64, f64) {
        (
            (u as f64 + 0.5) * self.width as f64 / w as f64,
            (v as f64 + 0.5) * self.height as f64 / h as f64,
        )
    }

    /// Camera-frame ray (unnormalized, z = 1) through image point `(x, y)`.
    pub fn unproject(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0)
    }

    /// Image-plane projection of a camera-frame point; `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        (p.z > 0.0).then(|| (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Image-plane point converted to continuous token coordinates on an `h x w` grid.
    pub fn to_token_coords(&self, x: f64, y: f64, h: usize, w: usize) -> (f64, f64) {
        (x * w as f64 / self.width as f64, y * h as f64 / self.height as f64)
    }
}

/// Plücker line of one viewing ray: unit direction and moment `origin × direction`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub direction: Vector3<f64>,
    pub moment: Vector3<f64>,
}

impl Ray {
    pub fn features(&self) -> [f64; 6] {
        let (d, m) = (self.direction, self.moment);
        [d.x, d.y, d.z, m.x, m.y, m.z]
    }
}

/// Per-token rays of one frame, row-major over the `h x w` token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PlueckerMap {
    pub h: usize,
    pub w: usize,
    pub rays: Vec<Ray>,
}

impl PlueckerMap {
    pub fn get(&self, row: usize, col: usize) -> &Ray {
        &self.rays[row * self.w + col]
    }

    /// Largest |d·m| and largest ||d| − 1| over the map.
    pub fn constraint_residuals(&self) -> (f64, f64) {
        self.rays.iter().fold((0.0, 0.0), |(dm, norm), r| {
            (dm.max(r.direction.dot(&r.moment).abs()), norm.max((r.direction.norm() - 1.0).abs()))
        })
    }
}

/// Plücker ray map for the token grid of one camera.
///
/// Token `(u, v)` samples the image at `((u+0.5)·W/w, (v+0.5)·H/h)`.
pub fn pluecker_map(pose: &CameraPose, k: &Intrinsics, h: usize, w: usize) -> Result<PlueckerMap, GeometryError> {
    if h == 0 || w == 0 {
        return Err(GeometryError::EmptyGrid { h, w });
    }
    k.validate()?;
    let mut rays = Vec::with_capacity(h * w);
    for v in 0..h {
        for u in 0..w {
            let (x, y) = k.token_center(u, v, h, w);
            let direction = (pose.rotation * k.unproject(x, y)).normalize();
            let moment = pose.translation.cross(&direction);
            rays.push(Ray { direction, moment });
        }
    }
    Ok(PlueckerMap { h, w, rays })
}
