//! Rotary position embeddings.
//!
//! Feature vectors are read as complex vectors: channel `2c` is the real part
//! and channel `2c + 1` the imaginary part of complex channel `c`. A
//! [`RotationField`] holds one unit complex number per (token, complex channel)
//! and rotates feature pairs by elementwise complex multiplication.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};
use thiserror::Error;

use crate::Real;

pub const ROPE_BASE: f64 = 10000.0;

#[derive(Debug, Error, PartialEq)]
pub enum RopeError {
    #[error("head dimension must be even and >= 2, got {0}")]
    BadHeadDim(usize),
    #[error("3D RoPE needs a head dimension divisible by 6, got {0}")]
    NotDivisibleBySix(usize),
    #[error("grid extents must be >= 1, got {0:?}")]
    EmptyGrid([usize; 3]),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Per-channel angular frequencies `θ_c = base^{-(c-1)/(d/2)}`, `c = 1..d/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencySchedule {
    theta: Vec<f64>,
}

impl FrequencySchedule {
    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn channels(&self) -> usize {
        self.theta.len()
    }
}

pub fn frequency_schedule(d_head: usize) -> Result<FrequencySchedule, RopeError> {
    frequency_schedule_with_base(d_head, ROPE_BASE)
}

pub fn frequency_schedule_with_base(d_head: usize, base: f64) -> Result<FrequencySchedule, RopeError> {
    if d_head < 2 || !d_head.is_multiple_of(2) {
        return Err(RopeError::BadHeadDim(d_head));
    }
    let half = (d_head / 2) as f64;
    let theta = (0..d_head / 2).map(|c| base.powf(-(c as f64) / half)).collect();
    Ok(FrequencySchedule { theta })
}

/// Unit-modulus complex field over tokens x complex channels, stored as the
/// angle together with its cosine and sine.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationField<T> {
    angle: Array2<T>,
    cos: Array2<T>,
    sin: Array2<T>,
}

impl<T: Real> RotationField<T> {
    pub fn from_angles(angle: Array2<T>) -> Self {
        let cos = angle.mapv(|a| a.cos());
        let sin = angle.mapv(|a| a.sin());
        Self { angle, cos, sin }
    }

    /// Builds from f64 angles, evaluating the trigonometry in f64 before
    /// narrowing to `T`.
    pub fn from_angles_f64(angle: &Array2<f64>) -> Self {
        Self {
            angle: angle.mapv(T::lit),
            cos: angle.mapv(|a| T::lit(a.cos())),
            sin: angle.mapv(|a| T::lit(a.sin())),
        }
    }

    pub fn identity(tokens: usize, channels: usize) -> Self {
        Self::from_angles(Array2::zeros((tokens, channels)))
    }

    pub fn tokens(&self) -> usize {
        self.angle.nrows()
    }

    pub fn channels(&self) -> usize {
        self.angle.ncols()
    }

    pub fn angles(&self) -> &Array2<T> {
        &self.angle
    }

    pub fn cos(&self) -> &Array2<T> {
        &self.cos
    }

    pub fn sin(&self) -> &Array2<T> {
        &self.sin
    }

    /// Field with angles `self + extra`, i.e. the Hadamard product of the two
    /// unit complex fields, evaluated with a single cos/sin per element.
    pub fn add_angles(&self, extra: ArrayView2<T>) -> Result<Self, RopeError> {
        if extra.dim() != self.angle.dim() {
            return Err(RopeError::Shape(format!("phase {:?} vs field {:?}", extra.dim(), self.angle.dim())));
        }
        Ok(Self::from_angles(&self.angle + &extra))
    }

    /// Stacks the field on top of itself: rows `[0, N)` equal rows `[N, 2N)`.
    pub fn duplicated(&self) -> Self {
        let stack = |a: &Array2<T>| concatenate(Axis(0), &[a.view(), a.view()]).expect("same width");
        Self { angle: stack(&self.angle), cos: stack(&self.cos), sin: stack(&self.sin) }
    }

    pub fn conj(&self) -> Self {
        Self { angle: self.angle.mapv(|a| -a), cos: self.cos.clone(), sin: self.sin.mapv(|s| -s) }
    }

    /// Largest |cos² + sin² − 1|.
    pub fn modulus_error(&self) -> T {
        Zip::from(&self.cos)
            .and(&self.sin)
            .fold(T::zero(), |m, &c, &s| m.max((c * c + s * s - T::one()).abs()))
    }
}

/// 1D RoPE: row `n` holds angles `θ_c·n` with `θ` from a `2·channels` head.
pub fn rope_1d<T: Real>(length: usize, channels: usize) -> Result<RotationField<T>, RopeError> {
    rope_1d_with_base(length, channels, ROPE_BASE)
}

pub fn rope_1d_with_base<T: Real>(length: usize, channels: usize, base: f64) -> Result<RotationField<T>, RopeError> {
    let sched = frequency_schedule_with_base(2 * channels, base)?;
    let angles = Array2::from_shape_fn((length, channels), |(n, c)| sched.theta[c] * n as f64);
    Ok(RotationField::from_angles_f64(&angles))
}

/// 3D RoPE over an `f x h x w` token grid flattened frame-major, then row,
/// then column. Channels `[0, d/6)` encode the frame index, `[d/6, d/3)` the
/// row and `[d/3, d/2)` the column; each axis uses the schedule of a `d/3`
/// head.
pub fn rope_3d<T: Real>(f: usize, h: usize, w: usize, d_head: usize) -> Result<RotationField<T>, RopeError> {
    rope_3d_with_base(f, h, w, d_head, ROPE_BASE)
}

pub fn rope_3d_with_base<T: Real>(
    f: usize,
    h: usize,
    w: usize,
    d_head: usize,
    base: f64,
) -> Result<RotationField<T>, RopeError> {
    Ok(RotationField::from_angles_f64(&rope_3d_angles(f, h, w, d_head, base)?))
}

pub(crate) fn rope_3d_angles(f: usize, h: usize, w: usize, d_head: usize, base: f64) -> Result<Array2<f64>, RopeError> {
    if d_head == 0 || !d_head.is_multiple_of(6) {
        return Err(RopeError::NotDivisibleBySix(d_head));
    }
    if f == 0 || h == 0 || w == 0 {
        return Err(RopeError::EmptyGrid([f, h, w]));
    }
    let per_axis = d_head / 6;
    let sched = frequency_schedule_with_base(d_head / 3, base)?;
    let mut angles = Array2::zeros((f * h * w, d_head / 2));
    for (token, mut row) in angles.outer_iter_mut().enumerate() {
        let pos = [token / (h * w), (token / w) % h, token % w];
        for (axis, &p) in pos.iter().enumerate() {
            let mut block = row.slice_mut(s![axis * per_axis..(axis + 1) * per_axis]);
            for (c, a) in block.iter_mut().enumerate() {
                *a = sched.theta[c] * p as f64;
            }
        }
    }
    Ok(angles)
}

/// 3D RoPE shared by the target and source halves of a `2N`-token sequence.
pub fn shared_rope_for_pair<T: Real>(f: usize, h: usize, w: usize, d_head: usize) -> Result<RotationField<T>, RopeError> {
    Ok(rope_3d::<T>(f, h, w, d_head)?.duplicated())
}

/// Complex elementwise product of `x` (tokens x 2C) with the field (tokens x C).
pub fn apply_rotation<T: Real>(x: ArrayView2<T>, r: &RotationField<T>) -> Result<Array2<T>, RopeError> {
    if x.nrows() != r.tokens() || x.ncols() != 2 * r.channels() {
        return Err(RopeError::Shape(format!(
            "tensor {:?} vs field {}x{}",
            x.dim(),
            r.tokens(),
            r.channels()
        )));
    }
    let mut out = x.to_owned();
    rotate_in_place(&mut out, r.cos.view(), r.sin.view(), false);
    Ok(out)
}

/// Rotates consecutive feature pairs of `x` by the angles whose cosines and
/// sines are given, or by their negatives when `inverse` is set.
pub(crate) fn rotate_in_place<T: Real>(x: &mut Array2<T>, cos: ArrayView2<T>, sin: ArrayView2<T>, inverse: bool) {
    debug_assert_eq!(x.ncols(), 2 * cos.ncols());
    debug_assert_eq!(x.nrows(), cos.nrows());
    for ((mut row, c), s) in x.outer_iter_mut().zip(cos.outer_iter()).zip(sin.outer_iter()) {
        let row = row.as_slice_mut().expect("owned rows are contiguous");
        for ((pair, &c), &s) in row.chunks_exact_mut(2).zip(c.iter()).zip(s.iter()) {
            let s = if inverse { -s } else { s };
            let (a, b) = (pair[0], pair[1]);
            pair[0] = a * c - b * s;
            pair[1] = a * s + b * c;
        }
    }
}
