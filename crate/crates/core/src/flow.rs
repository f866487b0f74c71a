//! Rectified flow: the straight-line interpolant `z_t = t·z1 + (1 − t)·z0`,
//! the flow-matching loss against the constant velocity `z1 − z0`, and an
//! explicit Euler sampler integrating from `t = 1` down to `t = 0`.
//!
//! `z0` is data and `z1` is noise throughout.

use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Real;

#[derive(Debug, Error, PartialEq)]
pub enum FlowError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("sampler needs at least one step")]
    NoSteps,
}

/// A velocity field `u(z, t | cond)`.
pub trait VelocityModel<T, C: ?Sized> {
    fn velocity(&self, z: ArrayView2<T>, t: f64, cond: &C) -> Array2<T>;
}

impl<T, C: ?Sized, F> VelocityModel<T, C> for F
where
    F: Fn(ArrayView2<T>, f64, &C) -> Array2<T>,
{
    fn velocity(&self, z: ArrayView2<T>, t: f64, cond: &C) -> Array2<T> {
        self(z, t, cond)
    }
}

fn check_time(t: f64) -> Result<(), FlowError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowError::TimeOutOfRange(t));
    }
    Ok(())
}

fn check_shapes<T>(a: &ArrayView2<T>, b: &ArrayView2<T>) -> Result<(), FlowError> {
    if a.dim() != b.dim() {
        return Err(FlowError::Shape(a.dim(), b.dim()));
    }
    Ok(())
}

pub fn interpolate<T: Real>(z0: ArrayView2<T>, z1: ArrayView2<T>, t: f64) -> Result<Array2<T>, FlowError> {
    check_shapes(&z0, &z1)?;
    check_time(t)?;
    let (a, b) = (T::lit(1.0 - t), T::lit(t));
    Ok(Zip::from(&z0).and(&z1).map_collect(|&x0, &x1| b * x1 + a * x0))
}

/// Mean squared error, accumulated in f64.
pub fn mse<T: Real>(pred: ArrayView2<T>, target: ArrayView2<T>) -> Result<f64, FlowError> {
    check_shapes(&pred, &target)?;
    let mut acc = 0.0;
    Zip::from(&pred).and(&target).for_each(|&p, &q| {
        let e = (p - q).to_f64().unwrap();
        acc += e * e;
    });
    Ok(acc / pred.len().max(1) as f64)
}

/// Flow-matching loss `mean((z1 − z0) − u(z_t, t))²`.
pub fn cfm_loss<T: Real, C: ?Sized>(
    model: &impl VelocityModel<T, C>,
    z0: ArrayView2<T>,
    z1: ArrayView2<T>,
    t: f64,
    cond: &C,
) -> Result<f64, FlowError> {
    let zt = interpolate(z0, z1, t)?;
    let u = model.velocity(zt.view(), t, cond);
    let target = &z1 - &z0;
    mse(u.view(), target.view())
}

/// Euler integration `z ← z − Δt·u(z, t)` on `t = 1, 1 − Δt, …, Δt`.
pub fn sample<T: Real, C: ?Sized>(
    model: &impl VelocityModel<T, C>,
    z_init: ArrayView2<T>,
    steps: usize,
    cond: &C,
) -> Result<Array2<T>, FlowError> {
    if steps == 0 {
        return Err(FlowError::NoSteps);
    }
    let dt = 1.0 / steps as f64;
    let mut z = z_init.to_owned();
    for k in 0..steps {
        let t = 1.0 - k as f64 * dt;
        let u = model.velocity(z.view(), t, cond);
        check_shapes(&z.view(), &u.view())?;
        z.scaled_add(T::lit(-dt), &u);
    }
    Ok(z)
}

pub const DEFAULT_SAMPLE_STEPS: usize = 50;

/// Training-time distribution of `t`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TimestepSampler {
    #[default]
    Uniform,
    /// `t = sigmoid(mean + std·ε)`.
    LogitNormal { mean: f64, std: f64 },
}

impl TimestepSampler {
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            Self::Uniform => rng.random::<f64>(),
            Self::LogitNormal { mean, std } => {
                let e: f64 = StandardNormal.sample(rng);
                1.0 / (1.0 + (-(mean + std * e)).exp())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn interpolate_endpoints() {
        let z0 = array![[1.0, -2.0], [0.5, 3.0]];
        let z1 = array![[4.0, 0.0], [-1.0, 2.0]];
        assert_eq!(interpolate(z0.view(), z1.view(), 0.0).unwrap(), z0);
        assert_eq!(interpolate(z0.view(), z1.view(), 1.0).unwrap(), z1);
        let mid = interpolate(Array2::<f64>::zeros((1, 3)).view(), Array2::from_elem((1, 3), 2.0).view(), 0.5).unwrap();
        assert!(mid.iter().all(|&x| x == 1.0));
        assert_eq!(interpolate(z0.view(), z1.view(), 1.5), Err(FlowError::TimeOutOfRange(1.5)));
        assert!(interpolate(z0.view(), Array2::zeros((3, 2)).view(), 0.5).is_err());
    }

    #[test]
    fn loss_cases() {
        let z0 = array![[0.0, 1.0, 2.0]];
        let z1 = array![[1.0, 2.0, 3.0]];
        let exact = |_: ArrayView2<f64>, _: f64, d: &Array2<f64>| d.clone();
        let delta = &z1 - &z0;
        assert_eq!(cfm_loss(&exact, z0.view(), z1.view(), 0.3, &delta).unwrap(), 0.0);
        let zero = |z: ArrayView2<f64>, _: f64, _: &()| Array2::zeros(z.raw_dim());
        assert_eq!(cfm_loss(&zero, z0.view(), z1.view(), 0.7, &()).unwrap(), 1.0);

        // hand-computed: u = 2·z_t at t = 0.25
        let z0 = array![[0.5, -1.0], [2.0, 0.0]];
        let z1 = array![[1.5, 1.0], [0.0, -2.0]];
        let double = |z: ArrayView2<f64>, _: f64, _: &()| z.to_owned() * 2.0;
        let mut want = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let zt = 0.25 * z1[[i, j]] + 0.75 * z0[[i, j]];
                let e: f64 = (z1[[i, j]] - z0[[i, j]]) - 2.0 * zt;
                want += e * e;
            }
        }
        let got = cfm_loss(&double, z0.view(), z1.view(), 0.25, &()).unwrap();
        assert!((got - want / 4.0).abs() < 1e-12);
    }

    #[test]
    fn sampler_cases() {
        let z = array![[1.0, -2.0, 0.5]];
        let c = array![[0.25, 1.0, -3.0]];
        let constant = |_: ArrayView2<f64>, _: f64, c: &Array2<f64>| c.clone();
        for steps in [1, 3, 50] {
            let out = sample(&constant, z.view(), steps, &c).unwrap();
            assert!((&out - &(&z - &c)).iter().all(|x| x.abs() < 1e-12));
        }
        let zero = |z: ArrayView2<f64>, _: f64, _: &()| Array2::zeros(z.raw_dim());
        assert_eq!(sample(&zero, z.view(), 7, &()).unwrap(), z);
        let linear = |z: ArrayView2<f64>, _: f64, _: &()| z.to_owned();
        let out = sample(&linear, z.view(), 4, &()).unwrap();
        assert!((&out - &(&z * 0.75f64.powi(4))).iter().all(|x| x.abs() < 1e-15));
        assert_eq!(sample(&zero, z.view(), 0, &()), Err(FlowError::NoSteps));
    }

    #[test]
    fn sampler_visits_uniform_grid() {
        let seen = std::cell::RefCell::new(Vec::new());
        let record = |z: ArrayView2<f64>, t: f64, _: &()| {
            seen.borrow_mut().push(t);
            Array2::zeros(z.raw_dim())
        };
        sample(&record, Array2::zeros((1, 1)).view(), 4, &()).unwrap();
        assert_eq!(*seen.borrow(), vec![1.0, 0.75, 0.5, 0.25]);
    }

    #[test]
    fn timestep_samplers_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in [TimestepSampler::Uniform, TimestepSampler::LogitNormal { mean: 0.0, std: 1.0 }] {
            let ts: Vec<f64> = (0..2000).map(|_| s.sample(&mut rng)).collect();
            assert!(ts.iter().all(|t| (0.0..=1.0).contains(t)));
            let mean = ts.iter().sum::<f64>() / ts.len() as f64;
            assert!((mean - 0.5).abs() < 0.03);
        }
    }

    proptest! {
        #[test]
        fn interpolate_is_affine(a in -10.0f64..10.0, b in -10.0f64..10.0, t in 0.0f64..=1.0) {
            let (za, zb) = (Array2::from_elem((1, 1), a), Array2::from_elem((1, 1), b));
            let s = interpolate(za.view(), zb.view(), t).unwrap() + interpolate(zb.view(), za.view(), t).unwrap();
            prop_assert!((s[[0, 0]] - (a + b)).abs() <= 1e-14 * (1.0 + a.abs() + b.abs()));
        }

        #[test]
        fn zero_loss_iff_exact(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z0 = crate::nn::randn::<f64>(3, 4, 1.0, &mut rng);
            let z1 = crate::nn::randn::<f64>(3, 4, 1.0, &mut rng);
            let delta = &z1 - &z0;
            let exact = |_: ArrayView2<f64>, _: f64, d: &Array2<f64>| d.clone();
            prop_assert!(cfm_loss(&exact, z0.view(), z1.view(), 0.4, &delta).unwrap() <= 1e-12);
            let bumped = |_: ArrayView2<f64>, _: f64, d: &Array2<f64>| d + 1e-3;
            prop_assert!(cfm_loss(&bumped, z0.view(), z1.view(), 0.4, &delta).unwrap() > 1e-12);
        }
    }
}
