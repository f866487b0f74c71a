//! Minimal layers with hand-written backward passes.
//!
//! Parameters live in a [`ParamStore`]; layers hold [`ParamId`]s into it. Every
//! parameter is a 2D array (biases and norm gains are `1 x n`). Gradients are
//! accumulated into a [`Grads`] with the same layout.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// What a parameter belongs to; drives freezing and the checkpoint manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Embed,
    Time,
    Norm,
    Attention,
    PhaseQk,
    PhaseVo,
    FeedForward,
    Output,
}

impl Role {
    pub fn is_phase(self) -> bool {
        matches!(self, Role::PhaseQk | Role::PhaseVo)
    }

    /// Parameters of the self-attention layers, including camera phase networks.
    pub fn is_attention(self) -> bool {
        matches!(self, Role::Attention | Role::PhaseQk | Role::PhaseVo)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub role: Role,
    pub value: Array2<T>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, role: Role, value: Array2<T>) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), role, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn zeros_like(&self) -> Grads<T> {
        Grads { g: self.entries.iter().map(|e| Array2::zeros(e.value.raw_dim())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    role: e.role,
                    value: e.value.mapv(|x| U::lit(x.to_f64().unwrap())),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub g: Vec<Array2<T>>,
}

impl<T: Real> Grads<T> {
    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.g[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.g[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads<T>) {
        for (a, b) in self.g.iter_mut().zip(&other.g) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for a in &mut self.g {
            a.mapv_inplace(|x| x * s);
        }
    }

    pub fn squared_norm(&self) -> T {
        self.g.iter().flat_map(|a| a.iter()).map(|&x| x * x).sum()
    }
}

pub fn randn<T: Real>(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Array2<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || T::lit(normal.sample(rng)))
}

/// `y = x·W + b` with `W: in x out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Xavier-normal weights, zero bias.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        role: Role,
        inputs: usize,
        outputs: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (2.0 / (inputs + outputs) as f64).sqrt();
        let w = store.add(format!("{name}.weight"), role, randn(inputs, outputs, std, rng));
        let b = bias.then(|| store.add(format!("{name}.bias"), role, Array2::zeros((1, outputs))));
        Self { w, b }
    }

    pub fn zeros<T: Real>(store: &mut ParamStore<T>, name: &str, role: Role, inputs: usize, outputs: usize) -> Self {
        let w = store.add(format!("{name}.weight"), role, Array2::zeros((inputs, outputs)));
        let b = Some(store.add(format!("{name}.bias"), role, Array2::zeros((1, outputs))));
        Self { w, b }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(store.get(self.w));
        if let Some(b) = self.b {
            y += store.get(b);
        }
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: ArrayView2<T>,
        dy: ArrayView2<T>,
        grads: &mut Grads<T>,
    ) -> Array2<T> {
        self.backward_params(x, dy, grads);
        dy.dot(&store.get(self.w).t())
    }

    /// Parameter gradients only, for layers whose input needs no gradient.
    pub fn backward_params<T: Real>(&self, x: ArrayView2<T>, dy: ArrayView2<T>, grads: &mut Grads<T>) {
        ndarray::linalg::general_mat_mul(T::one(), &x.t(), &dy, T::one(), grads.get_mut(self.w));
        if let Some(b) = self.b {
            *grads.get_mut(b) += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
    }
}

/// Row-wise layer normalization with learned gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    xhat: Array2<T>,
    inv_std: Vec<T>,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Role::Norm, Array2::ones((1, width)));
        let bias = store.add(format!("{name}.bias"), Role::Norm, Array2::zeros((1, width)));
        Self { gain, bias, eps: 1e-5 }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: ArrayView2<T>) -> (Array2<T>, LayerNormCache<T>) {
        let d = T::lit(x.ncols() as f64);
        let eps = T::lit(self.eps);
        let mut xhat = x.to_owned();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.outer_iter_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / d;
            let is = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let y = &xhat * store.get(self.gain) + store.get(self.bias);
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &LayerNormCache<T>,
        dy: ArrayView2<T>,
        grads: &mut Grads<T>,
    ) -> Array2<T> {
        *grads.get_mut(self.gain) += &(&dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        *grads.get_mut(self.bias) += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = &dy * store.get(self.gain);
        let d = T::lit(dxhat.ncols() as f64);
        let mut dx = Array2::zeros(dxhat.raw_dim());
        for (i, (mut out, g)) in dx.outer_iter_mut().zip(dxhat.outer_iter()).enumerate() {
            let xh = cache.xhat.row(i);
            let mean_g = g.sum() / d;
            let mean_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() / d;
            let is = cache.inv_std[i];
            for ((o, &gv), &xv) in out.iter_mut().zip(g.iter()).zip(xh.iter()) {
                *o = is * (gv - mean_g - xv * mean_gx);
            }
        }
        dx
    }
}

/// Elementwise `σ(x)` through the slice exponential.
fn sigmoid<T: Real>(x: &Array2<T>) -> Array2<T> {
    let mut e = x.mapv(|v| -v);
    T::exp_in_place(e.as_slice_mut().expect("fresh arrays are contiguous"));
    e.mapv_inplace(|v| T::one() / (T::one() + v));
    e
}

/// `x·σ(x)`
pub fn silu<T: Real>(x: &Array2<T>) -> Array2<T> {
    let mut s = sigmoid(x);
    s.zip_mut_with(x, |a, &v| *a *= v);
    s
}

/// Gradient of [`silu`] given its input.
pub fn silu_backward<T: Real>(x: &Array2<T>, dy: ArrayView2<T>) -> Array2<T> {
    let mut dx = dy.to_owned();
    ndarray::Zip::from(&mut dx).and(x).and(&sigmoid(x)).for_each(|d, &v, &s| {
        *d *= s + v * s * (T::one() - s);
    });
    dx
}

/// Adam with bias correction. Frozen parameters keep their moments at zero.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
    step: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<Array2<T>> = store.entries().iter().map(|e| Array2::zeros(e.value.raw_dim())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>, trainable: &[bool]) {
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.step));
        let c2 = T::lit(1.0 - self.beta2.powi(self.step));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            if !trainable[i] {
                continue;
            }
            ndarray::Zip::from(&mut entry.value)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(&grads.g[i])
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of `loss(store)` against `grads` on every scalar.
    fn check<F>(store: &mut ParamStore<f64>, grads: &Grads<f64>, loss: F)
    where
        F: Fn(&ParamStore<f64>) -> f64,
    {
        let h = 1e-5;
        for p in 0..store.len() {
            for i in 0..store.entries()[p].value.len() {
                let orig = store.entries()[p].value.as_slice().unwrap()[i];
                store.entries_mut()[p].value.as_slice_mut().unwrap()[i] = orig + h;
                let up = loss(store);
                store.entries_mut()[p].value.as_slice_mut().unwrap()[i] = orig - h;
                let down = loss(store);
                store.entries_mut()[p].value.as_slice_mut().unwrap()[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads.g[p].as_slice().unwrap()[i];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "param {p}[{i}]: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn linear_norm_silu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "lin", Role::FeedForward, 5, 4, true, &mut rng);
        let ln = LayerNorm::new(&mut store, "ln", 4);
        *store.get_mut(ln.gain) = randn(1, 4, 1.0, &mut rng);
        *store.get_mut(ln.bias) = randn(1, 4, 1.0, &mut rng);
        *store.get_mut(lin.b.unwrap()) = randn(1, 4, 1.0, &mut rng);
        let x = randn::<f64>(3, 5, 1.0, &mut rng);
        let wts = randn::<f64>(3, 4, 1.0, &mut rng);
        let forward = |s: &ParamStore<f64>| {
            let a = lin.forward(s, x.view());
            let (b, cache) = ln.forward(s, a.view());
            (silu(&b), b, cache)
        };
        let loss = |s: &ParamStore<f64>| (&forward(s).0 * &wts).sum();
        let (_, b, cache) = forward(&store);
        let mut grads = store.zeros_like();
        let db = silu_backward(&b, wts.view());
        let da = ln.backward(&store, &cache, db.view(), &mut grads);
        lin.backward(&store, x.view(), da.view(), &mut grads);
        check(&mut store, &grads, loss);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Role::Output, Array2::from_elem((1, 2), 3.0));
        let frozen = store.add("y", Role::Norm, Array2::from_elem((1, 1), 1.0));
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let mut g = store.zeros_like();
            *g.get_mut(id) = store.get(id).mapv(|v| 2.0 * v);
            *g.get_mut(frozen) = Array2::ones((1, 1));
            opt.step(&mut store, &g, &[true, false]);
        }
        assert!(store.get(id).iter().all(|v| v.abs() < 1e-2));
        assert_eq!(store.get(frozen)[[0, 0]], 1.0);
    }

    #[test]
    fn zero_linear_outputs_zero() {
        let mut store = ParamStore::<f32>::new();
        let lin = Linear::zeros(&mut store, "z", Role::PhaseQk, 7, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn::<f32>(4, 7, 3.0, &mut rng);
        assert!(lin.forward(&store, x.view()).iter().all(|&v| v == 0.0));
    }
}
