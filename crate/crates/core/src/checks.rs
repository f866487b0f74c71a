//! Invariant suites behind `retake check`.
//!
//! Every check measures one scalar (a max error, a count of violations) and
//! compares it with a fixed tolerance. The main path under test can be
//! perturbed through [`CheckOptions`], which is how the negative control for
//! the frequency base works.

use std::fmt;

use nalgebra::Vector3;
use ndarray::{s, Array2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::flow;
use crate::geometry::{
    make_trajectory, pluecker_map, read_trajectory_str, rot_err, trajectory_to_jsonl, trans_err, CameraPose,
    Intrinsics, Trajectory, TrajectoryKind,
};
use crate::nn::{randn, Linear, ParamStore, Role};
use crate::oracle;
use crate::roce::{
    attention_logits, build_phase, build_phase_backward, camera_features, phase_attention_map, roce_attention,
    roce_attention_backward, roce_attention_forward, rope_attention, ApplyTo, CameraTokens, PhaseField,
    PhaseNetwork, FEATURE_DIM,
};
use crate::rope::{
    apply_rotation, frequency_schedule_with_base, rope_1d_with_base, rope_3d_with_base, RotationField, ROPE_BASE,
};
use crate::tensor_io::TensorDump;
use crate::toymodel::{make_dataset, ModelInput, ToyConfig, ToyModel, D_LATENT};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Rope,
    Roce,
    Geometry,
    Flow,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Rope, Suite::Roce, Suite::Geometry, Suite::Flow];
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Rope => "rope",
            Suite::Roce => "roce",
            Suite::Geometry => "geometry",
            Suite::Flow => "flow",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    /// Frequency base used by the main path; the oracle always uses the
    /// canonical one.
    pub rope_base: f64,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { rope_base: ROPE_BASE, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub suite: Suite,
    pub name: &'static str,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(suite: Suite, name: &'static str, value: f64, tolerance: f64) -> Self {
        Self { suite, name, value, tolerance, passed: value.is_finite() && value <= tolerance }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {}.{}: {:.3e} (tol {:.1e})", self.suite, self.name, self.value, self.tolerance)
    }
}

pub fn run_suite(suite: Suite, opts: &CheckOptions) -> Vec<CheckResult> {
    match suite {
        Suite::Rope => rope_suite(opts),
        Suite::Roce => roce_suite(opts),
        Suite::Geometry => geometry_suite(opts),
        Suite::Flow => flow_suite(opts),
    }
}

fn max_abs_diff<T: Real>(a: &Array2<T>, b: &Array2<T>) -> f64 {
    if a.dim() != b.dim() {
        return f64::INFINITY;
    }
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((*x - *y).to_f64().unwrap().abs()))
}

fn rng_for(opts: &CheckOptions, salt: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(opts.seed);
    r.set_stream(salt);
    r
}

// ---------------------------------------------------------------- rope

const GRIDS: [(usize, usize, usize); 4] = [(1, 2, 2), (2, 2, 2), (2, 3, 3), (3, 4, 5)];

fn rope_suite(opts: &CheckOptions) -> Vec<CheckResult> {
    let base = opts.rope_base;
    let mut out = Vec::new();

    let mut err: f64 = 0.0;
    for d in [6, 12, 48, 96] {
        match frequency_schedule_with_base(d, base) {
            Ok(s) => {
                for (a, b) in s.theta().iter().zip(oracle::oracle_theta(d, ROPE_BASE)) {
                    err = err.max((a - b).abs());
                }
            }
            Err(_) => err = f64::INFINITY,
        }
    }
    out.push(CheckResult::new(Suite::Rope, "schedule_matches_oracle", err, 1e-12));

    let mut err: f64 = 0.0;
    for &(f, h, w) in &GRIDS {
        for d in [12, 48] {
            let main = rope_3d_with_base::<f64>(f, h, w, d, base).expect("valid grid");
            let lit = oracle::oracle_rope_3d(f, h, w, d, ROPE_BASE);
            for n in 0..lit.rows {
                for c in 0..lit.cols {
                    let z = lit.get(n, c);
                    err = err.max((main.cos()[[n, c]] - z.re).abs()).max((main.sin()[[n, c]] - z.im).abs());
                }
            }
        }
    }
    out.push(CheckResult::new(Suite::Rope, "rope_3d_matches_oracle", err, 1e-12));

    let mut err: f64 = 0.0;
    for len in [1, 7, 64] {
        let main = rope_1d_with_base::<f64>(len, 8, base).expect("valid length");
        let lit = oracle::oracle_rope_1d(len, 16, ROPE_BASE);
        for n in 0..len {
            for c in 0..8 {
                err = err.max((main.cos()[[n, c]] - lit.get(n, c).re).abs());
                err = err.max((main.sin()[[n, c]] - lit.get(n, c).im).abs());
            }
        }
    }
    out.push(CheckResult::new(Suite::Rope, "rope_1d_matches_oracle", err, 1e-12));

    let m64 = rope_3d_with_base::<f64>(3, 4, 5, 48, base).expect("valid grid").modulus_error();
    let m32 = rope_3d_with_base::<f32>(3, 4, 5, 48, base).expect("valid grid").modulus_error() as f64;
    out.push(CheckResult::new(Suite::Rope, "unit_modulus_f64", m64, 1e-12));
    out.push(CheckResult::new(Suite::Rope, "unit_modulus_f32", m32, 1e-6));

    let mut rng = rng_for(opts, 1);
    out.push(CheckResult::new(Suite::Rope, "relative_position_1d", relative_shift_error_1d(base, &mut rng), 1e-6));
    out.push(CheckResult::new(Suite::Rope, "relative_position_3d", relative_shift_error_3d(base, &mut rng), 1e-6));
    out
}

fn logits_with(q: &Array2<f64>, k: &Array2<f64>, rq: &RotationField<f64>, rk: &RotationField<f64>) -> Array2<f64> {
    let qr = apply_rotation(q.view(), rq).expect("shapes");
    let kr = apply_rotation(k.view(), rk).expect("shapes");
    qr.dot(&kr.t())
}

fn gather(field: &RotationField<f64>, rows: &[usize]) -> RotationField<f64> {
    RotationField::from_angles(field.angles().select(Axis(0), rows))
}

/// Max change of the 1D logit matrix when every position is shifted by Δ ≤ 5.
pub fn relative_shift_error_1d(base: f64, rng: &mut impl Rng) -> f64 {
    let (len, channels) = (9, 8);
    let full = rope_1d_with_base::<f64>(len + 5, channels, base).expect("valid length");
    let q = randn::<f64>(len, 2 * channels, 1.0, rng);
    let k = randn::<f64>(len, 2 * channels, 1.0, rng);
    let r0 = gather(&full, &(0..len).collect::<Vec<_>>());
    let reference = logits_with(&q, &k, &r0, &r0);
    let mut err: f64 = 0.0;
    for delta in 1..=5 {
        let rd = gather(&full, &(delta..delta + len).collect::<Vec<_>>());
        err = err.max(max_abs_diff(&reference, &logits_with(&q, &k, &rd, &rd)));
    }
    err
}

/// Same as [`relative_shift_error_1d`] on a 3D grid with independent shifts per axis.
pub fn relative_shift_error_3d(base: f64, rng: &mut impl Rng) -> f64 {
    let (f, h, w, d) = (2, 3, 3, 48);
    let (bf, bh, bw) = (f + 5, h + 5, w + 5);
    let full = rope_3d_with_base::<f64>(bf, bh, bw, d, base).expect("valid grid");
    let rows = |df: usize, dh: usize, dw: usize| -> Vec<usize> {
        let mut r = Vec::new();
        for fi in 0..f {
            for hi in 0..h {
                for wi in 0..w {
                    r.push(((fi + df) * bh + hi + dh) * bw + wi + dw);
                }
            }
        }
        r
    };
    let n = f * h * w;
    let q = randn::<f64>(n, d, 1.0, rng);
    let k = randn::<f64>(n, d, 1.0, rng);
    let r0 = gather(&full, &rows(0, 0, 0));
    let reference = logits_with(&q, &k, &r0, &r0);
    let mut err: f64 = 0.0;
    for (df, dh, dw) in [(1, 0, 0), (0, 5, 0), (0, 0, 3), (5, 5, 5), (2, 4, 1)] {
        let rd = gather(&full, &rows(df, dh, dw));
        err = err.max(max_abs_diff(&reference, &logits_with(&q, &k, &rd, &rd)));
    }
    err
}

// ---------------------------------------------------------------- roce

fn random_phase<T: Real>(tokens: usize, d: usize, scale: f64, rng: &mut impl Rng) -> PhaseField<T> {
    PhaseField::from_learned(randn::<T>(tokens, d / 3, scale, rng).view(), d).expect("valid head dim")
}

/// One random attention problem over a `2N`-token pair sequence.
pub struct AttentionCase<T> {
    pub heads: usize,
    pub d_head: usize,
    pub q: Array2<T>,
    pub k: Array2<T>,
    pub v: Array2<T>,
    pub rope: RotationField<T>,
    pub tokens: usize,
}

impl<T: Real> AttentionCase<T> {
    /// Inputs drawn in f32 precision and uniform in `[-0.5, 0.5]`, so that a
    /// case built for f32 and for f64 holds identical values.
    pub fn random(grid: (usize, usize, usize), d_head: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let (f, h, w) = grid;
        let tokens = 2 * f * h * w;
        let mut draw = || {
            Array2::from_shape_simple_fn((tokens, heads * d_head), || T::lit(rng.random_range(-0.5f32..0.5) as f64))
        };
        let (q, k, v) = (draw(), draw(), draw());
        let rope = crate::rope::shared_rope_for_pair(f, h, w, d_head).expect("valid grid");
        Self { heads, d_head, q, k, v, rope, tokens }
    }
}

fn f32_phase(tokens: usize, d: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((tokens, d / 3), || rng.random_range(-3.0f32..3.0) as f64)
}

/// Max error of the f32 main path against the f64 oracle: (logits, outputs).
pub fn oracle_equivalence_error(rng: &mut impl Rng) -> (f64, f64) {
    let (mut logit_err, mut out_err): (f64, f64) = (0.0, 0.0);
    for grid in [(1, 2, 2), (2, 2, 2), (2, 3, 3)] {
        for d in [12, 48] {
            let heads = 2;
            let case = AttentionCase::<f32>::random(grid, d, heads, rng);
            let learned_qk: Vec<Array2<f64>> = (0..heads).map(|_| f32_phase(case.tokens, d, rng)).collect();
            let learned_vo: Vec<Array2<f64>> = (0..heads).map(|_| f32_phase(case.tokens, d, rng)).collect();
            let field = |l: &Array2<f64>| PhaseField::<f32>::from_learned(l.mapv(|x| x as f32).view(), d).unwrap();
            let pqk: Vec<_> = learned_qk.iter().map(field).collect();
            let pvo: Vec<_> = learned_vo.iter().map(field).collect();
            let logits = attention_logits(case.q.view(), case.k.view(), heads, &case.rope, &pqk).unwrap();
            let out = roce_attention(case.q.view(), case.k.view(), case.v.view(), heads, &case.rope, &pqk, &pvo).unwrap();

            let (f, h, w) = grid;
            let lit = oracle::oracle_rope_3d(f, h, w, d, ROPE_BASE);
            let lit = oracle::ComplexMatrix::from_fn(2 * lit.rows, lit.cols, |r, c| lit.get(r % lit.rows, c));
            for hd in 0..heads {
                let cols = s![.., hd * d..(hd + 1) * d];
                let q = case.q.slice(cols).mapv(|x| x as f64);
                let k = case.k.slice(cols).mapv(|x| x as f64);
                let v = case.v.slice(cols).mapv(|x| x as f64);
                let full = |l: &Array2<f64>| {
                    let mut p = Array2::zeros((case.tokens, d / 2));
                    p.slice_mut(s![.., d / 6..]).assign(l);
                    p
                };
                let (phi_qk, phi_vo) = (full(&learned_qk[hd]), full(&learned_vo[hd]));
                let want_logits = oracle::oracle_logit_matrix(&q, &k, &lit, &phi_qk);
                logit_err = logit_err.max(max_abs_diff(&logits[hd].mapv(|x| x as f64), &want_logits));
                let want_out = oracle::oracle_head_output(&q, &k, &v, &lit, &phi_qk, &phi_vo);
                out_err = out_err.max(max_abs_diff(&out.slice(cols).mapv(|x| x as f64), &want_out));
            }
        }
    }
    (logit_err, out_err)
}

fn zero_init_network(rng: &mut impl Rng, d_head: usize) -> (PhaseNetwork, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let net = PhaseNetwork::new(&mut store, "phase", Role::PhaseQk, FEATURE_DIM, PhaseNetwork::HIDDEN, d_head / 3, rng);
    (net, store)
}

fn random_camera_tokens(tokens: usize, rng: &mut impl Rng) -> CameraTokens {
    CameraTokens::from_array(randn(tokens, 6, 1.0, rng)).expect("even token count")
}

/// Max deviation from plain RoPE attention with freshly initialized phase
/// networks, over `cases` random problems.
pub fn zero_phase_reduction_error(cases: usize, rng: &mut impl Rng) -> f64 {
    let mut err: f64 = 0.0;
    for i in 0..cases {
        let grid = GRIDS[i % GRIDS.len()];
        let d = if i % 2 == 0 { 12 } else { 48 };
        let heads = 1 + i % 2;
        let case = AttentionCase::<f64>::random(grid, d, heads, rng);
        let feats = camera_features::<f64>(&random_camera_tokens(case.tokens, rng));
        let mut pqk = Vec::new();
        let mut pvo = Vec::new();
        for _ in 0..heads {
            let (a, sa) = zero_init_network(rng, d);
            let (b, sb) = zero_init_network(rng, d);
            pqk.push(build_phase(&a, &sa, feats.view(), ApplyTo::Both, d).unwrap().field);
            pvo.push(build_phase(&b, &sb, feats.view(), ApplyTo::Both, d).unwrap().field);
        }
        let got = roce_attention(case.q.view(), case.k.view(), case.v.view(), heads, &case.rope, &pqk, &pvo).unwrap();
        let want = rope_attention(case.q.view(), case.k.view(), case.v.view(), heads, &case.rope).unwrap();
        err = err.max(max_abs_diff(&got, &want));
    }
    err
}

/// Max deviation caused by a token-constant value phase, over `cases` problems.
pub fn constant_vo_cancellation_error(cases: usize, rng: &mut impl Rng) -> f64 {
    let mut err: f64 = 0.0;
    for i in 0..cases {
        let grid = GRIDS[i % GRIDS.len()];
        let d = if i % 2 == 0 { 12 } else { 48 };
        let case = AttentionCase::<f64>::random(grid, d, 1, rng);
        let pqk = vec![random_phase::<f64>(case.tokens, d, 2.0, rng)];
        let row = randn::<f64>(1, d / 3, 3.0, rng);
        let constant = row.broadcast((case.tokens, d / 3)).unwrap().to_owned();
        let pvo = vec![PhaseField::from_learned(constant.view(), d).unwrap()];
        let zero = vec![PhaseField::zeros(case.tokens, d).unwrap()];
        let a = roce_attention(case.q.view(), case.k.view(), case.v.view(), 1, &case.rope, &pqk, &pvo).unwrap();
        let b = roce_attention(case.q.view(), case.k.view(), case.v.view(), 1, &case.rope, &pqk, &zero).unwrap();
        err = err.max(max_abs_diff(&a, &b));
    }
    err
}

/// Max per-pair modulus change under the combined RoPE + camera rotation.
pub fn norm_preservation_error(cases: usize, rng: &mut impl Rng) -> f64 {
    let mut err: f64 = 0.0;
    for i in 0..cases {
        let grid = GRIDS[i % GRIDS.len()];
        let d = 48;
        let case = AttentionCase::<f64>::random(grid, d, 1, rng);
        let phi = random_phase::<f64>(case.tokens, d, 5.0, rng);
        let r = case.rope.add_angles(phi.as_array().view()).unwrap();
        let rot = apply_rotation(case.q.view(), &r).unwrap();
        for (a, b) in case.q.outer_iter().zip(rot.outer_iter()) {
            for c in 0..d / 2 {
                let m0 = a[2 * c].hypot(a[2 * c + 1]);
                let m1 = b[2 * c].hypot(b[2 * c + 1]);
                err = err.max((m0 - m1).abs());
            }
        }
    }
    err
}

/// Worst relative error of analytic vs central-difference gradients for a
/// scalar loss through projections, two phase networks per head and the
/// attention operator. Relative error is `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn attention_gradient_error(samples: usize, rng: &mut impl Rng) -> (f64, usize) {
    let (grid, d, heads) = ((1, 2, 2), 12, 2);
    let tokens = 2 * grid.0 * grid.1 * grid.2;
    let dm = d * heads;
    let rope = crate::rope::shared_rope_for_pair::<f64>(grid.0, grid.1, grid.2, d).unwrap();
    let mut store = ParamStore::<f64>::new();
    let lin = |n: &str, st: &mut ParamStore<f64>, rng: &mut ChaCha8Rng| Linear::new(st, n, Role::Attention, dm, dm, true, rng);
    let mut local = ChaCha8Rng::seed_from_u64(rng.random());
    let (wq, wk, wv) = (lin("q", &mut store, &mut local), lin("k", &mut store, &mut local), lin("v", &mut store, &mut local));
    let mut nets = Vec::new();
    for h in 0..heads {
        for role in [Role::PhaseQk, Role::PhaseVo] {
            nets.push(PhaseNetwork::new(&mut store, &format!("{role:?}{h}"), role, FEATURE_DIM, 16, d / 3, &mut local));
        }
    }
    for e in store.entries_mut() {
        e.value += &randn::<f64>(e.value.nrows(), e.value.ncols(), 0.5, &mut local);
    }
    let x = randn::<f64>(tokens, dm, 1.0, &mut local);
    let feats = camera_features::<f64>(&random_camera_tokens(tokens, &mut local));
    let g = randn::<f64>(tokens, dm, 1.0, &mut local);

    let forward = |st: &ParamStore<f64>| {
        let (q, k, v) = (wq.forward(st, x.view()), wk.forward(st, x.view()), wv.forward(st, x.view()));
        let outs: Vec<_> = nets.iter().map(|n| build_phase(n, st, feats.view(), ApplyTo::Both, d).unwrap()).collect();
        let pqk: Vec<_> = (0..heads).map(|h| outs[2 * h].field.clone()).collect();
        let pvo: Vec<_> = (0..heads).map(|h| outs[2 * h + 1].field.clone()).collect();
        let (o, cache) = roce_attention_forward(q.view(), k.view(), v.view(), heads, &rope, &pqk, &pvo).unwrap();
        ((&o * &g).sum(), cache, outs)
    };
    let (_, cache, outs) = forward(&store);
    let ag = roce_attention_backward(&cache, g.view());
    let mut grads = store.zeros_like();
    for h in 0..heads {
        build_phase_backward(&nets[2 * h], &store, &outs[2 * h], &ag.dphase_qk[h], &mut grads);
        build_phase_backward(&nets[2 * h + 1], &store, &outs[2 * h + 1], &ag.dphase_vo[h], &mut grads);
    }
    wq.backward_params(x.view(), ag.dq.view(), &mut grads);
    wk.backward_params(x.view(), ag.dk.view(), &mut grads);
    wv.backward_params(x.view(), ag.dv.view(), &mut grads);

    let all: Vec<(usize, usize)> =
        store.entries().iter().enumerate().flat_map(|(p, e)| (0..e.value.len()).map(move |i| (p, i))).collect();
    let picks = sample(&mut local, all.len(), samples.min(all.len()));
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for idx in picks.iter() {
        let (p, i) = all[idx];
        let orig = store.entries()[p].value.as_slice().unwrap()[i];
        store.entries_mut()[p].value.as_slice_mut().unwrap()[i] = orig + h;
        let up = forward(&store).0;
        store.entries_mut()[p].value.as_slice_mut().unwrap()[i] = orig - h;
        let down = forward(&store).0;
        store.entries_mut()[p].value.as_slice_mut().unwrap()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let an = grads.g[p].as_slice().unwrap()[i];
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
    }
    (worst, picks.len())
}

fn roce_suite(opts: &CheckOptions) -> Vec<CheckResult> {
    let mut rng = rng_for(opts, 2);
    let mut out = Vec::new();
    out.push(CheckResult::new(Suite::Roce, "zero_phase_reduction", zero_phase_reduction_error(100, &mut rng), 1e-6));
    out.push(CheckResult::new(Suite::Roce, "constant_vo_cancellation", constant_vo_cancellation_error(100, &mut rng), 1e-6));
    out.push(CheckResult::new(Suite::Roce, "norm_preservation", norm_preservation_error(100, &mut rng), 1e-7));
    let (logit_err, out_err) = oracle_equivalence_error(&mut rng);
    out.push(CheckResult::new(Suite::Roce, "oracle_logits_f32", logit_err, 1e-6));
    out.push(CheckResult::new(Suite::Roce, "oracle_outputs_f32", out_err, 1e-6));

    // softmax rows and Θ/φ antisymmetry on one random case
    let case = AttentionCase::<f64>::random((2, 2, 2), 12, 1, &mut rng);
    let p = vec![random_phase::<f64>(case.tokens, 12, 3.0, &mut rng)];
    let (_, cache) = roce_attention_forward(case.q.view(), case.k.view(), case.v.view(), 1, &case.rope, &p, &p).unwrap();
    let row_err = cache.weights(0).sum_axis(Axis(1)).iter().fold(0.0f64, |m, s| m.max((s - 1.0).abs()));
    out.push(CheckResult::new(Suite::Roce, "softmax_rows_sum_to_one", row_err, 1e-7));
    let total = case.rope.add_angles(p[0].as_array().view()).unwrap();
    let (c, sn) = (total.cos(), total.sin());
    let mut anti: f64 = 0.0;
    for n in 0..case.tokens {
        for m in 0..case.tokens {
            for ch in 0..c.ncols() {
                // arg of e^{iα_n}·e^{−iα_m} and of the swapped pair
                let nm = (sn[[n, ch]] * c[[m, ch]] - c[[n, ch]] * sn[[m, ch]]).atan2(c[[n, ch]] * c[[m, ch]] + sn[[n, ch]] * sn[[m, ch]]);
                let mn = (sn[[m, ch]] * c[[n, ch]] - c[[m, ch]] * sn[[n, ch]]).atan2(c[[m, ch]] * c[[n, ch]] + sn[[m, ch]] * sn[[n, ch]]);
                let sum = nm + mn;
                anti = anti.max(sum.sin().abs().max((sum.cos() - 1.0).abs()));
            }
        }
    }
    out.push(CheckResult::new(Suite::Roce, "phase_antisymmetry", anti, 1e-12));

    let (grad_err, picked) = attention_gradient_error(120, &mut rng);
    // fewer than 100 sampled parameters counts as a failure
    let grad_err = if picked >= 100 { grad_err } else { f64::INFINITY };
    out.push(CheckResult::new(Suite::Roce, "attention_gradients", grad_err, 1e-4));
    out.push(CheckResult::new(Suite::Roce, "source_permutation_invariance", source_permutation_error(&mut rng), 1e-12));

    let phi = random_phase::<f64>(16, 12, 4.0, &mut rng);
    let map = phase_attention_map(&phi, 3, &(2..6).collect::<Vec<_>>()).unwrap();
    let bound = map.iter().fold(0.0f64, |m, &v| m.max(v.abs() - 1.0).max(0.0)) + (map[3] - 1.0).abs();
    out.push(CheckResult::new(Suite::Roce, "phase_map_bounds", bound, 1e-15));
    out
}

/// Change of target-block outputs when the source block (tokens, camera
/// phases and RoPE rows) is permuted.
pub fn source_permutation_error(rng: &mut impl Rng) -> f64 {
    let case = AttentionCase::<f64>::random((2, 2, 3), 12, 2, rng);
    let half = case.tokens / 2;
    let mut perm: Vec<usize> = (0..case.tokens).collect();
    let mut src: Vec<usize> = (half..case.tokens).collect();
    for i in (1..src.len()).rev() {
        src.swap(i, rng.random_range(0..=i));
    }
    perm[half..].copy_from_slice(&src);
    let pq: Vec<_> = (0..2).map(|_| random_phase::<f64>(case.tokens, 12, 2.0, rng)).collect();
    let pv: Vec<_> = (0..2).map(|_| random_phase::<f64>(case.tokens, 12, 2.0, rng)).collect();
    let permute = |x: &Array2<f64>| x.select(Axis(0), &perm);
    let permute_phase = |p: &PhaseField<f64>| PhaseField::from_learned(permute(&p.learned_block().to_owned()).view(), 12).unwrap();
    let a = roce_attention(case.q.view(), case.k.view(), case.v.view(), 2, &case.rope, &pq, &pv).unwrap();
    let rope_p = RotationField::from_angles(permute(case.rope.angles()));
    let pq_p: Vec<_> = pq.iter().map(permute_phase).collect();
    let pv_p: Vec<_> = pv.iter().map(permute_phase).collect();
    let b = roce_attention(permute(&case.q).view(), permute(&case.k).view(), permute(&case.v).view(), 2, &rope_p, &pq_p, &pv_p)
        .unwrap();
    max_abs_diff(&a.slice(s![..half, ..]).to_owned(), &b.slice(s![..half, ..]).to_owned())
}

/// Worst relative error of analytic vs central-difference gradients of the
/// toy model's flow-matching loss on a small config, over every phase tensor
/// plus `extra` random parameters. Returns `(worst, sampled)`.
pub fn toy_loss_gradient_error(extra: usize, seed: u64) -> (f64, usize) {
    let cfg = ToyConfig { f: 2, h: 2, w: 3, heads: 2, d_head: 12, phase_hidden: 8, ..ToyConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (model, mut store) = ToyModel::new::<f64>(&cfg, &mut rng).expect("valid config");
    // move off the zero-phase initialization so the phase networks carry gradient
    for e in store.entries_mut() {
        e.value += &randn::<f64>(e.value.nrows(), e.value.ncols(), 0.3, &mut rng);
    }
    let item = make_dataset(&cfg, 1, rng.random()).expect("valid config").remove(0);
    let noise = randn::<f64>(cfg.tokens(), D_LATENT, 1.0, &mut rng);
    let t = rng.random_range(0.05..0.95);
    let z_t = &noise * t + &item.target * (1.0 - t);
    let features = camera_features(&item.camera_tokens(&cfg).expect("valid trajectories"));
    let input = ModelInput { z_t, source: item.source.clone(), t, features };
    let target = &noise - &item.target;
    let loss = |s: &ParamStore<f64>| {
        let u = model.velocity(s, &input).expect("fixed shapes");
        flow::mse(u.view(), target.view()).expect("fixed shapes")
    };
    let (u, cache) = model.forward(&store, &input).expect("fixed shapes");
    let d_out = (&u - &target) * (2.0 / u.len() as f64);
    let mut grads = store.zeros_like();
    model.backward(&store, &cache, &d_out, &mut grads);

    let mut picks: Vec<(usize, usize)> = Vec::new();
    for (p, e) in store.entries().iter().enumerate() {
        if e.role.is_phase() {
            picks.push((p, rng.random_range(0..e.value.len())));
        }
    }
    let all: Vec<(usize, usize)> =
        store.entries().iter().enumerate().flat_map(|(p, e)| (0..e.value.len()).map(move |i| (p, i))).collect();
    picks.extend(sample(&mut rng, all.len(), extra.min(all.len())).into_iter().map(|i| all[i]));

    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for &(p, i) in &picks {
        let orig = store.entries()[p].value.as_slice().unwrap()[i];
        store.entries_mut()[p].value.as_slice_mut().unwrap()[i] = orig + h;
        let up = loss(&store);
        store.entries_mut()[p].value.as_slice_mut().unwrap()[i] = orig - h;
        let down = loss(&store);
        store.entries_mut()[p].value.as_slice_mut().unwrap()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let an = grads.g[p].as_slice().unwrap()[i];
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
    }
    (worst, picks.len())
}

// ---------------------------------------------------------------- geometry

/// Worst relative deviation of accumulated motion from the kind's total.
pub fn trajectory_total_error(frames: &[usize]) -> f64 {
    let k = Intrinsics::centered(96.0, 96).expect("valid intrinsics");
    let mut worst: f64 = 0.0;
    for kind in TrajectoryKind::ALL {
        let (yaw, pitch, t) = kind.total_motion();
        let want = CameraPose::yaw_degrees(yaw).compose(&CameraPose::pitch_degrees(pitch));
        let angle = (yaw.abs() + pitch.abs()).to_radians();
        for &f in frames {
            let Ok(tr) = make_trajectory(kind, f, k) else { return f64::INFINITY };
            let last = tr.poses.last().expect("at least two frames");
            if angle > 0.0 {
                let e = crate::geometry::CameraPose { rotation: want.rotation.transpose() * last.rotation, translation: Vector3::zeros() };
                worst = worst.max(e.rotation_angle() / angle);
            } else {
                worst = worst.max(last.rotation_angle());
            }
            if t.norm() > 0.0 {
                worst = worst.max((last.translation - t).norm() / t.norm());
            } else {
                worst = worst.max(last.translation.norm());
            }
        }
    }
    worst
}

/// Literal all-pairs relative rotation error in degrees via `acos`.
pub fn rot_err_brute_force(pred: &Trajectory, gt: &Trajectory) -> f64 {
    let n = pred.poses.len();
    let mut sum = 0.0;
    let mut pairs = 0;
    for i in 0..n {
        for j in i + 1..n {
            let rp = pred.poses[i].rotation.transpose() * pred.poses[j].rotation;
            let rg = gt.poses[i].rotation.transpose() * gt.poses[j].rotation;
            let e = rp.transpose() * rg;
            let c = ((e[(0, 0)] + e[(1, 1)] + e[(2, 2)] - 1.0) / 2.0).clamp(-1.0, 1.0);
            sum += c.acos().to_degrees();
            pairs += 1;
        }
    }
    sum / pairs as f64
}

/// Trajectory whose every pose is yawed by a frame-dependent angle.
pub fn perturbed(traj: &Trajectory, degrees_per_frame: f64) -> Trajectory {
    let poses = traj
        .poses
        .iter()
        .enumerate()
        .map(|(i, p)| p.compose(&CameraPose::yaw_degrees(degrees_per_frame * i as f64)).compose(&CameraPose::pitch_degrees(0.5 * (i % 3) as f64)))
        .collect();
    Trajectory { poses, intrinsics: traj.intrinsics }
}

fn geometry_suite(opts: &CheckOptions) -> Vec<CheckResult> {
    let mut out = Vec::new();
    out.push(CheckResult::new(Suite::Geometry, "trajectory_totals", trajectory_total_error(&[2, 81, 241]), 1e-6));

    let k = Intrinsics::centered(96.0, 96).expect("valid intrinsics");
    let mut zero: f64 = 0.0;
    let mut brute: f64 = 0.0;
    for kind in TrajectoryKind::ALL {
        let tr = make_trajectory(kind, 13, k).expect("valid");
        zero = zero.max(trans_err(&tr, &tr).unwrap()).max(rot_err(&tr, &tr).unwrap());
        let p = perturbed(&tr, 3.0);
        brute = brute.max((rot_err(&p, &tr).unwrap() - rot_err_brute_force(&p, &tr)).abs());
    }
    out.push(CheckResult::new(Suite::Geometry, "pose_metrics_identical_zero", zero, 0.0));
    out.push(CheckResult::new(Suite::Geometry, "rot_err_brute_force", brute, 1e-9));

    let mut rt: f64 = 0.0;
    let mut records_changed = 0usize;
    for kind in TrajectoryKind::ALL {
        let tr = make_trajectory(kind, 17, k).expect("valid");
        let text = trajectory_to_jsonl(&tr);
        match read_trajectory_str(&text) {
            Ok(back) => {
                for (a, b) in tr.poses.iter().zip(&back.poses) {
                    rt = rt.max((a.rotation - b.rotation).amax()).max((a.translation - b.translation).amax());
                }
                let again = trajectory_to_jsonl(&back);
                records_changed += again.lines().zip(text.lines()).filter(|(a, b)| a != b).count();
            }
            Err(_) => rt = f64::INFINITY,
        }
    }
    out.push(CheckResult::new(Suite::Geometry, "trajectory_file_pose_round_trip", rt, 1e-9));
    out.push(CheckResult::new(Suite::Geometry, "trajectory_file_bit_exact", records_changed as f64, 0.0));

    let mut rng = rng_for(opts, 3);
    let mut mismatched = 0usize;
    for _ in 0..20 {
        let dims = vec![rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..4)];
        let n: usize = dims.iter().product();
        let data: Vec<f64> = (0..n).map(|_| f64::from_bits(rng.random::<u64>() >> 2)).collect();
        let dump = TensorDump::from_f64(dims, data);
        match TensorDump::decode(&dump.encode()) {
            Ok(back) if back.data.to_f64().iter().zip(dump.data.to_f64()).all(|(a, b)| a.to_bits() == b.to_bits()) && back.dims == dump.dims => {}
            _ => mismatched += 1,
        }
    }
    out.push(CheckResult::new(Suite::Geometry, "tensor_dump_bit_exact", mismatched as f64, 0.0));

    let mut pl: f64 = 0.0;
    for kind in TrajectoryKind::ALL {
        let tr = make_trajectory(kind, 5, k).expect("valid");
        for p in &tr.poses {
            let (unit, ortho) = pluecker_map(p, &k, 6, 6).expect("valid").constraint_residuals();
            pl = pl.max(unit).max(ortho);
        }
    }
    out.push(CheckResult::new(Suite::Geometry, "pluecker_constraints", pl, 1e-12));
    out
}

// ---------------------------------------------------------------- flow

fn flow_suite(opts: &CheckOptions) -> Vec<CheckResult> {
    let mut rng = rng_for(opts, 4);
    let mut out = Vec::new();
    let z0 = randn::<f64>(6, 3, 1.0, &mut rng);
    let z1 = randn::<f64>(6, 3, 1.0, &mut rng);
    let e0 = max_abs_diff(&flow::interpolate(z0.view(), z1.view(), 0.0).unwrap(), &z0);
    let e1 = max_abs_diff(&flow::interpolate(z0.view(), z1.view(), 1.0).unwrap(), &z1);
    let affine = max_abs_diff(
        &(flow::interpolate(z0.view(), z1.view(), 0.3).unwrap() + flow::interpolate(z1.view(), z0.view(), 0.3).unwrap()),
        &(&z0 + &z1),
    );
    out.push(CheckResult::new(Suite::Flow, "interpolate_endpoints", e0.max(e1), 0.0));
    out.push(CheckResult::new(Suite::Flow, "interpolate_affine", affine, 1e-12));

    let delta = &z1 - &z0;
    let exact = |_: ndarray::ArrayView2<f64>, _: f64, d: &Array2<f64>| d.clone();
    let zero = |z: ndarray::ArrayView2<f64>, _: f64, _: &Array2<f64>| Array2::zeros(z.raw_dim());
    let l0 = flow::cfm_loss(&exact, z0.view(), z1.view(), 0.6, &delta).unwrap();
    let ones = Array2::<f64>::ones((4, 5));
    let l1 = flow::cfm_loss(&zero, Array2::zeros((4, 5)).view(), ones.view(), 0.2, &delta).unwrap();
    out.push(CheckResult::new(Suite::Flow, "cfm_loss_zero_at_target", l0, 1e-12));
    out.push(CheckResult::new(Suite::Flow, "cfm_loss_mean_reduced", (l1 - 1.0).abs(), 1e-15));

    let c = randn::<f64>(6, 3, 1.0, &mut rng);
    let mut sc: f64 = 0.0;
    for steps in [1, 4, 50] {
        let got = flow::sample(&exact, z0.view(), steps, &c).unwrap();
        sc = sc.max(max_abs_diff(&got, &(&z0 - &c)));
    }
    out.push(CheckResult::new(Suite::Flow, "sampler_constant_field", sc, 1e-12));
    let linear = |z: ndarray::ArrayView2<f64>, _: f64, _: &Array2<f64>| z.to_owned();
    let lin = flow::sample(&linear, z0.view(), 4, &c).unwrap();
    out.push(CheckResult::new(Suite::Flow, "sampler_linear_closed_form", max_abs_diff(&lin, &(&z0 * 0.75f64.powi(4))), 1e-12));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass_by_default() {
        for suite in Suite::ALL {
            for r in run_suite(suite, &CheckOptions::default()) {
                assert!(r.passed, "{r}");
            }
        }
    }

    #[test]
    fn perturbed_base_fails_rope_suite() {
        let opts = CheckOptions { rope_base: 10001.0, ..CheckOptions::default() };
        let results = run_suite(Suite::Rope, &opts);
        assert!(results.iter().any(|r| !r.passed));
        // relative-position structure survives a different base
        assert!(results.iter().find(|r| r.name == "relative_position_3d").unwrap().passed);
    }
}
