//! Rotary camera encoding.
//!
//! Camera parameters enter attention as additive phases on the spatial RoPE
//! channels. For a `2N`-token sequence (target block first, then source block)
//! and head dimension `d`, each phase field has `d/2` columns laid out as
//! `[0; d/6 | MLP(c); d/3]`: the temporal channels are never shifted.
//!
//! Per head, with RoPE angles `θ` and phases `φ_qk`, `φ_vo`:
//!
//! ```text
//! q' = q ∘ e^{i(θ + φ_qk)}        k' = k ∘ e^{i(θ + φ_qk)}
//! A  = softmax(q'·k'ᵀ / √d)
//! o  = (A · (v ∘ e^{-iφ_vo})) ∘ e^{+iφ_vo}
//! ```
//!
//! The output rotation uses the query token's own `φ_vo` row.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use thiserror::Error;

use crate::geometry::{pluecker_map, GeometryError, Trajectory};
use crate::nn::{silu, silu_backward, Grads, Linear, ParamStore, Role};
use crate::rope::{rotate_in_place, RopeError, RotationField};
use crate::Real;

#[derive(Debug, Error)]
pub enum RoceError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("head dimension {0} is not divisible by 6")]
    HeadDim(usize),
    #[error(transparent)]
    Rope(#[from] RopeError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub const PLUECKER_DIM: usize = 6;
pub const FEATURE_OCTAVES: usize = 4;
/// Raw Plücker vector plus sin/cos at each octave for every component.
pub const FEATURE_DIM: usize = PLUECKER_DIM * (1 + 2 * FEATURE_OCTAVES);

/// Per-token Plücker rays `[c_t; c_s]`, `2N x 6`, aligned with the flattened
/// `(f, h, w)` token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraTokens {
    data: Array2<f64>,
}

impl CameraTokens {
    pub fn from_array(data: Array2<f64>) -> Result<Self, RoceError> {
        if data.ncols() != PLUECKER_DIM || !data.nrows().is_multiple_of(2) || data.nrows() == 0 {
            return Err(RoceError::Shape(format!("camera tokens must be 2N x 6, got {:?}", data.dim())));
        }
        Ok(Self { data })
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn block_len(&self) -> usize {
        self.data.nrows() / 2
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn target(&self) -> ArrayView2<'_, f64> {
        self.data.slice(s![..self.block_len(), ..])
    }

    pub fn source(&self) -> ArrayView2<'_, f64> {
        self.data.slice(s![self.block_len().., ..])
    }

    /// All-zero tokens of the same shape (camera-ablated control).
    pub fn zeroed(&self) -> Self {
        Self { data: Array2::zeros(self.data.raw_dim()) }
    }
}

/// Plücker tokens for a target/source pair of trajectories. Latent frame `i`
/// uses the pose of video frame `i·stride`.
pub fn build_camera_tokens(
    traj_t: &Trajectory,
    traj_s: &Trajectory,
    f: usize,
    h: usize,
    w: usize,
    stride: usize,
) -> Result<CameraTokens, RoceError> {
    let n = f * h * w;
    let mut data = Array2::zeros((2 * n, PLUECKER_DIM));
    for (block, traj) in [traj_t, traj_s].into_iter().enumerate() {
        let poses = traj.subsample(f, stride)?;
        for (fi, pose) in poses.iter().enumerate() {
            let map = pluecker_map(pose, &traj.intrinsics, h, w)?;
            for (j, ray) in map.rays.iter().enumerate() {
                let row = block * n + fi * h * w + j;
                for (c, v) in ray.features().into_iter().enumerate() {
                    data[[row, c]] = v;
                }
            }
        }
    }
    CameraTokens::from_array(data)
}

/// Network input: the raw 6D ray followed by `sin(2^k π x)`, `cos(2^k π x)`
/// for `k = 0..4` of every component.
pub fn camera_features<T: Real>(c: &CameraTokens) -> Array2<T> {
    let mut out = Array2::zeros((c.rows(), FEATURE_DIM));
    for (src, mut dst) in c.data.outer_iter().zip(out.outer_iter_mut()) {
        for (j, &x) in src.iter().enumerate() {
            dst[j] = T::lit(x);
            for k in 0..FEATURE_OCTAVES {
                let a = (1u32 << k) as f64 * std::f64::consts::PI * x;
                let base = PLUECKER_DIM + (j * FEATURE_OCTAVES + k) * 2;
                dst[base] = T::lit(a.sin());
                dst[base + 1] = T::lit(a.cos());
            }
        }
    }
    out
}

/// Two-layer perceptron from camera features to `d/3` phases, with a zero
/// initialized output layer so it emits zero phase until trained.
#[derive(Debug, Clone, Copy)]
pub struct PhaseNetwork {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub struct PhaseNetCache<T> {
    input: Array2<T>,
    pre: Array2<T>,
    act: Array2<T>,
}

impl PhaseNetwork {
    pub const HIDDEN: usize = 64;

    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        role: Role,
        inputs: usize,
        hidden: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let h = Linear::new(store, &format!("{name}.hidden"), role, inputs, hidden, true, rng);
        let out = Linear::zeros(store, &format!("{name}.out"), role, hidden, outputs);
        Self { hidden: h, out }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, feats: ArrayView2<T>) -> (Array2<T>, PhaseNetCache<T>) {
        let pre = self.hidden.forward(store, feats);
        let act = silu(&pre);
        let y = self.out.forward(store, act.view());
        (y, PhaseNetCache { input: feats.to_owned(), pre, act })
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &PhaseNetCache<T>,
        d_out: ArrayView2<T>,
        grads: &mut Grads<T>,
    ) {
        let d_act = self.out.backward(store, cache.act.view(), d_out, grads);
        let d_pre = silu_backward(&cache.pre, d_act.view());
        self.hidden.backward_params(cache.input.view(), d_pre.view(), grads);
    }
}

/// Which halves of the `2N` sequence receive learned phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApplyTo {
    TargetOnly,
    #[default]
    Both,
}

/// Real phases over `2N` tokens x `d/2` complex channels. Columns `[0, d/6)`
/// are identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseField<T> {
    phases: Array2<T>,
    zero_width: usize,
}

impl<T: Real> PhaseField<T> {
    pub fn zeros(tokens: usize, d_head: usize) -> Result<Self, RoceError> {
        check_head_dim(d_head)?;
        Ok(Self { phases: Array2::zeros((tokens, d_head / 2)), zero_width: d_head / 6 })
    }

    /// Places a `tokens x d/3` learned block behind the zero temporal block.
    pub fn from_learned(learned: ArrayView2<T>, d_head: usize) -> Result<Self, RoceError> {
        check_head_dim(d_head)?;
        if learned.ncols() != d_head / 3 {
            return Err(RoceError::Shape(format!("learned block has {} columns, need {}", learned.ncols(), d_head / 3)));
        }
        if learned.iter().any(|x| !x.is_finite()) {
            return Err(RoceError::NonFinite("phase"));
        }
        let mut f = Self::zeros(learned.nrows(), d_head)?;
        f.phases.slice_mut(s![.., d_head / 6..]).assign(&learned);
        Ok(f)
    }

    pub fn tokens(&self) -> usize {
        self.phases.nrows()
    }

    pub fn channels(&self) -> usize {
        self.phases.ncols()
    }

    pub fn zero_width(&self) -> usize {
        self.zero_width
    }

    pub fn as_array(&self) -> &Array2<T> {
        &self.phases
    }

    pub fn learned_block(&self) -> ArrayView2<'_, T> {
        self.phases.slice(s![.., self.zero_width..])
    }
}

fn check_head_dim(d_head: usize) -> Result<(), RoceError> {
    if d_head == 0 || !d_head.is_multiple_of(6) {
        return Err(RoceError::HeadDim(d_head));
    }
    Ok(())
}

/// Phase field and the cache needed to backpropagate into its network.
pub struct PhaseOutput<T> {
    pub field: PhaseField<T>,
    pub cache: PhaseNetCache<T>,
    pub apply_to: ApplyTo,
}

pub fn build_phase<T: Real>(
    net: &PhaseNetwork,
    store: &ParamStore<T>,
    feats: ArrayView2<T>,
    apply_to: ApplyTo,
    d_head: usize,
) -> Result<PhaseOutput<T>, RoceError> {
    let (mut learned, cache) = net.forward(store, feats);
    if apply_to == ApplyTo::TargetOnly {
        let n = learned.nrows() / 2;
        learned.slice_mut(s![n.., ..]).fill(T::zero());
    }
    Ok(PhaseOutput { field: PhaseField::from_learned(learned.view(), d_head)?, cache, apply_to })
}

/// Backpropagates a gradient w.r.t. a full phase field into its network.
pub fn build_phase_backward<T: Real>(
    net: &PhaseNetwork,
    store: &ParamStore<T>,
    out: &PhaseOutput<T>,
    d_field: &Array2<T>,
    grads: &mut Grads<T>,
) {
    let mut d_learned = d_field.slice(s![.., out.field.zero_width..]).to_owned();
    if out.apply_to == ApplyTo::TargetOnly {
        let n = d_learned.nrows() / 2;
        d_learned.slice_mut(s![n.., ..]).fill(T::zero());
    }
    net.backward(store, &out.cache, d_learned.view(), grads);
}

/// Row-wise softmax.
pub fn softmax_rows<T: Real>(logits: &mut Array2<T>) {
    for mut row in logits.outer_iter_mut() {
        let max = row.fold(T::neg_infinity(), |m, &x| m.max(x));
        row.mapv_inplace(|x| x - max);
        match row.as_slice_mut() {
            Some(s) => T::exp_in_place(s),
            None => row.mapv_inplace(T::exp),
        }
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
}

#[derive(Debug, Clone)]
struct HeadCache<T> {
    q_rot: Array2<T>,
    k_rot: Array2<T>,
    attn: Array2<T>,
    v_rot: Array2<T>,
    out: Array2<T>,
    qk: RotationField<T>,
    vo: RotationField<T>,
}

/// Activations saved by [`roce_attention_forward`].
#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    heads: Vec<HeadCache<T>>,
    d_head: usize,
}

impl<T: Real> AttentionCache<T> {
    /// Attention weights of head `h`.
    pub fn weights(&self, h: usize) -> &Array2<T> {
        &self.heads[h].attn
    }
}

#[derive(Debug, Clone)]
pub struct AttentionGrads<T> {
    pub dq: Array2<T>,
    pub dk: Array2<T>,
    pub dv: Array2<T>,
    pub dphase_qk: Vec<Array2<T>>,
    pub dphase_vo: Vec<Array2<T>>,
}

fn check_inputs<T: Real>(
    q: &ArrayView2<T>,
    k: &ArrayView2<T>,
    v: &ArrayView2<T>,
    heads: usize,
    rope: &RotationField<T>,
) -> Result<usize, RoceError> {
    if heads == 0 || !q.ncols().is_multiple_of(heads) {
        return Err(RoceError::Shape(format!("{} features do not split into {heads} heads", q.ncols())));
    }
    if q.dim() != k.dim() || q.dim() != v.dim() {
        return Err(RoceError::Shape(format!("q {:?}, k {:?}, v {:?}", q.dim(), k.dim(), v.dim())));
    }
    let d_head = q.ncols() / heads;
    if rope.tokens() != q.nrows() || 2 * rope.channels() != d_head {
        return Err(RoceError::Shape(format!(
            "rope field {}x{} for {} tokens of head dim {d_head}",
            rope.tokens(),
            rope.channels(),
            q.nrows()
        )));
    }
    for (name, x) in [("q", q), ("k", k), ("v", v)] {
        if x.iter().any(|x| !x.is_finite()) {
            return Err(RoceError::NonFinite(name));
        }
    }
    Ok(d_head)
}

fn head_cols<T: Real>(x: &ArrayView2<T>, h: usize, d: usize) -> Array2<T> {
    x.slice(s![.., h * d..(h + 1) * d]).to_owned()
}

/// Camera-conditioned multi-head self-attention over all `2N` tokens.
///
/// `q`, `k`, `v` are `2N x (heads·d)`; `phase_qk[h]` and `phase_vo[h]` are the
/// phase fields of head `h`.
pub fn roce_attention<T: Real>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    heads: usize,
    rope: &RotationField<T>,
    phase_qk: &[PhaseField<T>],
    phase_vo: &[PhaseField<T>],
) -> Result<Array2<T>, RoceError> {
    Ok(roce_attention_forward(q, k, v, heads, rope, phase_qk, phase_vo)?.0)
}

pub fn roce_attention_forward<T: Real>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    heads: usize,
    rope: &RotationField<T>,
    phase_qk: &[PhaseField<T>],
    phase_vo: &[PhaseField<T>],
) -> Result<(Array2<T>, AttentionCache<T>), RoceError> {
    let d = check_inputs(&q, &k, &v, heads, rope)?;
    if phase_qk.len() != heads || phase_vo.len() != heads {
        return Err(RoceError::Shape(format!("need {heads} phase fields per role")));
    }
    for p in phase_qk.iter().chain(phase_vo) {
        if p.as_array().dim() != rope.angles().dim() {
            return Err(RoceError::Shape(format!("phase {:?} vs rope {:?}", p.as_array().dim(), rope.angles().dim())));
        }
    }
    let scale = T::one() / T::lit(d as f64).sqrt();
    let mut output = Array2::zeros(q.raw_dim());
    let mut caches = Vec::with_capacity(heads);
    for h in 0..heads {
        let qk = rope.add_angles(phase_qk[h].as_array().view())?;
        let vo = RotationField::from_angles(phase_vo[h].as_array().clone());

        let mut q_rot = head_cols(&q, h, d);
        let mut k_rot = head_cols(&k, h, d);
        rotate_in_place(&mut q_rot, qk.cos().view(), qk.sin().view(), false);
        rotate_in_place(&mut k_rot, qk.cos().view(), qk.sin().view(), false);

        let mut attn = q_rot.dot(&k_rot.t());
        attn.mapv_inplace(|x| x * scale);
        softmax_rows(&mut attn);

        let mut v_rot = head_cols(&v, h, d);
        rotate_in_place(&mut v_rot, vo.cos().view(), vo.sin().view(), true);
        let mut out = attn.dot(&v_rot);
        rotate_in_place(&mut out, vo.cos().view(), vo.sin().view(), false);

        output.slice_mut(s![.., h * d..(h + 1) * d]).assign(&out);
        caches.push(HeadCache { q_rot, k_rot, attn, v_rot, out, qk, vo });
    }
    Ok((output, AttentionCache { heads: caches, d_head: d }))
}

/// `dL/dα` for `y = rot(x, α)` given `y` and `dL/dy`, per complex channel.
fn rotation_angle_grad<T: Real>(y: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
    let mut g = Array2::zeros((y.nrows(), y.ncols() / 2));
    for ((mut gr, yr), dyr) in g.outer_iter_mut().zip(y.outer_iter()).zip(dy.outer_iter()) {
        for c in 0..gr.len() {
            let (re, im) = (yr[2 * c], yr[2 * c + 1]);
            gr[c] = dyr[2 * c + 1] * re - dyr[2 * c] * im;
        }
    }
    g
}

pub fn roce_attention_backward<T: Real>(cache: &AttentionCache<T>, d_out: ArrayView2<T>) -> AttentionGrads<T> {
    let d = cache.d_head;
    let scale = T::one() / T::lit(d as f64).sqrt();
    let mut dq = Array2::zeros(d_out.raw_dim());
    let mut dk = Array2::zeros(d_out.raw_dim());
    let mut dv = Array2::zeros(d_out.raw_dim());
    let mut dphase_qk = Vec::with_capacity(cache.heads.len());
    let mut dphase_vo = Vec::with_capacity(cache.heads.len());
    for (h, hc) in cache.heads.iter().enumerate() {
        let d_o = d_out.slice(s![.., h * d..(h + 1) * d]).to_owned();

        // output rotation by +φ_vo
        let mut dphi_vo = rotation_angle_grad(&hc.out, &d_o);
        let mut d_agg = d_o;
        rotate_in_place(&mut d_agg, hc.vo.cos().view(), hc.vo.sin().view(), true);

        // aggregation
        let d_attn = d_agg.dot(&hc.v_rot.t());
        let d_vrot = hc.attn.t().dot(&d_agg);

        // value rotation by −φ_vo
        dphi_vo -= &rotation_angle_grad(&hc.v_rot, &d_vrot);
        let mut d_v = d_vrot;
        rotate_in_place(&mut d_v, hc.vo.cos().view(), hc.vo.sin().view(), false);

        // softmax
        let mut d_logits = d_attn;
        for (mut dl, a) in d_logits.outer_iter_mut().zip(hc.attn.outer_iter()) {
            let dot: T = dl.iter().zip(a.iter()).map(|(&x, &y)| x * y).sum();
            for (x, &y) in dl.iter_mut().zip(a.iter()) {
                *x = y * (*x - dot) * scale;
            }
        }
        let d_qrot = d_logits.dot(&hc.k_rot);
        let d_krot = d_logits.t().dot(&hc.q_rot);

        // shared q/k rotation by θ + φ_qk
        let dphi_qk = rotation_angle_grad(&hc.q_rot, &d_qrot) + rotation_angle_grad(&hc.k_rot, &d_krot);
        let mut d_q = d_qrot;
        let mut d_k = d_krot;
        rotate_in_place(&mut d_q, hc.qk.cos().view(), hc.qk.sin().view(), true);
        rotate_in_place(&mut d_k, hc.qk.cos().view(), hc.qk.sin().view(), true);

        dq.slice_mut(s![.., h * d..(h + 1) * d]).assign(&d_q);
        dk.slice_mut(s![.., h * d..(h + 1) * d]).assign(&d_k);
        dv.slice_mut(s![.., h * d..(h + 1) * d]).assign(&d_v);
        dphase_qk.push(dphi_qk);
        dphase_vo.push(dphi_vo);
    }
    AttentionGrads { dq, dk, dv, dphase_qk, dphase_vo }
}

/// Plain multi-head attention with RoPE on queries and keys and no value
/// rotation: the reference RoCE must reduce to at zero phase.
pub fn rope_attention<T: Real>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    heads: usize,
    rope: &RotationField<T>,
) -> Result<Array2<T>, RoceError> {
    let d = check_inputs(&q, &k, &v, heads, rope)?;
    let scale = T::one() / T::lit(d as f64).sqrt();
    let mut output = Array2::zeros(q.raw_dim());
    for h in 0..heads {
        let mut qr = head_cols(&q, h, d);
        let mut kr = head_cols(&k, h, d);
        rotate_in_place(&mut qr, rope.cos().view(), rope.sin().view(), false);
        rotate_in_place(&mut kr, rope.cos().view(), rope.sin().view(), false);
        let mut a = qr.dot(&kr.t()) * scale;
        softmax_rows(&mut a);
        output.slice_mut(s![.., h * d..(h + 1) * d]).assign(&a.dot(&head_cols(&v, h, d)));
    }
    Ok(output)
}

/// Pre-softmax logits `q'·k'ᵀ/√d` of every head.
pub fn attention_logits<T: Real>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    heads: usize,
    rope: &RotationField<T>,
    phase_qk: &[PhaseField<T>],
) -> Result<Vec<Array2<T>>, RoceError> {
    let d = check_inputs(&q, &k, &k, heads, rope)?;
    let scale = T::one() / T::lit(d as f64).sqrt();
    (0..heads)
        .map(|h| {
            let qk = rope.add_angles(phase_qk[h].as_array().view())?;
            let mut qr = head_cols(&q, h, d);
            let mut kr = head_cols(&k, h, d);
            rotate_in_place(&mut qr, qk.cos().view(), qk.sin().view(), false);
            rotate_in_place(&mut kr, qk.cos().view(), qk.sin().view(), false);
            Ok(qr.dot(&kr.t()) * scale)
        })
        .collect()
}

/// Attention induced purely by phase differences: for every token `m`, the
/// mean over `channels` of `cos(φ(n,c) − φ(m,c))`.
pub fn phase_attention_map<T: Real>(phi: &PhaseField<T>, n: usize, channels: &[usize]) -> Result<Vec<f64>, RoceError> {
    if n >= phi.tokens() {
        return Err(RoceError::Shape(format!("token {n} out of range for {} tokens", phi.tokens())));
    }
    if channels.is_empty() || channels.iter().any(|&c| c >= phi.channels()) {
        return Err(RoceError::Shape(format!("channel set {channels:?} invalid for {} channels", phi.channels())));
    }
    let p = phi.as_array();
    Ok(p.axis_iter(Axis(0))
        .map(|row| {
            channels
                .iter()
                .map(|&c| (p[[n, c]].to_f64().unwrap() - row[c].to_f64().unwrap()).cos())
                .sum::<f64>()
                / channels.len() as f64
        })
        .collect())
}
