use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use rand::Rng;

use super::{ToyConfig, ToyError};
use crate::nn::{randn, silu, silu_backward, Grads, LayerNorm, LayerNormCache, Linear, ParamId, ParamStore, Role};
use crate::roce::{
    build_phase, build_phase_backward, roce_attention_backward, roce_attention_forward, AttentionCache, PhaseField,
    PhaseNetwork, PhaseOutput, FEATURE_DIM,
};
use crate::rope::{rope_3d_angles, RotationField, ROPE_BASE};
use crate::Real;

pub const D_LATENT: usize = 3;

/// Which of a head's two phase networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PhasePath {
    /// Query/key phases.
    Qk,
    /// Value/output phases.
    Vo,
}

/// Everything the velocity network sees for one example.
#[derive(Debug, Clone)]
pub struct ModelInput<T> {
    /// Noisy target latents, `N x 3`.
    pub z_t: Array2<T>,
    /// Clean source latents, `N x 3`.
    pub source: Array2<T>,
    pub t: f64,
    /// Camera features, `2N x FEATURE_DIM`.
    pub features: Array2<T>,
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    phase_qk: Vec<PhaseNetwork>,
    phase_vo: Vec<PhaseNetwork>,
    norm2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

struct BlockCache<T> {
    n1c: LayerNormCache<T>,
    n1: Array2<T>,
    attn: AttentionCache<T>,
    attn_out: Array2<T>,
    phase_qk: Vec<PhaseOutput<T>>,
    phase_vo: Vec<PhaseOutput<T>>,
    n2c: LayerNormCache<T>,
    n2: Array2<T>,
    pre: Array2<T>,
    act: Array2<T>,
}

pub struct ModelCache<T> {
    x_in: Array2<T>,
    temb: Array2<T>,
    blocks: Vec<BlockCache<T>>,
    final_c: LayerNormCache<T>,
    final_n: Array2<T>,
}

/// Pre-norm transformer over the `2N` target + source tokens. Parameter ids
/// are independent of the scalar type, so one model drives any store.
#[derive(Debug, Clone)]
pub struct ToyModel {
    cfg: ToyConfig,
    embed: Linear,
    segment: ParamId,
    time: Linear,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    head: Linear,
    rope_angles: Array2<f64>,
}

fn time_embedding<T: Real>(t: f64, d: usize) -> Array2<T> {
    let half = d / 2;
    let mut e = Array2::zeros((1, d));
    for k in 0..half {
        let freq = (-(ROPE_BASE.ln()) * k as f64 / half as f64).exp();
        let a = 1000.0 * t * freq;
        e[[0, k]] = T::lit(a.sin());
        e[[0, half + k]] = T::lit(a.cos());
    }
    e
}

impl ToyModel {
    pub fn new<T: Real>(cfg: &ToyConfig, rng: &mut impl Rng) -> Result<(Self, ParamStore<T>), ToyError> {
        cfg.validate()?;
        let mut st = ParamStore::new();
        let d = cfg.d_model();
        let embed = Linear::new(&mut st, "embed", Role::Embed, D_LATENT, d, true, rng);
        let segment = st.add("segment", Role::Embed, randn(2, d, 0.1, rng));
        let time = Linear::new(&mut st, "time", Role::Time, d, d, true, rng);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for l in 0..cfg.blocks {
            let p = format!("block{l}");
            let norm1 = LayerNorm::new(&mut st, &format!("{p}.norm1"), d);
            let lin = |n: &str, st: &mut ParamStore<T>, rng: &mut _| {
                Linear::new(st, &format!("{p}.attn.{n}"), Role::Attention, d, d, true, rng)
            };
            let (wq, wk, wv, wo) = (lin("q", &mut st, rng), lin("k", &mut st, rng), lin("v", &mut st, rng), lin("o", &mut st, rng));
            let nets = |role: Role, tag: &str, st: &mut ParamStore<T>, rng: &mut _| -> Vec<PhaseNetwork> {
                (0..cfg.heads)
                    .map(|h| {
                        let name = format!("{p}.{tag}.head{h}");
                        PhaseNetwork::new(st, &name, role, FEATURE_DIM, cfg.phase_hidden, cfg.d_head / 3, rng)
                    })
                    .collect()
            };
            let phase_qk = nets(Role::PhaseQk, "phase_qk", &mut st, rng);
            let phase_vo = nets(Role::PhaseVo, "phase_vo", &mut st, rng);
            let norm2 = LayerNorm::new(&mut st, &format!("{p}.norm2"), d);
            let hidden = cfg.ff_mult * d;
            let ff1 = Linear::new(&mut st, &format!("{p}.ff1"), Role::FeedForward, d, hidden, true, rng);
            let ff2 = Linear::new(&mut st, &format!("{p}.ff2"), Role::FeedForward, hidden, d, true, rng);
            blocks.push(Block { norm1, wq, wk, wv, wo, phase_qk, phase_vo, norm2, ff1, ff2 });
        }
        let final_norm = LayerNorm::new(&mut st, "final_norm", d);
        let head = Linear::new(&mut st, "head", Role::Output, d, D_LATENT, true, rng);
        let rope_angles = rope_3d_angles(cfg.f, cfg.h, cfg.w, cfg.d_head, ROPE_BASE)?;
        let rope_angles = concatenate(Axis(0), &[rope_angles.view(), rope_angles.view()]).expect("same width");
        let model = Self { cfg: cfg.clone(), embed, segment, time, blocks, final_norm, head, rope_angles };
        Ok((model, st))
    }

    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    /// Velocity prediction for the target block (`N x 3`).
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        input: &ModelInput<T>,
    ) -> Result<(Array2<T>, ModelCache<T>), ToyError> {
        let n = self.cfg.tokens();
        let (d_head, heads) = (self.cfg.d_head, self.cfg.heads);
        if input.z_t.dim() != (n, D_LATENT) || input.source.dim() != (n, D_LATENT) {
            return Err(ToyError::Config(format!("latents must be {n} x {D_LATENT}")));
        }
        if input.features.dim() != (2 * n, FEATURE_DIM) {
            return Err(ToyError::Config(format!("features must be {} x {FEATURE_DIM}", 2 * n)));
        }
        let x_in = concatenate(Axis(0), &[input.z_t.view(), input.source.view()]).expect("same width");
        let mut x = self.embed.forward(store, x_in.view());
        let seg = store.get(self.segment);
        x.slice_mut(s![..n, ..]).zip_mut_with(&seg.row(0).broadcast((n, seg.ncols())).unwrap(), |a, &b| *a += b);
        x.slice_mut(s![n.., ..]).zip_mut_with(&seg.row(1).broadcast((n, seg.ncols())).unwrap(), |a, &b| *a += b);
        let temb = time_embedding::<T>(input.t, self.cfg.d_model());
        x += &self.time.forward(store, temb.view());

        let rope = RotationField::<T>::from_angles_f64(&self.rope_angles);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (n1, n1c) = b.norm1.forward(store, x.view());
            let q = b.wq.forward(store, n1.view());
            let k = b.wk.forward(store, n1.view());
            let v = b.wv.forward(store, n1.view());
            let phases = |nets: &[PhaseNetwork]| -> Result<Vec<PhaseOutput<T>>, ToyError> {
                nets.iter()
                    .map(|net| Ok(build_phase(net, store, input.features.view(), self.cfg.apply_to, d_head)?))
                    .collect()
            };
            let phase_qk = phases(&b.phase_qk)?;
            let phase_vo = phases(&b.phase_vo)?;
            let fqk: Vec<_> = phase_qk.iter().map(|p| p.field.clone()).collect();
            let fvo: Vec<_> = phase_vo.iter().map(|p| p.field.clone()).collect();
            let (attn_out, attn) = roce_attention_forward(q.view(), k.view(), v.view(), heads, &rope, &fqk, &fvo)?;
            x += &b.wo.forward(store, attn_out.view());

            let (n2, n2c) = b.norm2.forward(store, x.view());
            let pre = b.ff1.forward(store, n2.view());
            let act = silu(&pre);
            x += &b.ff2.forward(store, act.view());
            caches.push(BlockCache { n1c, n1, attn, attn_out, phase_qk, phase_vo, n2c, n2, pre, act });
        }
        let (final_n, final_c) = self.final_norm.forward(store, x.view());
        let y = self.head.forward(store, final_n.view());
        let out = y.slice(s![..n, ..]).to_owned();
        Ok((out, ModelCache { x_in, temb, blocks: caches, final_c, final_n }))
    }

    /// Parameter gradients of a loss whose gradient w.r.t. the output is `d_out`.
    pub fn backward<T: Real>(&self, store: &ParamStore<T>, cache: &ModelCache<T>, d_out: &Array2<T>, grads: &mut Grads<T>) {
        let n = self.cfg.tokens();
        let mut dy = Array2::zeros((2 * n, D_LATENT));
        dy.slice_mut(s![..n, ..]).assign(d_out);
        let dn = self.head.backward(store, cache.final_n.view(), dy.view(), grads);
        let mut dx = self.final_norm.backward(store, &cache.final_c, dn.view(), grads);

        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let d_act = b.ff2.backward(store, c.act.view(), dx.view(), grads);
            let d_pre = silu_backward(&c.pre, d_act.view());
            let dn2 = b.ff1.backward(store, c.n2.view(), d_pre.view(), grads);
            dx += &b.norm2.backward(store, &c.n2c, dn2.view(), grads);

            let d_attn = b.wo.backward(store, c.attn_out.view(), dx.view(), grads);
            let ag = roce_attention_backward(&c.attn, d_attn.view());
            for (h, net) in b.phase_qk.iter().enumerate() {
                build_phase_backward(net, store, &c.phase_qk[h], &ag.dphase_qk[h], grads);
            }
            for (h, net) in b.phase_vo.iter().enumerate() {
                build_phase_backward(net, store, &c.phase_vo[h], &ag.dphase_vo[h], grads);
            }
            let mut dn1 = b.wq.backward(store, c.n1.view(), ag.dq.view(), grads);
            dn1 += &b.wk.backward(store, c.n1.view(), ag.dk.view(), grads);
            dn1 += &b.wv.backward(store, c.n1.view(), ag.dv.view(), grads);
            dx += &b.norm1.backward(store, &c.n1c, dn1.view(), grads);
        }

        let seg = grads.get_mut(self.segment);
        let top = dx.slice(s![..n, ..]).sum_axis(Axis(0));
        let bottom = dx.slice(s![n.., ..]).sum_axis(Axis(0));
        seg.row_mut(0).zip_mut_with(&top, |a, &b| *a += b);
        seg.row_mut(1).zip_mut_with(&bottom, |a, &b| *a += b);
        let dt = dx.sum_axis(Axis(0)).insert_axis(Axis(0));
        self.time.backward_params(cache.temb.view(), dt.view(), grads);
        self.embed.backward_params(cache.x_in.view(), dx.view(), grads);
    }

    pub fn velocity<T: Real>(&self, store: &ParamStore<T>, input: &ModelInput<T>) -> Result<Array2<T>, ToyError> {
        Ok(self.forward(store, input)?.0)
    }

    /// Phase field produced by one head's network for `features` (`2N x FEATURE_DIM`).
    pub fn phase_field<T: Real>(
        &self,
        store: &ParamStore<T>,
        features: ArrayView2<T>,
        block: usize,
        head: usize,
        path: PhasePath,
    ) -> Result<PhaseField<T>, ToyError> {
        let b = self
            .blocks
            .get(block)
            .ok_or_else(|| ToyError::Config(format!("block {block} out of range ({} blocks)", self.blocks.len())))?;
        let nets = match path {
            PhasePath::Qk => &b.phase_qk,
            PhasePath::Vo => &b.phase_vo,
        };
        let net = nets.get(head).ok_or_else(|| ToyError::Config(format!("head {head} out of range ({} heads)", nets.len())))?;
        if features.dim() != (2 * self.cfg.tokens(), FEATURE_DIM) {
            return Err(ToyError::Config(format!("features must be {} x {FEATURE_DIM}", 2 * self.cfg.tokens())));
        }
        Ok(build_phase(net, store, features, self.cfg.apply_to, self.cfg.d_head)?.field)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roce::camera_features;
    use crate::toymodel::make_dataset;
    use rand::seq::index::sample;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ToyConfig {
        ToyConfig { f: 2, h: 2, w: 3, heads: 2, d_head: 12, phase_hidden: 8, ff_mult: 2, ..ToyConfig::default() }
    }

    fn input_for(cfg: &ToyConfig, seed: u64) -> (ModelInput<f64>, Array2<f64>) {
        let item = make_dataset(cfg, 1, seed).unwrap().remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = randn::<f64>(cfg.tokens(), D_LATENT, 1.0, &mut rng);
        let t = 0.37;
        let z_t = &noise * t + &item.target * (1.0 - t);
        let features = camera_features(&item.camera_tokens(cfg).unwrap());
        (ModelInput { z_t, source: item.source.clone(), t, features }, &noise - &item.target)
    }

    #[test]
    fn parameter_budget() {
        let cfg = ToyConfig::default();
        let (_, store) = ToyModel::new::<f32>(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(store.scalar_count() < 2_000_000, "{}", store.scalar_count());
        assert!(store.all_finite());
        let (_, s64) = ToyModel::new::<f64>(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s64.cast::<f32>(), store);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (model, mut store) = ToyModel::new::<f64>(&cfg, &mut rng).unwrap();
        // move off the zero-phase initialization so the phase networks carry gradient
        for e in store.entries_mut() {
            let noise = randn::<f64>(e.value.nrows(), e.value.ncols(), 0.3, &mut rng);
            e.value += &noise;
        }
        let (input, target) = input_for(&cfg, 4);
        let loss = |s: &ParamStore<f64>| {
            let u = model.velocity(s, &input).unwrap();
            (&u - &target).mapv(|e| e * e).mean().unwrap()
        };
        let (u, cache) = model.forward(&store, &input).unwrap();
        let d_out = (&u - &target) * (2.0 / u.len() as f64);
        let mut grads = store.zeros_like();
        model.backward(&store, &cache, &d_out, &mut grads);

        let mut picks: Vec<(usize, usize)> = Vec::new();
        for (p, e) in store.entries().iter().enumerate() {
            if e.role.is_phase() {
                picks.push((p, rng.random_range(0..e.value.len())));
            }
        }
        let total: Vec<(usize, usize)> =
            store.entries().iter().enumerate().flat_map(|(p, e)| (0..e.value.len()).map(move |i| (p, i))).collect();
        picks.extend(sample(&mut rng, total.len(), 40).into_iter().map(|i| total[i]));
        assert!(picks.len() >= 50);

        let h = 1e-4;
        let mut worst = 0.0f64;
        for (p, i) in picks {
            let orig = store.entries()[p].value.as_slice().unwrap()[i];
            store.entries_mut()[p].value.as_slice_mut().unwrap()[i] = orig + h;
            let up = loss(&store);
            store.entries_mut()[p].value.as_slice_mut().unwrap()[i] = orig - h;
            let down = loss(&store);
            store.entries_mut()[p].value.as_slice_mut().unwrap()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads.g[p].as_slice().unwrap()[i];
            let rel = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-6));
            worst = worst.max(rel);
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn camera_ablation_identical_at_init() {
        let cfg = tiny();
        let (model, store) = ToyModel::new::<f64>(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let (input, _) = input_for(&cfg, 2);
        let ablated = ModelInput { features: camera_features(&crate::roce::CameraTokens::from_array(Array2::zeros((2 * cfg.tokens(), 6))).unwrap()), ..input.clone() };
        assert_eq!(model.velocity(&store, &input).unwrap(), model.velocity(&store, &ablated).unwrap());
    }

    #[test]
    fn rejects_bad_shapes() {
        let cfg = tiny();
        let (model, store) = ToyModel::new::<f64>(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let (mut input, _) = input_for(&cfg, 2);
        input.z_t = Array2::zeros((3, 3));
        assert!(model.forward(&store, &input).is_err());
    }
}
