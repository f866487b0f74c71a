use std::collections::BTreeMap;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::model::D_LATENT;
use super::train::substream;
use super::{ModelInput, ToyBatchItem, ToyConfig, ToyError, ToyModel, ValidationSet};
use crate::flow::{mse, sample};
use crate::nn::{randn, ParamStore};
use crate::roce::camera_features;

const STREAM_SAMPLE_NOISE: u64 = 5;

/// `(row, col)` of the brightest token of an `h·w x 3` frame.
pub fn brightest_token(frame: ArrayView2<f64>, w: usize) -> (usize, usize) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, px) in frame.outer_iter().enumerate() {
        let b = px.sum();
        if b > best.1 {
            best = (i, b);
        }
    }
    (best.0 / w, best.0 % w)
}

/// Mean distance, in token cells, between the brightest token of each target
/// latent frame and the projection of the moving blob's center under the
/// target trajectory. Frames where the center projects outside the image are
/// skipped; `None` when no frame qualifies.
pub fn blob_localization_error(latents: &Array2<f64>, item: &ToyBatchItem, cfg: &ToyConfig) -> Option<f64> {
    let moving = item.scene.moving.as_ref()?;
    let k = &item.traj_t.intrinsics;
    let per = cfg.h * cfg.w;
    let mut total = 0.0;
    let mut frames = 0;
    for i in 0..cfg.f {
        let pose = item.traj_t.poses.get(i * cfg.stride)?;
        let center = pose.world_to_camera(&moving.center_at(item.scene_time(i, cfg)));
        let Some((x, y)) = k.project(&center) else { continue };
        if !(0.0..k.width as f64).contains(&x) || !(0.0..k.height as f64).contains(&y) {
            continue;
        }
        let (tx, ty) = k.to_token_coords(x, y, cfg.h, cfg.w);
        let (row, col) = brightest_token(latents.slice(s![i * per..(i + 1) * per, ..]), cfg.w);
        total += ((col as f64 + 0.5 - tx).powi(2) + (row as f64 + 0.5 - ty).powi(2)).sqrt();
        frames += 1;
    }
    (frames > 0).then(|| total / frames as f64)
}

/// Euler-sampled target latents for `item`, starting from seeded noise.
pub fn generate_target(
    model: &ToyModel,
    store: &ParamStore<f32>,
    item: &ToyBatchItem,
    steps: usize,
    seed: u64,
) -> Result<Array2<f64>, ToyError> {
    let cfg = model.config();
    let tokens = item.camera_tokens(cfg)?;
    let tokens = if cfg.no_camera { tokens.zeroed() } else { tokens };
    let features = camera_features::<f32>(&tokens);
    let source = item.source.mapv(|x| x as f32);
    let z_init = randn::<f32>(cfg.tokens(), D_LATENT, 1.0, &mut substream(seed, STREAM_SAMPLE_NOISE));
    let field = |z: ArrayView2<f32>, t: f64, _: &()| {
        let input = ModelInput { z_t: z.to_owned(), source: source.clone(), t, features: features.clone() };
        model.velocity(store, &input).expect("shapes fixed by the config")
    };
    Ok(sample(&field, z_init.view(), steps, &())?.mapv(|x| x as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindReport {
    pub items: usize,
    pub val_loss: f64,
    pub localization_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseProxyReport {
    pub items: usize,
    pub val_loss: f64,
    /// Mean over the sampled items that had a visible moving blob.
    pub localization_error: Option<f64>,
    pub sampled_items: usize,
    pub per_kind: BTreeMap<String, KindReport>,
}

/// Validation loss per target trajectory kind plus blob localization error
/// on generated samples of the first `loc_items` validation items.
pub fn evaluate_pose_proxy(
    model: &ToyModel,
    store: &ParamStore<f32>,
    val: &ValidationSet,
    loc_items: usize,
    seed: u64,
) -> Result<PoseProxyReport, ToyError> {
    let cfg = model.config();
    let mut per_kind: BTreeMap<String, (usize, f64, Vec<f64>)> = BTreeMap::new();
    let mut total = 0.0;
    for (idx, (item, (input, target))) in val.items.iter().zip(&val.prepared).enumerate() {
        let u = model.velocity(store, input)?;
        let loss = mse(u.view(), target.view())?;
        total += loss;
        let entry = per_kind.entry(item.kind_t.map_or("custom", |k| k.name()).to_string()).or_default();
        entry.0 += 1;
        entry.1 += loss;
        if idx < loc_items {
            let generated = generate_target(model, store, item, cfg.sample_steps, seed ^ item.seed)?;
            if let Some(e) = blob_localization_error(&generated, item, cfg) {
                entry.2.push(e);
            }
        }
    }
    let all_loc: Vec<f64> = per_kind.values().flat_map(|v| v.2.iter().copied()).collect();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(PoseProxyReport {
        items: val.len(),
        val_loss: total / val.len().max(1) as f64,
        localization_error: mean(&all_loc),
        sampled_items: all_loc.len(),
        per_kind: per_kind
            .into_iter()
            .map(|(k, (n, l, e))| (k, KindReport { items: n, val_loss: l / n as f64, localization_error: mean(&e) }))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::make_dataset;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ground_truth_frames_localize_within_a_cell() {
        let cfg = ToyConfig::default();
        let items = make_dataset(&cfg, 40, 11).unwrap();
        let mut n = 0;
        for item in &items {
            if let Some(e) = blob_localization_error(&item.target, item, &cfg) {
                assert!(e < 1.0, "item {}: {e}", item.seed);
                n += 1;
            }
        }
        assert!(n >= 35);
    }

    #[test]
    fn noise_frames_match_random_guess_expectation() {
        let cfg = ToyConfig::default();
        let items = make_dataset(&cfg, 20, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut got, mut want, mut n) = (0.0, 0.0, 0);
        for item in &items {
            for _ in 0..20 {
                let noise = randn::<f64>(cfg.tokens(), 3, 1.0, &mut rng);
                let Some(e) = blob_localization_error(&noise, item, &cfg) else { continue };
                got += e;
                // oracle: per frame, mean distance from the projected center
                // to every token center, averaged like the metric
                let k = &item.traj_t.intrinsics;
                let m = item.scene.moving.as_ref().unwrap();
                let mut frames = (0.0, 0);
                for i in 0..cfg.f {
                    let c = item.traj_t.poses[i * cfg.stride].world_to_camera(&m.center_at(item.scene_time(i, &cfg)));
                    let Some((x, y)) = k.project(&c) else { continue };
                    if !(0.0..96.0).contains(&x) || !(0.0..96.0).contains(&y) {
                        continue;
                    }
                    let (tx, ty) = k.to_token_coords(x, y, cfg.h, cfg.w);
                    let mut d = 0.0;
                    for r in 0..cfg.h {
                        for c in 0..cfg.w {
                            d += ((c as f64 + 0.5 - tx).powi(2) + (r as f64 + 0.5 - ty).powi(2)).sqrt();
                        }
                    }
                    frames.0 += d / (cfg.h * cfg.w) as f64;
                    frames.1 += 1;
                }
                want += frames.0 / frames.1 as f64;
                n += 1;
            }
        }
        let (got, want) = (got / n as f64, want / n as f64);
        assert!((got - want).abs() < 0.1 * want, "{got} vs {want}");
        let _ = rng.random::<u8>();
    }

    #[test]
    fn brightest_token_indexing() {
        let mut frame = Array2::<f64>::zeros((6, 3));
        frame[[4, 1]] = 1.0;
        assert_eq!(brightest_token(frame.view(), 3), (1, 1));
    }
}
