use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Ix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::D_LATENT;
use super::{make_dataset, ModelInput, ToyBatchItem, ToyConfig, ToyError, ToyModel};
use crate::flow::TimestepSampler;
use crate::nn::{randn, Adam, ParamStore, Role};
use crate::roce::camera_features;
use crate::tensor_io::TensorDump;
use crate::Real;

/// One line of the JSON-lines loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Independent random streams derived from the run seed.
pub(crate) fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_INIT: u64 = 0;
const STREAM_TRAIN_DATA: u64 = 1;
const STREAM_VAL_DATA: u64 = 2;
const STREAM_BATCHES: u64 = 3;
const STREAM_VAL_NOISE: u64 = 4;

/// Model input and regression target for `item` at noise `noise` and time `t`.
pub(crate) fn prepare<T: Real>(
    item: &ToyBatchItem,
    cfg: &ToyConfig,
    noise: &Array2<f64>,
    t: f64,
) -> Result<(ModelInput<T>, Array2<T>), ToyError> {
    let tokens = item.camera_tokens(cfg)?;
    let tokens = if cfg.no_camera { tokens.zeroed() } else { tokens };
    let z_t = noise * t + &item.target * (1.0 - t);
    let input = ModelInput {
        z_t: z_t.mapv(T::lit),
        source: item.source.mapv(T::lit),
        t,
        features: camera_features(&tokens),
    };
    Ok((input, (noise - &item.target).mapv(T::lit)))
}

/// Validation items with frozen noise and timesteps.
pub struct ValidationSet {
    pub items: Vec<ToyBatchItem>,
    pub(crate) prepared: Vec<(ModelInput<f32>, Array2<f32>)>,
}

impl ValidationSet {
    pub fn new(cfg: &ToyConfig, items: Vec<ToyBatchItem>, seed: u64) -> Result<Self, ToyError> {
        let mut rng = substream(seed, STREAM_VAL_NOISE);
        let mut prepared = Vec::with_capacity(items.len());
        for item in &items {
            let noise = randn::<f64>(cfg.tokens(), D_LATENT, 1.0, &mut rng);
            let t = rng.random::<f64>();
            prepared.push(prepare(item, cfg, &noise, t)?);
        }
        Ok(Self { items, prepared })
    }

    pub fn for_config(cfg: &ToyConfig) -> Result<Self, ToyError> {
        let items = make_dataset(cfg, cfg.val_items.max(1), substream(cfg.seed, STREAM_VAL_DATA).random())?;
        Self::new(cfg, items, cfg.seed)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Mean flow-matching loss over the validation set.
pub fn validation_loss(model: &ToyModel, store: &ParamStore<f32>, val: &ValidationSet) -> Result<f64, ToyError> {
    let mut total = 0.0;
    for (input, target) in &val.prepared {
        let u = model.velocity(store, input)?;
        total += crate::flow::mse(u.view(), target.view())?;
    }
    Ok(total / val.prepared.len().max(1) as f64)
}

pub struct TrainOutcome {
    pub model: ToyModel,
    pub store: ParamStore<f32>,
    pub log: Vec<LogEntry>,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    pub val: ValidationSet,
}

/// Accumulates gradients of the mean loss over `batch` into `grads`; returns
/// the batch loss.
fn batch_step(
    model: &ToyModel,
    store: &ParamStore<f32>,
    batch: &[(ModelInput<f32>, Array2<f32>)],
    grads: &mut crate::nn::Grads<f32>,
) -> Result<f64, ToyError> {
    let mut loss = 0.0;
    let b = batch.len() as f32;
    for (input, target) in batch {
        let (u, cache) = model.forward(store, input)?;
        let err = &u - target;
        loss += err.iter().map(|&e| (e as f64) * (e as f64)).sum::<f64>() / err.len() as f64;
        let d_out = err * (2.0 / (u.len() as f32 * b));
        model.backward(store, &cache, &d_out, grads);
    }
    Ok(loss / batch.len() as f64)
}

/// Trains on a freshly generated dataset, logging every step. `on_log` sees
/// each entry as it is produced.
pub fn train(cfg: &ToyConfig, on_log: &mut dyn FnMut(&LogEntry)) -> Result<TrainOutcome, ToyError> {
    cfg.validate()?;
    let (model, mut store) = ToyModel::new::<f32>(cfg, &mut substream(cfg.seed, STREAM_INIT))?;
    let data = make_dataset(cfg, cfg.train_items, substream(cfg.seed, STREAM_TRAIN_DATA).random())?;
    let val = ValidationSet::for_config(cfg)?;
    let trainable = cfg.trainable_mask(&store);
    let mut opt = Adam::new(&store, cfg.lr);
    let mut rng = substream(cfg.seed, STREAM_BATCHES);
    let initial_val_loss = validation_loss(&model, &store, &val)?;
    let mut log = Vec::with_capacity(cfg.steps);
    let mut final_val_loss = initial_val_loss;
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let item = &data[rng.random_range(0..data.len())];
            let noise = randn::<f64>(cfg.tokens(), D_LATENT, 1.0, &mut rng);
            let t = cfg.timestep.sample(&mut rng);
            batch.push(prepare::<f32>(item, cfg, &noise, t)?);
        }
        let mut grads = store.zeros_like();
        let train_loss = batch_step(&model, &store, &batch, &mut grads)?;
        if !train_loss.is_finite() {
            return Err(ToyError::NonFiniteLoss { step, loss: train_loss });
        }
        opt.step(&mut store, &grads, &trainable);
        let val_loss = if step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0) {
            final_val_loss = validation_loss(&model, &store, &val)?;
            Some(final_val_loss)
        } else {
            None
        };
        let entry = LogEntry { step, train_loss, val_loss };
        on_log(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { model, store, log, initial_val_loss, final_val_loss, val })
}

/// Repeatedly fits one fixed example (fixed noise and `t`). Entry `i` holds
/// the loss before update `i + 1`; the last entry is after the final update.
pub fn train_overfit(cfg: &ToyConfig, steps: usize, lr: f64) -> Result<Vec<LogEntry>, ToyError> {
    cfg.validate()?;
    let (model, mut store) = ToyModel::new::<f32>(cfg, &mut substream(cfg.seed, STREAM_INIT))?;
    let item = make_dataset(cfg, 1, substream(cfg.seed, STREAM_TRAIN_DATA).random())?.remove(0);
    let mut rng = substream(cfg.seed, STREAM_BATCHES);
    let noise = randn::<f64>(cfg.tokens(), D_LATENT, 1.0, &mut rng);
    let t = TimestepSampler::Uniform.sample(&mut rng);
    let batch = vec![prepare::<f32>(&item, cfg, &noise, t)?];
    let trainable = cfg.trainable_mask(&store);
    let mut opt = Adam::new(&store, lr);
    let mut log = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let mut grads = store.zeros_like();
        let train_loss = batch_step(&model, &store, &batch, &mut grads)?;
        if !train_loss.is_finite() {
            return Err(ToyError::NonFiniteLoss { step, loss: train_loss });
        }
        log.push(LogEntry { step, train_loss, val_loss: None });
        if step < steps {
            opt.step(&mut store, &grads, &trainable);
        }
    }
    Ok(log)
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamRecord {
    file: String,
    shape: [usize; 2],
    role: Role,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: ToyConfig,
    params: BTreeMap<String, ParamRecord>,
}

/// Writes `manifest.json` plus one tensor dump per parameter into `dir`.
pub fn save_checkpoint(dir: &Path, cfg: &ToyConfig, store: &ParamStore<f32>) -> Result<(), ToyError> {
    fs::create_dir_all(dir)?;
    let mut params = BTreeMap::new();
    for e in store.entries() {
        let file = format!("{}.rctd", e.name);
        TensorDump::from_array(&e.value.clone().into_dyn()).write(dir.join(&file))?;
        params.insert(e.name.clone(), ParamRecord { file, shape: [e.value.nrows(), e.value.ncols()], role: e.role });
    }
    let manifest = Manifest { config: cfg.clone(), params };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Loads a checkpoint given its manifest path (or the directory holding it).
pub fn load_checkpoint(path: &Path) -> Result<(ToyModel, ParamStore<f32>), ToyError> {
    let manifest_path = if path.is_dir() { path.join("manifest.json") } else { path.to_path_buf() };
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    let (model, mut store) = ToyModel::new::<f32>(&manifest.config, &mut substream(0, STREAM_INIT))?;
    if manifest.params.len() != store.len() {
        return Err(ToyError::Checkpoint(format!("{} parameters, model has {}", manifest.params.len(), store.len())));
    }
    for e in store.entries_mut() {
        let rec = manifest.params.get(&e.name).ok_or_else(|| ToyError::Checkpoint(format!("missing {}", e.name)))?;
        if rec.role != e.role {
            return Err(ToyError::Checkpoint(format!("role mismatch for {}", e.name)));
        }
        let dump = TensorDump::read(dir.join(&rec.file))?;
        let value = dump
            .to_array::<f32>()?
            .into_dimensionality::<Ix2>()
            .map_err(|_| ToyError::Checkpoint(format!("{} is not a matrix", e.name)))?;
        if value.dim() != e.value.dim() || rec.shape != [value.nrows(), value.ncols()] {
            return Err(ToyError::Checkpoint(format!("shape mismatch for {}", e.name)));
        }
        e.value = value;
    }
    if !store.all_finite() {
        return Err(ToyError::Checkpoint("non-finite parameters".into()));
    }
    Ok((model, store))
}
