//! Sparse-masked training: cross-entropy over labeled voxels only, Adam
//! updates, reduce-on-plateau learning rate, checkpointing and split
//! management. Every random choice flows from the config seed through
//! named ChaCha streams, so a seed pins the whole run.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::colloc::{LabeledPatch, NUM_LAYERS, SENTINEL, SPECTRAL_CHANNELS};
use crate::io::config;
use crate::io::cpck::save_checkpoint;
use crate::io::{io_err, write_atomic, IoError};
use crate::model::{forward_arch, Arch, ModelConfig, ModelError, ModelParameters};
use crate::tensor::{AdamState, Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("patch shapes disagree within a batch: {0:?} vs {1:?}")]
    MixedPatchShapes((usize, usize, usize), (usize, usize, usize)),
    #[error("dense labels requested but the patch carries none")]
    DenseUnavailable,
    #[error("model expects {expected} input channels, data has {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("non-finite value in '{op}' at epoch {epoch}, batch {batch}; run aborted")]
    NonFinite {
        op: String,
        epoch: usize,
        batch: usize,
    },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] IoError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Normalization applied when assembling model inputs from patches: VIS
/// reflectances pass through, TIR brightness temperatures map to roughly
/// unit scale, auxiliary planes are already normalized.
pub fn normalize_channel(channel: usize, value: f32) -> f64 {
    if (6..SPECTRAL_CHANNELS).contains(&channel) {
        (value as f64 - 240.0) / 60.0
    } else {
        value as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub epochs: usize,
    /// Train/val/test split fractions; must sum to 1.
    pub split: [f64; 3],
    pub seed: u64,
    /// Stop once the epoch train loss drops below this value.
    pub early_stop_train_loss: Option<f64>,
    /// Train against the dense-truth volume (full mask) instead of the
    /// sparse track labels.
    pub use_dense: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            lr0: 1e-3,
            plateau_factor: 0.5,
            plateau_patience: 5,
            epochs: 50,
            split: [0.8, 0.1, 0.1],
            seed: 0,
            early_stop_train_loss: None,
            use_dense: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lr0 > 0.0) {
            return bad("lr0 must be > 0");
        }
        if !(0.0 < self.plateau_factor && self.plateau_factor < 1.0) {
            return bad("plateau_factor must be in (0, 1)");
        }
        if (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-6
            || self.split.iter().any(|&r| r < 0.0)
        {
            return bad("split ratios must be non-negative and sum to 1");
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        map.insert("batch_size".into(), self.batch_size.to_string());
        map.insert("lr0".into(), self.lr0.to_string());
        map.insert("plateau_factor".into(), self.plateau_factor.to_string());
        map.insert("plateau_patience".into(), self.plateau_patience.to_string());
        map.insert("epochs".into(), self.epochs.to_string());
        map.insert(
            "split".into(),
            format!("{}:{}:{}", self.split[0], self.split[1], self.split[2]),
        );
        map.insert("seed".into(), self.seed.to_string());
        if let Some(t) = self.early_stop_train_loss {
            map.insert("early_stop_train_loss".into(), t.to_string());
        }
        map.insert("dense".into(), self.use_dense.to_string());
        map
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        if let Some(v) = config::get_parsed(map, "batch_size")? {
            cfg.batch_size = v;
        }
        if let Some(v) = config::get_parsed(map, "lr0")? {
            cfg.lr0 = v;
        }
        if let Some(v) = config::get_parsed(map, "plateau_factor")? {
            cfg.plateau_factor = v;
        }
        if let Some(v) = config::get_parsed(map, "plateau_patience")? {
            cfg.plateau_patience = v;
        }
        if let Some(v) = config::get_parsed(map, "epochs")? {
            cfg.epochs = v;
        }
        if let Some(raw) = map.get("split") {
            let parts: Vec<f64> = raw
                .split(':')
                .map(|p| p.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| TrainError::InvalidConfig(format!("bad split '{raw}'")))?;
            if parts.len() != 3 {
                return Err(TrainError::InvalidConfig(format!("bad split '{raw}'")));
            }
            let total: f64 = parts.iter().sum();
            if total <= 0.0 {
                return Err(TrainError::InvalidConfig(format!("bad split '{raw}'")));
            }
            cfg.split = [parts[0] / total, parts[1] / total, parts[2] / total];
        }
        if let Some(v) = config::get_parsed(map, "seed")? {
            cfg.seed = v;
        }
        if let Some(v) = config::get_parsed(map, "early_stop_train_loss")? {
            cfg.early_stop_train_loss = Some(v);
        }
        if let Some(v) = config::get_parsed(map, "dense")? {
            cfg.use_dense = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Mean `-log p(true class)` over the labeled voxels of the batch; zero
/// loss and zero gradient everywhere else.
pub fn masked_loss(
    g: &mut Graph,
    probs: Var,
    labels: &[u8],
    mask: &[bool],
) -> crate::tensor::Result<Var> {
    g.masked_nll(probs, labels, mask)
}

/// Deterministic shuffled split. Sizes are `floor(n*ratio)` for val and
/// test, remainder to train.
pub fn split_dataset(n: usize, ratios: [f64; 3], seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, STREAM_SPLIT);
    indices.shuffle(&mut rng);
    let n_val = (n as f64 * ratios[1]).floor() as usize;
    let n_test = (n as f64 * ratios[2]).floor() as usize;
    let n_train = n - n_val - n_test;
    let train = indices[..n_train].to_vec();
    let val = indices[n_train..n_train + n_val].to_vec();
    let test = indices[n_train + n_val..].to_vec();
    (train, val, test)
}

/// Reduce-on-plateau: scale by `factor` after `patience` consecutive
/// epochs without a strict improvement of the best validation loss.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    pub lr: f64,
    factor: f64,
    patience: usize,
    best: f64,
    bad_epochs: usize,
}

impl PlateauSchedule {
    pub fn new(lr0: f64, factor: f64, patience: usize) -> Self {
        PlateauSchedule {
            lr: lr0,
            factor,
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Feeds one validation loss; returns true when the rate was reduced.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.lr *= self.factor;
            self.bad_epochs = 0;
            true
        } else {
            false
        }
    }
}

/// One assembled batch in model layout.
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<u8>,
    pub mask: Vec<bool>,
}

impl Batch {
    pub fn effective_voxels(&self) -> usize {
        let hw = self.mask.len() / (self.x.shape()[0]);
        let mut count = 0;
        let b = self.x.shape()[0];
        for bi in 0..b {
            for d in 0..NUM_LAYERS {
                for p in 0..hw {
                    if self.mask[bi * hw + p]
                        && self.labels[(bi * NUM_LAYERS + d) * hw + p] != SENTINEL
                    {
                        count += 1;
                    }
                }
            }
        }
        count
    }
}

/// Stacks patches into `[B,C,H,W]` input with per-channel normalization,
/// plus the `[B,D,H,W]` labels and `[B,H,W]` mask the loss expects.
pub fn assemble_batch(patches: &[&LabeledPatch], use_dense: bool) -> Result<Batch> {
    let first = patches.first().ok_or(TrainError::EmptyTrainSet)?;
    let (c, h, w) = (first.num_channels, first.height, first.width);
    let b = patches.len();
    let mut x = Vec::with_capacity(b * c * h * w);
    let mut labels = Vec::with_capacity(b * NUM_LAYERS * h * w);
    let mut mask = Vec::with_capacity(b * h * w);
    for patch in patches {
        if (patch.num_channels, patch.height, patch.width) != (c, h, w) {
            return Err(TrainError::MixedPatchShapes(
                (c, h, w),
                (patch.num_channels, patch.height, patch.width),
            ));
        }
        for (i, &v) in patch.channels.iter().enumerate() {
            x.push(normalize_channel(i / (h * w), v));
        }
        if use_dense {
            let dense = patch.dense.as_ref().ok_or(TrainError::DenseUnavailable)?;
            labels.extend_from_slice(dense);
            mask.extend(std::iter::repeat(true).take(h * w));
        } else {
            labels.extend_from_slice(&patch.labels);
            mask.extend_from_slice(&patch.mask);
        }
    }
    let x = Tensor::from_vec(vec![b, c, h, w], x).map_err(TrainError::Tensor)?;
    Ok(Batch { x, labels, mask })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters after the final epoch.
    pub params: ModelParameters,
    /// Parameters at the best validation epoch (what gets checkpointed).
    pub best_params: ModelParameters,
    pub best_val: f64,
    pub log: Vec<EpochLog>,
    pub stopped_early: bool,
}

const STREAM_SPLIT: u64 = 10;
const STREAM_INIT: u64 = 20;
const STREAM_EPOCH_BASE: u64 = 100;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Mean masked loss of a parameter set over a patch list (no gradients).
pub fn evaluate_loss(
    arch: Arch,
    params: &ModelParameters,
    model_cfg: &ModelConfig,
    patches: &[&LabeledPatch],
    batch_size: usize,
    use_dense: bool,
) -> Result<f64> {
    let mut total = 0.0;
    let mut voxels = 0usize;
    for chunk in patches.chunks(batch_size.max(1)) {
        let batch = assemble_batch(chunk, use_dense)?;
        let mut g = Graph::inference();
        let vars = params.register(&mut g);
        let x = g.leaf(&batch.x);
        let probs = forward_arch(&mut g, arch, x, &vars, model_cfg)?;
        let loss = masked_loss(&mut g, probs, &batch.labels, &batch.mask)?;
        let effective = batch.effective_voxels();
        total += g.value(loss)[0] * effective as f64;
        voxels += effective;
    }
    if voxels == 0 {
        return Err(TrainError::EmptyTrainSet);
    }
    Ok(total / voxels as f64)
}

/// Runs the training loop.
///
/// Per epoch: shuffled mini-batches, masked cross-entropy, one Adam step
/// per batch; then a validation pass drives the plateau schedule and
/// best-checkpoint tracking (an empty validation set falls back to the
/// train loss). When `out_dir` is given, `best.cpck`, `model.ini` and
/// `log.csv` are written there.
pub fn train(
    arch: Arch,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &[LabeledPatch],
    val_set: &[LabeledPatch],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    if let Some(patch) = train_set.first() {
        if patch.num_channels != model_cfg.in_channels {
            return Err(TrainError::ChannelMismatch {
                expected: model_cfg.in_channels,
                got: patch.num_channels,
            });
        }
    }
    let mut init_rng = stream(cfg.seed, STREAM_INIT);
    let mut params = match arch {
        Arch::Sgmagnet => ModelParameters::init_sgmagnet(model_cfg, &mut init_rng)?,
        Arch::Baseline => ModelParameters::init_baseline(model_cfg, &mut init_rng)?,
    };
    let mut adam = AdamState::new(params.map());
    let mut schedule = PlateauSchedule::new(cfg.lr0, cfg.plateau_factor, cfg.plateau_patience);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best_val = f64::INFINITY;
    let mut best_params = params.clone();
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let lr = schedule.lr;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut stream(cfg.seed, STREAM_EPOCH_BASE + epoch as u64));
        let mut epoch_loss = 0.0;
        let mut epoch_voxels = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&LabeledPatch> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch = assemble_batch(&refs, cfg.use_dense)?;
            let diag = |e: TensorError| match e {
                TensorError::NonFinite { op } => TrainError::NonFinite {
                    op: op.to_string(),
                    epoch,
                    batch: batch_idx,
                },
                other => TrainError::Tensor(other),
            };
            let mut g = Graph::new();
            let vars = params.register(&mut g);
            let x = g.leaf(&batch.x);
            let probs = forward_arch(&mut g, arch, x, &vars, model_cfg).map_err(diag)?;
            let loss = masked_loss(&mut g, probs, &batch.labels, &batch.mask).map_err(diag)?;
            let loss_value = g.value(loss)[0];
            g.backward(loss).map_err(diag)?;
            let grads: BTreeMap<String, Vec<f64>> = vars
                .iter()
                .map(|(name, var)| (name.clone(), g.grad_vec(*var)))
                .collect();
            adam.step(params.map_mut(), &grads, lr).map_err(|e| match e {
                TensorError::NonFiniteGradient { name } => TrainError::NonFinite {
                    op: format!("gradient of {name}"),
                    epoch,
                    batch: batch_idx,
                },
                other => TrainError::Tensor(other),
            })?;
            let effective = batch.effective_voxels();
            epoch_loss += loss_value * effective as f64;
            epoch_voxels += effective;
        }
        let train_loss = epoch_loss / epoch_voxels.max(1) as f64;
        let val_loss = if val_set.is_empty() {
            train_loss
        } else {
            let refs: Vec<&LabeledPatch> = val_set.iter().collect();
            evaluate_loss(arch, &params, model_cfg, &refs, cfg.batch_size, cfg.use_dense)?
        };
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_params = params.clone();
            if let Some(dir) = out_dir {
                save_checkpoint(&dir.join("best.cpck"), best_params.map(), Some(&adam))?;
            }
        }
        schedule.observe(val_loss);
        if let Some(target) = cfg.early_stop_train_loss {
            if train_loss < target {
                stopped_early = true;
                break;
            }
        }
    }

    if let Some(dir) = out_dir {
        let mut model_map = model_cfg.to_map();
        model_map.insert("arch".into(), arch.to_string());
        let ini_path = dir.join("model.ini");
        let text = config::render_ini(&model_map);
        write_atomic(&ini_path, |w| {
            w.write_all(text.as_bytes()).map_err(|e| io_err(&ini_path, e))
        })?;
        let log_path = dir.join("log.csv");
        let mut csv = String::from("epoch,train_loss,val_loss,lr\n");
        for entry in &log {
            csv.push_str(&format!(
                "{},{:.12},{:.12},{:.12}\n",
                entry.epoch, entry.train_loss, entry.val_loss, entry.lr
            ));
        }
        write_atomic(&log_path, |w| {
            w.write_all(csv.as_bytes()).map_err(|e| io_err(&log_path, e))
        })?;
    }

    Ok(TrainOutcome {
        params,
        best_params,
        best_val,
        log,
        stopped_early,
    })
}
