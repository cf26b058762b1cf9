//! Train/validation split, epoch loop and best-checkpoint retention.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocks::BlockDataset;
use crate::grid::Mask;
use crate::inference::{binarize, THRESHOLD};
use crate::metrics::dice;
use crate::nn::{soft_dice_loss, Adam, DiceReduction, NetConfig, Network, NnError, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("need at least 2 samples to split, got {0}")]
    TooFewSamples(usize),
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("loss diverged at epoch {epoch}, batch {batch}: {value}")]
    DivergenceDetected { epoch: usize, batch: usize, value: f64 },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub block_id: usize,
    pub net: NetConfig,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub val_fraction: f64,
    /// Seeds the split and the per-epoch batch shuffling.
    pub seed: u64,
    #[serde(default)]
    pub dice_reduction: DiceReduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            block_id: 0,
            net: NetConfig::default(),
            epochs: 500,
            lr: 1e-5,
            batch_size: 8,
            val_fraction: 0.2,
            seed: 0,
            dice_reduction: DiceReduction::Batch,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(TrainError::BadConfig(format!("val_fraction {} not in (0, 1)", self.val_fraction)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::BadConfig(format!("lr {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub block_id: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_dice: f64,
}

impl TrainReport {
    /// One JSON object per epoch.
    pub fn to_json_lines(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("epoch record serializes") + "\n")
            .collect()
    }
}

/// Seeded shuffle, then the first `round((1 - val_fraction) · n)` indices
/// train and the rest validate. Both sides keep at least one sample.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), TrainError> {
    if n < 2 {
        return Err(TrainError::TooFewSamples(n));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(TrainError::BadConfig(format!("val_fraction {val_fraction} not in (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (((1.0 - val_fraction) * n as f64).round() as usize).clamp(1, n - 1);
    let val = idx.split_off(n_train);
    Ok((idx, val))
}

pub fn split(dataset: &BlockDataset, val_fraction: f64, seed: u64) -> Result<(BlockDataset, BlockDataset), TrainError> {
    let (t, v) = split_indices(dataset.len(), val_fraction, seed)?;
    Ok((dataset.subset(&t), dataset.subset(&v)))
}

fn batch_tensors(ds: &BlockDataset, indices: &[usize]) -> Result<(Tensor, Tensor), NnError> {
    let x = Tensor::from_grids(indices.iter().map(|&i| &ds.pairs[i].0))?;
    let targets: Vec<_> = indices.iter().map(|&i| ds.pairs[i].1.map(f64::from)).collect();
    let y = Tensor::from_grids(targets.iter())?;
    Ok((x, y))
}

/// Mean per-sample hard Dice (threshold 0.5) of `net` on `ds`.
pub fn validation_dice(net: &Network, ds: &BlockDataset, batch_size: usize) -> Result<f64, NnError> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, _) = batch_tensors(ds, chunk)?;
        let y = net.forward(&x)?;
        for (k, &i) in chunk.iter().enumerate() {
            let pred: Mask = binarize(&y.grid(k, 0), THRESHOLD);
            total += dice(pred.as_slice(), ds.pairs[i].1.as_slice()).expect("same shape");
        }
    }
    Ok(total / ds.len() as f64)
}

/// Trains from a fresh seeded initialization and returns the network of the
/// epoch with the best validation Dice.
pub fn train_block(train: &BlockDataset, val: &BlockDataset, cfg: &TrainConfig) -> Result<(Network, TrainReport), TrainError> {
    train_block_with(train, val, cfg, |_| {})
}

/// [`train_block`] with a per-epoch callback.
pub fn train_block_with(
    train: &BlockDataset,
    val: &BlockDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Network, TrainReport), TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::TooFewSamples(0));
    }
    let mut net = Network::new(cfg.net)?;
    let adam = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(Network, usize, f64)> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = batch_tensors(train, chunk)?;
            let tape = net.forward_tape(&x)?;
            let (loss, grad) = soft_dice_loss(tape.output(), &y, cfg.dice_reduction)?;
            if !loss.is_finite() {
                return Err(TrainError::DivergenceDetected { epoch, batch: b, value: loss });
            }
            let grads = net.backward(&tape, &grad)?;
            net.adam_step(&grads, &adam);
            loss_sum += loss;
            batches += 1;
        }
        let val_dice = validation_dice(&net, val, cfg.batch_size)?;
        let improved = best.as_ref().map_or(true, |(_, _, d)| val_dice > *d);
        if improved {
            best = Some((net.clone(), epoch, val_dice));
        }
        let rec = EpochRecord { epoch, train_loss: loss_sum / batches as f64, val_dice, improved };
        on_epoch(&rec);
        epochs.push(rec);
    }
    let (best_net, best_epoch, best_val_dice) = match best {
        Some(b) => b,
        None => {
            let d = validation_dice(&net, val, cfg.batch_size)?;
            (net, 0, d)
        }
    };
    Ok((best_net, TrainReport { block_id: cfg.block_id, epochs, best_epoch, best_val_dice }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::nn::Arch;

    fn disc_dataset(n: usize, size: usize) -> BlockDataset {
        let pairs = (0..n)
            .map(|i| {
                let cx = size as f64 / 2.0 + (i % 3) as f64 - 1.0;
                let cy = size as f64 / 2.0 + (i % 5) as f64 * 0.5 - 1.0;
                let r = size as f64 * (0.2 + 0.02 * (i % 4) as f64);
                let mask = Grid::from_fn(size, size, |y, x| {
                    let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                    u8::from(d < r)
                });
                (mask.map(|m| if m == 1 { 1.0 } else { 0.1 }), mask)
            })
            .collect();
        BlockDataset { block_id: 0, pairs }
    }

    #[test]
    fn split_counts() {
        let (t, v) = split_indices(10, 0.2, 1).unwrap();
        assert_eq!((t.len(), v.len()), (8, 2));
        let (t, v) = split_indices(4080, 0.2, 7).unwrap();
        assert_eq!((t.len(), v.len()), (3264, 816));
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..4080).collect::<Vec<_>>());
        assert_eq!(split_indices(4080, 0.2, 7).unwrap(), (t, v));
        assert_eq!(split_indices(1, 0.2, 0), Err(TrainError::TooFewSamples(1)));
        let (t, v) = split_indices(2, 0.2, 0).unwrap();
        assert_eq!((t.len(), v.len()), (1, 1));
    }

    fn small_cfg(lr: f64, epochs: usize) -> TrainConfig {
        TrainConfig {
            block_id: 0,
            net: NetConfig { arch: Arch::Unet, depth: 1, base_channels: 2, seed: 3 },
            epochs,
            lr,
            batch_size: 2,
            val_fraction: 0.25,
            seed: 5,
            dice_reduction: DiceReduction::Batch,
        }
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let ds = disc_dataset(8, 8);
        let (tr, va) = split(&ds, 0.25, 1).unwrap();
        let cfg = small_cfg(0.0, 3);
        let (net, report) = train_block(&tr, &va, &cfg).unwrap();
        let init = Network::new(cfg.net).unwrap();
        for (trained, fresh) in net.layers().iter().zip(init.layers()) {
            assert_eq!(trained.weight, fresh.weight);
            assert_eq!(trained.bias, fresh.bias);
        }
        let d0 = report.epochs[0].val_dice;
        assert!(report.epochs.iter().all(|e| e.val_dice == d0));
        assert_eq!(report.best_epoch, 0);
    }

    #[test]
    fn training_is_deterministic_and_monotone() {
        let ds = disc_dataset(8, 8);
        let (tr, va) = split(&ds, 0.25, 1).unwrap();
        let cfg = small_cfg(1e-2, 4);
        let (a, ra) = train_block(&tr, &va, &cfg).unwrap();
        let (b, rb) = train_block(&tr, &va, &cfg).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
        let best = ra.epochs.iter().map(|e| e.val_dice).fold(f64::MIN, f64::max);
        assert_eq!(ra.best_val_dice, best);
        let mut persisted = f64::MIN;
        for e in &ra.epochs {
            if e.improved {
                assert!(e.val_dice > persisted);
                persisted = e.val_dice;
            }
        }
        assert_eq!(ra.to_json_lines().lines().count(), 4);
    }

    #[test]
    fn bad_config_is_rejected() {
        let ds = disc_dataset(4, 8);
        let mut cfg = small_cfg(1e-3, 1);
        cfg.val_fraction = 1.0;
        assert!(matches!(train_block(&ds, &ds, &cfg), Err(TrainError::BadConfig(_))));
        cfg.val_fraction = 0.2;
        cfg.batch_size = 0;
        assert!(matches!(train_block(&ds, &ds, &cfg), Err(TrainError::BadConfig(_))));
    }

    #[test]
    fn divergence_is_detected() {
        let mut ds = disc_dataset(4, 8);
        ds.pairs[0].0.set(0, 0, f64::NAN);
        let cfg = small_cfg(1e-3, 1);
        let order_independent = train_block(&ds, &ds, &cfg);
        assert!(matches!(order_independent, Err(TrainError::DivergenceDetected { .. })));
    }
}
