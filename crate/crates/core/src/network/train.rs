//! Mini-batch training with class-balanced batches and early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::model::{batch_gradients, bce, is_correct, predict, Example};
use super::params::{DetectorParams, Formulation, Geometry, InputNorm};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub l2: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Defaults to one pass over the larger class.
    pub batches_per_epoch: Option<usize>,
    pub normalize_input: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 50,
            patience: 10,
            l2: super::model::DEFAULT_L2,
            adam: AdamConfig::default(),
            seed: 0,
            batches_per_epoch: None,
            normalize_input: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Running accuracy over the epoch's batches, before each update.
    pub train_accuracy: f64,
    pub validation_accuracy: Option<f64>,
    pub validation_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: Option<usize>,
}

/// Fraction of clips with `|y - y_true| < 0.5`, and mean cross-entropy.
pub fn accuracy(data: &[Example], params: &DetectorParams) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for ex in data {
        let y = predict(&ex.patch, &ex.context, params)?;
        correct += is_correct(y, ex.label) as usize;
        loss += bce(y, ex.label);
    }
    Ok((correct as f64 / data.len() as f64, loss / data.len() as f64))
}

fn input_norm(data: &[Example]) -> InputNorm {
    let n: usize = data.iter().map(|e| e.patch.values.len()).sum();
    let mean = data.iter().flat_map(|e| &e.patch.values).sum::<f64>() / n as f64;
    let var = data
        .iter()
        .flat_map(|e| &e.patch.values)
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
    InputNorm { shift: mean, scale }
}

/// Parameters before the first update: seeded initialization plus the
/// input normalization fitted on `data`.
pub fn initial_params(
    data: &[Example],
    geometry: Geometry,
    formulation: Formulation,
    cfg: &TrainConfig,
) -> Result<DetectorParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = DetectorParams::init(geometry, formulation, &mut rng)?;
    if cfg.normalize_input && !data.is_empty() {
        params.input_norm = input_norm(data);
    }
    Ok(params)
}

/// Trains a detector. Each batch holds equal numbers of positives and
/// negatives drawn without replacement from per-class shuffles. When a
/// validation set is given, the parameters of the epoch with the best
/// validation accuracy (ties: lower validation loss) are returned and
/// training stops after `patience` epochs without improvement.
pub fn train(
    data: &[Example],
    validation: &[Example],
    geometry: Geometry,
    formulation: Formulation,
    cfg: &TrainConfig,
) -> Result<(DetectorParams, TrainingHistory)> {
    let pos: Vec<usize> = (0..data.len()).filter(|&i| data[i].label).collect();
    let neg: Vec<usize> = (0..data.len()).filter(|&i| !data[i].label).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Training(format!(
            "need both classes, got {} positives and {} negatives",
            pos.len(),
            neg.len()
        )));
    }
    if cfg.batch_size < 2 {
        return Err(Error::Config("batch size must be at least 2".into()));
    }
    let mut params = initial_params(data, geometry, formulation, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut adam = AdamState::new(&params.weights, cfg.adam);
    let half = cfg.batch_size / 2;
    let per_epoch = cfg
        .batches_per_epoch
        .unwrap_or_else(|| pos.len().max(neg.len()).div_ceil(half));

    let mut pos_order = ClassCursor::new(pos);
    let mut neg_order = ClassCursor::new(neg);
    let mut history = TrainingHistory::default();
    let mut best: Option<(f64, f64, DetectorParams)> = None;
    let mut since_best = 0usize;
    let mut batch: Vec<Example> = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.max_epochs {
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for _ in 0..per_epoch {
            batch.clear();
            for _ in 0..half {
                batch.push(data[pos_order.next(&mut rng)].clone());
                batch.push(data[neg_order.next(&mut rng)].clone());
            }
            let r = batch_gradients(&batch, &params, cfg.l2)?;
            adam_step(&mut params.weights, &r.grads, &mut adam)?;
            loss_sum += r.loss;
            correct += r.correct;
            seen += batch.len();
        }
        let mut record = EpochRecord {
            epoch,
            train_loss: loss_sum / per_epoch.max(1) as f64,
            train_accuracy: correct as f64 / seen.max(1) as f64,
            validation_accuracy: None,
            validation_loss: None,
        };
        if !validation.is_empty() {
            let (acc, vloss) = accuracy(validation, &params)?;
            record.validation_accuracy = Some(acc);
            record.validation_loss = Some(vloss);
            let improved = match &best {
                None => true,
                Some((a, l, _)) => acc > *a || (acc == *a && vloss < *l),
            };
            if improved {
                best = Some((acc, vloss, params.clone()));
                history.best_epoch = Some(epoch);
                since_best = 0;
            } else {
                since_best += 1;
            }
        } else {
            history.best_epoch = Some(epoch);
        }
        history.epochs.push(record);
        if !validation.is_empty() && since_best >= cfg.patience {
            break;
        }
    }
    if let Some((_, _, p)) = best {
        params = p;
    }
    Ok((params, history))
}

struct ClassCursor {
    order: Vec<usize>,
    pos: usize,
}

impl ClassCursor {
    fn new(order: Vec<usize>) -> Self {
        let pos = order.len();
        Self { order, pos }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}
