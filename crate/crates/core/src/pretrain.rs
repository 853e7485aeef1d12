//! Masked-LM pre-training of the base model on a sentence corpus.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FastError, Result};
use crate::knowledge::{Tokenizer, MASK_ID};
use crate::model::{MicroTransformer, SeqBatch};
use crate::numerics::{AdamConfig, AdamState, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate reached at the end of the run, as a fraction of `lr` (linear decay).
    pub final_lr_fraction: f64,
    pub mask_rate: f64,
    /// Fraction of sentences held out for the accuracy check.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 3,
            batch_size: 32,
            lr: 2e-3,
            final_lr_fraction: 0.1,
            mask_rate: 0.15,
            holdout: 0.05,
            seed: 7,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(FastError::Validation("batch_size must be >= 1".into()));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate <= 1.0) {
            return Err(FastError::Validation(format!("mask_rate {} outside (0, 1]", self.mask_rate)));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(FastError::Validation(format!("holdout {} outside [0, 1)", self.holdout)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(FastError::Validation(format!("lr {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(FastError::Validation(format!(
                "final_lr_fraction {} outside [0, 1]",
                self.final_lr_fraction
            )));
        }
        Ok(())
    }
}

/// Progress carried across resumed runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub epochs_completed: usize,
    /// Mean loss of the last completed epoch; NaN before any training.
    pub last_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub train_sentences: usize,
    pub heldout_sentences: usize,
    pub epochs: Vec<EpochLog>,
    pub final_loss: f64,
    pub heldout_accuracy: f64,
    pub heldout_masks: usize,
    pub state: TrainingState,
}

/// Masked copy of `tokens` plus the masked positions and their original ids.
/// At least one position is always masked.
pub fn mask_tokens(tokens: &[usize], rate: f64, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut positions: Vec<usize> = (0..tokens.len()).filter(|_| rng.random::<f64>() < rate).collect();
    if positions.is_empty() && !tokens.is_empty() {
        positions.push(rng.random_range(0..tokens.len()));
    }
    let mut masked = tokens.to_vec();
    let targets = positions.iter().map(|&p| tokens[p]).collect();
    for &p in &positions {
        masked[p] = MASK_ID;
    }
    (masked, positions, targets)
}

/// Deterministic split into (train, held-out) by a seeded permutation.
pub fn split_holdout<T: Clone>(items: &[T], fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001));
    let n_held = (items.len() as f64 * fraction).round() as usize;
    let (held, train) = idx.split_at(n_held.min(items.len()));
    let mut held = held.to_vec();
    let mut train = train.to_vec();
    held.sort_unstable();
    train.sort_unstable();
    (
        train.iter().map(|&i| items[i].clone()).collect(),
        held.iter().map(|&i| items[i].clone()).collect(),
    )
}

pub fn encode_corpus(tokenizer: &Tokenizer, sentences: &[String], max_seq_len: usize) -> Result<Vec<Vec<usize>>> {
    sentences
        .iter()
        .map(|s| {
            let ids = tokenizer.encode(s)?;
            if ids.is_empty() || ids.len() > max_seq_len {
                return Err(FastError::Input(format!(
                    "sentence `{s}` has {} tokens; allowed 1..={max_seq_len}",
                    ids.len()
                )));
            }
            Ok(ids)
        })
        .collect()
}

struct MaskedBatch {
    batch: SeqBatch,
    rows: Vec<usize>,
    targets: Vec<usize>,
}

fn masked_batch(seqs: &[&Vec<usize>], rate: f64, rng: &mut impl Rng) -> MaskedBatch {
    let mut masked = Vec::with_capacity(seqs.len());
    let mut pos = Vec::new();
    let mut targets = Vec::new();
    for (i, s) in seqs.iter().enumerate() {
        let (m, p, t) = mask_tokens(s, rate, rng);
        masked.push(m);
        pos.extend(p.into_iter().map(|p| (i, p)));
        targets.extend(t);
    }
    let batch = SeqBatch::new(&masked);
    let rows = pos.iter().map(|&(i, p)| batch.row(i, p)).collect();
    MaskedBatch { batch, rows, targets }
}

/// Runs `config.epochs` further epochs of masked-LM training, continuing from `state`.
pub fn pretrain(
    model: &mut MicroTransformer,
    train: &[Vec<usize>],
    config: &PretrainConfig,
    state: TrainingState,
) -> Result<(Vec<EpochLog>, TrainingState)> {
    config.validate()?;
    if train.is_empty() && config.epochs > 0 {
        return Err(FastError::Input("training corpus is empty".into()));
    }
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr), &model.weights().iter());
    let mut logs = Vec::with_capacity(config.epochs);
    let mut state = state;
    let total_steps = (config.epochs * train.len().div_ceil(config.batch_size)).max(1);
    let mut step = 0usize;
    for _ in 0..config.epochs {
        let epoch = state.epochs_completed;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1 + epoch as u64));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut n_batches) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let seqs: Vec<&Vec<usize>> = chunk.iter().map(|&i| &train[i]).collect();
            let mb = masked_batch(&seqs, config.mask_rate, &mut rng);
            let mut tape = Tape::new();
            let w = model.weights().bind(&mut tape, true);
            let g = model.build_graph(&mut tape, &w, None, &mb.batch, &[])?;
            let logits = model.readout(&mut tape, &w, g.hidden, &mb.rows)?;
            let loss = tape.cross_entropy(logits, &mb.targets)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(FastError::Divergence {
                    stage: "pretrain",
                    iteration: epoch,
                    loss: value,
                });
            }
            let progress = step as f64 / total_steps as f64;
            adam.config.lr = config.lr * (1.0 - (1.0 - config.final_lr_fraction) * progress);
            step += 1;
            let grads = tape.backward(loss)?;
            let grad_list: Vec<_> = w
                .iter()
                .into_iter()
                .map(|&v| grads.get(v).expect("trainable parameter").clone())
                .collect();
            let grad_refs: Vec<_> = grad_list.iter().collect();
            adam.step(&mut model.weights_mut().iter_mut(), &grad_refs)?;
            loss_sum += value;
            n_batches += 1;
        }
        let loss = loss_sum / n_batches as f64;
        state = TrainingState {
            epochs_completed: epoch + 1,
            last_loss: loss,
        };
        logs.push(EpochLog { epoch, loss });
    }
    Ok((logs, state))
}

/// Top-1 accuracy at randomly masked positions, with masks drawn from `seed`.
pub fn mask_accuracy(model: &MicroTransformer, sentences: &[Vec<usize>], rate: f64, seed: u64) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut correct, mut total) = (0usize, 0usize);
    for chunk in sentences.chunks(64) {
        let seqs: Vec<&Vec<usize>> = chunk.iter().collect();
        let mb = masked_batch(&seqs, rate, &mut rng);
        let mut tape = Tape::new();
        let w = model.weights().bind(&mut tape, false);
        let g = model.build_graph(&mut tape, &w, None, &mb.batch, &[])?;
        let logits = model.readout(&mut tape, &w, g.hidden, &mb.rows)?;
        let values = tape.value(logits);
        for (r, &t) in mb.targets.iter().enumerate() {
            let row = values.row(r);
            let best = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .expect("nonempty vocabulary");
            correct += usize::from(best == t);
            total += 1;
        }
    }
    let acc = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
    Ok((acc, total))
}

/// Full pre-training stage: hold-out split, training, held-out accuracy.
pub fn train_base(
    model: &mut MicroTransformer,
    tokenizer: &Tokenizer,
    sentences: &[String],
    config: &PretrainConfig,
    state: TrainingState,
) -> Result<PretrainReport> {
    let encoded = encode_corpus(tokenizer, sentences, model.config().max_seq_len)?;
    let (train, held) = split_holdout(&encoded, config.holdout, config.seed);
    let (epochs, state) = pretrain(model, &train, config, state)?;
    let (heldout_accuracy, heldout_masks) = mask_accuracy(model, &held, config.mask_rate, config.seed ^ 0xacc)?;
    Ok(PretrainReport {
        train_sentences: train.len(),
        heldout_sentences: held.len(),
        final_loss: state.last_loss,
        epochs,
        heldout_accuracy,
        heldout_masks,
        state,
    })
}
