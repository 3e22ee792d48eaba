//! One local training epoch and single-sample prediction.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;
use crate::textproc::{EmbeddingMatrix, EncodedSample};

use super::adam::{adam_step, AdamState};
use super::backward::loss_and_gradients;
use super::forward::{forward, EncodedBatch, ForwardMode};
use super::ModelParameters;

const SHUFFLE_TAG: u64 = 0x51;
const DROPOUT_TAG: u64 = 0xd0;

/// Hyperparameters for one local epoch. The seed fixes both the shard order
/// and the per-batch dropout masks, so a round is reproducible regardless of
/// when or where the client runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// Exactly one pass over the shard in batches of `batch_size` (the final
/// partial batch included), starting from a fresh optimizer. Returns the
/// updated copy; the input is untouched.
pub fn train_local_epoch(
    global_params: &ModelParameters,
    embedding: &EmbeddingMatrix,
    samples: &[EncodedSample],
    cfg: &LocalTrainConfig,
) -> Result<ModelParameters> {
    if samples.is_empty() {
        return Err(Error::EmptyShard);
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng::stream(&[cfg.seed, SHUFFLE_TAG]));

    let num_classes = global_params.arch().num_classes;
    let mut params = global_params.clone();
    let mut state = AdamState::new(&params);

    for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let members: Vec<&EncodedSample> = chunk.iter().map(|&i| &samples[i]).collect();
        let batch = EncodedBatch::from_samples(&members, num_classes)?;
        let mode = ForwardMode::Train {
            dropout_seed: rng::mix(&[cfg.seed, DROPOUT_TAG, batch_idx as u64]),
        };
        let (_, grads) = loss_and_gradients(&params, embedding, &batch, mode)?;
        let (next_params, next_state) = adam_step(&params, &grads, &state, cfg.learning_rate)?;
        params = next_params;
        state = next_state;
    }
    Ok(params)
}

/// Number of optimizer steps one epoch will apply.
pub fn steps_per_epoch(sample_count: usize, batch_size: usize) -> usize {
    sample_count.div_ceil(batch_size)
}

/// Argmax over the sigmoid class scores, ties broken by the lowest index.
pub fn predict(
    params: &ModelParameters,
    embedding: &EmbeddingMatrix,
    token_ids: &[usize],
) -> Result<usize> {
    let sample = EncodedSample {
        id: 0,
        token_ids: token_ids.to_vec(),
        label: 0,
    };
    let batch = EncodedBatch::from_samples(&[&sample], params.arch().num_classes)?;
    let (scores, _) = forward(params, embedding, &batch, ForwardMode::Eval)?;
    Ok(argmax_row(scores.row(0).as_slice().unwrap()))
}

/// Lowest index wins on ties.
pub fn argmax_row(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}
