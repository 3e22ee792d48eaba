//! Classification metrics (accuracy, macro precision/recall, confusion
//! matrix) and the per-round time profile.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqnet::{forward, predict, EncodedBatch, ForwardMode, ModelParameters};
use crate::textproc::{EmbeddingMatrix, EncodedSample, NUM_CLASSES};

const EVAL_CHUNK: usize = 64;

/// Number of samples an inference profile averages over.
pub const INFERENCE_PROFILE_SAMPLES: usize = 100;

/// Evaluation summary for one model on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    /// confusion[true_class][predicted_class]
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
    pub n_samples: usize,
}

/// Wall-clock profile of one round, split into the four disjoint categories
/// plus the per-sample inference time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TimeProfile {
    pub training_ms: f64,
    pub overhead_ms: f64,
    pub upload_ms: f64,
    pub download_ms: f64,
    pub inference_us_per_sample: f64,
}

/// Accumulates the raw durations a round runner measures.
#[derive(Debug, Clone, Copy, Default)]
pub struct RoundTimers {
    pub training: Duration,
    pub overhead: Duration,
    pub upload: Duration,
    pub download: Duration,
    pub inference_us_per_sample: f64,
}

impl RoundTimers {
    pub fn add_training(&mut self, d: Duration) {
        self.training += d;
    }

    pub fn add_overhead(&mut self, d: Duration) {
        self.overhead += d;
    }

    pub fn add_upload(&mut self, d: Duration) {
        self.upload += d;
    }

    pub fn add_download(&mut self, d: Duration) {
        self.download += d;
    }
}

/// Converts accumulated timers into the reported profile.
pub fn profile_round(timers: &RoundTimers) -> TimeProfile {
    let ms = |d: Duration| d.as_secs_f64() * 1e3;
    TimeProfile {
        training_ms: ms(timers.training),
        overhead_ms: ms(timers.overhead),
        upload_ms: ms(timers.upload),
        download_ms: ms(timers.download),
        inference_us_per_sample: timers.inference_us_per_sample,
    }
}

fn confusion_matrix(
    params: &ModelParameters,
    embedding: &EmbeddingMatrix,
    testset: &[EncodedSample],
) -> Result<[[usize; NUM_CLASSES]; NUM_CLASSES]> {
    let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for chunk in testset.chunks(EVAL_CHUNK) {
        let members: Vec<&EncodedSample> = chunk.iter().collect();
        let batch = EncodedBatch::from_samples(&members, NUM_CLASSES)?;
        let (scores, _) = forward(params, embedding, &batch, ForwardMode::Eval)?;
        for (i, sample) in chunk.iter().enumerate() {
            let row = scores.row(i);
            let mut best = 0;
            for c in 1..NUM_CLASSES {
                if row[c] > row[best] {
                    best = c;
                }
            }
            confusion[sample.label][best] += 1;
        }
    }
    Ok(confusion)
}

/// Evaluates argmax predictions: per-class precision TP/(TP+FP) and recall
/// TP/(TP+FN), with 0/0 → 0; macro averages are unweighted means over the
/// three classes.
pub fn evaluate(
    params: &ModelParameters,
    embedding: &EmbeddingMatrix,
    testset: &[EncodedSample],
) -> Result<EvalReport> {
    if testset.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let confusion = confusion_matrix(params, embedding, testset)?;
    Ok(report_from_confusion(confusion, testset.len()))
}

pub(crate) fn report_from_confusion(
    confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
    n_samples: usize,
) -> EvalReport {
    let trace: usize = (0..NUM_CLASSES).map(|c| confusion[c][c]).sum();
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };

    let mut precision_sum = 0.0;
    let mut recall_sum = 0.0;
    for (c, row) in confusion.iter().enumerate() {
        let tp = row[c];
        let predicted: usize = (0..NUM_CLASSES).map(|t| confusion[t][c]).sum();
        let actual: usize = row.iter().sum();
        precision_sum += ratio(tp, predicted);
        recall_sum += ratio(tp, actual);
    }

    EvalReport {
        accuracy: trace as f64 / n_samples as f64,
        macro_precision: precision_sum / NUM_CLASSES as f64,
        macro_recall: recall_sum / NUM_CLASSES as f64,
        confusion,
        n_samples,
    }
}

/// Wall-clock mean over exactly 100 single-sample predictions, in
/// microseconds, with one warm-up prediction excluded.
pub fn profile_inference(
    params: &ModelParameters,
    embedding: &EmbeddingMatrix,
    samples: &[EncodedSample],
) -> Result<f64> {
    if samples.len() != INFERENCE_PROFILE_SAMPLES {
        return Err(Error::SampleCount {
            expected: INFERENCE_PROFILE_SAMPLES,
            actual: samples.len(),
        });
    }
    predict(params, embedding, &samples[0].token_ids)?; // warm-up
    let start = Instant::now();
    for sample in samples {
        predict(params, embedding, &sample.token_ids)?;
    }
    Ok(start.elapsed().as_secs_f64() * 1e6 / INFERENCE_PROFILE_SAMPLES as f64)
}
